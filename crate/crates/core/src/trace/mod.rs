//! Traces, state annotations and label sequences.
//!
//! A flight is recorded as a [`MultivariateTrace`]: `l_T` rows of `n`
//! synchronized channels sampled at a fixed period. Its ground truth is a
//! [`ChangePointAnnotation`], the sparse list of `(time step, entered state)`
//! pairs, which expands into a dense [`LabelSequence`].

mod io;
mod labels;
mod normalize;
mod split;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, read_trace_csv, save_dataset, write_trace_csv, FlightEntry, LengthBounds,
    Manifest, MANIFEST_VERSION,
};
pub use labels::{expand_annotation, extract_change_points, pad_and_mask};
pub use normalize::{normalize_channels, NormStats, MIN_STDDEV};
pub use split::{split_dataset, SplitFractions, SplitRecord};

/// Nominal autopilot control-loop period (5 Hz).
pub const DEFAULT_SAMPLE_PERIOD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    #[serde(default)]
    pub unit: String,
}

impl ChannelSpec {
    pub fn new(name: &str, kind: ChannelKind, unit: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            unit: unit.to_string(),
        }
    }
}

/// Ordered channel list shared by every trace of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChannelSpec>", into = "Vec<ChannelSpec>")]
pub struct Schema {
    channels: Vec<ChannelSpec>,
}

impl Schema {
    pub fn new(channels: Vec<ChannelSpec>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Schema("schema has no channels".into()));
        }
        let mut seen = HashSet::new();
        for c in &channels {
            if c.name.is_empty() || c.name == "t" || c.name == "state" {
                return Err(Error::Schema(format!("reserved or empty channel name `{}`", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate channel `{}`", c.name)));
            }
        }
        Ok(Self { channels })
    }

    /// The five autopilot inputs followed by the five actuator outputs.
    pub fn autopilot() -> Self {
        use ChannelKind::{Input, Output};
        Self::new(vec![
            ChannelSpec::new("pitch", Input, "deg"),
            ChannelSpec::new("roll", Input, "deg"),
            ChannelSpec::new("yaw", Input, "deg"),
            ChannelSpec::new("altitude", Input, "ft"),
            ChannelSpec::new("airspeed", Input, "kt"),
            ChannelSpec::new("elevator", Output, "norm"),
            ChannelSpec::new("aileron", Output, "norm"),
            ChannelSpec::new("rudder", Output, "norm"),
            ChannelSpec::new("throttle", Output, "norm"),
            ChannelSpec::new("flaps", Output, "norm"),
        ])
        .expect("static schema is valid")
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }
}

impl TryFrom<Vec<ChannelSpec>> for Schema {
    type Error = Error;
    fn try_from(v: Vec<ChannelSpec>) -> Result<Self> {
        Schema::new(v)
    }
}

impl From<Schema> for Vec<ChannelSpec> {
    fn from(s: Schema) -> Self {
        s.channels
    }
}

/// One flight: `len × n` samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateTrace {
    schema: Arc<Schema>,
    samples: Vec<f64>,
    sample_period: f64,
}

impl MultivariateTrace {
    pub fn new(schema: Arc<Schema>, samples: Vec<f64>, sample_period: f64) -> Result<Self> {
        let n = schema.len();
        if !samples.len().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "{} values do not fill rows of {} channels",
                samples.len(),
                n
            )));
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::invalid(format!("sample period {sample_period}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sample at step {}, channel `{}`",
                i / n,
                schema.channels()[i % n].name
            )));
        }
        Ok(Self {
            schema,
            samples,
            sample_period,
        })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.schema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.schema.len()
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_channels();
        &self.samples[t * n..(t + 1) * n]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().skip(c).step_by(self.n_channels()).copied()
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(self.schema.clone(), samples, self.sample_period)
    }
}

/// Ordered set of state names; the position of a name is its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct StateCatalog {
    names: Vec<String>,
}

impl StateCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Schema("a catalog needs at least two states".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::Schema(format!("empty or duplicate state name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Label carried by zero-padded steps. Never a catalog id.
    pub fn pad_id(&self) -> usize {
        self.names.len()
    }
}

impl TryFrom<Vec<String>> for StateCatalog {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        StateCatalog::new(v)
    }
}

impl From<StateCatalog> for Vec<String> {
    fn from(c: StateCatalog) -> Self {
        c.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChangePoint {
    pub t: usize,
    pub state: usize,
}

/// Sparse ground truth: the step at which each state is entered.
///
/// Always starts at `t = 0` with the initial state. Consecutive entries name
/// different states; a state may reappear later.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePointAnnotation {
    entries: Vec<ChangePoint>,
}

impl ChangePointAnnotation {
    pub fn new(entries: Vec<ChangePoint>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidAnnotation("empty annotation".into()))?;
        if first.t != 0 {
            return Err(Error::InvalidAnnotation(format!(
                "first entry at t={} (must be 0)",
                first.t
            )));
        }
        for w in entries.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::InvalidAnnotation(format!(
                    "times not strictly increasing at t={}",
                    w[1].t
                )));
            }
            if w[1].state == w[0].state {
                return Err(Error::InvalidAnnotation(format!(
                    "state {} repeated consecutively at t={}",
                    w[1].state, w[1].t
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(t, state)| ChangePoint { t, state })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ChangePoint] {
        &self.entries
    }

    pub fn initial_state(&self) -> usize {
        self.entries[0].state
    }

    /// Times of actual changes (the `t = 0` entry excluded).
    pub fn change_times(&self) -> Vec<usize> {
        self.entries.iter().skip(1).map(|e| e.t).collect()
    }

    pub fn n_changes(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn check_catalog(&self, catalog: &StateCatalog) -> Result<()> {
        match self.entries.iter().find(|e| e.state >= catalog.len()) {
            Some(e) => Err(Error::InvalidAnnotation(format!(
                "state id {} outside catalog of {}",
                e.state,
                catalog.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Dense per-step state ids plus a validity mask (a true prefix).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    labels: Vec<usize>,
    mask: Vec<bool>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if labels.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} mask flags",
                labels.len(),
                mask.len()
            )));
        }
        let valid = mask.iter().take_while(|&&m| m).count();
        if mask[valid..].iter().any(|&m| m) {
            return Err(Error::invalid("mask must be a true prefix"));
        }
        Ok(Self { labels, mask })
    }

    /// All steps valid.
    pub fn dense(labels: Vec<usize>) -> Self {
        let mask = vec![true; labels.len()];
        Self { labels, mask }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn valid_labels(&self) -> &[usize] {
        &self.labels[..self.valid_len()]
    }

    pub fn check_catalog(&self, catalog: &StateCatalog) -> Result<()> {
        match self.valid_labels().iter().find(|&&l| l >= catalog.len()) {
            Some(l) => Err(Error::invalid(format!(
                "label {l} outside catalog of {}",
                catalog.len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flight {
    pub id: String,
    pub trace: MultivariateTrace,
    pub annotation: ChangePointAnnotation,
}

impl Flight {
    pub fn labels(&self) -> LabelSequence {
        expand_annotation(&self.annotation, self.trace.len())
            .expect("flight annotations are validated on construction")
    }
}

/// A set of labeled flights sharing one schema and one catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<Schema>,
    catalog: Arc<StateCatalog>,
    sample_period: f64,
    flights: Vec<Flight>,
}

impl Dataset {
    pub fn new(
        schema: Arc<Schema>,
        catalog: Arc<StateCatalog>,
        sample_period: f64,
        flights: Vec<Flight>,
    ) -> Result<Self> {
        for f in &flights {
            if **f.trace.schema() != *schema {
                return Err(Error::Schema(format!("flight `{}` has a different schema", f.id)));
            }
            if f.trace.sample_period() != sample_period {
                return Err(Error::Schema(format!(
                    "flight `{}` sampled at {} s, dataset at {} s",
                    f.id,
                    f.trace.sample_period(),
                    sample_period
                )));
            }
            f.annotation.check_catalog(&catalog)?;
            if let Some(last) = f.annotation.entries().last() {
                if last.t >= f.trace.len() {
                    return Err(Error::InvalidAnnotation(format!(
                        "flight `{}`: change at t={} beyond length {}",
                        f.id,
                        last.t,
                        f.trace.len()
                    )));
                }
            }
        }
        Ok(Self {
            schema,
            catalog,
            sample_period,
            flights,
        })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn catalog(&self) -> &Arc<StateCatalog> {
        &self.catalog
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn flights(&self) -> &[Flight] {
        &self.flights
    }

    /// Number of flights (`Z`).
    pub fn z(&self) -> usize {
        self.flights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flights.is_empty()
    }

    /// Longest flight (`L`, the padded length).
    pub fn max_len(&self) -> usize {
        self.flights.iter().map(|f| f.trace.len()).max().unwrap_or(0)
    }

    /// Same schema and catalog, a chosen subset of flights (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            catalog: self.catalog.clone(),
            sample_period: self.sample_period,
            flights: indices.iter().map(|&i| self.flights[i].clone()).collect(),
        }
    }

    pub(crate) fn with_flights(&self, flights: Vec<Flight>) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            catalog: self.catalog.clone(),
            sample_period: self.sample_period,
            flights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_rejects_duplicates() {
        let c = ChannelSpec::new("a", ChannelKind::Input, "");
        assert!(Schema::new(vec![c.clone(), c]).is_err());
        assert_eq!(Schema::autopilot().len(), 10);
    }

    #[test]
    fn annotation_invariants() {
        assert!(ChangePointAnnotation::from_pairs(&[]).is_err());
        assert!(ChangePointAnnotation::from_pairs(&[(1, 0)]).is_err());
        assert!(ChangePointAnnotation::from_pairs(&[(0, 0), (3, 0)]).is_err());
        assert!(ChangePointAnnotation::from_pairs(&[(0, 0), (3, 1), (3, 0)]).is_err());
        let a = ChangePointAnnotation::from_pairs(&[(0, 0), (3, 1), (5, 0)]).unwrap();
        assert_eq!(a.change_times(), vec![3, 5]);
        assert_eq!(a.n_changes(), 2);
    }

    #[test]
    fn trace_rejects_non_finite() {
        let schema = Arc::new(Schema::autopilot());
        let mut v = vec![0.0; 20];
        v[17] = f64::NAN;
        let err = MultivariateTrace::new(schema, v, 0.2).unwrap_err();
        assert!(err.to_string().contains("rudder"), "{err}");
    }

    #[test]
    fn label_mask_must_be_prefix() {
        assert!(LabelSequence::new(vec![0, 0, 0], vec![true, false, true]).is_err());
        let s = LabelSequence::new(vec![0, 1, 2], vec![true, true, false]).unwrap();
        assert_eq!(s.valid_len(), 2);
    }

    #[test]
    fn catalog_pad_id_is_outside() {
        let c = StateCatalog::new(["a", "b", "c"]).unwrap();
        assert_eq!(c.pad_id(), 3);
        assert!(c.name(c.pad_id()).is_none());
        assert!(StateCatalog::new(["a"]).is_err());
    }
}
