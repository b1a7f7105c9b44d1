//! CSV traces and the JSON dataset manifest.
//!
//! A flight file has the header `t,<channel…>,state`; `t` is the integer step
//! index and `state` holds catalog names (optional for unlabeled inputs).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    expand_annotation, extract_change_points, Dataset, Flight, LabelSequence, MultivariateTrace,
    Schema, StateCatalog,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        Self {
            min_len: 200,
            max_len: 20_000,
        }
    }
}

impl LengthBounds {
    pub fn contains(&self, len: usize) -> bool {
        (self.min_len..=self.max_len).contains(&len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlightEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sample_period: f64,
    pub schema: Schema,
    pub states: StateCatalog,
    #[serde(default)]
    pub length_bounds: LengthBounds,
    pub flights: Vec<FlightEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn parse_err(path: &Path, message: String) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        message,
    }
}

/// Read one flight file. Labels are returned only when a catalog is given
/// and the file has a `state` column.
pub fn read_trace_csv(
    path: &Path,
    schema: &Arc<Schema>,
    sample_period: f64,
    catalog: Option<&StateCatalog>,
) -> Result<(MultivariateTrace, Option<LabelSequence>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(path, format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    let n = schema.len();
    if headers.get(0) != Some("t") {
        return Err(parse_err(path, "first column must be `t`".into()));
    }
    for (i, name) in schema.names().enumerate() {
        match headers.get(i + 1) {
            Some(h) if h == name => {}
            Some(h) => {
                return Err(parse_err(
                    path,
                    format!("column {} is `{h}`, expected `{name}`", i + 1),
                ))
            }
            None => return Err(parse_err(path, format!("missing column `{name}`"))),
        }
    }
    let has_state = match headers.get(n + 1) {
        None => false,
        Some("state") if headers.len() == n + 2 => true,
        Some(h) => return Err(parse_err(path, format!("unexpected column `{h}`"))),
    };

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(parse_err(path, format!("row {row}: {} fields", rec.len())));
        }
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, format!("row {row}: bad time step `{}`", &rec[0])))?;
        if t != row {
            return Err(parse_err(
                path,
                format!("row {row}: time step {t} breaks the even 0,1,2,… spacing"),
            ));
        }
        for c in 0..n {
            let cell = rec[c + 1].trim();
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    path,
                    format!("row {row}, column `{}`: non-numeric `{cell}`", &headers[c + 1]),
                )
            })?;
            samples.push(v);
        }
        if has_state {
            if let Some(cat) = catalog {
                let name = rec[n + 1].trim();
                let id = cat.id(name).ok_or_else(|| Error::UnknownState {
                    file: path.display().to_string(),
                    label: name.to_string(),
                })?;
                labels.push(id);
            }
        }
    }
    let trace = MultivariateTrace::new(schema.clone(), samples, sample_period)?;
    let labels = (has_state && catalog.is_some()).then(|| LabelSequence::dense(labels));
    Ok((trace, labels))
}

pub fn write_trace_csv(
    path: &Path,
    trace: &MultivariateTrace,
    labels: Option<(&LabelSequence, &StateCatalog)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, format!("{other:?}")),
    })?;
    let mut header = vec!["t".to_string()];
    header.extend(trace.schema().names().map(str::to_string));
    if labels.is_some() {
        header.push("state".into());
    }
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for t in 0..trace.len() {
        rec.clear();
        rec.push(t.to_string());
        // `Display` for f64 is the shortest string that parses back exactly.
        rec.extend(trace.row(t).iter().map(|v| v.to_string()));
        if let Some((seq, cat)) = labels {
            let id = seq.labels()[t];
            let name = cat
                .name(id)
                .ok_or_else(|| Error::invalid(format!("label {id} not in catalog")))?;
            rec.push(name.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load every flight listed in a manifest, dropping flights whose length
/// falls outside the manifest's bounds.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let schema = Arc::new(manifest.schema.clone());
    let catalog = Arc::new(manifest.states.clone());

    let loaded: Vec<Flight> = manifest
        .flights
        .par_iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let (trace, labels) =
                read_trace_csv(&path, &schema, manifest.sample_period, Some(&catalog))?;
            let labels =
                labels.ok_or_else(|| parse_err(&path, "missing column `state`".into()))?;
            let annotation = extract_change_points(&labels).map_err(|e| {
                parse_err(&path, format!("cannot derive change points: {e}"))
            })?;
            Ok(Flight {
                id: entry.id.clone(),
                trace,
                annotation,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let total = loaded.len();
    let kept: Vec<Flight> = loaded
        .into_iter()
        .filter(|f| manifest.length_bounds.contains(f.trace.len()))
        .collect();
    if kept.len() < total {
        log::info!(
            "{}: dropped {} of {} flights outside length bounds [{}, {}]",
            manifest_path.display(),
            total - kept.len(),
            total,
            manifest.length_bounds.min_len,
            manifest.length_bounds.max_len
        );
    }
    Dataset::new(schema, catalog, manifest.sample_period, kept)
}

/// Write `<dir>/<id>.csv` per flight plus `<dir>/manifest.json`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, bounds: LengthBounds) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.z());
    for f in dataset.flights() {
        let file = format!("{}.csv", f.id);
        let labels = expand_annotation(&f.annotation, f.trace.len())?;
        write_trace_csv(&dir.join(&file), &f.trace, Some((&labels, dataset.catalog())))?;
        entries.push(FlightEntry {
            id: f.id.clone(),
            file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        sample_period: dataset.sample_period(),
        schema: (**dataset.schema()).clone(),
        states: (**dataset.catalog()).clone(),
        length_bounds: bounds,
        flights: entries,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ChangePointAnnotation;

    fn flight(id: &str, len: usize, schema: &Arc<Schema>) -> Flight {
        let samples = (0..len * schema.len())
            .map(|i| ((i as f64) * 0.731).sin() * 1e3 / 7.0 + 1e-9 * i as f64)
            .collect();
        Flight {
            id: id.into(),
            trace: MultivariateTrace::new(schema.clone(), samples, 0.2).unwrap(),
            annotation: ChangePointAnnotation::from_pairs(&[(0, 0), (len / 2, 1)]).unwrap(),
        }
    }

    fn dataset(lens: &[usize]) -> Dataset {
        let schema = Arc::new(Schema::autopilot());
        let flights = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| flight(&format!("flight_{i}"), l, &schema))
            .collect();
        Dataset::new(
            schema,
            Arc::new(StateCatalog::new(["cruise", "climb", "land"]).unwrap()),
            0.2,
            flights,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_filters_short_flights() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&[210, 150, 260]);
        let path = save_dataset(&ds, dir.path(), LengthBounds::default()).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.z(), 2);
        assert_eq!(back.flights()[0], ds.flights()[0]);
        assert_eq!(back.flights()[1], ds.flights()[2]);
    }

    #[test]
    fn unknown_state_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&[220]);
        let path = save_dataset(&ds, dir.path(), LengthBounds::default()).unwrap();
        let csv = dir.path().join("flight_0.csv");
        let text = fs::read_to_string(&csv).unwrap().replace(",climb\n", ",hover\n");
        fs::write(&csv, text).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(&err, Error::UnknownState { label, .. } if label == "hover"), "{err}");
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&[220]);
        let path = save_dataset(&ds, dir.path(), LengthBounds::default()).unwrap();
        let csv = dir.path().join("flight_0.csv");
        let original = fs::read_to_string(&csv).unwrap();

        fs::write(&csv, original.replacen("rudder,", "", 1)).unwrap();
        assert!(load_dataset(&path).is_err());

        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        lines[5] = lines[5].replacen(',', ",abc,", 1);
        let mut fields: Vec<&str> = lines[5].split(',').collect();
        fields.remove(2);
        lines[5] = fields.join(",");
        fs::write(&csv, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");
    }

    #[test]
    fn prediction_inputs_may_omit_state() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&[30]);
        let path = dir.path().join("x.csv");
        write_trace_csv(&path, &ds.flights()[0].trace, None).unwrap();
        let (trace, labels) =
            read_trace_csv(&path, ds.schema(), 0.2, Some(ds.catalog())).unwrap();
        assert!(labels.is_none());
        assert_eq!(trace, ds.flights()[0].trace);
    }
}
