use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::{generate_flight_plan, PlanConstraints};
use super::sim::{simulate_flight, AircraftParams, CatalogLevel, CONTROL_PERIOD};
use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{save_dataset, LengthBounds};
use crate::trace::{Dataset, Flight, Schema};

/// Which stock airframe a configuration starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    A,
    B,
}

impl Variant {
    pub fn params(&self) -> AircraftParams {
        match self {
            Variant::A => AircraftParams::variant_a(),
            Variant::B => AircraftParams::variant_b(),
        }
    }
}

/// Synthetic dataset recipe, read from JSON by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    /// Flights outside these bounds are re-drawn with a fresh plan.
    pub length_bounds: LengthBounds,
    pub variant: Variant,
    /// Overrides the variant's stock parameters when set.
    pub params: Option<AircraftParams>,
    /// Relative per-flight spread applied to gains, speeds and rates.
    pub jitter: f64,
    pub constraints: PlanConstraints,
    pub catalog: CatalogLevel,
    pub id_prefix: String,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 120,
            seed: 0,
            length_bounds: LengthBounds {
                min_len: 800,
                max_len: 2500,
            },
            variant: Variant::A,
            params: None,
            jitter: 0.1,
            constraints: PlanConstraints::default(),
            catalog: CatalogLevel::Standard,
            id_prefix: "flight".into(),
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn variant_b() -> Self {
        Self {
            variant: Variant::B,
            id_prefix: "flight_b".into(),
            ..Self::default()
        }
    }

    pub fn base_params(&self) -> AircraftParams {
        self.params.clone().unwrap_or_else(|| self.variant.params())
    }
}

fn generate_one(cfg: &GenConfig, base: &AircraftParams, schema: &Arc<Schema>, i: usize) -> Result<Flight> {
    let id = format!("{}_{:04}", cfg.id_prefix, i);
    let flight_seed = rng::derive_seed(cfg.seed, "simgen", i as u64);
    for attempt in 0..cfg.max_attempts as u64 {
        let seed = rng::derive_seed(flight_seed, "attempt", attempt);
        let plan = generate_flight_plan(seed, &cfg.constraints)?;
        let params = base.jittered(cfg.jitter, &mut rng::stream(seed, "params", 0));
        match simulate_flight(&plan, &params, cfg.catalog, seed, schema) {
            Ok((trace, annotation)) if cfg.length_bounds.contains(trace.len()) => {
                return Ok(Flight {
                    id,
                    trace,
                    annotation,
                });
            }
            Ok(_) | Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::invalid(format!(
        "flight {id}: no plan within {:?} after {} attempts",
        cfg.length_bounds, cfg.max_attempts
    )))
}

/// Simulate `cfg.count` flights. Flight `i` depends only on `(seed, i)`, so
/// the result is independent of the thread count.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let base = cfg.base_params();
    base.validate()?;
    if !(0.0..0.5).contains(&cfg.jitter) {
        return Err(Error::invalid("jitter must lie in [0, 0.5)"));
    }
    let schema = Arc::new(Schema::autopilot());
    let flights = (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_one(cfg, &base, &schema, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(schema, Arc::new(cfg.catalog.catalog()), CONTROL_PERIOD, flights)
}

/// Generate and write `<dir>/manifest.json` plus one CSV per flight.
pub fn generate_dataset_to(cfg: &GenConfig, dir: &Path) -> Result<(Dataset, PathBuf)> {
    let ds = generate_dataset(cfg)?;
    let manifest = save_dataset(&ds, dir, LengthBounds::default())?;
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::load_dataset;

    fn small(count: usize, seed: u64) -> GenConfig {
        GenConfig {
            count,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, manifest) = generate_dataset_to(&small(4, 1), dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.z(), 4);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 5);
        for (a, b) in ds.flights().iter().zip(back.flights()) {
            assert_eq!(a.trace.samples(), b.trace.samples());
            assert_eq!(a.annotation, b.annotation);
        }
    }

    #[test]
    fn lengths_within_bounds_and_deterministic() {
        let a = generate_dataset(&small(6, 3)).unwrap();
        let b = generate_dataset(&small(6, 3)).unwrap();
        for (x, y) in a.flights().iter().zip(b.flights()) {
            assert!((800..=2500).contains(&x.trace.len()));
            assert_eq!(x.trace.samples(), y.trace.samples());
        }
    }

    #[test]
    fn variants_share_schema_and_catalog() {
        let a = GenConfig::default();
        let b = GenConfig::variant_b();
        assert_ne!(a.base_params().gains, b.base_params().gains);
        assert_ne!(a.base_params().climb_rate, b.base_params().climb_rate);
        let da = generate_dataset(&GenConfig { count: 2, ..a }).unwrap();
        let db = generate_dataset(&GenConfig { count: 2, ..b }).unwrap();
        assert_eq!(da.schema(), db.schema());
        assert_eq!(da.catalog(), db.catalog());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_dataset(&small(0, 0)).is_err());
    }
}
