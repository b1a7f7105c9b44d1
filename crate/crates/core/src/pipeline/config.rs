use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{default_grid, BaselineOptions, BaselineSpec};
use crate::cpd::{CostKind, Method, DEFAULT_JUMP, DEFAULT_PENALTIES, DEFAULT_WINDOW_WIDTH};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_TAUS_S;
use crate::nn::{ModelConfig, Variant};
use crate::simgen::GenConfig;
use crate::trace::{load_dataset, Dataset, SplitFractions};

/// Where flights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Simgen(GenConfig),
    Manifest(PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Simgen(g) => crate::simgen::generate_dataset(g),
            DatasetSource::Manifest(p) => load_dataset(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdGrid {
    pub methods: Vec<Method>,
    pub costs: Vec<CostKind>,
    pub penalties: Vec<f64>,
    pub min_size: usize,
    pub jump: usize,
}

impl Default for CpdGrid {
    fn default() -> Self {
        Self {
            methods: vec![Method::BottomUp, Method::Window { width: DEFAULT_WINDOW_WIDTH }],
            costs: vec![CostKind::L1, CostKind::L2, CostKind::Linear, CostKind::Kernel { gamma: None }],
            penalties: DEFAULT_PENALTIES.to_vec(),
            min_size: 2,
            jump: DEFAULT_JUMP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlGrid {
    pub specs: Vec<BaselineSpec>,
    pub options: BaselineOptions,
}

impl Default for MlGrid {
    fn default() -> Self {
        Self {
            specs: default_grid(),
            options: BaselineOptions::default(),
        }
    }
}

fn over_desk<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(ModelConfig::desk()).map_err(D::Error::custom)?;
    match (given, &mut base) {
        (serde_json::Value::Object(keys), serde_json::Value::Object(b)) => b.extend(keys),
        (other, _) => return Err(D::Error::custom(format!("model must be an object, got {other}"))),
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

/// One end-to-end comparison run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; the simulator, split, model and trees derive from it.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub split: SplitFractions,
    /// Keys given here override [`ModelConfig::desk`].
    #[serde(deserialize_with = "over_desk")]
    pub model: ModelConfig,
    /// Architectures trained on the same split; the first is the reference.
    pub variants: Vec<Variant>,
    pub cpd: CpdGrid,
    pub ml: MlGrid,
    pub taus_s: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSource::Simgen(GenConfig::default()),
            split: SplitFractions::default(),
            model: ModelConfig::desk(),
            variants: vec![Variant::Hybrid],
            cpd: CpdGrid::default(),
            ml: MlGrid::default(),
            taus_s: DEFAULT_TAUS_S.to_vec(),
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("no model variants to train"));
        }
        if self.taus_s.is_empty() || self.taus_s.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("tolerances must be a non-empty list of positive seconds"));
        }
        let c = &self.cpd;
        if c.methods.is_empty() || c.costs.is_empty() || c.penalties.is_empty() {
            return Err(Error::invalid("change-point grid is empty"));
        }
        if self.ml.specs.is_empty() {
            return Err(Error::invalid("classical baseline grid is empty"));
        }
        if let DatasetSource::Manifest(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::invalid(format!("manifest {} does not exist", p.display())));
            }
        }
        c.costs.iter().try_for_each(|k| k.validate())?;
        for v in &self.variants {
            self.model.with_variant(*v).validate()?;
        }
        Ok(())
    }

    /// The model configuration actually trained for `variant`.
    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.with_variant(variant)
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Simgen(g) => DatasetSource::Simgen(GenConfig {
                seed: self.seed,
                ..g.clone()
            })
            .load(),
            other => other.load(),
        }
    }

    /// Stable digest of everything that affects results.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c)?;
        let h = json
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        Ok(format!("{h:016x}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let text = r#"{
          "seed": 7,
          "dataset": {"simgen": {"count": 60}},
          "variants": ["hybrid", "rnn_only", "cnn_only"],
          "model": {"max_epochs": 40},
          "cpd": {
            "methods": [{"method": "bottom_up"}, {"method": "window", "width": 100}],
            "costs": [{"kind": "l2"}, {"kind": "kernel"}],
            "penalties": [100, 500, 1000]
          },
          "taus_s": [1, 3, 5],
          "out_dir": "results"
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::from_json_file(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.variants.len(), 3);
        assert_eq!(cfg.model.max_epochs, 40);
        assert_eq!(cfg.model.gru_stack, ModelConfig::desk().gru_stack);
        assert_eq!(cfg.cpd.costs[1], CostKind::Kernel { gamma: None });
        assert_eq!(cfg.ml, MlGrid::default());
        let DatasetSource::Simgen(g) = &cfg.dataset else { panic!() };
        assert_eq!(g.count, 60);
    }

    #[test]
    fn fingerprint_ignores_the_output_directory() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }
}
