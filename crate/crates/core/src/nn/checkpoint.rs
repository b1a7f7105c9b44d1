//! Versioned checkpoint files and inference.
//!
//! Layout: the line `STATECKPT <version>`, a line holding the byte length
//! of a JSON header, the header itself and a newline, then every tensor as
//! contiguous little-endian IEEE-754 values in header order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{argmax_rows, Model, ModelConfig, TensorInfo};
use super::train::History;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::{Dataset, LabelSequence, MultivariateTrace, NormStats, Schema, StateCatalog};

pub const CHECKPOINT_MAGIC: &str = "STATECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with everything needed to use it on raw traces.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub norm: NormStats,
    pub schema: Arc<Schema>,
    pub catalog: Arc<StateCatalog>,
    pub sample_period: f64,
    pub history: History,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    #[serde(flatten)]
    info: TensorInfo,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    n_inputs: usize,
    norm: NormStats,
    schema: Schema,
    states: StateCatalog,
    sample_period: f64,
    history: History,
    tensors: Vec<TensorEntry>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

/// The element type a checkpoint file was saved with.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0.dtype)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().and_then(|l| std::str::from_utf8(l).ok()).unwrap_or("");
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len: usize = lines
        .next()
        .and_then(|l| std::str::from_utf8(l).ok())
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("missing header length"))?;
    let start = magic.len() + 1 + bytes[magic.len() + 1..].iter().position(|&b| b == b'\n').unwrap_or(0) + 1;
    let end = start + len;
    if bytes.len() < end + 1 || bytes[end] != b'\n' {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[start..end])?;
    Ok((header, end + 1))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .model
            .tensor_info()
            .into_iter()
            .map(|info| {
                let e = TensorEntry { offset, info };
                offset += e.info.shape.iter().product::<usize>() * T::BYTES;
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.into(),
            config: self.model.config().clone(),
            n_inputs: self.model.n_inputs(),
            norm: self.norm.clone(),
            schema: (*self.schema).clone(),
            states: (*self.catalog).clone(),
            sample_period: self.sample_period,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec_pretty(&header)?;
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.push(b'\n');
        for t in self.model.tensors() {
            t.iter().for_each(|v| v.write_le(&mut out));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (h, body) = parse_header(&bytes)?;
        if h.dtype != T::DTYPE {
            return Err(bad(format!("file holds {} weights, {} requested", h.dtype, T::DTYPE)));
        }
        let mut model = Model::<T>::new(&h.config, h.n_inputs)?;
        let expected = model.tensor_info();
        if expected.len() != h.tensors.len() {
            return Err(bad(format!("{} tensors stored, config needs {}", h.tensors.len(), expected.len())));
        }
        let mut values = Vec::with_capacity(expected.len());
        for (want, got) in expected.iter().zip(&h.tensors) {
            if *want != got.info {
                return Err(bad(format!("tensor `{}` {:?} does not fit `{}` {:?}", got.info.name, got.info.shape, want.name, want.shape)));
            }
            let n: usize = want.shape.iter().product();
            let start = body + got.offset;
            let block = bytes
                .get(start..start + n * T::BYTES)
                .ok_or_else(|| bad(format!("tensor `{}` truncated", want.name)))?;
            values.push(block.chunks_exact(T::BYTES).map(T::read_le).collect());
        }
        model.set_tensors(values)?;
        if h.norm.n_channels() != h.n_inputs || h.schema.len() != h.n_inputs {
            return Err(bad("normalization stats or schema disagree with the input width"));
        }
        if h.states.len() != h.config.n_states {
            return Err(bad("state catalog disagrees with the output width"));
        }
        Ok(Self {
            model,
            norm: h.norm,
            schema: Arc::new(h.schema),
            catalog: Arc::new(h.states),
            sample_period: h.sample_period,
            history: h.history,
        })
    }

    fn check_schema(&self, schema: &Schema) -> Result<()> {
        if *schema != *self.schema {
            return Err(Error::Schema("trace schema differs from the checkpoint's".into()));
        }
        Ok(())
    }

    /// Normalized model input for the first `len` steps of `trace`.
    pub fn inputs(&self, trace: &MultivariateTrace, len: usize) -> Result<Vec<T>> {
        self.check_schema(trace.schema())?;
        let n = trace.n_channels();
        let mut row = vec![0.0; n];
        let mut out = Vec::with_capacity(len * n);
        for t in 0..len {
            self.norm.apply_row(trace.row(t), &mut row);
            out.extend(row.iter().map(|&v| T::lit(v)));
        }
        Ok(out)
    }

    /// Class probabilities (`len × n_states`) for every step of `trace`.
    pub fn probabilities(&self, trace: &MultivariateTrace) -> Result<Vec<T>> {
        self.model.forward(&self.inputs(trace, trace.len())?, trace.len())
    }

    /// Most probable state per step; ties go to the lowest id.
    pub fn predict_states(&self, trace: &MultivariateTrace) -> Result<LabelSequence> {
        let p = self.probabilities(trace)?;
        Ok(LabelSequence::dense(argmax_rows(&p, self.model.n_states())))
    }

    /// Prediction for a padded trace whose valid steps are the `true`
    /// prefix of `mask`. Padded steps get the catalog's pad id.
    pub fn predict_masked(&self, trace: &MultivariateTrace, mask: &[bool]) -> Result<LabelSequence> {
        if mask.len() != trace.len() {
            return Err(Error::Shape(format!("mask of {} for {} steps", mask.len(), trace.len())));
        }
        let valid = mask.iter().take_while(|&&m| m).count();
        if mask[valid..].iter().any(|&m| m) {
            return Err(Error::invalid("mask must be a true prefix"));
        }
        let mut labels = if valid == 0 {
            Vec::new()
        } else {
            let p = self.model.forward(&self.inputs(trace, valid)?, valid)?;
            argmax_rows(&p, self.model.n_states())
        };
        labels.resize(trace.len(), self.catalog.pad_id());
        LabelSequence::new(labels, mask.to_vec())
    }

    /// Predictions for every flight, in dataset order.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<LabelSequence>> {
        ds.flights().par_iter().map(|f| self.predict_states(&f.trace)).collect()
    }
}
