use crate::error::{Error, Result};

/// One flattened window and the state at its last step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Row-major sample matrix: `rows × dim` features and one label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMatrix {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
}

impl SampleMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.x.extend_from_slice(features);
        self.y.push(label);
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> SampleMatrix {
        let mut out = SampleMatrix::new(self.dim);
        out.x.reserve(idx.len() * self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    pub fn from_samples(samples: &[WindowedSample]) -> Result<Self> {
        let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
        let mut m = SampleMatrix::new(dim);
        for s in samples {
            if s.features.len() != dim {
                return Err(Error::Shape("samples differ in dimension".into()));
            }
            m.push(&s.features, s.label);
        }
        Ok(m)
    }
}

fn check(len: usize, n: usize, samples: &[f64], labels: &[usize], w: usize) -> Result<()> {
    if n == 0 || samples.len() != len * n || labels.len() != len {
        return Err(Error::Shape(format!(
            "{} samples and {} labels for {len} steps of {n} channels",
            samples.len(),
            labels.len()
        )));
    }
    if w == 0 || w > len {
        return Err(Error::invalid(format!("window {w} does not fit a trace of {len} steps")));
    }
    Ok(())
}

/// Every width-`w` window of a `len × n` trace. Features run oldest step
/// first, all channels of a step together; the label is the state at the
/// window's last step.
pub fn window_features(samples: &[f64], n: usize, labels: &[usize], w: usize) -> Result<Vec<WindowedSample>> {
    let len = labels.len();
    check(len, n, samples, labels, w)?;
    Ok((w - 1..len)
        .map(|t| WindowedSample {
            features: samples[(t + 1 - w) * n..(t + 1) * n].to_vec(),
            label: labels[t],
        })
        .collect())
}

/// [`window_features`] appended to a matrix, keeping every `stride`-th
/// window (counted from the first).
pub fn append_windows(
    out: &mut SampleMatrix,
    samples: &[f64],
    n: usize,
    labels: &[usize],
    w: usize,
    stride: usize,
) -> Result<()> {
    let len = labels.len();
    check(len, n, samples, labels, w)?;
    if out.dim != n * w {
        return Err(Error::Shape(format!("matrix has dimension {}, windows {}", out.dim, n * w)));
    }
    for t in (w - 1..len).step_by(stride.max(1)) {
        out.push(&samples[(t + 1 - w) * n..(t + 1) * n], labels[t]);
    }
    Ok(())
}
