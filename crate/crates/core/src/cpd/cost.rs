use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::MultivariateTrace;

/// Row-major `len × dim` signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    data: Vec<f64>,
    len: usize,
    dim: usize,
}

impl Signal {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values, {} channels", data.len(), dim)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal value".into()));
        }
        Ok(Self {
            len: data.len() / dim,
            data,
            dim,
        })
    }

    pub fn from_trace(trace: &MultivariateTrace) -> Self {
        Self {
            data: trace.samples().to_vec(),
            len: trace.len(),
            dim: trace.n_channels(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    fn at(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.dim + c]
    }

    fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for t in 0..self.len {
            for (c, v) in self.row(t).iter().enumerate() {
                m[c] += v;
            }
        }
        let n = self.len.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Segment cost families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CostKind {
    L1,
    L2,
    /// Per-channel least-squares trend on the time index.
    Linear,
    /// Per-channel autoregression with intercept.
    Ar { order: usize },
    Gaussian,
    Rank,
    /// RBF kernel; `None` picks γ by the median heuristic.
    Kernel { gamma: Option<f64> },
}

pub const DEFAULT_AR_ORDER: usize = 4;
const GAUSSIAN_RIDGE: f64 = 1e-6;
const KERNEL_SUBSAMPLE: usize = 512;
const KERNEL_PREFIX_MAX_LEN: usize = 2600;

impl CostKind {
    pub fn name(&self) -> &'static str {
        match self {
            CostKind::L1 => "l1",
            CostKind::L2 => "l2",
            CostKind::Linear => "linear",
            CostKind::Ar { .. } => "ar",
            CostKind::Gaussian => "gaussian",
            CostKind::Rank => "rank",
            CostKind::Kernel { .. } => "kernel",
        }
    }

    pub fn min_size(&self) -> usize {
        match self {
            CostKind::Linear => 2,
            CostKind::Ar { order } => order + 1,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CostKind::Ar { order } if order < 1 => Err(Error::invalid("AR order must be ≥ 1")),
            CostKind::Kernel { gamma: Some(g) } if !(g.is_finite() && g > 0.0) => {
                Err(Error::invalid(format!("kernel bandwidth γ = {g} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Precompute whatever makes `error(a, b)` cheap on this signal.
    pub fn fit(&self, signal: &Signal) -> Result<Box<dyn Cost>> {
        self.validate()?;
        Ok(match *self {
            CostKind::L1 => Box::new(L1Cost::new(signal)),
            CostKind::L2 => Box::new(L2Cost::new(signal)),
            CostKind::Linear => Box::new(LinearCost::new(signal)),
            CostKind::Ar { order } => Box::new(ArCost::new(signal, order)),
            CostKind::Gaussian => Box::new(GaussianCost::new(signal)),
            CostKind::Rank => Box::new(RankCost::new(signal)),
            CostKind::Kernel { gamma } => {
                let gamma = gamma.unwrap_or_else(|| median_heuristic(signal));
                Box::new(KernelCost::new(signal, gamma))
            }
        })
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Ar { order } => write!(f, "ar{order}"),
            CostKind::Kernel { gamma: Some(g) } => write!(f, "kernel{g}"),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for CostKind {
    type Err = Error;

    /// `l1`, `l2`, `linear`, `ar` / `ar3`, `gaussian`, `rank`, `kernel` / `kernel0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let kind = match s.as_str() {
            "l1" => CostKind::L1,
            "l2" => CostKind::L2,
            "linear" => CostKind::Linear,
            "gaussian" | "normal" => CostKind::Gaussian,
            "rank" => CostKind::Rank,
            "ar" => CostKind::Ar {
                order: DEFAULT_AR_ORDER,
            },
            "kernel" | "rbf" => CostKind::Kernel { gamma: None },
            _ => {
                if let Some(p) = s.strip_prefix("ar") {
                    let order = p
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad AR order in `{s}`")))?;
                    CostKind::Ar { order }
                } else if let Some(g) = s.strip_prefix("kernel") {
                    let g = g
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad kernel γ in `{s}`")))?;
                    CostKind::Kernel { gamma: Some(g) }
                } else {
                    return Err(Error::invalid(format!("unknown cost `{s}`")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// A cost fitted to one signal. `error(a, b)` covers rows `a..b` and
/// assumes `b - a ≥ min_size()`.
pub trait Cost: Send + Sync {
    fn min_size(&self) -> usize;
    fn error(&self, a: usize, b: usize) -> f64;
    fn len(&self) -> usize;
}

/// Cost of rows `a..b` under `kind`, checking the segment is admissible.
pub fn segment_cost(signal: &Signal, a: usize, b: usize, kind: CostKind) -> Result<f64> {
    if b > signal.len() || a >= b {
        return Err(Error::invalid(format!("segment {a}..{b} outside 0..{}", signal.len())));
    }
    if b - a < kind.min_size() {
        return Err(Error::invalid(format!(
            "segment of {} samples below the {} minimum of {}",
            b - a,
            kind.name(),
            kind.min_size()
        )));
    }
    Ok(kind.fit(signal)?.error(a, b))
}

/// Per-channel running sums over rows, `(len + 1) × width`.
struct Prefix {
    width: usize,
    sums: Vec<f64>,
}

impl Prefix {
    fn build(len: usize, width: usize, mut row: impl FnMut(usize, &mut [f64])) -> Self {
        let mut sums = vec![0.0; (len + 1) * width];
        let mut buf = vec![0.0; width];
        for t in 0..len {
            row(t, &mut buf);
            for k in 0..width {
                sums[(t + 1) * width + k] = sums[t * width + k] + buf[k];
            }
        }
        Self { width, sums }
    }

    fn range(&self, a: usize, b: usize, out: &mut [f64]) {
        let w = self.width;
        for k in 0..w {
            out[k] = self.sums[b * w + k] - self.sums[a * w + k];
        }
    }
}

/// Moore–Penrose solve of a small symmetric system.
fn sym_pinv(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = scale * n as f64 * 1e-12;
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > tol && l.abs() > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

struct L2Cost {
    dim: usize,
    len: usize,
    /// per channel: Σx, Σx²
    prefix: Prefix,
}

impl L2Cost {
    fn new(s: &Signal) -> Self {
        let mean = s.channel_means();
        let d = s.dim;
        let prefix = Prefix::build(s.len, 2 * d, |t, out| {
            for c in 0..d {
                let x = s.at(t, c) - mean[c];
                out[2 * c] = x;
                out[2 * c + 1] = x * x;
            }
        });
        Self {
            dim: d,
            len: s.len,
            prefix,
        }
    }
}

impl Cost for L2Cost {
    fn min_size(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let mut s = vec![0.0; 2 * self.dim];
        self.prefix.range(a, b, &mut s);
        let m = (b - a) as f64;
        (0..self.dim)
            .map(|c| (s[2 * c + 1] - s[2 * c] * s[2 * c] / m).max(0.0))
            .sum()
    }
}

struct L1Cost {
    signal: Signal,
}

impl L1Cost {
    fn new(s: &Signal) -> Self {
        Self { signal: s.clone() }
    }
}

impl Cost for L1Cost {
    fn min_size(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.signal.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let s = &self.signal;
        let mut col = Vec::with_capacity(b - a);
        let mut total = 0.0;
        for c in 0..s.dim {
            col.clear();
            col.extend((a..b).map(|t| s.at(t, c)));
            let mid = col.len() / 2;
            let (_, med, _) = col.select_nth_unstable_by(mid, f64::total_cmp);
            let med = *med;
            total += (a..b).map(|t| (s.at(t, c) - med).abs()).sum::<f64>();
        }
        total
    }
}

struct LinearCost {
    dim: usize,
    len: usize,
    /// per channel: Σx, Σx², Σt·x
    prefix: Prefix,
}

impl LinearCost {
    fn new(s: &Signal) -> Self {
        let mean = s.channel_means();
        let d = s.dim;
        let prefix = Prefix::build(s.len, 3 * d, |t, out| {
            for c in 0..d {
                let x = s.at(t, c) - mean[c];
                out[3 * c] = x;
                out[3 * c + 1] = x * x;
                out[3 * c + 2] = t as f64 * x;
            }
        });
        Self {
            dim: d,
            len: s.len,
            prefix,
        }
    }
}

impl Cost for LinearCost {
    fn min_size(&self) -> usize {
        2
    }

    fn len(&self) -> usize {
        self.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let mut s = vec![0.0; 3 * self.dim];
        self.prefix.range(a, b, &mut s);
        let m = (b - a) as f64;
        let t_mean = (a + b - 1) as f64 / 2.0;
        // Σ(t − t̄)² over consecutive integers
        let t_var = m * (m * m - 1.0) / 12.0;
        (0..self.dim)
            .map(|c| {
                let (sx, sxx, stx) = (s[3 * c], s[3 * c + 1], s[3 * c + 2]);
                let x_var = sxx - sx * sx / m;
                let cov = stx - t_mean * sx;
                let explained = if t_var > 0.0 { cov * cov / t_var } else { 0.0 };
                (x_var - explained).max(0.0)
            })
            .sum()
    }
}

struct ArCost {
    dim: usize,
    len: usize,
    order: usize,
    /// per channel: upper-packed ΣzzT (q×q), Σz·x (q), Σx², with q = order + 1
    prefix: Prefix,
}

impl ArCost {
    fn stride(order: usize) -> usize {
        let q = order + 1;
        q * q + q + 1
    }

    fn new(s: &Signal, order: usize) -> Self {
        let mean = s.channel_means();
        let d = s.dim;
        let q = order + 1;
        let w = Self::stride(order);
        let mut z = vec![0.0; q];
        let prefix = Prefix::build(s.len, d * w, |t, out| {
            for c in 0..d {
                let x = |i: usize| s.at(i, c) - mean[c];
                for k in 0..order {
                    z[k] = x(t.saturating_sub(k + 1));
                }
                z[order] = 1.0;
                let base = c * w;
                for i in 0..q {
                    for j in 0..q {
                        out[base + i * q + j] = z[i] * z[j];
                    }
                    out[base + q * q + i] = z[i] * x(t);
                }
                out[base + q * q + q] = x(t) * x(t);
            }
        });
        Self {
            dim: d,
            len: s.len,
            order,
            prefix,
        }
    }
}

impl Cost for ArCost {
    fn min_size(&self) -> usize {
        self.order + 1
    }

    fn len(&self) -> usize {
        self.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let q = self.order + 1;
        let w = Self::stride(self.order);
        let mut s = vec![0.0; self.dim * w];
        self.prefix.range(a, b, &mut s);
        (0..self.dim)
            .map(|c| {
                let base = c * w;
                let zz = DMatrix::from_row_slice(q, q, &s[base..base + q * q]);
                let zx = DVector::from_column_slice(&s[base + q * q..base + q * q + q]);
                let xx = s[base + q * q + q];
                let beta = sym_pinv(zz) * &zx;
                (xx - zx.dot(&beta)).max(0.0)
            })
            .sum()
    }
}

struct GaussianCost {
    dim: usize,
    len: usize,
    /// Σx (d), ΣxxT (d×d)
    prefix: Prefix,
}

impl GaussianCost {
    fn new(s: &Signal) -> Self {
        let mean = s.channel_means();
        let d = s.dim;
        let prefix = Prefix::build(s.len, d + d * d, |t, out| {
            for i in 0..d {
                let xi = s.at(t, i) - mean[i];
                out[i] = xi;
                for j in 0..d {
                    out[d + i * d + j] = xi * (s.at(t, j) - mean[j]);
                }
            }
        });
        Self {
            dim: d,
            len: s.len,
            prefix,
        }
    }
}

impl Cost for GaussianCost {
    fn min_size(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let d = self.dim;
        let mut s = vec![0.0; d + d * d];
        self.prefix.range(a, b, &mut s);
        let m = (b - a) as f64;
        let cov = DMatrix::from_fn(d, d, |i, j| {
            let v = (s[d + i * d + j] - s[i] * s[j] / m) / m;
            if i == j {
                v.max(0.0) + GAUSSIAN_RIDGE
            } else {
                v
            }
        });
        let logdet = match cov.clone().cholesky() {
            Some(ch) => 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
            None => cov
                .symmetric_eigenvalues()
                .iter()
                .map(|v| v.max(GAUSSIAN_RIDGE).ln())
                .sum(),
        };
        m * logdet
    }
}

struct RankCost {
    dim: usize,
    len: usize,
    inv_cov: DMatrix<f64>,
    prefix: Prefix,
}

/// Average ranks (1-based) of one column.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

impl RankCost {
    fn new(s: &Signal) -> Self {
        let (n, d) = (s.len, s.dim);
        let centre = (n as f64 + 1.0) / 2.0;
        let mut ranks = vec![0.0; n * d];
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|t| s.at(t, c)).collect();
            for (t, r) in average_ranks(&col).into_iter().enumerate() {
                ranks[t * d + c] = r - centre;
            }
        }
        let denom = (n.max(2) - 1) as f64;
        let cov = DMatrix::from_fn(d, d, |i, j| {
            (0..n).map(|t| ranks[t * d + i] * ranks[t * d + j]).sum::<f64>() / denom
        });
        let prefix = Prefix::build(n, d, |t, out| out.copy_from_slice(&ranks[t * d..(t + 1) * d]));
        Self {
            dim: d,
            len: n,
            inv_cov: sym_pinv(cov),
            prefix,
        }
    }
}

impl Cost for RankCost {
    fn min_size(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let mut s = vec![0.0; self.dim];
        self.prefix.range(a, b, &mut s);
        let m = (b - a) as f64;
        let mean = DVector::from_iterator(self.dim, s.iter().map(|v| v / m));
        -m * mean.dot(&(&self.inv_cov * &mean))
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// 1 / median pairwise squared distance over an evenly spaced subsample.
pub fn median_heuristic(s: &Signal) -> f64 {
    let step = s.len.div_ceil(KERNEL_SUBSAMPLE).max(1);
    let rows: Vec<&[f64]> = (0..s.len).step_by(step).map(|t| s.row(t)).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *med > 0.0 {
        1.0 / *med
    } else {
        1.0
    }
}

struct KernelCost {
    signal: Signal,
    gamma: f64,
    /// `(len+1)²` cumulative Gram sums, when the signal is short enough.
    gram: Option<Vec<f64>>,
}

impl KernelCost {
    fn new(s: &Signal, gamma: f64) -> Self {
        let n = s.len;
        let gram = (n <= KERNEL_PREFIX_MAX_LEN).then(|| {
            let w = n + 1;
            let mut g = vec![0.0; w * w];
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    row_sum += (-gamma * sq_dist(s.row(i), s.row(j))).exp();
                    g[(i + 1) * w + j + 1] = g[i * w + j + 1] + row_sum;
                }
            }
            g
        });
        Self {
            signal: s.clone(),
            gamma,
            gram,
        }
    }
}

impl Cost for KernelCost {
    fn min_size(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.signal.len
    }

    fn error(&self, a: usize, b: usize) -> f64 {
        let m = (b - a) as f64;
        let total = match &self.gram {
            Some(g) => {
                let w = self.signal.len + 1;
                g[b * w + b] - g[a * w + b] - g[b * w + a] + g[a * w + a]
            }
            None => {
                let s = &self.signal;
                let mut t = m;
                for i in a..b {
                    for j in i + 1..b {
                        t += 2.0 * (-self.gamma * sq_dist(s.row(i), s.row(j))).exp();
                    }
                }
                t
            }
        };
        (m - total / m).max(0.0)
    }
}
