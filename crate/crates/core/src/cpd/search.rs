use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cost::{Cost, CostKind, Signal};
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_WIDTH: usize = 100;
pub const DEFAULT_JUMP: usize = 2;
pub const DEFAULT_PENALTIES: [f64; 3] = [100.0, 500.0, 1000.0];
/// Longest signal the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Method {
    Pelt,
    Binseg,
    BottomUp,
    Window { width: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pelt => "pelt",
            Method::Binseg => "binseg",
            Method::BottomUp => "bottom_up",
            Method::Window { .. } => "window",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Window { width } if *width != DEFAULT_WINDOW_WIDTH => write!(f, "window{width}"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "pelt" => Method::Pelt,
            "binseg" => Method::Binseg,
            "bottom_up" | "bottomup" => Method::BottomUp,
            "window" => Method::Window {
                width: DEFAULT_WINDOW_WIDTH,
            },
            _ => match s.strip_prefix("window").and_then(|w| w.parse().ok()) {
                Some(width) => Method::Window { width },
                None => return Err(Error::invalid(format!("unknown search method `{s}`"))),
            },
        })
    }
}

/// Sorted segment ends; the last one is the signal length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub breakpoints: Vec<usize>,
    pub penalty: f64,
    pub total_cost: f64,
}

impl Segmentation {
    /// Detected change times, i.e. every breakpoint but the final one.
    pub fn change_points(&self) -> &[usize] {
        &self.breakpoints[..self.breakpoints.len() - 1]
    }
}

/// Σ segment costs + β · (number of breakpoints − 1).
pub fn penalized_cost(cost: &dyn Cost, breakpoints: &[usize], penalty: f64) -> f64 {
    let mut start = 0;
    let mut total = 0.0;
    for &b in breakpoints {
        total += cost.error(start, b);
        start = b;
    }
    total + penalty * (breakpoints.len().saturating_sub(1)) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub penalty: f64,
    pub min_size: usize,
    pub jump: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            penalty: DEFAULT_PENALTIES[0],
            min_size: 2,
            jump: DEFAULT_JUMP,
        }
    }
}

fn check(len: usize, min_size: usize, params: &SearchParams) -> Result<()> {
    if !(params.penalty.is_finite() && params.penalty >= 0.0) {
        return Err(Error::invalid(format!("penalty {} must be ≥ 0", params.penalty)));
    }
    if params.jump == 0 {
        return Err(Error::invalid("jump must be ≥ 1"));
    }
    if len < 2 * min_size {
        return Err(Error::invalid(format!(
            "signal of {len} samples cannot hold two segments of {min_size}"
        )));
    }
    Ok(())
}

/// Segment `signal` under `kind` with the given search method.
pub fn detect_change_points(
    signal: &Signal,
    kind: CostKind,
    method: Method,
    params: SearchParams,
) -> Result<Segmentation> {
    let cost = kind.fit(signal)?;
    detect_with_cost(cost.as_ref(), method, params)
}

/// Same as [`detect_change_points`] with a cost already fitted, so several
/// methods or penalties can share one fit.
pub fn detect_with_cost(cost: &dyn Cost, method: Method, params: SearchParams) -> Result<Segmentation> {
    let n = cost.len();
    let min_size = params.min_size.max(cost.min_size()).max(1);
    check(n, min_size, &params)?;
    let bkps = match method {
        Method::Pelt => pelt(cost, n, min_size, params.jump, params.penalty),
        Method::Binseg => binseg(cost, n, min_size, params.jump, params.penalty),
        Method::BottomUp => bottom_up(cost, n, min_size, params.jump, params.penalty),
        Method::Window { width } => {
            let half = width / 2;
            if half < min_size || width > n {
                return Err(Error::invalid(format!(
                    "window width {width} unusable on {n} samples with min_size {min_size}"
                )));
            }
            window(cost, n, half, params.jump, params.penalty)
        }
    };
    Ok(Segmentation {
        total_cost: penalized_cost(cost, &bkps, params.penalty),
        penalty: params.penalty,
        breakpoints: bkps,
    })
}

/// Admissible interior breakpoints: multiples of `jump`.
fn on_grid(t: usize, jump: usize) -> bool {
    t.is_multiple_of(jump)
}

fn pelt(cost: &dyn Cost, n: usize, min_size: usize, jump: usize, beta: f64) -> Vec<usize> {
    // f[t] = best cost of 0..t including β per segment; last[t] = previous breakpoint
    let mut f = vec![f64::INFINITY; n + 1];
    let mut last = vec![0usize; n + 1];
    f[0] = 0.0;
    // (start, expires_at): pruned candidates survive until `expires_at`
    let mut cands: Vec<(usize, usize)> = vec![(0, usize::MAX)];
    let ends = (min_size..=n).filter(|&t| t == n || (on_grid(t, jump) && n - t >= min_size));
    for t in ends {
        cands.retain(|&(_, exp)| t < exp);
        let mut best = f64::INFINITY;
        let mut arg = 0;
        let mut vals = Vec::with_capacity(cands.len());
        for &(s, _) in &cands {
            if t - s < min_size {
                vals.push(None);
                continue;
            }
            let v = f[s] + cost.error(s, t) + beta;
            vals.push(Some(v));
            if v < best {
                best = v;
                arg = s;
            }
        }
        f[t] = best;
        last[t] = arg;
        for (c, v) in cands.iter_mut().zip(vals) {
            if let Some(v) = v {
                if v - beta > best && c.1 == usize::MAX {
                    c.1 = t + min_size;
                }
            }
        }
        cands.push((t, usize::MAX));
    }
    let mut bkps = vec![n];
    let mut t = n;
    while last[t] > 0 {
        t = last[t];
        bkps.push(t);
    }
    bkps.reverse();
    bkps
}

fn best_split(cost: &dyn Cost, a: usize, b: usize, min_size: usize, jump: usize) -> Option<(f64, usize)> {
    let whole = cost.error(a, b);
    let mut best: Option<(f64, usize)> = None;
    for t in a + min_size..=b.saturating_sub(min_size) {
        if !on_grid(t, jump) {
            continue;
        }
        let gain = whole - cost.error(a, t) - cost.error(t, b);
        if best.is_none_or(|(g, _)| gain > g) {
            best = Some((gain, t));
        }
    }
    best
}

fn binseg(cost: &dyn Cost, n: usize, min_size: usize, jump: usize, beta: f64) -> Vec<usize> {
    // segments with their cached best split
    let mut segs: Vec<(usize, usize, Option<(f64, usize)>)> =
        vec![(0, n, best_split(cost, 0, n, min_size, jump))];
    loop {
        let pick = segs
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.2.map(|(g, _)| (i, g)))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        match pick {
            Some((i, gain)) if gain > beta => {
                let (a, b, split) = segs[i];
                let t = split.expect("picked a split").1;
                segs[i] = (a, t, best_split(cost, a, t, min_size, jump));
                segs.insert(i + 1, (t, b, best_split(cost, t, b, min_size, jump)));
            }
            _ => break,
        }
    }
    segs.iter().map(|s| s.1).collect()
}

fn bottom_up(cost: &dyn Cost, n: usize, min_size: usize, jump: usize, beta: f64) -> Vec<usize> {
    let step = jump.max(min_size);
    let mut bkps: Vec<usize> = (1..).map(|k| k * step).take_while(|&t| t + min_size <= n).collect();
    bkps.push(n);
    let mut starts: Vec<usize> = std::iter::once(0).chain(bkps.iter().copied()).collect();
    starts.pop();
    let mut seg_cost: Vec<f64> = starts.iter().zip(&bkps).map(|(&a, &b)| cost.error(a, b)).collect();
    let merge = |starts: &[usize], bkps: &[usize], seg_cost: &[f64], i: usize| {
        cost.error(starts[i], bkps[i + 1]) - seg_cost[i] - seg_cost[i + 1]
    };
    let mut increase: Vec<f64> = (0..bkps.len().saturating_sub(1))
        .map(|i| merge(&starts, &bkps, &seg_cost, i))
        .collect();
    while let Some((i, &inc)) = increase
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1).then(x.0.cmp(&y.0)))
    {
        if inc >= beta {
            break;
        }
        seg_cost[i] = cost.error(starts[i], bkps[i + 1]);
        bkps.remove(i);
        starts.remove(i + 1);
        seg_cost.remove(i + 1);
        increase.remove(i);
        if i < increase.len() {
            increase[i] = merge(&starts, &bkps, &seg_cost, i);
        }
        if i > 0 {
            increase[i - 1] = merge(&starts, &bkps, &seg_cost, i - 1);
        }
    }
    bkps
}

fn window(cost: &dyn Cost, n: usize, half: usize, jump: usize, beta: f64) -> Vec<usize> {
    let ts: Vec<usize> = (half..=n - half).filter(|&t| on_grid(t, jump)).collect();
    let score: Vec<f64> = ts
        .iter()
        .map(|&t| cost.error(t - half, t + half) - cost.error(t - half, t) - cost.error(t, t + half))
        .collect();
    // local maxima, strongest first
    let mut peaks: Vec<usize> = (0..ts.len())
        .filter(|&i| {
            (i == 0 || score[i] >= score[i - 1]) && (i + 1 == ts.len() || score[i] >= score[i + 1])
        })
        .collect();
    peaks.sort_by(|&i, &j| score[j].total_cmp(&score[i]).then(i.cmp(&j)));
    let mut chosen: Vec<usize> = Vec::new();
    for i in peaks {
        if score[i] <= beta {
            break;
        }
        let t = ts[i];
        if t == n || chosen.iter().any(|&c| c.abs_diff(t) < half) {
            continue;
        }
        chosen.push(t);
    }
    chosen.sort_unstable();
    chosen.push(n);
    chosen
}

/// Best cost of every admissible segmentation, by number of breakpoints.
/// `profile[k]` is the minimum segment-cost sum with `k + 1` segments.
fn exhaustive_profile(cost: &dyn Cost, n: usize, min_size: usize) -> Vec<(f64, Vec<usize>)> {
    // table[a][b] for every admissible pair
    let mut table = vec![f64::NAN; (n + 1) * (n + 1)];
    for a in 0..n {
        for b in a + min_size..=n {
            table[a * (n + 1) + b] = cost.error(a, b);
        }
    }
    let mut best: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut path = Vec::new();
    fn dfs(
        start: usize,
        acc: f64,
        n: usize,
        min_size: usize,
        table: &[f64],
        path: &mut Vec<usize>,
        best: &mut Vec<(f64, Vec<usize>)>,
    ) {
        for end in start + min_size..=n {
            if end < n && n - end < min_size {
                continue;
            }
            let total = acc + table[start * (n + 1) + end];
            path.push(end);
            if end == n {
                let k = path.len() - 1;
                if best.len() <= k {
                    best.resize(k + 1, (f64::INFINITY, Vec::new()));
                }
                if total < best[k].0 {
                    best[k] = (total, path.clone());
                }
            } else {
                dfs(end, total, n, min_size, table, path, best);
            }
            path.pop();
        }
    }
    dfs(0, 0.0, n, min_size, &table, &mut path, &mut best);
    best
}

/// Global minimum of the penalized objective by enumerating every
/// admissible set of breakpoints. Exponential; capped at
/// [`BRUTE_FORCE_MAX_LEN`] samples.
pub fn brute_force_segmentation(
    signal: &Signal,
    kind: CostKind,
    penalty: f64,
    min_size: usize,
) -> Result<Segmentation> {
    let cost = kind.fit(signal)?;
    brute_force_with_cost(cost.as_ref(), &[penalty], min_size).map(|mut v| v.remove(0))
}

/// Exhaustive search for several penalties at once, sharing one enumeration.
pub fn brute_force_with_cost(cost: &dyn Cost, penalties: &[f64], min_size: usize) -> Result<Vec<Segmentation>> {
    let n = cost.len();
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(Error::invalid(format!(
            "exhaustive search capped at {BRUTE_FORCE_MAX_LEN} samples, got {n}"
        )));
    }
    let min_size = min_size.max(cost.min_size()).max(1);
    if n < min_size {
        return Err(Error::invalid(format!("{n} samples below min_size {min_size}")));
    }
    let profile = exhaustive_profile(cost, n, min_size);
    penalties
        .iter()
        .map(|&beta| {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::invalid(format!("penalty {beta} must be ≥ 0")));
            }
            let (k, (_, bkps)) = profile
                .iter()
                .enumerate()
                .filter(|(_, p)| p.0.is_finite())
                .min_by(|x, y| {
                    (x.1 .0 + beta * x.0 as f64).total_cmp(&(y.1 .0 + beta * y.0 as f64))
                })
                .expect("at least the single-segment solution");
            let _ = k;
            Ok(Segmentation {
                total_cost: penalized_cost(cost, bkps, beta),
                penalty: beta,
                breakpoints: bkps.clone(),
            })
        })
        .collect()
}
