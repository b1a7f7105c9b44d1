use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::window::SampleMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Features considered at each split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    #[default]
    All,
    Sqrt,
    Log2,
}

impl MaxFeatures {
    pub fn count(&self, dim: usize) -> usize {
        let k = match self {
            MaxFeatures::All => dim,
            MaxFeatures::Sqrt => (dim as f64).sqrt() as usize,
            MaxFeatures::Log2 => (dim as f64).log2() as usize,
        };
        k.clamp(1, dim.max(1))
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaxFeatures::All => "all",
            MaxFeatures::Sqrt => "sqrt",
            MaxFeatures::Log2 => "log2",
        }
    }
}

impl FromStr for MaxFeatures {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaxFeatures::All),
            "sqrt" => Ok(MaxFeatures::Sqrt),
            "log2" => Ok(MaxFeatures::Log2),
            _ => Err(Error::invalid(format!("unknown max_features `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { class: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A fitted CART classifier (Gini impurity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_classes: usize,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b })
}

struct Best {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

/// Lowest weighted child impurity over midpoints between sorted distinct
/// values of `feature`.
fn best_split(m: &SampleMatrix, idx: &[usize], feature: usize, k: usize, scratch: &mut Vec<(f64, usize)>) -> Option<Best> {
    scratch.clear();
    scratch.extend(idx.iter().map(|&i| (m.x[i * m.dim + feature], m.y[i])));
    scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let n = scratch.len();
    let mut right = vec![0usize; k];
    scratch.iter().for_each(|&(_, y)| right[y] += 1);
    let mut left = vec![0usize; k];
    let mut best: Option<Best> = None;
    for i in 0..n - 1 {
        let (v, y) = scratch[i];
        left[y] += 1;
        right[y] -= 1;
        let next = scratch[i + 1].0;
        if next <= v {
            continue;
        }
        let nl = i + 1;
        let imp = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
        if best.as_ref().is_none_or(|b| imp < b.impurity) {
            best = Some(Best {
                impurity: imp,
                feature,
                threshold: v + (next - v) / 2.0,
            });
        }
    }
    best
}

impl DecisionTree {
    /// Grow a tree to `max_depth` (unbounded when `None`). Feature subsets
    /// are drawn per node from a stream keyed by `seed` and the node index.
    pub fn fit(
        m: &SampleMatrix,
        n_classes: usize,
        max_depth: Option<usize>,
        max_features: MaxFeatures,
        seed: u64,
    ) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::invalid("decision tree needs at least one sample"));
        }
        if let Some(&c) = m.y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::invalid(format!("label {c} outside {n_classes} classes")));
        }
        let n_feat = max_features.count(m.dim);
        let mut nodes = Vec::new();
        let mut scratch = Vec::with_capacity(m.rows());
        // (node slot, samples, depth)
        let mut stack = vec![(0usize, (0..m.rows()).collect::<Vec<_>>(), 0usize)];
        nodes.push(Node::Leaf { class: 0 });
        while let Some((slot, idx, depth)) = stack.pop() {
            let mut counts = vec![0usize; n_classes];
            idx.iter().for_each(|&i| counts[m.y[i]] += 1);
            let leaf = Node::Leaf {
                class: majority(&counts),
            };
            let parent = gini(&counts, idx.len());
            if parent == 0.0 || max_depth.is_some_and(|d| depth >= d) || idx.len() < 2 {
                nodes[slot] = leaf;
                continue;
            }
            let mut features: Vec<usize> = if n_feat == m.dim {
                (0..m.dim).collect()
            } else {
                sample(&mut rng::stream(seed, "cart", slot as u64), m.dim, n_feat).into_vec()
            };
            features.sort_unstable();
            let mut best: Option<Best> = None;
            for &f in &features {
                if let Some(b) = best_split(m, &idx, f, n_classes, &mut scratch) {
                    if best.as_ref().is_none_or(|x| b.impurity < x.impurity) {
                        best = Some(b);
                    }
                }
            }
            match best.filter(|b| b.impurity < parent - 1e-12) {
                None => nodes[slot] = leaf,
                Some(b) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| m.x[i * m.dim + b.feature] <= b.threshold);
                    let (li, ri) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf { class: 0 });
                    nodes.push(Node::Leaf { class: 0 });
                    nodes[slot] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left: li,
                        right: ri,
                    };
                    stack.push((ri, r, depth + 1));
                    stack.push((li, l, depth + 1));
                }
            }
        }
        Ok(Self { nodes, n_classes })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn toy() -> SampleMatrix {
        let mut m = SampleMatrix::new(1);
        for (x, y) in [(0.0, 0), (1.0, 0), (10.0, 1), (11.0, 1)] {
            m.push(&[x], y);
        }
        m
    }

    fn accuracy(t: &DecisionTree, m: &SampleMatrix) -> f64 {
        (0..m.rows()).filter(|&i| t.predict(m.row(i)) == m.y[i]).count() as f64 / m.rows() as f64
    }

    #[test]
    fn pure_set_is_a_single_leaf() {
        let mut m = toy();
        m.y = vec![1; 4];
        let t = DecisionTree::fit(&m, 2, None, MaxFeatures::All, 0).unwrap();
        assert_eq!(t.n_splits(), 0);
    }

    #[test]
    fn one_split_separates_the_toy() {
        let t = DecisionTree::fit(&toy(), 2, Some(1), MaxFeatures::All, 0).unwrap();
        match t.nodes[0] {
            Node::Split { threshold, .. } => assert!(threshold > 1.0 && threshold < 10.0),
            _ => panic!("expected a split"),
        }
        assert_eq!(accuracy(&t, &toy()), 1.0);
    }

    #[test]
    fn depth_zero_is_majority() {
        let mut m = toy();
        m.push(&[12.0], 1);
        let t = DecisionTree::fit(&m, 2, Some(0), MaxFeatures::All, 0).unwrap();
        assert_eq!(t.nodes, vec![Node::Leaf { class: 1 }]);
    }

    #[test]
    fn accuracy_grows_with_depth_and_runs_repeat() {
        let mut r = rng::stream(3, "cart-test", 0);
        let mut m = SampleMatrix::new(4);
        for _ in 0..300 {
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = ((x[0] + x[1] * x[2] > 0.0) as usize) + 2 * ((x[3] > 0.3) as usize);
            m.push(&x, y);
        }
        let mut last = 0.0;
        for d in 0..8 {
            let acc = accuracy(&DecisionTree::fit(&m, 4, Some(d), MaxFeatures::All, 0).unwrap(), &m);
            assert!(acc >= last, "depth {d}: {acc} < {last}");
            last = acc;
        }
        let a = DecisionTree::fit(&m, 4, None, MaxFeatures::Sqrt, 11).unwrap();
        let b = DecisionTree::fit(&m, 4, None, MaxFeatures::Sqrt, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(accuracy(&a, &m), 1.0);
    }

    #[test]
    fn feature_caps() {
        assert_eq!(MaxFeatures::Sqrt.count(200), 14);
        assert_eq!(MaxFeatures::Log2.count(30), 4);
        assert_eq!(MaxFeatures::Log2.count(1), 1);
        assert!(DecisionTree::fit(&SampleMatrix::new(2), 2, None, MaxFeatures::All, 0).is_err());
    }
}
