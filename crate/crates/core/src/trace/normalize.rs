use serde::{Deserialize, Serialize};

use super::{Dataset, Flight, MultivariateTrace};
use crate::error::{Error, Result};

/// Channels whose spread falls below this are shifted but not scaled.
pub const MIN_STDDEV: f64 = 1e-12;

/// Per-channel z-score statistics, fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl NormStats {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let n = dataset.schema().len();
        let count: usize = dataset.flights().iter().map(|f| f.trace.len()).sum();
        if count == 0 {
            return Err(Error::invalid("cannot fit normalization on an empty split"));
        }
        let mut mean = vec![0.0; n];
        for f in dataset.flights() {
            for row in f.trace.samples().chunks_exact(n) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        // second pass keeps the variance free of cancellation
        let mut var = vec![0.0; n];
        for f in dataset.flights() {
            for row in f.trace.samples().chunks_exact(n) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let stddev = var.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(Self { mean, stddev })
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self, c: usize) -> f64 {
        if self.stddev[c] < MIN_STDDEV {
            1.0
        } else {
            self.stddev[c]
        }
    }

    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for c in 0..row.len() {
            out[c] = (row[c] - self.mean[c]) / self.scale(c);
        }
    }

    pub fn apply(&self, trace: &MultivariateTrace) -> Result<MultivariateTrace> {
        let n = trace.n_channels();
        if n != self.n_channels() {
            return Err(Error::Shape(format!(
                "stats for {} channels, trace has {n}",
                self.n_channels()
            )));
        }
        let mut out = vec![0.0; trace.samples().len()];
        for (src, dst) in trace
            .samples()
            .chunks_exact(n)
            .zip(out.chunks_exact_mut(n))
        {
            self.apply_row(src, dst);
        }
        trace.with_samples(out)
    }
}

/// Z-score every channel. Fits the statistics when none are given.
pub fn normalize_channels(
    dataset: &Dataset,
    stats: Option<&NormStats>,
) -> Result<(Dataset, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(dataset)?,
    };
    let flights = dataset
        .flights()
        .iter()
        .map(|f| {
            Ok(Flight {
                id: f.id.clone(),
                trace: stats.apply(&f.trace)?,
                annotation: f.annotation.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset.with_flights(flights), stats))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::trace::{ChangePointAnnotation, ChannelKind, ChannelSpec, Schema, StateCatalog};

    fn dataset(columns: &[Vec<f64>]) -> Dataset {
        let schema = Arc::new(
            Schema::new(
                (0..columns.len())
                    .map(|i| ChannelSpec::new(&format!("c{i}"), ChannelKind::Input, ""))
                    .collect(),
            )
            .unwrap(),
        );
        let len = columns[0].len();
        let mut samples = Vec::new();
        for t in 0..len {
            for c in columns {
                samples.push(c[t]);
            }
        }
        let trace = MultivariateTrace::new(schema.clone(), samples, 0.2).unwrap();
        let flight = Flight {
            id: "f".into(),
            trace,
            annotation: ChangePointAnnotation::from_pairs(&[(0, 0)]).unwrap(),
        };
        Dataset::new(
            schema,
            Arc::new(StateCatalog::new(["a", "b"]).unwrap()),
            0.2,
            vec![flight],
        )
        .unwrap()
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let ds = dataset(&[vec![3.5; 6]]);
        let (out, stats) = normalize_channels(&ds, None).unwrap();
        assert_eq!(stats.stddev[0], 0.0);
        assert!(out.flights()[0].trace.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_channel() {
        let ds = dataset(&[vec![0.0, 2.0]]);
        let (out, stats) = normalize_channels(&ds, None).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.stddev, vec![1.0]);
        assert_eq!(out.flights()[0].trace.samples(), &[-1.0, 1.0]);
    }

    #[test]
    fn source_split_has_zero_mean_and_second_application_differs() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 40.0 + 300.0).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64 * i as f64 * 0.01 - 5.0).collect();
        let ds = dataset(&[a, b]);
        let (once, stats) = normalize_channels(&ds, None).unwrap();
        // recompute moments independently
        for c in 0..2 {
            let vals: Vec<f64> = once.flights()[0].trace.channel(c).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((v - 1.0).abs() < 1e-9, "var {v}");
        }
        let (twice, _) = normalize_channels(&once, Some(&stats)).unwrap();
        assert_ne!(twice, once);
    }

    #[test]
    fn empty_split_is_an_error() {
        let ds = dataset(&[vec![1.0]]);
        let empty = ds.subset(&[]);
        assert!(normalize_channels(&empty, None).is_err());
    }
}
