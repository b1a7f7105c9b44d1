use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid(format!("split fractions must be positive: {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Validation and test sizes round to nearest; train takes the remainder.
    pub fn sizes(&self, z: usize) -> (usize, usize, usize) {
        let val = (z as f64 * self.val).round() as usize;
        let test = (z as f64 * self.test).round() as usize;
        let train = z.saturating_sub(val + test);
        (train, val, test)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::new(0.7, 0.15, 0.15)
    }
}

/// Which flight ids landed in which split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded disjoint partition into train/validation/test.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitRecord)> {
    fractions.validate()?;
    let z = dataset.z();
    let (n_train, n_val, n_test) = fractions.sizes(z);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != z {
        return Err(Error::invalid(format!(
            "split of {z} flights by {fractions:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..z).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    let ids = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&i| dataset.flights()[i].id.clone()).collect()
    };
    let record = SplitRecord {
        seed,
        train: ids(&parts[0]),
        val: ids(&parts[1]),
        test: ids(&parts[2]),
    };
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
        record,
    ))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::trace::{
        ChangePointAnnotation, Flight, MultivariateTrace, Schema, StateCatalog,
    };

    fn dataset(z: usize) -> Dataset {
        let schema = Arc::new(Schema::autopilot());
        let flights = (0..z)
            .map(|i| Flight {
                id: format!("f{i:03}"),
                trace: MultivariateTrace::new(schema.clone(), vec![i as f64; 30], 0.2).unwrap(),
                annotation: ChangePointAnnotation::from_pairs(&[(0, 0)]).unwrap(),
            })
            .collect();
        Dataset::new(
            schema,
            Arc::new(StateCatalog::new(["a", "b"]).unwrap()),
            0.2,
            flights,
        )
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let (a, b, c, _) = split_dataset(&dataset(20), SplitFractions::new(0.9, 0.05, 0.05), 1).unwrap();
        assert_eq!((a.z(), b.z(), c.z()), (18, 1, 1));
        let (a, b, c, _) = split_dataset(&dataset(10), SplitFractions::new(0.7, 0.2, 0.1), 1).unwrap();
        assert_eq!((a.z(), b.z(), c.z()), (7, 2, 1));
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let ds = dataset(37);
        let (_, _, _, r1) = split_dataset(&ds, SplitFractions::default(), 99).unwrap();
        let (_, _, _, r2) = split_dataset(&ds, SplitFractions::default(), 99).unwrap();
        assert_eq!(r1, r2);
        let all: BTreeSet<_> = r1.train.iter().chain(&r1.val).chain(&r1.test).collect();
        assert_eq!(all.len(), 37);
        let (_, _, _, r3) = split_dataset(&ds, SplitFractions::default(), 100).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&dataset(3), SplitFractions::new(0.9, 0.05, 0.05), 0).is_err());
        assert!(split_dataset(&dataset(10), SplitFractions::new(0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&dataset(10), SplitFractions::new(1.2, -0.1, -0.1), 0).is_err());
    }
}
