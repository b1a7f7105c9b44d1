use super::{ChangePoint, ChangePointAnnotation, LabelSequence, MultivariateTrace, StateCatalog};
use crate::error::{Error, Result};

/// Fill every step with the state of the latest entry at or before it.
pub fn expand_annotation(cp: &ChangePointAnnotation, length: usize) -> Result<LabelSequence> {
    let entries = cp.entries();
    let last = entries
        .last()
        .ok_or_else(|| Error::InvalidAnnotation("empty annotation".into()))?;
    if last.t >= length {
        return Err(Error::InvalidAnnotation(format!(
            "entry at t={} does not fit length {length}",
            last.t
        )));
    }
    let mut labels = Vec::with_capacity(length);
    for (i, e) in entries.iter().enumerate() {
        let end = entries.get(i + 1).map_or(length, |n| n.t);
        labels.resize(end, e.state);
    }
    Ok(LabelSequence::dense(labels))
}

/// Inverse of [`expand_annotation`] over the valid prefix.
pub fn extract_change_points(seq: &LabelSequence) -> Result<ChangePointAnnotation> {
    let labels = seq.valid_labels();
    let first = *labels
        .first()
        .ok_or_else(|| Error::invalid("label sequence has no valid steps"))?;
    let mut entries = vec![ChangePoint { t: 0, state: first }];
    for (t, w) in labels.windows(2).enumerate() {
        if w[1] != w[0] {
            entries.push(ChangePoint {
                t: t + 1,
                state: w[1],
            });
        }
    }
    ChangePointAnnotation::new(entries)
}

/// Zero-pad a trace to `target_len` rows; padded steps are masked out and
/// labeled with the catalog's pad id.
pub fn pad_and_mask(
    trace: &MultivariateTrace,
    seq: &LabelSequence,
    target_len: usize,
    catalog: &StateCatalog,
) -> Result<(MultivariateTrace, LabelSequence)> {
    let len = trace.len();
    if seq.len() != len {
        return Err(Error::Shape(format!(
            "trace has {len} steps, labels {}",
            seq.len()
        )));
    }
    if len > target_len {
        return Err(Error::invalid(format!(
            "trace length {len} exceeds padded length {target_len}"
        )));
    }
    let mut samples = trace.samples().to_vec();
    samples.resize(target_len * trace.n_channels(), 0.0);
    let padded = trace.with_samples(samples)?;

    let valid = seq.valid_len();
    let mut labels = seq.labels().to_vec();
    for l in labels.iter_mut().skip(valid) {
        *l = catalog.pad_id();
    }
    labels.resize(target_len, catalog.pad_id());
    let mut mask = seq.mask().to_vec();
    mask.resize(target_len, false);
    Ok((padded, LabelSequence::new(labels, mask)?))
}
