//! Pseudo-labels for unlabeled target samples and the confidence filter.

use ndarray::ArrayView2;

use crate::error::Result;
use crate::net::{self, ModelParams};

/// Confidence a pseudo-label needs when the threshold is 1.
pub const SATURATION: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    /// Row indices into the target batch.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Max softmax probability of each row.
    pub confidences: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Argmax of every probability row; ties go to the lowest class id.
pub fn pseudo_labels_from_probs(probs: ArrayView2<f64>) -> PseudoLabelSet {
    let mut set = PseudoLabelSet::default();
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut conf = f64::NEG_INFINITY;
        for (c, &p) in row.iter().enumerate() {
            if p > conf {
                best = c;
                conf = p;
            }
        }
        set.indices.push(i);
        set.labels.push(best);
        set.confidences.push(conf);
    }
    set
}

/// Unfiltered pseudo-labels from an eval-mode pass (no dropout).
pub fn generate_pseudo_labels(
    target: ArrayView2<f64>,
    params: &ModelParams,
) -> Result<PseudoLabelSet> {
    if target.nrows() == 0 {
        return Ok(PseudoLabelSet::default());
    }
    let probs = net::predict(target, params)?;
    Ok(pseudo_labels_from_probs(probs.view()))
}

/// Keeps entries whose confidence reaches `tau`. The threshold is capped at
/// [`SATURATION`], so `tau = 1` keeps only saturated predictions.
pub fn filter_pseudo_labels(set: &PseudoLabelSet, tau: f64) -> PseudoLabelSet {
    let threshold = tau.min(SATURATION);
    let mut out = PseudoLabelSet::default();
    for k in 0..set.len() {
        if set.confidences[k] >= threshold {
            out.indices.push(set.indices[k]);
            out.labels.push(set.labels[k]);
            out.confidences.push(set.confidences[k]);
        }
    }
    out
}
