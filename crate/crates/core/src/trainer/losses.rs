//! Loss functions over plain tensors. The training graph composes the same
//! math node-by-node; these entry points are the reference semantics and the
//! surface the loss oracles test.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn ce_mean_pixels(logits: &Array3<f64>, labels: &Array2<u8>) -> Result<f64> {
    let (k, h, w) = logits.dim();
    if labels.dim() != (h, w) {
        return Err(Error::shape("label map does not match logits"));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {l} >= num_classes {k}")));
    }
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(logits[[c, y, x]]);
            }
            let mut z = 0.0;
            for c in 0..k {
                z += (logits[[c, y, x]] - mx).exp();
            }
            acc += mx + z.ln() - logits[[labels[[y, x]] as usize, y, x]];
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Mean cross-entropy of a labeled batch: mean over samples of the per-pixel
/// mean cross-entropy of softmax(logits) against the true labels.
pub fn supervised_loss(logits: &[Array3<f64>], labels: &[Array2<u8>]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("batch sizes differ"));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (lg, lb) in logits.iter().zip(labels) {
        acc += ce_mean_pixels(lg, lb)?;
    }
    Ok(acc / logits.len() as f64)
}

/// Per-pixel argmax with ties broken to the lowest class index. No gradient
/// flows through this path: the output is a plain integer map.
pub fn make_pseudo_labels(logits: &Array3<f64>) -> Array2<u8> {
    let (k, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[0, y, x]];
        for c in 1..k {
            if logits[[c, y, x]] > best_v {
                best_v = logits[[c, y, x]];
                best = c;
            }
        }
        best as u8
    })
}

/// Consistency loss of the two strong views against shared pseudo-labels:
/// `1/(2B) * sum_i [CE(pseudo_i, view1_i) + CE(pseudo_i, view2_i)]`.
pub fn unsupervised_loss(
    pseudo: &[Array2<u8>],
    logits_view1: &[Array3<f64>],
    logits_view2: &[Array3<f64>],
) -> Result<f64> {
    unsupervised_loss_mixed(pseudo, pseudo, logits_view1, logits_view2)
}

/// CutMix-aware variant: each view checks against its own mixed pseudo-label
/// map. Collapses to [`unsupervised_loss`] when the views share labels.
pub fn unsupervised_loss_mixed(
    pseudo_view1: &[Array2<u8>],
    pseudo_view2: &[Array2<u8>],
    logits_view1: &[Array3<f64>],
    logits_view2: &[Array3<f64>],
) -> Result<f64> {
    let b = pseudo_view1.len();
    if pseudo_view2.len() != b || logits_view1.len() != b || logits_view2.len() != b {
        return Err(Error::shape("batch sizes differ"));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..b {
        acc += ce_mean_pixels(&logits_view1[i], &pseudo_view1[i])?;
        acc += ce_mean_pixels(&logits_view2[i], &pseudo_view2[i])?;
    }
    Ok(acc / (2.0 * b as f64))
}
