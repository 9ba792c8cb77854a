//! Objective terms: uncertainty-guided source cross-entropy, target
//! self-training cross-entropy, the adversarial pair, and the weighted full
//! objective.
//!
//! Each loss exists twice: as a pure function on value types (used by tests,
//! logging, and evaluation) and as a tape builder (used by training). The two
//! routes compute the identical formula and are cross-checked in tests.

use crate::autodiff::{Tape, TensorId};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::ops::{minmax_normalize, one_hot, UNCERTAINTY_NORM_HI};
use crate::types::{LabelMap, ProbMap, UncertaintyMap};
use ndarray::Array4;

/// Clamp inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

/// Per-iteration record of every objective term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_s: f64,
    pub l_t: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,L_s,L_t,L_adv_D,L_adv_G,KL,total";

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.l_s, self.l_t, self.l_adv_d, self.l_adv_g, self.kl, self.total
        )
    }
}

fn check_pred_shapes(pred: &ProbMap, y: &LabelMap, context: &str) -> Result<()> {
    if pred.batch() != y.batch() || pred.height() != y.height() || pred.width() != y.width() {
        return Err(Error::shape(
            context,
            format!("[{}, {}, {}]", pred.batch(), pred.height(), pred.width()),
            format!("[{}, {}, {}]", y.batch(), y.height(), y.width()),
        ));
    }
    Ok(())
}

/// Mean over pixels of `-ln(max(p_true, eps)) * (1 + u_norm)` where `u_norm`
/// is an already-normalized uncertainty map. The inner seam of [`uce_loss`].
pub fn uce_loss_prenormalized(
    pred: &ProbMap,
    y: &LabelMap,
    u_norm: &UncertaintyMap,
) -> Result<f64> {
    check_pred_shapes(pred, y, "uce_loss")?;
    if u_norm.data().shape() != y.data().shape() {
        return Err(Error::shape(
            "uce_loss uncertainty",
            format!("{:?}", y.data().shape()),
            format!("{:?}", u_norm.data().shape()),
        ));
    }
    let (b, h, w) = (y.batch(), y.height(), y.width());
    let mut total = 0.0;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let c = y.data()[[bi, hi, wi]] as usize;
                let p = pred.data()[[bi, c, hi, wi]].max(LOG_EPS);
                total += -p.ln() * (1.0 + u_norm.data()[[bi, hi, wi]]);
            }
        }
    }
    Ok(total / (b * h * w) as f64)
}

/// Uncertainty-guided cross-entropy: plain cross-entropy weighted per pixel
/// by `1 + minmax_normalize(u)`. Reduces to plain cross-entropy when `u` is
/// constant, and is invariant under adding a constant to `u`.
pub fn uce_loss(pred: &ProbMap, y: &LabelMap, u: &UncertaintyMap) -> Result<f64> {
    let u_norm = minmax_normalize(u, UNCERTAINTY_NORM_HI);
    uce_loss_prenormalized(pred, y, &u_norm)
}

/// Plain mean cross-entropy against (pseudo-)labels.
pub fn target_ce_loss(pred: &ProbMap, pseudo: &LabelMap) -> Result<f64> {
    check_pred_shapes(pred, pseudo, "target_ce_loss")?;
    let zero = UncertaintyMap::new(ndarray::Array3::zeros((
        pseudo.batch(),
        pseudo.height(),
        pseudo.width(),
    )))
    .expect("zero map is valid");
    uce_loss_prenormalized(pred, pseudo, &zero)
}

fn mean_neg_log(scores: &Array4<f64>) -> f64 {
    let s: f64 = scores.iter().map(|&v| -(v.max(LOG_EPS).ln())).sum();
    s / scores.len() as f64
}

/// Discriminator loss: `-mean log d_src - mean log(1 - d_tgt)`; minimized
/// when source-derived features score 1 and target-derived features score 0.
pub fn adv_d_loss(d_src: &Array4<f64>, d_tgt: &Array4<f64>) -> f64 {
    let flipped = d_tgt.mapv(|v| 1.0 - v);
    mean_neg_log(d_src) + mean_neg_log(&flipped)
}

/// Generator-side adversarial loss: `-mean log d_tgt`; minimized when target
/// features fool the discriminator into scoring 1.
pub fn adv_g_loss(d_tgt: &Array4<f64>) -> f64 {
    mean_neg_log(d_tgt)
}

/// Weighted sum of the five terms. Rejects non-finite inputs naming the
/// offending term.
pub fn full_objective(
    l_s: f64,
    l_t: f64,
    l_adv_d: f64,
    l_adv_g: f64,
    kl: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [
        ("L_s", l_s),
        ("L_t", l_t),
        ("L_adv_D", l_adv_d),
        ("L_adv_G", l_adv_g),
        ("KL", kl),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective term {name}")));
        }
    }
    let total = w.lambda_s * l_s
        + w.lambda_t * l_t
        + w.lambda_d * l_adv_d
        + w.lambda_g * l_adv_g
        + w.lambda_kl * kl;
    Ok(LossReport {
        l_s,
        l_t,
        l_adv_d,
        l_adv_g,
        kl,
        total,
    })
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Cross-entropy of in-graph probabilities against a constant label map,
/// optionally weighted by a constant per-pixel map (the detached uncertainty
/// weight of the source loss).
pub fn ce_graph(
    tape: &mut Tape,
    probs: TensorId,
    labels: &LabelMap,
    pixel_weight: Option<&UncertaintyMap>,
) -> Result<TensorId> {
    let classes = tape.shape(probs)[1];
    let onehot = one_hot(labels, classes)?;
    let lp = tape.ln_clamped(probs, LOG_EPS);
    let oh = tape.leaf(onehot.data().clone().into_dyn());
    let picked = tape.mul(lp, oh);
    let per_pixel = tape.sum_ch(picked); // [B, 1, H, W] of ln p_true
    let weighted = match pixel_weight {
        Some(u_norm) => {
            let (b, h, w) = (labels.batch(), labels.height(), labels.width());
            let mut wmap = Array4::<f64>::zeros((b, 1, h, w));
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        wmap[[bi, 0, hi, wi]] = 1.0 + u_norm.data()[[bi, hi, wi]];
                    }
                }
            }
            let wleaf = tape.leaf(wmap.into_dyn());
            tape.mul(per_pixel, wleaf)
        }
        None => per_pixel,
    };
    let mean = tape.mean_all(weighted);
    Ok(tape.scale(mean, -1.0))
}

/// In-graph discriminator loss on two score maps.
pub fn adv_d_graph(tape: &mut Tape, d_src: TensorId, d_tgt: TensorId) -> TensorId {
    let ls = tape.ln_clamped(d_src, LOG_EPS);
    let ms = tape.mean_all(ls);
    let neg = tape.scale(d_tgt, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let lt = tape.ln_clamped(one_minus, LOG_EPS);
    let mt = tape.mean_all(lt);
    let sum = tape.add(ms, mt);
    tape.scale(sum, -1.0)
}

/// In-graph generator-side adversarial loss.
pub fn adv_g_graph(tape: &mut Tape, d_tgt: TensorId) -> TensorId {
    let lt = tape.ln_clamped(d_tgt, LOG_EPS);
    let mt = tape.mean_all(lt);
    tape.scale(mt, -1.0)
}
