//! Elementwise tensor utilities applied throughout the pipeline: channelwise
//! softmax, one-hot encoding, argmax label extraction, and per-image min-max
//! normalization of uncertainty maps.
//!
//! All functions are pure and preserve batch and spatial dimensions exactly.

use crate::autodiff::softmax_channels;
use crate::error::{Error, Result};
use crate::types::{LabelMap, ProbMap, UncertaintyMap};
use ndarray::{Array3, Array4, Axis};

/// Channelwise softmax of logits `[B, C, H, W]`.
///
/// The channel argmax of the output equals the channel argmax of the input.
pub fn softmax_channelwise(logits: &Array4<f64>) -> Result<ProbMap> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_channelwise input".into()));
    }
    ProbMap::new(softmax_channels(logits))
}

/// One-hot encoding of a label map into a probability map with `classes`
/// channels: exactly one 1 per pixel, at the label's channel.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<ProbMap> {
    if labels.classes() > classes {
        return Err(Error::Data(format!(
            "label map with {} classes cannot be one-hot encoded into {classes} channels",
            labels.classes()
        )));
    }
    let (b, h, w) = (labels.batch(), labels.height(), labels.width());
    let mut out = Array4::<f64>::zeros((b, classes, h, w));
    let data = labels.data();
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                out[[bi, data[[bi, hi, wi]] as usize, hi, wi]] = 1.0;
            }
        }
    }
    ProbMap::new(out)
}

/// Per-pixel index of the maximal channel; ties break toward the lowest
/// class index.
pub fn argmax_labels(p: &ProbMap) -> LabelMap {
    let (b, c, h, w) = (p.batch(), p.classes(), p.height(), p.width());
    let data = p.data();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut best = 0usize;
                let mut best_v = data[[bi, 0, hi, wi]];
                for ci in 1..c {
                    let v = data[[bi, ci, hi, wi]];
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                out[[bi, hi, wi]] = best as u8;
            }
        }
    }
    LabelMap::new(out, c).expect("argmax indices are always < C")
}

/// Rescales each image's uncertainty onto `[0, hi]`:
/// `hi * (u - min(u)) / (max(u) - min(u))`, computed per image.
/// A constant map normalizes to all zeros.
pub fn minmax_normalize(u: &UncertaintyMap, hi: f64) -> UncertaintyMap {
    let mut out = u.data().clone();
    for bi in 0..out.shape()[0] {
        let mut img = out.index_axis_mut(Axis(0), bi);
        let mut lo = f64::INFINITY;
        let mut up = f64::NEG_INFINITY;
        for &v in img.iter() {
            lo = lo.min(v);
            up = up.max(v);
        }
        if up > lo {
            let scale = hi / (up - lo);
            img.mapv_inplace(|v| (v - lo) * scale);
        } else {
            img.fill(0.0);
        }
    }
    UncertaintyMap::new(out).expect("normalization preserves nonnegativity")
}

/// Default upper bound of the normalized uncertainty range.
pub const UNCERTAINTY_NORM_HI: f64 = 0.1;
