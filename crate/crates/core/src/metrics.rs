//! Overlap metrics, dataset evaluation, and uncertainty rendering.

use crate::config::LatentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::argmax_labels;
use crate::rng::{mix, Purpose};
use crate::synth::Split;
use crate::types::{DomainTag, ImageBatch, LabelMap};
use crate::uesm::mc_infer;
use rayon::prelude::*;
use std::path::Path;

/// Dice coefficient of one class: `2|P ∩ G| / (|P| + |G|)`, defined as 1
/// when both masks are empty. Symmetric in its arguments.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    if pred.data().shape() != gt.data().shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?}", gt.data().shape()),
            format!("{:?}", pred.data().shape()),
        ));
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let pi = p == class;
        let gi = g == class;
        inter += (pi && gi) as usize;
        p_count += pi as usize;
        g_count += gi as usize;
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// Conformity `(3d - 2) / d`; undefined at `d = 0` (returned as `None`).
/// Strictly increasing on (0, 1] with `conformity(1) = 1` and a zero at
/// `d = 2/3`.
pub fn conformity(d: f64) -> Option<f64> {
    if d <= 0.0 {
        None
    } else {
        Some((3.0 * d - 2.0) / d)
    }
}

/// One evaluation row. `conformity` is `None` when dice is 0.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub class_name: String,
    pub dice: f64,
    pub conformity: Option<f64>,
}

fn class_name(class: u8) -> String {
    match class {
        1 => "retinal".to_string(),
        2 => "choroidal".to_string(),
        c => format!("class{c}"),
    }
}

/// Evaluates a checkpointed model over one domain/split: per image, Monte
/// Carlo inference, argmax of the mean prediction, per-class dice; dice is
/// averaged over images and conformity applied to the averaged dice. The
/// final row is the arithmetic mean of the class rows for each metric.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    domain: DomainTag,
    split: Split,
    cfg: &LatentConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let indices = ds.select(domain, split);
    if indices.is_empty() {
        return Err(Error::Eval(format!(
            "no samples for domain {domain} split {}",
            split.name()
        )));
    }
    let classes: Vec<u8> = (1..model.n_classes as u8).collect();

    // per-image dice per class, computed in parallel, reduced in index order
    let per_image: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let r = mc_infer(model, &s.image, cfg, mix(seed, Purpose::Eval, i as u64))?;
            let pred = argmax_labels(&r.mean);
            classes
                .iter()
                .map(|&c| dice(&pred, &s.label, c))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(classes.len() + 1);
    for (k, &c) in classes.iter().enumerate() {
        let mean_dice: f64 =
            per_image.iter().map(|v| v[k]).sum::<f64>() / per_image.len() as f64;
        rows.push(MetricRow {
            class_name: class_name(c),
            dice: mean_dice,
            conformity: conformity(mean_dice),
        });
    }
    let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
    let mean_conf = if rows.iter().all(|r| r.conformity.is_some()) {
        Some(rows.iter().map(|r| r.conformity.unwrap()).sum::<f64>() / rows.len() as f64)
    } else {
        None
    };
    rows.push(MetricRow {
        class_name: "mean".to_string(),
        dice: mean_dice,
        conformity: mean_conf,
    });
    Ok(rows)
}

/// Mean-row dice of an evaluation table.
pub fn mean_dice(rows: &[MetricRow]) -> f64 {
    rows.last().expect("evaluate always emits a mean row").dice
}

/// Serializes rows as `class,dice,conformity`; undefined conformity is
/// written as `NaN`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("class,dice,conformity\n");
    for r in rows {
        let conf = match r.conformity {
            Some(c) => format!("{:.6}", c),
            None => "NaN".to_string(),
        };
        out.push_str(&format!("{},{:.6},{}\n", r.class_name, r.dice, conf));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Renders an uncertainty map to an 8-bit PGM (min-max scaled) plus a JSON
/// sidecar holding the raw min/max, so renders stay comparable across
/// checkpoints.
pub fn render_uncertainty(
    model: &Model,
    image: &ImageBatch,
    cfg: &LatentConfig,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    let r = mc_infer(model, image, cfg, seed)?;
    let u = r.uncertainty.data();
    let (h, w) = (u.shape()[1], u.shape()[2]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in u.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let pixels: Vec<u8> = u
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    crate::pgm::write_pgm(out_path, w, h, &pixels)?;

    let sidecar = out_path.with_extension("json");
    let body = serde_json::json!({ "min": lo, "max": hi });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&body).expect("json"))
        .map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}
