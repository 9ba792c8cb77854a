//! Uncertainty-guided curriculum self-training.
//!
//! Target images are scored by the spatial mean of their Monte Carlo
//! uncertainty map; pseudo-labels are the argmax of the mean prediction from
//! the same inference call, so a label is never paired with a stale score.
//! The sorted list feeds an easy-to-hard schedule that grows the trained
//! subset linearly per epoch.

use crate::config::{CurriculumSchedule, LatentConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::argmax_labels;
use crate::rng::{mix, Purpose};
use crate::types::{ImageBatch, LabelMap};
use crate::uesm::mc_infer;
use rayon::prelude::*;

/// One scored target image.
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub id: String,
    /// Position in the input slice handed to [`score_target_set`].
    pub position: usize,
    pub pseudo_label: LabelMap,
    /// Spatial mean of the image's uncertainty map.
    pub score: f64,
}

/// Scores every target image and returns the list sorted ascending by
/// uncertainty (most certain first). Ties keep input order. Scoring of
/// distinct images runs in parallel on per-image derived seeds.
pub fn score_target_set(
    model: &Model,
    targets: &[(&str, &ImageBatch)],
    cfg: &LatentConfig,
    seed: u64,
) -> Result<Vec<PseudoSample>> {
    if targets.is_empty() {
        return Err(Error::Data("cannot score an empty target set".into()));
    }
    let mut scored: Vec<PseudoSample> = targets
        .par_iter()
        .enumerate()
        .map(|(position, (id, image))| {
            let r = mc_infer(model, image, cfg, mix(seed, Purpose::TargetScore, position as u64))?;
            let score = r.uncertainty.mean_per_image()[0];
            Ok(PseudoSample {
                id: id.to_string(),
                position,
                pseudo_label: argmax_labels(&r.mean),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .expect("scores are finite")
            .then(a.position.cmp(&b.position))
    });
    Ok(scored)
}

/// Linear easy-to-hard fraction:
/// `f_start + (f_end - f_start) * epoch / max(E - 1, 1)`.
pub fn curriculum_fraction(epoch: usize, sched: &CurriculumSchedule) -> Result<f64> {
    sched.validate()?;
    if epoch >= sched.total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            sched.total_epochs
        )));
    }
    let denom = (sched.total_epochs - 1).max(1) as f64;
    Ok(sched.f_start + (sched.f_end - sched.f_start) * epoch as f64 / denom)
}

/// First `ceil(f * len)` entries of an ascending-sorted list.
pub fn select_subset(sorted: &[PseudoSample], f: f64) -> Result<&[PseudoSample]> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction {f} must lie in (0, 1]"
        )));
    }
    let take = ((f * sorted.len() as f64).ceil() as usize).min(sorted.len());
    Ok(&sorted[..take])
}

/// CSV dump of a sorted scoring pass: `id,score,selected`.
pub fn write_curriculum_csv(
    path: &std::path::Path,
    sorted: &[PseudoSample],
    selected: usize,
) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    writeln!(out, "id,score,selected").expect("in-memory write");
    for (i, s) in sorted.iter().enumerate() {
        writeln!(out, "{},{:.9e},{}", s.id, s.score, (i < selected) as u8).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
