//! Two-phase training orchestration.
//!
//! Phase 1 pretrains the segmentation/uncertainty networks on labeled source
//! images: cross-entropy through the posterior latent plus the KL regularizer
//! pulling prior and posterior together. Phase 2 adapts to the unlabeled
//! target domain; each iteration interleaves
//!   (b) a source step — uncertainty-weighted cross-entropy plus KL,
//!   (c) a target step — self-training cross-entropy on a curriculum-selected
//!       pseudo-label plus the generator-side adversarial term, and
//!   (d) a discriminator step on recalibrated features of one source and one
//!       target image, with generator-side parameters frozen.
//!
//! Every random draw derives from `(master seed, purpose, counter)`, so runs
//! are reproducible and checkpoints resume bit-exactly.

use crate::checkpoint::{Checkpoint, Phase};
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{adv_d_graph, adv_g_graph, ce_graph, full_objective, LossReport};
use crate::model::Model;
use crate::nn::{Adam, Binder, SubnetMask};
use crate::ops::{minmax_normalize, one_hot, UNCERTAINTY_NORM_HI};
use crate::rng::{mix, permutation, standard_normal, stream, stream2, Purpose};
use crate::selftrain::{curriculum_fraction, score_target_set, select_subset, write_curriculum_csv};
use crate::synth::Split;
use crate::types::{DomainTag, ImageBatch, LabelMap, UncertaintyMap};
use crate::uesm::{kl_graph, mc_infer, sample_latent_graph};
use crate::autodiff::Tape;
use ndarray::Array4;
use std::path::{Path, PathBuf};

/// Output sinks; every path is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainerPaths {
    /// Per-iteration loss CSV.
    pub log_csv: Option<PathBuf>,
    /// Checkpoint file, overwritten at each cadence point.
    pub checkpoint_out: Option<PathBuf>,
    /// Directory for per-epoch curriculum dumps.
    pub curriculum_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<(u64, LossReport)>,
    /// Scoring events `(epoch, mean target uncertainty)`; index 0 is the
    /// state before any adaptation step, the last entry follows the final
    /// epoch.
    pub epoch_scores: Vec<(u64, f64)>,
}

fn require_nonempty(indices: &[usize], what: &str) -> Result<()> {
    if indices.is_empty() {
        Err(Error::Train(format!("{what} split is empty")))
    } else {
        Ok(())
    }
}

/// One supervised source step: cross-entropy (optionally weighted by a
/// detached normalized uncertainty map) through the posterior latent, plus
/// the prior/posterior KL. Updates backbone, prior, posterior, and
/// prediction parameters. Returns `(ce_term, kl_term)`.
#[allow(clippy::too_many_arguments)]
pub fn source_step(
    model: &mut Model,
    adam: &mut Adam,
    x: &ImageBatch,
    y: &LabelMap,
    u_norm: Option<&UncertaintyMap>,
    lambda_ce: f64,
    lambda_kl: f64,
    sigma_scale: f64,
    lr: f64,
    latent_seed: u64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new(true);
    let mut binder = Binder::new(&model.store, SubnetMask::generator_side());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let out = model
        .backbone
        .forward_graph(&mut tape, &mut binder, &model.store, xid)?;

    let onehot = one_hot(y, model.n_classes)?;
    let oh = tape.leaf(onehot.data().clone().into_dyn());
    let joined = tape.concat_ch(&[xid, oh]);
    let (mu_q, lsig_q) = model
        .posterior
        .forward_graph(&mut tape, &mut binder, &model.store, joined);
    let (mu_p, lsig_p) = model
        .prior
        .forward_graph(&mut tape, &mut binder, &model.store, xid);

    let (b, l) = (tape.shape(mu_q)[0], tape.shape(mu_q)[1]);
    let mut rng = stream(latent_seed, Purpose::LatentTrain, 0);
    let eps = standard_normal(ndarray::Ix2(b, l), &mut rng);
    let z = sample_latent_graph(&mut tape, mu_q, lsig_q, sigma_scale, eps);

    let logits = model
        .pred
        .forward_graph(&mut tape, &mut binder, &model.store, out.seg_features, z);
    let probs = tape.softmax_ch(logits);
    let ce = ce_graph(&mut tape, probs, y, u_norm)?;
    let kl = kl_graph(&mut tape, mu_q, lsig_q, mu_p, lsig_p);

    let ce_term = tape.scalar(ce);
    let kl_term = tape.scalar(kl);
    let ce_w = tape.scale(ce, lambda_ce);
    let kl_w = tape.scale(kl, lambda_kl);
    let loss = tape.add(ce_w, kl_w);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("source step loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let collected = binder.collect_grads(&model.store, &mut grads);
    adam.step(&mut model.store, &collected, lr)?;
    Ok((ce_term, kl_term))
}

/// One target step: self-training cross-entropy on a pseudo-label (when
/// given) plus the generator-side adversarial term through the
/// recalibration path. Discriminator parameters receive no update. Returns
/// `(l_t, l_adv_g)`.
#[allow(clippy::too_many_arguments)]
pub fn target_step(
    model: &mut Model,
    adam: &mut Adam,
    x_t: &ImageBatch,
    pseudo: Option<&LabelMap>,
    lambda_t: f64,
    lambda_g: f64,
    use_frm: bool,
    sigma_scale: f64,
    lr: f64,
    latent_seed: u64,
) -> Result<(f64, f64)> {
    let self_training = lambda_t > 0.0 && pseudo.is_some();
    let adversarial = lambda_g > 0.0;
    if !self_training && !adversarial {
        return Ok((0.0, 0.0));
    }
    let (h, w) = (x_t.height(), x_t.width());
    let mut tape = Tape::new(true);
    let mut binder = Binder::new(&model.store, SubnetMask::generator_side());
    let xid = tape.leaf(x_t.data().clone().into_dyn());
    let out = model
        .backbone
        .forward_graph(&mut tape, &mut binder, &model.store, xid)?;

    let mut l_t_value = 0.0;
    let mut l_g_value = 0.0;
    let mut terms = Vec::new();

    if self_training {
        let (mu_p, lsig_p) = model
            .prior
            .forward_graph(&mut tape, &mut binder, &model.store, xid);
        let (b, l) = (tape.shape(mu_p)[0], tape.shape(mu_p)[1]);
        let mut rng = stream(latent_seed, Purpose::LatentTrainTarget, 0);
        let eps = standard_normal(ndarray::Ix2(b, l), &mut rng);
        let z = sample_latent_graph(&mut tape, mu_p, lsig_p, sigma_scale, eps);
        let logits = model
            .pred
            .forward_graph(&mut tape, &mut binder, &model.store, out.seg_features, z);
        let probs = tape.softmax_ch(logits);
        let lt = ce_graph(&mut tape, probs, pseudo.expect("checked above"), None)?;
        l_t_value = tape.scalar(lt);
        terms.push(tape.scale(lt, lambda_t));
    }
    if adversarial {
        let feat = if use_frm {
            model
                .frm
                .forward_graph(&mut tape, &mut binder, &model.store, &out.taps, (h, w))
        } else {
            model
                .frm
                .forward_plain_graph(&mut tape, &mut binder, &model.store, &out.taps, (h, w))
        };
        let scores = model
            .disc
            .forward_graph(&mut tape, &mut binder, &model.store, feat);
        let lg = adv_g_graph(&mut tape, scores);
        l_g_value = tape.scalar(lg);
        terms.push(tape.scale(lg, lambda_g));
    }

    let loss = if terms.len() == 1 {
        terms[0]
    } else {
        tape.add(terms[0], terms[1])
    };
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("target step loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let collected = binder.collect_grads(&model.store, &mut grads);
    adam.step(&mut model.store, &collected, lr)?;
    Ok((l_t_value, l_g_value))
}

/// Recalibrated features of one image under the current parameters, without
/// gradients. The discriminator step consumes these as constants.
pub fn recalibrated_features(model: &Model, x: &ImageBatch, use_frm: bool) -> Result<Array4<f64>> {
    let (h, w) = (x.height(), x.width());
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let xid = tape.leaf(x.data().clone().into_dyn());
    let out = model
        .backbone
        .forward_graph(&mut tape, &mut binder, &model.store, xid)?;
    let feat = if use_frm {
        model
            .frm
            .forward_graph(&mut tape, &mut binder, &model.store, &out.taps, (h, w))
    } else {
        model
            .frm
            .forward_plain_graph(&mut tape, &mut binder, &model.store, &out.taps, (h, w))
    };
    Ok(tape
        .value(feat)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("recalibrated features are 4-d")
        .to_owned())
}

/// One discriminator step on frozen generator-side features of one source
/// and one target image. Only discriminator parameters change. Returns the
/// discriminator loss value.
pub fn disc_step(
    model: &mut Model,
    adam: &mut Adam,
    x_s: &ImageBatch,
    x_t: &ImageBatch,
    lambda_d: f64,
    use_frm: bool,
    lr: f64,
) -> Result<f64> {
    let feat_s = recalibrated_features(model, x_s, use_frm)?;
    let feat_t = recalibrated_features(model, x_t, use_frm)?;
    let mut tape = Tape::new(true);
    let mut binder = Binder::new(&model.store, SubnetMask::discriminator_only());
    let fs = tape.leaf(feat_s.into_dyn());
    let ft = tape.leaf(feat_t.into_dyn());
    let scores_s = model
        .disc
        .forward_graph(&mut tape, &mut binder, &model.store, fs);
    let scores_t = model
        .disc
        .forward_graph(&mut tape, &mut binder, &model.store, ft);
    let l_d = adv_d_graph(&mut tape, scores_s, scores_t);
    let l_d_value = tape.scalar(l_d);
    let loss = tape.scale(l_d, lambda_d);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("discriminator step loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let collected = binder.collect_grads(&model.store, &mut grads);
    adam.step(&mut model.store, &collected, lr)?;
    Ok(l_d_value)
}

/// Discriminator loss under the current parameters, no updates.
pub fn adv_d_eval(model: &Model, x_s: &ImageBatch, x_t: &ImageBatch, use_frm: bool) -> Result<f64> {
    let feat_s = recalibrated_features(model, x_s, use_frm)?;
    let feat_t = recalibrated_features(model, x_t, use_frm)?;
    let mut tape = Tape::new(false);
    let mut binder = Binder::new(&model.store, SubnetMask::none());
    let fs = tape.leaf(feat_s.into_dyn());
    let ft = tape.leaf(feat_t.into_dyn());
    let ss = model
        .disc
        .forward_graph(&mut tape, &mut binder, &model.store, fs);
    let st = model
        .disc
        .forward_graph(&mut tape, &mut binder, &model.store, ft);
    let l = adv_d_graph(&mut tape, ss, st);
    Ok(tape.scalar(l))
}

fn write_loss_csv(path: &Path, log: &[(u64, LossReport)]) -> Result<()> {
    use std::fmt::Write as _;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = String::with_capacity(log.len() * 96 + 64);
    out.push_str(LossReport::CSV_HEADER);
    out.push('\n');
    for (iter, r) in log {
        let _ = writeln!(out, "{}", r.csv_row(*iter as usize));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_trend_csv(path: &Path, scores: &[(u64, f64)]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("epoch,mean_uncertainty\n");
    for (e, s) in scores {
        let _ = writeln!(out, "{e},{s:.9e}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Sibling path of the loss CSV holding the per-epoch uncertainty trend.
pub fn trend_path(log_csv: &Path) -> PathBuf {
    let mut name = log_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "log".into());
    name.push_str(".trend.csv");
    log_csv.with_file_name(name)
}

/// Phase 1: source-supervised pretraining from freshly initialized
/// parameters.
pub fn pretrain_source(ds: &Dataset, cfg: &TrainConfig, paths: &TrainerPaths) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg)?;
    let adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
    run_pretrain(ds, cfg, paths, model, adam, 0)
}

/// Phase 1 resume: continues a pretraining checkpoint at its stored
/// iteration; the remaining loss sequence matches an uninterrupted run.
pub fn pretrain_resume(
    ds: &Dataset,
    cfg: &TrainConfig,
    paths: &TrainerPaths,
    ck: &Checkpoint,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ck.phase != Phase::Pretrain {
        return Err(Error::Checkpoint(format!(
            "expected a pretrain checkpoint, got {}",
            ck.phase.name()
        )));
    }
    let (model, adam) = ck.restore_model(cfg)?;
    run_pretrain(ds, cfg, paths, model, adam, ck.iteration)
}

fn run_pretrain(
    ds: &Dataset,
    cfg: &TrainConfig,
    paths: &TrainerPaths,
    mut model: Model,
    mut adam: Adam,
    start_iter: u64,
) -> Result<TrainOutcome> {
    let src = ds.select(DomainTag::Source, Split::Train);
    require_nonempty(&src, "source train")?;
    let n = src.len() as u64;
    let total = cfg.phase1_iters as u64;

    let capture = |model: &Model, adam: &Adam, iter: u64| {
        let epoch = iter / n;
        Checkpoint::capture(model, adam, cfg, Phase::Pretrain, iter, epoch, iter - iter % n)
    };
    let mut last_good = capture(&model, &adam, start_iter);
    let mut log = Vec::with_capacity((total - start_iter) as usize);
    let mut order: Vec<usize> = Vec::new();

    for iter in start_iter..total {
        let epoch = iter / n;
        let pos = (iter % n) as usize;
        if pos == 0 || order.is_empty() {
            let mut rng = stream2(cfg.seed, Purpose::DataOrder, epoch, 0);
            order = permutation(src.len(), &mut rng);
        }
        let sample = &ds.samples[src[order[pos]]];
        let step = source_step(
            &mut model,
            &mut adam,
            &sample.image,
            &sample.label,
            None,
            1.0,
            cfg.weights.lambda_kl,
            cfg.latent.sigma_scale,
            cfg.phase1_lr,
            mix(cfg.seed, Purpose::LatentTrain, iter),
        );
        let (ce, kl) = match step {
            Ok(v) => v,
            Err(e) => return abort_with(paths, &last_good, e),
        };
        let report = match full_objective(ce, 0.0, 0.0, 0.0, kl, &cfg.weights) {
            Ok(r) => r,
            Err(e) => return abort_with(paths, &last_good, e),
        };
        log.push((iter, report));
        last_good = capture(&model, &adam, iter + 1);
        if let Some(path) = &paths.checkpoint_out {
            if (iter + 1) % cfg.checkpoint_every as u64 == 0 {
                last_good.save(path)?;
            }
        }
    }

    if let Some(path) = &paths.log_csv {
        write_loss_csv(path, &log)?;
    }
    if let Some(path) = &paths.checkpoint_out {
        last_good.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        log,
        epoch_scores: Vec::new(),
    })
}

fn abort_with(paths: &TrainerPaths, last_good: &Checkpoint, e: Error) -> Result<TrainOutcome> {
    if let Some(path) = &paths.checkpoint_out {
        // keep the last finite state reachable for a postmortem
        let _ = last_good.save(path);
    }
    Err(Error::Train(format!(
        "diverged at iteration {} ({e}); last finite checkpoint retained",
        last_good.iteration
    )))
}

/// Phase 2: adaptation. Accepts a pretraining checkpoint (fresh start, new
/// optimizer state) or an adaptation checkpoint saved at an epoch boundary
/// (bit-exact resume).
pub fn adapt(
    ds: &Dataset,
    init: &Checkpoint,
    cfg: &TrainConfig,
    paths: &TrainerPaths,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut adam) = init.restore_model(cfg)?;
    let (mut iter, mut epoch) = match init.phase {
        Phase::Pretrain => {
            // adaptation runs its own optimizer schedule
            adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
            (0u64, 0u64)
        }
        Phase::Adapt => {
            if init.epoch_start_iter != init.iteration {
                return Err(Error::Checkpoint(
                    "adapt checkpoints resume only at epoch boundaries".into(),
                ));
            }
            (init.iteration, init.epoch)
        }
    };

    let src = ds.select(DomainTag::Source, Split::Train);
    let tgt = ds.select(DomainTag::Target, Split::Train);
    require_nonempty(&src, "source train")?;
    require_nonempty(&tgt, "target train")?;
    let targets: Vec<(&str, &ImageBatch)> = tgt
        .iter()
        .map(|&i| (ds.samples[i].id.as_str(), &ds.samples[i].image))
        .collect();

    let total = cfg.phase2_iters as u64;
    let w = &cfg.weights;
    let ab = &cfg.ablation;
    let lambda_t = if ab.use_ust { w.lambda_t } else { 0.0 };
    let run_target = lambda_t > 0.0 || w.lambda_g > 0.0;
    let run_disc = w.lambda_d > 0.0;

    let mut log: Vec<(u64, LossReport)> = Vec::new();
    let mut epoch_scores: Vec<(u64, f64)> = Vec::new();
    let mut last_good = Checkpoint::capture(&model, &adam, cfg, Phase::Adapt, iter, epoch, iter);

    while iter < total {
        // (a) score and rank the target set at the epoch start
        let scored = if ab.use_ust || epoch <= 1 {
            let s = score_target_set(
                &model,
                &targets,
                &cfg.latent,
                mix(cfg.seed, Purpose::TargetScore, epoch),
            )?;
            let mean = s.iter().map(|p| p.score).sum::<f64>() / s.len() as f64;
            epoch_scores.push((epoch, mean));
            Some(s)
        } else {
            None
        };

        let (subset_positions, pseudo_for_slot): (Vec<usize>, Vec<Option<&LabelMap>>);
        let scored_ref = scored.as_deref();
        if ab.use_ust {
            let sched_epoch = (epoch as usize).min(cfg.curriculum.total_epochs - 1);
            let f = curriculum_fraction(sched_epoch, &cfg.curriculum)?;
            let all = scored_ref.expect("scored when use_ust");
            let selected = select_subset(all, f)?;
            if let Some(dir) = &paths.curriculum_dir {
                write_curriculum_csv(
                    &dir.join(format!("epoch_{epoch:04}.csv")),
                    all,
                    selected.len(),
                )?;
            }
            subset_positions = selected.iter().map(|p| p.position).collect();
            pseudo_for_slot = selected.iter().map(|p| Some(&p.pseudo_label)).collect();
        } else {
            subset_positions = (0..tgt.len()).collect();
            pseudo_for_slot = vec![None; tgt.len()];
        }

        let epoch_len = subset_positions.len();
        let epoch_start = iter;
        let mut order_rng = stream2(cfg.seed, Purpose::DataOrder, epoch, 1);
        let target_order = permutation(epoch_len, &mut order_rng);
        let mut src_order: Vec<usize> = Vec::new();
        let mut src_wrap = u64::MAX;

        for slot in 0..epoch_len {
            if iter >= total {
                break;
            }
            let wrap = (slot / src.len()) as u64;
            if wrap != src_wrap {
                let mut rng = stream2(cfg.seed, Purpose::DataOrder, epoch, 2 + wrap);
                src_order = permutation(src.len(), &mut rng);
                src_wrap = wrap;
            }
            let s_sample = &ds.samples[src[src_order[slot % src.len()]]];
            let pick = target_order[slot];
            let t_sample = &ds.samples[tgt[subset_positions[pick]]];
            let pseudo = pseudo_for_slot[pick];

            // (b) source step
            let u_norm = if ab.use_uce {
                let r = mc_infer(
                    &model,
                    &s_sample.image,
                    &cfg.latent,
                    mix(cfg.seed, Purpose::SourceUncertainty, iter),
                )?;
                Some(minmax_normalize(&r.uncertainty, UNCERTAINTY_NORM_HI))
            } else {
                None
            };
            let step_b = source_step(
                &mut model,
                &mut adam,
                &s_sample.image,
                &s_sample.label,
                u_norm.as_ref(),
                w.lambda_s,
                w.lambda_kl,
                cfg.latent.sigma_scale,
                cfg.phase2_lr,
                mix(cfg.seed, Purpose::LatentTrain, iter),
            );
            let (l_s, kl) = match step_b {
                Ok(v) => v,
                Err(e) => return abort_with(paths, &last_good, e),
            };

            // (c) target step
            let (l_t, l_g) = if run_target {
                match target_step(
                    &mut model,
                    &mut adam,
                    &t_sample.image,
                    pseudo,
                    lambda_t,
                    w.lambda_g,
                    ab.use_frm,
                    cfg.latent.sigma_scale,
                    cfg.phase2_lr,
                    mix(cfg.seed, Purpose::LatentTrainTarget, iter),
                ) {
                    Ok(v) => v,
                    Err(e) => return abort_with(paths, &last_good, e),
                }
            } else {
                (0.0, 0.0)
            };

            // (d) discriminator step
            let l_d = if run_disc {
                match disc_step(
                    &mut model,
                    &mut adam,
                    &s_sample.image,
                    &t_sample.image,
                    w.lambda_d,
                    ab.use_frm,
                    cfg.phase2_lr,
                ) {
                    Ok(v) => v,
                    Err(e) => return abort_with(paths, &last_good, e),
                }
            } else {
                0.0
            };

            let report = match full_objective(l_s, l_t, l_d, l_g, kl, w) {
                Ok(r) => r,
                Err(e) => return abort_with(paths, &last_good, e),
            };
            log.push((iter, report));
            iter += 1;
            last_good =
                Checkpoint::capture(&model, &adam, cfg, Phase::Adapt, iter, epoch, epoch_start);
        }

        epoch += 1;
        last_good = Checkpoint::capture(&model, &adam, cfg, Phase::Adapt, iter, epoch, iter);
        if let Some(path) = &paths.checkpoint_out {
            last_good.save(path)?;
        }
    }

    // closing scoring event for the uncertainty trend
    let final_scored = score_target_set(
        &model,
        &targets,
        &cfg.latent,
        mix(cfg.seed, Purpose::TargetScore, epoch),
    )?;
    let mean = final_scored.iter().map(|p| p.score).sum::<f64>() / final_scored.len() as f64;
    epoch_scores.push((epoch, mean));

    if let Some(path) = &paths.log_csv {
        write_loss_csv(path, &log)?;
        write_trend_csv(&trend_path(path), &epoch_scores)?;
    }
    if let Some(path) = &paths.checkpoint_out {
        last_good.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        log,
        epoch_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use crate::synth::{build_corpus, manifest_path, CorpusConfig, PhantomSpec};

    /// Small corpus + small model so each test runs in well under a second
    /// per training iteration.
    fn tiny_setup(dir: &Path, seed: u64) -> (Dataset, TrainConfig) {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.backbone.base_channels = 4;
        cfg.backbone.feature_dim = 8;
        cfg.backbone.pyramid_bins = vec![1, 2];
        cfg.recalib.common_channels = 8;
        cfg.disc.base_width = 8;
        cfg.disc.layers = 1;
        cfg.latent.latent_dim = 3;
        cfg.latent.mc_samples = 2;
        cfg.corpus = CorpusConfig {
            n_source: 8,
            n_target: 5,
            phantom: PhantomSpec {
                height: 16,
                width: 16,
                boundary_wiggle: 1.0,
                ..PhantomSpec::default()
            },
            ..CorpusConfig::default()
        };
        cfg.phase1_iters = 12;
        cfg.phase2_iters = 6;
        cfg.curriculum.total_epochs = 3;
        build_corpus(&cfg.corpus, dir, seed).unwrap();
        let ds = load_dataset(&manifest_path(dir)).unwrap();
        (ds, cfg)
    }

    fn param_snapshot(model: &Model) -> Vec<(String, ndarray::ArrayD<f64>)> {
        model
            .store
            .ids()
            .map(|p| (model.store.name(p).to_string(), model.store.value(p).clone()))
            .collect()
    }

    #[test]
    fn pretrain_smoke_reduces_ce_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = tiny_setup(dir.path(), 3);
        cfg.phase1_iters = 50;
        let a = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let b = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        assert_eq!(a.log.len(), 50);
        // final CE below initial CE on the seeded smoke run
        assert!(
            a.log.last().unwrap().1.l_s < a.log[0].1.l_s,
            "CE did not drop: {} -> {}",
            a.log[0].1.l_s,
            a.log.last().unwrap().1.l_s
        );
        // identical loss logs under the same seed
        for ((ia, ra), (ib, rb)) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 4);
        let mut model = Model::new(&cfg).unwrap();
        let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
        let before = param_snapshot(&model);
        let s = &ds.samples[ds.select(DomainTag::Source, Split::Train)[0]];
        let (ce1, _) = source_step(
            &mut model, &mut adam, &s.image, &s.label, None, 1.0,
            cfg.weights.lambda_kl, 1.0, 0.0, 99,
        )
        .unwrap();
        let (ce2, _) = source_step(
            &mut model, &mut adam, &s.image, &s.label, None, 1.0,
            cfg.weights.lambda_kl, 1.0, 0.0, 99,
        )
        .unwrap();
        assert_eq!(ce1, ce2);
        for ((name, b), p) in before.iter().zip(model.store.ids()) {
            assert_eq!(model.store.name(p), name);
            assert_eq!(model.store.value(p), b, "parameter {name} drifted at lr 0");
        }
    }

    #[test]
    fn discriminator_step_descends_and_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 5);
        let mut model = Model::new(&cfg).unwrap();
        let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
        let xs = &ds.samples[ds.select(DomainTag::Source, Split::Train)[0]].image;
        let xt = &ds.samples[ds.select(DomainTag::Target, Split::Train)[0]].image;

        let before = param_snapshot(&model);
        let l_before = adv_d_eval(&model, xs, xt, true).unwrap();
        disc_step(&mut model, &mut adam, xs, xt, 1.0, true, 1e-3).unwrap();
        let l_after = adv_d_eval(&model, xs, xt, true).unwrap();
        assert!(
            l_after < l_before,
            "disc step did not descend: {l_before} -> {l_after}"
        );

        // only discriminator parameters changed
        for ((name, b), p) in before.iter().zip(model.store.ids()) {
            let changed = model.store.value(p) != b;
            let is_disc = model.store.subnet(p) == crate::nn::Subnet::Discriminator;
            if changed {
                assert!(is_disc, "non-discriminator parameter {name} changed");
            }
        }
        let disc_changed = model
            .store
            .ids()
            .filter(|&p| model.store.subnet(p) == crate::nn::Subnet::Discriminator)
            .any(|p| {
                let name = model.store.name(p).to_string();
                before.iter().find(|(n, _)| *n == name).unwrap().1 != *model.store.value(p)
            });
        assert!(disc_changed, "discriminator step changed nothing");
    }

    #[test]
    fn generator_step_never_touches_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 6);
        let mut model = Model::new(&cfg).unwrap();
        let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
        let t = &ds.samples[ds.select(DomainTag::Target, Split::Train)[0]];

        let before = param_snapshot(&model);
        // pseudo-label from the model itself, as in adaptation
        let r = mc_infer(&model, &t.image, &cfg.latent, 7).unwrap();
        let pseudo = crate::ops::argmax_labels(&r.mean);
        target_step(
            &mut model, &mut adam, &t.image, Some(&pseudo),
            0.1, 0.003, true, 1.0, 1e-3, 8,
        )
        .unwrap();
        let mut frm_changed = false;
        for ((name, b), p) in before.iter().zip(model.store.ids()) {
            let changed = model.store.value(p) != b;
            match model.store.subnet(p) {
                crate::nn::Subnet::Discriminator => {
                    assert!(!changed, "generator-side step changed discriminator {name}");
                }
                crate::nn::Subnet::Frm => frm_changed |= changed,
                _ => {}
            }
        }
        assert!(frm_changed, "adversarial generator step left the recalibrator untouched");
    }

    #[test]
    fn adapt_smoke_reports_are_finite_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 7);
        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let out = adapt(&ds, &pre.checkpoint, &cfg, &TrainerPaths::default()).unwrap();
        assert_eq!(out.log.len(), cfg.phase2_iters);
        for (_, r) in &out.log {
            for v in [r.l_s, r.l_t, r.l_adv_d, r.l_adv_g, r.kl, r.total] {
                assert!(v.is_finite());
            }
            let expected = cfg.weights.lambda_s * r.l_s
                + cfg.weights.lambda_t * r.l_t
                + cfg.weights.lambda_d * r.l_adv_d
                + cfg.weights.lambda_g * r.l_adv_g
                + cfg.weights.lambda_kl * r.kl;
            assert!((r.total - expected).abs() < 1e-6);
        }
        // scoring events: epoch 0, epoch 1, ..., final
        assert!(out.epoch_scores.len() >= 2);
    }

    #[test]
    fn adapt_with_zero_lambdas_is_pure_source_finetuning() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = tiny_setup(dir.path(), 8);
        cfg.weights.lambda_t = 0.0;
        cfg.weights.lambda_d = 0.0;
        cfg.weights.lambda_g = 0.0;
        cfg.ablation.use_uce = false;
        cfg.ablation.use_ust = true; // subset sizes still schedule the epochs

        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let out = adapt(&ds, &pre.checkpoint, &cfg, &TrainerPaths::default()).unwrap();

        // independent reference: source-only finetune with the same
        // derivations; epoch lengths follow from the curriculum arithmetic
        let (mut model, _) = pre.checkpoint.restore_model(&cfg).unwrap();
        let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
        let src = ds.select(DomainTag::Source, Split::Train);
        let tgt = ds.select(DomainTag::Target, Split::Train);
        let mut iter = 0u64;
        let mut epoch = 0u64;
        'outer: loop {
            let sched_epoch = (epoch as usize).min(cfg.curriculum.total_epochs - 1);
            let f = curriculum_fraction(sched_epoch, &cfg.curriculum).unwrap();
            let epoch_len = ((f * tgt.len() as f64).ceil() as usize).min(tgt.len());
            let mut src_order: Vec<usize> = Vec::new();
            let mut src_wrap = u64::MAX;
            for slot in 0..epoch_len {
                if iter >= cfg.phase2_iters as u64 {
                    break 'outer;
                }
                let wrap = (slot / src.len()) as u64;
                if wrap != src_wrap {
                    let mut rng = stream2(cfg.seed, Purpose::DataOrder, epoch, 2 + wrap);
                    src_order = permutation(src.len(), &mut rng);
                    src_wrap = wrap;
                }
                let s = &ds.samples[src[src_order[slot % src.len()]]];
                source_step(
                    &mut model, &mut adam, &s.image, &s.label, None,
                    cfg.weights.lambda_s, cfg.weights.lambda_kl,
                    cfg.latent.sigma_scale, cfg.phase2_lr,
                    mix(cfg.seed, Purpose::LatentTrain, iter),
                )
                .unwrap();
                iter += 1;
            }
            epoch += 1;
        }

        // bit-for-bit identical parameters
        let (final_model, _) = out.checkpoint.restore_model(&cfg).unwrap();
        for p in final_model.store.ids() {
            let name = final_model.store.name(p);
            let q = model.store.by_name(name).unwrap();
            assert_eq!(
                final_model.store.value(p),
                model.store.value(q),
                "parameter {name} differs from the pure finetune reference"
            );
        }
    }

    #[test]
    fn pretrain_resume_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = tiny_setup(dir.path(), 9);
        cfg.phase1_iters = 14;
        cfg.checkpoint_every = 7;
        let ckpt_path = dir.path().join("pre.ckpt");
        let full = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();

        // run again, stopping at the checkpoint cadence
        let mut cfg_half = cfg.clone();
        cfg_half.phase1_iters = 7;
        let paths = TrainerPaths {
            checkpoint_out: Some(ckpt_path.clone()),
            ..TrainerPaths::default()
        };
        pretrain_source(&ds, &cfg_half, &paths).unwrap();
        let ck = Checkpoint::load(&ckpt_path).unwrap();
        assert_eq!(ck.iteration, 7);
        let resumed = pretrain_resume(&ds, &cfg, &TrainerPaths::default(), &ck).unwrap();

        assert_eq!(resumed.log.len(), 7);
        for ((ia, ra), (ib, rb)) in full.log[7..].iter().zip(resumed.log.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ra, rb, "loss mismatch at iteration {ia}");
        }
        // final parameters identical too
        let (a, _) = full.checkpoint.restore_model(&cfg).unwrap();
        let (b, _) = resumed.checkpoint.restore_model(&cfg).unwrap();
        for p in a.store.ids() {
            let q = b.store.by_name(a.store.name(p)).unwrap();
            assert_eq!(a.store.value(p), b.store.value(q));
        }
    }

    #[test]
    fn adapt_resume_at_epoch_boundary_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = tiny_setup(dir.path(), 10);
        // target train split has 4 images; epoch 0 selects ceil(0.2 * 4) = 1
        cfg.phase2_iters = 4;
        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let full = adapt(&ds, &pre.checkpoint, &cfg, &TrainerPaths::default()).unwrap();

        let mut cfg_short = cfg.clone();
        cfg_short.phase2_iters = 1; // exactly epoch 0
        let short = adapt(&ds, &pre.checkpoint, &cfg_short, &TrainerPaths::default()).unwrap();
        let ck = &short.checkpoint;
        assert_eq!(ck.iteration, 1);
        assert_eq!(ck.epoch_start_iter, ck.iteration, "not epoch-aligned");

        let resumed = adapt(&ds, ck, &cfg, &TrainerPaths::default()).unwrap();
        assert_eq!(resumed.log.len(), 3);
        for ((ia, ra), (ib, rb)) in full.log[1..].iter().zip(resumed.log.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ra, rb, "loss mismatch at iteration {ia}");
        }
    }

    #[test]
    fn adapt_rejects_mid_epoch_resume() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 11);
        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let mut bad = pre.checkpoint.clone();
        bad.phase = Phase::Adapt;
        bad.iteration = 3;
        bad.epoch_start_iter = 2;
        assert!(adapt(&ds, &bad, &cfg, &TrainerPaths::default()).is_err());
    }

    #[test]
    fn logs_and_trend_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = tiny_setup(dir.path(), 12);
        let log_path = dir.path().join("out/adapt.csv");
        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        adapt(
            &ds,
            &pre.checkpoint,
            &cfg,
            &TrainerPaths {
                log_csv: Some(log_path.clone()),
                curriculum_dir: Some(dir.path().join("out/curr")),
                ..TrainerPaths::default()
            },
        )
        .unwrap();
        let log = std::fs::read_to_string(&log_path).unwrap();
        assert!(log.starts_with("iter,L_s,L_t,L_adv_D,L_adv_G,KL,total\n"));
        let trend = std::fs::read_to_string(trend_path(&log_path)).unwrap();
        assert!(trend.starts_with("epoch,mean_uncertainty\n"));
        assert!(trend.lines().count() >= 3);
        let dump = std::fs::read_to_string(dir.path().join("out/curr/epoch_0000.csv")).unwrap();
        assert!(dump.starts_with("id,score,selected\n"));
    }
}
