//! Manual phantom-difficulty sweep: pretrain on source, report the
//! source-test vs target-test dice gap per candidate geometry.
//! Run with: cargo test --release -p udalign-core --test tune_probe -- --ignored --nocapture

use udalign_core::config::TrainConfig;
use udalign_core::dataset::load_dataset;
use udalign_core::metrics::{evaluate, mean_dice};
use udalign_core::synth::{build_corpus, manifest_path, Split};
use udalign_core::trainer::{pretrain_source, TrainerPaths};
use udalign_core::types::DomainTag;

#[test]
#[ignore]
fn sweep_phantom_difficulty() {
    let candidates: Vec<(&str, [f64; 3], f64, [f64; 3], f64, f64)> = vec![
        ("G jitter3", [0.38, 0.50, 0.58], 0.08, [0.30, 0.52, 0.72], 5.0, 0.03),
        ("H jitter4", [0.38, 0.50, 0.58], 0.10, [0.30, 0.52, 0.72], 5.0, 0.04),
    ];
    for (name, means, tex, fractions, wiggle, jitter) in candidates {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::default();
        cfg.corpus.phantom.layer_means = means;
        cfg.corpus.phantom.texture_amp = tex;
        cfg.corpus.phantom.boundary_fractions = fractions;
        cfg.corpus.phantom.boundary_wiggle = wiggle;
        cfg.corpus.phantom.mean_jitter = jitter;
        build_corpus(&cfg.corpus, dir.path(), cfg.seed).unwrap();
        let ds = load_dataset(&manifest_path(dir.path())).unwrap();
        let pre = pretrain_source(&ds, &cfg, &TrainerPaths::default()).unwrap();
        let (model, _) = pre.checkpoint.restore_model(&cfg).unwrap();
        let s = mean_dice(
            &evaluate(&model, &ds, DomainTag::Source, Split::Test, &cfg.latent, cfg.seed).unwrap(),
        );
        let t_rows =
            evaluate(&model, &ds, DomainTag::Target, Split::Test, &cfg.latent, cfg.seed).unwrap();
        let t = mean_dice(&t_rows);
        println!(
            "[{name}] src {s:.4} tgt {t:.4} gap {:.2} pts (tgt retinal {:.4}, choroidal {:.4}; final CE {:.4})",
            100.0 * (s - t),
            t_rows[0].dice,
            t_rows[1].dice,
            pre.log.last().unwrap().1.l_s,
        );
    }
}
