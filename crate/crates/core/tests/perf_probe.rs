//! Manual timing probe for the default-scale hot paths.
//! Run with: cargo test --release -p udalign-core --test perf_probe -- --ignored --nocapture

use std::time::Instant;
use udalign_core::config::TrainConfig;
use udalign_core::dataset::load_dataset;
use udalign_core::model::Model;
use udalign_core::nn::Adam;
use udalign_core::ops::minmax_normalize;
use udalign_core::synth::{build_corpus, manifest_path, CorpusConfig, Split};
use udalign_core::trainer::{disc_step, source_step, target_step};
use udalign_core::types::DomainTag;
use udalign_core::uesm::mc_infer;

#[test]
#[ignore]
fn probe_default_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let corpus = CorpusConfig {
        n_source: 4,
        n_target: 4,
        ..cfg.corpus.clone()
    };
    build_corpus(&corpus, dir.path(), 1).unwrap();
    let ds = load_dataset(&manifest_path(dir.path())).unwrap();
    let mut model = Model::new(&cfg).unwrap();
    let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
    let s = &ds.samples[ds.select(DomainTag::Source, Split::Train)[0]];
    let t = &ds.samples[ds.select(DomainTag::Target, Split::Train)[0]];

    println!("params: {:?}", model.param_summary());

    let t0 = Instant::now();
    let n = 5;
    for i in 0..n {
        mc_infer(&model, &s.image, &cfg.latent, i).unwrap();
    }
    println!("mc_infer (N=4): {:?}/call", t0.elapsed() / n as u32);

    let t0 = Instant::now();
    for i in 0..n {
        source_step(
            &mut model, &mut adam, &s.image, &s.label, None, 1.0, 1.0, 1.0, 1e-3, i,
        )
        .unwrap();
    }
    println!("source_step: {:?}/call", t0.elapsed() / n as u32);

    let t0 = Instant::now();
    for i in 0..n {
        let r = mc_infer(&model, &s.image, &cfg.latent, 100 + i).unwrap();
        let u = minmax_normalize(&r.uncertainty, 0.1);
        source_step(
            &mut model, &mut adam, &s.image, &s.label, Some(&u), 1.0, 1.0, 1.0, 1e-4, i,
        )
        .unwrap();
    }
    println!("source_step+uce: {:?}/call", t0.elapsed() / n as u32);

    let r = mc_infer(&model, &t.image, &cfg.latent, 0).unwrap();
    let pseudo = udalign_core::ops::argmax_labels(&r.mean);
    let t0 = Instant::now();
    for i in 0..n {
        target_step(
            &mut model, &mut adam, &t.image, Some(&pseudo), 0.1, 0.003, true, 1.0, 1e-4, i,
        )
        .unwrap();
    }
    println!("target_step: {:?}/call", t0.elapsed() / n as u32);

    let t0 = Instant::now();
    for _ in 0..n {
        disc_step(&mut model, &mut adam, &s.image, &t.image, 1.0, true, 1e-4).unwrap();
    }
    println!("disc_step: {:?}/call", t0.elapsed() / n as u32);
}
