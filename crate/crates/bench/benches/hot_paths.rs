//! Criterion benchmarks for the training hot paths at reference scale
//! (64x64 images, default model widths).

use criterion::{criterion_group, criterion_main, Criterion};
use udalign_core::config::TrainConfig;
use udalign_core::dataset::{load_dataset, Dataset};
use udalign_core::model::Model;
use udalign_core::nn::Adam;
use udalign_core::ops::argmax_labels;
use udalign_core::synth::{build_corpus, manifest_path, CorpusConfig, Split};
use udalign_core::trainer::{disc_step, source_step, target_step};
use udalign_core::types::DomainTag;
use udalign_core::uesm::mc_infer;

struct Fixture {
    cfg: TrainConfig,
    ds: Dataset,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = TrainConfig::default();
    let corpus = CorpusConfig {
        n_source: 4,
        n_target: 4,
        ..cfg.corpus.clone()
    };
    build_corpus(&corpus, dir.path(), 1).expect("corpus");
    let ds = load_dataset(&manifest_path(dir.path())).expect("dataset");
    Fixture { cfg, ds, _dir: dir }
}

fn bench_hot_paths(c: &mut Criterion) {
    let f = fixture();
    let src = f.ds.select(DomainTag::Source, Split::Train);
    let tgt = f.ds.select(DomainTag::Target, Split::Train);
    let s = &f.ds.samples[src[0]];
    let t = &f.ds.samples[tgt[0]];

    let mut group = c.benchmark_group("hot_paths");
    group.sample_size(10);

    group.bench_function("mc_infer_n4", |b| {
        let model = Model::new(&f.cfg).expect("model");
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            mc_infer(&model, &s.image, &f.cfg.latent, seed).expect("mc_infer")
        });
    });

    group.bench_function("source_step", |b| {
        let mut model = Model::new(&f.cfg).expect("model");
        let mut adam = Adam::new(&model.store, f.cfg.adam_beta1, f.cfg.adam_beta2);
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            source_step(
                &mut model, &mut adam, &s.image, &s.label, None, 1.0, 1.0, 1.0, 1e-3, seed,
            )
            .expect("source_step")
        });
    });

    group.bench_function("target_step", |b| {
        let mut model = Model::new(&f.cfg).expect("model");
        let mut adam = Adam::new(&model.store, f.cfg.adam_beta1, f.cfg.adam_beta2);
        let pseudo = {
            let r = mc_infer(&model, &t.image, &f.cfg.latent, 0).expect("mc_infer");
            argmax_labels(&r.mean)
        };
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            target_step(
                &mut model, &mut adam, &t.image, Some(&pseudo), 0.1, 0.003, true, 1.0, 1e-4, seed,
            )
            .expect("target_step")
        });
    });

    group.bench_function("disc_step", |b| {
        let mut model = Model::new(&f.cfg).expect("model");
        let mut adam = Adam::new(&model.store, f.cfg.adam_beta1, f.cfg.adam_beta2);
        b.iter(|| {
            disc_step(&mut model, &mut adam, &s.image, &t.image, 1.0, true, 1e-4)
                .expect("disc_step")
        });
    });

    group.finish();
}

criterion_group!(benches, bench_hot_paths);
criterion_main!(benches);
