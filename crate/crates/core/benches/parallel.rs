use criterion::{criterion_group, criterion_main, Criterion};

use diffusion_tad::config::RunConfig;
use diffusion_tad::data::{generate_synthetic, SyntheticSpec};
use diffusion_tad::model::DenoiserModel;
use diffusion_tad::parallel::{map_indexed, map_indexed_seq};

/// Per-video encoder passes, the unit of work both maps distribute.
fn encode_all(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.synth = SyntheticSpec {
        num_videos: 8,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&cfg.synth, 0).expect("synthetic data");
    cfg.fit_model_to_data(data.videos[0].rgb.snippets.ncols(), cfg.synth.classes);
    let model = DenoiserModel::new(cfg.model.clone(), 0).expect("model");
    let inputs: Vec<_> = data.videos.iter().map(|v| cfg.data.fusion.inputs(v).remove(0)).collect();

    let mut group = c.benchmark_group("encode_videos");
    group.bench_function("rayon", |b| {
        b.iter(|| map_indexed(&inputs, |_, (s, f)| model.encode(*s, f).expect("encode")))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| map_indexed_seq(&inputs, |_, (s, f)| model.encode(*s, f).expect("encode")))
    });
    group.finish();
}

criterion_group!(benches, encode_all);
criterion_main!(benches);
