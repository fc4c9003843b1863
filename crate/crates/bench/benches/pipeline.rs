use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use naco_bench::real_videos;
use naco_core::backbone::{embed_clips, init_backbone};
use naco_core::config::{Profile, RunConfig};
use naco_core::rng::seeded;
use naco_core::ssl::{init_decoder, sample_batch, ssl_forward};
use naco_core::numerics::Tape;
use naco_core::videodata::CorpusEntry;

/// One pretraining forward and backward pass at the desk batch size.
fn pretrain_step(c: &mut Criterion) {
    let cfg = RunConfig::profile(Profile::Desk);
    let videos = real_videos(Profile::Desk, cfg.ssl.batch_size);
    let refs: Vec<&CorpusEntry> = videos.iter().collect();
    let batch = sample_batch(&refs, &cfg.ssl, &cfg.model, &mut seeded(0)).unwrap();
    let mut params = init_backbone::<f32>(&cfg.model, 0);
    params.merge(init_decoder(&cfg.model, 0));
    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    group.bench_function("pretrain_step", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let out = ssl_forward(&mut tape, &b, &cfg.model, &cfg.ssl, &batch).unwrap();
            black_box(tape.backward(out.total).unwrap());
        })
    });
    let clips = batch.anchors.iter().collect::<Vec<_>>();
    group.bench_function("embed_batch", |bench| {
        bench.iter(|| black_box(embed_clips(&params, &cfg.model, &clips).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, pretrain_step);
criterion_main!(benches);
