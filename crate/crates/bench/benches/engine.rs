use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamseg::assign::max_weight_assignment;
use streamseg::pipeline::{Pipeline, RunConfig};
use streamseg::qim::RasterTarget;
use streamseg::synth::{generate, SceneSpec};

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("max_weight_assignment");
    for n in [8usize, 32, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let e = Array2::from_shape_fn((n, n + n / 2), |_| {
            if rng.random_bool(0.3) { f64::NEG_INFINITY } else { rng.random_range(-1.0..3.0) }
        });
        group.bench_with_input(BenchmarkId::from_parameter(n), &e, |b, e| b.iter(|| max_weight_assignment(black_box(e))));
    }
    group.finish();
}

/// A pipeline that has consumed all but the last frame of the latency scene.
fn warm_pipeline() -> (Pipeline, streamseg::FrameRecord) {
    let mut seq = generate(&SceneSpec::latency(0)).expect("scene");
    let last = seq.frames.pop().expect("frames");
    let mut p = Pipeline::new(RunConfig::default(), None).expect("pipeline");
    for f in &seq.frames {
        p.process_frame(f).expect("frame");
    }
    (p, last)
}

fn engine(c: &mut Criterion) {
    let (warm, last) = warm_pipeline();
    println!("bank={} instances={}", warm.memory.bank.len(), warm.scene.instances.len());

    c.bench_function("process_frame/latency_scene", |b| {
        b.iter_batched(|| warm.clone(), |mut p| p.process_frame(black_box(&last)).expect("frame"), BatchSize::LargeInput)
    });

    let pose = last.camera_pose();
    let k = last.camera();
    let target = RasterTarget {
        pose: &pose,
        intrinsics: &k,
        height: last.height,
        width: last.width,
        patch_size: last.patch_size,
        occlusion: None,
    };
    c.bench_function("rasterize/latency_scene", |b| b.iter(|| warm.memory.rasterize(black_box(&target)).expect("raster")));
}

criterion_group!(benches, assignment, engine);
criterion_main!(benches);
