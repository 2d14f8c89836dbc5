//! Random but valid inputs.

use rand::Rng;
use streamseg::synth::compact_labels;
use streamseg::{FrameRecord, Pose};

/// Random rotation from a normalized quaternion, plus a random translation.
pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let q: [f64; 4] = loop {
        let q = [0; 4].map(|_| rng.random_range(-1.0..1.0f64));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    Pose {
        rotation: [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
        translation: [0; 3].map(|_| rng.random_range(-5.0..5.0)),
    }
}

fn attention_rows(rng: &mut impl Rng, n_state: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n_state * n);
    for _ in 0..n_state {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| (v / sum) as f32));
    }
    out
}

/// A small valid frame with random dimensions and contents. About one frame
/// in eight carries a NaN in its pointmap, which the format allows.
pub fn random_frame(rng: &mut impl Rng, t: u32) -> FrameRecord {
    let patch_size = [1, 2, 4, 8][rng.random_range(0..4)];
    let (gh, gw) = (rng.random_range(1..5), rng.random_range(1..5));
    let (height, width) = (gh * patch_size, gw * patch_size);
    let n = gh * gw;
    let (d2, d3) = (rng.random_range(0..5), rng.random_range(0..5));
    let n_state = rng.random_range(1..5);
    let n_labels: u16 = rng.random_range(0..6);
    let labels = compact_labels(&(0..height * width).map(|_| rng.random_range(0..=n_labels)).collect::<Vec<_>>());
    let mut points: Vec<f32> = (0..height * width * 3).map(|_| rng.random_range(-10.0..10.0)).collect();
    if rng.random_bool(0.125) {
        let i = rng.random_range(0..points.len());
        points[i] = f32::NAN;
    }
    let f = rng.random_range(10.0..500.0);
    FrameRecord {
        t,
        height,
        width,
        patch_size,
        intrinsics: [[f, 0.0, width as f64 / 2.0], [0.0, f * rng.random_range(0.9..1.1), height as f64 / 2.0], [0.0, 0.0, 1.0]],
        pose: random_pose(rng).to_matrix(),
        points,
        d2,
        feat2d: (0..n * d2).map(|_| rng.random_range(-3.0..3.0)).collect(),
        d3,
        feat3d: (0..n * d3).map(|_| rng.random_range(-3.0..3.0)).collect(),
        n_state,
        attention: attention_rows(rng, n_state, n),
        labels,
    }
}
