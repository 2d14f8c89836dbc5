//! Synthetic scenes with known ground truth: axis-aligned boxes and ellipsoids
//! in a box-shaped room, a camera trajectory, ray-cast pointmaps, noisy
//! per-object feature signatures, synthetic state attention and
//! over-segmented label maps.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CloudAccumulator, GroundTruth};
use crate::frame::{majority_downsample, write_sequence, FrameRecord};
use crate::geometry::{add, norm, scale, sub, Intrinsics, Pose, Vec3};

pub const GT_FILE: &str = "gt_instances.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: Vec3,
    /// Full extents along x, y, z (diameters for ellipsoids).
    pub size: Vec3,
    /// Feature signatures; drawn from the scene seed when absent.
    #[serde(default)]
    pub signature2d: Option<Vec<f64>>,
    #[serde(default)]
    pub signature3d: Option<Vec<f64>>,
}

impl ObjectSpec {
    fn half(&self) -> Vec3 {
        scale(self.size, 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let h = self.half();
        let d = sub(p, self.center);
        match self.shape {
            Shape::Box => (0..3).all(|a| d[a].abs() <= h[a]),
            Shape::Ellipsoid => (0..3).map(|a| (d[a] / h[a]).powi(2)).sum::<f64>() <= 1.0,
        }
    }

    /// Nearest positive ray parameter at which `origin + t·dir` meets the surface.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let h = self.half();
        let o = sub(origin, self.center);
        match self.shape {
            Shape::Box => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a].abs() < 1e-12 {
                        if o[a].abs() > h[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut n, mut f) = ((-h[a] - o[a]) / dir[a], (h[a] - o[a]) / dir[a]);
                    if n > f {
                        std::mem::swap(&mut n, &mut f);
                    }
                    t0 = t0.max(n);
                    t1 = t1.min(f);
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Shape::Ellipsoid => {
                let os: Vec3 = [o[0] / h[0], o[1] / h[1], o[2] / h[2]];
                let ds: Vec3 = [dir[0] / h[0], dir[1] / h[1], dir[2] / h[2]];
                let a = ds.iter().map(|v| v * v).sum::<f64>();
                let b = 2.0 * os.iter().zip(&ds).map(|(x, y)| x * y).sum::<f64>();
                let c = os.iter().map(|v| v * v).sum::<f64>() - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t > 0.0).then_some(t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Circle of `radius` around `center` at `height`, looking at `center`
    /// raised to `target_z`.
    Orbit { center: Vec3, radius: f64, height: f64, target_z: f64, start_deg: f64, sweep_deg: f64 },
    /// Explicit row-major 4×4 camera-to-world poses, one per frame.
    Poses { poses: Vec<[[f64; 4]; 4]> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-channel Gaussian feature noise.
    pub feature_sigma: f64,
    /// Relative Gaussian noise on ray depth.
    pub depth_sigma: f64,
    /// Gaussian perturbation of the reported pose (radians and scene units).
    pub pose_jitter: f64,
    /// Multiplicative noise on attention entries before normalization.
    pub attention_sigma: f64,
    /// Norm of the view-dependent appearance offset, relative to the
    /// signature norm. The offset rotates with the camera azimuth around
    /// each object.
    #[serde(default)]
    pub view_strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room spans `[0, room[a]]` on every axis; z is up.
    pub room: Vec3,
    pub objects: Vec<ObjectSpec>,
    pub trajectory: Trajectory,
    pub noise: NoiseSpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub hfov_deg: f64,
    pub d2: usize,
    pub d3: usize,
    pub n_state: usize,
    /// Share of each state token's attention spread uniformly over all patches.
    pub attention_floor: f64,
    /// Cosine between generated signatures of different objects.
    pub signature_correlation: f64,
    /// Vertical strips each instance is split into.
    pub oversegment: usize,
}

/// A generated sequence: frames whose label maps are the (fragmented) mask
/// input, plus the ground-truth object label maps.
#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub frames: Vec<FrameRecord>,
    pub gt_labels: Vec<Vec<u16>>,
    pub n_objects: usize,
}

impl SceneSpec {
    /// The standard acceptance scene: 5 objects, 16 frames, σ = 0.1, k = 2.
    pub fn acceptance(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let room = [8.0, 8.0, 3.0];
        let objects = place_objects(&mut rng, 5, [4.0, 4.0], 1.8, (0.5, 1.0), 0.35);
        SceneSpec {
            seed,
            room,
            objects,
            trajectory: Trajectory::Orbit {
                center: [4.0, 4.0, 0.0],
                radius: 3.4,
                height: 1.8,
                target_z: 0.3,
                start_deg: 0.0,
                sweep_deg: 150.0,
            },
            noise: NoiseSpec { feature_sigma: 0.1, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.1, view_strength: 0.0 },
            frames: 16,
            width: 160,
            height: 120,
            patch_size: 8,
            hfov_deg: 75.0,
            d2: 16,
            d3: 16,
            n_state: 64,
            attention_floor: 0.2,
            signature_correlation: 0.85,
            oversegment: 2,
        }
    }

    /// Acceptance settings with a narrow, close camera: objects enter and leave the view.
    pub fn partial_visibility(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba77);
        let mut s = Self::acceptance(seed);
        s.objects = place_objects(&mut rng, 7, [4.0, 4.0], 2.2, (0.5, 1.0), 0.35);
        s.hfov_deg = 50.0;
        s.trajectory = Trajectory::Orbit {
            center: [4.0, 4.0, 0.0],
            radius: 3.5,
            height: 1.6,
            target_z: 0.3,
            start_deg: rng.random_range(0.0..360.0),
            sweep_deg: 200.0,
        };
        s
    }

    /// A crowded, longer scene for latency measurements.
    pub fn latency(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e);
        let mut s = Self::acceptance(seed);
        s.room = [16.0, 16.0, 3.0];
        s.objects = place_objects(&mut rng, 60, [8.0, 8.0], 5.0, (0.35, 0.7), 0.15);
        s.trajectory = Trajectory::Orbit {
            center: [8.0, 8.0, 0.0],
            radius: 6.6,
            height: 2.6,
            target_z: 0.0,
            start_deg: 0.0,
            sweep_deg: 360.0,
        };
        s.frames = 48;
        s.width = 256;
        s.height = 192;
        s.hfov_deg = 90.0;
        s.d2 = 32;
        s.d3 = 32;
        s.signature_correlation = 0.0;
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_hfov(self.width, self.height, self.hfov_deg)
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        match &self.trajectory {
            Trajectory::Orbit { center, radius, height, target_z, start_deg, sweep_deg } => (0..self.frames)
                .map(|i| {
                    let frac = if self.frames > 1 { i as f64 / (self.frames - 1) as f64 } else { 0.0 };
                    let a = (start_deg + frac * sweep_deg).to_radians();
                    let eye = [center[0] + radius * a.cos(), center[1] + radius * a.sin(), *height];
                    Pose::look_at(eye, [center[0], center[1], *target_z], [0.0, 0.0, 1.0])
                })
                .collect(),
            Trajectory::Poses { poses } => {
                if poses.len() != self.frames {
                    return Err(Error::Config(format!("{} poses for {} frames", poses.len(), self.frames)));
                }
                Ok(poses.iter().map(Pose::from_matrix).collect())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.patch_size == 0 || self.width % self.patch_size != 0 || self.height % self.patch_size != 0 {
            return Err(Error::Config("resolution must be a positive multiple of patch_size".into()));
        }
        if self.objects.is_empty() || self.objects.len() >= u16::MAX as usize {
            return Err(Error::Config(format!("{} objects", self.objects.len())));
        }
        if self.d2 == 0 || self.d3 == 0 || self.n_state == 0 || self.oversegment == 0 {
            return Err(Error::Config("d2, d3, n_state and oversegment must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attention_floor) || !(0.0..1.0).contains(&self.signature_correlation) {
            return Err(Error::Config("attention_floor and signature_correlation must lie in [0, 1)".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let h = o.half();
            if (0..3).any(|a| h[a] <= 0.0 || o.center[a] - h[a] < 0.0 || o.center[a] + h[a] > self.room[a]) {
                return Err(Error::Config(format!("object {i} is degenerate or leaves the room")));
            }
            for (sig, d) in [(&o.signature2d, self.d2), (&o.signature3d, self.d3)] {
                if sig.as_ref().is_some_and(|s| s.len() != d) {
                    return Err(Error::Config(format!("object {i} signature has the wrong length")));
                }
            }
        }
        for (t, pose) in self.poses()?.iter().enumerate() {
            let eye = pose.translation;
            if (0..3).any(|a| eye[a] <= 0.0 || eye[a] >= self.room[a]) {
                return Err(Error::Config(format!("camera {t} is outside the room")));
            }
            if let Some(i) = self.objects.iter().position(|o| o.contains(eye)) {
                return Err(Error::Config(format!("camera {t} is inside object {i}")));
            }
        }
        Ok(())
    }
}

/// Random non-overlapping objects resting on the floor within `spread` of `center`.
pub fn place_objects(
    rng: &mut impl Rng,
    n: usize,
    center: [f64; 2],
    spread: f64,
    size_range: (f64, f64),
    gap: f64,
) -> Vec<ObjectSpec> {
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        let size = [
            rng.random_range(size_range.0..size_range.1),
            rng.random_range(size_range.0..size_range.1),
            rng.random_range(size_range.0..size_range.1),
        ];
        let r = spread * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let c = [center[0] + r * a.cos(), center[1] + r * a.sin(), size[2] / 2.0];
        let radius = 0.5 * size[0].hypot(size[1]);
        let clear = objects.iter().all(|o| {
            let ro = 0.5 * o.size[0].hypot(o.size[1]);
            (c[0] - o.center[0]).hypot(c[1] - o.center[1]) > radius + ro + gap
        });
        // give up on the gap rather than loop forever in crowded rooms
        if clear || attempts > 10_000 * n {
            let shape = if objects.len() % 2 == 0 { Shape::Box } else { Shape::Ellipsoid };
            objects.push(ObjectSpec { shape, center: c, size, signature2d: None, signature3d: None });
        }
    }
    objects
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / len).collect()
}

/// Seed of the direction every generated signature shares, in all scenes.
const COMMON_DIRECTION_SEED: u64 = 0xc0ffee;

/// Signatures `√ρ·c + √(1−ρ)·u_i` scaled to norm `√d`. The common part `c`
/// is a fixed direction per dimension, so it is the same in every scene;
/// index 0 is the background.
fn signatures(rng: &mut impl Rng, n: usize, d: usize, rho: f64) -> Vec<Vec<f64>> {
    let common = unit_gaussian(&mut ChaCha8Rng::seed_from_u64(COMMON_DIRECTION_SEED ^ d as u64), d);
    let s = (d as f64).sqrt();
    (0..n)
        .map(|_| {
            let u = unit_gaussian(rng, d);
            common.iter().zip(&u).map(|(c, u)| s * (rho.sqrt() * c + (1.0 - rho).sqrt() * u)).collect()
        })
        .collect()
}

/// Nearest hit along a ray: `(t, label)` with label 0 for the room walls.
pub fn raycast(objects: &[ObjectSpec], room: Vec3, origin: Vec3, dir: Vec3) -> (f64, u16) {
    let mut best = (f64::INFINITY, 0u16);
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            continue;
        }
        for wall in [0.0, room[a]] {
            let t = (wall - origin[a]) / dir[a];
            if t > 0.0 && t < best.0 {
                best = (t, 0);
            }
        }
    }
    for (i, o) in objects.iter().enumerate() {
        if let Some(t) = o.intersect(origin, dir) {
            if t < best.0 {
                best = (t, i as u16 + 1);
            }
        }
    }
    best
}

/// Splits each instance of a label map into `k` vertical strips over its
/// column extent and relabels the non-empty parts contiguously, in
/// (instance, strip) order.
pub fn fragment_masks(labels: &[u16], height: usize, width: usize, k: usize) -> Vec<u16> {
    let k = k.max(1);
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut lo = vec![usize::MAX; n + 1];
    let mut hi = vec![0usize; n + 1];
    for r in 0..height {
        for c in 0..width {
            let l = labels[r * width + c] as usize;
            lo[l] = lo[l].min(c);
            hi[l] = hi[l].max(c);
        }
    }
    let strip = |l: usize, c: usize| ((c - lo[l]) * k) / (hi[l] - lo[l] + 1);
    let mut used = vec![vec![false; k]; n + 1];
    for r in 0..height {
        for c in 0..width {
            let l = labels[r * width + c] as usize;
            if l > 0 {
                used[l][strip(l, c)] = true;
            }
        }
    }
    let mut next = 0u16;
    let mut new_label = vec![vec![0u16; k]; n + 1];
    for l in 1..=n {
        for s in 0..k {
            if used[l][s] {
                next += 1;
                new_label[l][s] = next;
            }
        }
    }
    (0..height * width)
        .map(|i| match labels[i] as usize {
            0 => 0,
            l => new_label[l][strip(l, i % width)],
        })
        .collect()
}

/// Relabels so the labels present form `1..=m` in ascending order of the old labels.
pub fn compact_labels(labels: &[u16]) -> Vec<u16> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut present = vec![false; max + 1];
    for &l in labels {
        present[l as usize] = true;
    }
    let mut map = vec![0u16; max + 1];
    let mut next = 0;
    for l in 1..=max {
        if present[l] {
            next += 1;
            map[l] = next;
        }
    }
    labels.iter().map(|&l| map[l as usize]).collect()
}

fn jitter_pose(pose: &Pose, sigma: f64, rng: &mut impl Rng) -> Pose {
    if sigma == 0.0 {
        return *pose;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let w: Vec3 = [n.sample(rng), n.sample(rng), n.sample(rng)];
    let theta = norm(w);
    let mut rotation = pose.rotation;
    if theta > 0.0 {
        // Rodrigues rotation about w, applied on the world side
        let k = scale(w, 1.0 / theta);
        let (s, c) = theta.sin_cos();
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let kk: f64 = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
                r[i][j] = if i == j { 1.0 } else { 0.0 } + s * kx[i][j] + (1.0 - c) * kk;
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = (0..3).map(|m| r[i][m] * pose.rotation[m][j]).sum();
            }
        }
    }
    let translation = add(pose.translation, [n.sample(rng), n.sample(rng), n.sample(rng)]);
    Pose { rotation, translation }
}

/// Renders every frame of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_obj = spec.objects.len();
    let mut sig2 = signatures(&mut rng, n_obj + 1, spec.d2, spec.signature_correlation);
    let mut sig3 = signatures(&mut rng, n_obj + 1, spec.d3, spec.signature_correlation);
    for (i, o) in spec.objects.iter().enumerate() {
        if let Some(s) = &o.signature2d {
            sig2[i + 1] = s.clone();
        }
        if let Some(s) = &o.signature3d {
            sig3[i + 1] = s.clone();
        }
    }
    let view_basis: Vec<[Vec<f64>; 2]> = (0..=n_obj)
        .map(|_| {
            let d = spec.d2 + spec.d3;
            let s = spec.noise.view_strength * (d as f64).sqrt();
            let a = unit_gaussian(&mut rng, d).into_iter().map(|v| v * s).collect();
            let b = unit_gaussian(&mut rng, d).into_iter().map(|v| v * s).collect();
            [a, b]
        })
        .collect();
    let k = spec.intrinsics();
    let poses = spec.poses()?;
    let (h, w, ps) = (spec.height, spec.width, spec.patch_size);
    let (gh, gw) = (h / ps, w / ps);
    let n_patches = gh * gw;
    let feat_noise = Normal::new(0.0, spec.noise.feature_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let depth_noise = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let att_noise = Normal::new(0.0, spec.noise.attention_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_labels = Vec::with_capacity(spec.frames);
    for (t, pose) in poses.iter().enumerate() {
        let mut points = Vec::with_capacity(h * w * 3);
        let mut gt = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let dir = pose.rotate(k.unproject_dir(c as f64 + 0.5, r as f64 + 0.5));
                let (mut depth, label) = raycast(&spec.objects, spec.room, pose.translation, dir);
                if spec.noise.depth_sigma > 0.0 {
                    depth *= 1.0 + depth_noise.sample(&mut rng);
                }
                let p = add(pose.translation, scale(dir, depth));
                points.extend(p.iter().map(|&v| v as f32));
                gt.push(label);
            }
        }

        let owner = majority_downsample(&gt, h, w, ps);
        let mut feat2d = Vec::with_capacity(n_patches * spec.d2);
        let mut feat3d = Vec::with_capacity(n_patches * spec.d3);
        let view: Vec<Vec<f64>> = (0..=n_obj)
            .map(|o| {
                let c = if o == 0 { [spec.room[0] / 2.0, spec.room[1] / 2.0] } else {
                    [spec.objects[o - 1].center[0], spec.objects[o - 1].center[1]]
                };
                let az = (pose.translation[1] - c[1]).atan2(pose.translation[0] - c[0]);
                let [a, b] = &view_basis[o];
                a.iter().zip(b).map(|(a, b)| a * az.cos() + b * az.sin()).collect()
            })
            .collect();
        for &o in &owner {
            let off = &view[o as usize];
            for (c, v) in sig2[o as usize].iter().enumerate() {
                feat2d.push((v + off[c] + feat_noise.sample(&mut rng)) as f32);
            }
            for (c, v) in sig3[o as usize].iter().enumerate() {
                feat3d.push((v + off[spec.d2 + c] + feat_noise.sample(&mut rng)) as f32);
            }
        }

        let mut visible: Vec<Vec<usize>> = vec![Vec::new(); n_obj + 1];
        for (p, &o) in owner.iter().enumerate() {
            visible[o as usize].push(p);
        }
        let mut attention = Vec::with_capacity(spec.n_state * n_patches);
        for token in 0..spec.n_state {
            let target = &visible[token % n_obj + 1];
            let mut row = vec![spec.attention_floor / n_patches as f64; n_patches];
            if target.is_empty() {
                row.iter_mut().for_each(|v| *v = 1.0 / n_patches as f64);
            } else {
                for &p in target {
                    row[p] += (1.0 - spec.attention_floor) / target.len() as f64;
                }
            }
            for v in &mut row {
                *v *= (1.0 + att_noise.sample(&mut rng)).max(0.0);
            }
            let sum: f64 = row.iter().sum();
            attention.extend(row.iter().map(|v| (v / sum) as f32));
        }

        let labels = compact_labels(&fragment_masks(&gt, h, w, spec.oversegment));
        let reported = jitter_pose(pose, spec.noise.pose_jitter, &mut rng);
        frames.push(FrameRecord {
            t: t as u32,
            height: h,
            width: w,
            patch_size: ps,
            intrinsics: k.to_matrix(),
            pose: reported.to_matrix(),
            points,
            d2: spec.d2,
            feat2d,
            d3: spec.d3,
            feat3d,
            n_state: spec.n_state,
            attention,
            labels,
        });
        gt_labels.push(gt);
    }
    Ok(SynthSequence { frames, gt_labels, n_objects: n_obj })
}

impl SynthSequence {
    /// Ground truth over the union cloud at voxel size `voxel`.
    pub fn ground_truth(&self, voxel: f64) -> GroundTruth {
        let mut acc = CloudAccumulator::new(voxel);
        for (f, gt) in self.frames.iter().zip(&self.gt_labels) {
            acc.add_frame(f, |i| gt[i] as usize);
        }
        acc.finish().into_ground_truth()
    }

    /// Writes the frames and the ground-truth file.
    pub fn write(&self, dir: &Path, voxel: f64) -> Result<()> {
        write_sequence(dir, &self.frames)?;
        let gt = self.ground_truth(voxel);
        gt.write_csv(fs::File::create(dir.join(GT_FILE))?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_box_spec() -> SceneSpec {
        let mut s = SceneSpec::acceptance(1);
        s.objects = vec![ObjectSpec {
            shape: Shape::Box,
            center: [4.0, 6.0, 1.5],
            size: [1.0, 0.5, 1.0],
            signature2d: None,
            signature3d: None,
        }];
        let pose = Pose::look_at([4.0, 2.0, 1.5], [4.0, 6.0, 1.5], [0.0, 0.0, 1.0]).unwrap();
        s.trajectory = Trajectory::Poses { poses: vec![pose.to_matrix()] };
        s.frames = 1;
        s.noise = NoiseSpec { feature_sigma: 0.0, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.0, view_strength: 0.0 };
        s.oversegment = 1;
        s
    }

    #[test]
    fn fronto_parallel_box_is_a_rectangle() {
        let spec = single_box_spec();
        let seq = generate(&spec).unwrap();
        let f = &seq.frames[0];
        let k = spec.intrinsics();
        // front face at y = 5.75, 3.75 from the camera; x in [3.5, 4.5], z in [1.0, 2.0]
        for r in 0..f.height {
            for c in 0..f.width {
                let (u, v) = (c as f64 + 0.5, r as f64 + 0.5);
                let x = (u - k.cx) / k.fx * 3.75;
                let y = (v - k.cy) / k.fy * 3.75;
                let inside = x.abs() < 0.5 && y.abs() < 0.5;
                assert_eq!(f.labels[r * f.width + c] == 1, inside, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn wall_depth_at_center() {
        let mut spec = single_box_spec();
        spec.objects[0].center = [1.0, 1.0, 0.5];
        spec.objects[0].size = [0.4, 0.4, 0.4];
        // camera 2 units from the y = 8 wall, facing it
        let pose = Pose::look_at([4.0, 6.0, 1.5], [4.0, 8.0, 1.5], [0.0, 0.0, 1.0]).unwrap();
        spec.trajectory = Trajectory::Poses { poses: vec![pose.to_matrix()] };
        spec.width = 16;
        spec.height = 16;
        let seq = generate(&spec).unwrap();
        let f = &seq.frames[0];
        // pixel centers straddle the axis; average the four central pixels
        let mut z = 0.0;
        for (r, c) in [(7, 7), (7, 8), (8, 7), (8, 8)] {
            z += pose.world_to_camera(f.point(r, c))[2];
        }
        assert!((z / 4.0 - 2.0).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_features_equal_signatures() {
        let spec = single_box_spec();
        let seq = generate(&spec).unwrap();
        let f = &seq.frames[0];
        let masks = crate::frame::patchify_masks(f);
        let p0 = masks.instances[0].patches[0];
        for &p in &masks.instances[0].patches {
            assert_eq!(f.feat2d[p * f.d2..(p + 1) * f.d2], f.feat2d[p0 * f.d2..(p0 + 1) * f.d2]);
        }
    }

    #[test]
    fn fragment_strips() {
        let labels = vec![1u16; 10];
        assert_eq!(fragment_masks(&labels, 1, 10, 1), labels);
        let out = fragment_masks(&labels, 1, 10, 2);
        assert_eq!(out, vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn camera_inside_object_is_rejected() {
        let mut spec = single_box_spec();
        spec.objects[0].center = [4.0, 2.0, 1.5];
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn presets_generate_valid_frames() {
        let seq = generate(&SceneSpec::acceptance(3)).unwrap();
        assert_eq!(seq.frames.len(), 16);
        for f in &seq.frames {
            f.validate().unwrap();
        }
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = SceneSpec::acceptance(9);
        assert_eq!(SceneSpec::from_toml(&s.to_toml().unwrap()).unwrap(), s);
    }
}
