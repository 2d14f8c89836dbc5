//! Worked examples checked against independently coded oracles.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamseg::assign::max_weight_assignment;
use streamseg::eval::{average_precision, GroundTruth, InstancePrediction, VoxelCloud};
use streamseg::frame::{majority_downsample, patchify_masks};
use streamseg::fusion::{merge_components, score_matrix, state_token, FusionConfig, MergedObservation, SceneState, StateToken};
use streamseg::model::{DecoderWeights, ModelConfig};
use streamseg::objectives::{dist_loss, dist_loss_node, evaluate, gram, seg_loss, xseg_loss, LossKind, LossWeights, ToyInstance};
use streamseg::pipeline::{run_sequence, RunConfig};
use streamseg::prototype::{concat_features, lift_all};
use streamseg::qim::{associate, ctx_feature_map, retrieve_ctx, sample_keys, QueryBank, QueryIndexMemory, RasterIndexMap, RasterTarget, SpatialKey, Z_MIN};
use streamseg::refiner::{inject_context, refine_frame};
use streamseg::synth::{fragment_masks, generate, NoiseSpec, ObjectSpec, SceneSpec, Shape, Trajectory};
use streamseg::tape::Tape;
use streamseg::train::{toy_train, TrainConfig};
use streamseg::{ConcatFeatureMap, InstanceMask, Intrinsics, PatchMaskSet, Pose, Query};

use crate::gen::{random_frame, random_pose};
use crate::naive::{self, Mat};

/// Relative tolerance of numeric comparisons.
pub const TOL: f64 = 1e-5;

pub type Check = Result<String, String>;

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn worst(a: &Mat, b: &Mat) -> Result<f64, String> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(format!("shape mismatch: {}x? vs {}x?", a.len(), b.len()));
    }
    Ok(a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| rel_diff(*x, *y)).fold(0.0, f64::max))
}

fn within(label: &str, err: f64) -> Check {
    if err <= TOL {
        Ok(format!("{label}: max rel diff {err:.2e}"))
    } else {
        Err(format!("{label}: max rel diff {err:.2e} exceeds {TOL:.0e}"))
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn queries_from(m: &Array2<f64>) -> Vec<Query> {
    m.outer_iter()
        .enumerate()
        .map(|(i, row)| Query { v: row.to_vec(), instance_local_id: i as u16 + 1, frame_t: 0 })
        .collect()
}

fn rows(qs: &[Query]) -> Mat {
    qs.iter().map(|q| q.v.clone()).collect()
}

/// Random masks over `n` patches: each of `k` instances owns at least one patch.
fn random_masks(r: &mut impl Rng, grid_h: usize, grid_w: usize, k: usize) -> PatchMaskSet {
    let n = grid_h * grid_w;
    let mut labels = vec![0u16; n];
    for (p, l) in labels.iter_mut().enumerate() {
        *l = if p < k { p as u16 + 1 } else { r.random_range(0..=k as u16) };
    }
    let instances = (1..=k as u16)
        .map(|l| {
            let patches: Vec<usize> = (0..n).filter(|&p| labels[p] == l).collect();
            InstanceMask { label: l, pixel_count: patches.len(), patches }
        })
        .collect();
    PatchMaskSet { grid_h, grid_w, patch_labels: labels, instances, dropped: vec![] }
}

fn allowed(masks: &PatchMaskSet) -> Vec<Vec<bool>> {
    masks
        .instances
        .iter()
        .map(|inst| (0..masks.n_patches()).map(|p| inst.patches.contains(&p)).collect())
        .collect()
}

fn plurality(cell: &[u16]) -> u16 {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &l in cell {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|(_, c)| *c == best).map_or(0, |(l, _)| l)
}

pub fn patch_majority_by_pixel_count() -> Check {
    let labels: Vec<u16> = (0..256).map(|i| if i < 120 { 1 } else { 2 }).collect();
    let got = majority_downsample(&labels, 16, 16, 16);
    ensure(got == vec![2], format!("120/136 split gave {got:?}"))?;
    let mut r = rng(1);
    let mut cells = 0;
    for _ in 0..200 {
        let cell = [1, 2, 3, 4, 8, 16][r.random_range(0..6)];
        let (gh, gw) = (r.random_range(1..5), r.random_range(1..5));
        let (h, w) = (gh * cell, gw * cell);
        let k: u16 = r.random_range(1..4);
        let labels: Vec<u16> = (0..h * w).map(|_| r.random_range(0..=k)).collect();
        let got = majority_downsample(&labels, h, w, cell);
        for gr in 0..gh {
            for gc in 0..gw {
                let mut px = Vec::new();
                for rr in gr * cell..(gr + 1) * cell {
                    for cc in gc * cell..(gc + 1) * cell {
                        px.push(labels[rr * w + cc]);
                    }
                }
                let want = plurality(&px);
                ensure(got[gr * gw + gc] == want, format!("cell ({gr},{gc}) labelled {} but counts say {want}", got[gr * gw + gc]))?;
                cells += 1;
            }
        }
    }
    Ok(format!("120/136 split → 2; {cells} random cells agree"))
}

pub fn concat_matches_direct_index() -> Check {
    let mut r = rng(2);
    for t in 0..100 {
        let f = random_frame(&mut r, t);
        let c = concat_features(&f);
        for p in 0..f.n_patches() {
            for ch in 0..f.d2 + f.d3 {
                let want = if ch < f.d2 { f.feat2d[p * f.d2 + ch] } else { f.feat3d[p * f.d3 + ch - f.d2] } as f64;
                ensure(c.data[[p, ch]] == want, format!("frame {t} patch {p} channel {ch}"))?;
            }
        }
    }
    Ok("100 random frames match channel by channel".into())
}

pub fn lift_matches_naive_pooling() -> Check {
    let mut r = rng(3);
    let mut err: f64 = 0.0;
    for trial in 0..20 {
        let (d2, d3, d) = (3, 2, 4);
        let data = random_mat(&mut r, 16, d2 + d3);
        let features = ConcatFeatureMap { grid_h: 4, grid_w: 4, d2, d3, data: data.clone() };
        let masks = random_masks(&mut r, 4, 4, 3);
        let eta = DecoderWeights::init(ModelConfig::toy(d2 + d3, d), trial).map_err(|e| e.to_string())?.eta;
        let got = lift_all(&features, &masks, &eta, 0).map_err(|e| e.to_string())?;
        for (inst, q) in masks.instances.iter().zip(&got) {
            let mut pooled = vec![0.0; d2 + d3];
            let mut count = 0.0;
            for p in 0..16 {
                if masks.patch_labels[p] == inst.label {
                    for c in 0..d2 + d3 {
                        pooled[c] += data[[p, c]];
                    }
                    count += 1.0;
                }
            }
            for v in &mut pooled {
                *v /= count;
            }
            let want = naive::affine(&vec![pooled], &eta);
            err = err.max(worst(&want, &vec![q.v.clone()])?);
        }
    }
    within("20 random 4x4 maps", err)
}

pub fn refine_matches_dense_attention() -> Check {
    let mut r = rng(4);
    let mut err: f64 = 0.0;
    for (trial, (config, n_ctx)) in [(ModelConfig::toy(6, 4), 0), (ModelConfig::standard(6, 4), 0), (ModelConfig::standard(6, 4), 3)]
        .into_iter()
        .enumerate()
    {
        let w = DecoderWeights::init(config, 40 + trial as u64).map_err(|e| e.to_string())?;
        let data = random_mat(&mut r, 4, 6);
        let features = ConcatFeatureMap { grid_h: 2, grid_w: 2, d2: 4, d3: 2, data: data.clone() };
        let masks = random_masks(&mut r, 2, 2, 2);
        let queries = queries_from(&random_mat(&mut r, 2, 4));
        let ctx = queries_from(&random_mat(&mut r, n_ctx, 4));
        let got = refine_frame(&queries, &features, &masks, &ctx, &w).map_err(|e| e.to_string())?;
        let want = naive::decode(&w, &rows(&queries), &naive::from_array(&data), &allowed(&masks), &rows(&ctx));
        err = err.max(worst(&want, &rows(&got))?);
    }
    within("2 queries over 4 patches, 1 and 3 layers, with and without context", err)
}

pub fn context_matches_naive_attention() -> Check {
    let mut r = rng(5);
    let w = DecoderWeights::init(ModelConfig::standard(6, 4), 5).map_err(|e| e.to_string())?;
    let queries = queries_from(&random_mat(&mut r, 3, 4));
    let ctx = queries_from(&random_mat(&mut r, 5, 4));
    let got = inject_context(&queries, &ctx, &w, 1).map_err(|e| e.to_string())?;
    let want = naive::context_sublayer(&w.layers[1], &rows(&queries), &rows(&ctx));
    let unchanged = inject_context(&queries, &[], &w, 1).map_err(|e| e.to_string())?;
    ensure(rows(&unchanged) == rows(&queries), "empty context changed the queries")?;
    within("3 queries, 5 context vectors", worst(&want, &rows(&got))?)
}

pub fn seg_loss_matches_elementwise_bce() -> Check {
    let mut r = rng(6);
    let w = DecoderWeights::init(ModelConfig::toy(5, 4), 6).map_err(|e| e.to_string())?;
    let data = random_mat(&mut r, 9, 5);
    let features = ConcatFeatureMap { grid_h: 3, grid_w: 3, d2: 3, d3: 2, data: data.clone() };
    let masks = random_masks(&mut r, 3, 3, 2);
    let refined = queries_from(&random_mat(&mut r, 2, 4));
    let got = seg_loss(&features, &refined, &masks, &w.psi).map_err(|e| e.to_string())?;
    let proj = naive::psi(&w.psi, &naive::from_array(&data));
    let mut total = 0.0;
    for (i, inst) in masks.instances.iter().enumerate() {
        for p in 0..9 {
            let z: f64 = refined[i].v.iter().zip(&proj[p]).map(|(a, b)| a * b).sum();
            total += naive::bce(z, if inst.patches.contains(&p) { 1.0 } else { 0.0 });
        }
    }
    within("2 queries over 3x3 patches", rel_diff(got, total / 18.0))
}

pub fn gram_matches_double_loop() -> Check {
    let mut r = rng(7);
    let x = random_mat(&mut r, 6, 4);
    let got = gram(&x).g;
    let m = naive::from_array(&x);
    let want: Mat = (0..6).map(|i| (0..6).map(|j| naive::cosine(&m[i], &m[j])).collect()).collect();
    within("random 6x4 features", worst(&want, &naive::from_array(&got))?)
}

pub fn dist_loss_hand_value() -> Check {
    let mut tape = Tape::new();
    let projected = tape.leaf(Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).expect("shape"));
    let eye = Array2::eye(2);
    let l = dist_loss_node(&mut tape, projected, &eye, &eye);
    let v = tape.scalar(l);
    ensure(rel_diff(v, 4.0) <= TOL, format!("expected 4, got {v}"))?;
    Ok(format!("G = ones, references = I, N = 2 → {v}"))
}

pub fn dist_loss_matches_elementwise() -> Check {
    let mut r = rng(8);
    let w = DecoderWeights::init(ModelConfig::toy(5, 4), 8).map_err(|e| e.to_string())?;
    let data = random_mat(&mut r, 6, 5);
    let features = ConcatFeatureMap { grid_h: 2, grid_w: 3, d2: 3, d3: 2, data: data.clone() };
    let got = dist_loss(&features, &w.psi);
    let m = naive::from_array(&data);
    let proj = naive::psi(&w.psi, &m);
    let mut want = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            let g = naive::cosine(&proj[i], &proj[j]);
            let g2 = naive::cosine(&m[i][..3], &m[j][..3]);
            let g3 = naive::cosine(&m[i][3..], &m[j][3..]);
            want += (g - g2).powi(2) + (g - g3).powi(2);
        }
    }
    within("random 6-patch case", rel_diff(got, want))
}

pub fn xseg_loss_matches_enumeration() -> Check {
    let mut r = rng(9);
    let masks = random_masks(&mut r, 4, 4, 3);
    let refined = queries_from(&random_mat(&mut r, 3, 4));
    let fctx = random_mat(&mut r, 16, 4);
    let support: Vec<bool> = (0..16).map(|p| p % 2 == 1).collect();
    let got = xseg_loss(&fctx, &refined, &masks, &support).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    let mut count = 0.0;
    for (i, inst) in masks.instances.iter().enumerate() {
        for p in (0..16).filter(|p| p % 2 == 1) {
            let z: f64 = refined[i].v.iter().zip(fctx.row(p)).map(|(a, b)| a * b).sum();
            total += naive::bce(z, if inst.patches.contains(&p) { 1.0 } else { 0.0 });
            count += 1.0;
        }
    }
    within("half-supported 4x4 grid", rel_diff(got, total / count))
}

/// Central differences over every ψ entry against the analytic gradient.
fn psi_gradient(kind: LossKind) -> Check {
    let inst = ToyInstance::random(11, 4, 4, 6, 4, 8, 3, 5);
    let w = DecoderWeights::init(ModelConfig::toy(10, 8), 11).map_err(|e| e.to_string())?;
    let (_, grads) = evaluate(&w, &inst, kind, true).map_err(|e| e.to_string())?;
    let grads = grads.ok_or("no gradient returned")?;
    let eps = 1e-4;
    let mut worst_err: f64 = 0.0;
    let mut n = 0;
    let blocks = |g: &DecoderWeights| vec![g.psi.l1.w.clone(), g.psi.l1.b.clone(), g.psi.l2.w.clone(), g.psi.l2.b.clone()];
    let analytic = blocks(&grads);
    for (b, block) in analytic.iter().enumerate() {
        for idx in 0..block.len() {
            let (i, j) = (idx / block.ncols(), idx % block.ncols());
            let shifted = |delta: f64| -> Result<f64, String> {
                let mut w2 = w.clone();
                let target = match b {
                    0 => &mut w2.psi.l1.w,
                    1 => &mut w2.psi.l1.b,
                    2 => &mut w2.psi.l2.w,
                    _ => &mut w2.psi.l2.b,
                };
                target[[i, j]] += delta;
                Ok(evaluate(&w2, &inst, kind, false).map_err(|e| e.to_string())?.0)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let a = block[[i, j]];
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst_err = worst_err.max(e);
            n += 1;
        }
    }
    if worst_err < 1e-3 {
        Ok(format!("{n} ψ entries, max rel error {worst_err:.2e}"))
    } else {
        Err(format!("{n} ψ entries, max rel error {worst_err:.2e} ≥ 1e-3"))
    }
}

pub fn seg_gradient_matches_finite_differences() -> Check {
    psi_gradient(LossKind::Seg)
}

pub fn dist_gradient_matches_finite_differences() -> Check {
    psi_gradient(LossKind::Dist)
}

fn two_object_scene(seed: u64) -> SceneSpec {
    let mut s = SceneSpec::acceptance(seed);
    s.objects.truncate(2);
    s.frames = 4;
    s
}

pub fn training_reduces_loss_on_two_instances() -> Check {
    let seq = generate(&two_object_scene(0)).map_err(|e| e.to_string())?;
    let report = toy_train(&[seq.frames], &TrainConfig::default(), None).map_err(|e| e.to_string())?;
    let totals: Vec<f64> = report.curve.iter().map(|e| e.total).collect();
    let n = totals.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = totals.iter().sum::<f64>() / n;
    let slope = totals.iter().enumerate().map(|(i, y)| (i as f64 - mean_x) * (y - mean_y)).sum::<f64>()
        / totals.iter().enumerate().map(|(i, _)| (i as f64 - mean_x).powi(2)).sum::<f64>();
    let half = totals.len() / 2;
    let first = totals[..half].iter().sum::<f64>() / half as f64;
    let second = totals[half..].iter().sum::<f64>() / (totals.len() - half) as f64;
    let ratio = totals[totals.len() - 1] / totals[0];
    let msg = format!("{} epochs, slope {slope:.3}, halves {first:.3} → {second:.3}, final/initial {ratio:.3}", totals.len());
    ensure(totals.len() == 50 && slope < 0.0 && second < first && ratio < 0.8, msg.clone())?;
    Ok(msg)
}

pub fn segmentation_loss_drops_below_ln2() -> Check {
    let mut spec = two_object_scene(1);
    spec.noise = NoiseSpec { feature_sigma: 0.0, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.0, view_strength: 0.0 };
    spec.signature_correlation = 0.0;
    let seq = generate(&spec).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { losses: LossWeights { dist: 0.0, ..LossWeights::default() }, ..TrainConfig::default() };
    let report = toy_train(&[seq.frames], &cfg, None).map_err(|e| e.to_string())?;
    let last = report.curve.last().ok_or("empty curve")?;
    let msg = format!("final l_seg {:.4} vs ln 2 = {:.4}", last.seg, std::f64::consts::LN_2);
    ensure(last.seg < std::f64::consts::LN_2, msg.clone())?;
    Ok(msg)
}

pub fn keys_match_window_means() -> Check {
    let mut r = rng(12);
    let mut total = 0;
    for t in 0..100 {
        let f = random_frame(&mut r, t);
        let pool = f.patch_size;
        let keys = sample_keys(&f, pool).map_err(|e| e.to_string())?;
        let mut want = Vec::new();
        for gr in 0..f.height / pool {
            for gc in 0..f.width / pool {
                let mut acc = [0.0f64; 3];
                let mut finite = true;
                for rr in gr * pool..(gr + 1) * pool {
                    for cc in gc * pool..(gc + 1) * pool {
                        for a in 0..3 {
                            let v = f.points[(rr * f.width + cc) * 3 + a] as f64;
                            finite &= v.is_finite();
                            acc[a] += v;
                        }
                    }
                }
                if finite {
                    want.push((gr * (f.width / pool) + gc, acc.map(|v| v / (pool * pool) as f64)));
                }
            }
        }
        ensure(keys.len() == want.len(), format!("frame {t}: {} keys, expected {}", keys.len(), want.len()))?;
        for (k, (cell, p)) in keys.iter().zip(&want) {
            ensure(k.cell == *cell, format!("frame {t}: key cell {} vs {cell}", k.cell))?;
            for a in 0..3 {
                ensure(rel_diff(k.p[a], p[a]) <= TOL, format!("frame {t}: key position differs"))?;
            }
        }
        total += keys.len();
    }
    Ok(format!("{total} keys over 100 random pointmaps"))
}

pub fn association_matches_cell_lookup() -> Check {
    let mut r = rng(13);
    for _ in 0..50 {
        let n_cells = r.random_range(1..30);
        let labels: Vec<u16> = (0..n_cells).map(|_| r.random_range(0..5)).collect();
        let keys: Vec<SpatialKey> = (0..r.random_range(0..40))
            .map(|id| SpatialKey { id, p: [0.0; 3], frame_t: 0, cell: r.random_range(0..n_cells) })
            .collect();
        let table: BTreeMap<u16, usize> = (1..5u16).filter(|_| r.random_bool(0.8)).map(|l| (l, 100 + l as usize)).collect();
        let got = associate(&keys, &labels, |l| table.get(&l).copied());
        for (k, row) in keys.iter().zip(&got) {
            let l = labels[k.cell];
            let want: Vec<usize> = if l == 0 { vec![] } else { table.get(&l).into_iter().copied().collect() };
            ensure(*row == want, format!("key {} in cell {} got {row:?}, expected {want:?}", k.id, k.cell))?;
        }
    }
    Ok("50 random labelled grids".into())
}

/// Independent pinhole projection: world → camera via the transposed
/// rotation, then to a patch cell, or `None` when culled.
fn naive_cell(pose: &Pose, k: &Intrinsics, h: usize, w: usize, patch: usize, p: [f64; 3]) -> Option<usize> {
    let m = pose.to_matrix();
    let d = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
    let mut pc = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            pc[i] += m[j][i] * d[j];
        }
    }
    if pc[2] <= Z_MIN {
        return None;
    }
    let u = k.fx * pc[0] / pc[2] + k.cx;
    let v = k.fy * pc[1] / pc[2] + k.cy;
    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
        return None;
    }
    Some((v as usize / patch) * (w / patch) + u as usize / patch)
}

pub fn rasterize_matches_per_key_projection() -> Check {
    let mut r = rng(14);
    let mut visible = 0;
    for trial in 0..20 {
        let pose = random_pose(&mut r);
        let (h, w, patch) = (48, 64, 16);
        let k = Intrinsics { fx: 50.0, fy: 55.0, cx: 31.0, cy: 25.0 };
        let target = RasterTarget { pose: &pose, intrinsics: &k, height: h, width: w, patch_size: patch, occlusion: None };
        for _ in 0..20 {
            // camera-space samples, some behind the camera and some outside the image
            let z: f64 = r.random_range(-1.0..6.0);
            let pc = [r.random_range(-1.0..1.0) * z.abs() * 0.8, r.random_range(-1.0..1.0) * z.abs() * 0.6, z];
            let pw = pose.camera_to_world(pc);
            let want = naive_cell(&pose, &k, h, w, patch, pw);
            let got = target.cell_of(pw);
            ensure(got == want, format!("trial {trial}: key at {pc:?} went to {got:?}, expected {want:?}"))?;
            visible += want.is_some() as usize;
        }
        // whole-memory rasterization against the union of per-key projections
        let frame = random_frame(&mut r, 0);
        let masks = patchify_masks(&frame);
        let refined = queries_from(&random_mat(&mut r, masks.len(), 3));
        let mut memory = QueryIndexMemory::new(None);
        memory.update(&frame, &masks, &refined, frame.patch_size).map_err(|e| e.to_string())?;
        let raster = memory.rasterize(&target).map_err(|e| e.to_string())?;
        let mut want = vec![BTreeSet::new(); (h / patch) * (w / patch)];
        for key in &memory.keys {
            if let Some(c) = naive_cell(&pose, &k, h, w, patch, key.p) {
                want[c].extend(memory.index.row(key.id).iter().copied());
            }
        }
        let want: Vec<Vec<usize>> = want.into_iter().map(|s| s.into_iter().collect()).collect();
        ensure(raster.cells == want, format!("trial {trial}: raster map differs"))?;
    }
    Ok(format!("400 random keys ({visible} visible) and 20 memories"))
}

fn random_raster(r: &mut impl Rng, n_bank: usize) -> RasterIndexMap {
    let (gh, gw) = (r.random_range(1..5), r.random_range(1..5));
    let mut map = RasterIndexMap::empty(gh, gw);
    for cell in &mut map.cells {
        let ids: BTreeSet<usize> = (0..r.random_range(0..4)).map(|_| r.random_range(0..n_bank)).collect();
        *cell = ids.into_iter().collect();
    }
    map
}

fn random_bank(r: &mut impl Rng, n: usize, d: usize) -> QueryBank {
    let mut bank = QueryBank::default();
    for q in queries_from(&random_mat(r, n, d)) {
        bank.push(q);
    }
    bank
}

pub fn retrieval_matches_union() -> Check {
    let mut r = rng(15);
    for _ in 0..100 {
        let bank = random_bank(&mut r, 12, 3);
        let map = random_raster(&mut r, 12);
        let got: Vec<usize> = retrieve_ctx(&map, &bank).map_err(|e| e.to_string())?.into_iter().map(|(id, _)| id).collect();
        let want: Vec<usize> = (0..12).filter(|id| map.cells.iter().any(|c| c.contains(id))).collect();
        ensure(got == want, format!("retrieved {got:?}, expected {want:?}"))?;
    }
    Ok("100 random maps".into())
}

pub fn context_map_matches_cell_mean() -> Check {
    let mut r = rng(16);
    let mut err: f64 = 0.0;
    for _ in 0..100 {
        let bank = random_bank(&mut r, 8, 3);
        let map = random_raster(&mut r, 8);
        let (f, support) = ctx_feature_map(&map, &bank, 3).map_err(|e| e.to_string())?;
        for (p, cell) in map.cells.iter().enumerate() {
            ensure(support[p] == !cell.is_empty(), "support flag disagrees with cell")?;
            let mut want = vec![0.0; 3];
            for &id in cell {
                for c in 0..3 {
                    want[c] += bank.get(id).expect("in bank").v[c] / cell.len() as f64;
                }
            }
            err = err.max(worst(&vec![want], &vec![f.row(p).to_vec()])?);
        }
    }
    within("100 random maps", err)
}

pub fn state_token_matches_masked_sum() -> Check {
    let mut r = rng(17);
    let mut err: f64 = 0.0;
    for _ in 0..50 {
        let (n_state, n) = (r.random_range(1..8), r.random_range(1..20));
        let a: Vec<f32> = (0..n_state * n).map(|_| r.random_range(0.0..1.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let patches: Vec<usize> = (0..n).filter(|&p| mask[p]).collect();
        let got = state_token(&a, n_state, n, &patches).map_err(|e| e.to_string())?;
        let want: Vec<f64> = (0..n_state)
            .map(|k| (0..n).map(|p| a[k * n + p] as f64 * if mask[p] { 1.0 } else { 0.0 }).sum())
            .collect();
        err = err.max(worst(&vec![want], &vec![got.0])?);
    }
    within("50 random attention maps", err)
}

pub fn merging_is_transitive() -> Check {
    // vectors with cos(a,b) = cos(b,c) = 0.9 and cos(a,c) well below the threshold
    let theta = 0.9f64.acos();
    let a = vec![1.0, 0.0];
    let b = vec![theta.cos(), theta.sin()];
    let c = vec![(2.0 * theta).cos(), (2.0 * theta).sin()];
    let groups = merge_components(&[&a, &b, &c], 0.8);
    ensure(groups == vec![vec![0, 1, 2]], format!("chain gave {groups:?}"))?;
    let mut r = rng(18);
    for _ in 0..100 {
        let n = r.random_range(1..9);
        let qs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
        let got = merge_components(&refs, 0.5);
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = i == j || naive::cosine(&qs[i], &qs[j]) > 0.5;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] |= reach[i][k] && reach[k][j];
                }
            }
        }
        let want: BTreeSet<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| reach[i][j]).collect()).collect();
        let got_set: BTreeSet<Vec<usize>> = got.into_iter().collect();
        ensure(got_set == want, "components differ from the transitive closure")?;
    }
    Ok("a~b, b~c chain merged; 100 random graphs match the transitive closure".into())
}

fn random_observation(r: &mut impl Rng, label: u16) -> MergedObservation {
    let centre = [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
    let keys = (0..r.random_range(1..6))
        .map(|i| (i, [0, 1, 2].map(|a| centre[a] + r.random_range(-0.5..0.5))))
        .collect();
    MergedObservation {
        labels: vec![label],
        query: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
        sdt: StateToken((0..5).map(|_| r.random_range(0.0..1.0)).collect()),
        query_ids: vec![],
        keys,
    }
}

pub fn scores_match_per_term_oracle() -> Check {
    let mut r = rng(19);
    let mut err: f64 = 0.0;
    let mut pruned = 0;
    for trial in 0..20 {
        let cfg = FusionConfig { use_sdt: trial % 2 == 0, ..FusionConfig::default() };
        let mut scene = SceneState::new();
        let old: Vec<MergedObservation> = (0..3).map(|l| random_observation(&mut r, l)).collect();
        for o in &old {
            scene.register(o, 0, &cfg);
        }
        let new: Vec<MergedObservation> = (0..3).map(|l| random_observation(&mut r, l)).collect();
        let got = score_matrix(&scene.instances, &new, &cfg);
        for i in 0..3 {
            for j in 0..3 {
                let pts = |o: &MergedObservation| o.keys.iter().map(|k| k.1).collect::<Vec<_>>();
                let half = cfg.voxel / 2.0;
                let mut s = naive::cosine(&old[i].query, &new[j].query)
                    + naive::box_iou(naive::bounds(&pts(&old[i]), half), naive::bounds(&pts(&new[j]), half));
                if cfg.use_sdt {
                    s += naive::cosine(&old[i].sdt.0, &new[j].sdt.0);
                }
                let threshold = if cfg.use_sdt { cfg.prune_threshold } else { cfg.prune_threshold * 2.0 / 3.0 };
                if s < threshold {
                    ensure(got[[i, j]] == f64::NEG_INFINITY, format!("({i},{j}) scored {} below the threshold", got[[i, j]]))?;
                    pruned += 1;
                } else {
                    err = err.max(rel_diff(got[[i, j]], s));
                }
            }
        }
    }
    within(&format!("20 random 3x3 cases ({pruned} pruned)"), err)
}

fn best_partial(e: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
    if row == e.nrows() {
        return 0.0;
    }
    let mut best = best_partial(e, row + 1, used);
    for c in 0..e.ncols() {
        if !used[c] && e[[row, c]].is_finite() {
            used[c] = true;
            best = best.max(e[[row, c]] + best_partial(e, row + 1, used));
            used[c] = false;
        }
    }
    best
}

pub fn assignment_matches_exhaustive_search() -> Check {
    let mut r = rng(20);
    for trial in 0..500 {
        let (n, m) = (r.random_range(0..5), r.random_range(0..5));
        let e = Array2::from_shape_fn((n, m), |_| {
            if r.random_bool(0.3) { f64::NEG_INFINITY } else { r.random_range(-1.0..3.0) }
        });
        let pairs = max_weight_assignment(&e);
        let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        ensure(rows.len() == pairs.len() && cols.len() == pairs.len(), format!("trial {trial}: not one-to-one"))?;
        ensure(pairs.iter().all(|&(i, j)| e[[i, j]].is_finite()), format!("trial {trial}: matched a pruned pair"))?;
        let got: f64 = pairs.iter().map(|&(i, j)| e[[i, j]]).sum();
        let want = best_partial(&e, 0, &mut vec![false; m]);
        ensure((got - want).abs() <= 1e-9, format!("trial {trial}: total {got} vs optimum {want}"))?;
    }
    Ok("500 random matrices up to 4x4".into())
}

pub fn running_mean_matches_batch_mean() -> Check {
    let mut r = rng(21);
    let cfg = FusionConfig::default();
    let obs: Vec<MergedObservation> = (0..4).map(|l| random_observation(&mut r, l)).collect();
    let mut scene = SceneState::new();
    scene.register(&obs[0], 0, &cfg);
    for (t, o) in obs.iter().enumerate().skip(1) {
        scene.apply_update(0, o, t as u32, &cfg);
    }
    let rec = &scene.instances[0];
    let mean = |f: &dyn Fn(&MergedObservation) -> Vec<f64>| -> Vec<f64> {
        let vs: Vec<Vec<f64>> = obs.iter().map(f).collect();
        (0..vs[0].len()).map(|c| vs.iter().map(|v| v[c]).sum::<f64>() / 4.0).collect()
    };
    let err = worst(&vec![mean(&|o| o.query.clone())], &vec![rec.query.clone()])?
        .max(worst(&vec![mean(&|o| o.sdt.0.clone())], &vec![rec.sdt.0.clone()])?);
    ensure(rec.n_obs == 4, format!("n_obs {}", rec.n_obs))?;
    within("query and state token after 3 merges", err)
}

pub fn wall_depth_matches_plane_distance() -> Check {
    let mut spec = SceneSpec::acceptance(0);
    // a single small box behind the camera keeps the view of the wall clear
    spec.objects = vec![ObjectSpec {
        shape: Shape::Box,
        center: [4.0, 6.0, 0.5],
        size: [0.5, 0.5, 0.5],
        signature2d: None,
        signature3d: None,
    }];
    spec.frames = 1;
    let eye = [4.0, 2.0, 1.5];
    let pose = Pose::look_at(eye, [4.0, 0.0, 1.5], [0.0, 0.0, 1.0]).map_err(|e| e.to_string())?;
    spec.trajectory = Trajectory::Poses { poses: vec![pose.to_matrix()] };
    spec.noise = NoiseSpec { feature_sigma: 0.0, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.0, view_strength: 0.0 };
    let seq = generate(&spec).map_err(|e| e.to_string())?;
    let f = &seq.frames[0];
    let (row, col) = (f.height / 2, f.width / 2);
    let p = f.point(row, col);
    let z = pose.world_to_camera(p)[2];
    // the wall y = 0 is 2 units ahead along the optical axis
    let distance_to_plane = p[1] - 0.0;
    ensure((z - 2.0).abs() <= 1e-5, format!("centre depth {z}"))?;
    ensure(distance_to_plane.abs() <= 1e-5, format!("centre point {p:?} is off the wall"))?;
    Ok(format!("centre pixel depth {z:.7}"))
}

pub fn fragments_reunite_to_original() -> Check {
    let mut r = rng(22);
    for trial in 0..100 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let n: u16 = r.random_range(0..5);
        let labels = streamseg::synth::compact_labels(&(0..h * w).map(|_| r.random_range(0..=n)).collect::<Vec<_>>());
        let k = r.random_range(1..5);
        let frag = fragment_masks(&labels, h, w, k);
        let mut parent: BTreeMap<u16, u16> = BTreeMap::new();
        for (&f, &l) in frag.iter().zip(&labels) {
            ensure((f == 0) == (l == 0), format!("trial {trial}: background changed"))?;
            if f > 0 {
                let prev = *parent.entry(f).or_insert(l);
                ensure(prev == l, format!("trial {trial}: fragment {f} spans instances {prev} and {l}"))?;
            }
        }
        let rebuilt: Vec<u16> = frag.iter().map(|f| if *f == 0 { 0 } else { parent[f] }).collect();
        ensure(rebuilt == labels, format!("trial {trial}: union of fragments differs"))?;
        let per_instance = parent.values().fold(BTreeMap::<u16, usize>::new(), |mut m, l| {
            *m.entry(*l).or_default() += 1;
            m
        });
        ensure(per_instance.values().all(|&c| c <= k), format!("trial {trial}: more than {k} parts"))?;
    }
    Ok("100 random label maps, k = 1..4".into())
}

pub fn zero_noise_scene_reproduces_ground_truth() -> Check {
    let mut spec = SceneSpec::acceptance(0);
    spec.objects.truncate(3);
    spec.noise = NoiseSpec { feature_sigma: 0.0, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.0, view_strength: 0.0 };
    spec.signature_correlation = 0.0;
    spec.oversegment = 1;
    let seq = generate(&spec).map_err(|e| e.to_string())?;
    let gt = seq.ground_truth(0.05);
    let out = run_sequence(seq.frames.iter().cloned().map(Ok), &RunConfig::default(), None).map_err(|e| e.to_string())?;
    let normalise = |sets: Vec<Vec<usize>>| -> BTreeSet<Vec<usize>> {
        sets.into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s
            })
            .collect()
    };
    let got = normalise(out.predictions.iter().map(|p| p.points.clone()).collect());
    let want = normalise(gt.instances().into_values().collect());
    ensure(got == want, format!("{} predicted sets vs {} ground-truth sets", got.len(), want.len()))?;
    Ok(format!("{} instances, point sets identical", want.len()))
}

pub fn ap_matches_hand_enumeration() -> Check {
    // GT a = points 0..10, GT b = points 10..20. Predictions with IoU 0.6 (a),
    // 0.3 (a) and 0.9 (b), confidences 3, 2, 1.
    let mut labels = vec![1usize; 10];
    labels.extend(vec![2usize; 10]);
    let cloud = VoxelCloud { voxel: 1.0, keys: (0..20).map(|i| [i, 0, 0]).collect(), labels };
    let gt: GroundTruth = cloud.into_ground_truth();
    let preds = vec![
        InstancePrediction { instance_id: 0, points: (0..6).collect(), confidence: 3.0 },
        InstancePrediction { instance_id: 1, points: (0..3).collect(), confidence: 2.0 },
        InstancePrediction { instance_id: 2, points: (10..19).collect(), confidence: 1.0 },
    ];
    let report = average_precision(&preds, &gt).map_err(|e| e.to_string())?;
    // Thresholds ≤ 0.6: TP, FP (its GT is taken), TP → PR points (½,1), (½,½), (1,⅔) → AP = ½·1 + ½·⅔ = 5/6.
    // Thresholds 0.65..0.9: FP, FP, TP → (0,0), (0,0), (½,⅓) → AP = ½·⅓ = 1/6.
    // Threshold 0.95: no TP → 0.
    let hand: Vec<f64> = (0..10).map(|i| if i < 3 { 5.0 / 6.0 } else if i < 9 { 1.0 / 6.0 } else { 0.0 }).collect();
    let want_ap = hand.iter().sum::<f64>() / 10.0;
    for ((t, v), h) in report.per_threshold.iter().zip(&hand) {
        ensure(rel_diff(*v, *h) <= TOL, format!("threshold {t}: {v} vs {h}"))?;
    }
    ensure(rel_diff(report.ap50, 5.0 / 6.0) <= TOL && rel_diff(report.ap25, 5.0 / 6.0) <= TOL, "AP50/AP25 differ")?;
    within("AP over 10 thresholds", rel_diff(report.ap, want_ap))
}

pub fn qim_on_at_least_qim_off() -> Check {
    let seq = generate(&SceneSpec::acceptance(0)).map_err(|e| e.to_string())?;
    let gt = seq.ground_truth(0.05);
    let weights = toy_train(&[seq.frames.clone()], &TrainConfig::default(), None).map_err(|e| e.to_string())?.weights;
    let ap = |qim: bool| -> Result<f64, String> {
        let cfg = RunConfig { qim, ..RunConfig::default() };
        let out = run_sequence(seq.frames.iter().cloned().map(Ok), &cfg, Some(weights.clone())).map_err(|e| e.to_string())?;
        Ok(average_precision(&out.predictions, &gt).map_err(|e| e.to_string())?.ap)
    };
    let (on, off) = (ap(true)?, ap(false)?);
    let msg = format!("AP with QIM {on:.3}, without {off:.3}");
    ensure(on >= off, msg.clone())?;
    Ok(msg)
}

/// Every worked example, by name.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("patch label by pixel count", patch_majority_by_pixel_count),
        ("feature concatenation by index", concat_matches_direct_index),
        ("prototype pooling and projection", lift_matches_naive_pooling),
        ("decoder vs dense masked attention", refine_matches_dense_attention),
        ("context injection vs naive attention", context_matches_naive_attention),
        ("segmentation loss vs elementwise BCE", seg_loss_matches_elementwise_bce),
        ("Gram matrix vs double loop", gram_matches_double_loop),
        ("distillation loss hand value", dist_loss_hand_value),
        ("distillation loss vs elementwise sum", dist_loss_matches_elementwise),
        ("cross-frame loss vs supported patches", xseg_loss_matches_enumeration),
        ("segmentation gradient vs finite differences", seg_gradient_matches_finite_differences),
        ("distillation gradient vs finite differences", dist_gradient_matches_finite_differences),
        ("training on two instances", training_reduces_loss_on_two_instances),
        ("segmentation loss below ln 2", segmentation_loss_drops_below_ln2),
        ("key sampling vs window mean", keys_match_window_means),
        ("key association vs cell lookup", association_matches_cell_lookup),
        ("rasterization vs per-key projection", rasterize_matches_per_key_projection),
        ("context retrieval vs set union", retrieval_matches_union),
        ("context map vs per-cell mean", context_map_matches_cell_mean),
        ("state token vs masked sum", state_token_matches_masked_sum),
        ("intra-frame merge transitivity", merging_is_transitive),
        ("pair scores vs per-term oracle", scores_match_per_term_oracle),
        ("assignment vs exhaustive search", assignment_matches_exhaustive_search),
        ("running mean vs batch mean", running_mean_matches_batch_mean),
        ("wall depth vs plane distance", wall_depth_matches_plane_distance),
        ("fragment union", fragments_reunite_to_original),
        ("zero-noise scene end to end", zero_noise_scene_reproduces_ground_truth),
        ("AP vs hand-enumerated PR curve", ap_matches_hand_enumeration),
        ("QIM on vs off on the acceptance scene", qim_on_at_least_qim_off),
    ]
}

