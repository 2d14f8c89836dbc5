//! Self-supervised objectives: per-frame mask reconstruction, Gram-matrix
//! distillation and cross-frame mask reconstruction against memory context,
//! plus a central-difference gradient checker.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{InstanceMask, PatchMaskSet};
use crate::model::{DecoderWeights, Psi};
use crate::prototype::{linear, ConcatFeatureMap, Query};
use crate::refiner::{build_query_graph, stack_queries};
use crate::tape::{normalize_rows, Tape, Var};

/// Scalar weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub xseg: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, xseg: 0.5, dist: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub dist: f64,
    pub xseg: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(seg: f64, dist: f64, xseg: f64, weights: LossWeights) -> Self {
        let total = weights.seg * seg + weights.dist * dist + weights.xseg * xseg;
        LossReport { seg, dist, xseg, total, weights }
    }
}

/// Cosine Gram matrix over rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub g: Array2<f64>,
    /// Rows with zero norm; their rows and columns are zero, diagonal included.
    pub zero_rows: Vec<usize>,
}

pub fn gram(features: &Array2<f64>) -> GramMatrix {
    let (unit, norms) = normalize_rows(features);
    let g = unit.dot(&unit.t());
    let zero_rows = norms.iter().enumerate().filter(|(_, n)| **n == 0.0).map(|(i, _)| i).collect();
    GramMatrix { g, zero_rows }
}

/// ψ applied to every patch row: `l2(gelu(l1(F)))`.
pub fn psi_forward(tape: &mut Tape, psi: &Psi<Var>, features: Var) -> Var {
    let h = linear(tape, &psi.l1, features);
    let h = tape.gelu(h);
    linear(tape, &psi.l2, h)
}

pub fn project_features(features: &ConcatFeatureMap, psi: &Psi<Array2<f64>>) -> Array2<f64> {
    let mut tape = Tape::new();
    let p = Psi {
        l1: crate::model::Linear { w: tape.leaf(psi.l1.w.clone()), b: tape.leaf(psi.l1.b.clone()) },
        l2: crate::model::Linear { w: tape.leaf(psi.l2.w.clone()), b: tape.leaf(psi.l2.b.clone()) },
    };
    let f = tape.leaf(features.data.clone());
    let out = psi_forward(&mut tape, &p, f);
    tape.value(out).clone()
}

/// Binary patch targets, one row per instance.
pub fn mask_targets(masks: &PatchMaskSet) -> Array2<f64> {
    let mut t = Array2::zeros((masks.len(), masks.n_patches()));
    for (i, inst) in masks.instances.iter().enumerate() {
        for &p in &inst.patches {
            t[[i, p]] = 1.0;
        }
    }
    t
}

/// Mean BCE of `sigmoid(projected · q)` against each query's own mask.
pub fn seg_loss_node(tape: &mut Tape, projected: Var, refined: Var, targets: Array2<f64>) -> Var {
    let logits = tape.matmul_t(refined, projected);
    tape.bce_mean(logits, targets, None)
}

/// Cosine Gram matrix on the tape.
pub fn gram_node(tape: &mut Tape, x: Var) -> Var {
    let unit = tape.normalize_rows(x);
    tape.matmul_t(unit, unit)
}

/// `‖G - G2d‖²_F + ‖G - G3d‖²_F` with `G` from the projected features.
pub fn dist_loss_node(tape: &mut Tape, projected: Var, g2d: &Array2<f64>, g3d: &Array2<f64>) -> Var {
    let g = gram_node(tape, projected);
    let r2 = tape.leaf(g2d.clone());
    let r3 = tape.leaf(g3d.clone());
    let d2 = tape.sub(g, r2);
    let d3 = tape.sub(g, r3);
    let l2 = tape.sum_squares(d2);
    let l3 = tape.sum_squares(d3);
    tape.add(l2, l3)
}

/// Mean BCE of `sigmoid(F_ctx · q)` restricted to patches in `support`.
pub fn xseg_loss_node(tape: &mut Tape, ctx_features: Var, refined: Var, targets: Array2<f64>, support: &[bool]) -> Var {
    let logits = tape.matmul_t(refined, ctx_features);
    tape.bce_mean(logits, targets, Some(support.to_vec()))
}

pub fn seg_loss(
    features: &ConcatFeatureMap,
    refined: &[Query],
    masks: &PatchMaskSet,
    psi: &Psi<Array2<f64>>,
) -> Result<f64> {
    if refined.is_empty() {
        return Err(Error::Precondition("segmentation loss needs at least one query".into()));
    }
    let projected = project_features(features, psi);
    let d = projected.ncols();
    let mut tape = Tape::new();
    let p = tape.leaf(projected);
    let q = tape.leaf(stack_queries(refined, d)?);
    let l = seg_loss_node(&mut tape, p, q, mask_targets(masks));
    Ok(tape.scalar(l))
}

pub fn dist_loss(features: &ConcatFeatureMap, psi: &Psi<Array2<f64>>) -> f64 {
    let projected = project_features(features, psi);
    let mut tape = Tape::new();
    let p = tape.leaf(projected);
    let l = dist_loss_node(&mut tape, p, &gram(&features.semantic()).g, &gram(&features.geometric()).g);
    tape.scalar(l)
}

pub fn xseg_loss(
    ctx_features: &Array2<f64>,
    refined: &[Query],
    masks: &PatchMaskSet,
    support: &[bool],
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf(ctx_features.clone());
    let q = tape.leaf(stack_queries(refined, ctx_features.ncols())?);
    let l = xseg_loss_node(&mut tape, f, q, mask_targets(masks), support);
    Ok(tape.scalar(l))
}

/// Everything a frame contributes to the training graph that does not
/// depend on the parameters.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    pub features: ConcatFeatureMap,
    pub masks: PatchMaskSet,
    pub g2d: Array2<f64>,
    pub g3d: Array2<f64>,
}

impl FrameTargets {
    pub fn new(features: ConcatFeatureMap, masks: PatchMaskSet) -> Self {
        let g2d = gram(&features.semantic()).g;
        let g3d = gram(&features.geometric()).g;
        FrameTargets { features, masks, g2d, g3d }
    }
}

/// Memory-derived inputs for one frame: retrieved context queries and the
/// contextual feature map with its support.
#[derive(Clone, Debug, Default)]
pub struct ContextInputs {
    pub ctx: Option<Array2<f64>>,
    pub features: Option<(Array2<f64>, Vec<bool>)>,
}

pub struct FrameLossGraph {
    pub refined: Var,
    pub seg: Var,
    pub dist: Var,
    pub xseg: Var,
    pub total: Var,
}

/// Builds the full per-frame objective on `tape`.
pub fn build_frame_losses(
    tape: &mut Tape,
    weights: &DecoderWeights<Var>,
    frame: &FrameTargets,
    context: &ContextInputs,
    lambdas: LossWeights,
) -> Result<FrameLossGraph> {
    let graph = build_query_graph(tape, weights, &frame.features, &frame.masks, context.ctx.as_ref())?;
    let projected = psi_forward(tape, &weights.psi, graph.features);
    let targets = mask_targets(&frame.masks);
    let seg = seg_loss_node(tape, projected, graph.refined, targets.clone());
    let dist = dist_loss_node(tape, projected, &frame.g2d, &frame.g3d);
    let xseg = match &context.features {
        Some((f, support)) => {
            let f = tape.leaf(f.clone());
            xseg_loss_node(tape, f, graph.refined, targets, support)
        }
        None => tape.leaf(Array2::zeros((1, 1))),
    };
    let a = tape.scale(seg, lambdas.seg);
    let b = tape.scale(dist, lambdas.dist);
    let c = tape.scale(xseg, lambdas.xseg);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    Ok(FrameLossGraph { refined: graph.refined, seg, dist, xseg, total })
}

pub fn report(tape: &Tape, g: &FrameLossGraph, lambdas: LossWeights) -> LossReport {
    LossReport {
        seg: tape.scalar(g.seg),
        dist: tape.scalar(g.dist),
        xseg: tape.scalar(g.xseg),
        total: tape.scalar(g.total),
        weights: lambdas,
    }
}

/// Which loss term a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Seg,
    Dist,
    Xseg,
    Total,
}

impl LossKind {
    pub fn pick(self, g: &FrameLossGraph) -> Var {
        match self {
            LossKind::Seg => g.seg,
            LossKind::Dist => g.dist,
            LossKind::Xseg => g.xseg,
            LossKind::Total => g.total,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(LossKind::Seg),
            "dist" => Ok(LossKind::Dist),
            "xseg" => Ok(LossKind::Xseg),
            "total" => Ok(LossKind::Total),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// A subset of the parameters, selected by name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Psi,
    Eta,
    Layer(usize),
}

impl ParamGroup {
    pub fn prefix(&self) -> String {
        match self {
            ParamGroup::Psi => "psi.".into(),
            ParamGroup::Eta => "eta.".into(),
            ParamGroup::Layer(i) => format!("layers.{i}."),
        }
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psi" => Ok(ParamGroup::Psi),
            "eta" => Ok(ParamGroup::Eta),
            _ => s
                .strip_prefix("layer")
                .and_then(|i| i.parse().ok())
                .map(ParamGroup::Layer)
                .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`"))),
        }
    }
}

/// A small random problem for gradient checking.
#[derive(Clone, Debug)]
pub struct ToyInstance {
    pub frame: FrameTargets,
    pub context: ContextInputs,
}

impl ToyInstance {
    /// Random features on a `grid_h`×`grid_w` patch grid, `n_instances`
    /// disjoint masks, `n_ctx` context queries and a half-covered context map.
    pub fn random(seed: u64, grid_h: usize, grid_w: usize, d2: usize, d3: usize, d: usize, n_instances: usize, n_ctx: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid_h * grid_w;
        let data = Array2::from_shape_fn((n, d2 + d3), |_| rng.random_range(-1.0..1.0));
        let features = ConcatFeatureMap { grid_h, grid_w, d2, d3, data };
        let mut patch_labels = vec![0u16; n];
        for (p, l) in patch_labels.iter_mut().enumerate() {
            // every instance keeps at least one patch
            *l = if p < n_instances { p as u16 + 1 } else { rng.random_range(0..=n_instances as u16) };
        }
        let instances = (1..=n_instances as u16)
            .map(|label| {
                let patches: Vec<usize> = (0..n).filter(|&p| patch_labels[p] == label).collect();
                InstanceMask { label, pixel_count: patches.len(), patches }
            })
            .collect();
        let masks = PatchMaskSet { grid_h, grid_w, patch_labels, instances, dropped: vec![] };
        let ctx = Array2::from_shape_fn((n_ctx, d), |_| rng.random_range(-1.0..1.0));
        let support: Vec<bool> = (0..n).map(|p| p % 2 == 0).collect();
        let fctx = Array2::from_shape_fn((n, d), |(p, _)| if support[p] { rng.random_range(-1.0..1.0) } else { 0.0 });
        ToyInstance {
            frame: FrameTargets::new(features, masks),
            context: ContextInputs { ctx: Some(ctx), features: Some((fctx, support)) },
        }
    }
}

/// Loss value and, when requested, its gradient with respect to every parameter.
pub fn evaluate(
    weights: &DecoderWeights,
    instance: &ToyInstance,
    kind: LossKind,
    with_grad: bool,
) -> Result<(f64, Option<DecoderWeights>)> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let g = build_frame_losses(&mut tape, &bound, &instance.frame, &instance.context, LossWeights::default())?;
    let root = kind.pick(&g);
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{kind:?} loss")));
    }
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(root);
    let mut out = weights.zeros_like();
    let mut leaves = Vec::new();
    bound.for_each(&mut |_, v| leaves.push(*v));
    let mut i = 0;
    out.for_each_mut(&mut |_, a| {
        if let Some(g) = grads.get(leaves[i]) {
            a.assign(g);
        }
        i += 1;
    });
    Ok((value, Some(out)))
}

/// Relative-error floor: gradient entries smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference check of `grad` against `f` at `x`; returns the largest relative error.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    grad: &[f64],
    eps: f64,
) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let up = f(&xp)?;
        xp[i] = x[i] - eps;
        let down = f(&xp)?;
        xp[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub group: ParamGroup,
    pub n_checked: usize,
    pub max_rel_error: f64,
}

/// Compares analytic gradients of `kind` with central differences over every
/// parameter in `group`.
pub fn grad_check(
    weights: &DecoderWeights,
    instance: &ToyInstance,
    kind: LossKind,
    group: &ParamGroup,
    eps: f64,
) -> Result<GradCheckReport> {
    let prefix = group.prefix();
    let (_, grads) = evaluate(weights, instance, kind, true)?;
    let grads = grads.expect("requested gradients");
    let mut x = Vec::new();
    let mut g = Vec::new();
    let mut gi = grads.names().into_iter();
    let mut flat_grads = Vec::new();
    grads.for_each(&mut |_, a| flat_grads.push(a.clone()));
    let mut k = 0;
    weights.for_each(&mut |name, a| {
        let _ = gi.next();
        if name.starts_with(&prefix) {
            x.extend(a.iter().copied());
            g.extend(flat_grads[k].iter().copied());
        }
        k += 1;
    });
    if x.is_empty() {
        return Err(Error::Config(format!("no parameters match `{prefix}`")));
    }
    let rebuild = |flat: &[f64]| {
        let mut w = weights.clone();
        let mut off = 0;
        w.for_each_mut(&mut |name, a| {
            if name.starts_with(&prefix) {
                for v in a.iter_mut() {
                    *v = flat[off];
                    off += 1;
                }
            }
        });
        w
    };
    let max_rel_error = finite_difference_check(
        |flat| evaluate(&rebuild(flat), instance, kind, false).map(|(v, _)| v),
        &x,
        &g,
        eps,
    )?;
    Ok(GradCheckReport { loss: kind, group: group.clone(), n_checked: x.len(), max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;

    #[test]
    fn gram_single_and_duplicate_rows() {
        assert_eq!(gram(&array![[3.0, 4.0]]).g, array![[1.0]]);
        let g = gram(&array![[1.0, 2.0], [1.0, 2.0]]).g;
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gram_zero_row_is_flagged() {
        let gm = gram(&array![[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(gm.zero_rows, vec![0]);
        assert_eq!(gm.g[[0, 0]], 0.0);
        assert_eq!(gm.g[[1, 1]], 1.0);
    }

    #[test]
    fn hand_expanded_dist_value() {
        // G all-ones against identity targets, N = 2: 2 * (2 * 1^2) = 4
        let mut tape = Tape::new();
        let p = tape.leaf(array![[1.0, 1.0], [2.0, 2.0]]);
        let eye = Array2::eye(2);
        let l = dist_loss_node(&mut tape, p, &eye, &eye);
        assert!((tape.scalar(l) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut tape = Tape::new();
        let p = tape.leaf(Array2::zeros((4, 3)));
        let q = tape.leaf(Array2::ones((2, 3)));
        let l = seg_loss_node(&mut tape, p, q, Array2::zeros((2, 4)));
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_vanish() {
        // logits +20 inside, -20 outside
        let mut tape = Tape::new();
        let p = tape.leaf(array![[20.0], [-20.0], [20.0]]);
        let q = tape.leaf(array![[1.0]]);
        let targets = array![[1.0, 0.0, 1.0]];
        let l = seg_loss_node(&mut tape, p, q, targets);
        assert!(tape.scalar(l) < 1e-6);
    }

    #[test]
    fn empty_support_xseg_is_zero() {
        let q = vec![Query { v: vec![1.0, 2.0], instance_local_id: 1, frame_t: 0 }];
        let masks = PatchMaskSet {
            grid_h: 1,
            grid_w: 2,
            patch_labels: vec![1, 0],
            instances: vec![InstanceMask { label: 1, patches: vec![0], pixel_count: 1 }],
            dropped: vec![],
        };
        let l = xseg_loss(&Array2::ones((2, 2)), &q, &masks, &[false, false]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn harness_is_exact_on_quadratic_probe() {
        // f(x) = ‖W x‖², ∇f = 2 Wᵀ W x
        let w = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let x = [0.4, -0.3, 1.2];
        let wx = w.dot(&ndarray::arr1(&x));
        let grad = 2.0 * w.t().dot(&wx);
        let err = finite_difference_check(
            |v| {
                let y = w.dot(&ndarray::arr1(v));
                Ok(y.dot(&y))
            },
            &x,
            grad.as_slice().unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn seg_and_dist_grads_wrt_psi() {
        let inst = ToyInstance::random(11, 3, 3, 3, 3, 6, 2, 2);
        let w = DecoderWeights::init(ModelConfig::toy(6, 6), 4).unwrap();
        for kind in [LossKind::Seg, LossKind::Dist] {
            let r = grad_check(&w, &inst, kind, &ParamGroup::Psi, 1e-4).unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn loss_report_decomposes() {
        let r = LossReport::new(0.7, 3.0, 0.2, LossWeights::default());
        assert!((r.total - (0.7 + 0.3 + 0.1)).abs() < 1e-12);
    }
}
