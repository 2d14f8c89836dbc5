//! Forward pass of the query refinement decoder.
//!
//! Each layer applies, with pre-normalization and a residual connection:
//! masked cross-attention from the queries to the frame's patch features
//! (each query sees only its own mask), cross-attention to contextual memory
//! queries (skipped when there is no context), self-attention among the
//! frame's queries, and a GELU feed-forward block.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::frame::PatchMaskSet;
use crate::model::{Attention, DecoderLayer, DecoderWeights, Norm};
use crate::prototype::{linear, pooling_matrix, ConcatFeatureMap, Query};
use crate::tape::{Tape, Var};

/// Attention mask: entry `(i, p)` is true when query `i` may attend to patch `p`.
pub fn attention_mask(masks: &PatchMaskSet) -> Result<Array2<bool>> {
    let mut allowed = Array2::from_elem((masks.len(), masks.n_patches()), false);
    for (i, inst) in masks.instances.iter().enumerate() {
        if inst.patches.is_empty() {
            return Err(Error::Precondition(format!(
                "query for instance {} has no patch to attend to",
                inst.label
            )));
        }
        for &p in &inst.patches {
            allowed[[i, p]] = true;
        }
    }
    Ok(allowed)
}

fn norm(tape: &mut Tape, n: &Norm<Var>, x: Var) -> Var {
    tape.layer_norm(x, n.gain, n.bias)
}

/// Scaled dot-product attention with `heads` heads and an output projection.
pub fn attention(
    tape: &mut Tape,
    p: &Attention<Var>,
    heads: usize,
    queries: Var,
    keys_values: Var,
    allowed: Option<&Array2<bool>>,
) -> Var {
    let q = linear(tape, &p.q, queries);
    let k = linear(tape, &p.k, keys_values);
    let v = linear(tape, &p.v, keys_values);
    let d = tape.value(q).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh),
                tape.slice_cols(k, h * dh, dh),
                tape.slice_cols(v, h * dh, dh),
            )
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax(scores, allowed);
        outs.push(tape.matmul(weights, vh));
    }
    let mixed = tape.concat_cols(&outs);
    linear(tape, &p.o, mixed)
}

/// Residual masked cross-attention sub-layer.
pub fn masked_cross_attention_step(
    tape: &mut Tape,
    layer: &DecoderLayer<Var>,
    heads: usize,
    x: Var,
    features: Var,
    allowed: &Array2<bool>,
) -> Var {
    let h = norm(tape, &layer.norm_mask, x);
    let a = attention(tape, &layer.mask_attn, heads, h, features, Some(allowed));
    tape.add(x, a)
}

/// Residual contextual cross-attention sub-layer; identity without context.
pub fn context_step(
    tape: &mut Tape,
    layer: &DecoderLayer<Var>,
    heads: usize,
    x: Var,
    ctx: Option<Var>,
) -> Var {
    let Some(ctx) = ctx else { return x };
    let h = norm(tape, &layer.norm_ctx, x);
    let a = attention(tape, &layer.ctx_attn, heads, h, ctx, None);
    tape.add(x, a)
}

pub fn decoder_layer(
    tape: &mut Tape,
    layer: &DecoderLayer<Var>,
    heads: usize,
    x: Var,
    features: Var,
    allowed: &Array2<bool>,
    ctx: Option<Var>,
) -> Var {
    let x = masked_cross_attention_step(tape, layer, heads, x, features, allowed);
    let x = context_step(tape, layer, heads, x, ctx);

    let h = norm(tape, &layer.norm_self, x);
    let a = attention(tape, &layer.self_attn, heads, h, h, None);
    let x = tape.add(x, a);

    let h = norm(tape, &layer.norm_ff, x);
    let h = linear(tape, &layer.ff1, h);
    let h = tape.gelu(h);
    let h = linear(tape, &layer.ff2, h);
    tape.add(x, h)
}

/// Runs every decoder layer over the prototypes.
pub fn decode(
    tape: &mut Tape,
    weights: &DecoderWeights<Var>,
    prototypes: Var,
    features: Var,
    allowed: &Array2<bool>,
    ctx: Option<Var>,
) -> Var {
    let heads = weights.config.heads;
    weights
        .layers
        .iter()
        .fold(prototypes, |x, layer| decoder_layer(tape, layer, heads, x, features, allowed, ctx))
}

/// Tape handles for one frame's query computation.
pub struct QueryGraph {
    pub features: Var,
    pub prototypes: Var,
    pub refined: Var,
}

/// Builds pooling → η → decoder for one frame.
pub fn build_query_graph(
    tape: &mut Tape,
    weights: &DecoderWeights<Var>,
    features: &ConcatFeatureMap,
    masks: &PatchMaskSet,
    ctx: Option<&Array2<f64>>,
) -> Result<QueryGraph> {
    let allowed = attention_mask(masks)?;
    let f = tape.leaf(features.data.clone());
    let pool = tape.leaf(pooling_matrix(masks)?);
    let pooled = tape.matmul(pool, f);
    let prototypes = linear(tape, &weights.eta, pooled);
    let ctx = ctx.filter(|c| c.nrows() > 0).map(|c| tape.leaf(c.clone()));
    let refined = decode(tape, weights, prototypes, f, &allowed, ctx);
    Ok(QueryGraph { features: f, prototypes, refined })
}

pub fn stack_queries(queries: &[Query], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((queries.len(), dim));
    for (i, q) in queries.iter().enumerate() {
        if q.v.len() != dim {
            return Err(Error::Precondition(format!("query of dimension {} where {dim} expected", q.v.len())));
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&q.v));
    }
    Ok(m)
}

fn unstack(values: &Array2<f64>, like: &[Query]) -> Vec<Query> {
    values
        .outer_iter()
        .zip(like)
        .map(|(row, q)| Query { v: row.to_vec(), instance_local_id: q.instance_local_id, frame_t: q.frame_t })
        .collect()
}

/// Refines prototype queries against their frame's features, masks and
/// memory context. `queries[i]` must correspond to `masks.instances[i]`.
pub fn refine_frame(
    queries: &[Query],
    features: &ConcatFeatureMap,
    masks: &PatchMaskSet,
    ctx: &[Query],
    weights: &DecoderWeights,
) -> Result<Vec<Query>> {
    if queries.len() != masks.len() {
        return Err(Error::Precondition(format!(
            "{} queries for {} masks",
            queries.len(),
            masks.len()
        )));
    }
    let d = weights.config.d;
    let allowed = attention_mask(masks)?;
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape);
    let x = tape.leaf(stack_queries(queries, d)?);
    let f = tape.leaf(features.data.clone());
    let ctx = if ctx.is_empty() { None } else { Some(tape.leaf(stack_queries(ctx, d)?)) };
    let out = decode(&mut tape, &w, x, f, &allowed, ctx);
    Ok(unstack(tape.value(out), queries))
}

/// Applies only the contextual cross-attention sub-layer of decoder layer `layer`.
pub fn inject_context(
    queries: &[Query],
    ctx: &[Query],
    weights: &DecoderWeights,
    layer: usize,
) -> Result<Vec<Query>> {
    let d = weights.config.d;
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::Precondition(format!("no decoder layer {layer}")))?;
    let mut tape = Tape::new();
    let lv = DecoderWeights { config: weights.config, eta: weights.eta.clone(), psi: weights.psi.clone(), layers: vec![lw.clone()] }
        .bind(&mut tape);
    let x = tape.leaf(stack_queries(queries, d)?);
    let ctx = if ctx.is_empty() { None } else { Some(tape.leaf(stack_queries(ctx, d)?)) };
    let out = context_step(&mut tape, &lv.layers[0], weights.config.heads, x, ctx);
    Ok(unstack(tape.value(out), queries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::InstanceMask;
    use crate::model::ModelConfig;
    use ndarray::Array1;

    fn masks(grid: usize, sets: &[&[usize]]) -> PatchMaskSet {
        PatchMaskSet {
            grid_h: 1,
            grid_w: grid,
            patch_labels: vec![0; grid],
            instances: sets
                .iter()
                .enumerate()
                .map(|(i, s)| InstanceMask { label: i as u16 + 1, patches: s.to_vec(), pixel_count: s.len() })
                .collect(),
            dropped: vec![],
        }
    }

    fn lin(l: &crate::model::Linear<Array2<f64>>, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&l.w) + l.b.row(0)
    }

    #[test]
    fn singleton_mask_attends_to_its_value() {
        let weights = DecoderWeights::init(ModelConfig::toy(3, 4), 1).unwrap();
        let layer = &weights.layers[0];
        let features = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64 * 0.1 - 0.3);
        let m = masks(3, &[&[2]]);
        let allowed = attention_mask(&m).unwrap();
        let mut tape = Tape::new();
        let w = weights.bind(&mut tape);
        let x0 = Array2::from_shape_fn((1, 4), |(_, c)| c as f64 * 0.2);
        let x = tape.leaf(x0.clone());
        let f = tape.leaf(features.clone());
        let out = masked_cross_attention_step(&mut tape, &w.layers[0], 1, x, f, &allowed);
        let v = lin(&layer.mask_attn.v, &features.row(2).to_owned());
        let expected = x0.row(0).to_owned() + lin(&layer.mask_attn.o, &v);
        for (a, b) in tape.value(out).row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_is_identity() {
        let weights = DecoderWeights::init(ModelConfig::toy(3, 4), 2).unwrap();
        let q = vec![Query { v: vec![0.1, -0.2, 0.3, 0.4], instance_local_id: 1, frame_t: 0 }];
        assert_eq!(inject_context(&q, &[], &weights, 0).unwrap(), q);
    }

    #[test]
    fn single_context_vector_adds_its_value() {
        let weights = DecoderWeights::init(ModelConfig::toy(3, 4), 3).unwrap();
        let layer = &weights.layers[0];
        let ctx = vec![Query { v: vec![1.0, 0.5, -0.5, 0.2], instance_local_id: 9, frame_t: 0 }];
        let q: Vec<Query> = (0..3)
            .map(|i| Query { v: vec![i as f64, 0.3, -0.1, 0.0], instance_local_id: i as u16, frame_t: 1 })
            .collect();
        let out = inject_context(&q, &ctx, &weights, 0).unwrap();
        let v = lin(&layer.ctx_attn.v, &Array1::from(ctx[0].v.clone()));
        let delta = lin(&layer.ctx_attn.o, &v);
        for (qi, oi) in q.iter().zip(&out) {
            for c in 0..4 {
                assert!((oi.v[c] - qi.v[c] - delta[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_patch_mask_is_rejected() {
        let weights = DecoderWeights::init(ModelConfig::toy(3, 4), 1).unwrap();
        let f = ConcatFeatureMap { grid_h: 1, grid_w: 2, d2: 1, d3: 2, data: Array2::zeros((2, 3)) };
        let m = masks(2, &[&[]]);
        let q = vec![Query { v: vec![0.0; 4], instance_local_id: 1, frame_t: 0 }];
        assert!(matches!(refine_frame(&q, &f, &m, &[], &weights), Err(Error::Precondition(_))));
    }

    #[test]
    fn multi_head_runs() {
        let mut cfg = ModelConfig::standard(3, 4);
        cfg.heads = 2;
        let weights = DecoderWeights::init(cfg, 5).unwrap();
        let f = ConcatFeatureMap { grid_h: 1, grid_w: 3, d2: 1, d3: 2, data: Array2::from_elem((3, 3), 0.5) };
        let m = masks(3, &[&[0, 1], &[2]]);
        let q: Vec<Query> = (0..2).map(|i| Query { v: vec![i as f64; 4], instance_local_id: i, frame_t: 0 }).collect();
        let out = refine_frame(&q, &f, &m, &[], &weights).unwrap();
        assert!(out.iter().all(|q| q.v.iter().all(|v| v.is_finite())));
    }
}
