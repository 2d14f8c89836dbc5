//! Reference implementations written with plain loops over `Vec<Vec<f64>>`.
//! They share no code with the engine and favour obviousness over speed.

use ndarray::Array2;
use streamseg::model::{Attention, DecoderLayer, DecoderWeights, Linear, Norm, Psi};

pub type Mat = Vec<Vec<f64>>;

pub fn from_array(a: &Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn affine(x: &Mat, lin: &Linear<Array2<f64>>) -> Mat {
    let w = from_array(&lin.w);
    let mut y = matmul(x, &w);
    for row in &mut y {
        for (j, v) in row.iter_mut().enumerate() {
            *v += lin.b[[0, j]];
        }
    }
    y
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn layer_norm(x: &Mat, n: &Norm<Array2<f64>>) -> Mat {
    x.iter()
        .map(|row| {
            let len = row.len() as f64;
            let mean = row.iter().sum::<f64>() / len;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * n.gain[[0, j]] + n.bias[[0, j]])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Single-head attention; `allowed[i][j] == false` adds `-inf` to the logit.
pub fn attention(p: &Attention<Array2<f64>>, queries: &Mat, kv: &Mat, allowed: Option<&Vec<Vec<bool>>>) -> Mat {
    let q = affine(queries, &p.q);
    let k = affine(kv, &p.k);
    let v = affine(kv, &p.v);
    let d = q[0].len() as f64;
    let mut mixed = Vec::new();
    for i in 0..q.len() {
        let logits: Vec<f64> = (0..k.len())
            .map(|j| {
                let dot: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                let bias = match allowed {
                    Some(m) if !m[i][j] => f64::NEG_INFINITY,
                    _ => 0.0,
                };
                dot / d.sqrt() + bias
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for j in 0..k.len() {
            for c in 0..row.len() {
                row[c] += exps[j] / z * v[j][c];
            }
        }
        mixed.push(row);
    }
    affine(&mixed, &p.o)
}

pub fn context_sublayer(layer: &DecoderLayer<Array2<f64>>, x: &Mat, ctx: &Mat) -> Mat {
    if ctx.is_empty() {
        return x.clone();
    }
    add(x, &attention(&layer.ctx_attn, &layer_norm(x, &layer.norm_ctx), ctx, None))
}

pub fn decoder_layer(layer: &DecoderLayer<Array2<f64>>, x: &Mat, features: &Mat, allowed: &Vec<Vec<bool>>, ctx: &Mat) -> Mat {
    let x = add(x, &attention(&layer.mask_attn, &layer_norm(x, &layer.norm_mask), features, Some(allowed)));
    let x = context_sublayer(layer, &x, ctx);
    let h = layer_norm(&x, &layer.norm_self);
    let x = add(&x, &attention(&layer.self_attn, &h, &h, None));
    let h = affine(&layer_norm(&x, &layer.norm_ff), &layer.ff1);
    let h: Mat = h.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
    add(&x, &affine(&h, &layer.ff2))
}

pub fn decode(w: &DecoderWeights, x: &Mat, features: &Mat, allowed: &Vec<Vec<bool>>, ctx: &Mat) -> Mat {
    w.layers.iter().fold(x.clone(), |x, l| decoder_layer(l, &x, features, allowed, ctx))
}

pub fn psi(p: &Psi<Array2<f64>>, x: &Mat) -> Mat {
    let h = affine(x, &p.l1);
    let h: Mat = h.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
    affine(&h, &p.l2)
}

/// `-(y ln σ(z) + (1-y) ln(1-σ(z)))`, computed literally.
pub fn bce(z: f64, y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Box volume overlap over union for `[min, max]` corner pairs.
pub fn box_iou(a: ([f64; 3], [f64; 3]), b: ([f64; 3], [f64; 3])) -> f64 {
    let mut inter = 1.0;
    let mut va = 1.0;
    let mut vb = 1.0;
    for k in 0..3 {
        inter *= (a.1[k].min(b.1[k]) - a.0[k].max(b.0[k])).max(0.0);
        va *= a.1[k] - a.0[k];
        vb *= b.1[k] - b.0[k];
    }
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Corners of the tight box around `points`, grown by `pad` on every side.
pub fn bounds(points: &[[f64; 3]], pad: f64) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..3 {
        lo[k] -= pad;
        hi[k] += pad;
    }
    (lo, hi)
}
