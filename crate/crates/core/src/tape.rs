//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! tape in reverse from a scalar (1×1) node. Inference builds the same graph
//! and simply never calls `backward`, so training and inference share one
//! forward implementation.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
/// Logits are clamped to this magnitude before binary cross-entropy. The
/// clamp bounds the loss value only; the gradient is the unclamped
/// `sigmoid(z) - target`, so saturated wrong logits still get pulled back.
pub const LOGIT_CLAMP: f64 = 30.0;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Softmax { x: Var },
    RowNormalize { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumSquares(Var),
    Bce { logits: Var, targets: Array2<f64>, support: Option<Vec<bool>>, count: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let t = (K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softplus(z) - t*z`, the stable form of binary cross-entropy on a logit.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z
}

/// Row-wise softmax over the entries where `allowed` is true; other entries become 0.
pub fn masked_softmax_rows(x: &Array2<f64>, allowed: Option<&Array2<bool>>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (r, (row, mut orow)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let ok = |c: usize| allowed.is_none_or(|m| m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| ok(*c))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (c, v) in row.iter().enumerate() {
            if ok(c) {
                let e = (v - max).exp();
                orow[c] = e;
                sum += e;
            }
        }
        orow.mapv_inplace(|v| v / sum);
    }
    out
}

/// Scales each row to unit L2 norm; zero rows stay zero. Returns the original norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    (out, norms)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax restricted to `allowed` entries.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&Array2<bool>>) -> Var {
        let v = masked_softmax_rows(self.value(x), allowed);
        self.push(v, Op::Softmax { x })
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (v, norms) = normalize_rows(self.value(x));
        self.push(v, Op::RowNormalize { x, norms })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.iter().map(|v| v * v).sum());
        self.push(v, Op::SumSquares(x))
    }

    /// Mean binary cross-entropy between `logits` and `targets`, restricted to
    /// columns where `support` is true. Zero when the support is empty.
    pub fn bce_mean(&mut self, logits: Var, targets: Array2<f64>, support: Option<Vec<bool>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.raw_dim(), targets.raw_dim(), "bce target shape");
        let mut total = 0.0;
        let mut count = 0usize;
        for ((r, c), &zv) in z.indexed_iter() {
            if support.as_ref().is_some_and(|s| !s[c]) {
                continue;
            }
            total += bce_with_logit(zv.clamp(-LOGIT_CLAMP, LOGIT_CLAMP), targets[[r, c]]);
            count += 1;
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Array2::from_elem((1, 1), mean), Op::Bce { logits, targets, support, count })
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *gain, ggain);
                    let gxhat = &g * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (r, mut row) in gx.outer_iter_mut().enumerate() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_g = gh.sum();
                        let sum_gx = gh.dot(&xh);
                        Zip::from(&mut row).and(&gh).and(&xh).for_each(|o, &gv, &xv| {
                            *o = inv_std[r] / n * (n * gv - sum_g - xv * sum_gx);
                        });
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for (r, mut row) in gx.outer_iter_mut().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = yr.dot(&gr);
                        Zip::from(&mut row).and(&yr).and(&gr).for_each(|o, &yv, &gv| {
                            *o = yv * (gv - inner);
                        });
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for (r, mut row) in gx.outer_iter_mut().enumerate() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = yr.dot(&gr);
                        Zip::from(&mut row).and(&yr).and(&gr).for_each(|o, &yv, &gv| {
                            *o = (gv - yv * inner) / norms[r];
                        });
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SumSquares(x) => {
                    let gx = self.value(*x) * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bce { logits, targets, support, count } => {
                    let z = self.value(*logits);
                    let mut gz = Array2::zeros(z.raw_dim());
                    if *count > 0 {
                        let scale = g[[0, 0]] / *count as f64;
                        for ((r, c), o) in gz.indexed_iter_mut() {
                            if support.as_ref().is_some_and(|s| !s[c]) {
                                continue;
                            }
                            *o = scale * (sigmoid(z[[r, c]]) - targets[[r, c]]);
                        }
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
