//! Parameters of the query projection, the feature projection and the
//! refinement decoder, with seeded initialization and a versioned weights file.
//!
//! Parameter containers are generic over the leaf type so that the same tree
//! holds concrete arrays, tape variables during a forward pass, or gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const WEIGHTS_MAGIC: [u8; 8] = *b"SSEGWTS\0";
pub const WEIGHTS_VERSION: u16 = 1;

/// Shape hyperparameters of the learned components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the concatenated feature map (`d2 + d3`).
    pub in_dim: usize,
    /// Query dimension.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub psi_hidden: usize,
}

impl ModelConfig {
    /// Full-size decoder: three layers, single head, 4d feed-forward.
    pub fn standard(in_dim: usize, d: usize) -> Self {
        ModelConfig { in_dim, d, heads: 1, layers: 3, ffn_hidden: 4 * d, psi_hidden: 2 * d }
    }

    /// Reduced decoder used by the toy trainer.
    pub fn toy(in_dim: usize, d: usize) -> Self {
        ModelConfig { layers: 1, ..Self::standard(in_dim, d) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.d == 0 || self.heads == 0 || self.ffn_hidden == 0 || self.psi_hidden == 0 {
            return Err(Error::Config(format!("zero-sized model dimension in {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Affine map `x·w + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

/// One refinement layer: masked cross-attention to frame features,
/// cross-attention to memory context, self-attention, feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm_mask: Norm<T>,
    pub mask_attn: Attention<T>,
    pub norm_ctx: Norm<T>,
    pub ctx_attn: Attention<T>,
    pub norm_self: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm_ff: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

/// Two-layer MLP projecting patch features into query space.
#[derive(Clone, Debug, PartialEq)]
pub struct Psi<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

/// Every learned parameter: η (prototype projection), ψ (feature projection)
/// and the refinement decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T = Array2<f64>> {
    pub config: ModelConfig,
    pub eta: Linear<T>,
    pub psi: Psi<T>,
    pub layers: Vec<DecoderLayer<T>>,
}

type Visit<'a, T, U> = &'a mut dyn FnMut(&str, &T) -> U;
type VisitMut<'a, T> = &'a mut dyn FnMut(&str, &mut T);

impl<T> Linear<T> {
    fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> Linear<U> {
        Linear { w: f(&format!("{prefix}.w"), &self.w), b: f(&format!("{prefix}.b"), &self.b) }
    }

    fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> Norm<U> {
        Norm { gain: f(&format!("{prefix}.gain"), &self.gain), bias: f(&format!("{prefix}.bias"), &self.bias) }
    }

    fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> Attention<U> {
        Attention {
            q: self.q.map(&format!("{prefix}.q"), f),
            k: self.k.map(&format!("{prefix}.k"), f),
            v: self.v.map(&format!("{prefix}.v"), f),
            o: self.o.map(&format!("{prefix}.o"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        self.q.for_each_mut(&format!("{prefix}.q"), f);
        self.k.for_each_mut(&format!("{prefix}.k"), f);
        self.v.for_each_mut(&format!("{prefix}.v"), f);
        self.o.for_each_mut(&format!("{prefix}.o"), f);
    }
}

impl<T> DecoderLayer<T> {
    fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> DecoderLayer<U> {
        DecoderLayer {
            norm_mask: self.norm_mask.map(&format!("{prefix}.norm_mask"), f),
            mask_attn: self.mask_attn.map(&format!("{prefix}.mask_attn"), f),
            norm_ctx: self.norm_ctx.map(&format!("{prefix}.norm_ctx"), f),
            ctx_attn: self.ctx_attn.map(&format!("{prefix}.ctx_attn"), f),
            norm_self: self.norm_self.map(&format!("{prefix}.norm_self"), f),
            self_attn: self.self_attn.map(&format!("{prefix}.self_attn"), f),
            norm_ff: self.norm_ff.map(&format!("{prefix}.norm_ff"), f),
            ff1: self.ff1.map(&format!("{prefix}.ff1"), f),
            ff2: self.ff2.map(&format!("{prefix}.ff2"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        self.norm_mask.for_each_mut(&format!("{prefix}.norm_mask"), f);
        self.mask_attn.for_each_mut(&format!("{prefix}.mask_attn"), f);
        self.norm_ctx.for_each_mut(&format!("{prefix}.norm_ctx"), f);
        self.ctx_attn.for_each_mut(&format!("{prefix}.ctx_attn"), f);
        self.norm_self.for_each_mut(&format!("{prefix}.norm_self"), f);
        self.self_attn.for_each_mut(&format!("{prefix}.self_attn"), f);
        self.norm_ff.for_each_mut(&format!("{prefix}.norm_ff"), f);
        self.ff1.for_each_mut(&format!("{prefix}.ff1"), f);
        self.ff2.for_each_mut(&format!("{prefix}.ff2"), f);
    }
}

impl<T> DecoderWeights<T> {
    /// Rebuilds the tree with `f` applied to every named leaf, in a fixed order.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> DecoderWeights<U> {
        DecoderWeights {
            config: self.config,
            eta: self.eta.map("eta", f),
            psi: Psi { l1: self.psi.l1.map("psi.l1", f), l2: self.psi.l2.map("psi.l2", f) },
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.eta.for_each_mut("eta", f);
        self.psi.l1.for_each_mut("psi.l1", f);
        self.psi.l2.for_each_mut("psi.l2", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("layers.{i}"), f);
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |name, _| out.push(name.to_string()));
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    rows: usize,
    cols: usize,
    init: Init,
}

fn linear_shape(fan_in: usize, fan_out: usize) -> Linear<Shape> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear {
        w: Shape { rows: fan_in, cols: fan_out, init: Init::Uniform(bound) },
        b: Shape { rows: 1, cols: fan_out, init: Init::Uniform(bound) },
    }
}

fn norm_shape(dim: usize) -> Norm<Shape> {
    Norm {
        gain: Shape { rows: 1, cols: dim, init: Init::Ones },
        bias: Shape { rows: 1, cols: dim, init: Init::Zeros },
    }
}

fn attention_shape(q_in: usize, kv_in: usize, d: usize) -> Attention<Shape> {
    Attention {
        q: linear_shape(q_in, d),
        k: linear_shape(kv_in, d),
        v: linear_shape(kv_in, d),
        o: linear_shape(d, d),
    }
}

fn shapes(config: ModelConfig) -> DecoderWeights<Shape> {
    let d = config.d;
    DecoderWeights {
        config,
        eta: linear_shape(config.in_dim, d),
        psi: Psi {
            l1: linear_shape(config.in_dim, config.psi_hidden),
            l2: linear_shape(config.psi_hidden, d),
        },
        layers: (0..config.layers)
            .map(|_| DecoderLayer {
                norm_mask: norm_shape(d),
                mask_attn: attention_shape(d, config.in_dim, d),
                norm_ctx: norm_shape(d),
                ctx_attn: attention_shape(d, d, d),
                norm_self: norm_shape(d),
                self_attn: attention_shape(d, d, d),
                norm_ff: norm_shape(d),
                ff1: linear_shape(d, config.ffn_hidden),
                ff2: linear_shape(config.ffn_hidden, d),
            })
            .collect(),
    }
}

impl DecoderWeights<Array2<f64>> {
    /// Seeded initialization: weights and biases uniform in ±1/√fan_in,
    /// normalization gains 1 and offsets 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(shapes(config).map(&mut |_, s: &Shape| match s.init {
            Init::Uniform(bound) => {
                Array2::from_shape_fn((s.rows, s.cols), |_| rng.random_range(-bound..bound))
            }
            Init::Ones => Array2::ones((s.rows, s.cols)),
            Init::Zeros => Array2::zeros((s.rows, s.cols)),
        }))
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> DecoderWeights<Var> {
        self.map(&mut |_, a| tape.leaf(a.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, a| Array2::zeros(a.raw_dim()))
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, a| n += a.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&WEIGHTS_MAGIC)?;
        out.write_u16::<LE>(WEIGHTS_VERSION)?;
        let c = self.config;
        for v in [c.in_dim, c.d, c.heads, c.layers, c.ffn_hidden, c.psi_hidden] {
            out.write_u32::<LE>(v as u32)?;
        }
        let mut blocks: Vec<(String, Array2<f64>)> = Vec::new();
        self.for_each(&mut |name, a| blocks.push((name.to_string(), a.clone())));
        out.write_u32::<LE>(blocks.len() as u32)?;
        for (name, a) in blocks {
            out.write_u16::<LE>(name.len() as u16)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LE>(a.nrows() as u32)?;
            out.write_u32::<LE>(a.ncols() as u32)?;
            for v in a.iter() {
                out.write_f64::<LE>(*v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("weights file truncated: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(fmt)?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file".into()));
        }
        let version = input.read_u16::<LE>().map_err(fmt)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = input.read_u32::<LE>().map_err(fmt)? as usize;
        }
        let [in_dim, d, heads, layers, ffn_hidden, psi_hidden] = dims;
        let config = ModelConfig { in_dim, d, heads, layers, ffn_hidden, psi_hidden };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n_blocks = input.read_u32::<LE>().map_err(fmt)? as usize;
        let mut blocks = std::collections::HashMap::new();
        for _ in 0..n_blocks {
            let len = input.read_u16::<LE>().map_err(fmt)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name).map_err(fmt)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name not utf-8".into()))?;
            let rows = input.read_u32::<LE>().map_err(fmt)? as usize;
            let cols = input.read_u32::<LE>().map_err(fmt)? as usize;
            let mut data = vec![0.0; rows * cols];
            input.read_f64_into::<LE>(&mut data).map_err(fmt)?;
            let a = Array2::from_shape_vec((rows, cols), data).expect("length matches shape");
            if blocks.insert(name.clone(), a).is_some() {
                return Err(Error::Format(format!("duplicate block `{name}`")));
            }
        }
        let mut missing = None;
        let weights = shapes(config).map(&mut |name, s: &Shape| match blocks.remove(name) {
            Some(a) if a.dim() == (s.rows, s.cols) => a,
            Some(a) => {
                missing.get_or_insert(format!("block `{name}` has shape {:?}, expected {:?}", a.dim(), (s.rows, s.cols)));
                Array2::zeros((s.rows, s.cols))
            }
            None => {
                missing.get_or_insert(format!("missing block `{name}`"));
                Array2::zeros((s.rows, s.cols))
            }
        });
        if let Some(msg) = missing {
            return Err(Error::Format(msg));
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected block `{extra}`")));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("weights file holds non-finite parameters".into()));
        }
        Ok(weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::standard(8, 4);
        let a = DecoderWeights::init(cfg, 7).unwrap();
        let b = DecoderWeights::init(cfg, 7).unwrap();
        let c = DecoderWeights::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / (8f64).sqrt();
        assert!(a.eta.w.iter().all(|v| v.abs() <= bound));
        assert!(a.layers[0].norm_ff.gain.iter().all(|&v| v == 1.0));
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.layers[0].ff1.w.dim(), (4, 16));
    }

    #[test]
    fn weights_file_round_trip() {
        let w = DecoderWeights::init(ModelConfig::toy(6, 4), 3).unwrap();
        let mut bytes = Vec::new();
        w.write_to(&mut bytes).unwrap();
        let back = DecoderWeights::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, w);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(DecoderWeights::read_from(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn names_are_unique() {
        let w = DecoderWeights::init(ModelConfig::standard(6, 4), 0).unwrap();
        let names = w.names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"layers.2.ctx_attn.o.b".to_string()));
    }
}
