//! Toy trainer: Adam on the weighted objective over η, φ and ψ, streaming
//! each sequence through a training-time query index memory.

use std::io::Write;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{patchify_masks, FrameRecord};
use crate::model::{DecoderWeights, ModelConfig};
use crate::objectives::{build_frame_losses, report, ContextInputs, FrameTargets, LossReport, LossWeights};
use crate::prototype::{concat_features, Query};
use crate::qim::{gather_context, QueryIndexMemory};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub d: usize,
    pub layers: usize,
    pub losses: LossWeights,
    /// Feed memory context (and the cross-frame loss) during training.
    pub use_memory: bool,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 3e-3,
            seed: 0,
            d: 32,
            layers: 1,
            losses: LossWeights::default(),
            use_memory: true,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Mean losses over one epoch's frames, measured before each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub seg: f64,
    pub dist: f64,
    pub xseg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub weights: DecoderWeights,
    pub curve: Vec<EpochLoss>,
}

impl TrainReport {
    pub fn initial_total(&self) -> Option<f64> {
        self.curve.first().map(|e| e.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.curve.last().map(|e| e.total)
    }

    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,l_seg,l_dist,l_xseg,l_total")?;
        for e in &self.curve {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.seg, e.dist, e.xseg, e.total)?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

impl Adam {
    fn new(like: &DecoderWeights) -> Self {
        let mut m = Vec::new();
        like.for_each(&mut |_, a| m.push(Array2::zeros(a.raw_dim())));
        Adam { v: m.clone(), m, step: 0 }
    }

    fn apply(&mut self, weights: &mut DecoderWeights, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let (b1, b2, lr) = (cfg.beta1, cfg.beta2, cfg.lr);
        let mut i = 0;
        weights.for_each_mut(&mut |_, w| {
            Zip::from(w).and(&mut self.m[i]).and(&mut self.v[i]).and(&grads[i]).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            });
            i += 1;
        });
    }
}

struct PreparedFrame<'a> {
    record: &'a FrameRecord,
    targets: FrameTargets,
}

fn prepare(seqs: &[Vec<FrameRecord>]) -> Result<Vec<Vec<PreparedFrame<'_>>>> {
    let mut in_dim = None;
    let mut out = Vec::new();
    for seq in seqs {
        let mut frames = Vec::new();
        for f in seq {
            let c = f.d2 + f.d3;
            if *in_dim.get_or_insert(c) != c {
                return Err(Error::Precondition(format!("frame {} has {c} feature channels, expected {}", f.t, in_dim.unwrap())));
            }
            let masks = patchify_masks(f);
            if masks.is_empty() {
                continue;
            }
            frames.push(PreparedFrame { record: f, targets: FrameTargets::new(concat_features(f), masks) });
        }
        out.push(frames);
    }
    if out.iter().all(Vec::is_empty) {
        return Err(Error::Precondition("no frame with a usable instance mask".into()));
    }
    Ok(out)
}

/// Feature channels of the first frame in `seqs`.
pub fn input_dim(seqs: &[Vec<FrameRecord>]) -> Option<usize> {
    seqs.iter().flatten().next().map(|f| f.d2 + f.d3)
}

/// Trains from `init` (or a seeded initialization) over every sequence, one
/// optimizer step per frame.
pub fn toy_train(seqs: &[Vec<FrameRecord>], cfg: &TrainConfig, init: Option<DecoderWeights>) -> Result<TrainReport> {
    let prepared = prepare(seqs)?;
    let mut weights = match init {
        Some(w) => w,
        None => {
            let in_dim = input_dim(seqs).expect("prepare rejects empty input");
            DecoderWeights::init(ModelConfig { layers: cfg.layers, ..ModelConfig::standard(in_dim, cfg.d) }, cfg.seed)?
        }
    };
    let d = weights.config.d;
    let pool = |f: &FrameRecord| f.patch_size;
    let mut adam = Adam::new(&weights);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = LossReport::new(0.0, 0.0, 0.0, cfg.losses);
        let mut n = 0usize;
        for frames in &prepared {
            let mut memory = QueryIndexMemory::new(None);
            for pf in frames {
                let context = if cfg.use_memory && !memory.bank.is_empty() {
                    let fc = gather_context(&memory, pf.record, d, None)?;
                    let ctx = fc.ctx_matrix(d);
                    ContextInputs { ctx, features: Some((fc.features, fc.support)) }
                } else {
                    ContextInputs::default()
                };
                let mut tape = Tape::new();
                let bound = weights.bind(&mut tape);
                let graph = build_frame_losses(&mut tape, &bound, &pf.targets, &context, cfg.losses)?;
                let r = report(&tape, &graph, cfg.losses);
                if !r.total.is_finite() {
                    return Err(Error::Diverged { epoch, what: format!("l_total at frame {}", pf.record.t) });
                }
                sum.seg += r.seg;
                sum.dist += r.dist;
                sum.xseg += r.xseg;
                sum.total += r.total;
                n += 1;

                if cfg.use_memory {
                    let refined: Vec<Query> = tape
                        .value(graph.refined)
                        .outer_iter()
                        .zip(&pf.targets.masks.instances)
                        .map(|(row, inst)| Query { v: row.to_vec(), instance_local_id: inst.label, frame_t: pf.record.t })
                        .collect();
                    memory.update(pf.record, &pf.targets.masks, &refined, pool(pf.record))?;
                }

                let grads = tape.backward(graph.total);
                let mut g = Vec::new();
                bound.for_each(&mut |_, v| {
                    g.push(grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(tape.value(*v).raw_dim())))
                });
                if cfg.lr != 0.0 {
                    adam.apply(&mut weights, &g, cfg);
                }
                if !weights.is_finite() {
                    return Err(Error::Diverged { epoch, what: "weights".into() });
                }
            }
        }
        let k = n.max(1) as f64;
        let e = EpochLoss { epoch, seg: sum.seg / k, dist: sum.dist / k, xseg: sum.xseg / k, total: sum.total / k };
        log::debug!("epoch {epoch}: {e:?}");
        curve.push(e);
    }
    Ok(TrainReport { weights, curve })
}
