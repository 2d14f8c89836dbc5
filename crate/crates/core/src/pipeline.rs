//! The online loop: patchify → lift → rasterize memory → retrieve context →
//! refine → update memory → fuse, one frame at a time.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confidence, CloudAccumulator, InstancePrediction, VoxelCloud};
use crate::frame::{patchify_masks, FrameRecord};
use crate::fusion::{state_token, FrameFusion, FusionConfig, FusionEvent, MaskObservation, SceneState};
use crate::model::{DecoderWeights, ModelConfig};
use crate::objectives::LossWeights;
use crate::prototype::{concat_features, lift_all, mask_average, Query};
use crate::qim::{gather_context, QueryIndexMemory};
use crate::refiner::refine_frame;

/// Which vectors drive merging and matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssocMode {
    /// Decoder-refined queries.
    #[default]
    Refined,
    /// Mask-averaged raw `[F2d, F3d]` features.
    Raw,
}

impl std::str::FromStr for AssocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refined" => Ok(AssocMode::Refined),
            "raw" => Ok(AssocMode::Raw),
            other => Err(Error::Config(format!("unknown association mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub intra_threshold: f64,
    pub prune_threshold: f64,
    pub lambdas: LossWeights,
    /// Query dimension and decoder depth for seeded weights.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Expected frame patch size; any when unset.
    pub patch_size: Option<usize>,
    /// Key pooling window; the frame's patch size when unset.
    pub key_pool: Option<usize>,
    pub voxel: f64,
    pub assoc: AssocMode,
    pub sdt: bool,
    pub qim: bool,
    pub seed: u64,
    pub max_bank: Option<usize>,
    /// Depth tolerance for the optional occlusion cull during rasterization.
    pub occlusion_tau: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            intra_threshold: 0.8,
            prune_threshold: 1.8,
            lambdas: LossWeights::default(),
            d: 64,
            layers: 3,
            heads: 1,
            patch_size: None,
            key_pool: None,
            voxel: 0.05,
            assoc: AssocMode::Refined,
            sdt: true,
            qim: true,
            seed: 0,
            max_bank: None,
            occlusion_tau: None,
        }
    }
}

impl RunConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            intra_threshold: self.intra_threshold,
            prune_threshold: self.prune_threshold,
            use_sdt: self.sdt,
            voxel: self.voxel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("invalid model shape d={} layers={} heads={}", self.d, self.layers, self.heads)));
        }
        if let Some(tau) = self.occlusion_tau {
            if !(tau.is_finite() && tau >= 0.0) {
                return Err(Error::Config(format!("occlusion tolerance {tau} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, in_dim: usize) -> ModelConfig {
        ModelConfig { heads: self.heads, layers: self.layers, ..ModelConfig::standard(in_dim, self.d) }
    }
}

/// Timing and sizes for one processed frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub t: u32,
    pub fusion_ms: f64,
    pub masks: usize,
    pub bank: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyReport {
    pub frames: Vec<FrameTiming>,
}

/// Nearest-rank percentile of `values` (`q` in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

impl LatencyReport {
    pub fn millis(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.fusion_ms).collect()
    }

    pub fn p50(&self) -> Option<f64> {
        percentile(&self.millis(), 0.5)
    }

    pub fn p95(&self) -> Option<f64> {
        percentile(&self.millis(), 0.95)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "frame,fusion_ms,masks,bank,instances")?;
        for f in &self.frames {
            writeln!(out, "{},{:.4},{},{},{}", f.t, f.fusion_ms, f.masks, f.bank, f.instances)?;
        }
        if let (Some(p50), Some(p95)) = (self.p50(), self.p95()) {
            writeln!(out, "# p50_ms={p50:.4} p95_ms={p95:.4}")?;
        }
        Ok(())
    }
}

/// Per-frame result of the online loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub t: u32,
    pub fusion: FrameFusion,
    pub timing: FrameTiming,
}

/// Streaming engine state.
#[derive(Clone)]
pub struct Pipeline {
    cfg: RunConfig,
    fusion_cfg: FusionConfig,
    weights: Option<DecoderWeights>,
    pub memory: QueryIndexMemory,
    pub scene: SceneState,
    cloud: CloudAccumulator,
    pub events: Vec<FusionEvent>,
    pub latency: LatencyReport,
    last_t: Option<u32>,
}

impl Pipeline {
    /// Without `weights`, a seeded initialization is built from the first frame's channel count.
    pub fn new(cfg: RunConfig, weights: Option<DecoderWeights>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            fusion_cfg: cfg.fusion(),
            memory: QueryIndexMemory::new(cfg.max_bank),
            cloud: CloudAccumulator::new(cfg.voxel),
            cfg,
            weights,
            scene: SceneState::new(),
            events: Vec::new(),
            latency: LatencyReport::default(),
            last_t: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn weights(&self) -> Option<&DecoderWeights> {
        self.weights.as_ref()
    }

    fn ensure_weights(&mut self, frame: &FrameRecord) -> Result<()> {
        let in_dim = frame.d2 + frame.d3;
        let w = match self.weights.take() {
            Some(w) => w,
            None => DecoderWeights::init(self.cfg.model_config(in_dim), self.cfg.seed)?,
        };
        if w.config.in_dim != in_dim {
            return Err(Error::Precondition(format!(
                "weights expect {} feature channels, frame has {in_dim}",
                w.config.in_dim
            )));
        }
        self.weights = Some(w);
        Ok(())
    }

    /// Processes the next frame. Frames must arrive in increasing `t`.
    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<FrameOutcome> {
        let t = frame.t;
        frame.validate().map_err(|e| e.at(t, "read"))?;
        if self.last_t.is_some_and(|last| t <= last) {
            return Err(Error::Precondition(format!("frame {t} arrived after frame {}", self.last_t.unwrap())).at(t, "read"));
        }
        if let Some(ps) = self.cfg.patch_size {
            if ps != frame.patch_size {
                return Err(Error::Precondition(format!("patch size {} where {ps} configured", frame.patch_size)).at(t, "read"));
            }
        }
        self.ensure_weights(frame).map_err(|e| e.at(t, "weights"))?;
        self.last_t = Some(t);

        let start = Instant::now();
        let fusion = self.fuse(frame)?;
        let fusion_ms = start.elapsed().as_secs_f64() * 1e3;

        let map = &fusion.label_to_instance;
        self.cloud.add_frame(frame, |i| match frame.labels[i] {
            0 => 0,
            l => map.get(&l).map_or(0, |id| id + 1),
        });
        self.events.extend(fusion.events.iter().cloned());
        let timing = FrameTiming {
            t,
            fusion_ms,
            masks: fusion.label_to_instance.len(),
            bank: self.memory.bank.len(),
            instances: self.scene.len(),
        };
        self.latency.frames.push(timing);
        Ok(FrameOutcome { t, fusion, timing })
    }

    fn fuse(&mut self, frame: &FrameRecord) -> Result<FrameFusion> {
        let t = frame.t;
        let weights = self.weights.as_ref().expect("weights initialised");
        let d = weights.config.d;
        let masks = patchify_masks(frame);
        if masks.is_empty() {
            return Ok(FrameFusion::default());
        }
        let features = concat_features(frame);
        let prototypes = lift_all(&features, &masks, &weights.eta, t).map_err(|e| e.at(t, "lift"))?;

        let ctx: Vec<Query> = if self.cfg.qim && !self.memory.bank.is_empty() {
            gather_context(&self.memory, frame, d, self.cfg.occlusion_tau)
                .map_err(|e| e.at(t, "retrieve"))?
                .ctx
                .into_iter()
                .map(|(_, q)| q)
                .collect()
        } else {
            Vec::new()
        };
        let refined = refine_frame(&prototypes, &features, &masks, &ctx, weights).map_err(|e| e.at(t, "refine"))?;

        let pool = self.cfg.key_pool.unwrap_or(frame.patch_size);
        let update = self.memory.update(frame, &masks, &refined, pool).map_err(|e| e.at(t, "memory"))?;

        let n_patches = frame.n_patches();
        let mut observations = Vec::with_capacity(masks.len());
        for (i, inst) in masks.instances.iter().enumerate() {
            let sdt = state_token(&frame.attention, frame.n_state, n_patches, &inst.patches).map_err(|e| e.at(t, "sdt"))?;
            let query = match self.cfg.assoc {
                AssocMode::Refined => refined[i].v.clone(),
                AssocMode::Raw => mask_average(&features, &inst.patches).map_err(|e| e.at(t, "lift"))?.to_vec(),
            };
            let keys = update.keys_per_query[i].iter().map(|&k| (k, self.memory.key(k).p)).collect();
            observations.push(MaskObservation { label: inst.label, query, sdt, query_id: Some(update.query_ids[i]), keys });
        }
        let fusion = self.scene.fuse_frame(t, &observations, &self.fusion_cfg);
        for &(from, to) in &fusion.retargets {
            self.memory.retarget(from, to);
        }
        Ok(fusion)
    }

    /// Final labelled union cloud and one prediction per instance owning points.
    pub fn finish(self) -> RunOutput {
        let cloud = self.cloud.finish();
        let predictions = cloud
            .groups()
            .into_iter()
            .map(|(label, points)| {
                let rec = &self.scene.instances[label - 1];
                InstancePrediction { instance_id: rec.id, confidence: confidence(rec.n_obs, points.len()), points }
            })
            .collect();
        RunOutput {
            predictions,
            cloud,
            scene: self.scene,
            events: self.events,
            latency: self.latency,
            memory: self.memory,
        }
    }
}

pub struct RunOutput {
    pub predictions: Vec<InstancePrediction>,
    pub cloud: VoxelCloud,
    pub scene: SceneState,
    pub events: Vec<FusionEvent>,
    pub latency: LatencyReport,
    pub memory: QueryIndexMemory,
}

impl RunOutput {
    /// Instance id → number of frames it was observed in.
    pub fn observation_counts(&self) -> BTreeMap<usize, usize> {
        self.scene.instances.iter().map(|r| (r.id, r.n_obs)).collect()
    }
}

/// Runs every frame of `frames` in order.
pub fn run_sequence<I>(frames: I, cfg: &RunConfig, weights: Option<DecoderWeights>) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<FrameRecord>>,
{
    let mut p = Pipeline::new(cfg.clone(), weights)?;
    for f in frames {
        p.process_frame(&f?)?;
    }
    Ok(p.finish())
}

fn instance_color(id: usize) -> [u8; 3] {
    // golden-ratio hue walk
    let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 230.0) as u8 + 25, (g * 230.0) as u8 + 25, (b * 230.0) as u8 + 25]
}

/// ASCII PLY of voxel centres coloured by instance (grey for unlabelled).
pub fn write_ply<W: Write>(mut out: W, cloud: &VoxelCloud) -> Result<()> {
    writeln!(out, "ply\nformat ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int instance")?;
    writeln!(out, "end_header")?;
    for (k, &l) in cloud.keys.iter().zip(&cloud.labels) {
        let c = if l == 0 { [128, 128, 128] } else { instance_color(l - 1) };
        let p: Vec<f64> = k.iter().map(|&v| (v as f64 + 0.5) * cloud.voxel).collect();
        let id = if l == 0 { -1 } else { l as i64 - 1 };
        writeln!(out, "{} {} {} {} {} {} {id}", p[0], p[1], p[2], c[0], c[1], c[2])?;
    }
    Ok(())
}

/// Writes fusion events as JSON lines.
pub fn write_event_log<W: Write>(out: W, events: &[FusionEvent]) -> Result<()> {
    crate::fusion::write_events(out, events)
}
