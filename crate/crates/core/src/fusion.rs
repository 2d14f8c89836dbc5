//! Online mask fusion: state distribution tokens, intra-frame merging of
//! over-segmented masks, cross-frame scoring and assignment, and instance
//! updates.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assign::max_weight_assignment;
use crate::error::{Error, Result};
use crate::geometry::{cosine, voxel_key, Aabb, Vec3};

/// Total attention each state token spends on an instance's patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateToken(pub Vec<f64>);

/// `s[k] = Σ_{p ∈ patches} A[k, p]` for a row-major `n_state × n_patches` matrix.
pub fn state_token(attention: &[f32], n_state: usize, n_patches: usize, patches: &[usize]) -> Result<StateToken> {
    if attention.len() != n_state * n_patches {
        return Err(Error::Precondition(format!(
            "attention holds {} values, expected {n_state}x{n_patches}",
            attention.len()
        )));
    }
    if let Some(&p) = patches.iter().find(|&&p| p >= n_patches) {
        return Err(Error::Precondition(format!("patch {p} outside a {n_patches}-patch grid")));
    }
    let s = (0..n_state)
        .map(|k| {
            let row = &attention[k * n_patches..(k + 1) * n_patches];
            patches.iter().map(|&p| row[p] as f64).sum()
        })
        .collect();
    Ok(StateToken(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Cosine threshold for intra-frame merging.
    pub intra_threshold: f64,
    /// Cross-frame scores below this are pruned.
    pub prune_threshold: f64,
    pub use_sdt: bool,
    /// Key deduplication voxel size.
    pub voxel: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { intra_threshold: 0.8, prune_threshold: 1.8, use_sdt: true, voxel: 0.05 }
    }
}

impl FusionConfig {
    /// Prune threshold rescaled to the number of active score terms.
    pub fn effective_prune(&self) -> f64 {
        if self.use_sdt {
            self.prune_threshold
        } else {
            self.prune_threshold * 2.0 / 3.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intra_threshold > 0.0 && self.intra_threshold <= 1.0) {
            return Err(Error::Config(format!("intra threshold {} outside (0, 1]", self.intra_threshold)));
        }
        if !(self.prune_threshold.is_finite() && (0.0..=3.0).contains(&self.prune_threshold)) {
            return Err(Error::Config(format!("prune threshold {} outside [0, 3]", self.prune_threshold)));
        }
        if !(self.voxel.is_finite() && self.voxel > 0.0) {
            return Err(Error::Config(format!("voxel size {} must be positive", self.voxel)));
        }
        Ok(())
    }
}

/// One mask's contribution to fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskObservation {
    pub label: u16,
    pub query: Vec<f64>,
    pub sdt: StateToken,
    /// Bank id of the refined query, when memory is in use.
    pub query_id: Option<usize>,
    /// Spatial keys `(key_id, point)` covered by the mask.
    pub keys: Vec<(usize, Vec3)>,
}

/// A group of same-frame masks fused into one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedObservation {
    pub labels: Vec<u16>,
    pub query: Vec<f64>,
    pub sdt: StateToken,
    pub query_ids: Vec<usize>,
    pub keys: Vec<(usize, Vec3)>,
}

impl MergedObservation {
    pub fn bbox(&self) -> Option<Aabb> {
        Aabb::from_points(self.keys.iter().map(|(_, p)| p), 0.0)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut x = x;
        while self.parent[x] != r {
            let next = self.parent[x];
            self.parent[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller index becomes root so components are labelled by their first member
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Connected components of the `cosine > threshold` graph over queries, as
/// sorted member lists ordered by first member.
pub fn merge_components(queries: &[&[f64]], threshold: f64) -> Vec<Vec<usize>> {
    let n = queries.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if cosine(queries[i], queries[j]) > threshold {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Merges over-segmented masks of one frame: mean query, summed SDT, union of keys.
pub fn intra_merge(masks: &[MaskObservation], threshold: f64) -> Vec<MergedObservation> {
    let queries: Vec<&[f64]> = masks.iter().map(|m| m.query.as_slice()).collect();
    merge_components(&queries, threshold)
        .into_iter()
        .map(|members| {
            let d = masks[members[0]].query.len();
            let n_s = masks[members[0]].sdt.0.len();
            let mut query = vec![0.0; d];
            let mut sdt = vec![0.0; n_s];
            let mut out = MergedObservation {
                labels: Vec::new(),
                query: Vec::new(),
                sdt: StateToken(Vec::new()),
                query_ids: Vec::new(),
                keys: Vec::new(),
            };
            for &i in &members {
                let m = &masks[i];
                for (a, b) in query.iter_mut().zip(&m.query) {
                    *a += b;
                }
                for (a, b) in sdt.iter_mut().zip(&m.sdt.0) {
                    *a += b;
                }
                out.labels.push(m.label);
                out.query_ids.extend(m.query_id);
                out.keys.extend_from_slice(&m.keys);
            }
            let k = members.len() as f64;
            out.query = query.into_iter().map(|v| v / k).collect();
            out.sdt = StateToken(sdt);
            out
        })
        .collect()
}

/// A fused 3D instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub id: usize,
    pub query: Vec<f64>,
    pub sdt: StateToken,
    /// Voxel-deduplicated keys: voxel → (key id, point).
    pub keys: BTreeMap<[i64; 3], (usize, Vec3)>,
    pub bbox: Option<Aabb>,
    pub n_obs: usize,
    /// Bank id every later query of this instance is retargeted to.
    pub canonical_query: Option<usize>,
    pub first_seen: u32,
    pub last_seen: u32,
}

impl InstanceRecord {
    pub fn key_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.keys.values().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids
    }

    fn add_keys(&mut self, keys: &[(usize, Vec3)], voxel: f64) {
        for &(id, p) in keys {
            self.keys.entry(voxel_key(p, voxel)).or_insert((id, p));
            match &mut self.bbox {
                Some(b) => b.include(p),
                None => self.bbox = Some(Aabb { min: p, max: p }),
            }
        }
    }
}

/// Padded-box IoU; padding by half a voxel keeps flat key sets from scoring zero volume.
pub fn bbox_iou(a: Option<&Aabb>, b: Option<&Aabb>, voxel: f64) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => {
            let pad = |x: &Aabb| Aabb {
                min: [x.min[0] - voxel / 2.0, x.min[1] - voxel / 2.0, x.min[2] - voxel / 2.0],
                max: [x.max[0] + voxel / 2.0, x.max[1] + voxel / 2.0, x.max[2] + voxel / 2.0],
            };
            pad(a).iou(&pad(b))
        }
        _ => 0.0,
    }
}

/// Score of one existing/new pair split into its terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query: f64,
    pub sdt: f64,
    pub iou: f64,
}

impl PairScore {
    pub fn total(&self) -> f64 {
        self.query + self.sdt + self.iou
    }
}

pub fn pair_score(
    query_a: &[f64],
    sdt_a: &StateToken,
    box_a: Option<&Aabb>,
    query_b: &[f64],
    sdt_b: &StateToken,
    box_b: Option<&Aabb>,
    cfg: &FusionConfig,
) -> PairScore {
    PairScore {
        query: cosine(query_a, query_b),
        sdt: if cfg.use_sdt { cosine(&sdt_a.0, &sdt_b.0) } else { 0.0 },
        iou: bbox_iou(box_a, box_b, cfg.voxel),
    }
}

/// Existing × new score matrix with sub-threshold entries set to `-inf`.
pub fn score_matrix(existing: &[InstanceRecord], new: &[MergedObservation], cfg: &FusionConfig) -> Array2<f64> {
    let prune = cfg.effective_prune();
    let boxes: Vec<Option<Aabb>> = new.iter().map(MergedObservation::bbox).collect();
    Array2::from_shape_fn((existing.len(), new.len()), |(i, j)| {
        let e = &existing[i];
        let s = pair_score(&e.query, &e.sdt, e.bbox.as_ref(), &new[j].query, &new[j].sdt, boxes[j].as_ref(), cfg)
            .total();
        if s < prune {
            f64::NEG_INFINITY
        } else {
            s
        }
    })
}

/// Journal entry of one fusion decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FusionEvent {
    Merge { t: u32, labels: Vec<u16> },
    Match { t: u32, instance: usize, labels: Vec<u16>, score: f64 },
    Register { t: u32, instance: usize, labels: Vec<u16> },
}

/// Outcome of fusing one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameFusion {
    /// Frame label → instance id, for every observed mask.
    pub label_to_instance: BTreeMap<u16, usize>,
    /// `(query_id, canonical_query_id)` pairs the memory should retarget.
    pub retargets: Vec<(usize, usize)>,
    pub events: Vec<FusionEvent>,
}

/// All fused instances of a run.
#[derive(Clone, Debug, Default)]
pub struct SceneState {
    pub instances: Vec<InstanceRecord>,
}

impl SceneState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Intra-merge, score, assign and update for one frame's masks.
    pub fn fuse_frame(&mut self, t: u32, masks: &[MaskObservation], cfg: &FusionConfig) -> FrameFusion {
        let merged = intra_merge(masks, cfg.intra_threshold);
        let mut out = FrameFusion::default();
        for m in merged.iter().filter(|m| m.labels.len() > 1) {
            out.events.push(FusionEvent::Merge { t, labels: m.labels.clone() });
        }
        let scores = score_matrix(&self.instances, &merged, cfg);
        let pairs = max_weight_assignment(&scores);
        let mut matched = vec![None; merged.len()];
        for (i, j) in pairs {
            matched[j] = Some((i, scores[[i, j]]));
        }
        for (j, obs) in merged.iter().enumerate() {
            let id = match matched[j] {
                Some((i, score)) => {
                    self.apply_update(i, obs, t, cfg);
                    out.events.push(FusionEvent::Match { t, instance: i, labels: obs.labels.clone(), score });
                    i
                }
                None => {
                    let id = self.register(obs, t, cfg);
                    out.events.push(FusionEvent::Register { t, instance: id, labels: obs.labels.clone() });
                    id
                }
            };
            if let Some(canon) = self.instances[id].canonical_query {
                out.retargets.extend(obs.query_ids.iter().filter(|&&q| q != canon).map(|&q| (q, canon)));
            }
            for &l in &obs.labels {
                out.label_to_instance.insert(l, id);
            }
        }
        out
    }

    /// New instance from an unmatched observation.
    pub fn register(&mut self, obs: &MergedObservation, t: u32, cfg: &FusionConfig) -> usize {
        let id = self.instances.len();
        let mut rec = InstanceRecord {
            id,
            query: obs.query.clone(),
            sdt: obs.sdt.clone(),
            keys: BTreeMap::new(),
            bbox: None,
            n_obs: 1,
            canonical_query: obs.query_ids.first().copied(),
            first_seen: t,
            last_seen: t,
        };
        rec.add_keys(&obs.keys, cfg.voxel);
        self.instances.push(rec);
        id
    }

    /// Running-mean update of instance `i` with a matched observation.
    pub fn apply_update(&mut self, i: usize, obs: &MergedObservation, t: u32, cfg: &FusionConfig) {
        let rec = &mut self.instances[i];
        let n = rec.n_obs as f64;
        for (a, b) in rec.query.iter_mut().zip(&obs.query) {
            *a = (*a * n + b) / (n + 1.0);
        }
        for (a, b) in rec.sdt.0.iter_mut().zip(&obs.sdt.0) {
            *a = (*a * n + b) / (n + 1.0);
        }
        rec.add_keys(&obs.keys, cfg.voxel);
        rec.n_obs += 1;
        rec.last_seen = t;
        if rec.canonical_query.is_none() {
            rec.canonical_query = obs.query_ids.first().copied();
        }
    }
}

/// Writes events as JSON lines.
pub fn write_events<W: Write>(mut out: W, events: &[FusionEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(label: u16, query: Vec<f64>, sdt: Vec<f64>, keys: &[Vec3]) -> MaskObservation {
        MaskObservation {
            label,
            query,
            sdt: StateToken(sdt),
            query_id: None,
            keys: keys.iter().enumerate().map(|(i, p)| (i, *p)).collect(),
        }
    }

    #[test]
    fn full_mask_sdt_is_all_ones() {
        let a = vec![0.25f32; 2 * 4];
        let s = state_token(&a, 2, 4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(s.0, vec![1.0, 1.0]);
        assert_eq!(state_token(&a, 2, 4, &[]).unwrap().0, vec![0.0, 0.0]);
        assert!(state_token(&a, 3, 4, &[0]).is_err());
    }

    #[test]
    fn chain_merges_transitively() {
        let a = vec![1.0, 0.0];
        let b = vec![0.9, (1.0f64 - 0.81).sqrt()];
        // c at 0.9 from b, far from a
        let theta = 2.0 * 0.9f64.acos();
        let c = vec![theta.cos(), theta.sin()];
        assert!(cosine(&a, &c) < 0.8);
        let groups = merge_components(&[&a, &b, &c], 0.8);
        assert_eq!(groups, vec![vec![0, 1, 2]]);
        let groups = merge_components(&[&[1.0, 0.0][..], &[0.0, 1.0][..]], 0.8);
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn self_score_is_three() {
        let o = obs(1, vec![1.0, 2.0], vec![0.3, 0.7], &[[0.0; 3], [1.0, 1.0, 1.0]]);
        let merged = intra_merge(&[o], 0.8);
        let mut scene = SceneState::new();
        scene.register(&merged[0], 0, &FusionConfig::default());
        let e = score_matrix(&scene.instances, &merged, &FusionConfig::default());
        assert!((e[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_orthogonal_is_pruned() {
        let a = obs(1, vec![1.0, 0.0], vec![1.0, 0.0], &[[0.0; 3]]);
        let b = obs(2, vec![0.0, 1.0], vec![0.0, 1.0], &[[5.0; 3]]);
        let mut scene = SceneState::new();
        let cfg = FusionConfig::default();
        scene.register(&intra_merge(&[a], 0.8)[0], 0, &cfg);
        let e = score_matrix(&scene.instances, &intra_merge(&[b], 0.8), &cfg);
        assert_eq!(e[[0, 0]], f64::NEG_INFINITY);
    }

    #[test]
    fn bbox_from_two_keys() {
        let o = obs(1, vec![1.0], vec![1.0], &[[0.0; 3], [1.0, 1.0, 1.0]]);
        let mut scene = SceneState::new();
        scene.register(&intra_merge(&[o], 0.8)[0], 0, &FusionConfig::default());
        assert_eq!(scene.instances[0].bbox, Some(Aabb { min: [0.0; 3], max: [1.0; 3] }));
    }

    #[test]
    fn running_mean_matches_batch_mean() {
        let cfg = FusionConfig::default();
        let qs = [vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0], vec![-1.0, 5.0]];
        let mut scene = SceneState::new();
        let m = |q: &Vec<f64>| intra_merge(&[obs(1, q.clone(), vec![1.0], &[[0.0; 3]])], 0.8).remove(0);
        scene.register(&m(&qs[0]), 0, &cfg);
        for (t, q) in qs.iter().enumerate().skip(1) {
            scene.apply_update(0, &m(q), t as u32, &cfg);
        }
        assert!((scene.instances[0].query[0] - 0.75).abs() < 1e-12);
        assert!((scene.instances[0].query[1] - 2.0).abs() < 1e-12);
        assert_eq!(scene.instances[0].n_obs, 4);
    }

    #[test]
    fn keys_are_voxel_deduplicated() {
        let cfg = FusionConfig::default();
        let o = obs(1, vec![1.0], vec![1.0], &[[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.5, 0.5, 0.5]]);
        let mut scene = SceneState::new();
        scene.register(&intra_merge(&[o], 0.8)[0], 0, &cfg);
        assert_eq!(scene.instances[0].keys.len(), 2);
    }
}
