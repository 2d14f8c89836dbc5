//! Union point cloud, instance predictions and class-agnostic average precision.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameRecord;
use crate::geometry::voxel_key;

/// Accumulates per-pixel instance votes into voxels across frames.
#[derive(Clone, Debug)]
pub struct CloudAccumulator {
    voxel: f64,
    votes: HashMap<[i64; 3], BTreeMap<usize, u32>>,
}

impl CloudAccumulator {
    pub fn new(voxel: f64) -> Self {
        CloudAccumulator { voxel, votes: HashMap::new() }
    }

    /// Adds every finite pixel of `frame`; `label_of(pixel)` returns the
    /// pixel's instance, 0 for none.
    pub fn add_frame(&mut self, frame: &FrameRecord, label_of: impl Fn(usize) -> usize) {
        for i in 0..frame.height * frame.width {
            let p = frame.point(i / frame.width, i % frame.width);
            if !p.iter().all(|v| v.is_finite()) {
                continue;
            }
            let cell = self.votes.entry(voxel_key(p, self.voxel)).or_default();
            let l = label_of(i);
            if l != 0 {
                *cell.entry(l).or_insert(0) += 1;
            }
        }
    }

    /// Resolves votes: each voxel takes the instance with most votes (lowest id
    /// on ties), or 0 when no instance voted. Points are ordered by voxel.
    pub fn finish(self) -> VoxelCloud {
        let mut cells: Vec<([i64; 3], usize)> = self
            .votes
            .into_iter()
            .map(|(k, v)| {
                let mut best = (0usize, 0u32);
                for (l, c) in v {
                    if c > best.1 {
                        best = (l, c);
                    }
                }
                (k, best.0)
            })
            .collect();
        cells.sort_unstable_by_key(|c| c.0);
        VoxelCloud {
            voxel: self.voxel,
            keys: cells.iter().map(|c| c.0).collect(),
            labels: cells.iter().map(|c| c.1).collect(),
        }
    }
}

/// Voxelized union cloud with one label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCloud {
    pub voxel: f64,
    pub keys: Vec<[i64; 3]>,
    pub labels: Vec<usize>,
}

impl VoxelCloud {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Point ids per nonzero label.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                g.entry(l).or_default().push(i);
            }
        }
        g
    }

    pub fn into_ground_truth(self) -> GroundTruth {
        GroundTruth { cloud: self }
    }
}

/// Ground-truth labelling of the union cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub cloud: VoxelCloud,
}

impl GroundTruth {
    pub fn instances(&self) -> BTreeMap<usize, Vec<usize>> {
        self.cloud.groups()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# voxel={}", self.cloud.voxel)?;
        writeln!(out, "point_id,vx,vy,vz,instance")?;
        for (i, (k, l)) in self.cloud.keys.iter().zip(&self.cloud.labels).enumerate() {
            writeln!(out, "{i},{},{},{},{l}", k[0], k[1], k[2])?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut voxel = None;
        let mut keys = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if let Some(v) = line.strip_prefix("# voxel=") {
                voxel = Some(v.trim().parse::<f64>().map_err(|e| Error::Format(format!("voxel size: {e}")))?);
                continue;
            }
            if line.is_empty() || line.starts_with('#') || line.starts_with("point_id") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("ground truth line {}: `{line}`", n + 1));
            if f.len() != 5 || f[0].parse::<usize>().ok() != Some(keys.len()) {
                return Err(bad());
            }
            let k = [f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?];
            keys.push(k);
            labels.push(f[4].parse().map_err(|_| bad())?);
        }
        let voxel = voxel.ok_or_else(|| Error::Format("ground truth lacks a voxel header".into()))?;
        Ok(GroundTruth { cloud: VoxelCloud { voxel, keys, labels } })
    }
}

/// One predicted instance over the union cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub instance_id: usize,
    /// Sorted point ids.
    pub points: Vec<usize>,
    pub confidence: f64,
}

/// Observation count with the point count as a fractional tie-break.
pub fn confidence(n_obs: usize, n_points: usize) -> f64 {
    n_obs as f64 + n_points as f64 / (n_points as f64 + 1.0)
}

pub fn write_predictions<W: Write>(mut out: W, preds: &[InstancePrediction]) -> Result<()> {
    writeln!(out, "instance_id,confidence,n_points,point_ids")?;
    for p in preds {
        let ids: Vec<String> = p.points.iter().map(|i| i.to_string()).collect();
        writeln!(out, "{},{},{},{}", p.instance_id, p.confidence, p.points.len(), ids.join(" "))?;
    }
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<InstancePrediction>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("prediction line {}", n + 1));
        let f: Vec<&str> = line.splitn(4, ',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let points: Vec<usize> = f[3]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if f[2].parse::<usize>().ok() != Some(points.len()) {
            return Err(bad());
        }
        out.push(InstancePrediction {
            instance_id: f[0].parse().map_err(|_| bad())?,
            confidence: f[1].parse().map_err(|_| bad())?,
            points,
        });
    }
    Ok(out)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

fn iou_sorted(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average precision at one IoU threshold from a `preds × gt` IoU table.
/// `order` lists prediction indices by descending confidence.
pub fn ap_at(ious: &[Vec<f64>], order: &[usize], n_gt: usize, threshold: f64) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut matched = vec![false; n_gt];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let best = (0..n_gt)
            .filter(|&g| !matched[g])
            .map(|g| (g, ious[p][g]))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= threshold {
                matched[g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // all-point interpolation
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (r, _) = curve[i];
        if r > prev_recall {
            let p_max = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

/// Prediction indices by descending confidence, ties by instance id.
pub fn confidence_order(preds: &[InstancePrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(preds[a].instance_id.cmp(&preds[b].instance_id))
    });
    order
}

pub fn average_precision(preds: &[InstancePrediction], gt: &GroundTruth) -> Result<ApReport> {
    let gt_sets: Vec<Vec<usize>> = gt.instances().into_values().collect();
    if gt_sets.is_empty() {
        return Err(Error::Precondition("ground truth has no instances".into()));
    }
    let mut sorted: Vec<Vec<usize>> = preds.iter().map(|p| p.points.clone()).collect();
    for s in &mut sorted {
        s.sort_unstable();
        s.dedup();
    }
    let ious: Vec<Vec<f64>> = sorted.iter().map(|p| gt_sets.iter().map(|g| iou_sorted(p, g)).collect()).collect();
    Ok(ap_from_ious(&ious, &confidence_order(preds), gt_sets.len()))
}

pub fn ap_from_ious(ious: &[Vec<f64>], order: &[usize], n_gt: usize) -> ApReport {
    let per_threshold: Vec<(f64, f64)> = ap_thresholds().into_iter().map(|t| (t, ap_at(ious, order, n_gt, t))).collect();
    ApReport {
        ap: per_threshold.iter().map(|x| x.1).sum::<f64>() / per_threshold.len() as f64,
        ap50: ap_at(ious, order, n_gt, 0.5),
        ap25: ap_at(ious, order, n_gt, 0.25),
        per_threshold,
    }
}

/// Best IoU of every ground-truth instance against any prediction.
pub fn per_instance_report<W: Write>(mut out: W, preds: &[InstancePrediction], gt: &GroundTruth) -> Result<()> {
    writeln!(out, "gt_instance,n_points,best_prediction,best_iou")?;
    for (id, g) in gt.instances() {
        let best = preds
            .iter()
            .map(|p| {
                let mut s = p.points.clone();
                s.sort_unstable();
                (p.instance_id, iou_sorted(&s, &g))
            })
            .fold((usize::MAX, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let who = if best.0 == usize::MAX { String::new() } else { best.0.to_string() };
        writeln!(out, "{id},{},{who},{}", g.len(), best.1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(labels: Vec<usize>) -> GroundTruth {
        let keys = (0..labels.len() as i64).map(|i| [i, 0, 0]).collect();
        GroundTruth { cloud: VoxelCloud { voxel: 0.05, keys, labels } }
    }

    fn pred(id: usize, points: Vec<usize>, confidence: f64) -> InstancePrediction {
        InstancePrediction { instance_id: id, points, confidence }
    }

    #[test]
    fn perfect_predictions() {
        let gt = cloud(vec![1, 1, 2, 2, 0]);
        let preds = vec![pred(0, vec![0, 1], 2.0), pred(1, vec![2, 3], 1.0)];
        let r = average_precision(&preds, &gt).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap25), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_and_empty_gt() {
        let r = average_precision(&[], &cloud(vec![1])).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap25), (0.0, 0.0, 0.0));
        assert!(average_precision(&[], &cloud(vec![0, 0])).is_err());
    }

    #[test]
    fn hand_enumerated_curve() {
        let ious = vec![vec![0.6, 0.0], vec![0.3, 0.0], vec![0.0, 0.9]];
        let r = ap_from_ious(&ious, &[0, 1, 2], 2);
        assert!((r.ap50 - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.ap25 - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.ap - 0.35).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips() {
        let gt = cloud(vec![1, 0, 2]);
        let mut buf = Vec::new();
        gt.write_csv(&mut buf).unwrap();
        assert_eq!(GroundTruth::read_csv(buf.as_slice()).unwrap(), gt);
        let preds = vec![pred(3, vec![0, 2], 2.5), pred(4, vec![], 1.0)];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), preds);
    }
}
