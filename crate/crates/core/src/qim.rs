//! Query index memory: an append-only bank of refined queries plus a sparse
//! binary association between 3D spatial keys and queries. Projecting the
//! stored keys through the current pose yields, per patch, the historical
//! queries visible there.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::frame::{majority_downsample, FrameRecord, PatchMaskSet};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::prototype::Query;

/// Keys behind this depth (scene units) are culled during rasterization.
pub const Z_MIN: f64 = 1e-4;

/// A pooled 3D point anchoring queries to scene geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialKey {
    pub id: usize,
    pub p: Vec3,
    pub frame_t: u32,
    /// Cell index on the frame's key grid.
    pub cell: usize,
}

/// Append-only store of every refined query; ids are dense positions.
#[derive(Clone, Debug, Default)]
pub struct QueryBank {
    queries: Vec<Query>,
}

impl QueryBank {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Query> {
        self.queries.get(id)
    }

    pub fn push(&mut self, q: Query) -> usize {
        self.queries.push(q);
        self.queries.len() - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Query)> {
        self.queries.iter().enumerate()
    }
}

/// Sparse binary keys × queries matrix, stored both ways.
#[derive(Clone, Debug, Default)]
pub struct IndexMatrix {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

impl IndexMatrix {
    pub fn row(&self, key: usize) -> &[usize] {
        &self.rows[key]
    }

    pub fn col(&self, query: usize) -> &[usize] {
        self.cols.get(query).map_or(&[], |c| c.as_slice())
    }

    pub fn n_keys(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    fn ensure_cols(&mut self, n: usize) {
        if self.cols.len() < n {
            self.cols.resize(n, Vec::new());
        }
    }

    fn push_row(&mut self, queries: Vec<usize>) -> usize {
        let key = self.rows.len();
        for &q in &queries {
            self.ensure_cols(q + 1);
            self.cols[q].push(key);
        }
        self.rows.push(queries);
        key
    }

    /// Moves every entry of column `from` into column `to`.
    fn retarget(&mut self, from: usize, to: usize) {
        if from == to {
            return;
        }
        self.ensure_cols(from.max(to) + 1);
        let keys = std::mem::take(&mut self.cols[from]);
        for key in keys {
            let row = &mut self.rows[key];
            row.retain(|&q| q != from);
            if !row.contains(&to) {
                row.push(to);
                row.sort_unstable();
                self.cols[to].push(key);
            }
        }
    }
}

/// Per-patch sets of visible historical query ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterIndexMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted, deduplicated query ids per patch.
    pub cells: Vec<Vec<usize>>,
}

impl RasterIndexMap {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        RasterIndexMap { grid_h, grid_w, cells: vec![Vec::new(); grid_h * grid_w] }
    }

    /// Support mask: patches citing at least one query.
    pub fn support(&self) -> Vec<bool> {
        self.cells.iter().map(|c| !c.is_empty()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(Vec::is_empty)
    }
}

/// One key per `pool`×`pool` window: the mean of that window's pointmap.
/// Windows holding a non-finite point are skipped.
pub fn sample_keys(frame: &FrameRecord, pool: usize) -> Result<Vec<SpatialKey>> {
    if pool == 0 || frame.height % pool != 0 || frame.width % pool != 0 {
        return Err(Error::Precondition(format!(
            "pool window {pool} does not tile a {}x{} frame",
            frame.height, frame.width
        )));
    }
    let (gh, gw) = (frame.height / pool, frame.width / pool);
    let inv = 1.0 / (pool * pool) as f64;
    let mut keys = Vec::new();
    for gr in 0..gh {
        'cell: for gc in 0..gw {
            let mut acc = [0.0; 3];
            for r in gr * pool..(gr + 1) * pool {
                for c in gc * pool..(gc + 1) * pool {
                    let p = frame.point(r, c);
                    if !p.iter().all(|v| v.is_finite()) {
                        continue 'cell;
                    }
                    for a in 0..3 {
                        acc[a] += p[a];
                    }
                }
            }
            keys.push(SpatialKey {
                id: keys.len(),
                p: [acc[0] * inv, acc[1] * inv, acc[2] * inv],
                frame_t: frame.t,
                cell: gr * gw + gc,
            });
        }
    }
    Ok(keys)
}

/// Association rows for freshly sampled keys: key `i` links to the query of
/// the instance labelling its cell, if any.
pub fn associate(
    keys: &[SpatialKey],
    key_labels: &[u16],
    query_of_label: impl Fn(u16) -> Option<usize>,
) -> Vec<Vec<usize>> {
    keys.iter()
        .map(|k| match key_labels[k.cell] {
            0 => Vec::new(),
            l => query_of_label(l).into_iter().collect(),
        })
        .collect()
}

/// Camera-space depth of every pixel of a frame's pointmap.
pub fn depth_map(frame: &FrameRecord) -> Vec<f64> {
    let pose = frame.camera_pose();
    (0..frame.height * frame.width)
        .map(|i| pose.world_to_camera(frame.point(i / frame.width, i % frame.width))[2])
        .collect()
}

/// Image geometry a raster map is built against.
#[derive(Clone, Copy, Debug)]
pub struct RasterTarget<'a> {
    pub pose: &'a Pose,
    pub intrinsics: &'a Intrinsics,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Optional occlusion test: per-pixel depth and tolerance.
    pub occlusion: Option<(&'a [f64], f64)>,
}

impl<'a> RasterTarget<'a> {
    /// Patch cell a world point falls into, if visible.
    pub fn cell_of(&self, p: Vec3) -> Option<usize> {
        let pc = self.pose.world_to_camera(p);
        if pc[2] <= Z_MIN {
            return None;
        }
        let (u, v) = self.intrinsics.project(pc);
        if !(u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let (col, row) = (u.floor() as usize, v.floor() as usize);
        if let Some((depth, tau)) = self.occlusion {
            let surface = depth[row * self.width + col];
            if surface.is_finite() && pc[2] > surface + tau {
                return None;
            }
        }
        let gw = self.width / self.patch_size;
        Some((row / self.patch_size) * gw + col / self.patch_size)
    }
}

/// The query index memory.
#[derive(Clone, Debug, Default)]
pub struct QueryIndexMemory {
    pub bank: QueryBank,
    pub keys: Vec<SpatialKey>,
    pub index: IndexMatrix,
    pub max_bank: Option<usize>,
}

/// What one frame added to the memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryUpdate {
    /// Bank id of each refined query, aligned with the frame's instances.
    pub query_ids: Vec<usize>,
    /// Key ids associated with each query.
    pub keys_per_query: Vec<Vec<usize>>,
}

impl QueryIndexMemory {
    pub fn new(max_bank: Option<usize>) -> Self {
        QueryIndexMemory { max_bank, ..Default::default() }
    }

    pub fn key(&self, id: usize) -> &SpatialKey {
        &self.keys[id]
    }

    /// Appends a frame's refined queries and the keys they cover. Only keys
    /// with at least one association are stored.
    pub fn update(
        &mut self,
        frame: &FrameRecord,
        masks: &PatchMaskSet,
        refined: &[Query],
        pool: usize,
    ) -> Result<MemoryUpdate> {
        if refined.len() != masks.len() {
            return Err(Error::Precondition(format!(
                "{} queries for {} masks",
                refined.len(),
                masks.len()
            )));
        }
        if let Some(cap) = self.max_bank {
            if self.bank.len() + refined.len() > cap {
                return Err(Error::BankFull { cap });
            }
        }
        let query_ids: Vec<usize> = refined.iter().map(|q| self.bank.push(q.clone())).collect();
        self.index.ensure_cols(self.bank.len());

        let sampled = sample_keys(frame, pool)?;
        let key_labels = if pool == frame.patch_size {
            masks.patch_labels.clone()
        } else {
            majority_downsample(&frame.labels, frame.height, frame.width, pool)
        };
        let slot_of_label = |l: u16| masks.instances.iter().position(|inst| inst.label == l);
        let rows = associate(&sampled, &key_labels, |l| slot_of_label(l).map(|s| query_ids[s]));

        let mut keys_per_query = vec![Vec::new(); refined.len()];
        for (mut key, row) in sampled.into_iter().zip(rows) {
            if row.is_empty() {
                continue;
            }
            key.id = self.keys.len();
            for &q in &row {
                let slot = q - query_ids[0];
                keys_per_query[slot].push(key.id);
            }
            self.index.push_row(row);
            self.keys.push(key);
        }
        Ok(MemoryUpdate { query_ids, keys_per_query })
    }

    /// Points every association of query `from` at query `to`.
    pub fn retarget(&mut self, from: usize, to: usize) {
        self.index.retarget(from, to);
    }

    /// Projects every stored key into the target view.
    pub fn rasterize(&self, target: &RasterTarget<'_>) -> Result<RasterIndexMap> {
        let det = target.pose.determinant();
        if !det.is_finite() || det.abs() < 1e-9 {
            return Err(Error::Precondition(format!("pose is not invertible (det {det})")));
        }
        let (gh, gw) = (target.height / target.patch_size, target.width / target.patch_size);
        let mut raster = RasterIndexMap::empty(gh, gw);
        for key in &self.keys {
            let row = self.index.row(key.id);
            if row.is_empty() {
                continue;
            }
            if let Some(cell) = target.cell_of(key.p) {
                raster.cells[cell].extend_from_slice(row);
            }
        }
        for cell in &mut raster.cells {
            cell.sort_unstable();
            cell.dedup();
        }
        Ok(raster)
    }

    /// Debug dump: one `key_id,x,y,z,query_id` line per association.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "key_id,x,y,z,frame,query_id")?;
        for key in &self.keys {
            for q in self.index.row(key.id) {
                writeln!(out, "{},{},{},{},{},{}", key.id, key.p[0], key.p[1], key.p[2], key.frame_t, q)?;
            }
        }
        Ok(())
    }
}

/// Distinct query ids cited anywhere in the raster map, ascending, resolved against the bank.
pub fn retrieve_ctx(raster: &RasterIndexMap, bank: &QueryBank) -> Result<Vec<(usize, Query)>> {
    let ids: BTreeSet<usize> = raster.cells.iter().flatten().copied().collect();
    ids.into_iter()
        .map(|id| {
            bank.get(id)
                .map(|q| (id, q.clone()))
                .ok_or_else(|| Error::Consistency(format!("raster map cites unknown query {id}")))
        })
        .collect()
}

/// Per-patch mean of the cited queries (zero where nothing is cited) and the support mask.
pub fn ctx_feature_map(raster: &RasterIndexMap, bank: &QueryBank, d: usize) -> Result<(Array2<f64>, Vec<bool>)> {
    let mut f = Array2::zeros((raster.cells.len(), d));
    for (p, cell) in raster.cells.iter().enumerate() {
        if cell.is_empty() {
            continue;
        }
        let mut row = f.row_mut(p);
        for &id in cell {
            let q = bank
                .get(id)
                .ok_or_else(|| Error::Consistency(format!("raster map cites unknown query {id}")))?;
            if q.v.len() != d {
                return Err(Error::Consistency(format!("query {id} has dimension {}", q.v.len())));
            }
            for (o, v) in row.iter_mut().zip(&q.v) {
                *o += v;
            }
        }
        row.mapv_inplace(|v| v / cell.len() as f64);
    }
    Ok((f, raster.support()))
}

/// Everything the memory contributes to one incoming frame.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub raster: RasterIndexMap,
    /// Retrieved `(query_id, query)` pairs, ascending by id.
    pub ctx: Vec<(usize, Query)>,
    pub features: Array2<f64>,
    pub support: Vec<bool>,
}

impl FrameContext {
    pub fn ctx_matrix(&self, d: usize) -> Option<Array2<f64>> {
        if self.ctx.is_empty() {
            return None;
        }
        let mut m = Array2::zeros((self.ctx.len(), d));
        for (i, (_, q)) in self.ctx.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&q.v));
        }
        Some(m)
    }
}

/// Rasterizes the memory into `frame`'s view and gathers the context. With
/// `occlusion_tau` set, keys behind the frame's own surface by more than the
/// tolerance are culled.
pub fn gather_context(
    memory: &QueryIndexMemory,
    frame: &FrameRecord,
    d: usize,
    occlusion_tau: Option<f64>,
) -> Result<FrameContext> {
    let pose = frame.camera_pose();
    let intrinsics = frame.camera();
    let depth = occlusion_tau.map(|_| depth_map(frame));
    let target = RasterTarget {
        pose: &pose,
        intrinsics: &intrinsics,
        height: frame.height,
        width: frame.width,
        patch_size: frame.patch_size,
        occlusion: depth.as_deref().zip(occlusion_tau),
    };
    let raster = memory.rasterize(&target)?;
    let ctx = retrieve_ctx(&raster, &memory.bank)?;
    let (features, support) = ctx_feature_map(&raster, &memory.bank, d)?;
    Ok(FrameContext { raster, ctx, features, support })
}
