//! Lifting 2D instance masks into prototype queries: masked average pooling
//! over the concatenated feature map followed by the affine projection η.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::frame::{FrameRecord, PatchMaskSet};
use crate::model::Linear;
use crate::tape::{Tape, Var};

/// A per-instance query vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub v: Vec<f64>,
    /// Label of the source mask within its frame.
    pub instance_local_id: u16,
    pub frame_t: u32,
}

impl Query {
    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Patch-resolution features `[F2d, F3d]`, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d2: usize,
    pub d3: usize,
    /// `(h*w) × (d2+d3)`.
    pub data: Array2<f64>,
}

impl ConcatFeatureMap {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.d2 + self.d3
    }

    pub fn patch(&self, p: usize) -> ArrayView1<'_, f64> {
        self.data.row(p)
    }

    /// The F2d block alone.
    pub fn semantic(&self) -> Array2<f64> {
        self.data.slice(ndarray::s![.., ..self.d2]).to_owned()
    }

    /// The F3d block alone.
    pub fn geometric(&self) -> Array2<f64> {
        self.data.slice(ndarray::s![.., self.d2..]).to_owned()
    }
}

/// Concatenates semantic then geometric channels per patch.
pub fn concat_features(frame: &FrameRecord) -> ConcatFeatureMap {
    let n = frame.n_patches();
    let (d2, d3) = (frame.d2, frame.d3);
    let data = Array2::from_shape_fn((n, d2 + d3), |(p, c)| {
        if c < d2 {
            frame.feat2d[p * d2 + c] as f64
        } else {
            frame.feat3d[p * d3 + c - d2] as f64
        }
    });
    ConcatFeatureMap { grid_h: frame.grid_h(), grid_w: frame.grid_w(), d2, d3, data }
}

/// Mean feature over the given patches (the pre-projection prototype).
pub fn mask_average(features: &ConcatFeatureMap, patches: &[usize]) -> Result<Array1<f64>> {
    if patches.is_empty() {
        return Err(Error::Precondition("cannot pool over an empty mask".into()));
    }
    let mut acc = Array1::zeros(features.channels());
    for &p in patches {
        acc += &features.patch(p);
    }
    Ok(acc / patches.len() as f64)
}

/// Row `i` averages the patches of instance `i`; multiplying it into the
/// feature map pools every instance at once.
pub fn pooling_matrix(masks: &PatchMaskSet) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((masks.len(), masks.n_patches()));
    for (i, inst) in masks.instances.iter().enumerate() {
        if inst.patches.is_empty() {
            return Err(Error::Precondition(format!("instance {} has an empty patch mask", inst.label)));
        }
        let w = 1.0 / inst.patches.len() as f64;
        for &p in &inst.patches {
            m[[i, p]] = w;
        }
    }
    Ok(m)
}

/// `x·w + b` on the tape.
pub fn linear(tape: &mut Tape, lin: &Linear<Var>, x: Var) -> Var {
    let y = tape.matmul(x, lin.w);
    tape.add_row(y, lin.b)
}

pub fn apply_linear(lin: &Linear<Array2<f64>>, x: ArrayView1<'_, f64>) -> Array1<f64> {
    x.dot(&lin.w) + lin.b.row(0)
}

/// Prototype query of one mask: η applied to the masked feature mean.
pub fn lift_prototype(
    features: &ConcatFeatureMap,
    patches: &[usize],
    eta: &Linear<Array2<f64>>,
) -> Result<Array1<f64>> {
    let pooled = mask_average(features, patches)?;
    Ok(apply_linear(eta, pooled.view()))
}

/// Prototypes for every instance of a frame.
pub fn lift_all(
    features: &ConcatFeatureMap,
    masks: &PatchMaskSet,
    eta: &Linear<Array2<f64>>,
    frame_t: u32,
) -> Result<Vec<Query>> {
    masks
        .instances
        .iter()
        .map(|inst| {
            Ok(Query {
                v: lift_prototype(features, &inst.patches, eta)?.to_vec(),
                instance_local_id: inst.label,
                frame_t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map_from(data: Array2<f64>, d2: usize) -> ConcatFeatureMap {
        let d3 = data.ncols() - d2;
        ConcatFeatureMap { grid_h: 1, grid_w: data.nrows(), d2, d3, data }
    }

    fn identity_eta(dim: usize) -> Linear<Array2<f64>> {
        Linear { w: Array2::eye(dim), b: Array2::zeros((1, dim)) }
    }

    #[test]
    fn concat_order_is_semantic_then_geometric() {
        let mut frame = crate::frame::tests::blank_frame(16, 32, 16);
        frame.feat2d = vec![1.0, 2.0, 3.0, 4.0];
        frame.feat3d = vec![0.0; 6];
        let f = concat_features(&frame);
        assert_eq!(f.channels(), 5);
        assert_eq!(f.data.row(1).to_vec(), vec![3.0, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = map_from(Array2::from_elem((4, 3), 0.7), 1);
        let q = lift_prototype(&f, &[0, 2, 3], &identity_eta(3)).unwrap();
        assert!(q.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn two_patch_mean() {
        let f = map_from(array![[1.0, 2.0], [3.0, 6.0], [9.0, 9.0]], 1);
        let q = lift_prototype(&f, &[0, 1], &identity_eta(2)).unwrap();
        assert_eq!(q.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn empty_mask_is_precondition_error() {
        let f = map_from(Array2::zeros((2, 2)), 1);
        assert!(matches!(lift_prototype(&f, &[], &identity_eta(2)), Err(Error::Precondition(_))));
    }
}
