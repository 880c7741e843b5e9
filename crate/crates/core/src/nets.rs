use saq_autodiff::{Activation, Mlp, Tensor};

use crate::container::{Group, RAW_GROUP};
use crate::error::{Result, SaqError};

/// Affine map of raw states onto roughly `[-1, 1]` per dimension, fitted to
/// the data range. Not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Midpoint / half-range of each column, with the half-range floored.
    pub fn fit(rows: &Tensor) -> Self {
        let d = rows.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..rows.rows() {
            for (j, &v) in rows.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        if rows.rows() == 0 {
            return Self::identity(d);
        }
        Self {
            shift: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            scale: lo.iter().zip(&hi).map(|(a, b)| (0.5 * (b - a)).max(1e-3)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, rows: &Tensor) -> Tensor {
        let d = self.dim();
        let mut data = rows.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / c;
            }
        }
        Tensor::new(rows.shape().to_vec(), data).expect("normalized states stay finite")
    }

    pub fn to_tensors(&self) -> [Tensor; 2] {
        [Tensor::vector(self.shift.clone()), Tensor::vector(self.scale.clone())]
    }

    pub fn from_group(group: &Group) -> Result<Self> {
        if group.tag != RAW_GROUP || group.blocks.len() != 2 || group.blocks[0].shape() != group.blocks[1].shape() {
            return Err(SaqError::format(0, "malformed normalizer group"));
        }
        Ok(Self {
            shift: group.blocks[0].data().to_vec(),
            scale: group.blocks[1].data().to_vec(),
        })
    }
}

pub(crate) fn mlp_from_group(group: &Group) -> Result<Mlp> {
    let act = Activation::from_code(group.tag)
        .ok_or_else(|| SaqError::format(0, format!("unknown activation tag {}", group.tag)))?;
    Ok(Mlp::from_tensors(group.blocks.clone(), act)?)
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}
