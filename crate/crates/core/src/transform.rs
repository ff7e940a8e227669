//! Random input transformations: rotation, scaling and block shuffle.
//!
//! A [`TransformDescriptor`] is drawn once and can then be applied to any
//! number of tensors, so a clean sample and its perturbed counterpart see the
//! exact same transform. Every transform is a fixed linear resampling map
//! given its descriptor, which makes it differentiable.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::ResamplePlan;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Value read by samples that fall outside the frame.
pub const FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Rotation,
    Scaling,
    Shuffle,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransformDescriptor {
    Rotation { degrees: f64 },
    Scaling { factor: f64 },
    /// Output block `b` of the `grid x grid` layout takes input block `order[b]`.
    Shuffle { grid: usize, order: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    /// Rotation angles are truncated to `[-max_degrees, max_degrees]`.
    pub max_degrees: f64,
    /// Standard deviation of the rotation angle before truncation.
    pub rotation_std: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub grid: usize,
}

/// Scaling tops out at 1.5x: on a 32-pixel frame a 4x zoom keeps only the
/// central 8x8 block of the perturbation. [`TransformParams::large_input`]
/// has the wider range meant for full-size images.
impl Default for TransformParams {
    fn default() -> Self {
        Self { scale_high: 1.5, ..Self::large_input() }
    }
}

impl TransformParams {
    pub fn large_input() -> Self {
        Self { max_degrees: 6.0, rotation_std: 3.0, scale_low: 0.8, scale_high: 4.0, grid: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_degrees > 0.0
            && self.rotation_std > 0.0
            && self.scale_low > 0.0
            && self.scale_low <= self.scale_high
            && self.grid >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid transform parameters {self:?}")))
        }
    }
}

impl TransformDescriptor {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformDescriptor::Rotation { .. } => TransformKind::Rotation,
            TransformDescriptor::Scaling { .. } => TransformKind::Scaling,
            TransformDescriptor::Shuffle { .. } => TransformKind::Shuffle,
        }
    }

    /// Resampling map for an `h x w` plane.
    pub fn plan(&self, h: usize, w: usize) -> Result<ResamplePlan> {
        match self {
            TransformDescriptor::Rotation { degrees } => Ok(ResamplePlan::rotate(h, w, *degrees, FILL)),
            TransformDescriptor::Scaling { factor } => ResamplePlan::scale(h, w, *factor, FILL),
            TransformDescriptor::Shuffle { grid, order } => ResamplePlan::shuffle(h, w, *grid, order, FILL),
        }
    }

    /// Apply to a `(.., h, w)` tensor.
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let (h, w) = plane_dims(img.shape())?;
        self.plan(h, w)?.apply(img)
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (h, w) = plane_dims(tape.value(x).shape())?;
        tape.resample(x, Arc::new(self.plan(h, w)?))
    }

    /// Inverse block order for shuffles; `None` for the resampling kinds.
    pub fn inverse(&self) -> Option<TransformDescriptor> {
        match self {
            TransformDescriptor::Shuffle { grid, order } => {
                let mut inv = vec![0; order.len()];
                for (b, &src) in order.iter().enumerate() {
                    inv[src] = b;
                }
                Some(TransformDescriptor::Shuffle { grid: *grid, order: inv })
            }
            _ => None,
        }
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    let n = shape.len();
    if n < 2 {
        return Err(Error::ShapeMismatch { op: "transform", left: shape.to_vec(), right: vec![0, 0] });
    }
    Ok((shape[n - 2], shape[n - 1]))
}

/// Pick one of the three kinds uniformly, then its parameter: a truncated
/// normal angle, a uniform scale factor, or a uniform block permutation.
pub fn sample_transform(rng: &mut Rng, params: &TransformParams) -> Result<TransformDescriptor> {
    params.validate()?;
    Ok(match rng.range(0, 3) {
        0 => TransformDescriptor::Rotation {
            degrees: rng.truncated_normal(0.0, params.rotation_std, -params.max_degrees, params.max_degrees),
        },
        1 => TransformDescriptor::Scaling { factor: rng.uniform(params.scale_low, params.scale_high) },
        _ => TransformDescriptor::Shuffle { grid: params.grid, order: rng.permutation(params.grid * params.grid) },
    })
}
