//! Random priors and the pseudo-semantic sampler.
//!
//! A pseudo-semantic image is random prior noise plus the perturbation being
//! optimized, `x = z + delta`. The sampler then takes random square crops of
//! `x` and resizes each back to full resolution; those crops are the
//! semantic samples the attack trains on.

use crate::error::{Error, Result};
use crate::nn::InputSpec;
use crate::resample::ResamplePlan;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transform::TransformDescriptor;

/// How many times a crop is re-drawn before giving up on a degenerate window.
const CROP_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorSpec {
    /// Normal(mean, std), clamped to [0, 1].
    Gaussian { mean: f64, std: f64 },
    /// Uniform on [lo, hi], clamped to [0, 1].
    Uniform { lo: f64, hi: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Gaussian { mean: 0.5, std: 0.25 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Gaussian { mean, std } if mean.is_finite() && std >= 0.0 && std.is_finite() => Ok(()),
            PriorSpec::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            other => Err(Error::InvalidConfig(format!("invalid prior {other:?}"))),
        }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        let v = match *self {
            PriorSpec::Gaussian { mean, std } => rng.normal(mean, std),
            PriorSpec::Uniform { lo, hi } => rng.uniform(lo, hi),
        };
        v.clamp(0.0, 1.0)
    }
}

/// One prior image of shape `(c, h, w)`.
pub fn sample_prior(spec: &PriorSpec, input: InputSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let data = (0..input.numel()).map(|_| spec.draw(rng)).collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// `n` prior images stacked as `(n, c, h, w)`.
pub fn sample_prior_batch(spec: &PriorSpec, input: InputSpec, n: usize, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let data = (0..n * input.numel()).map(|_| spec.draw(rng)).collect();
    Tensor::new(input.batch_shape(n), data)
}

/// Pseudo-semantic image `z + delta`, unclamped.
pub fn make_psp(z: &Tensor, delta: &Tensor) -> Result<Tensor> {
    z.zip_map(delta, "make_psp", |a, b| a + b)
}

/// Square crop window in parent pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct SemanticBatch {
    /// Pseudo-semantic image the samples were cut from, `(c, h, w)`.
    pub parent: Tensor,
    /// Each `(c, h, w)`, resized to the parent's resolution.
    pub samples: Vec<Tensor>,
    pub crops: Vec<CropRect>,
    /// Per-sample input transform; `None` means identity.
    pub transforms: Vec<Option<TransformDescriptor>>,
    pub weights: Vec<f64>,
}

impl SemanticBatch {
    /// A batch whose samples are given directly (full-frame, no crop), e.g.
    /// raw prior images.
    pub fn from_samples(samples: Vec<Tensor>) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("semantic batch"))?.clone();
        let (h, w) = plane(&first)?;
        for s in &samples {
            first.expect_same_shape(s, "semantic batch")?;
        }
        let n = samples.len();
        Ok(Self {
            parent: first,
            samples,
            crops: vec![CropRect { top: 0, left: 0, size: h.min(w) }; n],
            transforms: vec![None; n],
            weights: vec![1.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples stacked into `(n, c, h, w)`.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::stack(&self.samples)
    }
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::ShapeMismatch { op: "sample_semantic", left: s.to_vec(), right: vec![0, 0, 0] }),
    }
}

/// Draw `n` semantic samples from pseudo-semantic image `x` (`(c, h, w)`).
///
/// Each crop is square with side `round(f * min(h, w))`, `f ~ U[lo, hi]`, at
/// a uniformly random position, then bilinearly resized back to `h x w`.
pub fn sample_semantic(x: &Tensor, n: usize, crop_range: (f64, f64), rng: &mut Rng) -> Result<SemanticBatch> {
    let (lo, hi) = crop_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid("sample_semantic", format!("crop range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
    }
    if n == 0 {
        return Err(Error::invalid("sample_semantic", "need at least one sample"));
    }
    let (h, w) = plane(x)?;
    let short = h.min(w);
    let mut samples = Vec::with_capacity(n);
    let mut crops = Vec::with_capacity(n);
    for _ in 0..n {
        let rect = draw_crop(h, w, short, lo, hi, rng)?;
        let plan = ResamplePlan::crop_resize(h, w, rect.top, rect.left, rect.size, rect.size, h, w)?;
        samples.push(plan.apply(x)?);
        crops.push(rect);
    }
    Ok(SemanticBatch { parent: x.clone(), samples, crops, transforms: vec![None; n], weights: vec![1.0; n] })
}

/// Random square crop; windows under 2x2 pixels are re-drawn.
pub fn draw_crop(h: usize, w: usize, short: usize, lo: f64, hi: f64, rng: &mut Rng) -> Result<CropRect> {
    for _ in 0..CROP_RETRIES {
        let frac = if lo == hi { lo } else { rng.uniform(lo, hi) };
        let size = ((frac * short as f64).round() as usize).min(short);
        if size < 2 {
            continue;
        }
        let top = rng.range(0, h - size + 1);
        let left = rng.range(0, w - size + 1);
        return Ok(CropRect { top, left, size });
    }
    Err(Error::invalid("sample_semantic", format!("crop range ({lo}, {hi}) keeps producing windows under 2x2 on a {h}x{w} image")))
}
