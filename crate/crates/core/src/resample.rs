//! Fixed linear resampling maps on image planes.
//!
//! Resizing, cropping, rotation, scaling, block shuffling and padding are all
//! of the form `out[o] = bias[o] + sum_k w[o,k] * in[src[o,k]]` once their
//! parameters are fixed. A [`ResamplePlan`] stores that sparse map for one
//! `H x W` plane; it is applied to every plane of an `(.., H, W)` tensor and
//! its transpose gives the backward pass.
//!
//! Coordinates use pixel centres: pixel `(y, x)` sits at `(y, x)` and the
//! plane centre is `((h - 1) / 2, (w - 1) / 2)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// CSR row starts into `taps`, length `out_h * out_w + 1`.
    offsets: Vec<u32>,
    taps: Vec<(u32, f64)>,
    bias: Vec<f64>,
}

/// What a sample falling outside the source frame reads.
#[derive(Clone, Copy, Debug)]
enum Edge {
    /// Clamp to the nearest pixel inside `[y0, y1] x [x0, x1]`.
    Clamp { y0: usize, y1: usize, x0: usize, x1: usize },
    /// Read a constant.
    Fill(f64),
}

impl ResamplePlan {
    pub fn in_dims(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    fn build(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut each: impl FnMut(usize, usize, &mut Vec<(u32, f64)>) -> f64,
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_h * out_w + 1);
        let mut taps = Vec::with_capacity(out_h * out_w * 4);
        let mut bias = Vec::with_capacity(out_h * out_w);
        offsets.push(0);
        for oy in 0..out_h {
            for ox in 0..out_w {
                bias.push(each(oy, ox, &mut taps));
                offsets.push(taps.len() as u32);
            }
        }
        Self { in_h, in_w, out_h, out_w, offsets, taps, bias }
    }

    /// Bilinear sampling at source coordinates produced by `map`.
    fn bilinear(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        edge: Edge,
        map: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        Self::build(in_h, in_w, out_h, out_w, |oy, ox, taps| {
            let (sy, sx) = map(oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            let start = taps.len();
            let mut bias = 0.0;
            for (cy, cx, w) in corners {
                if w == 0.0 {
                    continue;
                }
                let src = match edge {
                    Edge::Clamp { y0, y1, x0, x1 } => {
                        let y = (cy.max(y0 as f64).min(y1 as f64)) as usize;
                        let x = (cx.max(x0 as f64).min(x1 as f64)) as usize;
                        Some(y * in_w + x)
                    }
                    Edge::Fill(_) => {
                        if cy < 0.0 || cx < 0.0 || cy > (in_h - 1) as f64 || cx > (in_w - 1) as f64 {
                            None
                        } else {
                            Some(cy as usize * in_w + cx as usize)
                        }
                    }
                };
                match (src, edge) {
                    (Some(s), _) => push_tap(taps, start, s as u32, w),
                    (None, Edge::Fill(v)) => bias += w * v,
                    (None, Edge::Clamp { .. }) => unreachable!(),
                }
            }
            bias
        })
    }

    /// Half-pixel-centre bilinear resize with edge clamping.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        Self::crop_resize(in_h, in_w, 0, 0, in_h, in_w, out_h, out_w)
    }

    /// Bilinear resize of the window `[top, top+crop_h) x [left, left+crop_w)`
    /// to `out_h x out_w`. Samples never leave the window, so outputs are
    /// convex combinations of window pixels.
    #[allow(clippy::too_many_arguments)]
    pub fn crop_resize(
        in_h: usize,
        in_w: usize,
        top: usize,
        left: usize,
        crop_h: usize,
        crop_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        if crop_h == 0 || crop_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("crop_resize", "zero-sized window"));
        }
        if top + crop_h > in_h || left + crop_w > in_w {
            return Err(Error::invalid(
                "crop_resize",
                format!("window {top}+{crop_h} x {left}+{crop_w} outside {in_h}x{in_w}"),
            ));
        }
        let sy = crop_h as f64 / out_h as f64;
        let sx = crop_w as f64 / out_w as f64;
        let edge = Edge::Clamp { y0: top, y1: top + crop_h - 1, x0: left, x1: left + crop_w - 1 };
        Ok(Self::bilinear(in_h, in_w, out_h, out_w, edge, |oy, ox| {
            (
                top as f64 + (oy as f64 + 0.5) * sy - 0.5,
                left as f64 + (ox as f64 + 0.5) * sx - 0.5,
            )
        }))
    }

    /// Rotation by `degrees` (counter-clockwise in image display) about the
    /// plane centre. Samples from outside the frame read `fill`.
    pub fn rotate(h: usize, w: usize, degrees: f64, fill: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        Self::bilinear(h, w, h, w, Edge::Fill(fill), |oy, ox| {
            let dy = oy as f64 - cy;
            let dx = ox as f64 - cx;
            // Inverse map: rotate the output offset by -degrees.
            (cy + c * dy + s * dx, cx + c * dx - s * dy)
        })
    }

    /// Zoom by `factor` about the centre at constant frame size: `factor > 1`
    /// magnifies and crops, `factor < 1` shrinks and surrounds with `fill`.
    pub fn scale(h: usize, w: usize, factor: f64, fill: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::invalid("scale", format!("factor must be positive, got {factor}")));
        }
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        Ok(Self::bilinear(h, w, h, w, Edge::Fill(fill), |oy, ox| {
            (cy + (oy as f64 - cy) / factor, cx + (ox as f64 - cx) / factor)
        }))
    }

    /// Rearrange an `m x m` grid of blocks: output block `b` (row-major)
    /// receives input block `perm[b]`.
    ///
    /// A plane whose sides are not multiples of `m` is conceptually padded
    /// with `fill` at the bottom/right to the next multiple, shuffled, and
    /// cropped back, so the result always has the input shape.
    pub fn shuffle(h: usize, w: usize, m: usize, perm: &[usize], fill: f64) -> Result<Self> {
        if m < 1 || perm.len() != m * m {
            return Err(Error::invalid("shuffle", format!("need {} block indices, got {}", m * m, perm.len())));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("shuffle", "block order is not a permutation"));
            }
        }
        let bh = h.div_ceil(m);
        let bw = w.div_ceil(m);
        Ok(Self::build(h, w, h, w, |oy, ox, taps| {
            let block = (oy / bh) * m + ox / bw;
            let src_block = perm[block];
            let sy = (src_block / m) * bh + oy % bh;
            let sx = (src_block % m) * bw + ox % bw;
            if sy < h && sx < w {
                taps.push(((sy * w + sx) as u32, 1.0));
                0.0
            } else {
                fill
            }
        }))
    }

    /// Constant border of `pad` pixels on every side.
    pub fn pad(h: usize, w: usize, pad: usize, fill: f64) -> Self {
        Self::build(h, w, h + 2 * pad, w + 2 * pad, |oy, ox, taps| {
            let inside = oy >= pad && ox >= pad && oy - pad < h && ox - pad < w;
            if inside {
                taps.push((((oy - pad) * w + (ox - pad)) as u32, 1.0));
                0.0
            } else {
                fill
            }
        })
    }

    /// Output pixels that read only from inside the frame (no fill term).
    pub fn in_frame_mask(&self) -> Vec<bool> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, &b)| b == 0.0 && self.offsets[o + 1] > self.offsets[o])
            .collect()
    }

    fn check(&self, shape: &[usize]) -> Result<usize> {
        let n = shape.len();
        if n < 2 || shape[n - 2] != self.in_h || shape[n - 1] != self.in_w {
            return Err(Error::ShapeMismatch {
                op: "resample",
                left: shape.to_vec(),
                right: vec![self.in_h, self.in_w],
            });
        }
        Ok(shape[..n - 2].iter().product())
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        let mut s = input[..input.len() - 2].to_vec();
        s.push(self.out_h);
        s.push(self.out_w);
        s
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let planes = self.check(input.shape())?;
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; planes * op];
        for p in 0..planes {
            let src = &input.data()[p * ip..(p + 1) * ip];
            let dst = &mut out[p * op..(p + 1) * op];
            for (o, d) in dst.iter_mut().enumerate() {
                let mut acc = self.bias[o];
                for &(s, w) in &self.taps[self.offsets[o] as usize..self.offsets[o + 1] as usize] {
                    acc += w * src[s as usize];
                }
                *d = acc;
            }
        }
        Tensor::new(self.output_shape(input.shape()), out)
    }

    /// Adjoint of the linear part: scatters output gradients back to inputs.
    pub(crate) fn backward_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let planes = grad_out.len() / op;
        for p in 0..planes {
            let g = &grad_out[p * op..(p + 1) * op];
            let gi = &mut grad_in[p * ip..(p + 1) * ip];
            for (o, &go) in g.iter().enumerate() {
                for &(s, w) in &self.taps[self.offsets[o] as usize..self.offsets[o + 1] as usize] {
                    gi[s as usize] += w * go;
                }
            }
        }
    }
}

fn push_tap(taps: &mut Vec<(u32, f64)>, start: usize, src: u32, w: f64) {
    // Clamped corners can coincide; merge them so each source appears once.
    if let Some(t) = taps[start..].iter_mut().find(|t| t.0 == src) {
        t.1 += w;
    } else {
        taps.push((src, w));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = ramp(7, 5);
        let y = ResamplePlan::resize(7, 5, 7, 5).unwrap().apply(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_rotation_and_unit_scale_are_identity() {
        let x = ramp(8, 8);
        assert_eq!(ResamplePlan::rotate(8, 8, 0.0, 0.5).apply(&x).unwrap(), x);
        assert_eq!(ResamplePlan::scale(8, 8, 1.0, 0.5).unwrap().apply(&x).unwrap(), x);
    }

    #[test]
    fn rotate_180_reverses_plane() {
        let x = ramp(4, 4);
        let y = ResamplePlan::rotate(4, 4, 180.0, 0.5).apply(&x).unwrap();
        let rev: Vec<f64> = x.data().iter().rev().copied().collect();
        for (a, b) in y.data().iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_90_moves_corner() {
        // A 90-degree turn maps the top-right corner to the top-left.
        let mut x = Tensor::zeros(&[1, 5, 5]);
        x.data_mut()[4] = 1.0;
        let y = ResamplePlan::rotate(5, 5, 90.0, 0.0).apply(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9, "{:?}", y.data());
    }

    #[test]
    fn downscale_pads_with_fill() {
        let x = Tensor::full(&[1, 8, 8], 1.0);
        let y = ResamplePlan::scale(8, 8, 0.5, 0.5).unwrap().apply(&x).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[3 * 8 + 3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crop_resize_of_constant_is_constant() {
        let x = Tensor::full(&[2, 10, 10], 0.37);
        let p = ResamplePlan::crop_resize(10, 10, 2, 3, 4, 4, 10, 10).unwrap();
        let y = p.apply(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn crop_window_must_fit() {
        assert!(ResamplePlan::crop_resize(10, 10, 8, 0, 4, 4, 10, 10).is_err());
    }

    #[test]
    fn shuffle_inverse_round_trip() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let perm = vec![2, 0, 3, 1];
        let mut inv = vec![0; 4];
        for (b, &p) in perm.iter().enumerate() {
            inv[p] = b;
        }
        let y = ResamplePlan::shuffle(8, 8, 2, &perm, 0.5).unwrap().apply(&x).unwrap();
        let back = ResamplePlan::shuffle(8, 8, 2, &inv, 0.5).unwrap().apply(&y).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn shuffle_non_divisible_keeps_shape() {
        let x = ramp(5, 7);
        let y = ResamplePlan::shuffle(5, 7, 2, &[3, 2, 1, 0], 0.5).unwrap().apply(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn shuffle_rejects_non_permutation() {
        assert!(ResamplePlan::shuffle(4, 4, 2, &[0, 0, 1, 2], 0.5).is_err());
    }

    #[test]
    fn pad_border() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let y = ResamplePlan::pad(2, 2, 1, 0.5).apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[5], 1.0);
    }
}
