//! Desk-scale datasets: procedural shapes and IDX files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::InputSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of procedural shape families.
pub const SHAPE_FAMILIES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    input: InputSpec,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch { op: "dataset", left: s.to_vec(), right: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside 0..{classes}")));
        }
        let input = InputSpec::new(s[1], s[2], s[3]);
        Ok(Self { images, labels, classes, input })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.input.numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(self.input.batch_shape(indices.len()), data).expect("sized"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset { images, labels, classes: self.classes, input: self.input }
    }

    /// Seeded partition into train/val/test; test takes the remainder.
    pub fn split(&self, train_frac: f64, val_frac: f64, rng: &mut Rng) -> Result<Splits> {
        if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) || train_frac + val_frac > 1.0 {
            return Err(Error::invalid("split", format!("fractions {train_frac} + {val_frac} exceed 1")));
        }
        let n = self.len();
        let order = rng.permutation(n);
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        Ok(Splits {
            train: self.subset(&order[..n_train]),
            val: self.subset(&order[n_train..n_train + n_val]),
            test: self.subset(&order[n_train + n_val..]),
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Procedurally generated shapes, one family per class: disk, square,
/// triangle, cross, ring, horizontal/vertical/diagonal stripes, soft blob and
/// checkerboard. Each image draws its own position, size, rotation,
/// intensities and pixel noise. Labels are balanced to within one.
pub fn gen_shapes(n: usize, classes: usize, input: InputSpec, rng: &mut Rng) -> Result<Dataset> {
    if classes < 2 || classes > SHAPE_FAMILIES {
        return Err(Error::invalid("gen_shapes", format!("class count must be in 2..={SHAPE_FAMILIES}, got {classes}")));
    }
    if n < classes {
        return Err(Error::invalid("gen_shapes", format!("n = {n} is smaller than class count {classes}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let per = input.numel();
    let mut data = Vec::with_capacity(n * per);
    for &label in &labels {
        render_shape(label, input, rng, &mut data);
    }
    Dataset::new(Tensor::new(input.batch_shape(n), data)?, labels, classes)
}

struct ShapeParams {
    cy: f64,
    cx: f64,
    radius: f64,
    cos: f64,
    sin: f64,
    period: f64,
    phase: f64,
}

fn render_shape(family: usize, input: InputSpec, rng: &mut Rng, out: &mut Vec<f64>) {
    let (h, w) = (input.height as f64, input.width as f64);
    let side = h.min(w);
    let angle = match family {
        // Stripes keep their orientation up to a small jitter.
        5 => rng.uniform(-10.0, 10.0),
        6 => 90.0 + rng.uniform(-10.0, 10.0),
        7 => 45.0 + rng.uniform(-10.0, 10.0),
        9 => rng.uniform(-15.0, 15.0),
        _ => rng.uniform(0.0, 360.0),
    }
    .to_radians();
    let p = ShapeParams {
        cy: h * rng.uniform(0.35, 0.65),
        cx: w * rng.uniform(0.35, 0.65),
        radius: side * rng.uniform(0.2, 0.32),
        cos: angle.cos(),
        sin: angle.sin(),
        period: side * rng.uniform(0.16, 0.28),
        phase: rng.uniform(0.0, 1.0),
    };
    let background = rng.uniform(0.15, 0.45);
    let contrast = rng.uniform(0.3, 0.5);
    let noise = rng.uniform(0.01, 0.04);
    let tints: Vec<f64> = (0..input.channels)
        .map(|_| if input.channels == 1 { 1.0 } else { rng.uniform(0.6, 1.0) })
        .collect();

    let mut mask = vec![0.0; input.height * input.width];
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..input.height {
        for x in 0..input.width {
            let mut acc = 0.0;
            for sy in SUB {
                for sx in SUB {
                    acc += coverage(family, &p, y as f64 + sy, x as f64 + sx);
                }
            }
            mask[y * input.width + x] = acc / 4.0;
        }
    }
    for tint in tints {
        for &m in &mask {
            let v = (background + contrast * m) * tint + rng.normal(0.0, noise);
            out.push(v.clamp(0.0, 1.0));
        }
    }
}

/// Foreground coverage in `[0, 1]` at a sub-pixel location.
fn coverage(family: usize, p: &ShapeParams, y: f64, x: f64) -> f64 {
    let (dy, dx) = (y - p.cy, x - p.cx);
    // Shape-local coordinates.
    let u = p.cos * dx + p.sin * dy;
    let v = -p.sin * dx + p.cos * dy;
    let r = p.radius;
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match family {
        0 => inside(u * u + v * v < r * r),
        1 => inside(u.abs().max(v.abs()) < 0.8 * r),
        2 => {
            // Equilateral triangle with circumradius r.
            let half = 0.5 * r;
            let edge = |nx: f64, ny: f64| nx * u + ny * v < half;
            let s3 = 3f64.sqrt() / 2.0;
            inside(edge(0.0, 1.0) && edge(s3, -0.5) && edge(-s3, -0.5))
        }
        3 => {
            let arm = r / 3.0;
            inside((u.abs() < r && v.abs() < arm) || (v.abs() < r && u.abs() < arm))
        }
        4 => {
            let d2 = u * u + v * v;
            inside(d2 < r * r && d2 > 0.36 * r * r)
        }
        // Stripes: orientation lives in (u, v); use the absolute position so
        // the pattern fills the frame.
        5..=7 => {
            let t = (p.cos * y - p.sin * x) / p.period + p.phase;
            inside(t - t.floor() < 0.5)
        }
        8 => (-(u * u + v * v) / (2.0 * (0.6 * r).powi(2))).exp(),
        _ => {
            let a = ((p.cos * x + p.sin * y) / p.period + p.phase).floor() as i64;
            let b = ((-p.sin * x + p.cos * y) / p.period + p.phase).floor() as i64;
            inside((a + b).rem_euclid(2) == 0)
        }
    }
}

/// Load a standard IDX image/label pair (ubyte payloads). Pixels map
/// `byte / 255`. The class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (img_dims, img_body) = parse_idx(&img, IDX_IMAGES_MAGIC, 3)?;
    let (lab_dims, lab_body) = parse_idx(&lab, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if n != lab_dims[0] {
        return Err(Error::IdxCountMismatch { images: n, labels: lab_dims[0] });
    }
    let labels: Vec<usize> = lab_body.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    let pixels = img_body.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, classes)
}

fn parse_idx(bytes: &[u8], magic: u32, ndim: usize) -> Result<(Vec<usize>, &[u8])> {
    let corrupt = |msg: String| Error::invalid("load_idx", msg);
    if bytes.len() < 4 {
        return Err(corrupt("file shorter than the magic number".into()));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::BadIdxMagic { found, expected: magic });
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(corrupt("truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let body = &bytes[header..];
    let want: usize = dims.iter().product();
    if body.len() != want {
        return Err(corrupt(format!("payload is {} bytes, header declares {want}", body.len())));
    }
    Ok((dims, body))
}

/// Write a dataset as an IDX pair, quantizing pixels to bytes. Single-channel only.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let spec = ds.input_spec();
    if spec.channels != 1 {
        return Err(Error::invalid("save_idx", "IDX export supports one channel"));
    }
    let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [ds.len(), spec.height, spec.width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images().data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: InputSpec = InputSpec::new(1, 32, 32);

    #[test]
    fn shapes_deterministic_and_balanced() {
        let a = gen_shapes(1000, 10, SPEC, &mut Rng::new(7)).unwrap();
        let b = gen_shapes(1000, 10, SPEC, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        let h = a.class_histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        assert!(a.images().min() >= 0.0 && a.images().max() <= 1.0);
    }

    #[test]
    fn shapes_uneven_balance() {
        let d = gen_shapes(23, 4, SPEC, &mut Rng::new(1)).unwrap();
        let h = d.class_histogram();
        assert_eq!(h.iter().sum::<usize>(), 23);
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn shapes_rejects_too_few() {
        assert!(gen_shapes(5, 10, SPEC, &mut Rng::new(1)).is_err());
        assert!(gen_shapes(50, 11, SPEC, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn shapes_multichannel() {
        let d = gen_shapes(20, 10, InputSpec::new(3, 16, 16), &mut Rng::new(2)).unwrap();
        assert_eq!(d.images().shape(), &[20, 3, 16, 16]);
    }

    #[test]
    fn split_is_partition() {
        let d = gen_shapes(101, 10, InputSpec::new(1, 8, 8), &mut Rng::new(3)).unwrap();
        let s = d.split(0.7, 0.1, &mut Rng::new(4)).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 101);
        let s2 = d.split(0.7, 0.1, &mut Rng::new(4)).unwrap();
        assert_eq!(s.test, s2.test);
        // Disjointness: every image of the original appears exactly once.
        let per = 64;
        let mut all: Vec<Vec<u64>> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|ds| ds.images().data().chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut orig: Vec<Vec<u64>> =
            d.images().data().chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    fn fixture(dir: &Path, n_img: u32, n_lab: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n_img, 2, 3] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n_img * 6).map(|i| if i == 0 { 255 } else { (i * 10) as u8 }));
        img[16] = 255;
        img[17] = 0;
        let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&n_lab.to_be_bytes());
        lab.extend((0..n_lab).map(|i| (i % 3) as u8));
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 4, 4);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images().shape(), &[4, 1, 2, 3]);
        assert_eq!(d.labels().len(), 4);
        assert_eq!(d.images().data()[0], 1.0);
        assert_eq!(d.images().data()[1], 0.0);
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 4, 3);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::IdxCountMismatch { images: 4, labels: 3 })));
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 4, 4);
        // Swapped files: each has the other's magic.
        assert!(matches!(load_idx(&lp, &ip), Err(Error::BadIdxMagic { .. })));
    }

    #[test]
    fn idx_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes(12, 3, InputSpec::new(1, 6, 6), &mut Rng::new(5)).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        save_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert!(back.images().max_abs_diff(d.images()) <= 0.5 / 255.0 + 1e-12);
    }
}
