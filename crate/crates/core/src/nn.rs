//! Toy convolutional classifiers with per-conv-layer activation taps.
//!
//! Four fixed architectures (`tiny-a` .. `tiny-d`) share one input spec and
//! differ in depth (2 to 5 conv layers), width and pooling, so a single
//! perturbation can be evaluated across all of them.
//!
//! Every conv block is `conv3x3(pad 1) -> relu -> [pool]`. The activation tap
//! of a block is its relu output, before pooling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Inference batches larger than this are evaluated in chunks.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        vec![n, self.channels, self.height, self.width]
    }
}

impl fmt::Display for InputSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    TinyA,
    TinyB,
    TinyC,
    TinyD,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    None,
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Conv { out: usize, pool: Pool },
    Dense { out: usize, relu: bool },
    /// Final classifier layer; width is the class count.
    Head,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::TinyA, Arch::TinyB, Arch::TinyC, Arch::TinyD];

    pub fn id(self) -> &'static str {
        match self {
            Arch::TinyA => "tiny-a",
            Arch::TinyB => "tiny-b",
            Arch::TinyC => "tiny-c",
            Arch::TinyD => "tiny-d",
        }
    }

    fn blocks(self) -> &'static [Block] {
        use Block::*;
        use Pool::*;
        match self {
            Arch::TinyA => &[Conv { out: 8, pool: Max }, Conv { out: 16, pool: Max }, Head],
            Arch::TinyB => &[
                Conv { out: 16, pool: Max },
                Conv { out: 32, pool: Max },
                Conv { out: 32, pool: Max },
                Dense { out: 64, relu: true },
                Head,
            ],
            Arch::TinyC => &[
                Conv { out: 8, pool: None },
                Conv { out: 8, pool: Max },
                Conv { out: 16, pool: Avg },
                Conv { out: 24, pool: Max },
                Head,
            ],
            Arch::TinyD => &[
                Conv { out: 6, pool: Max },
                Conv { out: 12, pool: None },
                Conv { out: 12, pool: Avg },
                Conv { out: 16, pool: None },
                Conv { out: 16, pool: Max },
                Dense { out: 48, relu: true },
                Head,
            ],
        }
    }

    pub fn conv_layers(self) -> usize {
        self.blocks().iter().filter(|b| matches!(b, Block::Conv { .. })).count()
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.id() == s).ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub epochs: u32,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Arch,
    input: InputSpec,
    classes: usize,
    seed: u64,
    params: Vec<Param>,
    pub meta: TrainMeta,
}

/// Handles produced by one forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Relu output of each conv block, in depth order.
    pub activations: Vec<Var>,
    /// Parameter leaves in `Model::params` order.
    pub params: Vec<Var>,
}

impl Model {
    /// Fresh model with He-normal weights (std `sqrt(2 / fan_in)`) and zero biases.
    pub fn build(arch: Arch, classes: usize, input: InputSpec, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("build", format!("need at least 2 classes, got {classes}")));
        }
        let seed = rng.seed();
        let shapes = param_shapes(arch, classes, input)?;
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = numel(&shape[1..]) as f64;
                    Tensor::normal(&shape, 0.0, (2.0 / fan_in).sqrt(), rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { arch, input, classes, seed, params, meta: TrainMeta::default() })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn conv_layers(&self) -> usize {
        self.arch.conv_layers()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input.dims() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape.to_vec(),
                right: self.input.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Record a forward pass of `x` (shape `(n, c, h, w)`) on `tape`.
    /// Parameters become leaves that require grad iff `param_grad`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, param_grad: bool) -> Result<ForwardVars> {
        self.check_batch(tape.value(x).shape())?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), param_grad)).collect();
        let mut next = params.iter().copied();
        let mut h = x;
        let mut activations = Vec::with_capacity(self.conv_layers());
        let mut flat = false;
        let conv = Conv2dSpec { stride: 1, padding: 1 };
        for block in self.arch.blocks() {
            match *block {
                Block::Conv { pool, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    h = tape.conv2d(h, w, Some(b), conv)?;
                    h = tape.relu(h);
                    activations.push(h);
                    h = match pool {
                        Pool::None => h,
                        Pool::Max => tape.maxpool2d(h, 2, 2)?,
                        Pool::Avg => tape.avgpool2d(h, 2, 2)?,
                    };
                }
                Block::Dense { relu, .. } => {
                    if !flat {
                        h = tape.flatten(h)?;
                        flat = true;
                    }
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    h = tape.linear(h, w, Some(b))?;
                    if relu {
                        h = tape.relu(h);
                    }
                }
                Block::Head => {
                    if !flat {
                        h = tape.flatten(h)?;
                        flat = true;
                    }
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    h = tape.linear(h, w, Some(b))?;
                }
            }
        }
        Ok(ForwardVars { logits: h, activations, params })
    }

    /// Logits and the `L` conv activations for a batch.
    pub fn forward_with_activations(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, false)?;
        let acts = out.activations.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((tape.value(out.logits).clone(), acts))
    }

    /// Logits for a batch of any size.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        let n = batch.shape()[0];
        let per = self.input.numel();
        let mut out = Vec::with_capacity(n * self.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Tensor::new(self.input.batch_shape(end - start), batch.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let x = tape.constant(chunk);
            let fv = self.forward_on_tape(&mut tape, x, false)?;
            out.extend_from_slice(tape.value(fv.logits).data());
        }
        Tensor::new(vec![n, self.classes], out)
    }

    /// Top-1 class per batch element.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(self.arch.id());
        w.u64(self.seed);
        w.u32(self.classes as u32);
        for d in self.input.dims() {
            w.u32(d as u32);
        }
        w.u32(self.meta.epochs);
        w.f64(self.meta.final_accuracy);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u32(p.value.ndim() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for &v in p.value.data() {
                w.f64(v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let mut r = ByteReader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let arch: Arch = r.str()?.parse().map_err(|e: Error| Error::CorruptCheckpoint(e.to_string()))?;
        let seed = r.u64()?;
        let classes = r.u32()? as usize;
        let input = InputSpec::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let meta = TrainMeta { epochs: r.u32()?, final_accuracy: r.f64()? };
        let expected = param_shapes(arch, classes, input).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{arch} expects {} parameter tensors, file has {count}",
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in expected {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::CorruptCheckpoint(format!("{name}: implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != want_name || shape != want_shape {
                return Err(Error::ShapeMismatch { op: "checkpoint", left: shape, right: want_shape });
            }
            let data = (0..numel(&shape)).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Param { name, value: Tensor::new(shape, data)? });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arch, input, classes, seed, params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn param_shapes(arch: Arch, classes: usize, input: InputSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let mut shapes = Vec::new();
    let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
    let mut flat: Option<usize> = None;
    let mut conv_i = 0;
    let mut fc_i = 0;
    for block in arch.blocks() {
        match *block {
            Block::Conv { out, pool } => {
                shapes.push((format!("conv{conv_i}.weight"), vec![out, c, 3, 3]));
                shapes.push((format!("conv{conv_i}.bias"), vec![out]));
                conv_i += 1;
                c = out;
                if pool != Pool::None {
                    if h < 2 || w < 2 {
                        return Err(Error::invalid("build", format!("input {input} too small for {arch}")));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
            Block::Dense { .. } | Block::Head => {
                let fan_in = flat.unwrap_or(c * h * w);
                let out = if let Block::Dense { out, .. } = *block { out } else { classes };
                shapes.push((format!("fc{fc_i}.weight"), vec![out, fan_in]));
                shapes.push((format!("fc{fc_i}.bias"), vec![out]));
                fc_i += 1;
                flat = Some(out);
            }
        }
    }
    Ok(shapes)
}

#[derive(Default)]
struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1024 {
            return Err(Error::CorruptCheckpoint(format!("implausible string length {n}")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("non-UTF-8 name".into()))
    }
}
