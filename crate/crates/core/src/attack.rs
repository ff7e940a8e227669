//! Pseudo-semantic-prior UAP crafting.
//!
//! The objective over-activates the surrogate's conv layers: for each input
//! it sums `log ||A_i(.)||_2` over the active layers and the loss is the
//! negated (weighted) mean of that sum. Two input regimes exist:
//!
//! * random prior (`rp`): inputs are `z + delta` for fresh prior noise `z`;
//! * pseudo-semantic prior (`psp*`): a pseudo-image `z + delta` is cut into N
//!   crop-resized semantic samples `x_n`, and the inputs are
//!   `T_n(x_n + delta)`, optionally reweighted by how little the current
//!   perturbation moves each sample's temperature-scaled prediction.
//!
//! Every model input is clamped to `[0, 1]`. The perturbation itself lives in
//! the `l_inf` ball of radius epsilon and is clipped after every step.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::fooling_rate_images;
use crate::nn::Model;
use crate::prior::{make_psp, sample_prior, sample_prior_batch, sample_semantic, PriorSpec, SemanticBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transform::{sample_transform, TransformParams};

/// Added to every activation norm before the log.
pub const NORM_FLOOR: f64 = 1e-12;
/// Added to every KL divergence before taking the reciprocal.
pub const KL_FLOOR: f64 = 1e-6;
/// Tolerance for counting an entry as saturated at the budget.
pub const SATURATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackMode {
    /// Activation maximization on plain random-prior inputs.
    RandomPrior,
    Psp,
    PspRw,
    PspT,
    /// Pseudo-semantic prior with reweighting and input transforms.
    Full,
}

impl AttackMode {
    pub const ALL: [AttackMode; 5] =
        [AttackMode::RandomPrior, AttackMode::Psp, AttackMode::PspRw, AttackMode::PspT, AttackMode::Full];

    pub fn id(self) -> &'static str {
        match self {
            AttackMode::RandomPrior => "rp",
            AttackMode::Psp => "psp",
            AttackMode::PspRw => "psp-rw",
            AttackMode::PspT => "psp-t",
            AttackMode::Full => "psp-rw-t",
        }
    }

    pub fn uses_psp(self) -> bool {
        self != AttackMode::RandomPrior
    }

    pub fn reweights(self) -> bool {
        matches!(self, AttackMode::PspRw | AttackMode::Full)
    }

    pub fn transforms(self) -> bool {
        matches!(self, AttackMode::PspT | AttackMode::Full)
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttackMode::Full),
            _ => AttackMode::ALL
                .into_iter()
                .find(|m| m.id() == s)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown attack mode `{s}`"))),
        }
    }
}

/// How sample weights enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `-w_n * sum_i log||A_i||` with weights rescaled to mean 1.
    Multiplicative,
    /// `-sum_i log(w_n ||A_i||)`, the weight sitting inside the log.
    InsideLog,
}

impl WeightMode {
    fn id(self) -> &'static str {
        match self {
            WeightMode::Multiplicative => "multiplicative",
            WeightMode::InsideLog => "inside-log",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// Semantic samples per iteration (also the prior batch size in `rp` mode).
    pub samples: usize,
    pub epsilon: f64,
    /// Length of each normalized step; `None` means `4 * epsilon`.
    pub step_size: Option<f64>,
    pub max_iters: usize,
    /// Stop after this many validations that fall below the best fooling rate.
    pub patience: usize,
    pub validation_period: usize,
    pub validation_probes: usize,
    /// Saturation-change threshold below which a saturated delta is halved.
    pub saturation_threshold: f64,
    pub saturation_period: usize,
    pub temperature: f64,
    /// Fraction of conv layers, counted from the input, that enter the loss.
    pub layer_ratio: f64,
    /// Fraction of `max_iters` over which active layers grow to their maximum.
    pub curriculum_warmup: f64,
    pub transform: TransformParams,
    pub crop_range: (f64, f64),
    pub prior: PriorSpec,
    pub weight_mode: WeightMode,
    /// Differentiate through the sample weights instead of treating them as constants.
    pub weight_grad: bool,
    /// Scale each gradient to unit l2 norm before stepping.
    pub normalize_grad: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Full,
            samples: 10,
            epsilon: 10.0 / 255.0,
            step_size: None,
            max_iters: 10_000,
            patience: 5,
            validation_period: 200,
            validation_probes: 256,
            saturation_threshold: 1e-5,
            saturation_period: 100,
            temperature: 4.0,
            layer_ratio: 1.0,
            curriculum_warmup: 0.3,
            transform: TransformParams::default(),
            crop_range: (0.3, 0.9),
            prior: PriorSpec::default(),
            weight_mode: WeightMode::Multiplicative,
            weight_grad: false,
            normalize_grad: true,
            seed: 0,
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

/// Parse a number that may be written as a fraction, e.g. `10/255`.
pub fn parse_number(key: &str, value: &str) -> Result<f64> {
    let v = value.trim();
    if let Some((a, b)) = v.split_once('/') {
        let (a, b): (f64, f64) = (parse(key, a)?, parse(key, b)?);
        return Ok(a / b);
    }
    parse(key, v)
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(4.0 * self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.samples == 0 {
            return bad("attack.samples must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack.epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.step() > 0.0) {
            return bad("attack.step_size must be positive".into());
        }
        if self.patience == 0 || self.validation_period == 0 || self.validation_probes == 0 || self.saturation_period == 0 {
            return bad("attack patience, periods and probe count must be positive".into());
        }
        if !(self.saturation_threshold > 0.0) {
            return bad("attack.saturation_threshold must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad("attack.temperature must be positive".into());
        }
        if !(self.layer_ratio > 0.0 && self.layer_ratio <= 1.0) {
            return bad(format!("attack.layer_ratio must be in (0, 1], got {}", self.layer_ratio));
        }
        if !(0.0..=1.0).contains(&self.curriculum_warmup) {
            return bad("attack.curriculum_warmup must be in [0, 1]".into());
        }
        let (lo, hi) = self.crop_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("attack.crop_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
        }
        self.transform.validate()?;
        self.prior.validate()
    }

    /// Set one field from its config key (without the `attack.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.trim().parse()?,
            "samples" => self.samples = parse(key, value)?,
            "epsilon" => self.epsilon = parse_number(key, value)?,
            "step_size" => {
                self.step_size = match value.trim() {
                    "auto" => None,
                    v => Some(parse_number(key, v)?),
                }
            }
            "max_iters" => self.max_iters = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "validation_period" => self.validation_period = parse(key, value)?,
            "validation_probes" => self.validation_probes = parse(key, value)?,
            "saturation_threshold" => self.saturation_threshold = parse_number(key, value)?,
            "saturation_period" => self.saturation_period = parse(key, value)?,
            "temperature" => self.temperature = parse_number(key, value)?,
            "layer_ratio" => self.layer_ratio = parse_number(key, value)?,
            "curriculum_warmup" => self.curriculum_warmup = parse_number(key, value)?,
            "crop_low" => self.crop_range.0 = parse_number(key, value)?,
            "crop_high" => self.crop_range.1 = parse_number(key, value)?,
            "weight_mode" => {
                self.weight_mode = match value.trim() {
                    "multiplicative" => WeightMode::Multiplicative,
                    "inside-log" => WeightMode::InsideLog,
                    v => return Err(Error::InvalidConfig(format!("{key}: unknown weight mode `{v}`"))),
                }
            }
            "weight_grad" => self.weight_grad = parse_bool(key, value)?,
            "normalize_grad" => self.normalize_grad = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "rotation_max" => self.transform.max_degrees = parse_number(key, value)?,
            "rotation_std" => self.transform.rotation_std = parse_number(key, value)?,
            "scale_low" => self.transform.scale_low = parse_number(key, value)?,
            "scale_high" => self.transform.scale_high = parse_number(key, value)?,
            "shuffle_grid" => self.transform.grid = parse(key, value)?,
            "prior" => {
                self.prior = match value.trim() {
                    "gaussian" => PriorSpec::default(),
                    "uniform" => PriorSpec::Uniform { lo: 0.0, hi: 1.0 },
                    v => return Err(Error::InvalidConfig(format!("{key}: unknown prior `{v}`"))),
                }
            }
            "prior_a" | "prior_b" => {
                let v = parse_number(key, value)?;
                let first = key == "prior_a";
                self.prior = match self.prior {
                    PriorSpec::Gaussian { mean, std } => {
                        if first { PriorSpec::Gaussian { mean: v, std } } else { PriorSpec::Gaussian { mean, std: v } }
                    }
                    PriorSpec::Uniform { lo, hi } => {
                        if first { PriorSpec::Uniform { lo: v, hi } } else { PriorSpec::Uniform { lo, hi: v } }
                    }
                };
            }
            _ => return Err(Error::InvalidConfig(format!("unknown key `attack.{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a fixed order. Feeding these back
    /// through [`AttackConfig::set`] reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (prior, a, b) = match self.prior {
            PriorSpec::Gaussian { mean, std } => ("gaussian", mean, std),
            PriorSpec::Uniform { lo, hi } => ("uniform", lo, hi),
        };
        vec![
            ("mode", self.mode.id().to_string()),
            ("samples", self.samples.to_string()),
            ("epsilon", fmt_f64(self.epsilon)),
            ("step_size", self.step_size.map_or_else(|| "auto".to_string(), fmt_f64)),
            ("max_iters", self.max_iters.to_string()),
            ("patience", self.patience.to_string()),
            ("validation_period", self.validation_period.to_string()),
            ("validation_probes", self.validation_probes.to_string()),
            ("saturation_threshold", fmt_f64(self.saturation_threshold)),
            ("saturation_period", self.saturation_period.to_string()),
            ("temperature", fmt_f64(self.temperature)),
            ("layer_ratio", fmt_f64(self.layer_ratio)),
            ("curriculum_warmup", fmt_f64(self.curriculum_warmup)),
            ("crop_low", fmt_f64(self.crop_range.0)),
            ("crop_high", fmt_f64(self.crop_range.1)),
            ("weight_mode", self.weight_mode.id().to_string()),
            ("weight_grad", self.weight_grad.to_string()),
            ("normalize_grad", self.normalize_grad.to_string()),
            ("seed", self.seed.to_string()),
            ("rotation_max", fmt_f64(self.transform.max_degrees)),
            ("rotation_std", fmt_f64(self.transform.rotation_std)),
            ("scale_low", fmt_f64(self.transform.scale_low)),
            ("scale_high", fmt_f64(self.transform.scale_high)),
            ("shuffle_grid", self.transform.grid.to_string()),
            ("prior", prior.to_string()),
            ("prior_a", fmt_f64(a)),
            ("prior_b", fmt_f64(b)),
        ]
    }

    /// SHA-256 over the canonical `key = value` listing.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(text, "attack.{k} = {v}");
        }
        hex(&Sha256::digest(text.as_bytes()))
    }

    fn max_active_layers(&self, conv_layers: usize) -> usize {
        ((self.layer_ratio * conv_layers as f64).ceil() as usize).clamp(1, conv_layers)
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loss value together with its gradient with respect to delta.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
    /// Raw per-sample weights `1 / (KL + floor)`; all ones without reweighting.
    pub weights: Vec<f64>,
}

/// Number of conv layers in the loss at iteration `t` (1-based): grows
/// linearly from 1 to `max_layers` over the first `warmup * max_iters`
/// iterations.
pub fn curriculum_layers(t: usize, max_iters: usize, warmup: f64, max_layers: usize) -> usize {
    let ramp = (warmup * max_iters as f64).ceil() as usize;
    if max_layers <= 1 || ramp == 0 || t >= ramp {
        return max_layers.max(1);
    }
    1 + (max_layers - 1) * t / ramp
}

/// Per-sample `sum_{i < active} log(||A_i|| + floor)`, shape `(n)`.
pub fn activation_log_norms(tape: &mut Tape, acts: &[Var], active: usize) -> Result<Var> {
    if active == 0 || active > acts.len() {
        return Err(Error::invalid("activation loss", format!("{active} active layers of {}", acts.len())));
    }
    let mut total: Option<Var> = None;
    for &a in &acts[..active] {
        let n = tape.row_l2_norm(a)?;
        let n = tape.add_scalar(n, NORM_FLOOR);
        let l = tape.log(n);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn check_delta(model: &Model, delta: &Tensor) -> Result<()> {
    let dims = model.input_spec().dims();
    if delta.shape() != dims {
        return Err(Error::ShapeMismatch { op: "attack", left: delta.shape().to_vec(), right: dims.to_vec() });
    }
    Ok(())
}

/// Random-prior activation loss `-mean_b sum_i log||A_i(clamp(z_b + delta))||`
/// over a `(b, c, h, w)` prior batch, and its gradient in delta.
pub fn loss_rp(model: &Model, z_batch: &Tensor, delta: &Tensor, active_layers: usize) -> Result<LossGrad> {
    check_delta(model, delta)?;
    let b = *z_batch.shape().first().ok_or(Error::Empty("loss_rp"))?;
    if b == 0 {
        return Err(Error::Empty("loss_rp"));
    }
    let mut tape = Tape::new();
    let d = tape.leaf(delta.clone(), true);
    let z = tape.constant(z_batch.clone());
    let ds = tape.stack(&vec![d; b])?;
    let x = tape.add(z, ds)?;
    let x = tape.clamp(x, 0.0, 1.0);
    let fv = model.forward_on_tape(&mut tape, x, false)?;
    let per = activation_log_norms(&mut tape, &fv.activations, active_layers)?;
    let m = tape.mean(per)?;
    let loss = tape.scale(m, -1.0);
    finish(tape, loss, d, vec![1.0; b])
}

fn finish(mut tape: Tape, loss: Var, d: Var, weights: Vec<f64>) -> Result<LossGrad> {
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grad = tape.grad(d).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(d).shape()));
    Ok(LossGrad { loss: value, grad, weights })
}

/// `D_KL(p || q)` in nats for two distributions. Terms with `p_k = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pk, _)| pk > 0.0).map(|(&pk, &qk)| pk * (pk / qk).ln()).sum()
}

/// Sample weight `1 / (D_KL(p || q) + floor)`.
pub fn kl_weight(p: &[f64], q: &[f64]) -> f64 {
    1.0 / (kl_divergence(p, q) + KL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PspOptions {
    pub temperature: f64,
    pub reweight: bool,
    pub transform: bool,
    pub weight_mode: WeightMode,
    pub weight_grad: bool,
}

impl PspOptions {
    pub fn from_config(cfg: &AttackConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            reweight: cfg.mode.reweights(),
            transform: cfg.mode.transforms(),
            weight_mode: cfg.weight_mode,
            weight_grad: cfg.weight_grad,
        }
    }
}

/// Model inputs for each sample: `T_n(clamp(x_n [+ delta]))`, stacked.
fn sample_inputs(tape: &mut Tape, batch: &SemanticBatch, delta: Option<Var>, transform: bool) -> Result<Var> {
    let mut inputs = Vec::with_capacity(batch.len());
    for (x, t) in batch.samples.iter().zip(&batch.transforms) {
        let mut v = tape.constant(x.clone());
        if let Some(d) = delta {
            v = tape.add(v, d)?;
        }
        v = tape.clamp(v, 0.0, 1.0);
        if let (true, Some(t)) = (transform, t) {
            v = t.apply_on_tape(tape, v)?;
        }
        inputs.push(v);
    }
    tape.stack(&inputs)
}

/// Clean distributions `P_n = softmax(f(T_n(x_n)) / tau)`, one row per sample.
fn clean_distributions(model: &Model, batch: &SemanticBatch, opts: &PspOptions) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = sample_inputs(&mut tape, batch, None, opts.transform)?;
    let fv = model.forward_on_tape(&mut tape, x, false)?;
    Ok(softmax_rows(tape.value(fv.logits), opts.temperature))
}

/// Raw sample weights `w_n = 1 / (D_KL(P_n || Q_n) + floor)` with
/// `P_n = f(T_n(x_n))`, `Q_n = f(T_n(x_n + delta))` and `f` the
/// temperature-scaled softmax. Each sample uses its own stored transform for
/// both distributions.
pub fn reweight(model: &Model, batch: &SemanticBatch, delta: &Tensor, tau: f64) -> Result<Vec<f64>> {
    check_delta(model, delta)?;
    let opts = PspOptions { temperature: tau, reweight: true, transform: true, weight_mode: WeightMode::Multiplicative, weight_grad: false };
    if !(tau > 0.0) {
        return Err(Error::invalid("reweight", format!("temperature must be positive, got {tau}")));
    }
    let p = clean_distributions(model, batch, &opts)?;
    let mut tape = Tape::new();
    let d = tape.constant(delta.clone());
    let x = sample_inputs(&mut tape, batch, Some(d), true)?;
    let fv = model.forward_on_tape(&mut tape, x, false)?;
    let q = softmax_rows(tape.value(fv.logits), tau);
    let k = model.classes();
    Ok(p.data().chunks(k).zip(q.data().chunks(k)).map(|(pr, qr)| kl_weight(pr, qr)).collect())
}

/// Pseudo-semantic activation loss over a semantic batch and its gradient in
/// delta:
///
/// `L = -(1/N) sum_n wbar_n sum_{i < active} log||A_i(T_n(clamp(x_n + delta)))||`
///
/// with `wbar_n = N w_n / sum w` (multiplicative weights) or the weight
/// inside the log. Without reweighting every `wbar_n = 1`; without
/// transforms `T_n` is the identity.
pub fn loss_psp(
    model: &Model,
    batch: &SemanticBatch,
    delta: &Tensor,
    active_layers: usize,
    opts: &PspOptions,
) -> Result<LossGrad> {
    check_delta(model, delta)?;
    if batch.is_empty() {
        return Err(Error::Empty("loss_psp"));
    }
    let n = batch.len();
    let p = if opts.reweight { Some(clean_distributions(model, batch, opts)?) } else { None };

    let mut tape = Tape::new();
    let d = tape.leaf(delta.clone(), true);
    let x = sample_inputs(&mut tape, batch, Some(d), opts.transform)?;
    let fv = model.forward_on_tape(&mut tape, x, false)?;
    let per = activation_log_norms(&mut tape, &fv.activations, active_layers)?;

    let Some(p) = p else {
        let m = tape.mean(per)?;
        let loss = tape.scale(m, -1.0);
        return finish(tape, loss, d, vec![1.0; n]);
    };

    // Per-sample KL(P || Q) on the tape; Q shares the forward pass above.
    let log_q = tape.log_softmax(fv.logits, opts.temperature)?;
    let k = model.classes();
    let neg_entropy: Vec<f64> = p
        .data()
        .chunks(k)
        .map(|row| row.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum())
        .collect();
    let plp_rows = tape.constant(Tensor::from_vec(neg_entropy));
    let pv = tape.constant(p);
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum_last(cross)?;
    let kl = tape.sub(plp_rows, cross)?;
    let kl_floored = tape.add_scalar(kl, KL_FLOOR);
    let w = tape.recip(kl_floored);
    let raw_weights = tape.value(w).data().to_vec();
    let w = if opts.weight_grad { w } else { tape.constant(Tensor::from_vec(raw_weights.clone())) };

    let loss = match opts.weight_mode {
        WeightMode::Multiplicative => {
            let total = tape.sum(w);
            let inv = tape.recip(total);
            let inv = tape.scale(inv, n as f64);
            let inv = tape.stack(&vec![inv; n])?;
            let wbar = tape.mul(w, inv)?;
            let weighted = tape.mul(wbar, per)?;
            let m = tape.mean(weighted)?;
            tape.scale(m, -1.0)
        }
        WeightMode::InsideLog => {
            let lw = tape.log(w);
            let lw = tape.scale(lw, active_layers as f64);
            let s = tape.add(per, lw)?;
            let m = tape.mean(s)?;
            tape.scale(m, -1.0)
        }
    };
    finish(tape, loss, d, raw_weights)
}

/// Fraction of entries with `|delta_i| >= epsilon - 1e-12`.
pub fn saturation_rate(delta: &Tensor, epsilon: f64) -> f64 {
    if delta.is_empty() {
        return 0.0;
    }
    let sat = delta.data().iter().filter(|v| v.abs() >= epsilon - SATURATION_TOL).count();
    sat as f64 / delta.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f64,
    /// Iteration at which this delta was taken.
    pub iteration: usize,
    /// Validation fooling rate of this delta, if it was validated.
    pub fooling_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub active_layers: usize,
    pub loss: f64,
    pub saturation: f64,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub fooling_rate: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleRecord {
    pub iteration: usize,
    pub saturation: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub iterations: Vec<IterRecord>,
    pub validations: Vec<ValidationRecord>,
    pub rescales: Vec<RescaleRecord>,
    pub model_hash: String,
    pub config_hash: String,
    pub wall_clock: Duration,
    /// Iteration of the returned perturbation.
    pub selected_iteration: usize,
}

impl RunLog {
    /// Line-delimited records. Wall-clock time is left out so the text is
    /// reproducible.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# runlog v1");
        let _ = writeln!(s, "# model_hash {}", self.model_hash);
        let _ = writeln!(s, "# config_hash {}", self.config_hash);
        let mut vals = self.validations.iter().peekable();
        let mut rescales = self.rescales.iter().peekable();
        for it in &self.iterations {
            let _ = writeln!(
                s,
                "iter {} layers {} loss {:.12e} sat {:.6} linf {:.12e}",
                it.iteration, it.active_layers, it.loss, it.saturation, it.linf
            );
            while let Some(r) = rescales.next_if(|r| r.iteration == it.iteration) {
                let _ = writeln!(s, "rescale {} sat {:.6}", r.iteration, r.saturation);
            }
            while let Some(v) = vals.next_if(|v| v.iteration == it.iteration) {
                let _ = writeln!(s, "validate {} fr {:.6} best {}", v.iteration, v.fooling_rate, v.best);
            }
        }
        for v in vals {
            let _ = writeln!(s, "validate {} fr {:.6} best {}", v.iteration, v.fooling_rate, v.best);
        }
        let _ = writeln!(s, "# selected_iteration {}", self.selected_iteration);
        s
    }

    pub fn max_linf(&self) -> f64 {
        self.iterations.iter().fold(0.0, |m, r| m.max(r.linf))
    }
}

/// Probe images and their clean predictions for validation during crafting.
struct Validator {
    images: Tensor,
    clean: Vec<usize>,
}

impl Validator {
    fn new(model: &Model, images: Tensor) -> Result<Self> {
        let clean = model.predict(&images)?;
        Ok(Self { images, clean })
    }

    fn fooling_rate(&self, model: &Model, delta: &Tensor) -> Result<f64> {
        fooling_rate_images(model, &self.images, &self.clean, delta)
    }
}

/// Craft a UAP against `model`. Uses only the model and prior noise:
/// validation fooling rates are measured on a fixed, seeded batch of prior
/// images.
pub fn craft(model: &Model, cfg: &AttackConfig) -> Result<(Perturbation, RunLog)> {
    cfg.validate()?;
    let mut probe_rng = Rng::new(cfg.seed).substream(2);
    let probes = sample_prior_batch(&cfg.prior, model.input_spec(), cfg.validation_probes, &mut probe_rng)?;
    run(model, cfg, Validator::new(model, probes)?)
}

/// Like [`craft`] but validates on the given real images `(n, c, h, w)`.
/// This leaves the data-free setting and exists for post-hoc studies.
pub fn craft_with_validation(model: &Model, cfg: &AttackConfig, images: &Tensor) -> Result<(Perturbation, RunLog)> {
    cfg.validate()?;
    run(model, cfg, Validator::new(model, images.clone())?)
}

fn run(model: &Model, cfg: &AttackConfig, validator: Validator) -> Result<(Perturbation, RunLog)> {
    let started = Instant::now();
    let input = model.input_spec();
    let eps = cfg.epsilon;
    let base = Rng::new(cfg.seed);
    let mut init_rng = base.substream(0);
    let mut rng = base.substream(1);
    let mut delta = Tensor::uniform(&input.dims(), -eps, eps, &mut init_rng);
    let max_layers = cfg.max_active_layers(model.conv_layers());
    let opts = PspOptions::from_config(cfg);

    let mut log = RunLog { model_hash: model.fingerprint(), config_hash: cfg.fingerprint(), ..Default::default() };
    let mut best: Option<Perturbation> = None;
    let mut misses = 0;
    let mut last_saturation: Option<f64> = None;
    let mut t = 0;

    let validate = |t: usize, delta: &Tensor, log: &mut RunLog, best: &mut Option<Perturbation>| -> Result<bool> {
        let fr = validator.fooling_rate(model, delta)?;
        let prev = best.as_ref().and_then(|b| b.fooling_rate);
        let is_best = is_best_rate(prev, fr);
        if is_best {
            *best = Some(Perturbation { delta: delta.clone(), epsilon: eps, iteration: t, fooling_rate: Some(fr) });
        }
        log.validations.push(ValidationRecord { iteration: t, fooling_rate: fr, best: is_best });
        Ok(is_best)
    };

    while t < cfg.max_iters && misses < cfg.patience {
        t += 1;
        let active = curriculum_layers(t, cfg.max_iters, cfg.curriculum_warmup, max_layers);
        let lg = if cfg.mode.uses_psp() {
            let z = sample_prior(&cfg.prior, input, &mut rng)?;
            let x = make_psp(&z, &delta)?;
            let mut batch = sample_semantic(&x, cfg.samples, cfg.crop_range, &mut rng)?;
            if opts.transform {
                for slot in batch.transforms.iter_mut() {
                    *slot = Some(sample_transform(&mut rng, &cfg.transform)?);
                }
            }
            loss_psp(model, &batch, &delta, active, &opts)?
        } else {
            let z = sample_prior_batch(&cfg.prior, input, cfg.samples, &mut rng)?;
            loss_rp(model, &z, &delta, active)?
        };
        if !lg.loss.is_finite() || !lg.grad.all_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }

        // Descend the loss (ascend the activations), then project.
        let norm = lg.grad.l2_norm();
        let scale = if cfg.normalize_grad {
            if norm > 0.0 { cfg.step() / norm } else { 0.0 }
        } else {
            cfg.step()
        };
        for (d, g) in delta.data_mut().iter_mut().zip(lg.grad.data()) {
            *d = (*d - scale * g).clamp(-eps, eps);
        }

        if t % cfg.saturation_period == 0 {
            let sat = saturation_rate(&delta, eps);
            if let Some(prev) = last_saturation {
                if sat > 0.5 && (sat - prev).abs() < cfg.saturation_threshold {
                    delta = delta.scale(0.5);
                    log.rescales.push(RescaleRecord { iteration: t, saturation: sat });
                }
            }
            last_saturation = Some(sat);
        }

        let linf = delta.linf_norm();
        assert!(linf <= eps + 1e-15, "l_inf invariant broken at iteration {t}: {linf} > {eps}");
        log.iterations.push(IterRecord {
            iteration: t,
            active_layers: active,
            loss: lg.loss,
            saturation: saturation_rate(&delta, eps),
            linf,
        });

        if t % cfg.validation_period == 0 && !validate(t, &delta, &mut log, &mut best)? {
            misses += 1;
        }
    }
    if t > 0 && t % cfg.validation_period != 0 {
        validate(t, &delta, &mut log, &mut best)?;
    }

    let result = best.unwrap_or(Perturbation { delta, epsilon: eps, iteration: t, fooling_rate: None });
    log.selected_iteration = result.iteration;
    log.wall_clock = started.elapsed();
    Ok((result, log))
}

/// A rate equal to the best so far is still the best: it is kept (the later
/// iterate wins) and does not count toward the patience budget.
fn is_best_rate(best: Option<f64>, fr: f64) -> bool {
    best.is_none_or(|b| fr >= b)
}

/// Uniform random perturbation in the same budget, the noise baseline.
pub fn random_delta(model: &Model, epsilon: f64, seed: u64) -> Tensor {
    Tensor::uniform(&model.input_spec().dims(), -epsilon, epsilon, &mut Rng::new(seed))
}
