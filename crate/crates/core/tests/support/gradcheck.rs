//! Central finite-difference checks for every tape primitive, shared by the
//! core test suite and the acceptance run.
//!
//! Each case contracts the op output with a random weight tensor to get a
//! scalar, then compares the tape gradient of every input with a central
//! difference. The error is norm-wise:
//! `||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-12)`.

use std::sync::Arc;

use psp_core::attack::{loss_psp, loss_rp, PspOptions, WeightMode};
use psp_core::autodiff::{Conv2dSpec, Tape, Var};
use psp_core::nn::{Arch, InputSpec, Model};
use psp_core::prior::sample_semantic;
use psp_core::resample::ResamplePlan;
use psp_core::transform::{sample_transform, TransformParams};
use psp_core::{Rng, Tensor};

const CASES: usize = 100;
const SMOOTH_TOL: f64 = 1e-4;
const KINK_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

type Op = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Worst relative error per check, with its tolerance.
#[derive(Default)]
pub struct Report {
    pub rows: Vec<(String, f64, f64)>,
}

impl Report {
    fn record(&mut self, name: &str, worst: f64, tol: f64) {
        self.rows.push((name.to_string(), worst, tol));
    }

    pub fn failures(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|(_, w, tol)| !(w <= tol))
            .map(|(n, w, tol)| format!("{n}: {w:.3e} > {tol:.0e}"))
            .collect()
    }
}

pub const GROUPS: [(&str, fn(&mut Report)); 11] = [
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary_smooth", elementwise_unary_smooth),
    ("elementwise_kinked", elementwise_kinked),
    ("reductions", reductions),
    ("shape_ops", shape_ops),
    ("dense_ops", dense_ops),
    ("conv2d", conv2d),
    ("pooling", pooling),
    ("softmax_family", softmax_family),
    ("resampling", resampling),
    ("attack_losses", attack_losses),
];

fn contracted(inputs: &[Tensor], weights: &Tensor, op: &Op, track: bool) -> (f64, Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = op(&mut tape, &vars);
    let rv = tape.constant(weights.clone());
    let prod = tape.mul(out, rv).unwrap();
    let root = tape.sum(prod);
    (tape.value(root).item(), tape, vars, root)
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Worst relative error over `CASES` random draws of the inputs.
fn check(r: &mut Report, name: &str, tol: f64, gen: impl Fn(&mut Rng) -> Vec<Tensor>, op: &Op) {
    let mut rng = Rng::new(name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let inputs = gen(&mut rng);
        let out_shape = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let o = op(&mut t, &vs);
            t.value(o).shape().to_vec()
        };
        let weights = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);
        let (_, mut tape, vars, root) = contracted(&inputs, &weights, op, true);
        tape.backward(root).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let mut numeric = vec![0.0; inputs[i].len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += H;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= H;
                let fp = contracted(&plus, &weights, op, false).0;
                let fm = contracted(&minus, &weights, op, false).0;
                *slot = (fp - fm) / (2.0 * H);
            }
            // NaN must count as a failure.
            let e = rel_err(analytic.data(), &numeric);
            worst = if e.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(e) };
        }
    }
    r.record(name, worst, tol);
}

fn u(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn pos(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Uniform values with magnitude at least `gap`, keeping clear of kinks at 0.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    let t = u(shape, rng);
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.range(lo, hi + 1)
}

pub fn elementwise_binary(r: &mut Report) {
    let gen = |r: &mut Rng| {
        let s = [dims(r, 1, 4), dims(r, 1, 5)];
        vec![u(&s, r), u(&s, r)]
    };
    check(r, "add", SMOOTH_TOL, gen, &|t, v| t.add(v[0], v[1]).unwrap());
    check(r, "sub", SMOOTH_TOL, gen, &|t, v| t.sub(v[0], v[1]).unwrap());
    check(r, "mul", SMOOTH_TOL, gen, &|t, v| t.mul(v[0], v[1]).unwrap());
}

pub fn elementwise_unary_smooth(r: &mut Report) {
    let gen = |r: &mut Rng| vec![u(&[dims(r, 1, 3), dims(r, 1, 6)], r)];
    let gen_pos = |r: &mut Rng| vec![pos(&[dims(r, 1, 3), dims(r, 1, 6)], r)];
    check(r, "scale", SMOOTH_TOL, gen, &|t, v| t.scale(v[0], -1.7));
    check(r, "add_scalar", SMOOTH_TOL, gen, &|t, v| t.add_scalar(v[0], 0.3));
    check(r, "exp", SMOOTH_TOL, gen, &|t, v| t.exp(v[0]));
    check(r, "log", SMOOTH_TOL, gen_pos, &|t, v| t.log(v[0]));
    check(r, "recip", SMOOTH_TOL, gen_pos, &|t, v| t.recip(v[0]));
}

pub fn elementwise_kinked(r: &mut Report) {
    let gen = |r: &mut Rng| vec![away_from_zero(&[dims(r, 1, 4), dims(r, 1, 6)], 1e-3, r)];
    check(r, "relu", KINK_TOL, gen, &|t, v| t.relu(v[0]));
    // Keep values clear of both clamp bounds.
    let gen_c = |r: &mut Rng| {
        let x = away_from_zero(&[dims(r, 1, 4), dims(r, 1, 6)], 1e-3, r);
        vec![x.map(|v| if (v.abs() - 0.5).abs() < 1e-3 { v * 1.01 } else { v })]
    };
    check(r, "clamp", KINK_TOL, gen_c, &|t, v| t.clamp(v[0], -0.5, 0.5));
}

pub fn reductions(r: &mut Report) {
    let gen = |r: &mut Rng| vec![u(&[dims(r, 1, 4), dims(r, 1, 5)], r)];
    check(r, "sum", SMOOTH_TOL, gen, &|t, v| t.sum(v[0]));
    check(r, "mean", SMOOTH_TOL, gen, &|t, v| t.mean(v[0]).unwrap());
    check(r, "sum_last", SMOOTH_TOL, gen, &|t, v| t.sum_last(v[0]).unwrap());
    check(r, "l2_norm", SMOOTH_TOL, gen, &|t, v| t.l2_norm(v[0]));
    let gen4 = |r: &mut Rng| vec![u(&[dims(r, 1, 3), dims(r, 1, 3), dims(r, 2, 4), dims(r, 2, 4)], r)];
    check(r, "row_l2_norm", SMOOTH_TOL, gen4, &|t, v| t.row_l2_norm(v[0]).unwrap());
}

pub fn shape_ops(r: &mut Report) {
    let gen = |r: &mut Rng| vec![u(&[2, dims(r, 1, 3), 3], r)];
    check(r, "reshape", SMOOTH_TOL, gen, &|t, v| {
        let n = t.value(v[0]).len();
        t.reshape(v[0], &[n]).unwrap()
    });
    check(r, "flatten", SMOOTH_TOL, gen, &|t, v| t.flatten(v[0]).unwrap());
    let gen3 = |r: &mut Rng| {
        let s = [dims(r, 1, 3), dims(r, 2, 4)];
        vec![u(&s, r), u(&s, r), u(&s, r)]
    };
    check(r, "stack", SMOOTH_TOL, gen3, &|t, v| t.stack(&[v[0], v[1], v[2], v[0]]).unwrap());
}

pub fn dense_ops(r: &mut Report) {
    let gen = |r: &mut Rng| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
        vec![u(&[m, k], r), u(&[k, n], r)]
    };
    check(r, "matmul", SMOOTH_TOL, gen, &|t, v| t.matmul(v[0], v[1]).unwrap());
    let gen_lin = |r: &mut Rng| {
        let (b, i, o) = (dims(r, 1, 4), dims(r, 1, 6), dims(r, 1, 5));
        vec![u(&[b, i], r), u(&[o, i], r), u(&[o], r)]
    };
    check(r, "linear", SMOOTH_TOL, gen_lin, &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
}

pub fn conv2d(r: &mut Report) {
    for (stride, padding) in [(1, 1), (1, 0), (2, 1)] {
        let gen = |r: &mut Rng| {
            let (n, c, o) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
            let (h, w) = (dims(r, 3, 6), dims(r, 3, 6));
            vec![u(&[n, c, h, w], r), u(&[o, c, 3, 3], r), u(&[o], r)]
        };
        let spec = Conv2dSpec { stride, padding };
        check(r, &format!("conv2d s{stride} p{padding}"), SMOOTH_TOL, gen, &move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), spec).unwrap()
        });
    }
}

/// Values on a jittered permutation grid: every entry distinct by at least
/// 0.01, so no pooling window holds a near-tie.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let perm = rng.permutation(n);
    let data = perm.iter().map(|&p| p as f64 * 0.02 + rng.uniform(0.0, 0.005)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn pooling(r: &mut Report) {
    let gen = |r: &mut Rng| vec![distinct(&[dims(r, 1, 2), dims(r, 1, 2), 2 * dims(r, 1, 3), 2 * dims(r, 1, 3)], r)];
    check(r, "maxpool2d", KINK_TOL, gen, &|t, v| t.maxpool2d(v[0], 2, 2).unwrap());
    check(r, "avgpool2d", SMOOTH_TOL, gen, &|t, v| t.avgpool2d(v[0], 2, 2).unwrap());
}

pub fn softmax_family(r: &mut Report) {
    let gen = |r: &mut Rng| vec![u(&[dims(r, 1, 4), dims(r, 2, 5)], r).scale(3.0)];
    check(r, "softmax", SMOOTH_TOL, gen, &|t, v| t.softmax(v[0], 2.0).unwrap());
    check(r, "log_softmax", SMOOTH_TOL, gen, &|t, v| t.log_softmax(v[0], 0.7).unwrap());
    check(r, "cross_entropy", SMOOTH_TOL, gen, &|t, v| {
        let shape = t.value(v[0]).shape().to_vec();
        let labels: Vec<usize> = (0..shape[0]).map(|i| i % shape[1]).collect();
        t.cross_entropy(v[0], &labels).unwrap()
    });
}

pub fn resampling(r: &mut Report) {
    let gen = |r: &mut Rng| vec![u(&[dims(r, 1, 2), dims(r, 1, 2), 8, 8], r)];
    check(r, "bilinear_resize", SMOOTH_TOL, gen, &|t, v| t.bilinear_resize(v[0], 5, 11).unwrap());
    check(r, "rotate", SMOOTH_TOL, gen, &|t, v| t.rotate(v[0], 5.0, 0.5).unwrap());
    check(r, "pad", SMOOTH_TOL, gen, &|t, v| t.pad(v[0], 2, 0.5).unwrap());
    let plans = [
        ResamplePlan::crop_resize(8, 8, 1, 2, 5, 5, 8, 8).unwrap(),
        ResamplePlan::scale(8, 8, 2.7, 0.5).unwrap(),
        ResamplePlan::scale(8, 8, 0.8, 0.5).unwrap(),
        ResamplePlan::shuffle(8, 8, 2, &[2, 0, 3, 1], 0.5).unwrap(),
    ];
    for (i, plan) in plans.into_iter().enumerate() {
        let plan = Arc::new(plan);
        check(r, &format!("resample plan {i}"), SMOOTH_TOL, gen, &move |t, v| t.resample(v[0], plan.clone()).unwrap());
    }
}

/// End-to-end gradients of the attack objectives with respect to delta.
pub fn attack_losses(r: &mut Report) {
    let input = InputSpec::new(1, 12, 12);
    let model = Model::build(Arch::TinyB, 4, input, &mut Rng::new(21)).unwrap();
    let mut rng = Rng::new(22);
    let numeric = |f: &dyn Fn(&Tensor) -> f64, d: &Tensor| -> Vec<f64> {
        (0..d.len())
            .map(|j| {
                let (mut p, mut m) = (d.clone(), d.clone());
                p.data_mut()[j] += H;
                m.data_mut()[j] -= H;
                (f(&p) - f(&m)) / (2.0 * H)
            })
            .collect()
    };
    let (mut worst_rp, mut worst_psp): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let z = Tensor::uniform(&[3, 1, 12, 12], 0.1, 0.9, &mut rng);
        let delta = Tensor::uniform(&[1, 12, 12], -0.05, 0.05, &mut rng);
        let g = loss_rp(&model, &z, &delta, 3).unwrap().grad;
        let n = numeric(&|d| loss_rp(&model, &z, d, 3).unwrap().loss, &delta);
        worst_rp = worst_rp.max(rel_err(g.data(), &n));

        let x = Tensor::uniform(&[1, 12, 12], 0.1, 0.9, &mut rng);
        let mut batch = sample_semantic(&x, 3, (0.5, 0.9), &mut rng).unwrap();
        for t in batch.transforms.iter_mut() {
            *t = Some(sample_transform(&mut rng, &TransformParams::default()).unwrap());
        }
        for mode in [WeightMode::Multiplicative, WeightMode::InsideLog] {
            let opts = PspOptions { temperature: 2.0, reweight: true, transform: true, weight_mode: mode, weight_grad: true };
            let g = loss_psp(&model, &batch, &delta, 3, &opts).unwrap().grad;
            let n = numeric(&|d| loss_psp(&model, &batch, d, 3, &opts).unwrap().loss, &delta);
            worst_psp = worst_psp.max(rel_err(g.data(), &n));
        }
    }
    r.record("loss_rp", worst_rp, KINK_TOL);
    r.record("loss_psp", worst_psp, KINK_TOL);
}
