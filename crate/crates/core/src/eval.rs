//! Fooling rates, transfer studies and perturbation analysis.

use std::fmt::Write as _;

use crate::attack::{craft, AttackConfig, AttackMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::prior::{draw_crop, sample_prior_batch, PriorSpec};
use crate::resample::ResamplePlan;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `clamp(x_b + delta, 0, 1)` for every image of an `(n, c, h, w)` batch.
pub fn perturb_batch(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let per = delta.len();
    if images.ndim() != 4 || images.shape()[1..] != *delta.shape() {
        return Err(Error::ShapeMismatch { op: "perturb", left: images.shape().to_vec(), right: delta.shape().to_vec() });
    }
    let mut out = images.clone();
    for img in out.data_mut().chunks_mut(per) {
        for (v, d) in img.iter_mut().zip(delta.data()) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Share of images whose predicted label changes under `delta`, given their
/// clean predictions.
pub fn fooling_rate_images(model: &Model, images: &Tensor, clean: &[usize], delta: &Tensor) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::Empty("fooling rate"));
    }
    if images.shape().first() != Some(&clean.len()) {
        return Err(Error::invalid("fooling rate", "one clean prediction per image required"));
    }
    let adv = model.predict(&perturb_batch(images, delta)?)?;
    let flips = adv.iter().zip(clean).filter(|(a, c)| a != c).count();
    Ok(flips as f64 / clean.len() as f64)
}

/// A split with its clean predictions computed once.
#[derive(Clone, Debug)]
pub struct FoolingEvaluator<'a> {
    images: &'a Tensor,
    clean: Vec<usize>,
}

impl<'a> FoolingEvaluator<'a> {
    pub fn new(model: &Model, split: &'a Dataset) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Empty("fooling rate"));
        }
        Ok(Self { images: split.images(), clean: model.predict(split.images())? })
    }

    pub fn clean_predictions(&self) -> &[usize] {
        &self.clean
    }

    pub fn fooling_rate(&self, model: &Model, delta: &Tensor) -> Result<f64> {
        fooling_rate_images(model, self.images, &self.clean, delta)
    }
}

pub fn fooling_rate(model: &Model, split: &Dataset, delta: &Tensor) -> Result<f64> {
    FoolingEvaluator::new(model, split)?.fooling_rate(model, delta)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: String,
    pub model: Model,
}

impl NamedModel {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        Self { name: name.into(), model }
    }
}

/// Fooling rates of UAPs crafted on each surrogate (rows) against each
/// target (columns), as mean and std over seeds.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub surrogates: Vec<String>,
    pub targets: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub seeds: usize,
}

impl TransferMatrix {
    pub fn is_white_box(&self, row: usize, col: usize) -> bool {
        self.surrogates[row] == self.targets[col]
    }

    /// Delimited table, one row per surrogate. White-box cells carry a `*`.
    pub fn to_table(&self, delim: char) -> String {
        let mut s = String::from("surrogate");
        for t in &self.targets {
            let _ = write!(s, "{delim}{t}");
        }
        s.push('\n');
        for (r, name) in self.surrogates.iter().enumerate() {
            s.push_str(name);
            for c in 0..self.targets.len() {
                let star = if self.is_white_box(r, c) { "*" } else { "" };
                let _ = write!(s, "{delim}{:.4}±{:.4}{star}", self.mean[r][c], self.std[r][c]);
            }
            s.push('\n');
        }
        s
    }

    /// Mean over all off-diagonal cells.
    pub fn black_box_mean(&self) -> f64 {
        let mut vals = vec![];
        for r in 0..self.surrogates.len() {
            for c in 0..self.targets.len() {
                if !self.is_white_box(r, c) {
                    vals.push(self.mean[r][c]);
                }
            }
        }
        mean_std(&vals).0
    }
}

/// Seed `s` of a study maps to attack seed `base + s`.
fn seeded(cfg: &AttackConfig, s: u64) -> AttackConfig {
    AttackConfig { seed: cfg.seed.wrapping_add(s), ..cfg.clone() }
}

fn evaluators<'a>(targets: &[NamedModel], split: &'a Dataset) -> Result<Vec<FoolingEvaluator<'a>>> {
    targets.iter().map(|t| FoolingEvaluator::new(&t.model, split)).collect()
}

/// Score precomputed perturbations: `deltas[r]` holds one delta per seed for
/// surrogate `r`.
pub fn transfer_matrix_from_deltas(
    deltas: &[(String, Vec<Tensor>)],
    targets: &[NamedModel],
    split: &Dataset,
) -> Result<TransferMatrix> {
    if deltas.is_empty() || targets.is_empty() {
        return Err(Error::Empty("transfer matrix"));
    }
    let seeds = deltas[0].1.len();
    if seeds == 0 || deltas.iter().any(|(_, d)| d.len() != seeds) {
        return Err(Error::invalid("transfer matrix", "every surrogate needs the same, non-zero number of deltas"));
    }
    let input = targets[0].model.input_spec();
    if let Some(t) = targets.iter().find(|t| t.model.input_spec() != input) {
        return Err(Error::ShapeMismatch {
            op: "transfer matrix",
            left: t.model.input_spec().dims().to_vec(),
            right: input.dims().to_vec(),
        });
    }
    let evals = evaluators(targets, split)?;
    let (mut mean, mut std) = (vec![], vec![]);
    for (_, ds) in deltas {
        let mut m = Vec::with_capacity(targets.len());
        let mut d = Vec::with_capacity(targets.len());
        for (e, t) in evals.iter().zip(targets) {
            let frs = ds.iter().map(|delta| e.fooling_rate(&t.model, delta)).collect::<Result<Vec<_>>>()?;
            let (mu, sd) = mean_std(&frs);
            m.push(mu);
            d.push(sd);
        }
        mean.push(m);
        std.push(d);
    }
    Ok(TransferMatrix {
        surrogates: deltas.iter().map(|(n, _)| n.clone()).collect(),
        targets: targets.iter().map(|m| m.name.clone()).collect(),
        mean,
        std,
        seeds,
    })
}

/// Craft `seeds` perturbations on every surrogate, then score them on every target.
pub fn transfer_matrix(
    surrogates: &[NamedModel],
    targets: &[NamedModel],
    split: &Dataset,
    cfg: &AttackConfig,
    seeds: usize,
) -> Result<TransferMatrix> {
    if seeds == 0 {
        return Err(Error::Empty("transfer matrix seeds"));
    }
    let deltas = surrogates
        .iter()
        .map(|s| {
            let ds = (0..seeds as u64).map(|k| craft(&s.model, &seeded(cfg, k)).map(|(p, _)| p.delta)).collect::<Result<_>>()?;
            Ok((s.name.clone(), ds))
        })
        .collect::<Result<Vec<_>>>()?;
    transfer_matrix_from_deltas(&deltas, targets, split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AttackMode,
    /// Black-box fooling rate averaged over surrogates and targets, one entry per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Mean black-box fooling rate of the configured mode per sample count.
    pub n_curve: Vec<(usize, f64)>,
}

impl AblationReport {
    pub fn row(&self, mode: AttackMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_table(&self, delim: char) -> String {
        let mut s = format!("mode{delim}mean_bb_fr{delim}std{delim}seeds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}{delim}{:.4}{delim}{:.4}{delim}{}", r.mode, r.mean, r.std, r.per_seed.len());
        }
        if !self.n_curve.is_empty() {
            let _ = writeln!(s, "samples{delim}mean_bb_fr");
            for (n, fr) in &self.n_curve {
                let _ = writeln!(s, "{n}{delim}{fr:.4}");
            }
        }
        s
    }
}

impl AblationRow {
    pub fn new(mode: AttackMode, per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self { mode, per_seed, mean, std }
    }
}

/// Per-seed mean black-box fooling rate of precomputed perturbations,
/// `deltas[i][k]` being seed `k` crafted on `zoo[i]`. Each surrogate is
/// scored on every other model of the zoo.
pub fn black_box_scores(zoo: &[NamedModel], split: &Dataset, deltas: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    scores_with(zoo, &evaluators(zoo, split)?, deltas)
}

fn scores_with(zoo: &[NamedModel], evals: &[FoolingEvaluator<'_>], deltas: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    if zoo.len() < 2 {
        return Err(Error::invalid("ablation", "need at least two models for black-box scores"));
    }
    if deltas.len() != zoo.len() {
        return Err(Error::invalid("ablation", "one delta list per zoo model required"));
    }
    let seeds = deltas[0].len();
    if seeds == 0 || deltas.iter().any(|d| d.len() != seeds) {
        return Err(Error::invalid("ablation", "every surrogate needs the same, non-zero number of deltas"));
    }
    let mut per_seed = vec![0.0; seeds];
    for (i, ds) in deltas.iter().enumerate() {
        for (k, delta) in ds.iter().enumerate() {
            let mut bb = 0.0;
            for (j, (e, t)) in evals.iter().zip(zoo).enumerate() {
                if j != i {
                    bb += e.fooling_rate(&t.model, delta)?;
                }
            }
            per_seed[k] += bb / (zoo.len() - 1) as f64;
        }
    }
    Ok(per_seed.into_iter().map(|v| v / zoo.len() as f64).collect())
}

fn craft_zoo(zoo: &[NamedModel], cfg: &AttackConfig, seeds: usize) -> Result<Vec<Vec<Tensor>>> {
    zoo.iter()
        .map(|s| (0..seeds as u64).map(|k| craft(&s.model, &seeded(cfg, k)).map(|(p, _)| p.delta)).collect())
        .collect()
}

/// Mean black-box fooling rate for each mode, plus a curve over sample
/// counts for `cfg.mode` (skipped when `n_values` is empty).
pub fn ablation_battery(
    zoo: &[NamedModel],
    split: &Dataset,
    cfg: &AttackConfig,
    modes: &[AttackMode],
    seeds: usize,
    n_values: &[usize],
) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::Empty("ablation seeds"));
    }
    let evals = evaluators(zoo, split)?;
    let mut rows = vec![];
    for &mode in modes {
        let deltas = craft_zoo(zoo, &AttackConfig { mode, ..cfg.clone() }, seeds)?;
        rows.push(AblationRow::new(mode, scores_with(zoo, &evals, &deltas)?));
    }
    let mut n_curve = vec![];
    for &n in n_values {
        let deltas = craft_zoo(zoo, &AttackConfig { samples: n, ..cfg.clone() }, seeds)?;
        n_curve.push((n, mean_std(&scores_with(zoo, &evals, &deltas)?).0));
    }
    Ok(AblationReport { rows, n_curve })
}

/// The label `model` assigns most often to `clamp(z + delta)` over prior
/// probes, with its share. Ties go to the lowest label.
pub fn dominant_label(model: &Model, delta: &Tensor, prior: &PriorSpec, probes: usize, seed: u64) -> Result<(usize, f64)> {
    if probes == 0 {
        return Err(Error::Empty("dominant label probes"));
    }
    let z = sample_prior_batch(prior, model.input_spec(), probes, &mut Rng::new(seed))?;
    let preds = model.predict(&perturb_batch(&z, delta)?)?;
    let hist = histogram(&preds, model.classes());
    let (label, count) = hist.iter().enumerate().fold((0, 0), |best, (l, &c)| if c > best.1 { (l, c) } else { best });
    Ok((label, count as f64 / probes as f64))
}

/// Predictions over random crop-resizes of the perturbation rendered as an
/// image, `(delta + eps) / (2 eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDiversity {
    pub histogram: Vec<usize>,
    /// Shannon entropy of the histogram, in nats.
    pub entropy: f64,
}

impl RegionDiversity {
    pub fn distinct_classes(&self) -> usize {
        self.histogram.iter().filter(|&&c| c > 0).count()
    }
}

pub fn region_diversity(
    model: &Model,
    delta: &Tensor,
    epsilon: f64,
    crops: usize,
    crop_range: (f64, f64),
    seed: u64,
) -> Result<RegionDiversity> {
    if crops == 0 {
        return Err(Error::Empty("region crops"));
    }
    let (lo, hi) = crop_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid("region_diversity", format!("crop range ({lo}, {hi})")));
    }
    let image = delta.map(|d| ((d + epsilon) / (2.0 * epsilon)).clamp(0.0, 1.0));
    let [_, h, w] = model.input_spec().dims();
    let mut rng = Rng::new(seed);
    let mut views = Vec::with_capacity(crops);
    for _ in 0..crops {
        let r = draw_crop(h, w, h.min(w), lo, hi, &mut rng)?;
        views.push(ResamplePlan::crop_resize(h, w, r.top, r.left, r.size, r.size, h, w)?.apply(&image)?);
    }
    let preds = model.predict(&Tensor::stack(&views)?)?;
    let hist = histogram(&preds, model.classes());
    Ok(RegionDiversity { entropy: entropy(&hist), histogram: hist })
}

pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Shannon entropy in nats of a count histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes;
    use crate::nn::{Arch, InputSpec};

    const SPEC: InputSpec = InputSpec::new(1, 16, 16);

    fn model(seed: u64) -> Model {
        Model::build(Arch::TinyA, 4, SPEC, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn zero_delta_fools_nothing() {
        let m = model(1);
        let d = gen_shapes(20, 4, SPEC, &mut Rng::new(2)).unwrap();
        assert_eq!(fooling_rate(&m, &d, &Tensor::zeros(&[1, 16, 16])).unwrap(), 0.0);
    }

    #[test]
    fn fooling_rate_counts_flips() {
        let m = model(1);
        let d = gen_shapes(40, 4, SPEC, &mut Rng::new(2)).unwrap();
        let delta = Tensor::uniform(&[1, 16, 16], -0.5, 0.5, &mut Rng::new(3));
        let clean = m.predict(d.images()).unwrap();
        let adv = m.predict(&perturb_batch(d.images(), &delta).unwrap()).unwrap();
        let flips = clean.iter().zip(&adv).filter(|(a, b)| a != b).count();
        assert_eq!(fooling_rate(&m, &d, &delta).unwrap(), flips as f64 / 40.0);
    }

    #[test]
    fn perturb_clamps_and_checks_shape() {
        let x = Tensor::full(&[2, 1, 2, 2], 0.95);
        let p = perturb_batch(&x, &Tensor::full(&[1, 2, 2], 0.1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.0));
        assert!(perturb_batch(&x, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[5, 0, 0]), 0.0);
        assert!((entropy(&[1, 1]) - 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&[1, 1, 1, 1]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn dominant_label_share_in_range() {
        let m = model(4);
        let (label, share) = dominant_label(&m, &Tensor::zeros(&[1, 16, 16]), &PriorSpec::default(), 100, 1).unwrap();
        assert!(label < 4);
        assert!((0.25..=1.0).contains(&share));
    }

    #[test]
    fn region_histogram_sums_to_crops() {
        let m = model(5);
        let delta = Tensor::uniform(&[1, 16, 16], -0.04, 0.04, &mut Rng::new(6));
        let r = region_diversity(&m, &delta, 0.04, 50, (0.3, 0.9), 7).unwrap();
        assert_eq!(r.histogram.iter().sum::<usize>(), 50);
        assert!(r.entropy >= 0.0 && r.entropy <= 4f64.ln() + 1e-12);
    }

    #[test]
    fn zero_deltas_give_zero_matrix() {
        let zoo = vec![NamedModel::new("a", model(1)), NamedModel::new("b", model(2))];
        let split = gen_shapes(12, 4, SPEC, &mut Rng::new(3)).unwrap();
        let zero = Tensor::zeros(&[1, 16, 16]);
        let deltas = vec![("a".to_string(), vec![zero.clone()]), ("b".to_string(), vec![zero])];
        let tm = transfer_matrix_from_deltas(&deltas, &zoo, &split).unwrap();
        assert!(tm.mean.iter().flatten().all(|&v| v == 0.0));
        assert!(tm.is_white_box(0, 0) && !tm.is_white_box(0, 1));
    }

    #[test]
    fn one_flip_in_four() {
        // Pick three images a delta leaves alone and one it flips.
        let m = model(1);
        let pool = gen_shapes(200, 4, SPEC, &mut Rng::new(2)).unwrap();
        let delta = Tensor::uniform(&[1, 16, 16], -0.3, 0.3, &mut Rng::new(3));
        let clean = m.predict(pool.images()).unwrap();
        let adv = m.predict(&perturb_batch(pool.images(), &delta).unwrap()).unwrap();
        let flipped: Vec<usize> = (0..200).filter(|&i| clean[i] != adv[i]).take(1).collect();
        let kept: Vec<usize> = (0..200).filter(|&i| clean[i] == adv[i]).take(3).collect();
        assert_eq!((flipped.len(), kept.len()), (1, 3));
        let fixture = pool.subset(&[kept[0], flipped[0], kept[1], kept[2]]);
        assert_eq!(fooling_rate(&m, &fixture, &delta).unwrap(), 0.25);
    }

    #[test]
    fn constant_delta_has_zero_region_entropy() {
        let m = model(5);
        let r = region_diversity(&m, &Tensor::full(&[1, 16, 16], 0.01), 0.04, 100, (0.3, 0.9), 2).unwrap();
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.distinct_classes(), 1);
    }

    #[test]
    fn studies_are_deterministic() {
        let m = model(4);
        let d = Tensor::uniform(&[1, 16, 16], -0.04, 0.04, &mut Rng::new(6));
        let a = dominant_label(&m, &d, &PriorSpec::default(), 100, 3).unwrap();
        assert_eq!(a, dominant_label(&m, &d, &PriorSpec::default(), 100, 3).unwrap());
        let r = region_diversity(&m, &d, 0.04, 100, (0.3, 0.9), 1).unwrap();
        assert_eq!(r, region_diversity(&m, &d, 0.04, 100, (0.3, 0.9), 1).unwrap());
    }

    #[test]
    fn transfer_table_layout() {
        let zoo = vec![NamedModel::new("a", model(1)), NamedModel::new("b", model(2))];
        let split = gen_shapes(12, 4, SPEC, &mut Rng::new(3)).unwrap();
        let cfg = AttackConfig { samples: 2, max_iters: 4, validation_period: 2, validation_probes: 8, ..Default::default() };
        let tm = transfer_matrix(&zoo, &zoo, &split, &cfg, 2).unwrap();
        let table = tm.to_table(',');
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "surrogate,a,b");
        assert!(lines[1].split(',').nth(1).unwrap().ends_with('*'));
        assert!(!lines[1].split(',').nth(2).unwrap().ends_with('*'));
        assert!(lines[2].ends_with('*'));
    }

    #[test]
    fn ablation_rows_per_mode() {
        let zoo = vec![NamedModel::new("a", model(1)), NamedModel::new("b", model(2))];
        let split = gen_shapes(12, 4, SPEC, &mut Rng::new(3)).unwrap();
        let cfg = AttackConfig { samples: 2, max_iters: 3, validation_period: 3, validation_probes: 8, ..Default::default() };
        let modes = [AttackMode::RandomPrior, AttackMode::Psp, AttackMode::Full];
        let rep = ablation_battery(&zoo, &split, &cfg, &modes, 2, &[1, 2]).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.n_curve.len(), 2);
        assert!(rep.rows.iter().all(|r| r.per_seed.len() == 2 && (0.0..=1.0).contains(&r.mean)));
    }
}
