//! One function per subcommand. Each writes its artifacts into an output
//! directory: the result files, `runlog.txt` (config echo followed by the
//! run records) and `config.echo`. Timings go to `wallclock.txt` so the
//! other files stay byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use psp_core::attack::{craft, AttackConfig, AttackMode, RunLog};
use psp_core::data::{save_idx, Dataset};
use psp_core::eval::{
    black_box_scores, dominant_label, region_diversity, transfer_matrix_from_deltas, AblationReport, AblationRow,
    FoolingEvaluator, NamedModel, TransferMatrix,
};
use psp_core::nn::Model;
use psp_core::trainer::{accuracy, generalization_warning, train};
use psp_core::{Rng, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::files::{export_image, read_delta, write_delta};
use crate::pool::par_map;

pub const RUNLOG: &str = "runlog.txt";
pub const CONFIG_ECHO: &str = "config.echo";
pub const WALLCLOCK: &str = "wallclock.txt";

/// Config file (if any) followed by `section.key=value` overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn write_run_files(out: &Path, cfg: &RunConfig, records: &str, elapsed: Duration) -> CliResult<()> {
    let echo = cfg.echo();
    let mut log = String::new();
    for line in echo.lines() {
        let _ = writeln!(log, "# config {line}");
    }
    log.push_str(records);
    write(&out.join(CONFIG_ECHO), echo)?;
    write(&out.join(RUNLOG), log)?;
    write(&out.join(WALLCLOCK), format!("{:.3}\n", elapsed.as_secs_f64()))
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(|e| match e {
        psp_core::Error::Io { .. } => e.into(),
        other => CliError::format(path, other.to_string()),
    })
}

fn check_delta(model: &Model, delta: &Tensor, path: &Path) -> CliResult<()> {
    let want = model.input_spec().dims();
    if delta.shape() != want {
        return Err(CliError::SpecMismatch(format!(
            "{}: delta shape {:?} does not match model input {:?}",
            path.display(),
            delta.shape(),
            want
        )));
    }
    Ok(())
}

fn check_split(model: &Model, split: &Dataset) -> CliResult<()> {
    if split.input_spec() != model.input_spec() {
        return Err(CliError::SpecMismatch(format!(
            "dataset input {} does not match model input {}",
            split.input_spec(),
            model.input_spec()
        )));
    }
    Ok(())
}

/// Models named after their file stems; names must be distinct.
pub fn load_zoo(paths: &[PathBuf]) -> CliResult<Vec<NamedModel>> {
    let mut zoo: Vec<NamedModel> = vec![];
    for p in paths {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if zoo.iter().any(|m| m.name == name) {
            return Err(CliError::Usage(format!("duplicate model name `{name}`")));
        }
        zoo.push(NamedModel::new(name, load_model(p)?));
    }
    if let Some(first) = zoo.first() {
        if let Some(m) = zoo.iter().find(|m| m.model.input_spec() != first.model.input_spec()) {
            return Err(CliError::SpecMismatch(format!("model `{}` input differs from `{}`", m.name, first.name)));
        }
    }
    Ok(zoo)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub warning: Option<String>,
}

/// Train `model.arch` on the configured data. Also saves the test split as
/// IDX files for later evaluation.
pub fn train_model(cfg: &RunConfig, out: &Path) -> CliResult<TrainSummary> {
    let started = Instant::now();
    prepare_out(out)?;
    let splits = cfg.data.load()?;
    let classes = splits.train.classes();
    let init = Model::build(cfg.model.arch, classes, splits.train.input_spec(), &mut Rng::new(cfg.model.seed))?;
    let (model, stats) = train(&init, &splits.train, &cfg.train)?;
    let train_acc = accuracy(&model, &splits.train)?;
    let test_acc = if splits.test.is_empty() { f64::NAN } else { accuracy(&model, &splits.test)? };
    let path = out.join("model.pspc");
    model.save(&path)?;
    if !splits.test.is_empty() {
        save_idx(&splits.test, &out.join("test-images.idx"), &out.join("test-labels.idx"))?;
    }

    let mut rec = String::new();
    for s in &stats {
        let _ = writeln!(rec, "epoch {} loss {:.12e} train_acc {:.6}", s.epoch, s.loss, s.train_accuracy);
    }
    let _ = writeln!(rec, "train_accuracy {train_acc:.6}");
    let _ = writeln!(rec, "test_accuracy {test_acc:.6}");
    let _ = writeln!(rec, "# model_hash {}", model.fingerprint());
    let warning = generalization_warning(train_acc, test_acc);
    if let Some(w) = &warning {
        let _ = writeln!(rec, "# warning {w}");
    }
    write_run_files(out, cfg, &rec, started.elapsed())?;
    Ok(TrainSummary { model: path, train_accuracy: train_acc, test_accuracy: test_acc, warning })
}

#[derive(Clone, Debug)]
pub struct CraftSummary {
    pub delta: Tensor,
    pub log: RunLog,
}

/// Craft one perturbation. Writes `delta.f64`, `delta.ppm` (P5 for
/// grayscale, P6 for color) and the run files.
pub fn craft_uap(model_path: &Path, cfg: &RunConfig, out: &Path) -> CliResult<CraftSummary> {
    prepare_out(out)?;
    let model = load_model(model_path)?;
    let (p, log) = craft(&model, &cfg.attack)?;
    write_delta(&p.delta, &out.join("delta.f64"))?;
    export_image(&p.delta, p.epsilon, &out.join("delta.ppm"))?;
    write_run_files(out, cfg, &log.to_text(), log.wall_clock)?;
    Ok(CraftSummary { delta: p.delta, log })
}

/// Cleanly classified evaluation images: an explicit IDX pair, or the named
/// split of the configured data.
pub fn eval_split(cfg: &RunConfig, split: &str, idx: Option<(&Path, &Path)>) -> CliResult<Dataset> {
    match idx {
        Some((images, labels)) => Ok(psp_core::data::load_idx(images, labels)?),
        None => cfg.data.split(split),
    }
}

pub fn eval_fr(model_path: &Path, delta_path: &Path, data: &Dataset, cfg: &RunConfig, out: Option<&Path>) -> CliResult<f64> {
    let started = Instant::now();
    let model = load_model(model_path)?;
    let delta = read_delta(delta_path)?;
    check_delta(&model, &delta, delta_path)?;
    check_split(&model, data)?;
    let fr = FoolingEvaluator::new(&model, data)?.fooling_rate(&model, &delta)?;
    if let Some(out) = out {
        prepare_out(out)?;
        let rec = format!("# model_hash {}\nimages {}\nfr {fr:.6}\n", model.fingerprint(), data.len());
        write_run_files(out, cfg, &rec, started.elapsed())?;
    }
    Ok(fr)
}

fn seeded(cfg: &AttackConfig, k: usize) -> AttackConfig {
    AttackConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() }
}

struct Job<'a> {
    label: String,
    model: &'a NamedModel,
    cfg: AttackConfig,
}

/// Craft every job on the pool; returns deltas and one log line per job.
fn run_jobs(jobs: &[Job<'_>], workers: usize) -> CliResult<(Vec<Tensor>, String)> {
    let results = par_map(jobs, workers, |j| craft(&j.model.model, &j.cfg));
    let mut deltas = vec![];
    let mut rec = String::new();
    for (j, r) in jobs.iter().zip(results) {
        let (p, log) = r?;
        let _ = writeln!(
            rec,
            "craft {} surrogate {} seed {} iters {} selected {} probe_fr {:.6} config_hash {}",
            j.label,
            j.model.name,
            j.cfg.seed,
            log.iterations.len(),
            p.iteration,
            p.fooling_rate.unwrap_or(f64::NAN),
            log.config_hash
        );
        deltas.push(p.delta);
    }
    Ok((deltas, rec))
}

pub enum TransferSource {
    /// Craft `seeds` perturbations on each model of the zoo.
    Craft { seeds: usize },
    /// Precomputed `(surrogate name, delta file)` pairs; several files per
    /// name are treated as seeds.
    Files(Vec<(String, PathBuf)>),
}

pub fn transfer(
    zoo: &[NamedModel],
    source: TransferSource,
    data: &Dataset,
    cfg: &RunConfig,
    workers: usize,
    out: &Path,
) -> CliResult<TransferMatrix> {
    let started = Instant::now();
    prepare_out(out)?;
    if let Some(first) = zoo.first() {
        check_split(&first.model, data)?;
    }
    let (deltas, rec) = match source {
        TransferSource::Craft { seeds } => {
            if seeds == 0 {
                return Err(CliError::Usage("--seeds must be positive".into()));
            }
            let jobs: Vec<Job> = zoo
                .iter()
                .flat_map(|m| (0..seeds).map(move |k| (m, k)))
                .map(|(m, k)| Job { label: cfg.attack.mode.to_string(), model: m, cfg: seeded(&cfg.attack, k) })
                .collect();
            let (flat, rec) = run_jobs(&jobs, workers)?;
            let grouped = zoo.iter().zip(flat.chunks(seeds)).map(|(m, d)| (m.name.clone(), d.to_vec())).collect();
            (grouped, rec)
        }
        TransferSource::Files(files) => {
            let mut grouped: Vec<(String, Vec<Tensor>)> = vec![];
            let mut rec = String::new();
            for (name, path) in files {
                let d = read_delta(&path)?;
                if let Some(m) = zoo.first() {
                    check_delta(&m.model, &d, &path)?;
                }
                let _ = writeln!(rec, "delta {name} {}", path.display());
                match grouped.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, v)) => v.push(d),
                    None => grouped.push((name, vec![d])),
                }
            }
            (grouped, rec)
        }
    };
    let tm = transfer_matrix_from_deltas(&deltas, zoo, data)?;
    let table = tm.to_table(',');
    write(&out.join("transfer.csv"), &table)?;
    let rec = format!("{rec}black_box_mean {:.6}\n{table}", tm.black_box_mean());
    write_run_files(out, cfg, &rec, started.elapsed())?;
    Ok(tm)
}

pub fn ablate(
    zoo: &[NamedModel],
    modes: &[AttackMode],
    seeds: usize,
    n_values: &[usize],
    data: &Dataset,
    cfg: &RunConfig,
    workers: usize,
    out: &Path,
) -> CliResult<AblationReport> {
    let started = Instant::now();
    prepare_out(out)?;
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    if let Some(first) = zoo.first() {
        check_split(&first.model, data)?;
    }
    // One setting per table row: every mode, then the sample-count sweep.
    let settings: Vec<(String, AttackConfig)> = modes
        .iter()
        .map(|&mode| (mode.to_string(), AttackConfig { mode, ..cfg.attack.clone() }))
        .chain(n_values.iter().map(|&n| (format!("samples={n}"), AttackConfig { samples: n, ..cfg.attack.clone() })))
        .collect();
    let jobs: Vec<Job> = settings
        .iter()
        .flat_map(|(label, c)| zoo.iter().flat_map(move |m| (0..seeds).map(move |k| Job { label: label.clone(), model: m, cfg: seeded(c, k) })))
        .collect();
    let (flat, mut rec) = run_jobs(&jobs, workers)?;

    let per_setting = zoo.len() * seeds;
    let mut rows = vec![];
    let mut n_curve = vec![];
    for (i, chunk) in flat.chunks(per_setting).enumerate() {
        let deltas: Vec<Vec<Tensor>> = chunk.chunks(seeds).map(|c| c.to_vec()).collect();
        let scores = black_box_scores(zoo, data, &deltas)?;
        let _ = writeln!(rec, "scores {} {}", settings[i].0, scores.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(" "));
        if i < modes.len() {
            rows.push(AblationRow::new(modes[i], scores));
        } else {
            let (mean, _) = psp_core::eval::mean_std(&scores);
            n_curve.push((n_values[i - modes.len()], mean));
        }
    }
    let report = AblationReport { rows, n_curve };
    let table = report.to_table(',');
    write(&out.join("ablation.csv"), &table)?;
    rec.push_str(&table);
    write_run_files(out, cfg, &rec, started.elapsed())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub dominant_label: usize,
    pub dominant_share: f64,
    pub region_histogram: Vec<usize>,
    pub region_entropy: f64,
}

impl Analysis {
    pub fn to_text(&self) -> String {
        let hist: Vec<String> = self.region_histogram.iter().map(|c| c.to_string()).collect();
        let distinct = self.region_histogram.iter().filter(|&&c| c > 0).count();
        format!(
            "dominant_label {} share {:.6}\nregion_histogram {}\nregion_distinct {distinct}\nregion_entropy {:.6}\n",
            self.dominant_label,
            self.dominant_share,
            hist.join(","),
            self.region_entropy
        )
    }
}

/// Dominant label over prior probes, and class diversity over crops of the
/// perturbation rendered as an image.
pub fn analyze_uap(
    model_path: &Path,
    delta_path: &Path,
    cfg: &RunConfig,
    probes: usize,
    crops: usize,
    out: &Path,
) -> CliResult<Analysis> {
    let started = Instant::now();
    prepare_out(out)?;
    let model = load_model(model_path)?;
    let delta = read_delta(delta_path)?;
    check_delta(&model, &delta, delta_path)?;
    let a = &cfg.attack;
    let (label, share) = dominant_label(&model, &delta, &a.prior, probes, a.seed)?;
    let region = region_diversity(&model, &delta, a.epsilon, crops, a.crop_range, a.seed)?;
    let analysis =
        Analysis { dominant_label: label, dominant_share: share, region_histogram: region.histogram, region_entropy: region.entropy };
    let text = analysis.to_text();
    write(&out.join("analysis.txt"), &text)?;
    write_run_files(out, cfg, &format!("# model_hash {}\nprobes {probes}\ncrops {crops}\n{text}", model.fingerprint()), started.elapsed())?;
    Ok(analysis)
}

pub fn export(delta_path: &Path, epsilon: f64, out: &Path) -> CliResult<()> {
    let delta = read_delta(delta_path)?;
    export_image(&delta, epsilon, out)
}
