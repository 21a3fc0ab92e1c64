//! Subcommands. Each one reads its inputs, writes into a fresh output
//! directory, and finishes by writing that directory's `manifest.json`.
//!
//! Configuration precedence is flags > `--config` file > defaults. Settings
//! fixed by an upstream artifact (the suite for a data directory, the network
//! and pre-training for a checkpoint) are taken from that artifact's manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use delta_core::arithmetic::{addition_grid, negation_grid, TaskVector};
use delta_core::curvature::{ekfac, exact_ggn, kfac_factors, EkfacState};
use delta_core::metrics::EvalReport;
use delta_core::taskgen::{make_reference_variant, make_suite, ReferenceVariant, Samples, Split};
use delta_core::trainer::{pretrain, train, trace_csv, ApkdMode, Method};
use delta_core::Error;

use crate::artifacts::{load_suite, save_suite, task_file, Checkpoint, CHECKPOINT_FILE, CURVATURE_FILE, REFERENCE_FILE, STUDENT_FILE, TEACHER_FILE};
use crate::config::LabConfig;
use crate::experiment::{analyze, run_experiment, summary_text, MethodDetail, MethodSummary, RunVectors};
use crate::lab::{Lab, LabResult, ModelKind};
use crate::manifest::{check_compatible, OutDir, RunManifest};
use crate::output::{localization_csv, negation_csv, negation_text, sweep_csv, teacher_table, write_values};
use crate::LabError;

/// Largest Jacobian (features × parameters) the exact-GGN oracle will build.
pub const ORACLE_BUDGET: usize = 1 << 14;

#[derive(Debug, Parser)]
#[command(name = "delta-lab", version, about = "Distilled linearized task arithmetic on synthetic task suites")]
pub struct Cli {
    /// Worker threads (default: available cores). DELTA_LAB_THREADS overrides.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the task suite and the reference set.
    GenData(GenDataArgs),
    /// Pre-train the base model on the reference set.
    Pretrain(PretrainArgs),
    /// Estimate EK-FAC curvature of the pre-trained model.
    Curvature(CurvatureArgs),
    /// Fine-tune one task vector.
    Train(TrainArgs),
    /// Add task vectors and evaluate the merged model.
    Merge(MergeArgs),
    /// Subtract a task vector and evaluate target and control accuracy.
    Negate(NegateArgs),
    /// Analyze a set of training runs.
    Report(ReportArgs),
    /// Run the full comparison end to end.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Upstream {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_task: Option<usize>,
    #[arg(long)]
    pub center_separation: Option<f64>,
    #[arg(long)]
    pub cluster_std: Option<f64>,
    #[arg(long)]
    pub reference_factor: Option<usize>,
    #[arg(long)]
    pub pretext_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CurvatureArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub upstream: Upstream,
    #[arg(long)]
    pub damping: Option<f64>,
    /// Reference set: broad, union_only or single_task_proxy:<task>.
    #[arg(long, default_value = "broad")]
    pub variant: String,
    /// Also build the exact GGN (tiny nets only) and record the Frobenius gaps.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta_teacher: Option<f64>,
    #[arg(long)]
    pub beta_student: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Along-path distillation: sampled or fixed_1.
    #[arg(long)]
    pub apkd: Option<String>,
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub upstream: Upstream,
    /// Directory written by `curvature`; required when a drift penalty is active.
    #[arg(long)]
    pub curvature: Option<PathBuf>,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub task: usize,
    /// Name grouping this run in reports (default: the method).
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub upstream: Upstream,
    /// Task-vector files or `train` output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub vectors: Vec<PathBuf>,
    #[arg(long, conflicts_with = "sweep")]
    pub alpha: Option<f64>,
    /// Evaluate a coefficient grid and select the best mean accuracy.
    #[arg(long)]
    pub sweep: bool,
    /// Comma-separated coefficient grid for `--sweep`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct NegateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub upstream: Upstream,
    /// Task-vector file or `train` output directory.
    #[arg(long)]
    pub vector: PathBuf,
    #[arg(long, conflicts_with = "sweep")]
    pub alpha: Option<f64>,
    /// Evaluate a coefficient grid and select under the control budget.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Allowed control-accuracy loss in accuracy points.
    #[arg(long)]
    pub budget: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub upstream: Upstream,
    /// `train` output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Omit heatmaps and edit distances instead of refusing on single-task suites.
    #[arg(long)]
    pub skip_pairwise: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
}

pub fn run(cli: Cli) -> LabResult<RunManifest> {
    crate::init_threads(cli.threads);
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Curvature(a) => curvature(a),
        Command::Train(a) => cmd_train(a),
        Command::Merge(a) => merge(a),
        Command::Negate(a) => negate(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut LabConfig) -> LabResult<()> {
        let t = &mut cfg.train;
        set(&mut t.steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.beta_teacher, self.beta_teacher);
        set(&mut t.beta_student, self.beta_student);
        set(&mut t.gamma, self.gamma);
        set(&mut t.seed, self.train_seed);
        if let Some(mode) = &self.apkd {
            t.apkd_mode = match mode.as_str() {
                "sampled" => ApkdMode::Sampled,
                "fixed_1" => ApkdMode::Fixed1,
                other => return Err(Error::InvalidConfig(format!("unknown apkd mode `{other}`")).into()),
            };
        }
        Ok(())
    }
}

fn parse_variant(s: &str) -> LabResult<ReferenceVariant> {
    match s {
        "broad" => Ok(ReferenceVariant::Broad),
        "union_only" => Ok(ReferenceVariant::UnionOnly),
        _ => s
            .strip_prefix("single_task_proxy:")
            .and_then(|t| t.parse().ok())
            .map(ReferenceVariant::SingleTaskProxy)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reference variant `{s}`")).into()),
    }
}

fn expect_command(m: &RunManifest, dir: &Path, command: &str) -> LabResult<()> {
    if m.command != command {
        return Err(LabError::Incompatible(format!("{} holds `{}` output, expected `{command}`", dir.display(), m.command)));
    }
    Ok(())
}

fn base_hash(m: &RunManifest) -> Option<&str> {
    m.param("base_hash").and_then(|v| v.as_str())
}

/// Merges upstream manifests into the configuration of a downstream stage.
fn upstream_config(file: Option<&Path>, up: &Upstream) -> LabResult<(LabConfig, RunManifest)> {
    let mut cfg = LabConfig::load_or_default(file)?;
    let data = RunManifest::load(&up.data)?;
    expect_command(&data, &up.data, "gen-data")?;
    let ckpt = RunManifest::load(&up.checkpoint)?;
    expect_command(&ckpt, &up.checkpoint, "pretrain")?;
    if ckpt.config.suite != data.config.suite {
        return Err(LabError::Incompatible(format!(
            "checkpoint {} was pre-trained on a different suite than {}",
            up.checkpoint.display(),
            up.data.display()
        )));
    }
    cfg.suite = data.config.suite;
    cfg.net = ckpt.config.net.clone();
    cfg.pretrain = ckpt.config.pretrain.clone();
    Ok((cfg, ckpt))
}

fn record_suite_inputs(out: &mut OutDir, cfg: &LabConfig, data: &Path) -> LabResult<()> {
    for t in 0..cfg.suite.tasks {
        out.input(&data.join(task_file(t)))?;
    }
    out.input(&data.join(REFERENCE_FILE))
}

/// Loads suite and checkpoint into a lab, recording them as inputs.
fn load_lab(cfg: &LabConfig, up: &Upstream, out: &mut OutDir) -> LabResult<Lab> {
    let suite = load_suite(&cfg.suite, &up.data)?;
    record_suite_inputs(out, cfg, &up.data)?;
    let ckpt_path = up.checkpoint.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    out.input(&ckpt_path)?;
    if ckpt.spec != cfg.network_spec()? {
        return Err(LabError::Incompatible("checkpoint network differs from its manifest".into()));
    }
    out.param("base_hash", ckpt.theta0.content_hash());
    Lab::from_parts(cfg.clone(), suite, ckpt, None)
}

/// A task-vector file, or the student vector inside a `train` directory.
fn vector_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(STUDENT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_vector(lab: &Lab, p: &Path, out: &mut OutDir) -> LabResult<(usize, TaskVector)> {
    let path = vector_path(p);
    if !path.exists() {
        return Err(LabError::Missing(format!("task vector {}", path.display())));
    }
    let tau = TaskVector::load(&path)?;
    out.input(&path)?;
    tau.check_base(&lab.theta0)?;
    Ok((lab.task_index(&tau.task_id)?, tau))
}

fn kind_of(taus: &[&TaskVector]) -> LabResult<ModelKind> {
    let linear = taus.iter().filter(|t| t.method == Method::LinearFt.name()).count();
    match linear {
        0 => Ok(ModelKind::NonLinear),
        n if n == taus.len() => Ok(ModelKind::Linearized),
        _ => Err(LabError::Incompatible("cannot combine linearized and non-linear task vectors".into())),
    }
}

fn gen_data(a: GenDataArgs) -> LabResult<RunManifest> {
    let mut cfg = LabConfig::load_or_default(a.common.config.as_deref())?;
    let s = &mut cfg.suite;
    set(&mut s.seed, a.seed);
    set(&mut s.tasks, a.tasks);
    set(&mut s.classes, a.classes);
    set(&mut s.input_dim, a.input_dim);
    set(&mut s.samples_per_task, a.samples_per_task);
    set(&mut s.center_separation, a.center_separation);
    set(&mut s.cluster_std, a.cluster_std);
    set(&mut s.reference_factor, a.reference_factor);
    set(&mut s.pretext_noise, a.pretext_noise);
    cfg.suite.validate()?;
    let mut out = OutDir::create(&a.common.out, "gen-data", &cfg, cfg.suite.seed, a.common.force)?;
    let suite = make_suite(&cfg.suite)?;
    for name in save_suite(&suite, &out.path)? {
        out.output(&name)?;
    }
    out.param("task_ids", suite.tasks.iter().map(|t| t.task_id.clone()).collect::<Vec<_>>());
    out.finish()
}

fn cmd_pretrain(a: PretrainArgs) -> LabResult<RunManifest> {
    let mut cfg = LabConfig::load_or_default(a.common.config.as_deref())?;
    let data = RunManifest::load(&a.data)?;
    expect_command(&data, &a.data, "gen-data")?;
    cfg.suite = data.config.suite;
    set(&mut cfg.pretrain.steps, a.steps);
    set(&mut cfg.pretrain.learning_rate, a.lr);
    set(&mut cfg.pretrain.seed, a.seed);
    let spec = cfg.network_spec()?;
    let mut out = OutDir::create(&a.common.out, "pretrain", &cfg, cfg.pretrain.seed, a.common.force)?;
    let suite = load_suite(&cfg.suite, &a.data)?;
    record_suite_inputs(&mut out, &cfg, &a.data)?;
    let (theta0, head) = pretrain(&spec, &suite.reference, &cfg.pretrain)?;
    out.param("base_hash", theta0.content_hash());
    out.param("spec_hash", spec.hash());
    let ckpt = Checkpoint { spec, theta0, head };
    ckpt.save(&out.file(CHECKPOINT_FILE))?;
    out.output(CHECKPOINT_FILE)?;
    let lab = Lab::from_parts(cfg, suite, ckpt, None)?;
    out.param("pretrained_accuracy", lab.pretrained_accuracies()?);
    out.finish()
}

fn curvature(a: CurvatureArgs) -> LabResult<RunManifest> {
    let (mut cfg, _) = upstream_config(a.common.config.as_deref(), &a.upstream)?;
    set(&mut cfg.damping, a.damping);
    cfg.validate()?;
    let variant = parse_variant(&a.variant)?;
    let mut out = OutDir::create(&a.common.out, "curvature", &cfg, cfg.suite.seed, a.common.force)?;
    let lab = load_lab(&cfg, &a.upstream, &mut out)?;
    let reference = match variant {
        ReferenceVariant::Broad => lab.suite.reference.clone(),
        v => make_reference_variant(&cfg.suite, v)?,
    };
    let samples = Samples::from_dataset(&reference, Split::All);
    let state = ekfac(&lab.spec, &lab.theta0, samples.view(), cfg.damping)?;
    state.save(&out.file(CURVATURE_FILE))?;
    out.output(CURVATURE_FILE)?;
    out.param("variant", variant);
    out.param("damping", cfg.damping);
    if a.oracle {
        let ggn = exact_ggn(&lab.spec, &lab.theta0, samples.view(), ORACLE_BUDGET)?.matrix;
        let kfac = kfac_factors(&lab.spec, &lab.theta0, samples.view())?.dense(&lab.spec);
        let mut gaps = BTreeMap::new();
        gaps.insert("ggn_frobenius_norm", ggn.norm());
        gaps.insert("ekfac_frobenius_gap", (state.dense() - &ggn).norm());
        gaps.insert("kfac_frobenius_gap", (kfac - &ggn).norm());
        out.param("oracle", gaps);
    }
    out.finish()
}

fn load_curvature(path: Option<&Path>, ckpt: &RunManifest, out: &mut OutDir) -> LabResult<EkfacState> {
    let dir = path.ok_or_else(|| LabError::Missing("--curvature is required when a drift penalty is active (beta > 0)".into()))?;
    let m = RunManifest::load(dir)?;
    expect_command(&m, dir, "curvature")?;
    if base_hash(&m) != base_hash(ckpt) {
        return Err(LabError::Incompatible(format!("curvature {} was computed for a different checkpoint", dir.display())));
    }
    let file = dir.join(CURVATURE_FILE);
    let state = EkfacState::load(&file)?;
    out.input(&file)?;
    Ok(state)
}

fn cmd_train(a: TrainArgs) -> LabResult<RunManifest> {
    let (mut cfg, ckpt_manifest) = upstream_config(a.common.config.as_deref(), &a.upstream)?;
    cfg.train.method = Method::parse(&a.method)?;
    a.train.apply(&mut cfg)?;
    cfg.validate()?;
    if a.task >= cfg.suite.tasks {
        return Err(Error::InvalidConfig(format!("task {} out of range for {} tasks", a.task, cfg.suite.tasks)).into());
    }
    let label = a.label.clone().unwrap_or_else(|| a.method.clone());
    let mut out = OutDir::create(&a.common.out, "train", &cfg, cfg.train.seed, a.common.force)?;
    let lab = load_lab(&cfg, &a.upstream, &mut out)?;
    let state = if cfg.train.needs_curvature() {
        Some(load_curvature(a.curvature.as_deref(), &ckpt_manifest, &mut out)?)
    } else {
        None
    };
    let outcome = train(&cfg.train, &lab.suite.tasks[a.task], &lab.spec, &lab.theta0, &lab.head, state.as_ref())?;
    outcome.tau_student.save(&out.file(STUDENT_FILE))?;
    out.output(STUDENT_FILE)?;
    if let Some(t) = &outcome.tau_teacher {
        t.save(&out.file(TEACHER_FILE))?;
        out.output(TEACHER_FILE)?;
    }
    out.write_text("trace.csv", &trace_csv(&outcome.trace))?;
    out.param("method", cfg.train.method);
    out.param("label", label);
    out.param("task", a.task);
    out.param("task_id", &outcome.tau_student.task_id);
    out.param("train_wall_clock_ms", outcome.wall_clock_ms);
    out.finish()
}

fn merge(a: MergeArgs) -> LabResult<RunManifest> {
    let (cfg, _) = upstream_config(a.common.config.as_deref(), &a.upstream)?;
    cfg.validate()?;
    let mut out = OutDir::create(&a.common.out, "merge", &cfg, cfg.suite.seed, a.common.force)?;
    let lab = load_lab(&cfg, &a.upstream, &mut out)?;
    let mut vectors = Vec::new();
    for p in &a.vectors {
        vectors.push(load_vector(&lab, p, &mut out)?);
    }
    let kind = kind_of(&vectors.iter().map(|(_, t)| t).collect::<Vec<_>>())?;
    let taus: Vec<TaskVector> = vectors.iter().map(|(_, t)| t.clone()).collect();
    let alpha = if a.sweep {
        let grid = a.grid.clone().unwrap_or_else(addition_grid);
        if grid.is_empty() {
            return Err(Error::Empty("alpha grid").into());
        }
        let curve = lab.addition_sweep(kind, &taus, &grid)?;
        out.write_text("sweep.csv", &sweep_csv(&curve))?;
        out.write_json("sweep.json", &curve)?;
        out.param("selected_alpha", curve.best_alpha());
        curve.best_alpha()
    } else {
        a.alpha.unwrap_or(1.0)
    };
    let absolute = lab.merged_accuracies(kind, &taus, alpha)?;
    // Tasks without a vector have no individual reference; they report no normalized score.
    let mut individual = vec![0.0; lab.task_count()];
    for (t, tau) in &vectors {
        individual[*t] = lab.individual_accuracy(kind, tau, *t)?;
    }
    let report = EvalReport::new("merge", alpha, lab.task_ids(), absolute, Some(&individual))?;
    out.write_text("report.txt", &report.to_text())?;
    out.write_json("report.json", &report)?;
    out.param("alpha", alpha);
    out.finish()
}

fn negate(a: NegateArgs) -> LabResult<RunManifest> {
    let (mut cfg, _) = upstream_config(a.common.config.as_deref(), &a.upstream)?;
    set(&mut cfg.eval.negation_budget, a.budget);
    cfg.validate()?;
    let mut out = OutDir::create(&a.common.out, "negate", &cfg, cfg.suite.seed, a.common.force)?;
    let lab = load_lab(&cfg, &a.upstream, &mut out)?;
    let (task, tau) = load_vector(&lab, &a.vector, &mut out)?;
    let grid = if a.sweep { a.grid.clone().unwrap_or_else(negation_grid) } else { vec![a.alpha.unwrap_or(1.0)] };
    let result = lab.negation(&tau, task, &grid, cfg.eval.negation_budget)?;
    out.write_text("negation.csv", &negation_csv(&result))?;
    out.write_text("negation.txt", &negation_text(&result))?;
    out.write_json("negation.json", &result)?;
    out.param("selected_alpha", result.chosen().alpha);
    out.param("feasible", result.selected.is_some());
    out.finish()
}

/// Writes every profile of one analyzed method under `<label>/`.
fn write_detail(out: &mut OutDir, lab: &Lab, d: &MethodDetail) -> LabResult<()> {
    let s = &d.summary;
    let dir = &s.label;
    out.write_text(&format!("{dir}/merged.txt"), &s.merged.to_text())?;
    out.write_text(&format!("{dir}/sweep.csv"), &sweep_csv(&d.sweep))?;
    if let Some(t) = &s.teacher {
        out.write_text(&format!("{dir}/teacher_student.csv"), &teacher_table(&lab.task_ids(), t, &s.individual))?;
    }
    if let Some(l) = &d.linearization {
        write_values(out, &format!("{dir}/linearization_error"), "linearization_error", &l.per_sample)?;
    }
    for h in &d.heatmaps {
        out.write_text(&format!("{dir}/heatmap_{}_{}.csv", h.first, h.second), &h.heatmap.to_csv())?;
    }
    if !d.localization.is_empty() {
        out.write_text(&format!("{dir}/edit_distance_medians.csv"), &localization_csv(&d.localization))?;
        for c in &d.localization {
            write_values(out, &format!("{dir}/edit_distance_task{}_in", c.task), "edit_distance", &c.in_domain.values)?;
            if let Some(o) = &c.out_of_domain {
                write_values(out, &format!("{dir}/edit_distance_task{}_out", c.task), "edit_distance", &o.values)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct ReportSummary<'a> {
    task_ids: Vec<String>,
    pretrained: Vec<f64>,
    methods: Vec<&'a MethodSummary>,
    /// Per label: the tasks it covers.
    coverage: BTreeMap<String, Vec<usize>>,
}

fn report(a: ReportArgs) -> LabResult<RunManifest> {
    let (cfg, ckpt_manifest) = upstream_config(a.common.config.as_deref(), &a.upstream)?;
    cfg.validate()?;
    if cfg.suite.tasks < 2 && !a.skip_pairwise {
        return Err(LabError::Unsupported(
            "pairwise analyses (heatmaps, edit distances) need at least two tasks; pass --skip-pairwise to report the rest".into(),
        ));
    }
    let manifests = a
        .runs
        .iter()
        .map(|d| {
            let m = RunManifest::load(d)?;
            expect_command(&m, d, "train")?;
            Ok((d.clone(), m))
        })
        .collect::<LabResult<Vec<_>>>()?;
    check_compatible(&manifests)?;
    if let Some((d, _)) = manifests.iter().find(|(_, m)| base_hash(m) != base_hash(&ckpt_manifest) || m.config.suite != cfg.suite) {
        return Err(LabError::Incompatible(format!("run {} does not belong to this suite and checkpoint", d.display())));
    }
    let mut out = OutDir::create(&a.common.out, "report", &cfg, cfg.suite.seed, a.common.force)?;
    let lab = load_lab(&cfg, &a.upstream, &mut out)?;

    // label → task → (student, teacher, wall clock)
    type Entry = (TaskVector, Option<TaskVector>, u128);
    let mut groups: BTreeMap<String, BTreeMap<usize, Entry>> = BTreeMap::new();
    for (dir, m) in &manifests {
        let label = m.param("label").and_then(|v| v.as_str()).unwrap_or("run").to_string();
        let (task, student) = load_vector(&lab, dir, &mut out)?;
        let teacher_path = dir.join(TEACHER_FILE);
        let teacher = if teacher_path.exists() {
            out.input(&teacher_path)?;
            Some(TaskVector::load(&teacher_path)?)
        } else {
            None
        };
        let wall = m.param("train_wall_clock_ms").and_then(|v| v.as_u64()).unwrap_or(0) as u128;
        if groups.entry(label.clone()).or_default().insert(task, (student, teacher, wall)).is_some() {
            return Err(LabError::Incompatible(format!("two `{label}` runs for task {task}")));
        }
    }

    let mut details = Vec::new();
    let mut coverage = BTreeMap::new();
    for (label, entries) in &groups {
        let tasks: Vec<usize> = entries.keys().copied().collect();
        let sub = lab.subset(&tasks)?;
        let students: Vec<TaskVector> = entries.values().map(|e| e.0.clone()).collect();
        let teachers: Option<Vec<TaskVector>> = entries.values().map(|e| e.1.clone()).collect();
        let run = RunVectors {
            label: label.clone(),
            kind: kind_of(&students.iter().collect::<Vec<_>>())?,
            students,
            teachers,
            wall_clock_ms: entries.values().map(|e| e.2).collect(),
        };
        let detail = analyze(&sub, &run, !a.skip_pairwise && tasks.len() >= 2)?;
        write_detail(&mut out, &sub, &detail)?;
        coverage.insert(label.clone(), tasks);
        details.push(detail);
    }
    let summary = ReportSummary {
        task_ids: lab.task_ids(),
        pretrained: lab.pretrained_accuracies()?,
        methods: details.iter().map(|d| &d.summary).collect(),
        coverage,
    };
    out.write_json("summary.json", &summary)?;
    out.finish()
}

fn experiment(a: ExperimentArgs) -> LabResult<RunManifest> {
    let mut cfg = LabConfig::load_or_default(a.common.config.as_deref())?;
    a.train.apply(&mut cfg)?;
    cfg.validate()?;
    let mut out = OutDir::create(&a.common.out, "experiment", &cfg, cfg.suite.seed, a.common.force)?;
    let lab = Lab::build(cfg)?;
    out.param("base_hash", lab.theta0.content_hash());
    let (runs, details, summary) = run_experiment(&lab)?;
    for d in &details {
        write_detail(&mut out, &lab, d)?;
    }
    for run in &runs {
        for (t, o) in run.outcomes.iter().enumerate() {
            let name = format!("{}/vectors/task_{t}.json", run.label);
            let path = out.file(&name);
            o.tau_student.save(&path)?;
            out.output(&name)?;
        }
    }
    for n in &summary.negation {
        out.write_text(&format!("negation/task_{}.csv", n.task), &negation_csv(n))?;
    }
    out.write_text("summary.txt", &summary_text(&summary))?;
    out.write_json("summary.json", &summary)?;
    out.finish()
}
