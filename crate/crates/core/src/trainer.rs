//! Joint teacher/student optimization and the fine-tuning baselines.
//!
//! Per step, on one shared batch:
//!
//! * teacher (linearized at `θ0`): cross-entropy of `head(f(x;θ0) + J τ_T)`
//!   plus `β_T` times the curvature drift of `τ_T`;
//! * student (non-linear): cross-entropy of `head(f(x; θ0 + τ_S))` plus
//!   `β_S` times the drift of `τ_S` plus `γ` times the along-path distillation
//!   loss against the teacher scaled by a sampled `α`.
//!
//! Both branches are updated with AdamW from their pre-update parameters.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arithmetic::TaskVector;
use crate::curvature::EkfacState;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::net::{
    backward_deltas, accumulate_param_grad, check_labels, forward_trace, forward_with_tangent, softmax_cross_entropy, vjp_into, Head,
    Inputs, NetworkSpec, ParameterVector,
};
use crate::taskgen::{Split, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Delta,
    DeltaNoTeacher,
    DeltaNoReg,
    NonlinearFt,
    LinearFt,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Delta,
        Method::DeltaNoTeacher,
        Method::DeltaNoReg,
        Method::NonlinearFt,
        Method::LinearFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Delta => "delta",
            Method::DeltaNoTeacher => "delta_no_teacher",
            Method::DeltaNoReg => "delta_no_reg",
            Method::NonlinearFt => "nonlinear_ft",
            Method::LinearFt => "linear_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }

    fn trains_teacher(self) -> bool {
        matches!(self, Method::Delta | Method::DeltaNoReg | Method::LinearFt)
    }

    fn trains_student(self) -> bool {
        !matches!(self, Method::LinearFt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApkdMode {
    /// One `α ~ U(lo, hi)` per step.
    Sampled,
    /// Distill only the endpoint teacher, `α = 1`.
    Fixed1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta_teacher: f64,
    pub beta_student: f64,
    pub gamma: f64,
    pub apkd_mode: ApkdMode,
    pub alpha_range: (f64, f64),
    pub seed: u64,
    /// Evaluate the student's task loss at `θ0 + α τ_S` instead of `θ0 + τ_S`.
    #[serde(default)]
    pub student_ce_at_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Delta,
            steps: 2000,
            batch_size: 64,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            beta_teacher: 0.1,
            beta_student: 0.1,
            gamma: 1.0,
            apkd_mode: ApkdMode::Sampled,
            alpha_range: (0.5, 1.0),
            seed: 0,
            student_ce_at_alpha: false,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("beta_teacher", self.beta_teacher),
            ("beta_student", self.beta_student),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let (lo, hi) = self.alpha_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("alpha_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        Ok(())
    }

    /// Coefficients after applying the method's forced zeros.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match c.method {
            Method::Delta => {}
            Method::DeltaNoTeacher => c.gamma = 0.0,
            Method::DeltaNoReg => {
                c.beta_teacher = 0.0;
                c.beta_student = 0.0;
            }
            Method::NonlinearFt | Method::LinearFt => {
                c.beta_teacher = 0.0;
                c.beta_student = 0.0;
                c.gamma = 0.0;
            }
        }
        c
    }

    pub fn needs_curvature(&self) -> bool {
        let e = self.effective();
        (e.method.trains_teacher() && e.beta_teacher > 0.0) || (e.method.trains_student() && e.beta_student > 0.0)
    }
}

/// A batch of inputs with class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: Inputs<'a>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Inputs<'a>, labels: &'a [usize]) -> Result<Self> {
        ensure_len("labels", inputs.len(), labels.len())?;
        Ok(Self { inputs, labels })
    }
}

/// Value of a composite loss, per component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub drift: f64,
    pub kd: f64,
    pub total: f64,
}

fn check_common(spec: &NetworkSpec, theta0: &ParameterVector, batch: &Batch<'_>, head: Option<&Head>) -> Result<()> {
    theta0.check(spec)?;
    if batch.inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    ensure_len("input vector", spec.input_dim(), batch.inputs.dim())?;
    for row in batch.inputs.rows() {
        ensure_finite("batch inputs", row)?;
    }
    if let Some(h) = head {
        ensure_len("head features", spec.feature_dim(), h.features())?;
        check_labels(batch.labels, h.classes())?;
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

fn add_scaled(params: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    params.iter().zip(dir).map(|(p, d)| p + scale * d).collect()
}

/// Linearized teacher outputs at `θ0`: `(f(x;θ0), J τ_T)` per sample.
fn teacher_features(spec: &NetworkSpec, theta0: &[f64], tau_t: &[f64], inputs: Inputs<'_>) -> Vec<(Vec<f64>, Vec<f64>)> {
    inputs.rows().map(|x| forward_with_tangent(spec, theta0, x, tau_t)).collect()
}

/// Cross-entropy through the linearized model and its gradient w.r.t. `τ_T`.
fn teacher_ce(spec: &NetworkSpec, theta0: &[f64], feats: &[(Vec<f64>, Vec<f64>)], batch: &Batch<'_>, head: &Head) -> (f64, Vec<f64>) {
    let scale = 1.0 / feats.len() as f64;
    let mut grad = vec![0.0; theta0.len()];
    let mut total = 0.0;
    for (i, ((f0, jv), x)) in feats.iter().zip(batch.inputs.rows()).enumerate() {
        let z: Vec<f64> = f0.iter().zip(jv).map(|(a, b)| a + b).collect();
        let (l, g) = softmax_cross_entropy(&head.logits(&z), batch.labels[i]);
        total += l;
        vjp_into(spec, theta0, x, &head.pullback(&g), scale, &mut grad);
    }
    (total * scale, grad)
}

/// Cross-entropy of the non-linear model at `params`; gradient scaled by `chain`.
fn student_ce(spec: &NetworkSpec, params: &[f64], batch: &Batch<'_>, head: &Head, chain: f64) -> (f64, Vec<f64>) {
    let scale = 1.0 / batch.inputs.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (i, x) in batch.inputs.rows().enumerate() {
        let trace = forward_trace(spec, params, x);
        let (l, g) = softmax_cross_entropy(&head.logits(&trace.output), batch.labels[i]);
        total += l;
        let deltas = backward_deltas(spec, params, &trace, &head.pullback(&g));
        accumulate_param_grad(spec, &trace, &deltas, scale * chain, &mut grad);
    }
    (total * scale, grad)
}

/// Along-path distillation against fixed teacher targets.
fn apkd_terms(spec: &NetworkSpec, theta0: &[f64], tau_s: &[f64], feats: &[(Vec<f64>, Vec<f64>)], inputs: Inputs<'_>, alpha: f64) -> (f64, Vec<f64>) {
    let params = add_scaled(theta0, tau_s, alpha);
    let scale = 1.0 / feats.len() as f64;
    let mut grad = vec![0.0; theta0.len()];
    let mut total = 0.0;
    for ((f0, jv), x) in feats.iter().zip(inputs.rows()) {
        let trace = forward_trace(spec, &params, x);
        let cot: Vec<f64> = trace
            .output
            .iter()
            .zip(f0.iter().zip(jv))
            .map(|(s, (a, b))| {
                let diff = s - (a + alpha * b);
                total += diff * diff;
                2.0 * diff
            })
            .collect();
        let deltas = backward_deltas(spec, &params, &trace, &cot);
        accumulate_param_grad(spec, &trace, &deltas, scale * alpha, &mut grad);
    }
    (total * scale, grad)
}

/// Distillation loss `(1/B) Σ ‖f(x; θ0 + α τ_S) − SG[f_lin(x; θ0 + α τ_T)]‖²`
/// and its gradient w.r.t. `τ_S`.
pub fn apkd_loss(spec: &NetworkSpec, theta0: &ParameterVector, tau_s: &[f64], tau_t: &[f64], inputs: Inputs<'_>, alpha: f64) -> Result<(f64, Vec<f64>)> {
    theta0.check(spec)?;
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_alpha(alpha)?;
    ensure_len("student task vector", theta0.len(), tau_s.len())?;
    ensure_len("teacher task vector", theta0.len(), tau_t.len())?;
    ensure_len("input vector", spec.input_dim(), inputs.dim())?;
    let feats = teacher_features(spec, theta0.values(), tau_t, inputs);
    Ok(apkd_terms(spec, theta0.values(), tau_s, &feats, inputs, alpha))
}

/// Teacher objective: linearized cross-entropy plus `β_T` times drift.
pub fn teacher_loss(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    tau_t: &[f64],
    batch: Batch<'_>,
    head: &Head,
    ekfac: Option<&EkfacState>,
    beta_t: f64,
) -> Result<(LossParts, Vec<f64>)> {
    check_common(spec, theta0, &batch, Some(head))?;
    ensure_len("teacher task vector", theta0.len(), tau_t.len())?;
    let curvature = curvature_for(ekfac, beta_t, spec)?;
    let feats = teacher_features(spec, theta0.values(), tau_t, batch.inputs);
    Ok(teacher_step(spec, theta0.values(), tau_t, &feats, &batch, head, curvature, beta_t))
}

fn curvature_for<'a>(ekfac: Option<&'a EkfacState>, beta: f64, spec: &NetworkSpec) -> Result<Option<&'a EkfacState>> {
    if beta == 0.0 {
        return Ok(None);
    }
    let state = ekfac.ok_or_else(|| Error::InvalidConfig("curvature state required when a drift weight is positive".into()))?;
    if state.spec_hash != spec.hash() {
        return Err(Error::HashMismatch {
            what: "curvature network spec",
            task_id: String::new(),
            expected: spec.hash().to_string(),
            found: state.spec_hash.clone(),
        });
    }
    Ok(Some(state))
}

#[allow(clippy::too_many_arguments)]
fn teacher_step(
    spec: &NetworkSpec,
    theta0: &[f64],
    tau_t: &[f64],
    feats: &[(Vec<f64>, Vec<f64>)],
    batch: &Batch<'_>,
    head: &Head,
    ekfac: Option<&EkfacState>,
    beta_t: f64,
) -> (LossParts, Vec<f64>) {
    let (task, mut grad) = teacher_ce(spec, theta0, feats, batch, head);
    let mut drift = 0.0;
    if let Some(state) = ekfac {
        drift = state.drift_raw(tau_t);
        state.drift_grad_into(tau_t, beta_t, &mut grad);
    }
    let parts = LossParts {
        task,
        drift,
        kd: 0.0,
        total: task + beta_t * drift,
    };
    (parts, grad)
}

/// Student objective: non-linear cross-entropy plus `β_S` times drift plus
/// `γ` times the along-path distillation loss at scale `α`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    tau_s: &[f64],
    tau_t: &[f64],
    batch: Batch<'_>,
    head: &Head,
    ekfac: Option<&EkfacState>,
    beta_s: f64,
    gamma: f64,
    alpha: f64,
) -> Result<(LossParts, Vec<f64>)> {
    check_common(spec, theta0, &batch, Some(head))?;
    check_alpha(alpha)?;
    ensure_len("student task vector", theta0.len(), tau_s.len())?;
    ensure_len("teacher task vector", theta0.len(), tau_t.len())?;
    let curvature = curvature_for(ekfac, beta_s, spec)?;
    let feats = if gamma > 0.0 {
        teacher_features(spec, theta0.values(), tau_t, batch.inputs)
    } else {
        Vec::new()
    };
    Ok(student_step(spec, theta0.values(), tau_s, &feats, &batch, head, curvature, beta_s, gamma, alpha, false))
}

#[allow(clippy::too_many_arguments)]
fn student_step(
    spec: &NetworkSpec,
    theta0: &[f64],
    tau_s: &[f64],
    feats: &[(Vec<f64>, Vec<f64>)],
    batch: &Batch<'_>,
    head: &Head,
    ekfac: Option<&EkfacState>,
    beta_s: f64,
    gamma: f64,
    alpha: f64,
    ce_at_alpha: bool,
) -> (LossParts, Vec<f64>) {
    let ce_scale = if ce_at_alpha { alpha } else { 1.0 };
    let (task, mut grad) = student_ce(spec, &add_scaled(theta0, tau_s, ce_scale), batch, head, ce_scale);
    let mut drift = 0.0;
    if let Some(state) = ekfac {
        drift = state.drift_raw(tau_s);
        state.drift_grad_into(tau_s, beta_s, &mut grad);
    }
    let mut kd = 0.0;
    if gamma > 0.0 {
        let (l, g) = apkd_terms(spec, theta0, tau_s, feats, batch.inputs, alpha);
        kd = l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += gamma * b;
        }
    }
    let parts = LossParts {
        task,
        drift,
        kd,
        total: task + beta_s * drift + gamma * kd,
    };
    (parts, grad)
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss_teacher: Option<f64>,
    pub drift_teacher: Option<f64>,
    pub task_loss_student: Option<f64>,
    pub drift_student: Option<f64>,
    pub kd: Option<f64>,
    pub alpha: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,task_loss_T,drift_T,task_loss_S,drift_S,kd,alpha";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.step,
            f(self.task_loss_teacher),
            f(self.drift_teacher),
            f(self.task_loss_student),
            f(self.drift_student),
            f(self.kd),
            self.alpha
        )
    }
}

/// Writes a loss trace as CSV text.
pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tau_teacher: Option<TaskVector>,
    pub tau_student: TaskVector,
    pub trace: Vec<StepRecord>,
    pub wall_clock_ms: u128,
}

impl PartialEq for TrainOutcome {
    /// Equality of everything except timing.
    fn eq(&self, other: &Self) -> bool {
        self.tau_teacher == other.tau_teacher && self.tau_student == other.tau_student && self.trace == other.trace
    }
}

/// Epoch-shuffled batch sampler over a fixed index set.
struct BatchSampler {
    indices: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut s = Self { indices, cursor: 0, rng };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        for i in (1..self.indices.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.indices.swap(i, j);
        }
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.indices.len());
        if self.cursor + size > self.indices.len() {
            self.reshuffle();
        }
        let out = self.indices[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Runs one fine-tuning job on the train split of `task`.
pub fn train(
    config: &TrainConfig,
    task: &TaskDataset,
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    head: &Head,
    ekfac: Option<&EkfacState>,
) -> Result<TrainOutcome> {
    train_on(config, task, Split::Train, spec, theta0, head, ekfac)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_on(
    config: &TrainConfig,
    task: &TaskDataset,
    split: Split,
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    head: &Head,
    ekfac: Option<&EkfacState>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate()?;
    theta0.check(spec)?;
    let cfg = config.effective();
    ensure_len("input vector", spec.input_dim(), task.dim)?;
    ensure_len("head features", spec.feature_dim(), head.features())?;
    if task.classes > head.classes() {
        return Err(Error::LabelOutOfRange {
            label: task.classes - 1,
            classes: head.classes(),
        });
    }
    let teacher_curv = if cfg.method.trains_teacher() {
        curvature_for(ekfac, cfg.beta_teacher, spec)?
    } else {
        None
    };
    let student_curv = if cfg.method.trains_student() {
        curvature_for(ekfac, cfg.beta_student, spec)?
    } else {
        None
    };

    let p = spec.param_count();
    let base = theta0.values();
    let (xs, ys) = task.split(split);
    if ys.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let dim = task.dim;
    let mut sampler = BatchSampler::new((0..ys.len()).collect(), cfg.seed);
    let mut alpha_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    alpha_rng.set_stream(1);

    let mut tau_t = vec![0.0; p];
    let mut tau_s = vec![0.0; p];
    let mut opt_t = AdamW::new(p, cfg.learning_rate, cfg.weight_decay);
    let mut opt_s = AdamW::new(p, cfg.learning_rate, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut bx = Vec::with_capacity(cfg.batch_size * dim);
    let mut by = Vec::with_capacity(cfg.batch_size);

    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        bx.clear();
        by.clear();
        for &i in &idx {
            bx.extend_from_slice(&xs[i * dim..(i + 1) * dim]);
            by.push(ys[i]);
        }
        let batch = Batch {
            inputs: Inputs::new(&bx, dim)?,
            labels: &by,
        };
        let (lo, hi) = cfg.alpha_range;
        let sampled: f64 = if lo < hi { alpha_rng.random_range(lo..hi) } else { lo };
        let alpha = match cfg.apkd_mode {
            ApkdMode::Sampled => sampled,
            ApkdMode::Fixed1 => 1.0,
        };

        let needs_feats = cfg.method.trains_teacher();
        let feats = if needs_feats {
            teacher_features(spec, base, &tau_t, batch.inputs)
        } else {
            Vec::new()
        };
        let teacher = if cfg.method.trains_teacher() {
            Some(teacher_step(spec, base, &tau_t, &feats, &batch, head, teacher_curv, cfg.beta_teacher))
        } else {
            None
        };
        let student = if cfg.method.trains_student() {
            Some(student_step(
                spec,
                base,
                &tau_s,
                &feats,
                &batch,
                head,
                student_curv,
                cfg.beta_student,
                cfg.gamma,
                alpha,
                cfg.student_ce_at_alpha,
            ))
        } else {
            None
        };

        let finite = teacher.as_ref().is_none_or(|(l, _)| l.total.is_finite())
            && student.as_ref().is_none_or(|(l, _)| l.total.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                step,
                components: format!(
                    "teacher {:?}, student {:?}",
                    teacher.as_ref().map(|t| t.0),
                    student.as_ref().map(|s| s.0)
                ),
            });
        }
        trace.push(StepRecord {
            step,
            task_loss_teacher: teacher.as_ref().map(|t| t.0.task),
            drift_teacher: teacher.as_ref().and(teacher_curv).map(|_| teacher.as_ref().unwrap().0.drift),
            task_loss_student: student.as_ref().map(|s| s.0.task),
            drift_student: student.as_ref().and(student_curv).map(|_| student.as_ref().unwrap().0.drift),
            kd: student.as_ref().filter(|_| cfg.gamma > 0.0).map(|s| s.0.kd),
            alpha,
        });
        if let Some((_, g)) = &teacher {
            opt_t.step(&mut tau_t, g);
        }
        if let Some((_, g)) = &student {
            opt_s.step(&mut tau_s, g);
        }
    }

    let method = cfg.method.name();
    let tau_teacher = if cfg.method.trains_teacher() {
        Some(TaskVector::new(theta0, tau_t.clone(), task.task_id.clone(), method)?)
    } else {
        None
    };
    let tau_student = if cfg.method.trains_student() {
        TaskVector::new(theta0, tau_s, task.task_id.clone(), method)?
    } else {
        TaskVector::new(theta0, tau_t, task.task_id.clone(), method)?
    };
    Ok(TrainOutcome {
        tau_teacher,
        tau_student,
        trace,
        wall_clock_ms: start.elapsed().as_millis(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Multiplier on the head's initialization bound.
    pub head_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 0,
            head_scale: 4.0,
        }
    }
}

/// Seeded `U(-1/√fan_in, 1/√fan_in)` initialization of every layer, and a
/// head drawn with that bound times `head_scale`.
pub fn init_params(spec: &NetworkSpec, classes: usize, seed: u64, head_scale: f64) -> Result<(ParameterVector, Head)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut values = vec![0.0; spec.param_count()];
    for l in spec.layers() {
        let bound = 1.0 / (l.d_in as f64).sqrt();
        for v in &mut values[l.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    let d = spec.feature_dim();
    let bound = head_scale / (d as f64).sqrt();
    let weights = (0..d * classes).map(|_| rng.random_range(-bound..bound)).collect();
    let bias = (0..classes).map(|_| rng.random_range(-bound..bound)).collect();
    Ok((ParameterVector::new(spec, values)?, Head::new(d, classes, weights, bias)?))
}

/// Pre-training surrogate: plain fine-tuning of a fresh init on the whole
/// reference set with the head frozen. Returns `θ0` and the head, both rounded
/// to checkpoint precision.
pub fn pretrain(spec: &NetworkSpec, reference: &TaskDataset, config: &PretrainConfig) -> Result<(ParameterVector, Head)> {
    let (init, head) = init_params(spec, reference.classes, config.seed, config.head_scale)?;
    let tc = TrainConfig {
        method: Method::NonlinearFt,
        steps: config.steps,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: config.seed,
        ..TrainConfig::default()
    };
    let out = train_on(&tc, reference, Split::All, spec, &init, &head, None)?;
    let theta0 = crate::arithmetic::compose(&init, &[(1.0, &out.tau_student)])?.rounded_to_f32();
    let head = Head::new(
        head.features(),
        head.classes(),
        head.weights().iter().map(|&v| v as f32 as f64).collect(),
        head.bias().iter().map(|&v| v as f32 as f64).collect(),
    )?;
    Ok((theta0, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::ekfac;
    use crate::net::{forward_raw, Activation};
    use crate::taskgen::{make_suite, SuiteSpec};

    fn rel_ok(fd: f64, an: f64, tol: f64) -> bool {
        (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1e-6)
    }

    struct Fixture {
        spec: NetworkSpec,
        theta0: ParameterVector,
        head: Head,
        xs: Vec<f64>,
        ys: Vec<usize>,
        tau_s: Vec<f64>,
        tau_t: Vec<f64>,
        state: EkfacState,
    }

    fn fixture(seed: u64, act: Activation) -> Fixture {
        let spec = NetworkSpec::new(vec![4, 5, 3], act, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let theta0 = ParameterVector::new(&spec, r(spec.param_count(), 0.8)).unwrap();
        let head = Head::new(3, 3, r(9, 1.0), r(3, 0.3)).unwrap();
        let xs = r(4 * 7, 1.5);
        let tau_s = r(spec.param_count(), 0.3);
        let tau_t = r(spec.param_count(), 0.3);
        let ys = vec![0, 1, 2, 0, 1, 2, 1];
        let state = ekfac(&spec, &theta0, Inputs::new(&xs, 4).unwrap(), 1e-3).unwrap();
        Fixture { spec, theta0, head, xs, ys, tau_s, tau_t, state }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, at: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for j in 0..at.len() {
            let mut p = at.to_vec();
            p[j] += h;
            let up = f(&p);
            p[j] -= 2.0 * h;
            let dn = f(&p);
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_ok(fd, grad[j], 1e-3), "coord {j}: fd {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn apkd_zero_cases() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::Identity, true).unwrap();
        let theta0 = ParameterVector::new(&spec, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let tau = vec![0.3, -0.1, 0.2, 0.5, -0.4, 0.1, 0.0, 0.9];
        let xs = [1.0, 2.0, 3.0, -1.0, 0.0, 0.5];
        let inputs = Inputs::new(&xs, 3).unwrap();
        let (l, _) = apkd_loss(&spec, &theta0, &tau, &tau, inputs, 0.7).unwrap();
        assert!(l.abs() <= 1e-24);
        let zero = vec![0.0; 8];
        let fx = fixture(1, Activation::Tanh);
        let (l0, _) = apkd_loss(&fx.spec, &fx.theta0, &vec![0.0; fx.tau_s.len()], &vec![0.0; fx.tau_s.len()], Inputs::new(&fx.xs, 4).unwrap(), 0.9).unwrap();
        assert_eq!(l0, 0.0);
        assert!(apkd_loss(&spec, &theta0, &zero, &zero, inputs, 0.0).is_err());
        assert!(apkd_loss(&spec, &theta0, &zero, &zero, inputs, 1.5).is_err());
        assert!(apkd_loss(&spec, &theta0, &zero, &zero, Inputs::new(&[], 3).unwrap(), 0.5).is_err());
    }

    #[test]
    fn apkd_gradient_matches_finite_differences() {
        for (seed, act) in [(2, Activation::Tanh), (3, Activation::Relu)] {
            let fx = fixture(seed, act);
            let inputs = Inputs::new(&fx.xs, 4).unwrap();
            let (_, g) = apkd_loss(&fx.spec, &fx.theta0, &fx.tau_s, &fx.tau_t, inputs, 0.65).unwrap();
            fd_check(|p| apkd_loss(&fx.spec, &fx.theta0, p, &fx.tau_t, inputs, 0.65).unwrap().0, &fx.tau_s, &g);
        }
    }

    #[test]
    fn teacher_loss_examples_and_gradient() {
        let fx = fixture(4, Activation::Tanh);
        let batch = Batch::new(Inputs::new(&fx.xs, 4).unwrap(), &fx.ys).unwrap();
        let zero = vec![0.0; fx.tau_t.len()];
        let (parts, _) = teacher_loss(&fx.spec, &fx.theta0, &zero, batch, &fx.head, None, 0.0).unwrap();
        let direct: f64 = fx
            .xs
            .chunks(4)
            .zip(&fx.ys)
            .map(|(x, &y)| softmax_cross_entropy(&fx.head.logits(&forward_raw(&fx.spec, fx.theta0.values(), x)), y).0)
            .sum::<f64>()
            / fx.ys.len() as f64;
        assert!((parts.total - direct).abs() <= 1e-12);

        let mut last = f64::NEG_INFINITY;
        for beta in [0.0, 1.0, 10.0, 100.0] {
            let (p, _) = teacher_loss(&fx.spec, &fx.theta0, &fx.tau_t, batch, &fx.head, Some(&fx.state), beta).unwrap();
            assert!(p.total > last);
            assert!((p.total - (p.task + beta * p.drift)).abs() <= 1e-9 * p.total.abs());
            last = p.total;
        }

        let (_, g) = teacher_loss(&fx.spec, &fx.theta0, &fx.tau_t, batch, &fx.head, Some(&fx.state), 3.0).unwrap();
        fd_check(
            |p| teacher_loss(&fx.spec, &fx.theta0, p, batch, &fx.head, Some(&fx.state), 3.0).unwrap().0.total,
            &fx.tau_t,
            &g,
        );
        let bad = [0, 1, 5, 0, 1, 2, 1];
        assert!(matches!(
            teacher_loss(&fx.spec, &fx.theta0, &fx.tau_t, Batch::new(batch.inputs, &bad).unwrap(), &fx.head, None, 0.0),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(teacher_loss(&fx.spec, &fx.theta0, &fx.tau_t, batch, &fx.head, None, 1.0).is_err());
    }

    #[test]
    fn student_loss_reductions_and_gradient() {
        let fx = fixture(5, Activation::Tanh);
        let batch = Batch::new(Inputs::new(&fx.xs, 4).unwrap(), &fx.ys).unwrap();
        let (plain, g_plain) = student_loss(&fx.spec, &fx.theta0, &fx.tau_s, &fx.tau_t, batch, &fx.head, None, 0.0, 0.0, 0.8).unwrap();
        let moved = ParameterVector::new(&fx.spec, add_scaled(fx.theta0.values(), &fx.tau_s, 1.0)).unwrap();
        let (ce, g_ce) = crate::net::grad(&fx.spec, &moved, batch.inputs, crate::net::Loss::CrossEntropy { head: &fx.head, labels: &fx.ys }).unwrap();
        assert!((plain.total - ce).abs() <= 1e-12);
        for (a, b) in g_plain.iter().zip(&g_ce) {
            assert!((a - b).abs() <= 1e-12);
        }

        let (_, g) = student_loss(&fx.spec, &fx.theta0, &fx.tau_s, &fx.tau_t, batch, &fx.head, Some(&fx.state), 2.0, 1.5, 0.8).unwrap();
        fd_check(
            |p| {
                student_loss(&fx.spec, &fx.theta0, p, &fx.tau_t, batch, &fx.head, Some(&fx.state), 2.0, 1.5, 0.8)
                    .unwrap()
                    .0
                    .total
            },
            &fx.tau_s,
            &g,
        );
    }

    #[test]
    fn identical_linear_student_has_no_distillation_loss() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::Identity, true).unwrap();
        let theta0 = ParameterVector::new(&spec, vec![0.1; 8]).unwrap();
        let tau = vec![0.2, -0.3, 0.1, 0.0, 0.4, 0.2, -0.1, 0.3];
        let xs = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let ys = [0, 1];
        let batch = Batch::new(Inputs::new(&xs, 3).unwrap(), &ys).unwrap();
        let head = Head::identity(2);
        let (parts, _) = student_loss(&spec, &theta0, &tau, &tau, batch, &head, None, 0.0, 1.0, 0.6).unwrap();
        assert!(parts.kd <= 1e-24);
    }

    fn small_suite() -> (crate::taskgen::Suite, NetworkSpec, ParameterVector, Head) {
        let suite = make_suite(&SuiteSpec { samples_per_task: 200, ..SuiteSpec::default() }).unwrap();
        let spec = NetworkSpec::new(vec![16, 12, 6], Activation::Tanh, true).unwrap();
        let (theta0, head) = pretrain(&spec, &suite.reference, &PretrainConfig { steps: 50, ..Default::default() }).unwrap();
        (suite, spec, theta0, head)
    }

    #[test]
    fn zero_steps_gives_zero_vector() {
        let (suite, spec, theta0, head) = small_suite();
        let cfg = TrainConfig { steps: 0, method: Method::NonlinearFt, ..Default::default() };
        let out = train(&cfg, &suite.tasks[0], &spec, &theta0, &head, None).unwrap();
        assert!(out.trace.is_empty());
        assert!(out.tau_student.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_traced() {
        let (suite, spec, theta0, head) = small_suite();
        let state = ekfac(&spec, &theta0, Samples::from_dataset(&suite.reference, Split::All).view(), 1e-4).unwrap();
        let cfg = TrainConfig { steps: 30, ..Default::default() };
        let a = train(&cfg, &suite.tasks[1], &spec, &theta0, &head, Some(&state)).unwrap();
        let b = train(&cfg, &suite.tasks[1], &spec, &theta0, &head, Some(&state)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 30);
        assert!(a.tau_teacher.is_some());
        assert!(a.trace.iter().all(|r| (0.5..1.0).contains(&r.alpha) && r.kd.unwrap().is_finite()));
        let csv = trace_csv(&a.trace);
        assert!(csv.starts_with(StepRecord::CSV_HEADER));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn delta_without_extra_terms_matches_plain_fine_tuning() {
        let (suite, spec, theta0, head) = small_suite();
        let base = TrainConfig {
            steps: 25,
            beta_teacher: 0.0,
            beta_student: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let delta = train(&TrainConfig { method: Method::Delta, ..base.clone() }, &suite.tasks[2], &spec, &theta0, &head, None).unwrap();
        let ft = train(&TrainConfig { method: Method::NonlinearFt, ..base }, &suite.tasks[2], &spec, &theta0, &head, None).unwrap();
        assert_eq!(delta.tau_student.values(), ft.tau_student.values());
        let sl: Vec<_> = delta.trace.iter().map(|r| r.task_loss_student).collect();
        let fl: Vec<_> = ft.trace.iter().map(|r| r.task_loss_student).collect();
        assert_eq!(sl, fl);
    }

    #[test]
    fn linear_ft_returns_teacher_vector() {
        let (suite, spec, theta0, head) = small_suite();
        let cfg = TrainConfig { steps: 10, method: Method::LinearFt, ..Default::default() };
        let out = train(&cfg, &suite.tasks[0], &spec, &theta0, &head, None).unwrap();
        assert_eq!(Some(&out.tau_student), out.tau_teacher.as_ref());
        assert!(out.trace.iter().all(|r| r.task_loss_student.is_none()));
    }

    #[test]
    fn curvature_required_when_weighted() {
        let (suite, spec, theta0, head) = small_suite();
        let cfg = TrainConfig { steps: 5, ..Default::default() };
        assert!(cfg.needs_curvature());
        assert!(train(&cfg, &suite.tasks[0], &spec, &theta0, &head, None).is_err());
        assert!(!TrainConfig::for_method(Method::DeltaNoReg).needs_curvature());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { gamma: -1.0, ..ok.clone() },
            TrainConfig { alpha_range: (0.0, 1.0), ..ok.clone() },
            TrainConfig { alpha_range: (0.8, 0.5), ..ok.clone() },
            TrainConfig { alpha_range: (0.5, 1.2), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let e = TrainConfig::for_method(Method::DeltaNoTeacher).effective();
        assert_eq!(e.gamma, 0.0);
        let e = TrainConfig::for_method(Method::DeltaNoReg).effective();
        assert_eq!((e.beta_teacher, e.beta_student), (0.0, 0.0));
        assert_eq!(Method::parse("linear_ft").unwrap(), Method::LinearFt);
        assert!(Method::parse("nope").is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(2, 0.1, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[2.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    use crate::taskgen::Samples;
}
