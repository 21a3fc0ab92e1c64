//! In-memory experiment state shared by the commands and the acceptance suite.

use delta_core::arithmetic::{compose, SweepCurve, TaskVector};
use delta_core::curvature::{ekfac, EkfacState};
use delta_core::linearize::{linearization_error_profile, LinearizationProfile};
use delta_core::metrics::{accuracy, disentanglement_heatmap, linearized_accuracy, localization_profile, EvalReport, Heatmap, LocalizationCell};
use delta_core::net::{Head, NetworkSpec, ParameterVector};
use delta_core::taskgen::{make_reference_variant, make_suite, ReferenceVariant, Samples, Split, Suite};
use delta_core::trainer::{pretrain, train, Method, TrainConfig, TrainOutcome};
use delta_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::Checkpoint;
use crate::config::LabConfig;
use crate::LabError;

pub type LabResult<T> = Result<T, LabError>;

/// Suite, pre-trained model and reference curvature.
pub struct Lab {
    pub config: LabConfig,
    pub suite: Suite,
    pub spec: NetworkSpec,
    pub theta0: ParameterVector,
    pub head: Head,
    pub tests: Vec<Samples>,
    /// Broad reference curvature; absent for evaluation-only labs.
    pub ekfac: Option<EkfacState>,
}

/// How a parameter point is turned into predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `f(x; θ0 + τ)`.
    NonLinear,
    /// `f(x; θ0) + J τ`, the product of linearized fine-tuning.
    Linearized,
}

impl ModelKind {
    pub fn for_method(method: Method) -> Self {
        if method == Method::LinearFt {
            ModelKind::Linearized
        } else {
            ModelKind::NonLinear
        }
    }
}

/// Per-task outcomes of one training configuration.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub config: TrainConfig,
    pub outcomes: Vec<TrainOutcome>,
}

impl MethodRun {
    pub fn students(&self) -> Vec<TaskVector> {
        self.outcomes.iter().map(|o| o.tau_student.clone()).collect()
    }

    pub fn kind(&self) -> ModelKind {
        ModelKind::for_method(self.config.method)
    }

    pub fn teachers(&self) -> Option<Vec<TaskVector>> {
        self.outcomes.iter().map(|o| o.tau_teacher.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHeatmap {
    pub first: usize,
    pub second: usize,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationPoint {
    pub alpha: f64,
    pub target: f64,
    pub control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationResult {
    pub task: usize,
    pub pretrained_target: f64,
    pub pretrained_control: f64,
    pub budget_points: f64,
    pub curve: Vec<NegationPoint>,
    /// Index of the lowest target accuracy whose control accuracy stays within budget.
    pub selected: Option<usize>,
    /// When infeasible: index with the smallest control loss, as a relaxation.
    pub relaxed: Option<usize>,
}

impl NegationResult {
    pub fn chosen(&self) -> &NegationPoint {
        &self.curve[self.selected.or(self.relaxed).expect("non-empty curve")]
    }
}

impl Lab {
    pub fn build(config: LabConfig) -> LabResult<Self> {
        config.validate()?;
        let suite = make_suite(&config.suite)?;
        let spec = config.network_spec()?;
        let (theta0, head) = pretrain(&spec, &suite.reference, &config.pretrain)?;
        let reference = Samples::from_dataset(&suite.reference, Split::All);
        let state = ekfac(&spec, &theta0, reference.view(), config.damping)?;
        Self::from_parts(config, suite, Checkpoint { spec, theta0, head }, Some(state))
    }

    /// Assembles a lab from already-computed stages.
    pub fn from_parts(config: LabConfig, suite: Suite, checkpoint: Checkpoint, ekfac: Option<EkfacState>) -> LabResult<Self> {
        let Checkpoint { spec, theta0, head } = checkpoint;
        theta0.check(&spec)?;
        if spec.input_dim() != suite.spec.input_dim || head.classes() != suite.spec.classes {
            return Err(LabError::Incompatible("checkpoint does not match the suite's input or class count".into()));
        }
        let tests = suite.tasks.iter().map(|t| Samples::from_dataset(t, Split::Test)).collect();
        Ok(Self {
            config,
            suite,
            spec,
            theta0,
            head,
            tests,
            ekfac,
        })
    }

    fn broad_curvature(&self) -> LabResult<&EkfacState> {
        self.ekfac.as_ref().ok_or_else(|| LabError::Missing("reference curvature".into()))
    }

    /// The same lab restricted to the given tasks, in the given order.
    pub fn subset(&self, tasks: &[usize]) -> LabResult<Lab> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.task_count()) {
            return Err(Error::InvalidConfig(format!("task {t} out of range for {} tasks", self.task_count())).into());
        }
        let mut suite = self.suite.clone();
        suite.tasks = tasks.iter().map(|&t| self.suite.tasks[t].clone()).collect();
        Ok(Lab {
            config: self.config.clone(),
            suite,
            spec: self.spec.clone(),
            theta0: self.theta0.clone(),
            head: self.head.clone(),
            tests: tasks.iter().map(|&t| self.tests[t].clone()).collect(),
            ekfac: None,
        })
    }

    /// Index of the task with the given identifier.
    pub fn task_index(&self, task_id: &str) -> LabResult<usize> {
        self.suite
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| LabError::Incompatible(format!("task `{task_id}` is not part of this suite")))
    }

    pub fn task_count(&self) -> usize {
        self.suite.tasks.len()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.suite.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    /// Curvature estimated on another reference variant.
    pub fn curvature(&self, variant: ReferenceVariant) -> LabResult<EkfacState> {
        if variant == ReferenceVariant::Broad {
            if let Some(state) = &self.ekfac {
                return Ok(state.clone());
            }
        }
        let data = make_reference_variant(&self.config.suite, variant)?;
        let samples = Samples::from_dataset(&data, Split::All);
        Ok(ekfac(&self.spec, &self.theta0, samples.view(), self.config.damping)?)
    }

    /// The lab's training defaults with `method` substituted.
    pub fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig { method, ..self.config.train.clone() }
    }

    /// Trains one vector per task, tasks in parallel.
    pub fn train_all(&self, label: &str, config: &TrainConfig, curvature: Option<&EkfacState>) -> LabResult<MethodRun> {
        let curvature = match (config.needs_curvature(), curvature) {
            (false, _) => None,
            (true, Some(c)) => Some(c),
            (true, None) => Some(self.broad_curvature()?),
        };
        let outcomes = self
            .suite
            .tasks
            .par_iter()
            .map(|task| train(config, task, &self.spec, &self.theta0, &self.head, curvature))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(MethodRun {
            label: label.to_string(),
            config: config.clone(),
            outcomes,
        })
    }

    pub fn accuracies(&self, theta: &ParameterVector) -> LabResult<Vec<f64>> {
        Ok(self
            .tests
            .iter()
            .map(|s| accuracy(&self.spec, theta, &self.head, s))
            .collect::<Result<_, _>>()?)
    }

    /// Accuracy on every task of the model `θ0 + Σ α_t τ_t` of the given kind.
    pub fn accuracies_of(&self, kind: ModelKind, terms: &[(f64, &TaskVector)]) -> LabResult<Vec<f64>> {
        let theta = compose(&self.theta0, terms)?;
        match kind {
            ModelKind::NonLinear => self.accuracies(&theta),
            ModelKind::Linearized => {
                let tau = TaskVector::between(&self.theta0, &theta, "combined", "linear")?;
                Ok(self
                    .tests
                    .iter()
                    .map(|s| linearized_accuracy(&self.spec, &self.theta0, &self.head, &tau, s))
                    .collect::<Result<_, _>>()?)
            }
        }
    }

    pub fn pretrained_accuracies(&self) -> LabResult<Vec<f64>> {
        self.accuracies(&self.theta0)
    }

    /// Accuracy of the `tau` model on task `task`.
    pub fn individual_accuracy(&self, kind: ModelKind, tau: &TaskVector, task: usize) -> LabResult<f64> {
        let s = &self.tests[task];
        Ok(match kind {
            ModelKind::NonLinear => accuracy(&self.spec, &compose(&self.theta0, &[(1.0, tau)])?, &self.head, s)?,
            ModelKind::Linearized => linearized_accuracy(&self.spec, &self.theta0, &self.head, tau, s)?,
        })
    }

    /// Accuracy of each `τ_t` model on its own task.
    pub fn individual_accuracies(&self, kind: ModelKind, taus: &[TaskVector]) -> LabResult<Vec<f64>> {
        taus.iter().enumerate().map(|(t, tau)| self.individual_accuracy(kind, tau, t)).collect()
    }

    pub fn merged(&self, taus: &[TaskVector], alpha: f64) -> LabResult<ParameterVector> {
        let terms: Vec<(f64, &TaskVector)> = taus.iter().map(|t| (alpha, t)).collect();
        Ok(compose(&self.theta0, &terms)?)
    }

    pub fn merged_accuracies(&self, kind: ModelKind, taus: &[TaskVector], alpha: f64) -> LabResult<Vec<f64>> {
        let terms: Vec<(f64, &TaskVector)> = taus.iter().map(|t| (alpha, t)).collect();
        self.accuracies_of(kind, &terms)
    }

    /// Merged-model report normalized by the same vectors' individual accuracies.
    pub fn addition_report(&self, label: &str, kind: ModelKind, taus: &[TaskVector], alpha: f64) -> LabResult<EvalReport> {
        let merged = self.merged_accuracies(kind, taus, alpha)?;
        let individual = self.individual_accuracies(kind, taus)?;
        Ok(EvalReport::new(label, alpha, self.task_ids(), merged, Some(&individual))?)
    }

    /// Mean merged accuracy over a coefficient grid.
    pub fn addition_sweep(&self, kind: ModelKind, taus: &[TaskVector], grid: &[f64]) -> LabResult<SweepCurve> {
        let sum = delta_core::arithmetic::sum_vectors(&self.theta0, &taus.iter().collect::<Vec<_>>(), "merged")?;
        let sweep = delta_core::arithmetic::alpha_sweep(&self.theta0, &sum, grid, |theta| {
            let accs = TaskVector::between(&self.theta0, theta, "merged", "sweep")
                .map_err(LabError::from)
                .and_then(|tau| self.accuracies_of(kind, &[(1.0, &tau)]));
            match accs {
                Ok(a) => a.iter().sum::<f64>() / a.len() as f64,
                Err(_) => f64::NAN,
            }
        })?;
        if sweep.points.iter().any(|p| !p.metric.is_finite()) {
            return Err(Error::NonFinite("sweep accuracy").into());
        }
        Ok(sweep)
    }

    /// All test inputs of the suite, task by task.
    pub fn pooled_tests(&self) -> Samples {
        Samples::concat(&self.tests, self.config.suite.input_dim)
    }

    /// Linearization error of the ensemble `{θ0 + τ_t}` over all test inputs.
    pub fn linearization(&self, taus: &[TaskVector]) -> LabResult<LinearizationProfile> {
        let models: Vec<ParameterVector> = taus.iter().map(|t| compose(&self.theta0, &[(1.0, t)])).collect::<Result<_, _>>()?;
        let pooled = self.pooled_tests();
        Ok(linearization_error_profile(&self.spec, &models, pooled.view())?)
    }

    fn require_pairs(&self) -> LabResult<()> {
        if self.task_count() < 2 {
            return Err(LabError::Unsupported("pairwise analyses need at least two tasks".into()));
        }
        Ok(())
    }

    /// Disentanglement heatmaps for every unordered task pair.
    pub fn heatmaps(&self, taus: &[TaskVector], grid: &[f64]) -> LabResult<Vec<PairHeatmap>> {
        self.require_pairs()?;
        let n = taus.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let heatmap = disentanglement_heatmap(&self.spec, &self.theta0, &self.head, &taus[i], &taus[j], &self.tests[i], &self.tests[j], grid, grid)?;
                out.push(PairHeatmap { first: i, second: j, heatmap });
            }
        }
        Ok(out)
    }

    pub fn localization(&self, taus: &[TaskVector]) -> LabResult<Vec<LocalizationCell>> {
        let models: Vec<ParameterVector> = taus.iter().map(|t| compose(&self.theta0, &[(1.0, t)])).collect::<Result<_, _>>()?;
        Ok(localization_profile(&self.spec, &self.theta0, &models, &self.tests)?)
    }

    /// Negates `tau` (trained on `task`) over `grid`; the control set is every
    /// other task's test split.
    pub fn negation(&self, tau: &TaskVector, task: usize, grid: &[f64], budget_points: f64) -> LabResult<NegationResult> {
        self.require_pairs()?;
        if task >= self.task_count() {
            return Err(Error::InvalidConfig(format!("task {task} out of range for {} tasks", self.task_count())).into());
        }
        if grid.is_empty() {
            return Err(Error::Empty("alpha grid").into());
        }
        let control = Samples::concat(self.tests.iter().enumerate().filter(|(j, _)| *j != task).map(|(_, s)| s), self.config.suite.input_dim);
        let target = &self.tests[task];
        let eval = |theta: &ParameterVector| -> LabResult<(f64, f64)> {
            Ok((accuracy(&self.spec, theta, &self.head, target)?, accuracy(&self.spec, theta, &self.head, &control)?))
        };
        let (pre_t, pre_c) = eval(&self.theta0)?;
        let curve: Vec<NegationPoint> = grid
            .par_iter()
            .map(|&alpha| {
                let theta = delta_core::arithmetic::negate(&self.theta0, tau, alpha)?;
                let (t, c) = eval(&theta)?;
                Ok(NegationPoint { alpha, target: t, control: c })
            })
            .collect::<LabResult<_>>()?;
        let floor = pre_c - budget_points / 100.0;
        let mut selected: Option<usize> = None;
        for (i, p) in curve.iter().enumerate() {
            if p.control >= floor - 1e-12 && selected.is_none_or(|s| p.target < curve[s].target) {
                selected = Some(i);
            }
        }
        let relaxed = if selected.is_none() {
            let mut best = 0;
            for (i, p) in curve.iter().enumerate() {
                if p.control > curve[best].control {
                    best = i;
                }
            }
            Some(best)
        } else {
            None
        };
        Ok(NegationResult {
            task,
            pretrained_target: pre_t,
            pretrained_control: pre_c,
            budget_points,
            curve,
            selected,
            relaxed,
        })
    }
}
