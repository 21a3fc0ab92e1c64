//! The full comparison: every method, ablation and reference variant trained
//! on the same suite, reduced to the quantities the reports are built from.

use delta_core::arithmetic::{negation_grid, SweepCurve, TaskVector};
use delta_core::linearize::LinearizationProfile;
use delta_core::metrics::{heatmap_grid, sig6, EvalReport, LocalizationCell};
use delta_core::taskgen::ReferenceVariant;
use delta_core::trainer::{ApkdMode, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::lab::{Lab, LabResult, MethodRun, ModelKind, NegationResult, PairHeatmap};

/// Coefficients over which merged-accuracy robustness is measured.
pub fn robustness_grid() -> Vec<f64> {
    (3..=10).map(|i| i as f64 / 10.0).collect()
}

/// One labeled set of per-task vectors, however it was produced.
#[derive(Debug, Clone)]
pub struct RunVectors {
    pub label: String,
    pub kind: ModelKind,
    pub students: Vec<TaskVector>,
    pub teachers: Option<Vec<TaskVector>>,
    pub wall_clock_ms: Vec<u128>,
}

impl From<&MethodRun> for RunVectors {
    fn from(run: &MethodRun) -> Self {
        Self {
            label: run.label.clone(),
            kind: run.kind(),
            students: run.students(),
            teachers: run.teachers(),
            wall_clock_ms: run.outcomes.iter().map(|o| o.wall_clock_ms).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub merged: EvalReport,
    pub individual: Vec<f64>,
    /// Linearized-teacher accuracies, for methods that train one.
    pub teacher: Option<Vec<f64>>,
    /// Mean linearization error of the ensemble; absent with fewer than two tasks.
    pub linearization_mean: Option<f64>,
    /// Max minus min mean merged accuracy over [`robustness_grid`].
    pub sweep_range: f64,
    /// Mean L2 norm of the task vectors.
    pub mean_norm: f64,
    pub heatmap_means: Vec<f64>,
    /// Per task: in-domain and out-of-domain median edit distance.
    pub edit_medians: Vec<(f64, Option<f64>)>,
    pub wall_clock_ms: Vec<u128>,
}

/// A summary plus the raw profiles behind it.
#[derive(Debug, Clone)]
pub struct MethodDetail {
    pub summary: MethodSummary,
    pub linearization: Option<LinearizationProfile>,
    pub sweep: SweepCurve,
    pub heatmaps: Vec<PairHeatmap>,
    pub localization: Vec<LocalizationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub task_ids: Vec<String>,
    pub pretrained: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub negation: Vec<NegationResult>,
}

impl ExperimentSummary {
    pub fn method(&self, label: &str) -> &MethodSummary {
        self.methods.iter().find(|m| m.label == label).unwrap_or_else(|| panic!("no method `{label}`"))
    }
}

/// Every configuration compared by the experiment, with its curvature variant.
pub fn experiment_runs(lab: &Lab) -> Vec<(String, TrainConfig, ReferenceVariant)> {
    let mut runs: Vec<(String, TrainConfig, ReferenceVariant)> = Method::ALL
        .iter()
        .map(|&m| (m.name().to_string(), lab.train_config(m), ReferenceVariant::Broad))
        .collect();
    let mut fixed = lab.train_config(Method::Delta);
    fixed.apkd_mode = ApkdMode::Fixed1;
    runs.push(("delta_fixed_1".into(), fixed, ReferenceVariant::Broad));
    runs.push(("delta_union_only".into(), lab.train_config(Method::Delta), ReferenceVariant::UnionOnly));
    let proxy = ReferenceVariant::SingleTaskProxy(lab.config.eval.proxy_task);
    runs.push(("delta_single_task_proxy".into(), lab.train_config(Method::Delta), proxy));
    runs
}

pub fn train_runs(lab: &Lab) -> LabResult<Vec<MethodRun>> {
    experiment_runs(lab)
        .into_iter()
        .map(|(label, cfg, variant)| {
            let curvature = if cfg.needs_curvature() { Some(lab.curvature(variant)?) } else { None };
            lab.train_all(&label, &cfg, curvature.as_ref())
        })
        .collect()
}

/// Evaluates one set of vectors; pairwise analyses only when `with_pairs`.
pub fn analyze(lab: &Lab, run: &RunVectors, with_pairs: bool) -> LabResult<MethodDetail> {
    let taus = &run.students;
    let merged = lab.addition_report(&run.label, run.kind, taus, 1.0)?;
    let individual = lab.individual_accuracies(run.kind, taus)?;
    let teacher = match &run.teachers {
        Some(t) => Some(lab.individual_accuracies(ModelKind::Linearized, t)?),
        None => None,
    };
    let linearization = if taus.len() >= 2 { Some(lab.linearization(taus)?) } else { None };
    let sweep = lab.addition_sweep(run.kind, taus, &robustness_grid())?;
    let (heatmaps, localization) = if with_pairs {
        (lab.heatmaps(taus, &heatmap_grid())?, lab.localization(taus)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let summary = MethodSummary {
        label: run.label.clone(),
        merged,
        individual,
        teacher,
        linearization_mean: linearization.as_ref().map(|l| l.summary.mean),
        sweep_range: sweep.range(),
        mean_norm: taus.iter().map(|t| t.norm()).sum::<f64>() / taus.len() as f64,
        heatmap_means: heatmaps.iter().map(|m| m.heatmap.mean()).collect(),
        edit_medians: localization
            .iter()
            .map(|c| (c.in_domain.summary.median, c.out_of_domain.as_ref().map(|o| o.summary.median)))
            .collect(),
        wall_clock_ms: run.wall_clock_ms.clone(),
    };
    Ok(MethodDetail {
        summary,
        linearization,
        sweep,
        heatmaps,
        localization,
    })
}

/// Labels whose pairwise analyses (heatmaps, edit distances) are computed.
pub fn pairwise_labels() -> [&'static str; 2] {
    ["delta", "nonlinear_ft"]
}

/// Trains every configuration and analyzes all of them.
pub fn run_experiment(lab: &Lab) -> LabResult<(Vec<MethodRun>, Vec<MethodDetail>, ExperimentSummary)> {
    let runs = train_runs(lab)?;
    let pairs = lab.task_count() >= 2;
    let details = runs
        .iter()
        .map(|r| analyze(lab, &RunVectors::from(r), pairs && pairwise_labels().contains(&r.label.as_str())))
        .collect::<LabResult<Vec<_>>>()?;
    let delta = runs.iter().find(|r| r.label == "delta").expect("delta run").students();
    let negation = if pairs {
        (0..lab.task_count())
            .map(|t| lab.negation(&delta[t], t, &negation_grid(), lab.config.eval.negation_budget))
            .collect::<LabResult<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let summary = ExperimentSummary {
        task_ids: lab.task_ids(),
        pretrained: lab.pretrained_accuracies()?,
        methods: details.iter().map(|d| d.summary.clone()).collect(),
        negation,
    };
    Ok((runs, details, summary))
}

/// Human-readable digest of a summary.
pub fn summary_text(s: &ExperimentSummary) -> String {
    let opt = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    out.push_str(&format!("pre-trained accuracy: {}\n", join(&s.pretrained)));
    out.push_str(&format!(
        "{:<26}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
        "method", "merged", "normalized", "individual", "lin_err", "range", "norm"
    ));
    for m in &s.methods {
        let ind = m.individual.iter().sum::<f64>() / m.individual.len() as f64;
        out.push_str(&format!(
            "{:<26}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
            m.label,
            sig6(m.merged.mean_absolute),
            opt(m.merged.mean_normalized),
            sig6(ind),
            opt(m.linearization_mean),
            sig6(m.sweep_range),
            sig6(m.mean_norm)
        ));
        if let Some(t) = &m.teacher {
            out.push_str(&format!("  teacher: {}  student: {}\n", join(t), join(&m.individual)));
        }
        if !m.heatmap_means.is_empty() {
            out.push_str(&format!("  heatmap means: {}\n", join(&m.heatmap_means)));
        }
        if !m.edit_medians.is_empty() {
            let ratios: Vec<String> = m.edit_medians.iter().map(|(i, o)| opt(o.map(|o| i / o))).collect();
            out.push_str(&format!("  edit median ratios: {}\n", ratios.join(" ")));
        }
    }
    for n in &s.negation {
        let c = n.chosen();
        out.push_str(&format!(
            "negate task {}: alpha {} target {} (pre {}) control {} (pre {}){}\n",
            n.task,
            sig6(c.alpha),
            sig6(c.target),
            sig6(n.pretrained_target),
            sig6(c.control),
            sig6(n.pretrained_control),
            if n.selected.is_none() { " [infeasible, relaxed]" } else { "" }
        ));
    }
    out
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| sig6(*x)).collect::<Vec<_>>().join(" ")
}
