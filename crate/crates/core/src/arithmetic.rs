//! Task-vector algebra: addition, negation, scaling and scaling-coefficient sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{f32_le_bytes, read_artifact, write_artifact, PayloadReader};
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::net::ParameterVector;

const TASK_VECTOR_FORMAT: &str = "delta-lab/task-vector/v1";

/// `τ = θ_t − θ0` with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    values: Vec<f64>,
    pub task_id: String,
    pub method: String,
    pub base_hash: String,
    pub spec_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskVectorMeta {
    task_id: String,
    method: String,
    base_hash: String,
    spec_hash: String,
    len: usize,
}

impl TaskVector {
    pub fn new(theta0: &ParameterVector, values: Vec<f64>, task_id: impl Into<String>, method: impl Into<String>) -> Result<Self> {
        ensure_len("task vector", theta0.len(), values.len())?;
        ensure_finite("task vector", &values)?;
        Ok(Self {
            values,
            task_id: task_id.into(),
            method: method.into(),
            base_hash: theta0.content_hash(),
            spec_hash: theta0.spec_hash().to_string(),
        })
    }

    pub fn zeros(theta0: &ParameterVector, task_id: impl Into<String>, method: impl Into<String>) -> Self {
        Self::new(theta0, vec![0.0; theta0.len()], task_id, method).expect("zeros are finite")
    }

    /// `θ_t − θ0`.
    pub fn between(theta0: &ParameterVector, theta_t: &ParameterVector, task_id: impl Into<String>, method: impl Into<String>) -> Result<Self> {
        ensure_len("fine-tuned parameters", theta0.len(), theta_t.len())?;
        let values = theta_t.values().iter().zip(theta0.values()).map(|(a, b)| a - b).collect();
        Self::new(theta0, values, task_id, method)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same vector rounded through `f32`, the on-disk precision.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    /// Fails unless the vector was produced against exactly this base model.
    pub fn check_base(&self, theta0: &ParameterVector) -> Result<()> {
        if self.spec_hash != theta0.spec_hash() {
            return Err(Error::HashMismatch {
                what: "network spec",
                task_id: self.task_id.clone(),
                expected: theta0.spec_hash().to_string(),
                found: self.spec_hash.clone(),
            });
        }
        let base = theta0.content_hash();
        if self.base_hash != base {
            return Err(Error::HashMismatch {
                what: "base model",
                task_id: self.task_id.clone(),
                expected: base,
                found: self.base_hash.clone(),
            });
        }
        ensure_len("task vector", theta0.len(), self.values.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TaskVectorMeta {
            task_id: self.task_id.clone(),
            method: self.method.clone(),
            base_hash: self.base_hash.clone(),
            spec_hash: self.spec_hash.clone(),
            len: self.values.len(),
        };
        let payload: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        write_artifact(path, TASK_VECTOR_FORMAT, &meta, &f32_le_bytes(&payload))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, bytes): (TaskVectorMeta, _) = read_artifact(path, TASK_VECTOR_FORMAT)?;
        let mut reader = PayloadReader::new(path, &bytes);
        let values: Vec<f64> = reader.f32s(meta.len, "task vector")?.into_iter().map(f64::from).collect();
        reader.finish()?;
        ensure_finite("task vector", &values)?;
        Ok(Self {
            values,
            task_id: meta.task_id,
            method: meta.method,
            base_hash: meta.base_hash,
            spec_hash: meta.spec_hash,
        })
    }
}

/// `θ0 + Σ α_t τ_t`, accumulated in list order with Neumaier compensation.
pub fn compose(theta0: &ParameterVector, terms: &[(f64, &TaskVector)]) -> Result<ParameterVector> {
    for (alpha, tau) in terms {
        tau.check_base(theta0)?;
        if !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite coefficient for task `{}`",
                tau.task_id
            )));
        }
    }
    let values = theta0
        .values()
        .iter()
        .enumerate()
        .map(|(i, &base)| {
            let mut sum = base;
            let mut comp = 0.0;
            for (alpha, tau) in terms {
                let term = alpha * tau.values[i];
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            sum + comp
        })
        .collect();
    Ok(theta0.with_values(values))
}

/// `θ0 − α τ`.
pub fn negate(theta0: &ParameterVector, tau: &TaskVector, alpha: f64) -> Result<ParameterVector> {
    compose(theta0, &[(-alpha, tau)])
}

/// Sum of task vectors as a single merged vector (coefficient 1 each).
pub fn sum_vectors(theta0: &ParameterVector, taus: &[&TaskVector], task_id: &str) -> Result<TaskVector> {
    let terms: Vec<(f64, &TaskVector)> = taus.iter().map(|t| (1.0, *t)).collect();
    let merged = compose(theta0, &terms)?;
    let method = taus.first().map(|t| t.method.clone()).unwrap_or_default();
    TaskVector::between(theta0, &merged, task_id, method)
}

/// Default addition grid `{0.1, ..., 1.0}`.
pub fn addition_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Default negation grid `{0.1, ..., 2.0}`.
pub fn negation_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// Grid index of the largest metric (smallest α on ties).
    pub argmax: usize,
    /// Grid index of the smallest metric (smallest α on ties).
    pub argmin: usize,
}

impl SweepCurve {
    pub fn best_alpha(&self) -> f64 {
        self.points[self.argmax].alpha
    }

    pub fn range(&self) -> f64 {
        self.points[self.argmax].metric - self.points[self.argmin].metric
    }
}

/// Evaluates `metric(θ0 + α τ)` over a strictly increasing grid.
pub fn alpha_sweep<F>(theta0: &ParameterVector, tau: &TaskVector, grid: &[f64], evaluator: F) -> Result<SweepCurve>
where
    F: Fn(&ParameterVector) -> f64 + Sync,
{
    if grid.is_empty() {
        return Err(Error::Empty("alpha grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidConfig("alpha grid must be finite and strictly increasing".into()));
    }
    tau.check_base(theta0)?;
    let points: Vec<SweepPoint> = grid
        .par_iter()
        .map(|&alpha| -> Result<SweepPoint> {
            let theta = compose(theta0, &[(alpha, tau)])?;
            Ok(SweepPoint {
                alpha,
                metric: evaluator(&theta),
            })
        })
        .collect::<Result<_>>()?;
    let mut argmax = 0;
    let mut argmin = 0;
    for (i, p) in points.iter().enumerate() {
        if p.metric > points[argmax].metric {
            argmax = i;
        }
        if p.metric < points[argmin].metric {
            argmin = i;
        }
    }
    Ok(SweepCurve { points, argmax, argmin })
}
