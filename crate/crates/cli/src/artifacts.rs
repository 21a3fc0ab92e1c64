//! On-disk layouts of the pipeline stages.
//!
//! A data directory holds `task_<t>.json/.bin` per task and
//! `reference.json/.bin`; a checkpoint directory holds
//! `checkpoint.json/.bin` with `θ0` and the frozen head in 32-bit floats.

use std::path::Path;

use delta_core::codec::{f32_le_bytes, read_artifact, write_artifact, PayloadReader};
use delta_core::net::{Head, NetworkSpec, ParameterVector};
use delta_core::taskgen::{suite_centers, Suite, SuiteSpec, TaskDataset};
use delta_core::Error;
use serde::{Deserialize, Serialize};

use crate::lab::LabResult;
use crate::LabError;

const CHECKPOINT_FORMAT: &str = "delta-lab/checkpoint/v1";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const CURVATURE_FILE: &str = "ekfac.json";
pub const STUDENT_FILE: &str = "tau_student.json";
pub const TEACHER_FILE: &str = "tau_teacher.json";

pub fn task_file(t: usize) -> String {
    format!("task_{t}.json")
}

/// Writes every task and the reference set; returns the file names written.
pub fn save_suite(suite: &Suite, dir: &Path) -> LabResult<Vec<String>> {
    let mut names = Vec::new();
    for (t, task) in suite.tasks.iter().enumerate() {
        let name = task_file(t);
        task.save(&dir.join(&name))?;
        names.push(name);
    }
    suite.reference.save(&dir.join(REFERENCE_FILE))?;
    names.push(REFERENCE_FILE.into());
    Ok(names)
}

/// Loads a suite written by [`save_suite`] for the given generator settings.
pub fn load_suite(spec: &SuiteSpec, dir: &Path) -> LabResult<Suite> {
    let load = |name: &str| -> LabResult<TaskDataset> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(LabError::Missing(path.display().to_string()));
        }
        Ok(TaskDataset::load(&path)?)
    };
    let tasks = (0..spec.tasks).map(|t| load(&task_file(t))).collect::<LabResult<Vec<_>>>()?;
    let reference = load(REFERENCE_FILE)?;
    if tasks.iter().chain([&reference]).any(|d| d.dim != spec.input_dim || d.classes != spec.classes) {
        return Err(LabError::Incompatible(format!("datasets in {} do not match the suite settings", dir.display())));
    }
    Ok(Suite {
        spec: spec.clone(),
        centers: suite_centers(spec)?,
        tasks,
        reference,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: NetworkSpec,
    classes: usize,
    base_hash: String,
}

/// Pre-trained parameters and frozen head.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub theta0: ParameterVector,
    pub head: Head,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> LabResult<()> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            classes: self.head.classes(),
            base_hash: self.theta0.content_hash(),
        };
        let values: Vec<f32> = self
            .theta0
            .values()
            .iter()
            .chain(self.head.weights())
            .chain(self.head.bias())
            .map(|&v| v as f32)
            .collect();
        Ok(write_artifact(path, CHECKPOINT_FORMAT, &meta, &f32_le_bytes(&values))?)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        if !path.exists() {
            return Err(LabError::Missing(format!("pre-trained checkpoint {}", path.display())));
        }
        let (meta, bytes): (CheckpointMeta, _) = read_artifact(path, CHECKPOINT_FORMAT)?;
        let features = meta.spec.feature_dim();
        let mut reader = PayloadReader::new(path, &bytes);
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        let theta = widen(reader.f32s(meta.spec.param_count(), "parameters")?);
        let weights = widen(reader.f32s(features * meta.classes, "head weights")?);
        let bias = widen(reader.f32s(meta.classes, "head bias")?);
        reader.finish()?;
        let theta0 = ParameterVector::new(&meta.spec, theta)?;
        if theta0.content_hash() != meta.base_hash {
            return Err(Error::HashMismatch {
                what: "checkpoint parameters",
                task_id: path.display().to_string(),
                expected: meta.base_hash,
                found: theta0.content_hash(),
            }
            .into());
        }
        Ok(Self {
            head: Head::new(features, meta.classes, weights, bias)?,
            spec: meta.spec,
            theta0,
        })
    }
}
