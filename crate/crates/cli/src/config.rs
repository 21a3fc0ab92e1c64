//! Experiment configuration: defaults, TOML files and flag overrides.

use std::path::Path;

use delta_core::net::{Activation, NetworkSpec};
use delta_core::taskgen::SuiteSpec;
use delta_core::trainer::{PretrainConfig, TrainConfig};
use delta_core::Error;
use serde::{Deserialize, Serialize};

use crate::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    /// Width of the feature layer read by the frozen head.
    pub features: usize,
    pub activation: Activation,
    /// Activation on the feature layer.
    pub output_activation: Activation,
    pub bias: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            features: 16,
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Allowed control-accuracy loss for negation, in accuracy points.
    pub negation_budget: f64,
    /// Task whose clusters form the single-task reference proxy.
    pub proxy_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negation_budget: 3.0,
            proxy_task: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub suite: SuiteSpec,
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub damping: f64,
    pub eval: EvalConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            suite: SuiteSpec::default(),
            net: NetConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            damping: delta_core::curvature::DEFAULT_DAMPING,
            eval: EvalConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| LabError::Core(Error::InvalidConfig(format!("config file: {e}"))))
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Defaults, overlaid by the file at `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, LabError> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, LabError> {
        let mut dims = vec![self.suite.input_dim];
        dims.extend_from_slice(&self.net.hidden);
        dims.push(self.net.features);
        Ok(NetworkSpec::new(dims, self.net.activation, self.net.bias)?.with_output_activation(self.net.output_activation)?)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.suite.validate()?;
        self.train.validate()?;
        self.network_spec()?;
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidConfig(format!("damping must be finite and >= 0, got {}", self.damping)).into());
        }
        if self.eval.negation_budget.is_nan() || self.eval.negation_budget < 0.0 {
            return Err(Error::InvalidConfig("negation_budget must be >= 0".into()).into());
        }
        if self.eval.proxy_task >= self.suite.tasks {
            return Err(Error::InvalidConfig(format!("proxy_task {} out of range for {} tasks", self.eval.proxy_task, self.suite.tasks)).into());
        }
        Ok(())
    }
}
