//! Experiment configuration (TOML, one experiment per file).

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ProtocolOptions, RoundPlan, ScheduleConfig};
use crate::integrator::SolverConfig;
use crate::knowledge::{DistanceMetric, KnowledgeFill};
use crate::nn::{Activation, MlpShape};
use crate::taskgen::StreamParams;

/// Which protocol hooks a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Federation with both integration sites.
    Fedknow,
    /// Federation, no integration.
    FedavgOnly,
    /// Each client trains alone with plain SGD.
    NaiveLocal,
    /// Each client trains alone with past-task integration.
    LocalGem,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Fedknow, Strategy::FedavgOnly, Strategy::NaiveLocal, Strategy::LocalGem];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedknow => "fedknow",
            Strategy::FedavgOnly => "fedavg_only",
            Strategy::NaiveLocal => "naive_local",
            Strategy::LocalGem => "local_gem",
        }
    }

    pub fn federated(self) -> bool {
        matches!(self, Strategy::Fedknow | Strategy::FedavgOnly)
    }

    pub fn past_integration(self) -> bool {
        matches!(self, Strategy::Fedknow | Strategy::LocalGem)
    }

    pub fn post_integration(self) -> bool {
        self == Strategy::Fedknow
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub eta_l0: f64,
    pub eta_g0: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_big_l")]
    pub big_l: f64,
}

fn default_mu() -> f64 {
    1.0
}

fn default_big_l() -> f64 {
    8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationParams {
    pub distance: DistanceMetric,
    pub knowledge_fill: KnowledgeFill,
    pub knowledge_finetune_steps: usize,
    pub knowledge_lr: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub eps: f64,
    pub lambda_bound: f64,
}

impl Default for IntegrationParams {
    fn default() -> Self {
        let solver = SolverConfig::default();
        IntegrationParams {
            distance: DistanceMetric::Wasserstein,
            knowledge_fill: KnowledgeFill::Zeros,
            knowledge_finetune_steps: 0,
            knowledge_lr: 0.01,
            tol: solver.tol,
            max_iter: solver.max_iter,
            eps: solver.eps,
            lambda_bound: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputParams {
    /// Directory for reports, event logs and checkpoints.
    pub dir: Option<String>,
    /// Write a client-state checkpoint after every task.
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub strategy: Strategy,
    pub model: MlpShape,
    pub plan: RoundPlan,
    pub schedule: ScheduleParams,
    pub rho: f64,
    pub k: usize,
    pub stream: StreamParams,
    pub batch_size: usize,
    pub bandwidth_bytes_per_sec: f64,
    #[serde(default)]
    pub integration: IntegrationParams,
    #[serde(default)]
    pub output: OutputParams,
}

impl ExperimentConfig {
    /// Desk-scale reference setup: 4 clients, 5 tasks of 4 classes, a
    /// `[16, 32, 4]` MLP, 3 rounds of 10 local iterations per task, `rho = 0.1`, `k = 3`.
    pub fn reference(seed: u64, strategy: Strategy) -> Self {
        ExperimentConfig {
            seed,
            num_clients: 4,
            strategy,
            model: MlpShape::new(vec![16, 32, 4], Activation::Relu).expect("valid shape"),
            plan: RoundPlan { rounds_per_task: 3, local_iters: 10, finetune_epochs: 1 },
            schedule: ScheduleParams { eta_l0: 0.7, eta_g0: 0.01, mu: 1.0, big_l: 8.0 },
            rho: 0.1,
            k: 3,
            stream: StreamParams {
                num_tasks: 5,
                classes_per_task: 4,
                input_dim: 16,
                spread: 0.35,
                samples_per_class: 1000,
            },
            batch_size: 32,
            bandwidth_bytes_per_sec: 1_000_000.0,
            integration: IntegrationParams::default(),
            output: OutputParams::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.stream.validate()?;
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.bandwidth_bytes_per_sec > 0.0 && self.bandwidth_bytes_per_sec.is_finite()) {
            return Err(Error::config("bandwidth_bytes_per_sec must be > 0"));
        }
        if self.model.input_dim() != self.stream.input_dim {
            return Err(Error::config(format!(
                "model input size {} differs from stream input_dim {}",
                self.model.input_dim(),
                self.stream.input_dim
            )));
        }
        if self.model.num_classes() != self.stream.classes_per_task {
            return Err(Error::config(format!(
                "model output size {} differs from classes_per_task {}",
                self.model.num_classes(),
                self.stream.classes_per_task
            )));
        }
        if !(self.integration.knowledge_lr > 0.0) || !(self.integration.lambda_bound > 0.0) {
            return Err(Error::config("knowledge_lr and lambda_bound must be > 0"));
        }
        self.solver().validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let s = &self.schedule;
        ScheduleConfig::new(s.eta_l0, s.eta_g0, s.mu, s.big_l, self.plan.rounds_per_task)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig { tol: self.integration.tol, max_iter: self.integration.max_iter, eps: self.integration.eps }
    }

    pub fn protocol_options(&self) -> ProtocolOptions {
        ProtocolOptions {
            federated: self.strategy.federated(),
            past_integration: self.strategy.past_integration(),
            post_integration: self.strategy.post_integration(),
            distance: self.integration.distance,
            solver: self.solver(),
            knowledge_fill: self.integration.knowledge_fill,
            knowledge_finetune_steps: self.integration.knowledge_finetune_steps,
            knowledge_lr: self.integration.knowledge_lr,
            batch_size: self.batch_size,
            lambda_bound: self.integration.lambda_bound,
        }
    }
}
