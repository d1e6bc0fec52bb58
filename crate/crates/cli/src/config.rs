//! Flat experiment configuration.
//!
//! One TOML table of documented keys covers data generation, model,
//! objective, federation, ablation and evaluation settings. Unknown keys are
//! rejected. Command-line flags override file values, which override the
//! defaults below.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fjl_core::federation::{FedMode, FederationConfig, Partition, Transport, DEFAULT_PORT};
use fjl_core::kinematics::{ArmModel, DatagenConfig, Exercise, IkGains};
use fjl_core::model::{Architecture, ModelConfig, INPUT_DIM};
use fjl_core::objectives::{DistanceMode, PckConfig, RelationalConfig};
use fjl_core::training::{Objective, ObjectiveConfig, OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// File written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One client holding the whole training split.
    Central,
    Federated,
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "central" => Ok(TrainMode::Central),
            "federated" => Ok(TrainMode::Federated),
            _ => Err(format!("unknown mode {s:?} (expected central or federated)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset file read by train, ablation and eval; written by datagen.
    /// Defaults to `<out_dir>/dataset.fjlds`.
    pub dataset: Option<PathBuf>,

    // data generation
    pub n_patients: usize,
    pub exercises: Vec<String>,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub window_p: usize,
    pub stride: usize,
    pub speed_limit: f64,
    pub record_robot_state: bool,
    pub amplitude_scale_min: f64,
    pub amplitude_scale_max: f64,
    pub tremor_std_min: f64,
    pub tremor_std_max: f64,
    pub period_min: f64,
    pub period_max: f64,
    pub reach_min: f64,
    pub reach_max: f64,
    pub ik_damping: f64,
    pub ik_tolerance: f64,
    pub ik_max_iterations: usize,
    pub ik_max_step: f64,
    pub ik_stiffness: f64,
    /// Directory of `<patient>.<exercise>.csv` pose files tracked in addition
    /// to the synthetic patients.
    pub import_dir: Option<PathBuf>,
    pub test_fraction: f64,

    // model
    pub architecture: Architecture,
    pub lstm_hidden: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub mlp_layers: Vec<usize>,
    pub transformer_blocks: usize,

    // objective and metric
    pub loss: Objective,
    pub relational_beta: f64,
    pub soft_temperature: f64,
    pub relational_min_batch: usize,
    pub pck_threshold: f64,
    pub pck_d_def: f64,
    pub pck_distance: DistanceMode,

    // training and federation
    pub mode: TrainMode,
    pub fed_mode: FedMode,
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_max_batches: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global step size; the learning rate when absent.
    pub eta: Option<f64>,
    pub lambda: f64,
    pub sigma: f64,
    pub partition: Partition,
    pub transport: Transport,
    pub port: u16,
    pub timeout_s: f64,
    pub weighted: bool,
    pub eval_max_samples: usize,

    // ablation
    pub ablation_rounds: usize,
    /// Extra relational-weight values run on lstm_transformer; empty skips the sweep.
    pub ablation_beta_sweep: Vec<f64>,

    // evaluation
    pub eval_thresholds: Vec<f64>,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let datagen = DatagenConfig::default();
        let model = ModelConfig::default();
        let relational = RelationalConfig::default();
        let pck = PckConfig::default();
        let fed = FederationConfig::default();
        let ik = IkGains::default();
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            dataset: None,
            n_patients: datagen.n_patients,
            exercises: datagen.exercises.iter().map(|e| e.name().to_string()).collect(),
            duration_s: datagen.duration_s,
            rate_hz: datagen.rate_hz,
            window_p: datagen.window_p,
            stride: datagen.stride,
            speed_limit: datagen.speed_limit,
            record_robot_state: datagen.record_robot_state,
            amplitude_scale_min: datagen.amplitude_scale_range.0,
            amplitude_scale_max: datagen.amplitude_scale_range.1,
            tremor_std_min: datagen.tremor_std_range.0,
            tremor_std_max: datagen.tremor_std_range.1,
            period_min: datagen.period_range.0,
            period_max: datagen.period_range.1,
            reach_min: datagen.reach_range.0,
            reach_max: datagen.reach_range.1,
            ik_damping: ik.damping,
            ik_tolerance: ik.tolerance,
            ik_max_iterations: ik.max_iterations,
            ik_max_step: ik.max_step,
            ik_stiffness: ik.stiffness,
            import_dir: None,
            test_fraction: 0.2,
            architecture: model.architecture,
            lstm_hidden: model.lstm_hidden,
            attn_heads: model.attn_heads,
            attn_dim: model.attn_dim,
            ffn_dim: model.ffn_dim,
            mlp_layers: model.mlp_layers,
            transformer_blocks: model.transformer_blocks,
            loss: Objective::Relational,
            relational_beta: relational.beta,
            soft_temperature: relational.soft_temperature,
            relational_min_batch: relational.min_batch,
            pck_threshold: pck.threshold_tk,
            pck_d_def: pck.d_def,
            pck_distance: pck.distance_mode,
            mode: TrainMode::Federated,
            fed_mode: fed.mode,
            n_clients: fed.n_clients,
            rounds: fed.rounds,
            local_epochs: fed.local_epochs,
            batch_size: fed.batch_size,
            local_max_batches: fed.local_max_batches,
            optimizer: fed.optimizer.kind,
            learning_rate: fed.optimizer.learning_rate,
            adam_beta1: fed.optimizer.beta1,
            adam_beta2: fed.optimizer.beta2,
            adam_eps: fed.optimizer.eps,
            eta: fed.eta,
            lambda: fed.lambda,
            sigma: fed.sigma,
            partition: fed.partition,
            transport: fed.transport,
            port: DEFAULT_PORT,
            timeout_s: fed.timeout_s,
            weighted: fed.weighted,
            eval_max_samples: fed.eval_max_samples,
            ablation_rounds: 15,
            ablation_beta_sweep: Vec::new(),
            eval_thresholds: vec![0.05, 0.1, 0.2],
            eval_batch_size: 256,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub transport: Option<Transport>,
    pub dataset: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Load `path` (or start from defaults), apply `overrides` and validate.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(v) = overrides.seed {
            cfg.seed = v;
        }
        if let Some(v) = &overrides.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = overrides.mode {
            cfg.mode = v;
        }
        if let Some(v) = overrides.transport {
            cfg.transport = v;
        }
        if let Some(v) = &overrides.dataset {
            cfg.dataset = Some(v.clone());
        }
        if cfg.dataset.is_none() {
            cfg.dataset = Some(cfg.out_dir.join("dataset.fjlds"));
        }
        if cfg.eta.is_none() {
            cfg.eta = Some(cfg.learning_rate);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.exercise_list()?;
        self.datagen().validate()?;
        self.model().validate()?;
        self.objective().relational.validate()?;
        self.pck().validate()?;
        self.federation().validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Usage("test_fraction must be in (0, 1)".into()));
        }
        if self.ablation_rounds == 0 {
            return Err(CliError::Usage("ablation_rounds must be positive".into()));
        }
        if self.ablation_beta_sweep.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(CliError::Usage("ablation_beta_sweep values must be finite and >= 0".into()));
        }
        if self.eval_thresholds.is_empty() || self.eval_thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(CliError::Usage("eval_thresholds must be non-empty and positive".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(CliError::Usage("eval_batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn exercise_list(&self) -> CliResult<Vec<Exercise>> {
        self.exercises
            .iter()
            .map(|name| {
                name.parse::<Exercise>()
                    .map_err(|_| CliError::Usage(format!("exercises: unknown exercise {name:?}")))
            })
            .collect()
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.fjlds"))
    }

    pub fn datagen(&self) -> DatagenConfig {
        DatagenConfig {
            n_patients: self.n_patients,
            exercises: self.exercise_list().unwrap_or_default(),
            duration_s: self.duration_s,
            rate_hz: self.rate_hz,
            window_p: self.window_p,
            stride: self.stride,
            speed_limit: self.speed_limit,
            record_robot_state: self.record_robot_state,
            amplitude_scale_range: (self.amplitude_scale_min, self.amplitude_scale_max),
            tremor_std_range: (self.tremor_std_min, self.tremor_std_max),
            period_range: (self.period_min, self.period_max),
            reach_range: (self.reach_min, self.reach_max),
            ik: IkGains {
                damping: self.ik_damping,
                tolerance: self.ik_tolerance,
                max_iterations: self.ik_max_iterations,
                max_step: self.ik_max_step,
                stiffness: self.ik_stiffness,
            },
            arm: ArmModel::default(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_dim: INPUT_DIM,
            window_p: self.window_p,
            lstm_hidden: self.lstm_hidden,
            attn_heads: self.attn_heads,
            attn_dim: self.attn_dim,
            ffn_dim: self.ffn_dim,
            mlp_layers: self.mlp_layers.clone(),
            architecture: self.architecture,
            transformer_blocks: self.transformer_blocks,
        }
    }

    pub fn pck(&self) -> PckConfig {
        PckConfig {
            threshold_tk: self.pck_threshold,
            d_def: self.pck_d_def,
            distance_mode: self.pck_distance,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.loss,
            relational: RelationalConfig {
                beta: self.relational_beta,
                soft_temperature: self.soft_temperature,
                min_batch: self.relational_min_batch,
            },
            pck: self.pck(),
        }
    }

    /// Federation settings; central mode is the single-client reduction on
    /// the in-process transport.
    pub fn federation(&self) -> FederationConfig {
        let mut fed = FederationConfig {
            n_clients: self.n_clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            local_max_batches: self.local_max_batches,
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            eta: self.eta,
            lambda: self.lambda,
            sigma: self.sigma,
            mode: self.fed_mode,
            partition: self.partition,
            transport: self.transport,
            port: self.port,
            timeout_s: self.timeout_s,
            weighted: self.weighted,
            eval_max_samples: self.eval_max_samples,
        };
        if self.mode == TrainMode::Central {
            fed.n_clients = 1;
            fed.mode = FedMode::FedAvg;
            fed.partition = Partition::Iid;
            fed.transport = Transport::InProcess;
        }
        fed
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml())?;
        Ok(())
    }
}
