use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::training::{LocalTrainConfig, OptimizerConfig};
use crate::{Error, Result};

pub const DEFAULT_PORT: u16 = 7431;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

named_enum!(FedMode { FedAvg => "fedavg", Personalized => "personalized" });
named_enum!(Partition { Iid => "iid", ByPatient => "by_patient", ByExercise => "by_exercise" });
named_enum!(Transport { InProcess => "in_process", Tcp => "tcp" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Minibatches per local epoch; 0 means a full pass.
    pub local_max_batches: usize,
    pub optimizer: OptimizerConfig,
    /// Global step size; follows the local learning rate when unset.
    pub eta: Option<f64>,
    pub lambda: f64,
    pub sigma: f64,
    pub mode: FedMode,
    pub partition: Partition,
    pub transport: Transport,
    pub port: u16,
    pub timeout_s: f64,
    /// Weight client updates by sample count instead of the plain mean.
    pub weighted: bool,
    /// Held-out samples scored after each round; 0 means all.
    pub eval_max_samples: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 4,
            rounds: 30,
            local_epochs: 2,
            batch_size: 32,
            local_max_batches: 10,
            optimizer: OptimizerConfig::default(),
            eta: None,
            lambda: 0.1,
            sigma: 1.0,
            mode: FedMode::FedAvg,
            partition: Partition::ByPatient,
            transport: Transport::InProcess,
            port: DEFAULT_PORT,
            timeout_s: 60.0,
            weighted: false,
            eval_max_samples: 2048,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_clients, rounds, local_epochs and batch_size must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config("eta must be > 0".into()));
            }
        }
        if !(self.lambda >= 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and sigma > 0".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be > 0".into()));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(self.optimizer.learning_rate)
    }

    pub fn local(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            optimizer: self.optimizer,
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            max_batches: self.local_max_batches,
        }
    }
}
