//! FedAvg coordinator and clients exchanging parameter-shaped updates only.

mod aggregate;
mod config;
mod partition;
pub mod protocol;
mod runtime;

pub use aggregate::{aggregate_updates, apply_global_update, GradientUpdate};
pub use config::{FedMode, FederationConfig, Partition, Transport, DEFAULT_PORT};
pub use partition::partition_dataset;
pub use protocol::{ClientStats, Message, MessageKind, RoundReport};
pub use runtime::{
    bind_address, client_id, run_federated_training, Direction, FederatedRun, FrameHook, RunHooks, TrainingSetup,
    BIND_ADDR_ENV,
};
