//! Federated joint learning for rehabilitation-robot guidance.
//!
//! Patients' exercise trajectories are turned into robot guidance targets by
//! damped-least-squares IK ([`kinematics`]); an LSTM-Transformer ([`model`])
//! learns the window-to-target mapping; hospitals train locally and exchange
//! only parameter-shaped updates through a FedAvg coordinator
//! ([`federation`]); training can add a rank-correlation term that ties the
//! per-sample loss to the PCK metric ([`objectives`]).

pub mod digest;
pub mod error;
pub mod federation;
pub mod kinematics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
