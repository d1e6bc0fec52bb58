//! Synthetic patient motion, robot guidance by damped-least-squares IK on a
//! 12-joint arm, and windowed training datasets.

mod arm;
mod dataset;
mod ik;
mod io;
mod trajectory;

pub use arm::{ArmModel, FkResult, N_JOINTS};
pub use dataset::*;
pub use ik::{ik_track, initial_guess, rest_pose, solve_ik, IkGains, IkSolution, IkStep, RobotState};
pub use io::{import_csv, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use trajectory::*;
