use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkGains {
    /// DLS damping factor lambda.
    pub damping: f64,
    /// Position tolerance in metres.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest task-space error fed to a single DLS update, metres.
    pub max_step: f64,
    /// Virtual spring stiffness (N/m) for the joint-torque proxy.
    pub stiffness: f64,
}

impl Default for IkGains {
    fn default() -> Self {
        Self {
            damping: 0.05,
            tolerance: 1e-3,
            max_iterations: 200,
            max_step: 0.1,
            stiffness: 200.0,
        }
    }
}

impl IkGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) || !(self.tolerance > 0.0) || !(self.max_step > 0.0) {
            return Err(Error::Config(
                "ik gains: damping must be >= 0, tolerance and max_step > 0".into(),
            ));
        }
        if !(self.stiffness >= 0.0 && self.stiffness.is_finite()) {
            return Err(Error::Config("ik gains: stiffness must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Recorded per-timestep arm state.
///
/// `j_f` is not a simulated force: it is `J^T * stiffness * e`, the torque a
/// virtual spring pulling the tip toward the target would exert, with `e` the
/// tracking error seen at the start of the timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub j_f: Vec<f64>,
    pub j_p: Vec<[f64; 3]>,
    pub j_i: Vec<f64>,
    pub j_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub angles: Vec<f64>,
    pub reached: bool,
    pub iterations: usize,
    /// Final distance between the tip and the target.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkStep {
    pub state: RobotState,
    pub reached: bool,
    pub iterations: usize,
    pub error: f64,
}

/// Bent start configuration away from the fully stretched singularity.
pub fn rest_pose(arm: &ArmModel) -> Vec<f64> {
    let mut q: Vec<f64> = (0..arm.n_joints())
        .map(|i| if i % 2 == 1 { -0.25 } else { 0.0 })
        .collect();
    arm.clamp(&mut q);
    q
}

/// Start configuration for a cold solve: the base turned toward the target's
/// azimuth and the chain curled toward its side of the horizontal plane.
pub fn initial_guess(arm: &ArmModel, target: [f64; 3]) -> Vec<f64> {
    let bend = if target[2] < 0.0 { 0.25 } else { -0.25 };
    let mut q: Vec<f64> = (0..arm.n_joints())
        .map(|i| if i % 2 == 1 { bend } else { 0.0 })
        .collect();
    if target[0] != 0.0 || target[1] != 0.0 {
        q[0] = target[1].atan2(target[0]);
    }
    arm.clamp(&mut q);
    q
}

/// Iterate DLS updates from `q_init` toward `target`. Returns the best
/// configuration seen; `reached` is false when the tolerance was not met.
pub fn solve_ik(arm: &ArmModel, target: [f64; 3], q_init: &[f64], gains: &IkGains) -> IkSolution {
    let target = Vector3::from(target);
    let mut q = q_init.to_vec();
    arm.clamp(&mut q);
    let damping2 = gains.damping * gains.damping;

    let mut best_q = q.clone();
    let mut best_err = (target - arm.tip(&q)).norm();
    let mut iterations = 0;
    while best_err >= gains.tolerance && iterations < gains.max_iterations {
        let (jac, tip) = arm.jacobian(&q);
        let mut e = target - tip;
        let norm = e.norm();
        if norm > gains.max_step {
            e *= gains.max_step / norm;
        }
        let a = &jac * jac.transpose() + Matrix3::identity() * damping2;
        let Some(y) = a.cholesky().map(|c| c.solve(&e)) else {
            break;
        };
        let dq = jac.transpose() * y;
        for (qi, d) in q.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
        arm.clamp(&mut q);
        iterations += 1;

        let err = (target - arm.tip(&q)).norm();
        if err < best_err {
            best_err = err;
            best_q.copy_from_slice(&q);
        }
    }
    IkSolution {
        angles: best_q,
        reached: best_err < gains.tolerance,
        iterations,
        error: best_err,
    }
}

/// Track a target sequence sampled every `dt` seconds, warm-starting each
/// solve from the previous timestep.
pub fn ik_track(
    arm: &ArmModel,
    targets: &[[f64; 3]],
    q0: &[f64],
    gains: &IkGains,
    dt: f64,
) -> Result<Vec<IkStep>> {
    arm.check_limits(q0)?;
    gains.validate()?;
    if !(dt > 0.0) {
        return Err(Error::Invalid("timestep must be positive".into()));
    }
    let mut prev = q0.to_vec();
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        let (jac, tip) = arm.jacobian(&prev);
        let spring = (Vector3::from(target) - tip) * gains.stiffness;
        let j_f: Vec<f64> = (jac.transpose() * spring).iter().copied().collect();

        let sol = solve_ik(arm, target, &prev, gains);
        let fk = arm.forward_kinematics(&sol.angles)?;
        let j_v = sol
            .angles
            .iter()
            .zip(&prev)
            .map(|(q, p)| (q - p) / dt)
            .collect();
        out.push(IkStep {
            state: RobotState {
                j_f,
                j_p: fk.joint_positions,
                j_i: sol.angles.clone(),
                j_v,
            },
            reached: sol.reached,
            iterations: sol.iterations,
            error: sol.error,
        });
        prev = sol.angles;
    }
    Ok(out)
}
