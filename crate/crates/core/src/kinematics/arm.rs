use nalgebra::{Matrix3xX, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_JOINTS: usize = 12;

/// Serial chain of revolute joints. Joint `i` rotates about `joint_axes[i]`
/// (expressed in the frame left by joint `i - 1`), then link `i` extends
/// `link_lengths[i]` along the local x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub joint_axes: Vec<[f64; 3]>,
    pub joint_limits: Vec<(f64, f64)>,
}

impl Default for ArmModel {
    /// Twelve joints alternating z/y axes, links tapering toward the tip and
    /// summing to 1.0 m, limits of +-2.8 rad.
    fn default() -> Self {
        let link_lengths = vec![
            0.12, 0.11, 0.10, 0.10, 0.09, 0.09, 0.08, 0.08, 0.07, 0.06, 0.05, 0.05,
        ];
        let joint_axes = (0..N_JOINTS)
            .map(|i| if i % 2 == 0 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] })
            .collect();
        Self {
            link_lengths,
            joint_axes,
            joint_limits: vec![(-2.8, 2.8); N_JOINTS],
        }
    }
}

/// End-effector pose plus the origin of every joint, all in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub end_effector: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub joint_positions: Vec<[f64; 3]>,
}

impl ArmModel {
    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn total_length(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.link_lengths.len();
        if n != N_JOINTS || self.joint_axes.len() != n || self.joint_limits.len() != n {
            return Err(Error::Config(format!(
                "arm needs {N_JOINTS} links, axes and limits (got {}, {}, {})",
                n,
                self.joint_axes.len(),
                self.joint_limits.len()
            )));
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        for (i, a) in self.joint_axes.iter().enumerate() {
            let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("joint {i} axis is not unit length")));
            }
        }
        for (i, &(lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("joint {i} limits need min < max")));
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, angles: &[f64]) -> Result<()> {
        if angles.len() != self.n_joints() {
            return Err(Error::Invalid(format!(
                "expected {} joint angles, got {}",
                self.n_joints(),
                angles.len()
            )));
        }
        for (joint, (&angle, &(min, max))) in angles.iter().zip(&self.joint_limits).enumerate() {
            if !(angle >= min && angle <= max) {
                return Err(Error::JointLimit {
                    joint,
                    angle,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, angles: &mut [f64]) {
        for (q, &(lo, hi)) in angles.iter_mut().zip(&self.joint_limits) {
            *q = q.clamp(lo, hi);
        }
    }

    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<FkResult> {
        self.check_limits(angles)?;
        let chain = self.chain(angles);
        let r = chain.rotation;
        Ok(FkResult {
            end_effector: chain.tip.into(),
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            joint_positions: chain.origins.iter().map(|&p| p.into()).collect(),
        })
    }

    /// End-effector position without limit checks.
    pub(crate) fn tip(&self, angles: &[f64]) -> Vector3<f64> {
        self.chain(angles).tip
    }

    /// Position Jacobian (3 x n) at `angles`, together with the tip position.
    pub(crate) fn jacobian(&self, angles: &[f64]) -> (Matrix3xX<f64>, Vector3<f64>) {
        let chain = self.chain(angles);
        let mut jac = Matrix3xX::zeros(self.n_joints());
        for i in 0..self.n_joints() {
            let col = chain.axes[i].cross(&(chain.tip - chain.origins[i]));
            jac.set_column(i, &col);
        }
        (jac, chain.tip)
    }

    fn chain(&self, angles: &[f64]) -> Chain {
        let n = self.n_joints();
        let mut rot = Rotation3::identity();
        let mut pos = Vector3::zeros();
        let mut origins = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        for i in 0..n {
            let local = Vector3::from(self.joint_axes[i]);
            origins.push(pos);
            axes.push(rot * local);
            rot *= Rotation3::from_axis_angle(&Unit::new_unchecked(local), angles[i]);
            pos += rot * Vector3::new(self.link_lengths[i], 0.0, 0.0);
        }
        Chain {
            origins,
            axes,
            tip: pos,
            rotation: rot,
        }
    }
}

struct Chain {
    origins: Vec<Vector3<f64>>,
    axes: Vec<Vector3<f64>>,
    tip: Vector3<f64>,
    rotation: Rotation3<f64>,
}
