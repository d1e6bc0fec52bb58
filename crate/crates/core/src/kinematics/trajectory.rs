use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exercise {
    ArmLifting,
    LateralTilt,
    TrunkRotation,
    PelvisRotation,
}

impl Exercise {
    pub const ALL: [Exercise; 4] = [
        Exercise::ArmLifting,
        Exercise::LateralTilt,
        Exercise::TrunkRotation,
        Exercise::PelvisRotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Exercise::ArmLifting => "arm_lifting",
            Exercise::LateralTilt => "lateral_tilt",
            Exercise::TrunkRotation => "trunk_rotation",
            Exercise::PelvisRotation => "pelvis_rotation",
        }
    }

    /// Peak-to-peak vertical range of the curve for motion amplitude `a`.
    pub fn z_range(self, a: f64) -> f64 {
        match self {
            Exercise::ArmLifting => a,
            Exercise::LateralTilt => 0.5 * a,
            Exercise::TrunkRotation => 0.2 * a,
            Exercise::PelvisRotation => 0.1 * a,
        }
    }

    /// Displacement from the exercise centre and its time derivative.
    pub fn curve(self, a: f64, period: f64, t: f64) -> ([f64; 3], [f64; 3]) {
        let w = 2.0 * PI / period;
        let (s, c) = (w * t).sin_cos();
        match self {
            // Forward-and-up arc, lowest at t = 0.
            Exercise::ArmLifting => (
                [0.25 * a * s, 0.0, 0.5 * a * (1.0 - c)],
                [0.25 * a * w * c, 0.0, 0.5 * a * w * s],
            ),
            // Side-to-side sway with a shallow rise at the extremes.
            Exercise::LateralTilt => (
                [0.0, 0.5 * a * s, 0.25 * a * (1.0 - c)],
                [0.0, 0.5 * a * w * c, 0.25 * a * w * s],
            ),
            // Horizontal swing around the torso axis.
            Exercise::TrunkRotation => (
                [0.25 * a * (1.0 - c), 0.5 * a * s, 0.1 * a * (1.0 - c)],
                [0.25 * a * w * s, 0.5 * a * w * c, 0.1 * a * w * s],
            ),
            // Small circle with a double-frequency bob.
            Exercise::PelvisRotation => {
                let (s2, c2) = (2.0 * w * t).sin_cos();
                (
                    [0.25 * a * c, 0.25 * a * s, 0.05 * a * s2],
                    [-0.25 * a * w * s, 0.25 * a * w * c, 0.1 * a * w * c2],
                )
            }
        }
    }
}

impl fmt::Display for Exercise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Exercise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Exercise::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown exercise '{s}'")))
    }
}

/// Centre of every exercise curve in the robot base frame, metres.
pub const EXERCISE_CENTER: [f64; 3] = [0.45, 0.0, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientPose {
    pub t: f64,
    pub position: [f64; 3],
    /// Unit quaternion `(qx, qy, qz, qw)`.
    pub orientation: [f64; 4],
}

impl PatientPose {
    pub fn features(&self) -> [f64; 7] {
        let [x, y, z] = self.position;
        let [qx, qy, qz, qw] = self.orientation;
        [x, y, z, qx, qy, qz, qw]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    /// Fraction of the full exercise amplitude the patient achieves, in (0, 1].
    pub amplitude_scale: f64,
    /// Positional tremor standard deviation, metres.
    pub tremor_std: f64,
    /// Repetition period, seconds.
    pub period: f64,
    /// Full-amplitude reach, metres.
    pub reach: f64,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<()> {
        let p = &self.patient_id;
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale <= 1.0) {
            return Err(Error::Invalid(format!("{p}: amplitude_scale must be in (0, 1]")));
        }
        if !(self.tremor_std >= 0.0 && self.tremor_std.is_finite()) {
            return Err(Error::Invalid(format!("{p}: tremor_std must be >= 0")));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Invalid(format!("{p}: period must be > 0")));
        }
        if !(self.reach > 0.0 && self.reach.is_finite()) {
            return Err(Error::Invalid(format!("{p}: reach must be > 0")));
        }
        Ok(())
    }
}

/// Shortest rotation taking the x axis onto `dir`, as `(qx, qy, qz, qw)`.
pub fn heading_quaternion(dir: [f64; 3]) -> [f64; 4] {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !(n > 1e-12) {
        return [0.0, 0.0, 0.0, 1.0];
    }
    let u = [dir[0] / n, dir[1] / n, dir[2] / n];
    let q = if u[0] < -1.0 + 1e-12 {
        [0.0, 0.0, 1.0, 0.0]
    } else {
        [0.0, -u[2], u[1], 1.0 + u[0]]
    };
    normalize_quaternion(q)
}

pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn sample_times(duration_s: f64, rate_hz: f64) -> Result<Vec<f64>> {
    if !(duration_s > 0.0 && duration_s.is_finite()) || !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::Invalid("duration and rate must be positive".into()));
    }
    let n = (duration_s * rate_hz).round() as usize;
    Ok((0..n).map(|k| k as f64 / rate_hz).collect())
}

/// Patient forearm motion: the exercise curve at the patient's reduced
/// amplitude plus Gaussian positional tremor. Orientation follows the clean
/// motion tangent.
pub fn generate_human_trajectory(
    exercise: Exercise,
    profile: &PatientProfile,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<Vec<PatientPose>> {
    profile.validate()?;
    let times = sample_times(duration_s, rate_hz)?;
    let a = profile.reach * profile.amplitude_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tremor = Normal::new(0.0, profile.tremor_std)
        .map_err(|e| Error::Invalid(format!("tremor distribution: {e}")))?;
    Ok(times
        .into_iter()
        .map(|t| {
            let (offset, tangent) = exercise.curve(a, profile.period, t);
            let mut position = [0.0; 3];
            for k in 0..3 {
                position[k] = EXERCISE_CENTER[k] + offset[k];
                if profile.tremor_std > 0.0 {
                    position[k] += tremor.sample(&mut rng);
                }
            }
            PatientPose {
                t,
                position,
                orientation: heading_quaternion(tangent),
            }
        })
        .collect())
}

/// Corrective guidance: the same exercise performed at full amplitude and
/// without tremor, in phase with the patient.
pub fn guidance_targets(exercise: Exercise, profile: &PatientProfile, times: &[f64]) -> Vec<[f64; 3]> {
    times
        .iter()
        .map(|&t| {
            let (offset, _) = exercise.curve(profile.reach, profile.period, t);
            [
                EXERCISE_CENTER[0] + offset[0],
                EXERCISE_CENTER[1] + offset[1],
                EXERCISE_CENTER[2] + offset[2],
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(scale: f64, tremor: f64) -> PatientProfile {
        PatientProfile {
            patient_id: "p00".into(),
            amplitude_scale: scale,
            tremor_std: tremor,
            period: 4.0,
            reach: 0.3,
        }
    }

    #[test]
    fn full_amplitude_without_tremor_spans_the_defined_z_range() {
        for ex in Exercise::ALL {
            let poses = generate_human_trajectory(ex, &profile(1.0, 0.0), 8.0, 50.0, 1).unwrap();
            let (lo, hi) = poses.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                (lo.min(p.position[2]), hi.max(p.position[2]))
            });
            assert!(((hi - lo) - ex.z_range(0.3)).abs() < 1e-12, "{ex}: {}", hi - lo);
        }
    }

    #[test]
    fn quaternions_are_unit_and_times_increase() {
        for ex in Exercise::ALL {
            let poses = generate_human_trajectory(ex, &profile(0.6, 0.005), 10.0, 50.0, 3).unwrap();
            assert_eq!(poses.len(), 500);
            for w in poses.windows(2) {
                assert!(w[1].t > w[0].t);
            }
            for p in &poses {
                let n: f64 = p.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = profile(0.7, 0.01);
        let a = generate_human_trajectory(Exercise::TrunkRotation, &p, 5.0, 50.0, 9).unwrap();
        let b = generate_human_trajectory(Exercise::TrunkRotation, &p, 5.0, 50.0, 9).unwrap();
        let c = generate_human_trajectory(Exercise::TrunkRotation, &p, 5.0, 50.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let p = profile(1.5, 0.0);
        assert!(generate_human_trajectory(Exercise::ArmLifting, &p, 1.0, 50.0, 0).is_err());
        let p = PatientProfile { period: 0.0, ..profile(1.0, 0.0) };
        assert!(generate_human_trajectory(Exercise::ArmLifting, &p, 1.0, 50.0, 0).is_err());
    }

    #[test]
    fn heading_quaternion_rotates_x_onto_direction() {
        let dir = [0.2, -0.5, 0.7];
        let [x, y, z, w] = heading_quaternion(dir);
        // Rotate (1, 0, 0) by q.
        let r = [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ];
        let n = (dir.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for k in 0..3 {
            assert!((r[k] - dir[k] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn exercise_names_round_trip() {
        for ex in Exercise::ALL {
            assert_eq!(ex.name().parse::<Exercise>().unwrap(), ex);
        }
        assert!("jumping_jacks".parse::<Exercise>().is_err());
    }
}
