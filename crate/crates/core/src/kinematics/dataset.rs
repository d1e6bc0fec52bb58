use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use super::ik::{ik_track, initial_guess, IkGains, RobotState};
use super::trajectory::{generate_human_trajectory, guidance_targets, Exercise, PatientPose, PatientProfile};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Robot end-effector position (m) and velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotTarget {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

impl RobotTarget {
    pub fn to_array(self) -> [f64; 6] {
        let [x, y, z] = self.position;
        let [vx, vy, vz] = self.velocity;
        [x, y, z, vx, vy, vz]
    }
}

/// One patient performing one exercise, with the robot's tracked guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub patient_id: String,
    pub exercise: Exercise,
    pub poses: Vec<PatientPose>,
    /// IK target per timestep.
    pub guidance: Vec<[f64; 3]>,
    /// Achieved end-effector position per timestep.
    pub end_effector: Vec<[f64; 3]>,
    pub reached: Vec<bool>,
    /// Full joint-level record, absent when generation skipped it.
    pub states: Option<Vec<RobotState>>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Borrowed view of the `P` poses feeding one sample.
#[derive(Debug, Clone, Copy)]
pub struct ObservationWindow<'a> {
    pub poses: &'a [PatientPose],
    pub patient_id: &'a str,
    pub exercise: Exercise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub trajectory: usize,
    /// Index of the window's last timestep within the trajectory.
    pub end: usize,
    pub target: RobotTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rate_hz: f64,
    pub window_p: usize,
    pub stride: usize,
    /// Targets faster than this (m/s) are dropped.
    pub speed_limit: f64,
    pub arm: ArmModel,
    pub profiles: Vec<PatientProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<TrajectoryRecord>,
    samples: Vec<Sample>,
}

/// Window every trajectory into `(ObservationWindow, RobotTarget)` samples.
///
/// Windows end every `stride` steps starting at index `P - 1`; a window is
/// dropped if any of its timesteps is unreached or its target exceeds the
/// speed limit. Target velocity is a central difference of the achieved
/// end-effector position (one-sided at trajectory ends).
pub fn build_dataset(meta: DatasetMeta, trajectories: Vec<TrajectoryRecord>) -> Result<Dataset> {
    let p = meta.window_p;
    if p == 0 || meta.stride == 0 {
        return Err(Error::Config("window_p and stride must be positive".into()));
    }
    if !(meta.rate_hz > 0.0) || !(meta.speed_limit > 0.0) {
        return Err(Error::Config("rate_hz and speed_limit must be positive".into()));
    }
    let mut samples = Vec::new();
    let mut too_fast = 0usize;
    for (ti, tr) in trajectories.iter().enumerate() {
        let n = tr.len();
        if tr.guidance.len() != n || tr.end_effector.len() != n || tr.reached.len() != n {
            return Err(Error::Invalid(format!(
                "trajectory {ti} ({}, {}): pose and robot records are not time-aligned",
                tr.patient_id, tr.exercise
            )));
        }
        if let Some(states) = &tr.states {
            if states.len() != n {
                return Err(Error::Invalid(format!("trajectory {ti}: state count mismatch")));
            }
        }
        if n < p {
            log::warn!(
                "skipping trajectory {} / {}: {} steps is shorter than the window ({})",
                tr.patient_id,
                tr.exercise,
                n,
                p
            );
            continue;
        }
        // Length of the reached run ending at each index.
        let mut run = 0usize;
        let mut runs = Vec::with_capacity(n);
        for &r in &tr.reached {
            run = if r { run + 1 } else { 0 };
            runs.push(run);
        }
        for end in (p - 1..n).step_by(meta.stride) {
            if runs[end] < p {
                continue;
            }
            let target = target_at(tr, end);
            let speed = target.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(speed <= meta.speed_limit) {
                too_fast += 1;
                continue;
            }
            samples.push(Sample {
                trajectory: ti,
                end,
                target,
            });
        }
    }
    if too_fast > 0 {
        log::warn!("dropped {too_fast} windows whose target exceeds the speed limit");
    }
    Ok(Dataset {
        meta,
        trajectories,
        samples,
    })
}

fn target_at(tr: &TrajectoryRecord, end: usize) -> RobotTarget {
    let n = tr.len();
    let (a, b) = if n == 1 {
        (0, 0)
    } else if end == 0 {
        (0, 1)
    } else if end + 1 == n {
        (end - 1, end)
    } else {
        (end - 1, end + 1)
    };
    let dt = tr.poses[b].t - tr.poses[a].t;
    let mut velocity = [0.0; 3];
    if dt > 0.0 {
        for k in 0..3 {
            velocity[k] = (tr.end_effector[b][k] - tr.end_effector[a][k]) / dt;
        }
    }
    RobotTarget {
        position: tr.end_effector[end],
        velocity,
    }
}

impl Dataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn window(&self, i: usize) -> ObservationWindow<'_> {
        let s = &self.samples[i];
        let tr = &self.trajectories[s.trajectory];
        ObservationWindow {
            poses: &tr.poses[s.end + 1 - self.meta.window_p..=s.end],
            patient_id: &tr.patient_id,
            exercise: tr.exercise,
        }
    }

    pub fn patient_of(&self, i: usize) -> &str {
        &self.trajectories[self.samples[i].trajectory].patient_id
    }

    pub fn exercise_of(&self, i: usize) -> Exercise {
        self.trajectories[self.samples[i].trajectory].exercise
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for tr in &self.trajectories {
            if !seen.contains(&tr.patient_id) {
                seen.push(tr.patient_id.clone());
            }
        }
        seen
    }

    pub fn counts_by_exercise(&self) -> BTreeMap<Exercise, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(self.trajectories[s.trajectory].exercise).or_insert(0) += 1;
        }
        counts
    }

    /// Model input `(B, P, 7)` and target `(B, 6)` tensors for the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let p = self.meta.window_p;
        let mut x = Vec::with_capacity(indices.len() * p * 7);
        let mut y = Vec::with_capacity(indices.len() * 6);
        for &i in indices {
            for pose in self.window(i).poses {
                x.extend_from_slice(&pose.features());
            }
            y.extend_from_slice(&self.samples[i].target.to_array());
        }
        Ok((
            Tensor::new(vec![indices.len(), p, 7], x)?,
            Tensor::new(vec![indices.len(), 6], y)?,
        ))
    }

    /// Hold out a seeded `test_fraction` of patients; all windows of a
    /// patient land on the same side. Returns `(train, test)` sample indices.
    pub fn split_by_patient(&self, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        let mut patients = self.patient_ids();
        if patients.len() < 2 {
            return Err(Error::Invalid("need at least two patients to split".into()));
        }
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((patients.len() as f64 * test_fraction).round() as usize).clamp(1, patients.len() - 1);
        let test: Vec<&String> = patients[..n_test].iter().collect();
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if test.iter().any(|p| p.as_str() == self.patient_of(i)) {
                held.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, held))
    }
}

/// Run IK along `guidance` and package the result with the patient poses.
pub fn track_trajectory(
    patient_id: &str,
    exercise: Exercise,
    poses: Vec<PatientPose>,
    guidance: Vec<[f64; 3]>,
    arm: &ArmModel,
    gains: &IkGains,
    record_state: bool,
) -> Result<TrajectoryRecord> {
    if poses.len() != guidance.len() {
        return Err(Error::Invalid("poses and guidance differ in length".into()));
    }
    let dt = if poses.len() > 1 {
        poses[1].t - poses[0].t
    } else {
        1.0
    };
    let q0 = match guidance.first() {
        Some(&g) => initial_guess(arm, g),
        None => return Err(Error::Invalid("empty trajectory".into())),
    };
    let steps = ik_track(arm, &guidance, &q0, gains, dt)?;
    let mut end_effector = Vec::with_capacity(steps.len());
    let mut reached = Vec::with_capacity(steps.len());
    let mut states = Vec::with_capacity(if record_state { steps.len() } else { 0 });
    for step in steps {
        end_effector.push(arm.forward_kinematics(&step.state.j_i)?.end_effector);
        reached.push(step.reached);
        if record_state {
            states.push(step.state);
        }
    }
    Ok(TrajectoryRecord {
        patient_id: patient_id.to_string(),
        exercise,
        poses,
        guidance,
        end_effector,
        reached,
        states: record_state.then_some(states),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub n_patients: usize,
    pub exercises: Vec<Exercise>,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub window_p: usize,
    pub stride: usize,
    pub speed_limit: f64,
    pub record_robot_state: bool,
    pub amplitude_scale_range: (f64, f64),
    pub tremor_std_range: (f64, f64),
    pub period_range: (f64, f64),
    pub reach_range: (f64, f64),
    pub ik: IkGains,
    pub arm: ArmModel,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_patients: 20,
            exercises: Exercise::ALL.to_vec(),
            duration_s: 60.0,
            rate_hz: 50.0,
            window_p: 16,
            stride: 2,
            speed_limit: 2.0,
            record_robot_state: true,
            amplitude_scale_range: (0.4, 1.0),
            tremor_std_range: (0.0, 0.01),
            period_range: (3.0, 6.0),
            reach_range: (0.28, 0.32),
            ik: IkGains::default(),
            arm: ArmModel::default(),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        if self.exercises.is_empty() {
            return Err(Error::Config("exercises must not be empty".into()));
        }
        if !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) {
            return Err(Error::Config("duration_s and rate_hz must be positive".into()));
        }
        if self.window_p == 0 || self.stride == 0 {
            return Err(Error::Config("window_p and stride must be positive".into()));
        }
        let ranges = [
            ("amplitude_scale_range", self.amplitude_scale_range, 0.0, 1.0),
            ("tremor_std_range", self.tremor_std_range, -f64::MIN_POSITIVE, f64::INFINITY),
            ("period_range", self.period_range, 0.0, f64::INFINITY),
            ("reach_range", self.reach_range, 0.0, f64::INFINITY),
        ];
        for (name, (lo, hi), min, max) in ranges {
            if !(lo <= hi && lo > min && hi <= max) {
                return Err(Error::Config(format!("{name}: invalid range ({lo}, {hi})")));
            }
        }
        self.ik.validate()?;
        self.arm.validate()
    }

    pub fn sample_profiles(&self, seed: u64) -> Vec<PatientProfile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |(lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..=hi) } else { lo };
        (0..self.n_patients)
            .map(|i| PatientProfile {
                patient_id: format!("p{i:03}"),
                amplitude_scale: draw(self.amplitude_scale_range),
                tremor_std: draw(self.tremor_std_range),
                period: draw(self.period_range),
                reach: draw(self.reach_range),
            })
            .collect()
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = crate::digest::Fnv64::new();
    h.update(&seed.to_le_bytes());
    h.update(&a.to_le_bytes());
    h.update(&b.to_le_bytes());
    h.finish()
}

/// Synthesize every (patient, exercise) trajectory, track it with IK and
/// window the result. Patients are processed on worker threads; output order
/// and content do not depend on the thread count.
pub fn generate_dataset(cfg: &DatagenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let profiles = cfg.sample_profiles(seed);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(profiles.len());
    let per_patient = |pi: usize| -> Result<Vec<TrajectoryRecord>> {
        let profile = &profiles[pi];
        cfg.exercises
            .iter()
            .map(|&ex| {
                let poses = generate_human_trajectory(
                    ex,
                    profile,
                    cfg.duration_s,
                    cfg.rate_hz,
                    mix_seed(seed, pi as u64, ex as u64),
                )?;
                let times: Vec<f64> = poses.iter().map(|p| p.t).collect();
                let guidance = guidance_targets(ex, profile, &times);
                track_trajectory(
                    &profile.patient_id,
                    ex,
                    poses,
                    guidance,
                    &cfg.arm,
                    &cfg.ik,
                    cfg.record_robot_state,
                )
            })
            .collect()
    };

    let mut results: Vec<Option<Result<Vec<TrajectoryRecord>>>> = (0..profiles.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = profiles.len().div_ceil(workers);
        for (w, slots) in results.chunks_mut(chunk).enumerate() {
            let per_patient = &per_patient;
            s.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(per_patient(w * chunk + k));
                }
            });
        }
    });
    let mut trajectories = Vec::with_capacity(profiles.len() * cfg.exercises.len());
    for r in results {
        trajectories.extend(r.expect("every patient slot is filled")?);
    }
    let unreached: usize = trajectories.iter().map(|t| t.reached.iter().filter(|r| !**r).count()).sum();
    if unreached > 0 {
        log::warn!("{unreached} guidance timesteps were not reached by IK and are excluded");
    }
    build_dataset(
        DatasetMeta {
            rate_hz: cfg.rate_hz,
            window_p: cfg.window_p,
            stride: cfg.stride,
            speed_limit: cfg.speed_limit,
            arm: cfg.arm.clone(),
            profiles,
        },
        trajectories,
    )
}
