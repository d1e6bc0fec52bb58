//! Browser bindings for the static demo page in `www/`.
//!
//! Every export is a thin wrapper over a plain Rust function of the same
//! name with an `_impl` suffix, so the logic is testable natively.

use fjl_core::kinematics::{
    generate_human_trajectory, guidance_targets, initial_guess, solve_ik, track_trajectory, ArmModel, Exercise,
    IkGains, PatientProfile,
};
use fjl_core::objectives::{average_ranks, soft_ranks, soft_spearman, spearman_exact, RelationalConfig};
use fjl_core::tensor::{Graph, Tensor};
use wasm_bindgen::prelude::*;

/// Sample rate of demo trajectories.
pub const DEMO_RATE_HZ: f64 = 50.0;

fn flatten_points(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

#[wasm_bindgen]
pub fn arm_joint_count() -> usize {
    ArmModel::default().n_joints()
}

#[wasm_bindgen]
pub fn arm_reach() -> f64 {
    ArmModel::default().total_length()
}

/// `[reached, error, iterations, x0, y0, z0, ..., tip_x, tip_y, tip_z]`:
/// joint origins then the end effector.
pub fn solve_arm_impl(x: f64, y: f64, z: f64) -> Vec<f64> {
    let arm = ArmModel::default();
    let target = [x, y, z];
    let sol = solve_ik(&arm, target, &initial_guess(&arm, target), &IkGains::default());
    let fk = arm.forward_kinematics(&sol.angles).expect("solution is clamped to limits");
    let mut out = vec![f64::from(u8::from(sol.reached)), sol.error, sol.iterations as f64];
    out.extend(flatten_points(&fk.joint_positions));
    out.extend(fk.end_effector);
    out
}

#[wasm_bindgen]
pub fn solve_arm(x: f64, y: f64, z: f64) -> Vec<f64> {
    solve_arm_impl(x, y, z)
}

#[wasm_bindgen]
pub fn exercise_names() -> Vec<String> {
    Exercise::ALL.iter().map(|e| e.name().to_string()).collect()
}

/// One row per timestep: `t, patient xyz, guidance xyz, end effector xyz, reached`.
pub fn exercise_trajectory_impl(
    exercise: &str,
    amplitude_scale: f64,
    tremor_std: f64,
    period: f64,
    duration_s: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let exercise: Exercise = exercise.parse().map_err(|e: fjl_core::Error| e.to_string())?;
    let profile = PatientProfile {
        patient_id: "demo".into(),
        amplitude_scale,
        tremor_std,
        period,
        reach: 0.3,
    };
    let poses = generate_human_trajectory(exercise, &profile, duration_s, DEMO_RATE_HZ, u64::from(seed))
        .map_err(|e| e.to_string())?;
    let times: Vec<f64> = poses.iter().map(|p| p.t).collect();
    let guidance = guidance_targets(exercise, &profile, &times);
    let arm = ArmModel::default();
    let record = track_trajectory("demo", exercise, poses, guidance, &arm, &IkGains::default(), false)
        .map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(record.len() * 11);
    for i in 0..record.len() {
        out.push(record.poses[i].t);
        out.extend(record.poses[i].position);
        out.extend(record.guidance[i]);
        out.extend(record.end_effector[i]);
        out.push(f64::from(u8::from(record.reached[i])));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn exercise_trajectory(
    exercise: &str,
    amplitude_scale: f64,
    tremor_std: f64,
    period: f64,
    duration_s: f64,
    seed: u32,
) -> Result<Vec<f64>, JsValue> {
    exercise_trajectory_impl(exercise, amplitude_scale, tremor_std, period, duration_s, seed)
        .map_err(|e| JsValue::from_str(&e))
}

/// `[exact, soft, soft ranks of a (n), exact ranks of a (n)]`. `exact` is NaN
/// when either input is constant.
pub fn spearman_compare_impl(a: &[f64], b: &[f64], temperature: f64) -> Result<Vec<f64>, String> {
    if a.len() != b.len() || a.len() < 4 {
        return Err("need two sequences of equal length, at least 4".into());
    }
    let cfg = RelationalConfig {
        soft_temperature: temperature,
        ..RelationalConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let exact = spearman_exact(a, b).unwrap_or(f64::NAN);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(a.to_vec()));
    let soft = soft_spearman(&mut g, x, b, &cfg).map_or(f64::NAN, |v| g.value(v).data()[0]);
    let ranks = soft_ranks(&mut g, x, temperature).map_err(|e| e.to_string())?;
    let mut out = vec![exact, soft];
    out.extend_from_slice(g.value(ranks).data());
    out.extend(average_ranks(a));
    Ok(out)
}

#[wasm_bindgen]
pub fn spearman_compare(a: &[f64], b: &[f64], temperature: f64) -> Result<Vec<f64>, JsValue> {
    spearman_compare_impl(a, b, temperature).map_err(|e| JsValue::from_str(&e))
}
