use fjl_core::kinematics::{ik_track, initial_guess, ArmModel, IkGains};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat4 = [[f64; 4]; 4];

fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rodrigues rotation about a unit axis as a homogeneous transform.
fn rotation(axis: [f64; 3], angle: f64) -> Mat4 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y, 0.0],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x, 0.0],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn translation_x(d: f64) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m[0][3] = d;
    m
}

fn homogeneous_fk(arm: &ArmModel, q: &[f64]) -> [f64; 3] {
    let mut t = translation_x(0.0);
    for i in 0..arm.n_joints() {
        t = mat_mul(&t, &rotation(arm.joint_axes[i], q[i]));
        t = mat_mul(&t, &translation_x(arm.link_lengths[i]));
    }
    [t[0][3], t[1][3], t[2][3]]
}

fn random_angles(rng: &mut ChaCha8Rng, arm: &ArmModel) -> Vec<f64> {
    arm.joint_limits.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn forward_kinematics_matches_homogeneous_transform_oracle() {
    let arm = ArmModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let q = random_angles(&mut rng, &arm);
        let fk = arm.forward_kinematics(&q).unwrap();
        let want = homogeneous_fk(&arm, &q);
        assert!(distance(fk.end_effector, want) < 1e-12);
    }
}

#[test]
fn ik_reaches_random_reachable_targets_within_limits() {
    let arm = ArmModel::default();
    let gains = IkGains::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let target = homogeneous_fk(&arm, &random_angles(&mut rng, &arm));
        let q0 = initial_guess(&arm, target);
        let step = &ik_track(&arm, &[target], &q0, &gains, 0.02).unwrap()[0];
        assert!(step.reached, "target {target:?} error {}", step.error);
        arm.check_limits(&step.state.j_i).unwrap();
        let tip = homogeneous_fk(&arm, &step.state.j_i);
        assert!(distance(tip, target) < 1e-3);
    }
}

#[test]
fn unreachable_targets_are_flagged() {
    let arm = ArmModel::default();
    let gains = IkGains::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let dir: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let norm = distance(dir, [0.0; 3]);
        let r = arm.total_length() * rng.random_range(1.05..1.5);
        let target = dir.map(|d| d / norm * r);
        let step = &ik_track(&arm, &[target], &initial_guess(&arm, target), &gains, 0.02).unwrap()[0];
        assert!(!step.reached);
        assert!(step.error > 0.04);
        arm.check_limits(&step.state.j_i).unwrap();
    }
}

#[test]
fn tracking_a_smooth_path_stays_on_target() {
    let arm = ArmModel::default();
    let gains = IkGains::default();
    let targets: Vec<[f64; 3]> = (0..200)
        .map(|k| {
            let t = k as f64 * 0.02;
            [0.45 + 0.05 * t.sin(), 0.1 * t.cos(), 0.1 + 0.05 * (2.0 * t).sin()]
        })
        .collect();
    let steps = ik_track(&arm, &targets, &initial_guess(&arm, targets[0]), &gains, 0.02).unwrap();
    for (step, target) in steps.iter().zip(&targets) {
        assert!(step.reached);
        assert!(distance(homogeneous_fk(&arm, &step.state.j_i), *target) < 1e-3);
        assert_eq!(step.state.j_p.len(), arm.n_joints());
    }
}
