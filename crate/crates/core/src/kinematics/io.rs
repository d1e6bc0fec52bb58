//! `FJLDS1` dataset files and CSV pose import.
//!
//! File layout: the 6-byte magic, a little-endian `u32` format version, a
//! `u32` byte length followed by a UTF-8 JSON header, then one block of
//! little-endian `f64` values per trajectory (`steps x columns`, row-major).
//! Windows are not stored; they are rebuilt from the header's `window_p` and
//! `stride` on load. Joint positions are recomputed from the joint angles.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arm::N_JOINTS;
use super::dataset::{build_dataset, Dataset, DatasetMeta, TrajectoryRecord};
use super::ik::RobotState;
use super::trajectory::{normalize_quaternion, Exercise, PatientPose};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 6] = b"FJLDS1";
pub const DATASET_VERSION: u32 = 1;

const BASE_COLUMNS: [&str; 15] = [
    "t", "x", "y", "z", "qx", "qy", "qz", "qw", "guide_x", "guide_y", "guide_z", "ee_x", "ee_y", "ee_z",
    "reached",
];

const TORQUE_NOTE: &str = "j_f is a proxy, not a simulated force: J^T * stiffness * (target - tip) \
                           evaluated at the start of each timestep";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    trajectory_count: usize,
    sample_count: usize,
    exercise_labels: Vec<String>,
    meta: DatasetMeta,
    robot_state: bool,
    columns: Vec<String>,
    j_f_note: String,
    trajectories: Vec<TrajectoryHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryHeader {
    patient_id: String,
    exercise: Exercise,
    steps: usize,
}

fn columns(robot_state: bool) -> Vec<String> {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if robot_state {
        for group in ["j_i", "j_v", "j_f"] {
            cols.extend((0..N_JOINTS).map(|j| format!("{group}{j}")));
        }
    }
    cols
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let robot_state = ds.trajectories.iter().all(|t| t.states.is_some()) && !ds.trajectories.is_empty();
    let header = Header {
        trajectory_count: ds.trajectories.len(),
        sample_count: ds.len(),
        exercise_labels: Exercise::ALL.iter().map(|e| e.name().to_string()).collect(),
        meta: ds.meta.clone(),
        robot_state,
        columns: columns(robot_state),
        j_f_note: TORQUE_NOTE.to_string(),
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| TrajectoryHeader {
                patient_id: t.patient_id.clone(),
                exercise: t.exercise,
                steps: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for tr in &ds.trajectories {
        for k in 0..tr.len() {
            let p = &tr.poses[k];
            let mut row = Vec::with_capacity(header.columns.len());
            row.push(p.t);
            row.extend_from_slice(&p.features());
            row.extend_from_slice(&tr.guidance[k]);
            row.extend_from_slice(&tr.end_effector[k]);
            row.push(if tr.reached[k] { 1.0 } else { 0.0 });
            if robot_state {
                let st = &tr.states.as_ref().expect("checked above")[k];
                row.extend_from_slice(&st.j_i);
                row.extend_from_slice(&st.j_v);
                row.extend_from_slice(&st.j_f);
            }
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("unexpected end of payload".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(DATASET_MAGIC.len()).map_err(|_| Error::Format("bad dataset magic".into()))? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version(format!(
            "dataset format version {version}, supported {DATASET_VERSION}"
        )));
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    if header.trajectories.len() != header.trajectory_count {
        return Err(Error::Format("trajectory table does not match trajectory_count".into()));
    }
    if header.columns != columns(header.robot_state) {
        return Err(Error::Format("unexpected column layout".into()));
    }
    let arm = &header.meta.arm;
    arm.validate()?;

    let mut trajectories = Vec::with_capacity(header.trajectory_count);
    for th in &header.trajectories {
        let mut rec = TrajectoryRecord {
            patient_id: th.patient_id.clone(),
            exercise: th.exercise,
            poses: Vec::with_capacity(th.steps),
            guidance: Vec::with_capacity(th.steps),
            end_effector: Vec::with_capacity(th.steps),
            reached: Vec::with_capacity(th.steps),
            states: header.robot_state.then(|| Vec::with_capacity(th.steps)),
        };
        for _ in 0..th.steps {
            let v3 = |cur: &mut Cursor| -> Result<[f64; 3]> { Ok([cur.f64()?, cur.f64()?, cur.f64()?]) };
            let t = cur.f64()?;
            let position = v3(&mut cur)?;
            let orientation = [cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?];
            rec.poses.push(PatientPose {
                t,
                position,
                orientation,
            });
            rec.guidance.push(v3(&mut cur)?);
            rec.end_effector.push(v3(&mut cur)?);
            rec.reached.push(cur.f64()? != 0.0);
            if let Some(states) = rec.states.as_mut() {
                let group = |cur: &mut Cursor| -> Result<Vec<f64>> { (0..N_JOINTS).map(|_| cur.f64()).collect() };
                let j_i = group(&mut cur)?;
                let j_v = group(&mut cur)?;
                let j_f = group(&mut cur)?;
                let j_p = arm.forward_kinematics(&j_i)?.joint_positions;
                states.push(RobotState { j_f, j_p, j_i, j_v });
            }
        }
        trajectories.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - cur.pos)));
    }
    let ds = build_dataset(header.meta, trajectories)?;
    if ds.len() != header.sample_count {
        return Err(Error::Format(format!(
            "header records {} samples, rebuilt {}",
            header.sample_count,
            ds.len()
        )));
    }
    Ok(ds)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

/// Read one trajectory from a CSV file with header `t,x,y,z,qx,qy,qz,qw`.
///
/// Quaternions are renormalized; a norm more than 1e-3 from one logs a
/// warning and more than 0.1 is an error. Timestamps must strictly increase.
pub fn import_csv(path: &Path) -> Result<Vec<PatientPose>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut poses: Vec<PatientPose> = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let vals = [r.t, r.x, r.y, r.z, r.qx, r.qy, r.qz, r.qw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("line {line}: non-finite value")));
        }
        if let Some(prev) = poses.last() {
            if !(r.t > prev.t) {
                return Err(Error::Format(format!("line {line}: timestamps must strictly increase")));
            }
        }
        let q = [r.qx, r.qy, r.qz, r.qw];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let deviation = (norm - 1.0).abs();
        if deviation > 0.1 {
            return Err(Error::Format(format!(
                "line {line}: quaternion norm {norm} is too far from 1"
            )));
        }
        if deviation > 1e-3 {
            log::warn!("{} line {line}: renormalizing quaternion with norm {norm}", path.display());
        }
        poses.push(PatientPose {
            t: r.t,
            position: [r.x, r.y, r.z],
            orientation: normalize_quaternion(q),
        });
    }
    if poses.is_empty() {
        return Err(Error::Format(format!("{}: no rows", path.display())));
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{generate_dataset, DatagenConfig};

    fn small() -> Dataset {
        let cfg = DatagenConfig {
            n_patients: 2,
            exercises: vec![Exercise::ArmLifting, Exercise::PelvisRotation],
            duration_s: 2.0,
            window_p: 4,
            ..DatagenConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fjlds");
        let ds = small();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn round_trip_without_robot_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fjlds");
        let mut ds = small();
        for t in &mut ds.trajectories {
            t.states = None;
        }
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fjlds");
        save_dataset(&small(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("unexpected end of payload"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = bytes;
        bad[6] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Version(_))));
    }

    #[test]
    fn csv_import_renormalizes_small_deviations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        std::fs::write(
            &path,
            "t,x,y,z,qx,qy,qz,qw\n0.0,0.4,0.0,0.1,0,0,0,1.0005\n0.02,0.41,0.0,0.1,0,0,0,1\n",
        )
        .unwrap();
        let poses = import_csv(&path).unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].orientation, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_import_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        std::fs::write(&path, "t,x,y,z,qx,qy,qz,qw\n0.0,0.4,0.0,0.1,0,0,0,1.2\n").unwrap();
        assert!(import_csv(&path).is_err());
        std::fs::write(
            &path,
            "t,x,y,z,qx,qy,qz,qw\n0.1,0.4,0.0,0.1,0,0,0,1\n0.1,0.4,0.0,0.1,0,0,0,1\n",
        )
        .unwrap();
        assert!(import_csv(&path).is_err());
    }
}
