use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Partition;
use crate::kinematics::Dataset;
use crate::{Error, Result};

/// Split `indices` of `data` into `n_clients` disjoint sample lists whose
/// union is `indices`.
///
/// `iid` shuffles samples and cuts near-equal contiguous blocks; `by_patient`
/// and `by_exercise` shuffle the units (patients or exercise labels) and deal
/// them round-robin, so every unit lives on exactly one client.
pub fn partition_dataset(
    data: &Dataset,
    indices: &[usize],
    n_clients: usize,
    strategy: Partition,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Invalid("cannot partition an empty dataset".into()));
    }
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        Partition::Iid => {
            if n_clients > indices.len() {
                return Err(Error::Invalid(format!(
                    "{} samples cannot fill {n_clients} clients",
                    indices.len()
                )));
            }
            let mut order = indices.to_vec();
            order.shuffle(&mut rng);
            let base = order.len() / n_clients;
            let extra = order.len() % n_clients;
            let mut out = Vec::with_capacity(n_clients);
            let mut start = 0;
            for c in 0..n_clients {
                let len = base + usize::from(c < extra);
                out.push(order[start..start + len].to_vec());
                start += len;
            }
            Ok(out)
        }
        Partition::ByPatient => by_unit(indices, n_clients, &mut rng, "patients", |i| {
            data.patient_of(i).to_string()
        }),
        Partition::ByExercise => by_unit(indices, n_clients, &mut rng, "exercises", |i| {
            data.exercise_of(i).name().to_string()
        }),
    }
}

fn by_unit(
    indices: &[usize],
    n_clients: usize,
    rng: &mut ChaCha8Rng,
    what: &str,
    unit_of: impl Fn(usize) -> String,
) -> Result<Vec<Vec<usize>>> {
    let mut units: Vec<String> = indices.iter().map(|&i| unit_of(i)).collect();
    units.sort();
    units.dedup();
    if units.len() < n_clients {
        return Err(Error::Invalid(format!(
            "only {} {what} for {n_clients} clients",
            units.len()
        )));
    }
    units.shuffle(rng);
    let owner: std::collections::HashMap<&str, usize> =
        units.iter().enumerate().map(|(k, u)| (u.as_str(), k % n_clients)).collect();
    let mut out = vec![Vec::new(); n_clients];
    for &i in indices {
        out[owner[unit_of(i).as_str()]].push(i);
    }
    Ok(out)
}
