mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use fjl_core::federation::protocol::{audit_frame, decode_message};
use fjl_core::federation::{
    aggregate_updates, partition_dataset, run_federated_training, Direction, FedMode, FederatedRun, FederationConfig,
    Message, Partition, RunHooks, Transport,
};
use fjl_core::model::ModelParams;
use fjl_core::objectives::PckConfig;
use fjl_core::training::{loss_and_gradient, ObjectiveConfig, OptimizerConfig};
use fjl_core::federation::TrainingSetup;

use common::{small_dataset, small_model};

const SEED: u64 = 21;

fn setup(n_train: usize) -> TrainingSetup<'static> {
    let data = small_dataset();
    let stride = data.len() / n_train;
    TrainingSetup {
        data,
        train: (0..data.len()).step_by(stride).take(n_train).collect(),
        test: (1..data.len()).step_by(data.len() / 40).take(40).collect(),
        model: small_model(),
        objective: ObjectiveConfig::mse(),
        pck: PckConfig::default(),
    }
}

/// One full-batch SGD step per client per round.
fn full_batch(n_clients: usize, per_client: usize, rounds: usize) -> FederationConfig {
    FederationConfig {
        n_clients,
        rounds,
        local_epochs: 1,
        batch_size: per_client,
        local_max_batches: 0,
        optimizer: OptimizerConfig::sgd(0.1),
        partition: Partition::Iid,
        ..FederationConfig::default()
    }
}

type Frames = Arc<Mutex<Vec<(Direction, Vec<u8>)>>>;

fn run_recording(cfg: &FederationConfig, setup: &TrainingSetup<'_>) -> (FederatedRun, Vec<(Direction, Vec<u8>)>) {
    let frames: Frames = Arc::default();
    let sink = frames.clone();
    let hooks = RunHooks {
        frames: Some(Arc::new(move |d, f: &[u8]| sink.lock().unwrap().push((d, f.to_vec())))),
        on_round: None,
    };
    let run = run_federated_training(cfg, setup, SEED, hooks).unwrap();
    let frames = std::mem::take(&mut *frames.lock().unwrap());
    (run, frames)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn aggregated_update_equals_centralized_full_batch_gradient() {
    let setup = setup(64);
    let cfg = full_batch(4, 16, 1);
    let (_, frames) = run_recording(&cfg, &setup);
    let updates: Vec<_> = frames
        .iter()
        .filter_map(|(_, f)| match decode_message(f).unwrap() {
            Message::GradUpload(u) => Some(u),
            _ => None,
        })
        .collect();
    assert_eq!(updates.len(), 4);
    assert!(updates.iter().all(|u| u.n_samples == 16));
    let agg = aggregate_updates(&updates, false).unwrap();

    let theta0 = ModelParams::init(&setup.model, SEED).unwrap();
    let (x, y) = setup.data.batch(&setup.train).unwrap();
    let (_, grad) = loss_and_gradient(&theta0, &x, &y, &setup.objective, None).unwrap();
    assert_eq!(agg.len(), grad.len());
    let worst = agg.iter().zip(&grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "max componentwise difference {worst:e}");
}

#[test]
fn single_client_reduces_to_centralized_sgd() {
    let setup = setup(32);
    let cfg = full_batch(1, 32, 1);
    let (run, _) = run_recording(&cfg, &setup);
    let theta0 = ModelParams::init(&setup.model, SEED).unwrap();
    let (x, y) = setup.data.batch(&setup.train).unwrap();
    let (_, grad) = loss_and_gradient(&theta0, &x, &y, &setup.objective, None).unwrap();
    let expected: Vec<f64> = theta0.flatten().iter().zip(&grad).map(|(t, g)| t - 0.1 * g).collect();
    for (a, b) in run.params.flatten().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn personalized_with_zero_lambda_matches_fedavg() {
    let setup = setup(64);
    let mut cfg = full_batch(2, 8, 3);
    cfg.local_max_batches = 2;
    cfg.lambda = 0.0;
    let (plain, _) = run_recording(&cfg, &setup);
    cfg.mode = FedMode::Personalized;
    let (personal, frames) = run_recording(&cfg, &setup);
    assert_eq!(bits(&plain.params.flatten()), bits(&personal.params.flatten()));
    let peers_sent = frames.iter().any(|(_, f)| {
        matches!(decode_message(f).unwrap(), Message::ModelBroadcast { peers, .. } if !peers.is_empty())
    });
    assert!(peers_sent);
}

#[test]
fn personalized_regularizer_changes_the_outcome() {
    let setup = setup(64);
    let mut cfg = full_batch(2, 8, 3);
    cfg.lambda = 0.5;
    let (plain, _) = run_recording(&cfg, &setup);
    cfg.mode = FedMode::Personalized;
    let (personal, _) = run_recording(&cfg, &setup);
    assert_ne!(bits(&plain.params.flatten()), bits(&personal.params.flatten()));
}

#[test]
fn tcp_and_in_process_produce_identical_reports() {
    let setup = setup(96);
    let mut cfg = full_batch(3, 8, 3);
    cfg.local_max_batches = 2;
    cfg.optimizer = OptimizerConfig::default();
    let (local, _) = run_recording(&cfg, &setup);
    cfg.transport = Transport::Tcp;
    cfg.port = 0;
    let (tcp, _) = run_recording(&cfg, &setup);
    assert_eq!(local.reports.len(), 3);
    for (a, b) in local.reports.iter().zip(&tcp.reports) {
        assert!(a.same_outcome(b), "{a:?} vs {b:?}");
    }
    assert_eq!(bits(&local.params.flatten()), bits(&tcp.params.flatten()));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let setup = setup(64);
    let mut cfg = full_batch(2, 8, 2);
    cfg.optimizer = OptimizerConfig::default();
    cfg.partition = Partition::ByPatient;
    let (a, _) = run_recording(&cfg, &setup);
    let (b, _) = run_recording(&cfg, &setup);
    assert_eq!(bits(&a.params.flatten()), bits(&b.params.flatten()));
    assert!(a.reports.iter().zip(&b.reports).all(|(x, y)| x.same_outcome(y)));
}

#[test]
fn frames_carry_only_parameter_shaped_payloads() {
    let setup = setup(64);
    let mut cfg = full_batch(2, 8, 2);
    cfg.mode = FedMode::Personalized;
    let (_, frames) = run_recording(&cfg, &setup);
    let params = ModelParams::init(&setup.model, SEED).unwrap();
    let (n, hash) = (params.num_params(), params.layout_hash());

    let mut kinds = Vec::new();
    for (_, f) in &frames {
        audit_frame(f, n, hash).unwrap();
        kinds.push(decode_message(f).unwrap().kind());
    }
    assert!(kinds.iter().take(2).all(|k| *k == fjl_core::federation::MessageKind::Register));
    assert_eq!(
        frames.iter().filter(|(d, _)| *d == Direction::ToClient).map(|(_, f)| f[4]).last(),
        Some(5)
    );

    // No raw observation value or target appears anywhere on the wire.
    let mut raw = BTreeSet::new();
    for &i in &setup.train {
        let w = setup.data.window(i);
        let values = w.poses.iter().flat_map(|p| p.features()).chain(setup.data.samples()[i].target.to_array());
        for v in values {
            if v.abs() > 1e-9 && v.fract() != 0.0 {
                raw.insert(v.to_bits().to_le_bytes());
            }
        }
    }
    for (_, f) in &frames {
        for pattern in &raw {
            assert!(!f.windows(8).any(|w| w == pattern), "raw sample value found in a frame");
        }
    }
}

#[test]
fn partitions_are_disjoint_and_cover_the_indices() {
    let data = small_dataset();
    let indices: Vec<usize> = (0..data.len()).step_by(3).collect();
    for strategy in [Partition::Iid, Partition::ByPatient, Partition::ByExercise] {
        for n in [1, 2, 4] {
            let parts = partition_dataset(data, &indices, n, strategy, 5).unwrap();
            assert_eq!(parts.len(), n);
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, indices);
            if strategy == Partition::ByPatient {
                let owners: Vec<BTreeSet<String>> = parts
                    .iter()
                    .map(|p| p.iter().map(|&i| data.patient_of(i).to_string()).collect())
                    .collect();
                for a in 0..n {
                    for b in a + 1..n {
                        assert!(owners[a].is_disjoint(&owners[b]));
                    }
                }
            }
            assert_eq!(parts, partition_dataset(data, &indices, n, strategy, 5).unwrap());
        }
    }
    assert!(partition_dataset(data, &indices, 5, Partition::ByPatient, 5).is_err());
    assert!(partition_dataset(data, &indices, 5, Partition::ByExercise, 5).is_err());
}
