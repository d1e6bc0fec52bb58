//! Subcommand implementations. Each returns a summary for the caller to print
//! and writes its artifacts plus the resolved config into `out_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fjl_core::federation::{run_federated_training, RoundReport, RunHooks, TrainingSetup};
use fjl_core::kinematics::{
    build_dataset, generate_dataset, import_csv, load_dataset, save_dataset, track_trajectory, Dataset, Exercise,
};
use fjl_core::model::{Architecture, ModelParams};
use fjl_core::training::{evaluate, EvalReport, Objective};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RunMeta};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.fjlck";
pub const FINAL_CHECKPOINT: &str = "final.fjlck";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const ABLATION_TIMING_CSV: &str = "ablation_timing.csv";
pub const BETA_SWEEP_CSV: &str = "beta_sweep.csv";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const EVAL_JSON: &str = "eval_report.json";
pub const PER_SAMPLE_CSV: &str = "per_sample.csv";

fn num(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------- datagen

#[derive(Debug, Clone)]
pub struct DatagenSummary {
    pub path: PathBuf,
    pub trajectories: usize,
    pub windows: usize,
    pub per_exercise: Vec<(Exercise, usize)>,
    pub imported: usize,
}

impl DatagenSummary {
    pub fn line(&self) -> String {
        let counts: Vec<String> = self
            .per_exercise
            .iter()
            .map(|(e, n)| format!("{}={n}", e.name()))
            .collect();
        format!(
            "wrote {} windows from {} trajectories ({} imported) to {}: {}",
            self.windows,
            self.trajectories,
            self.imported,
            self.path.display(),
            counts.join(" ")
        )
    }
}

/// Imported pose files are named `<patient>.<exercise>.csv`. The robot
/// guidance for an imported trajectory is the recorded position itself.
fn import_trajectories(dir: &Path, cfg: &ExperimentConfig) -> CliResult<Vec<fjl_core::kinematics::TrajectoryRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("import_dir {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let datagen = cfg.datagen();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((patient, exercise)) = stem.split_once('.') else {
            return Err(CliError::Usage(format!(
                "import_dir: {} is not named <patient>.<exercise>.csv",
                path.display()
            )));
        };
        let exercise: Exercise = exercise
            .parse()
            .map_err(|_| CliError::Usage(format!("import_dir: unknown exercise in {}", path.display())))?;
        let poses = import_csv(&path)?;
        let guidance = poses.iter().map(|p| p.position).collect();
        out.push(track_trajectory(
            patient,
            exercise,
            poses,
            guidance,
            &datagen.arm,
            &datagen.ik,
            datagen.record_robot_state,
        )?);
    }
    Ok(out)
}

pub fn cmd_datagen(cfg: &ExperimentConfig) -> CliResult<DatagenSummary> {
    cfg.write_resolved(&cfg.out_dir)?;
    let mut ds = generate_dataset(&cfg.datagen(), cfg.seed)?;
    let mut imported = 0;
    if let Some(dir) = &cfg.import_dir {
        let extra = import_trajectories(dir, cfg)?;
        imported = extra.len();
        let mut trajectories = std::mem::take(&mut ds.trajectories);
        trajectories.extend(extra);
        ds = build_dataset(ds.meta.clone(), trajectories)?;
    }
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_dataset(&ds, &path)?;
    let counts = ds.counts_by_exercise();
    Ok(DatagenSummary {
        path,
        trajectories: ds.trajectories.len(),
        windows: ds.len(),
        per_exercise: Exercise::ALL.iter().map(|e| (*e, counts.get(e).copied().unwrap_or(0))).collect(),
        imported,
    })
}

// ---------------------------------------------------------------- shared

pub fn open_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist (run `fjl datagen` first or pass --dataset)",
            path.display()
        )));
    }
    let ds = load_dataset(&path)?;
    if ds.meta.window_p != cfg.window_p {
        return Err(CliError::Usage(format!(
            "window_p = {} but the dataset was windowed with {}",
            cfg.window_p, ds.meta.window_p
        )));
    }
    Ok(ds)
}

fn setup<'a>(cfg: &ExperimentConfig, ds: &'a Dataset, seed: u64, test_fraction: f64) -> CliResult<TrainingSetup<'a>> {
    let (train, test) = ds.split_by_patient(test_fraction, seed)?;
    Ok(TrainingSetup {
        data: ds,
        train,
        test,
        model: cfg.model(),
        objective: cfg.objective(),
        pck: cfg.pck(),
    })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rounds: Vec<RoundReport>,
    pub best_round: u32,
    pub best_pck: f64,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seconds: f64,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        let last = self.rounds.last().expect("at least one round");
        format!(
            "{} rounds in {:.1}s; final loss {:.6} pck {:.4} spearman {:.4}; best pck {:.4} at round {} -> {}",
            self.rounds.len(),
            self.seconds,
            last.global_loss,
            last.global_pck,
            last.spearman_loss_metric,
            self.best_pck,
            self.best_round,
            self.best_checkpoint.display()
        )
    }
}

fn run_meta(cfg: &ExperimentConfig, round: u32, pck: f64) -> RunMeta {
    RunMeta {
        round: Some(round),
        pck: Some(pck),
        seed: Some(cfg.seed),
        test_fraction: Some(cfg.test_fraction),
        loss: Some(
            match cfg.loss {
                Objective::Mse => "mse",
                Objective::Relational => "relational",
            }
            .to_string(),
        ),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    cfg.write_resolved(&cfg.out_dir)?;
    let ds = open_dataset(cfg)?;
    let setup = setup(cfg, &ds, cfg.seed, cfg.test_fraction)?;
    let fed = cfg.federation();
    let metrics_path = cfg.out_dir.join(METRICS_CSV);
    let best_path = cfg.out_dir.join(BEST_CHECKPOINT);
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record(["round", "global_loss", "global_pck", "spearman_loss_metric", "wall_time"])?;
    metrics.flush()?;

    let mut best: Option<(u32, f64)> = None;
    let started = Instant::now();
    let io_err = |e: csv::Error| fjl_core::Error::Io(e.into());
    let mut on_round = |r: &RoundReport, params: &ModelParams| -> fjl_core::Result<()> {
        metrics.write_record([
            r.round.to_string(),
            num(r.global_loss),
            num(r.global_pck),
            num(r.spearman_loss_metric),
            num(r.wall_time),
        ])
        .map_err(io_err)?;
        metrics.flush()?;
        if best.is_none_or(|(_, p)| r.global_pck > p) {
            best = Some((r.round, r.global_pck));
            save_checkpoint(&Checkpoint::new(params, run_meta(cfg, r.round, r.global_pck)), &best_path)
                .map_err(|e| fjl_core::Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    };
    let hooks = RunHooks {
        frames: None,
        on_round: Some(Box::new(&mut on_round)),
    };
    let result = run_federated_training(&fed, &setup, cfg.seed, hooks);
    let run = match result {
        Ok(run) => run,
        Err(e) => {
            let kept = if best_path.exists() {
                format!("; last good checkpoint kept at {}", best_path.display())
            } else {
                String::new()
            };
            return Err(CliError::Runtime(format!("training failed: {e}{kept}")));
        }
    };
    let last = run.reports.last().expect("rounds > 0");
    save_checkpoint(
        &Checkpoint::new(&run.params, run_meta(cfg, last.round, last.global_pck)),
        &cfg.out_dir.join(FINAL_CHECKPOINT),
    )?;
    let (best_round, best_pck) = best.expect("rounds > 0");
    Ok(TrainSummary {
        rounds: run.reports,
        best_round,
        best_pck,
        best_checkpoint: best_path,
        metrics: metrics_path,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub architecture: Architecture,
    pub loss: Objective,
    pub beta: f64,
    /// Test-set PCK at `pck_threshold`.
    pub pck: f64,
    pub pck_at: Vec<(f64, f64)>,
    pub mean_position_error: f64,
    pub spearman_loss_metric: f64,
    pub seconds: f64,
    /// `None` on success.
    pub failure: Option<String>,
}

fn loss_name(o: Objective) -> &'static str {
    match o {
        Objective::Mse => "mse",
        Objective::Relational => "relational",
    }
}

fn ablation_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    architecture: Architecture,
    loss: Objective,
    beta: f64,
) -> AblationRow {
    let started = Instant::now();
    let mut cell = cfg.clone();
    cell.architecture = architecture;
    cell.loss = loss;
    cell.relational_beta = beta;
    cell.rounds = cfg.ablation_rounds;
    let outcome = (|| -> CliResult<EvalReport> {
        let setup = setup(&cell, ds, cell.seed, cell.test_fraction)?;
        let run = run_federated_training(&cell.federation(), &setup, cell.seed, RunHooks::default())?;
        Ok(evaluate(
            &run.params,
            ds,
            &setup.test,
            &cell.pck(),
            &cell.eval_thresholds,
            cell.eval_batch_size,
        )?)
    })();
    let seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok(r) => AblationRow {
            architecture,
            loss,
            beta,
            pck: r.pck,
            pck_at: r.pck_at,
            mean_position_error: r.mean_position_error,
            spearman_loss_metric: r.spearman_loss_metric,
            seconds,
            failure: None,
        },
        Err(e) => {
            log::error!("{} / {}: {e}", architecture.name(), loss_name(loss));
            AblationRow {
                architecture,
                loss,
                beta,
                pck: f64::NAN,
                pck_at: Vec::new(),
                mean_position_error: f64::NAN,
                spearman_loss_metric: f64::NAN,
                seconds,
                failure: Some(e.to_string()),
            }
        }
    }
}

fn write_rows(path: &Path, rows: &[AblationRow], thresholds: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "architecture".to_string(),
        "loss".into(),
        "beta".into(),
        "pck".into(),
    ];
    header.extend(thresholds.iter().map(|t| format!("pck@{t}")));
    header.extend(["mean_position_error".into(), "spearman_loss_metric".into(), "status".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.architecture.name().to_string(),
            loss_name(r.loss).to_string(),
            num(r.beta),
            num(r.pck),
        ];
        for t in thresholds {
            let v = r.pck_at.iter().find(|(x, _)| x == t).map_or(f64::NAN, |(_, p)| *p);
            rec.push(num(v));
        }
        rec.push(num(r.mean_position_error));
        rec.push(num(r.spearman_loss_metric));
        rec.push(r.failure.clone().map_or("ok".into(), |f| format!("failed: {f}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Table of test-set PCK: one line per architecture, MSE beside relational.
pub fn format_ablation(rows: &[AblationRow], threshold: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Test-set PCK@{threshold} (mean position error in m, Spearman of loss vs metric)");
    let _ = writeln!(out, "{:<28} {:>26} {:>26}", "model", "MSE loss", "relational loss");
    for arch in Architecture::ALL {
        let cell = |loss| {
            rows.iter()
                .find(|r| r.architecture == arch && r.loss == loss)
                .map_or("-".to_string(), |r| match &r.failure {
                    Some(_) => "failed".to_string(),
                    None => format!(
                        "{:.4} ({:.4}, {:+.3})",
                        r.pck, r.mean_position_error, r.spearman_loss_metric
                    ),
                })
        };
        let _ = writeln!(
            out,
            "{:<28} {:>26} {:>26}",
            arch.label(),
            cell(Objective::Mse),
            cell(Objective::Relational)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub sweep: Vec<AblationRow>,
    pub table: String,
}

pub fn cmd_ablation(cfg: &ExperimentConfig) -> CliResult<AblationSummary> {
    cfg.write_resolved(&cfg.out_dir)?;
    let ds = open_dataset(cfg)?;
    let mut rows = Vec::with_capacity(8);
    for arch in Architecture::ALL {
        for loss in [Objective::Mse, Objective::Relational] {
            let row = ablation_cell(cfg, &ds, arch, loss, cfg.relational_beta);
            log::info!(
                "{} / {}: pck {:.4} spearman {:.4} ({:.1}s)",
                arch.name(),
                loss_name(loss),
                row.pck,
                row.spearman_loss_metric,
                row.seconds
            );
            rows.push(row);
        }
    }
    write_rows(&cfg.out_dir.join(ABLATION_CSV), &rows, &cfg.eval_thresholds)?;
    let table = format_ablation(&rows, cfg.pck_threshold);
    std::fs::write(cfg.out_dir.join(ABLATION_TXT), &table)?;

    let mut sweep = Vec::new();
    for &beta in &cfg.ablation_beta_sweep {
        sweep.push(ablation_cell(cfg, &ds, Architecture::LstmTransformer, Objective::Relational, beta));
    }
    if !sweep.is_empty() {
        write_rows(&cfg.out_dir.join(BETA_SWEEP_CSV), &sweep, &cfg.eval_thresholds)?;
    }

    let mut timing = csv::Writer::from_path(cfg.out_dir.join(ABLATION_TIMING_CSV))?;
    timing.write_record(["architecture", "loss", "beta", "seconds"])?;
    for r in rows.iter().chain(&sweep) {
        timing.write_record([
            r.architecture.name().to_string(),
            loss_name(r.loss).to_string(),
            num(r.beta),
            format!("{:.3}", r.seconds),
        ])?;
    }
    timing.flush()?;
    Ok(AblationSummary { rows, sweep, table })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub text: String,
}

/// Evaluate a checkpoint on the held-out patients.
///
/// The split is the one recorded in the checkpoint unless `seed` is given.
/// With `model_from_config` the checkpoint must match the configured model;
/// otherwise its stored model config is used.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: Option<u64>,
    model_from_config: bool,
) -> CliResult<EvalSummary> {
    cfg.write_resolved(&cfg.out_dir)?;
    let ck = load_checkpoint(checkpoint)?;
    let params = if model_from_config {
        ck.params_for(&cfg.model())?
    } else {
        ck.params()?
    };
    let ds = load_dataset(&cfg.dataset_path())?;
    if ds.meta.window_p != params.config().window_p {
        return Err(CliError::Usage(format!(
            "checkpoint expects windows of {} poses, dataset has {}",
            params.config().window_p,
            ds.meta.window_p
        )));
    }
    let split_seed = seed.or(ck.header.meta.seed).unwrap_or(cfg.seed);
    let fraction = ck.header.meta.test_fraction.unwrap_or(cfg.test_fraction);
    let (_, test) = ds.split_by_patient(fraction, split_seed)?;
    let report = evaluate(&params, &ds, &test, &cfg.pck(), &cfg.eval_thresholds, cfg.eval_batch_size)?;

    let mut text = String::new();
    let _ = writeln!(text, "checkpoint: {}", checkpoint.display());
    let _ = writeln!(text, "architecture: {}", params.config().architecture.name());
    let _ = writeln!(text, "test samples: {}", report.n_samples);
    let _ = writeln!(text, "mse: {:.6}", report.mse);
    let _ = writeln!(text, "mean position error (m): {:.6}", report.mean_position_error);
    for (t, p) in &report.pck_at {
        let _ = writeln!(text, "pck@{t}: {p:.6}");
    }
    let _ = writeln!(text, "spearman(loss, metric): {:.6}", report.spearman_loss_metric);
    std::fs::write(cfg.out_dir.join(EVAL_REPORT), &text)?;

    let json = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "architecture": params.config().architecture.name(),
        "n_samples": report.n_samples,
        "mse": report.mse,
        "mean_position_error": report.mean_position_error,
        "pck": report.pck_at.iter().map(|(t, p)| serde_json::json!({"threshold": t, "pck": p})).collect::<Vec<_>>(),
        "spearman_loss_metric": if report.spearman_loss_metric.is_finite() { Some(report.spearman_loss_metric) } else { None },
    });
    std::fs::write(
        cfg.out_dir.join(EVAL_JSON),
        serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join(PER_SAMPLE_CSV))?;
    w.write_record([
        "index", "patient", "exercise", "loss", "distance", "position_error", "pred_x", "pred_y", "pred_z", "pred_vx",
        "pred_vy", "pred_vz", "true_x", "true_y", "true_z", "true_vx", "true_vy", "true_vz",
    ])?;
    for s in &report.samples {
        let mut rec = vec![
            s.index.to_string(),
            ds.patient_of(s.index).to_string(),
            ds.exercise_of(s.index).name().to_string(),
            num(s.loss),
            num(s.distance),
            num(s.position_error),
        ];
        rec.extend(s.prediction.iter().chain(&s.truth).map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(EvalSummary { report, text })
}

// ---------------------------------------------------------------- inspect

pub fn cmd_inspect(path: &Path) -> CliResult<String> {
    let ck = load_checkpoint(path)?;
    let mut out = String::new();
    let _ = writeln!(out, "file: {}", path.display());
    let _ = writeln!(out, "version: {}.{}", ck.version.0, ck.version.1);
    let _ = writeln!(out, "checksum: ok");
    let m = &ck.header.meta;
    let show = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let _ = writeln!(out, "round: {}", show(m.round.map(|r| r.to_string())));
    let _ = writeln!(out, "pck: {}", show(m.pck.map(num)));
    let _ = writeln!(out, "seed: {}", show(m.seed.map(|s| s.to_string())));
    let _ = writeln!(out, "loss: {}", show(m.loss.clone()));
    let _ = writeln!(
        out,
        "model: {}",
        serde_json::to_string(&ck.header.model).expect("config serializes")
    );
    let _ = writeln!(out, "parameters: {} tensors, {} values", ck.header.params.len(), ck.num_params());
    for p in &ck.header.params {
        let _ = writeln!(out, "  {:<32} {:?}", p.name, p.shape);
    }
    Ok(out)
}
