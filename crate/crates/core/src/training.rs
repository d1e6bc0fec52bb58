//! Optimizers, minibatch training on a subset of a dataset, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kinematics::Dataset;
use crate::model::{forward, predict_batch, ModelParams, OUTPUT_DIM};
use crate::objectives::{
    attention_divergence, mse_loss, per_sample_errors, per_sample_mse, pck_from_errors, relational_objective,
    rows6, spearman_exact, PckConfig, RelationalConfig,
};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state over a flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n: usize) -> Self {
        let moments = if cfg.kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            cfg,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(theta.len(), grad.len());
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mse,
    Relational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: Objective,
    pub relational: RelationalConfig,
    pub pck: PckConfig,
}

impl ObjectiveConfig {
    pub fn mse() -> Self {
        Self {
            kind: Objective::Mse,
            relational: RelationalConfig::default(),
            pck: PckConfig::default(),
        }
    }
}

/// Peer snapshots for the attention-weighted divergence penalty.
#[derive(Debug, Clone, Copy)]
pub struct Personalization<'a> {
    pub lambda: f64,
    pub sigma: f64,
    pub peers: &'a [Vec<f64>],
}

/// Objective value and its gradient, flattened in canonical parameter order.
pub fn loss_and_gradient(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    objective: &ObjectiveConfig,
    personal: Option<&Personalization<'_>>,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let pred = forward(&mut g, &bound, params.config(), xv)?;
    let n = x.shape()[0];
    let mut loss = match objective.kind {
        Objective::Relational if n >= objective.relational.min_batch => {
            relational_objective(&mut g, pred, yv, &objective.relational, &objective.pck)?.total
        }
        _ => mse_loss(&mut g, pred, yv)?,
    };
    if let Some(p) = personal.filter(|p| p.lambda != 0.0 && !p.peers.is_empty()) {
        let n_params = params.num_params();
        let flat: Vec<_> = bound
            .vars()
            .into_iter()
            .map(|v| {
                let len = g.value(v).numel();
                g.reshape(v, &[len])
            })
            .collect::<Result<_>>()?;
        let theta = g.concat(&flat, 0)?;
        for peer in p.peers {
            if peer.len() != n_params {
                return Err(Error::Federation(format!(
                    "peer snapshot has {} values, model has {n_params}",
                    peer.len()
                )));
            }
            let pv = g.constant(Tensor::from_vec(peer.clone()));
            let a = attention_divergence(&mut g, theta, pv, p.sigma)?;
            let term = g.scale(a, p.lambda)?;
            loss = g.add(loss, term)?;
        }
    }
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "objective" });
    }
    let grads = g.backward(loss)?;
    let mut flat = Vec::with_capacity(params.num_params());
    for v in bound.vars() {
        let t = grads
            .get(v)
            .ok_or_else(|| Error::Backward("missing parameter gradient".into()))?;
        flat.extend_from_slice(t.data());
    }
    Ok((value, flat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on minibatches per epoch, drawn from the shuffled order; 0 means all.
    pub max_batches: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 2,
            batch_size: 32,
            max_batches: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean minibatch objective over the run.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Minibatch training on `indices` of `data`, starting from `params`. Each
/// epoch visits a fresh seeded shuffle; the optimizer starts from zero state.
pub fn train_local(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    cfg: &LocalTrainConfig,
    objective: &ObjectiveConfig,
    personal: Option<&Personalization<'_>>,
    seed: u64,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::Invalid("no local training samples".into()));
    }
    let config = params.config().clone();
    let mut theta = params.flatten();
    let mut opt = Optimizer::new(cfg.optimizer, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = indices.to_vec();
    let (mut total, mut steps) = (0.0, 0usize);
    let mut current = params.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = order.chunks(cfg.batch_size);
        let limit = if cfg.max_batches == 0 { usize::MAX } else { cfg.max_batches };
        for batch in batches.take(limit) {
            let (x, y) = data.batch(batch)?;
            let (loss, grad) = loss_and_gradient(&current, &x, &y, objective, personal)?;
            opt.step(&mut theta, &grad);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
            current = ModelParams::unflatten(&config, &theta)?;
            total += loss;
            steps += 1;
        }
    }
    Ok(LocalOutcome {
        params: current,
        mean_loss: total / steps as f64,
        steps,
    })
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub index: usize,
    pub prediction: [f64; OUTPUT_DIM],
    pub truth: [f64; OUTPUT_DIM],
    /// Mean squared error over the six outputs.
    pub loss: f64,
    /// Normalized distance used by PCK.
    pub distance: f64,
    /// Euclidean position error, metres.
    pub position_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mse: f64,
    pub mean_position_error: f64,
    /// PCK at the configured threshold.
    pub pck: f64,
    /// `(threshold, pck)` for each requested threshold.
    pub pck_at: Vec<(f64, f64)>,
    /// Exact Spearman between per-sample loss and per-sample metric (negative
    /// normalized distance); NaN when either side is constant.
    pub spearman_loss_metric: f64,
    pub samples: Vec<SampleEval>,
}

/// Forward-only evaluation of `params` on `indices`.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    pck: &PckConfig,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<EvalReport> {
    pck.validate()?;
    if indices.is_empty() {
        return Err(Error::Invalid("no evaluation samples".into()));
    }
    let mut preds = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        preds.extend(predict_batch(params, &x)?);
        truths.extend(rows6(&y));
    }
    let losses = per_sample_mse(&preds, &truths)?;
    let distances = per_sample_errors(&preds, &truths, pck)?;
    let samples: Vec<SampleEval> = (0..indices.len())
        .map(|k| {
            let (p, t) = (preds[k], truths[k]);
            let position_error = (0..3).map(|j| (p[j] - t[j]).powi(2)).sum::<f64>().sqrt();
            SampleEval {
                index: indices[k],
                prediction: p,
                truth: t,
                loss: losses[k],
                distance: distances[k],
                position_error,
            }
        })
        .collect();
    let n = samples.len() as f64;
    let metric: Vec<f64> = distances.iter().map(|d| -d).collect();
    let spearman = match spearman_exact(&losses, &metric) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(msg)) => {
            log::warn!("loss/metric correlation undefined: {msg}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let pck_at = thresholds
        .iter()
        .map(|&t| Ok((t, pck_from_errors(&distances, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n_samples: samples.len(),
        mse: losses.iter().sum::<f64>() / n,
        mean_position_error: samples.iter().map(|s| s.position_error).sum::<f64>() / n,
        pck: pck_from_errors(&distances, pck.threshold_tk)?,
        pck_at,
        spearman_loss_metric: spearman,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{generate_dataset, DatagenConfig, Exercise};
    use crate::model::{Architecture, ModelConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            window_p: 4,
            lstm_hidden: 8,
            attn_heads: 2,
            attn_dim: 8,
            ffn_dim: 16,
            mlp_layers: vec![16, 6],
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_dataset(
            &DatagenConfig {
                n_patients: 2,
                exercises: vec![Exercise::ArmLifting],
                duration_s: 2.0,
                window_p: 4,
                stride: 4,
                ..DatagenConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn sgd_step_is_plain_gradient_descent() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), 2);
        let mut theta = vec![1.0, -2.0];
        opt.step(&mut theta, &[0.5, 1.0]);
        assert_eq!(theta, vec![0.95, -2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 2);
        let mut theta = vec![0.0, 0.0];
        opt.step(&mut theta, &[3.0, -0.02]);
        assert!((theta[0] + 1e-3).abs() < 1e-9);
        assert!((theta[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_difference_in_flat_space() {
        let data = tiny_data();
        let cfg = tiny_model().with_architecture(Architecture::LstmOnly);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let (x, y) = data.batch(&[0, 1, 2, 3, 4]).unwrap();
        let obj = ObjectiveConfig::mse();
        let (l0, grad) = loss_and_gradient(&params, &x, &y, &obj, None).unwrap();
        let theta = params.flatten();
        let h = 1e-6;
        for &i in &[0usize, 7, theta.len() / 2, theta.len() - 1] {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let lp = loss_and_gradient(&ModelParams::unflatten(&cfg, &tp).unwrap(), &x, &y, &obj, None).unwrap().0;
            let lm = loss_and_gradient(&ModelParams::unflatten(&cfg, &tm).unwrap(), &x, &y, &obj, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", grad[i]);
        }
        assert!(l0 > 0.0);
    }

    #[test]
    fn zero_lambda_personalization_changes_nothing() {
        let data = tiny_data();
        let params = ModelParams::init(&tiny_model(), 1).unwrap();
        let (x, y) = data.batch(&[0, 1, 2, 3]).unwrap();
        let peers = vec![vec![0.5; params.num_params()]];
        let obj = ObjectiveConfig::mse();
        let off = Personalization {
            lambda: 0.0,
            sigma: 1.0,
            peers: &peers,
        };
        let a = loss_and_gradient(&params, &x, &y, &obj, None).unwrap();
        let b = loss_and_gradient(&params, &x, &y, &obj, Some(&off)).unwrap();
        assert_eq!(a, b);
        let on = Personalization { lambda: 0.1, ..off };
        let c = loss_and_gradient(&params, &x, &y, &obj, Some(&on)).unwrap();
        assert!(c.0 > a.0);
    }

    #[test]
    fn local_training_reduces_loss_and_is_deterministic() {
        let data = tiny_data();
        let params = ModelParams::init(&tiny_model(), 2).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let cfg = LocalTrainConfig {
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
            epochs: 20,
            batch_size: 8,
            max_batches: 0,
        };
        let obj = ObjectiveConfig::mse();
        let pck = PckConfig::default();
        let before = evaluate(&params, &data, &idx, &pck, &[0.1], 16).unwrap();
        let a = train_local(&params, &data, &idx, &cfg, &obj, None, 9).unwrap();
        let b = train_local(&params, &data, &idx, &cfg, &obj, None, 9).unwrap();
        assert_eq!(a.params, b.params);
        let after = evaluate(&a.params, &data, &idx, &pck, &[0.05, 0.1, 0.2], 16).unwrap();
        assert!(after.mse < before.mse);
        assert!(after.pck_at[0].1 <= after.pck_at[1].1 && after.pck_at[1].1 <= after.pck_at[2].1);
        assert_eq!(after.samples.len(), idx.len());
    }
}
