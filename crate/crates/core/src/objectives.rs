//! Training losses and evaluation metrics.
//!
//! - [`mse_loss`]: mean squared error over samples and the six target components.
//! - [`pck`]: fraction of samples whose normalized distance is within a threshold.
//! - [`spearman_exact`] / [`soft_spearman`]: rank correlation, hard and differentiable.
//! - [`relational_objective`]: MSE plus a weighted soft Spearman between per-sample
//!   loss and per-sample metric, pushing the two toward negative correlation.
//! - [`attention_divergence`]: the saturating penalty `1 - exp(-d^2 / sigma^2)`
//!   between two flattened parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OUTPUT_DIM;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    PositionOnly,
    Full6d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PckConfig {
    pub threshold_tk: f64,
    /// Normalizer in meters.
    pub d_def: f64,
    pub distance_mode: DistanceMode,
}

impl Default for PckConfig {
    fn default() -> Self {
        Self {
            threshold_tk: 0.1,
            d_def: 1.0,
            distance_mode: DistanceMode::PositionOnly,
        }
    }
}

impl PckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_tk > 0.0) || !(self.d_def > 0.0) {
            return Err(Error::Config("pck threshold_tk and d_def must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_threshold(&self, threshold_tk: f64) -> Self {
        Self { threshold_tk, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationalConfig {
    pub beta: f64,
    pub soft_temperature: f64,
    pub min_batch: usize,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        Self {
            beta: 6e-4,
            soft_temperature: 0.1,
            min_batch: 4,
        }
    }
}

impl RelationalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config("relational beta must be >= 0".into()));
        }
        if !(self.soft_temperature > 0.0) {
            return Err(Error::Config("soft_temperature must be > 0".into()));
        }
        if self.min_batch < 4 {
            return Err(Error::Config("relational min_batch must be >= 4".into()));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, pred: Var, truth: Var, op: &'static str) -> Result<usize> {
    let sp = g.value(pred).shape();
    let st = g.value(truth).shape();
    match (sp, st) {
        ([n, OUTPUT_DIM], [m, OUTPUT_DIM]) if n == m => Ok(*n),
        _ => Err(Error::Shape {
            op,
            lhs: sp.to_vec(),
            rhs: st.to_vec(),
        }),
    }
}

/// Mean over samples and components of `(pred - truth)^2`; both `(batch, 6)`.
pub fn mse_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    check_pair(g, pred, truth, "mse_loss")?;
    let diff = g.sub(pred, truth)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Per-sample mean squared error `(batch,)`, differentiable.
pub fn per_sample_squared_error(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    check_pair(g, pred, truth, "per_sample_squared_error")?;
    let diff = g.sub(pred, truth)?;
    let sq = g.square(diff)?;
    g.mean_axis(sq, 1)
}

/// Value-level per-sample mean squared error.
pub fn per_sample_mse(pred: &[[f64; OUTPUT_DIM]], truth: &[[f64; OUTPUT_DIM]]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "batch size mismatch: {} predictions, {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / OUTPUT_DIM as f64)
        .collect())
}

/// Normalized distances `d_pg / d_def` per sample.
pub fn per_sample_errors(
    pred: &[[f64; OUTPUT_DIM]],
    truth: &[[f64; OUTPUT_DIM]],
    cfg: &PckConfig,
) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "batch size mismatch: {} predictions, {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let dims = match cfg.distance_mode {
        DistanceMode::PositionOnly => 3,
        DistanceMode::Full6d => OUTPUT_DIM,
    };
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d2: f64 = (0..dims).map(|k| (p[k] - t[k]) * (p[k] - t[k])).sum();
            d2.sqrt() / cfg.d_def
        })
        .collect())
}

/// Fraction of normalized distances `<= threshold` (boundary counts as a hit).
pub fn pck_from_errors(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Invalid("pck of an empty batch".into()));
    }
    let hits = errors.iter().filter(|&&e| e <= threshold).count();
    Ok(hits as f64 / errors.len() as f64)
}

pub fn pck(pred: &[[f64; OUTPUT_DIM]], truth: &[[f64; OUTPUT_DIM]], cfg: &PckConfig) -> Result<f64> {
    pck_from_errors(&per_sample_errors(pred, truth, cfg)?, cfg.threshold_tk)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end share ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

fn centered(values: &[f64]) -> (Vec<f64>, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let c: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let std = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (c, std)
}

/// Spearman's rank correlation with average-rank tie handling.
pub fn spearman_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("spearman: lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("spearman needs at least 2 samples".into()));
    }
    let (ra, sa) = centered(&average_ranks(a));
    let (rb, sb) = centered(&average_ranks(b));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input has zero rank spread".into()));
    }
    let cov = ra.iter().zip(&rb).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Soft ranks `1 + sum_{j != i} sigmoid((a_i - a_j) / temperature)` of a `(n,)` var.
pub fn soft_ranks(g: &mut Graph, a: Var, temperature: f64) -> Result<Var> {
    let n = match *g.value(a).shape() {
        [n] => n,
        ref s => {
            return Err(Error::Shape {
                op: "soft_ranks",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let col = g.reshape(a, &[n, 1])?;
    let ones = g.constant(Tensor::ones(&[1, n]));
    let rows = g.matmul(col, ones)?; // rows[i][j] = a_i
    let cols = g.transpose(rows)?; // cols[i][j] = a_j
    let diff = g.sub(rows, cols)?;
    let scaled = g.scale(diff, 1.0 / temperature)?;
    let s = g.sigmoid(scaled)?;
    let sums = g.sum_axis(s, 1)?;
    // The diagonal contributes sigmoid(0) = 0.5.
    g.add_scalar(sums, 0.5)
}

/// Differentiable Spearman: Pearson correlation between soft ranks of `a` and
/// exact ranks of the constant sequence `b`.
pub fn soft_spearman(g: &mut Graph, a: Var, b: &[f64], cfg: &RelationalConfig) -> Result<Var> {
    let n = g.value(a).numel();
    if g.value(a).shape() != [n] || b.len() != n {
        return Err(Error::Shape {
            op: "soft_spearman",
            lhs: g.value(a).shape().to_vec(),
            rhs: vec![b.len()],
        });
    }
    if n < cfg.min_batch {
        return Err(Error::Invalid(format!(
            "soft_spearman needs at least {} samples, got {n}",
            cfg.min_batch
        )));
    }
    let (rb, sb) = centered(&average_ranks(b));
    if sb == 0.0 {
        return Err(Error::UndefinedCorrelation("metric ranks are constant".into()));
    }

    let ra = soft_ranks(g, a, cfg.soft_temperature)?;
    let mut centering = vec![-1.0 / n as f64; n * n];
    for i in 0..n {
        centering[i * n + i] += 1.0;
    }
    let c = g.constant(Tensor::new(vec![n, n], centering)?);
    let ra_col = g.reshape(ra, &[n, 1])?;
    let ra_c = g.matmul(c, ra_col)?;
    let ra_c = g.reshape(ra_c, &[n])?;

    let var_a_node = {
        let sq = g.square(ra_c)?;
        g.mean(sq)?
    };
    // Soft ranks live on a scale of n; anything below this is rounding residue.
    if g.value(var_a_node).data()[0] <= 1e-20 * (n * n) as f64 {
        return Err(Error::UndefinedCorrelation("soft ranks have zero variance".into()));
    }
    let rb_c = g.constant(Tensor::from_vec(rb));
    let prod = g.mul(ra_c, rb_c)?;
    let cov = g.mean(prod)?;
    let std_a = g.sqrt(var_a_node)?;
    let rho = g.div(cov, std_a)?;
    g.scale(rho, 1.0 / sb)
}

/// Parts of a relational objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RelationalOutput {
    pub total: Var,
    pub mse: Var,
    /// `None` when the correlation term was skipped (beta = 0 or constant metric).
    pub correlation: Option<Var>,
}

/// `MSE + beta * soft_spearman(per-sample loss, -normalized distance)`.
pub fn relational_objective(
    g: &mut Graph,
    pred: Var,
    truth: Var,
    cfg: &RelationalConfig,
    pck_cfg: &PckConfig,
) -> Result<RelationalOutput> {
    let n = check_pair(g, pred, truth, "relational_objective")?;
    let mse = mse_loss(g, pred, truth)?;
    if cfg.beta == 0.0 {
        return Ok(RelationalOutput {
            total: mse,
            mse,
            correlation: None,
        });
    }
    if n < cfg.min_batch {
        return Err(Error::Invalid(format!(
            "relational objective needs at least {} samples, got {n}",
            cfg.min_batch
        )));
    }
    let metric: Vec<f64> = {
        let p = rows6(g.value(pred));
        let t = rows6(g.value(truth));
        per_sample_errors(&p, &t, pck_cfg)?.into_iter().map(|d| -d).collect()
    };
    let (_, spread) = centered(&average_ranks(&metric));
    if spread == 0.0 {
        log::warn!("relational objective: metric proxy is constant across the batch, using MSE only");
        return Ok(RelationalOutput {
            total: mse,
            mse,
            correlation: None,
        });
    }
    let per_sample = per_sample_squared_error(g, pred, truth)?;
    let rho = soft_spearman(g, per_sample, &metric, cfg)?;
    let weighted = g.scale(rho, cfg.beta)?;
    let total = g.add(mse, weighted)?;
    Ok(RelationalOutput {
        total,
        mse,
        correlation: Some(rho),
    })
}

/// Split a `(batch, 6)` tensor into rows.
pub fn rows6(t: &Tensor) -> Vec<[f64; OUTPUT_DIM]> {
    t.data()
        .chunks(OUTPUT_DIM)
        .map(|c| {
            let mut r = [0.0; OUTPUT_DIM];
            r.copy_from_slice(c);
            r
        })
        .collect()
}

/// `1 - exp(-||theta_i - theta_j||^2 / sigma^2)` for two flattened parameter vectors.
pub fn attention_divergence(g: &mut Graph, theta_i: Var, theta_j: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let (si, sj) = (g.value(theta_i).shape().to_vec(), g.value(theta_j).shape().to_vec());
    if si != sj {
        return Err(Error::Shape {
            op: "attention_divergence",
            lhs: si,
            rhs: sj,
        });
    }
    let diff = g.sub(theta_i, theta_j)?;
    let sq = g.square(diff)?;
    let d2 = g.sum(sq)?;
    let scaled = g.scale(d2, -1.0 / (sigma * sigma))?;
    let e = g.exp(scaled)?;
    let neg = g.neg(e)?;
    g.add_scalar(neg, 1.0)
}

/// Value-level [`attention_divergence`].
pub fn attention_divergence_value(theta_i: &[f64], theta_j: &[f64], sigma: f64) -> Result<f64> {
    if theta_i.len() != theta_j.len() {
        return Err(Error::Invalid(format!(
            "attention_divergence: lengths {} and {} differ",
            theta_i.len(),
            theta_j.len()
        )));
    }
    let d2: f64 = theta_i.iter().zip(theta_j).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - (-d2 / (sigma * sigma)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(g: &mut Graph, rows: &[[f64; 6]]) -> Var {
        let data = rows.iter().flatten().copied().collect();
        g.constant(Tensor::new(vec![rows.len(), 6], data).unwrap())
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::new();
        let p = batch(&mut g, &[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let l = mse_loss(&mut g, p, p).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let p = batch(&mut g, &[[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]]);
        let t = batch(&mut g, &[[0.0; 6]]);
        let l = mse_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).data()[0] - 25.0 / 6.0).abs() < 1e-15);

        // Second sample: squared error 1 in one component -> 1/6.
        let p = batch(&mut g, &[[3.0, 4.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]]);
        let t = batch(&mut g, &[[0.0; 6], [0.0; 6]]);
        let l = mse_loss(&mut g, p, t).unwrap();
        let expected = (25.0 / 6.0 + 1.0 / 6.0) / 2.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn mse_rejects_mismatched_batches() {
        let mut g = Graph::new();
        let p = batch(&mut g, &[[0.0; 6], [0.0; 6]]);
        let t = batch(&mut g, &[[0.0; 6]]);
        assert!(mse_loss(&mut g, p, t).is_err());
    }

    #[test]
    fn distance_modes() {
        let cfg = PckConfig::default();
        let truth = [[0.0; 6]];
        assert_eq!(per_sample_errors(&truth, &truth, &cfg).unwrap(), vec![0.0]);
        let pred = [[0.06, 0.08, 0.0, 0.0, 0.0, 0.0]];
        let d = per_sample_errors(&pred, &truth, &cfg).unwrap()[0];
        assert!((d - 0.1).abs() < 1e-15);

        let vel = [[0.0, 0.0, 0.0, 0.3, 0.0, 0.0]];
        assert_eq!(per_sample_errors(&vel, &truth, &cfg).unwrap()[0], 0.0);
        let full = PckConfig {
            distance_mode: DistanceMode::Full6d,
            ..cfg
        };
        assert!(per_sample_errors(&vel, &truth, &full).unwrap()[0] > 0.0);
    }

    #[test]
    fn pck_counts_boundary_as_hit() {
        assert_eq!(pck_from_errors(&[0.05, 0.15, 0.09], 0.1).unwrap(), 2.0 / 3.0);
        assert_eq!(pck_from_errors(&[0.1], 0.1).unwrap(), 1.0);
        assert!(pck_from_errors(&[], 0.1).is_err());
        let truth = [[0.5; 6], [0.1; 6]];
        assert_eq!(pck(&truth, &truth, &PckConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn spearman_reference_cases() {
        assert!((spearman_exact(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_exact(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // d = (1, -1, 1, -1): 1 - 6*4/(4*15) = 0.6
        let r = spearman_exact(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_exact(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman_exact(&[1.0], &[1.0]).is_err());
        assert!(spearman_exact(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    fn soft(a: &[f64], b: &[f64], temperature: f64) -> f64 {
        let mut g = Graph::new();
        let av = g.param(Tensor::from_vec(a.to_vec()));
        let cfg = RelationalConfig {
            soft_temperature: temperature,
            ..Default::default()
        };
        let r = soft_spearman(&mut g, av, b, &cfg).unwrap();
        g.value(r).data()[0]
    }

    #[test]
    fn soft_spearman_approaches_exact_at_low_temperature() {
        let a: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let inc: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let dec: Vec<f64> = inc.iter().rev().copied().collect();
        assert!((soft(&a, &inc, 1e-3) - spearman_exact(&a, &inc).unwrap()).abs() < 0.05);
        assert!((soft(&a, &dec, 1e-3) + 1.0).abs() < 0.05);
    }

    #[test]
    fn soft_spearman_rejects_small_batches_and_constant_ranks() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let cfg = RelationalConfig::default();
        assert!(soft_spearman(&mut g, a, &[1.0, 2.0, 3.0], &cfg).is_err());
        let a = g.param(Tensor::from_vec(vec![1.0; 5]));
        let err = soft_spearman(&mut g, a, &[1.0, 2.0, 3.0, 4.0, 5.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::UndefinedCorrelation(_)), "{err}");
    }

    #[test]
    fn soft_spearman_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let point = Tensor::from_vec((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let cfg = RelationalConfig::default();
        let err = finite_diff_check(|g, x| soft_spearman(g, x, &b, &cfg), &point, 1e-6).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn relational_with_zero_beta_is_mse_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 6]> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let truth: Vec<[f64; 6]> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let mut g = Graph::new();
        let p = batch(&mut g, &rows);
        let t = batch(&mut g, &truth);
        let cfg = RelationalConfig {
            beta: 0.0,
            ..Default::default()
        };
        let out = relational_objective(&mut g, p, t, &cfg, &PckConfig::default()).unwrap();
        let mse = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(out.total).data()[0].to_bits(), g.value(mse).data()[0].to_bits());
    }

    #[test]
    fn relational_falls_back_on_perfect_batch() {
        let rows: Vec<[f64; 6]> = (0..6).map(|i| [i as f64; 6]).collect();
        let mut g = Graph::new();
        let p = batch(&mut g, &rows);
        let out = relational_objective(&mut g, p, p, &RelationalConfig::default(), &PckConfig::default()).unwrap();
        assert!(out.correlation.is_none());
        assert_eq!(g.value(out.total).data(), &[0.0]);
    }

    #[test]
    fn relational_recomposes_from_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<[f64; 6]> = (0..10).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let truth: Vec<[f64; 6]> = (0..10).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let cfg = RelationalConfig {
            beta: 0.7,
            ..Default::default()
        };
        let mut g = Graph::new();
        let p = batch(&mut g, &rows);
        let t = batch(&mut g, &truth);
        let out = relational_objective(&mut g, p, t, &cfg, &PckConfig::default()).unwrap();
        let total = g.value(out.total).data()[0];

        let mut g2 = Graph::new();
        let p2 = batch(&mut g2, &rows);
        let t2 = batch(&mut g2, &truth);
        let mse = mse_loss(&mut g2, p2, t2).unwrap();
        let a = per_sample_squared_error(&mut g2, p2, t2).unwrap();
        let metric: Vec<f64> = per_sample_errors(&rows, &truth, &PckConfig::default())
            .unwrap()
            .iter()
            .map(|d| -d)
            .collect();
        let rho = soft_spearman(&mut g2, a, &metric, &cfg).unwrap();
        let expected = g2.value(mse).data()[0] + 0.7 * g2.value(rho).data()[0];
        assert!((total - expected).abs() < 1e-14);
    }

    #[test]
    fn divergence_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let z = attention_divergence(&mut g, a, a, 1.0).unwrap();
        assert_eq!(g.value(z).data(), &[0.0]);

        let b = g.constant(Tensor::from_vec(vec![1.0, 2.0, 5.0]));
        let v = attention_divergence(&mut g, a, b, 2.0).unwrap();
        assert!((g.value(v).data()[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((g.value(v).data()[0] - 0.6321).abs() < 1e-4);

        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(attention_divergence(&mut g, a, c, 1.0).is_err());
        assert!(attention_divergence_value(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn divergence_is_monotone_in_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let base: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dir: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s1 = rng.random_range(0.0..1.0);
            let s2 = s1 + rng.random_range(0.01..1.0);
            let p1: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s1 * d).collect();
            let p2: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s2 * d).collect();
            let a1 = attention_divergence_value(&base, &p1, 1.5).unwrap();
            let a2 = attention_divergence_value(&base, &p2, 1.5).unwrap();
            assert!(a1 < a2);
            assert!((0.0..1.0).contains(&a2));
        }
    }
}
