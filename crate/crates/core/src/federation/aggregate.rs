use crate::{Error, Result};

/// One client's contribution to a round: the normalized local movement
/// `(theta_broadcast - theta_local) / lr_local`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub client_id: String,
    pub round: u32,
    pub delta: Vec<f64>,
    pub n_samples: u64,
    pub local_loss: f64,
    pub layout_hash: u64,
}

impl GradientUpdate {
    pub fn from_params(
        client_id: &str,
        round: u32,
        broadcast: &[f64],
        local: &[f64],
        learning_rate: f64,
        n_samples: u64,
        local_loss: f64,
        layout_hash: u64,
    ) -> Result<Self> {
        if broadcast.len() != local.len() {
            return Err(Error::Federation("parameter vectors differ in length".into()));
        }
        let delta = broadcast
            .iter()
            .zip(local)
            .map(|(b, l)| (b - l) / learning_rate)
            .collect();
        Ok(Self {
            client_id: client_id.to_string(),
            round,
            delta,
            n_samples,
            local_loss,
            layout_hash,
        })
    }
}

/// Mean of the client deltas, summed in client-id order so the result is
/// bit-identical whatever order the updates arrived in. With `weighted` the
/// mean is weighted by `n_samples`.
pub fn aggregate_updates(updates: &[GradientUpdate], weighted: bool) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Federation("no updates to aggregate".into()))?;
    for u in updates {
        if u.round != first.round {
            return Err(Error::Federation(format!(
                "mixed rounds: {} and {}",
                first.round, u.round
            )));
        }
        if u.layout_hash != first.layout_hash || u.delta.len() != first.delta.len() {
            return Err(Error::Federation(format!(
                "client {} has a different parameter layout",
                u.client_id
            )));
        }
    }
    let mut sorted: Vec<&GradientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let mut sum = vec![0.0; first.delta.len()];
    if weighted {
        let total: u64 = sorted.iter().map(|u| u.n_samples).sum();
        if total == 0 {
            return Err(Error::Federation("weighted mean over zero samples".into()));
        }
        for u in sorted {
            let w = u.n_samples as f64;
            for (s, d) in sum.iter_mut().zip(&u.delta) {
                *s += w * d;
            }
        }
        let total = total as f64;
        sum.iter_mut().for_each(|s| *s /= total);
    } else {
        for u in &sorted {
            for (s, d) in sum.iter_mut().zip(&u.delta) {
                *s += d;
            }
        }
        let n = sorted.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    Ok(sum)
}

/// `theta - eta * delta_agg`, componentwise.
pub fn apply_global_update(theta: &[f64], delta_agg: &[f64], eta: f64) -> Result<Vec<f64>> {
    if theta.len() != delta_agg.len() {
        return Err(Error::Federation(format!(
            "update has {} values, model has {}",
            delta_agg.len(),
            theta.len()
        )));
    }
    Ok(theta.iter().zip(delta_agg).map(|(t, d)| t - eta * d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(id: &str, delta: Vec<f64>) -> GradientUpdate {
        GradientUpdate {
            client_id: id.into(),
            round: 3,
            delta,
            n_samples: 10,
            local_loss: 0.0,
            layout_hash: 42,
        }
    }

    #[test]
    fn identical_updates_average_to_themselves() {
        let g = vec![0.5, -1.25, 3.0];
        let ups: Vec<_> = ["a", "b", "c"].iter().map(|id| update(id, g.clone())).collect();
        assert_eq!(aggregate_updates(&ups, false).unwrap(), g);
    }

    #[test]
    fn opposite_updates_cancel() {
        let ups = vec![update("a", vec![1.0, -2.0]), update("b", vec![-1.0, 2.0])];
        assert_eq!(aggregate_updates(&ups, false).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn arrival_order_does_not_change_bits() {
        let a = update("a", vec![0.1, 0.7]);
        let b = update("b", vec![1e-17, 0.3]);
        let c = update("c", vec![-0.1, 0.2]);
        let x = aggregate_updates(&[a.clone(), b.clone(), c.clone()], false).unwrap();
        let y = aggregate_updates(&[c, a, b], false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn weighted_mean_uses_sample_counts() {
        let mut a = update("a", vec![1.0]);
        a.n_samples = 3;
        let mut b = update("b", vec![5.0]);
        b.n_samples = 1;
        assert_eq!(aggregate_updates(&[a, b], true).unwrap(), vec![2.0]);
    }

    #[test]
    fn mixed_rounds_and_layouts_are_rejected() {
        let a = update("a", vec![1.0]);
        let mut b = update("b", vec![1.0]);
        b.round = 4;
        assert!(aggregate_updates(&[a.clone(), b], false).is_err());
        let mut c = update("c", vec![1.0]);
        c.layout_hash = 7;
        assert!(aggregate_updates(&[a, c], false).is_err());
        assert!(aggregate_updates(&[], false).is_err());
    }

    #[test]
    fn global_update_rule() {
        assert_eq!(apply_global_update(&[1.0], &[0.5], 0.1).unwrap(), vec![0.95]);
        assert_eq!(apply_global_update(&[1.0, 2.0], &[0.5, 0.1], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(apply_global_update(&[1.0, 2.0], &[0.0, 0.0], 0.3).unwrap(), vec![1.0, 2.0]);
        assert!(apply_global_update(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn delta_normalizes_by_learning_rate() {
        let u = GradientUpdate::from_params("a", 0, &[1.0, 2.0], &[0.9, 2.2], 0.1, 5, 0.0, 1).unwrap();
        assert!((u.delta[0] - 1.0).abs() < 1e-12 && (u.delta[1] + 2.0).abs() < 1e-12);
    }
}
