use fjl_core::objectives::{soft_spearman, spearman_exact, RelationalConfig};
use fjl_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank by counting: smaller values plus half of the other equal ones.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

fn oracle(a: &[f64], b: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(a), &brute_ranks(b))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<f64> {
    if ties {
        (0..n).map(|_| rng.random_range(0..4) as f64).collect()
    } else {
        (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
    }
}

fn distinct(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

#[test]
fn exact_spearman_matches_rank_and_pearson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=64);
        let ties = checked % 2 == 1;
        let a = random_vector(&mut rng, n, ties);
        let b_ties = ties && rng.random_bool(0.5);
        let b = random_vector(&mut rng, n, b_ties);
        if !distinct(&a) || !distinct(&b) {
            assert!(spearman_exact(&a, &b).is_err());
            continue;
        }
        let got = spearman_exact(&a, &b).unwrap();
        let want = oracle(&a, &b);
        assert!((got - want).abs() <= 1e-12, "n={n} got {got} want {want}");
        checked += 1;
    }
}

#[test]
fn soft_spearman_at_low_temperature_tracks_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = RelationalConfig { soft_temperature: 1e-3, ..RelationalConfig::default() };
    for _ in 0..1000 {
        let n = rng.random_range(4..=64);
        let a = random_vector(&mut rng, n, false);
        let b = random_vector(&mut rng, n, false);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(a.clone()));
        let rho = soft_spearman(&mut g, x, &b, &cfg).unwrap();
        let soft = g.value(rho).item().unwrap();
        let exact = spearman_exact(&a, &b).unwrap();
        assert!((soft - exact).abs() < 0.05, "n={n} soft {soft} exact {exact}");
    }
}

#[test]
fn constant_input_is_undefined() {
    assert!(spearman_exact(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(spearman_exact(&[1.0], &[2.0]).is_err());
    assert!(spearman_exact(&[1.0, 2.0], &[2.0]).is_err());
}

proptest! {
    #[test]
    fn invariant_under_monotone_maps(v in prop::collection::vec(-100.0f64..100.0, 2..40), w in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let n = v.len().min(w.len());
        let (a, b) = (&v[..n], &w[..n]);
        prop_assume!(distinct(a) && distinct(b));
        let rho = spearman_exact(a, b).unwrap();
        let mapped: Vec<f64> = a.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
        prop_assert!((spearman_exact(&mapped, b).unwrap() - rho).abs() < 1e-12);
        prop_assert!((spearman_exact(b, a).unwrap() - rho).abs() < 1e-12);
        let flipped: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((spearman_exact(&flipped, b).unwrap() + rho).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn identical_orderings_give_one(v in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        prop_assume!(distinct(&v));
        let shifted: Vec<f64> = v.iter().map(|x| 2.0 * x + 7.0).collect();
        prop_assert!((spearman_exact(&v, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }
}
