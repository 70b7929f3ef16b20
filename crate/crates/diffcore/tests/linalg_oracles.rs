//! Matrix exponential and spectral norm against independent oracles.

use gnflow_diffcore::{clip_spectral, matrix_exponential, spectral_norm, AdamConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unscaled Taylor series with `terms` terms.
fn series_expm(m: &Tensor, terms: usize) -> Tensor {
    let n = m.rows();
    let mut result = Tensor::eye(n);
    let mut term = Tensor::eye(n);
    for k in 1..terms {
        term = term.matmul(m).unwrap().scale(1.0 / k as f64);
        result = result.add(&term).unwrap();
    }
    result
}

/// Cyclic Jacobi eigenvalue iteration for symmetric matrices.
fn symmetric_eigenvalues(s: &Tensor) -> Vec<f64> {
    let n = s.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn expm_swap_matrix_matches_series_and_hyperbolics() {
    let m = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
    let e = matrix_exponential(&m).unwrap();
    let oracle = series_expm(&m, 30);
    assert!(e.max_abs_diff(&oracle) <= 1e-12);
    let (c, s) = (1f64.cosh(), 1f64.sinh());
    assert!((e.get(0, 0) - c).abs() < 1e-12 && (e.get(0, 1) - s).abs() < 1e-12);
    assert!((e.get(0, 0) - 1.5431).abs() < 1e-4 && (e.get(1, 0) - 1.1752).abs() < 1e-4);
}

#[test]
fn expm_matches_series_on_random_well_conditioned_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..7);
        let m = Tensor::from_fn(n, n, |_, _| rng.random_range(-0.4..0.4));
        let e = matrix_exponential(&m).unwrap();
        assert!(e.max_abs_diff(&series_expm(&m, 40)) <= 1e-12);
    }
}

#[test]
fn expm_inverse_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(2..8);
        let mut m = Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let s = spectral_norm(&m, 500).unwrap();
        let target = rng.random_range(0.1..2.0);
        m = m.scale(target / s);
        let prod = matrix_exponential(&m)
            .unwrap()
            .matmul(&matrix_exponential(&m.scale(-1.0)).unwrap())
            .unwrap();
        assert!(prod.max_abs_diff(&Tensor::eye(n)) <= 1e-10);
    }
}

#[test]
fn spectral_norm_matches_dense_eigensolve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = Tensor::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let mtm = m.matmul_tn(&m).unwrap();
        let top = symmetric_eigenvalues(&mtm).into_iter().fold(f64::MIN, f64::max);
        let oracle = top.sqrt();
        let est = spectral_norm(&m, 1000).unwrap();
        assert!(
            (est - oracle).abs() / oracle <= 1e-6,
            "power iteration {est} vs eigen-solve {oracle}"
        );
    }
}

#[test]
fn clipped_random_matrix_respects_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let m = Tensor::from_fn(6, 4, |_, _| rng.random_range(-2.0..2.0));
        let c = clip_spectral(&m, 0.9, 200).unwrap();
        assert!(spectral_norm(&c, 200).unwrap() <= 0.9 + 1e-9);
    }
}

fn matrix_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn clip_spectral_is_idempotent(m in matrix_strategy(), bound in 0.05f64..2.0) {
        let once = clip_spectral(&m, bound, 100).unwrap();
        let twice = clip_spectral(&once, bound, 100).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn adam_with_zero_gradients_never_moves(m in matrix_strategy(), steps in 1usize..20) {
        let mut store = ParamStore::new();
        let id = store.add("p", m.clone());
        let zeros = vec![Tensor::zeros(m.shape())];
        for _ in 0..steps {
            store.adam_step(&zeros, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(store.get(id).data(), m.data());
        prop_assert_eq!(store.step_count(), steps as u64);
    }
}
