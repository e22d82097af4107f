use dss_core::baselines::{dlm_fit, expanding_start, lasso_cv, lasso_expanding_path, lasso_fit};
use dss_core::em::Dataset;
use dss_core::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, stream);
    DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn lasso_objective(y: &DVector<f64>, x: &DMatrix<f64>, beta: &[f64], lambda: f64) -> f64 {
    let b = DVector::from_column_slice(beta);
    0.5 * (y - x * b).norm_squared() + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
}

// Independent reference: projected gradient on the split form β = u - v with u, v ≥ 0.
fn split_projected_gradient(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64, iters: usize) -> Vec<f64> {
    let p = x.ncols();
    let gram = x.transpose() * x;
    let xty = x.transpose() * y;
    let lipschitz = 2.0 * gram.symmetric_eigenvalues().amax();
    let step = 1.0 / lipschitz;
    let (mut u, mut v) = (DVector::<f64>::zeros(p), DVector::<f64>::zeros(p));
    for _ in 0..iters {
        let grad = &gram * (&u - &v) - &xty;
        for j in 0..p {
            u[j] = (u[j] - step * (grad[j] + lambda)).max(0.0);
            v[j] = (v[j] - step * (-grad[j] + lambda)).max(0.0);
        }
    }
    (&u - &v).iter().copied().collect()
}

#[test]
fn lasso_matches_an_independent_solver() {
    let x = normal_matrix(40, 8, 31, 0);
    let truth = DVector::from_vec(vec![2.0, -1.5, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0]);
    let noise = normal_matrix(40, 1, 31, 1).column(0).into_owned();
    let y = &x * truth + noise;
    for lambda in [0.5, 5.0, 20.0] {
        let fit = lasso_fit(&y, &x, lambda).unwrap();
        let reference = split_projected_gradient(&y, &x, lambda, 200_000);
        let a = lasso_objective(&y, &x, &fit.coefficients, lambda);
        let b = lasso_objective(&y, &x, &reference, lambda);
        assert!((a - b).abs() < 1e-8, "lambda {lambda}: {a} vs {b}");
        assert!(fit.kkt_residual < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lasso_satisfies_optimality(seed in 0u64..10_000, n in 5usize..30, p in 1usize..12, scale in 0.01f64..1.0) {
        let x = normal_matrix(n, p, seed, 0);
        let y = normal_matrix(n, 1, seed, 1).column(0).into_owned() * 3.0;
        let top = (0..p).map(|j| x.column(j).dot(&y).abs()).fold(0.0, f64::max);
        let lambda = (scale * top).max(1e-3);
        let fit = lasso_fit(&y, &x, lambda).unwrap();
        let residual = &y - &x * DVector::from_column_slice(&fit.coefficients);
        for j in 0..p {
            let g = x.column(j).dot(&residual);
            prop_assert!(g.abs() <= lambda + 1e-6);
            if fit.coefficients[j] != 0.0 {
                prop_assert!((g - lambda * fit.coefficients[j].signum()).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn cv_is_seeded() {
    let x = normal_matrix(30, 6, 4, 0);
    let y = x.column(0) * 1.5 + normal_matrix(30, 1, 4, 1).column(0);
    let a = lasso_cv(&y, &x, 5, 9).unwrap();
    let b = lasso_cv(&y, &x, 5, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.coefficients[0] > 0.5);
}

#[test]
fn leave_one_out_folds_are_accepted() {
    let x = normal_matrix(12, 3, 2, 0);
    let y = x.column(1) * 2.0 + normal_matrix(12, 1, 2, 1).column(0);
    assert!(lasso_cv(&y, &x, 11, 1).is_ok());
    assert!(lasso_cv(&y, &x, 12, 1).is_ok());
    assert!(lasso_cv(&y, &x, 13, 1).unwrap_err().is_configuration());
}

#[test]
fn expanding_path_needs_room_for_cv() {
    let data = Dataset::new(DVector::zeros(5), normal_matrix(5, 2, 1, 0), None).unwrap();
    assert!(lasso_expanding_path(&data, 10, 1).unwrap_err().is_configuration());
    assert_eq!(expanding_start(10), 20);
    assert_eq!(expanding_start(15), 25);
}

#[test]
fn expanding_path_stabilises_under_a_constant_signal() {
    let horizon = 100;
    let x = normal_matrix(horizon, 3, 8, 0);
    let beta = DVector::from_vec(vec![3.0, -2.0, 0.0]);
    let y = &x * &beta + normal_matrix(horizon, 1, 8, 1).column(0);
    let data = Dataset::new(y, x, None).unwrap();
    let path = lasso_expanding_path(&data, 10, 5).unwrap();
    let first = expanding_start(10);
    for t in 1..first {
        assert_eq!(path.state(t), path.state(first));
    }
    assert!(path.beta0.iter().all(|b| *b == 0.0));
    for t in horizon / 2 + 1..=horizon {
        let change = (path.state(t) - path.state(t - 1)).amax();
        assert!(change < 0.1, "t = {t}: {change}");
    }
    assert!((path.at(horizon, 0) - 3.0).abs() < 0.5);
}

#[test]
fn expanding_path_on_noise_is_mostly_zero() {
    let horizon = 60;
    let x = normal_matrix(horizon, 5, 13, 0);
    let y = normal_matrix(horizon, 1, 13, 1).column(0).into_owned();
    let data = Dataset::new(y, x, None).unwrap();
    let path = lasso_expanding_path(&data, 10, 3).unwrap();
    let zeros = path.coefficients.iter().filter(|b| **b == 0.0).count();
    let fraction = zeros as f64 / path.coefficients.len() as f64;
    assert!(fraction >= 0.9, "zero fraction {fraction}");
}

#[test]
fn dlm_normal_equations_hold() {
    let horizon = 25;
    let p = 3;
    let x = normal_matrix(horizon, p, 6, 0);
    let y = normal_matrix(horizon, 1, 6, 1).column(0) * 2.0;
    let data = Dataset::new(y.clone(), x.clone(), None).unwrap();
    let (phi, lambda1) = (0.9, 0.4);
    let path = dlm_fit(&data, phi, lambda1).unwrap();
    // dense assembly of the same quadratic objective, states ordered (β_0, ..., β_T)
    let n = p * (horizon + 1);
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for j in 0..p {
        h[(j, j)] += (1.0 - phi * phi) / lambda1;
    }
    for t in 1..=horizon {
        let (cur, prev) = (t * p, (t - 1) * p);
        for j in 0..p {
            h[(cur + j, cur + j)] += 1.0 / lambda1;
            h[(prev + j, prev + j)] += phi * phi / lambda1;
            h[(cur + j, prev + j)] -= phi / lambda1;
            h[(prev + j, cur + j)] -= phi / lambda1;
            b[cur + j] += x[(t - 1, j)] * y[t - 1];
            for k in 0..p {
                h[(cur + j, cur + k)] += x[(t - 1, j)] * x[(t - 1, k)];
            }
        }
    }
    let mut state = DVector::<f64>::zeros(n);
    for t in 0..=horizon {
        for j in 0..p {
            state[t * p + j] = path.at(t, j);
        }
    }
    let residual = (&h * &state - &b).amax();
    assert!(residual < 1e-8, "{residual}");
}
