//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use psbias::model::RecruitedSample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct DenseFit {
    pub beta: DVector<f64>,
    pub sigma_eps_sq: f64,
    pub cov_beta: DMatrix<f64>,
    pub reml_loglik: f64,
}

/// Profiled REML for `y = X b + Z u + e` with `Var(y) = s2 (I + theta Z Z')`,
/// computed from the explicit N x N covariance.
pub fn dense_reml(theta: f64, x: &DMatrix<f64>, y: &DVector<f64>, ids: &[usize]) -> DenseFit {
    let (n, p) = x.shape();
    let v = DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) + if ids[i] == ids[j] { theta } else { 0.0 }
    });
    let v_inv = v.clone().try_inverse().expect("V invertible");
    let a = x.transpose() * &v_inv * x;
    let a_inv = a.clone().try_inverse().expect("X'V^-1X invertible");
    let beta = &a_inv * x.transpose() * &v_inv * y;
    let resid = y - x * &beta;
    let rss = (resid.transpose() * &v_inv * &resid)[(0, 0)];
    let dof = (n - p) as f64;
    let s2 = rss / dof;
    // unprofiled REML at the maximizing s2
    let full_v = &v * s2;
    let full_a = x.transpose() * full_v.clone().try_inverse().unwrap() * x;
    let quad = rss / s2;
    let reml_loglik = -0.5
        * (full_v.determinant().ln()
            + full_a.determinant().ln()
            + quad
            + dof * (2.0 * std::f64::consts::PI).ln());
    DenseFit {
        cov_beta: a_inv * s2,
        beta,
        sigma_eps_sq: s2,
        reml_loglik,
    }
}

pub struct Ols {
    pub beta: DVector<f64>,
    pub se: DVector<f64>,
    pub sigma_sq: f64,
}

pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Ols {
    let (n, p) = x.shape();
    let beta = x
        .clone()
        .svd(true, true)
        .solve(y, 1e-14)
        .expect("full rank");
    let resid = y - x * &beta;
    let sigma_sq = resid.norm_squared() / (n - p) as f64;
    let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
    let se = DVector::from_fn(p, |j, _| (sigma_sq * xtx_inv[(j, j)]).sqrt());
    Ols { beta, se, sigma_sq }
}

/// Design `[1, z, x1, x2]` (or `[1, z]`), response and cluster ids of a sample.
pub fn design_of(
    sample: &RecruitedSample,
    adjust: bool,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let n = sample.len();
    let p = if adjust { 4 } else { 2 };
    let x = DMatrix::from_fn(n, p, |i, j| {
        let r = &sample.rows[i];
        [1.0, r.z as f64, r.x1, r.x2 as f64][j]
    });
    let y = DVector::from_iterator(n, sample.rows.iter().map(|r| r.y));
    let ids = sample.rows.iter().map(|r| r.cluster_id).collect();
    (x, y, ids)
}

/// Random unbalanced clustered regression problem with `n <= max_n` rows.
pub fn random_problem(seed: u64, max_n: usize) -> (DMatrix<f64>, DVector<f64>, Vec<usize>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_clusters = rng.random_range(2..=8);
    let n = rng.random_range(n_clusters.max(6)..=max_n);
    let mut ids: Vec<usize> = (0..n)
        .map(|i| {
            if i < n_clusters {
                i
            } else {
                rng.random_range(0..n_clusters)
            }
        })
        .collect();
    ids.sort_unstable();
    let p = rng.random_range(1..=3);
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    let gamma: Vec<f64> = (0..n_clusters)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y = DVector::from_fn(n, |i, _| {
        0.5 * x[(i, p - 1)] + gamma[ids[i]] + rng.sample::<f64, _>(StandardNormal)
    });
    let theta = match rng.random_range(0..4) {
        0 => 0.0,
        1 => 10f64.powf(rng.random_range(-6.0..-1.0)),
        2 => rng.random_range(0.01..3.0),
        _ => 10f64.powf(rng.random_range(1.0..5.0)),
    };
    (x, y, ids, theta)
}

/// Relative difference scaled by `max(1, |b|)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
