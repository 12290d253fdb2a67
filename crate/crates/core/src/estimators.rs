//! Analysis methods for the recruited sample: the unadjusted ITT contrast and a
//! random-intercept linear mixed model fitted by REML.
//!
//! For cluster `i` with `n_i` rows the marginal covariance is
//! `sigma_eps^2 (I + theta J)` with `theta = sigma_gamma^2 / sigma_eps^2`. Its
//! inverse is `(I - c_i J) / sigma_eps^2` with `c_i = theta / (1 + n_i theta)`,
//! so every GLS cross-product is the OLS one minus a rank-one correction per
//! cluster built from the cluster column sums. The restricted likelihood is
//! then profiled over the fixed effects and `sigma_eps^2`, leaving a smooth
//! function of `theta` alone that is maximized by grid search plus Brent.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RecruitedSample;
use crate::optimize::grid_then_brent;

/// Two-sided 95% standard normal critical value.
pub const Z_975: f64 = 1.959_963_984_540_054;

pub const THETA_MAX: f64 = 1e6;
pub const THETA_XTOL: f64 = 1e-8;
const MAX_ITER: usize = 500;

/// Difference in mean outcome between recruited treated and control rows.
pub fn itt_estimate(sample: &RecruitedSample) -> Result<f64> {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for row in &sample.rows {
        if row.z == 1 {
            s1 += row.y;
            n1 += 1;
        } else {
            s0 += row.y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedEstimate(format!(
            "empty arm ({n1} treated, {n0} control rows)"
        )));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

#[derive(Debug, Clone)]
struct ClusterStats {
    n: f64,
    sum_x: DVector<f64>,
    sum_y: f64,
}

/// Sufficient statistics of a random-intercept model, grouped by cluster.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    n_obs: usize,
    n_fixed: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    clusters: Vec<ClusterStats>,
}

/// GLS solution at a fixed variance ratio.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub theta: f64,
    pub beta: DVector<f64>,
    /// `(X' H^-1 X)^-1`; multiply by `sigma_eps_sq` for the covariance of `beta`.
    pub unscaled_cov: DMatrix<f64>,
    pub sigma_eps_sq: f64,
    pub reml_loglik: f64,
}

impl RemlProblem {
    pub fn new(design: &DMatrix<f64>, y: &DVector<f64>, cluster_ids: &[usize]) -> Result<Self> {
        let (n_obs, n_fixed) = design.shape();
        if y.len() != n_obs || cluster_ids.len() != n_obs {
            return Err(Error::InvalidParameter(format!(
                "dimension mismatch: X is {n_obs}x{n_fixed}, y has {}, clusters {}",
                y.len(),
                cluster_ids.len()
            )));
        }
        if n_obs <= n_fixed {
            return Err(Error::UndefinedEstimate(format!(
                "{n_obs} observations for {n_fixed} fixed effects"
            )));
        }
        if design.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite data".into()));
        }

        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut clusters: Vec<ClusterStats> = Vec::new();
        for (row, &id) in cluster_ids.iter().enumerate() {
            let g = *index.entry(id).or_insert_with(|| {
                clusters.push(ClusterStats {
                    n: 0.0,
                    sum_x: DVector::zeros(n_fixed),
                    sum_y: 0.0,
                });
                clusters.len() - 1
            });
            let c = &mut clusters[g];
            c.n += 1.0;
            c.sum_x += design.row(row).transpose();
            c.sum_y += y[row];
        }

        let xtx = design.tr_mul(design);
        check_full_rank(&xtx)?;
        Ok(Self {
            n_obs,
            n_fixed,
            xty: design.tr_mul(y),
            yty: y.dot(y),
            xtx,
            clusters,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Profiled GLS fit at variance ratio `theta`.
    pub fn gls(&self, theta: f64) -> Result<GlsFit> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "theta = {theta} must be finite and >= 0"
            )));
        }
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut yhy = self.yty;
        let mut log_det_h = 0.0;
        for c in &self.clusters {
            let denom = 1.0 + c.n * theta;
            let ci = theta / denom;
            a.ger(-ci, &c.sum_x, &c.sum_x, 1.0);
            b.axpy(-ci * c.sum_y, &c.sum_x, 1.0);
            yhy -= ci * c.sum_y * c.sum_y;
            log_det_h += denom.ln();
        }
        let chol = a.cholesky().ok_or(Error::SingularDesign)?;
        let beta = chol.solve(&b);
        let rss = yhy - beta.dot(&b);
        let dof = (self.n_obs - self.n_fixed) as f64;
        if rss.is_nan() || rss <= 0.0 {
            return Err(Error::UndefinedEstimate("zero residual variance".into()));
        }
        let sigma_eps_sq = rss / dof;
        let log_det_a: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let reml_loglik = -0.5
            * (dof * sigma_eps_sq.ln()
                + log_det_h
                + log_det_a
                + dof * (1.0 + (2.0 * std::f64::consts::PI).ln()));
        Ok(GlsFit {
            theta,
            unscaled_cov: chol.inverse(),
            beta,
            sigma_eps_sq,
            reml_loglik,
        })
    }

    /// Profiled restricted log-likelihood; `-inf` where it is undefined.
    pub fn profile(&self, theta: f64) -> f64 {
        self.gls(theta)
            .map(|f| f.reml_loglik)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Analytic derivative of [`RemlProblem::profile`] with respect to `theta`.
    ///
    /// `d(I + theta J)^-1 / d theta = -J / (1 + n theta)^2` per cluster; the
    /// fixed effects drop out of the residual-sum-of-squares derivative
    /// because they are at their GLS optimum.
    pub fn gradient(&self, theta: f64) -> Result<f64> {
        let fit = self.gls(theta)?;
        let dof = (self.n_obs - self.n_fixed) as f64;
        let rss = fit.sigma_eps_sq * dof;
        let (mut d_rss, mut d_log_det_h, mut d_log_det_a) = (0.0, 0.0, 0.0);
        for c in &self.clusters {
            let denom = 1.0 + c.n * theta;
            let k = 1.0 / (denom * denom);
            let resid_sum = c.sum_y - c.sum_x.dot(&fit.beta);
            d_rss -= k * resid_sum * resid_sum;
            d_log_det_h += c.n / denom;
            d_log_det_a -= k * (&fit.unscaled_cov * &c.sum_x).dot(&c.sum_x);
        }
        Ok(-0.5 * (dof * d_rss / rss + d_log_det_h + d_log_det_a))
    }

    /// REML estimate of `theta` on `[0, THETA_MAX]`.
    pub fn maximize(&self) -> ThetaSolution {
        let grid: Vec<f64> = std::iter::once(0.0)
            .chain((0..96).map(|k| 10f64.powf(-6.0 + k as f64 / 8.0)))
            .chain(std::iter::once(THETA_MAX))
            .collect();
        let best = grid_then_brent(|t| self.profile(t), &grid, THETA_XTOL, MAX_ITER);
        ThetaSolution {
            theta: best.x,
            reml_loglik: best.fx,
            converged: best.converged && best.fx.is_finite(),
            n_iterations: best.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSolution {
    pub theta: f64,
    pub reml_loglik: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

fn check_full_rank(xtx: &DMatrix<f64>) -> Result<()> {
    // scale to unit diagonal so the pivot test is independent of column units
    let p = xtx.nrows();
    let d: Vec<f64> = (0..p).map(|i| xtx[(i, i)]).collect();
    if d.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::SingularDesign);
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| xtx[(i, j)] / (d[i] * d[j]).sqrt());
    let chol = scaled.cholesky().ok_or(Error::SingularDesign)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    if min_pivot < 1e-7 {
        return Err(Error::SingularDesign);
    }
    Ok(())
}

/// Profiled restricted log-likelihood of the random-intercept model at `theta`.
pub fn reml_profile(
    theta: f64,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    cluster_ids: &[usize],
) -> Result<f64> {
    RemlProblem::new(design, y, cluster_ids)?
        .gls(theta)
        .map(|f| f.reml_loglik)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// All fixed effects, in design order `[1, z, x1, x2]` (or `[1, z]`).
    pub beta: Vec<f64>,
    pub beta_covariates: Vec<f64>,
    pub theta_hat: f64,
    pub sigma_gamma_sq_hat: f64,
    pub sigma_eps_sq_hat: f64,
    pub icc_hat: f64,
    pub reml_loglik: f64,
    /// `d loglik / d theta` at the solution.
    pub score: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

impl FitResult {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

struct Prepared {
    problem: RemlProblem,
    y_shift: f64,
}

fn prepare(sample: &RecruitedSample, adjust_covariates: bool) -> Result<Prepared> {
    let arms = sample.cluster_arms()?;
    let treated = arms.values().filter(|&&z| z == 1).count();
    let control = arms.len() - treated;
    if treated < 2 || control < 2 {
        return Err(Error::UndefinedEstimate(format!(
            "need >= 2 clusters per arm ({treated} treated, {control} control)"
        )));
    }
    let p = if adjust_covariates { 4 } else { 2 };
    let n = sample.len();
    // center y so large offsets do not cancel in y' H^-1 y; the intercept absorbs the shift
    let y_shift = sample.rows.iter().map(|r| r.y).sum::<f64>() / n as f64;
    let design = DMatrix::from_fn(n, p, |i, j| {
        let r = &sample.rows[i];
        match j {
            0 => 1.0,
            1 => r.z as f64,
            2 => r.x1,
            _ => r.x2 as f64,
        }
    });
    let y = DVector::from_iterator(n, sample.rows.iter().map(|r| r.y - y_shift));
    let ids: Vec<usize> = sample.rows.iter().map(|r| r.cluster_id).collect();
    Ok(Prepared {
        problem: RemlProblem::new(&design, &y, &ids)?,
        y_shift,
    })
}

fn finish(prep: &Prepared, fit: GlsFit, converged: bool, n_iterations: usize) -> Result<FitResult> {
    let mut beta: Vec<f64> = fit.beta.iter().copied().collect();
    beta[0] += prep.y_shift;
    let tau_hat = beta[1];
    let se = (fit.sigma_eps_sq * fit.unscaled_cov[(1, 1)]).sqrt();
    let sigma_gamma_sq_hat = fit.theta * fit.sigma_eps_sq;
    let score = prep.problem.gradient(fit.theta)?;
    Ok(FitResult {
        tau_hat,
        se,
        ci_low: tau_hat - Z_975 * se,
        ci_high: tau_hat + Z_975 * se,
        beta_covariates: beta[2..].to_vec(),
        beta,
        theta_hat: fit.theta,
        sigma_gamma_sq_hat,
        sigma_eps_sq_hat: fit.sigma_eps_sq,
        icc_hat: fit.theta / (1.0 + fit.theta),
        reml_loglik: fit.reml_loglik,
        score,
        converged,
        n_iterations,
    })
}

/// REML fit of `y ~ 1 + z [+ x1 + x2] + (1 | cluster)`.
///
/// `tau_hat` is the coefficient of `z`, with a model-based standard error and a
/// Wald 95% interval. A `converged = false` result still carries the best
/// point found.
pub fn fit_lmm(sample: &RecruitedSample, adjust_covariates: bool) -> Result<FitResult> {
    let prep = prepare(sample, adjust_covariates)?;
    let sol = prep.problem.maximize();
    let fit = prep.problem.gls(sol.theta)?;
    finish(&prep, fit, sol.converged, sol.n_iterations)
}

/// GLS fit with the variance ratio held at `theta` (no search).
pub fn fit_lmm_at(
    sample: &RecruitedSample,
    adjust_covariates: bool,
    theta: f64,
) -> Result<FitResult> {
    let prep = prepare(sample, adjust_covariates)?;
    let fit = prep.problem.gls(theta)?;
    finish(&prep, fit, true, 0)
}
