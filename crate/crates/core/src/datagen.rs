//! Synthetic cluster-trial populations with post-randomization recruitment.
//!
//! Pipeline per replicate, each stage on its own substream:
//!
//! 1. covariates: `x1 ~ N(mu_i, 1)` with cluster mean `mu_i ~ N(0, 1)`, `x2 ~ Bernoulli(0.4)`
//! 2. strata: three-category multinomial logit with never-recruited as reference
//! 3. assignment: exactly `m` of `I` clusters (or Bernoulli(r)) get `z = 1`
//! 4. recruitment: a uniform quota from `{a, c}` in treated clusters, `{a}` in control
//! 5. outcomes: stratum-specific mean structure plus random intercept and noise

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_monotonicity, recruitment_status, Assignment, PrincipalStratum, RecruitedSample,
    Recruitment, Row, StrataDistribution, Subject, TrialDesign,
};
use crate::rng::{Stage, StreamRng, Substreams};

pub const X2_PROB: f64 = 0.4;

/// Multinomial-logit model for stratum membership given `(x1, x2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataLogitModel {
    pub beta_a0: f64,
    pub beta_a1: [f64; 2],
    pub beta_c0: f64,
    pub beta_c1: [f64; 2],
}

impl StrataLogitModel {
    /// Coefficients giving marginal shares close to `(p_n, p_a, p_c) = (0.3, 0.4, 0.3)`.
    pub fn table1() -> Self {
        Self {
            beta_a0: 0.3,
            beta_a1: [0.2, 0.1],
            beta_c0: 0.1,
            beta_c1: [0.2, -0.1],
        }
    }

    pub fn from_arrays(beta_a: [f64; 3], beta_c: [f64; 3]) -> Result<Self> {
        if beta_a.iter().chain(beta_c.iter()).any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "logit coefficients must be finite".into(),
            ));
        }
        Ok(Self {
            beta_a0: beta_a[0],
            beta_a1: [beta_a[1], beta_a[2]],
            beta_c0: beta_c[0],
            beta_c1: [beta_c[1], beta_c[2]],
        })
    }

    /// `(p_a, p_c, p_n)` at covariate value `(x1, x2)`.
    pub fn probabilities(&self, x1: f64, x2: f64) -> [f64; 3] {
        let eta_a = self.beta_a0 + self.beta_a1[0] * x1 + self.beta_a1[1] * x2;
        let eta_c = self.beta_c0 + self.beta_c1[0] * x1 + self.beta_c1[1] * x2;
        // shift by the max linear predictor so exp never overflows
        let shift = eta_a.max(eta_c).max(0.0);
        let ea = (eta_a - shift).exp();
        let ec = (eta_c - shift).exp();
        let en = (-shift).exp();
        let total = ea + ec + en;
        [ea / total, ec / total, en / total]
    }

    pub fn draw<R: Rng + ?Sized>(&self, x1: f64, x2: f64, rng: &mut R) -> PrincipalStratum {
        let [p_a, p_c, _] = self.probabilities(x1, x2);
        let u: f64 = rng.random();
        if u < p_a {
            PrincipalStratum::AlwaysRecruited
        } else if u < p_a + p_c {
            PrincipalStratum::CompliantRecruited
        } else {
            PrincipalStratum::NeverRecruited
        }
    }

    /// Marginal stratum shares, integrating the category probabilities over the
    /// covariate distribution with `n_draws` Monte Carlo draws.
    pub fn marginal_distribution(
        &self,
        n_draws: usize,
        rng: &mut StreamRng,
    ) -> Result<StrataDistribution> {
        if n_draws == 0 {
            return Err(Error::InvalidParameter("n_draws must be positive".into()));
        }
        let (mut sa, mut sc) = (0.0, 0.0);
        for _ in 0..n_draws {
            let mu: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let x2 = if rng.random_bool(X2_PROB) { 1.0 } else { 0.0 };
            let [pa, pc, _] = self.probabilities(mu + e, x2);
            sa += pa;
            sc += pc;
        }
        let n = n_draws as f64;
        let (p_a, p_c) = (sa / n, sc / n);
        StrataDistribution::new(p_a, p_c, 1.0 - p_a - p_c)
    }
}

/// Random-intercept outcome model for always- and compliant-recruited subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub mu_a: f64,
    pub mu_c: f64,
    pub tau_a: f64,
    pub tau_c: f64,
    pub lambda_a: [f64; 2],
    pub lambda_c: [f64; 2],
    pub sigma_gamma_sq: f64,
    pub sigma_eps_sq: f64,
}

impl OutcomeModel {
    /// Splits unit total variance so that `sigma_gamma_sq / (sigma_gamma_sq + sigma_eps_sq) = icc`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_icc(
        mu_a: f64,
        mu_c: f64,
        tau_a: f64,
        tau_c: f64,
        lambda_a: [f64; 2],
        lambda_c: [f64; 2],
        icc: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&icc) {
            return Err(Error::InvalidParameter(format!("icc {icc} outside [0, 1)")));
        }
        let m = Self {
            mu_a,
            mu_c,
            tau_a,
            tau_c,
            lambda_a,
            lambda_c,
            sigma_gamma_sq: icc,
            sigma_eps_sq: 1.0 - icc,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mu_a,
            self.mu_c,
            self.tau_a,
            self.tau_c,
            self.lambda_a[0],
            self.lambda_a[1],
            self.lambda_c[0],
            self.lambda_c[1],
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "outcome parameters must be finite".into(),
            ));
        }
        if !(self.sigma_gamma_sq >= 0.0 && self.sigma_gamma_sq.is_finite()) {
            return Err(Error::InvalidParameter(
                "sigma_gamma_sq must be >= 0".into(),
            ));
        }
        if !(self.sigma_eps_sq > 0.0 && self.sigma_eps_sq.is_finite()) {
            return Err(Error::InvalidParameter("sigma_eps_sq must be > 0".into()));
        }
        Ok(())
    }

    pub fn icc(&self) -> f64 {
        self.sigma_gamma_sq / (self.sigma_gamma_sq + self.sigma_eps_sq)
    }

    /// Mean of `Y(z)` for a subject, excluding the random intercept and noise.
    /// `None` for strata that are never recruited.
    pub fn mean(&self, stratum: PrincipalStratum, z: u8, x1: f64, x2: u8) -> Option<f64> {
        let (mu, tau, lambda) = match stratum {
            PrincipalStratum::AlwaysRecruited => (self.mu_a, self.tau_a, self.lambda_a),
            PrincipalStratum::CompliantRecruited => (self.mu_c, self.tau_c, self.lambda_c),
            _ => return None,
        };
        Some(mu + tau * z as f64 + lambda[0] * x1 + lambda[1] * x2 as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub cluster_means: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<u8>,
}

/// Draws covariates for every subject, laid out cluster by cluster.
pub fn gen_covariates(design: &TrialDesign, rng: &mut StreamRng) -> Covariates {
    let (n_clusters, size) = (design.n_clusters(), design.cluster_size());
    let cluster_means: Vec<f64> = (0..n_clusters)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut x1 = Vec::with_capacity(n_clusters * size);
    let mut x2 = Vec::with_capacity(n_clusters * size);
    for &mu in &cluster_means {
        for _ in 0..size {
            let e: f64 = rng.sample(StandardNormal);
            x1.push(mu + e);
            x2.push(rng.random_bool(X2_PROB) as u8);
        }
    }
    Covariates {
        cluster_means,
        x1,
        x2,
    }
}

pub fn assign_strata(
    covariates: &Covariates,
    model: &StrataLogitModel,
    rng: &mut StreamRng,
) -> Vec<PrincipalStratum> {
    covariates
        .x1
        .iter()
        .zip(&covariates.x2)
        .map(|(&x1, &x2)| model.draw(x1, x2 as f64, rng))
        .collect()
}

/// Treatment indicator per cluster.
pub fn randomize_clusters<R: Rng + ?Sized>(design: &TrialDesign, rng: &mut R) -> Result<Vec<u8>> {
    let n = design.n_clusters();
    match design.assignment() {
        Assignment::Fixed { n_treated } => {
            if n_treated == 0 || n_treated >= n {
                return Err(Error::InfeasibleAssignment {
                    n_clusters: n,
                    n_treated,
                });
            }
            let mut z = vec![0u8; n];
            for i in index::sample(rng, n, n_treated) {
                z[i] = 1;
            }
            Ok(z)
        }
        Assignment::Bernoulli { prob } => Ok((0..n).map(|_| rng.random_bool(prob) as u8).collect()),
    }
}

/// What to do when a cluster has fewer eligible subjects than its quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuotaPolicy {
    #[default]
    Strict,
    /// Recruit everyone eligible and flag the cluster.
    Permissive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recruited {
    /// Positions within the cluster, ascending.
    pub selected: Vec<usize>,
    pub short: bool,
}

/// Recruits from one cluster given its assignment `z`.
///
/// Eligible subjects are those with `R(z) = 1`. With a quota, a uniform sample
/// without replacement of that size is drawn from the eligible pool.
pub fn recruit<R: Rng + ?Sized>(
    cluster_id: usize,
    strata: &[PrincipalStratum],
    z: u8,
    recruitment: Recruitment,
    policy: QuotaPolicy,
    rng: &mut R,
) -> Result<Recruited> {
    let eligible: Vec<usize> = strata
        .iter()
        .enumerate()
        .filter(|(_, &s)| recruitment_status(s, z) == 1)
        .map(|(i, _)| i)
        .collect();
    let quota = match recruitment {
        Recruitment::AllEligible => {
            return Ok(Recruited {
                selected: eligible,
                short: false,
            })
        }
        Recruitment::Quota(q) => q,
    };
    if quota == 0 {
        return Err(Error::InvalidParameter("quota must be positive".into()));
    }
    if eligible.len() < quota {
        return match policy {
            QuotaPolicy::Strict => Err(Error::QuotaInfeasible {
                cluster: cluster_id,
                eligible: eligible.len(),
                quota,
            }),
            QuotaPolicy::Permissive => Ok(Recruited {
                selected: eligible,
                short: true,
            }),
        };
    }
    let mut selected: Vec<usize> = index::sample(rng, eligible.len(), quota)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    selected.sort_unstable();
    Ok(Recruited {
        selected,
        short: false,
    })
}

/// Observed and potential outcomes of one recruited subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratedOutcome {
    pub y: f64,
    pub y1: f64,
    pub y0: f64,
}

/// Outcomes for the subjects at `recruited` (indices into `subjects`).
///
/// One random intercept is drawn per cluster (all clusters, in order), then one
/// noise term per recruited subject. Both potential outcomes share the same
/// noise, so `y1 - y0` is exactly the stratum effect.
pub fn gen_outcomes(
    subjects: &[Subject],
    recruited: &[usize],
    z: &[u8],
    model: &OutcomeModel,
    rng: &mut StreamRng,
) -> Result<Vec<GeneratedOutcome>> {
    let sd_gamma = model.sigma_gamma_sq.sqrt();
    let sd_eps = model.sigma_eps_sq.sqrt();
    let gamma: Vec<f64> = (0..z.len())
        .map(|_| sd_gamma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    recruited
        .iter()
        .map(|&idx| {
            let s = &subjects[idx];
            let (m1, m0) = match (
                model.mean(s.stratum, 1, s.x1, s.x2),
                model.mean(s.stratum, 0, s.x1, s.x2),
            ) {
                (Some(m1), Some(m0)) => (m1, m0),
                _ => return Err(Error::NotRecruitable { index: idx }),
            };
            let noise = gamma[s.cluster_id] + sd_eps * rng.sample::<f64, _>(StandardNormal);
            let (y1, y0) = (m1 + noise, m0 + noise);
            let y = if z[s.cluster_id] == 1 { y1 } else { y0 };
            Ok(GeneratedOutcome { y, y1, y0 })
        })
        .collect()
}

/// A full latent population: every subject with covariates and stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub design: TrialDesign,
    pub cluster_means: Vec<f64>,
    pub subjects: Vec<Subject>,
}

impl Population {
    pub fn cluster(&self, cluster_id: usize) -> &[Subject] {
        let size = self.design.cluster_size();
        &self.subjects[cluster_id * size..(cluster_id + 1) * size]
    }

    pub fn strata(&self) -> Vec<PrincipalStratum> {
        self.subjects.iter().map(|s| s.stratum).collect()
    }
}

/// Everything needed to generate one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationModel {
    pub strata: StrataLogitModel,
    pub outcome: OutcomeModel,
    pub design: TrialDesign,
    pub quota_policy: QuotaPolicy,
}

/// One generated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub population: Population,
    pub z: Vec<u8>,
    /// Population indices of recruited subjects, in sample row order.
    pub recruited: Vec<usize>,
    pub sample: RecruitedSample,
    /// Clusters that fell short of their quota (permissive policy only).
    pub short_clusters: Vec<usize>,
}

impl SimulationModel {
    /// Covariates and strata for replicate `replicate`.
    pub fn gen_population(&self, streams: &Substreams, replicate: u64) -> Population {
        let mut cov_rng = streams.stream(Stage::Covariates, replicate);
        let covariates = gen_covariates(&self.design, &mut cov_rng);
        let mut strata_rng = streams.stream(Stage::Strata, replicate);
        let strata = assign_strata(&covariates, &self.strata, &mut strata_rng);
        let size = self.design.cluster_size();
        let subjects = strata
            .into_iter()
            .enumerate()
            .map(|(i, stratum)| Subject {
                cluster_id: i / size,
                x1: covariates.x1[i],
                x2: covariates.x2[i],
                stratum,
                y1: None,
                y0: None,
            })
            .collect();
        Population {
            design: self.design,
            cluster_means: covariates.cluster_means,
            subjects,
        }
    }

    /// Population with both potential outcomes filled in for every `a`/`c` subject.
    pub fn gen_oracle_population(
        &self,
        streams: &Substreams,
        replicate: u64,
    ) -> Result<Population> {
        let mut pop = self.gen_population(streams, replicate);
        let recruitable: Vec<usize> = pop
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.recruitment_status(1) == 1 || s.recruitment_status(0) == 1)
            .map(|(i, _)| i)
            .collect();
        // assignment is irrelevant for potential outcomes; only `y` depends on it
        let z = vec![0u8; self.design.n_clusters()];
        let mut rng = streams.stream(Stage::Outcomes, replicate);
        let outcomes = gen_outcomes(&pop.subjects, &recruitable, &z, &self.outcome, &mut rng)?;
        for (&idx, o) in recruitable.iter().zip(outcomes) {
            pop.subjects[idx].y1 = Some(o.y1);
            pop.subjects[idx].y0 = Some(o.y0);
        }
        Ok(pop)
    }

    /// Full pipeline for replicate `replicate`.
    pub fn simulate(&self, streams: &Substreams, replicate: u64) -> Result<TrialData> {
        let population = self.gen_population(streams, replicate);
        self.simulate_from(population, streams, replicate)
    }

    /// Assignment, recruitment and outcomes on a given population.
    pub fn simulate_from(
        &self,
        population: Population,
        streams: &Substreams,
        replicate: u64,
    ) -> Result<TrialData> {
        debug_assert!(check_monotonicity(&population.subjects));
        let mut assign_rng = streams.stream(Stage::Assignment, replicate);
        let z = randomize_clusters(&self.design, &mut assign_rng)?;

        let mut recruit_rng = streams.stream(Stage::Recruitment, replicate);
        let size = self.design.cluster_size();
        let mut recruited = Vec::new();
        let mut short_clusters = Vec::new();
        for (cluster, &zi) in z.iter().enumerate() {
            let strata: Vec<PrincipalStratum> = population
                .cluster(cluster)
                .iter()
                .map(|s| s.stratum)
                .collect();
            let r = recruit(
                cluster,
                &strata,
                zi,
                self.design.recruitment(),
                self.quota_policy,
                &mut recruit_rng,
            )?;
            if r.short {
                short_clusters.push(cluster);
            }
            recruited.extend(r.selected.into_iter().map(|j| cluster * size + j));
        }

        let mut outcome_rng = streams.stream(Stage::Outcomes, replicate);
        let outcomes = gen_outcomes(
            &population.subjects,
            &recruited,
            &z,
            &self.outcome,
            &mut outcome_rng,
        )?;

        let rows = recruited
            .iter()
            .zip(&outcomes)
            .map(|(&idx, o)| {
                let s = &population.subjects[idx];
                Row {
                    y: o.y,
                    z: z[s.cluster_id],
                    x1: s.x1,
                    x2: s.x2,
                    cluster_id: s.cluster_id,
                }
            })
            .collect();
        let truth = recruited
            .iter()
            .map(|&i| population.subjects[i].stratum)
            .collect();
        Ok(TrialData {
            population,
            z,
            recruited,
            sample: RecruitedSample {
                rows,
                truth: Some(truth),
            },
            short_clusters,
        })
    }
}
