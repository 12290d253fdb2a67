//! Potential-outcome and principal-stratum domain types.
//!
//! Every subject carries two potential recruitment statuses `(R(1), R(0))`;
//! the pair is the subject's principal stratum. Under monotonicity
//! (`R(1) >= R(0)`) the defiant stratum is empty, so recruited control
//! subjects are always-recruited and recruited treated subjects are a mix of
//! always- and compliant-recruited.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the stratum-probability normalization.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrincipalStratum {
    /// `(1, 1)`: recruited under either assignment.
    AlwaysRecruited,
    /// `(1, 0)`: recruited only if the cluster is treated.
    CompliantRecruited,
    /// `(0, 0)`: never recruited.
    NeverRecruited,
    /// `(0, 1)`: recruited only under control. Ruled out by monotonicity.
    DefiantRecruited,
}

impl PrincipalStratum {
    pub const ALL: [PrincipalStratum; 4] = [
        PrincipalStratum::AlwaysRecruited,
        PrincipalStratum::CompliantRecruited,
        PrincipalStratum::NeverRecruited,
        PrincipalStratum::DefiantRecruited,
    ];

    /// The defining pair `(R(1), R(0))`.
    pub fn recruitment_pair(self) -> (u8, u8) {
        match self {
            PrincipalStratum::AlwaysRecruited => (1, 1),
            PrincipalStratum::CompliantRecruited => (1, 0),
            PrincipalStratum::NeverRecruited => (0, 0),
            PrincipalStratum::DefiantRecruited => (0, 1),
        }
    }

    pub fn code(self) -> char {
        match self {
            PrincipalStratum::AlwaysRecruited => 'a',
            PrincipalStratum::CompliantRecruited => 'c',
            PrincipalStratum::NeverRecruited => 'n',
            PrincipalStratum::DefiantRecruited => 'd',
        }
    }
}

impl fmt::Display for PrincipalStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for PrincipalStratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(PrincipalStratum::AlwaysRecruited),
            "c" => Ok(PrincipalStratum::CompliantRecruited),
            "n" => Ok(PrincipalStratum::NeverRecruited),
            "d" => Ok(PrincipalStratum::DefiantRecruited),
            other => Err(Error::InvalidParameter(format!(
                "unknown stratum code {other:?}"
            ))),
        }
    }
}

/// Recruitment status `R(z)` of a subject in `stratum` whose cluster has assignment `z`.
pub fn recruitment_status(stratum: PrincipalStratum, z: u8) -> u8 {
    debug_assert!(z <= 1);
    let (r1, r0) = stratum.recruitment_pair();
    if z == 1 {
        r1
    } else {
        r0
    }
}

/// True iff no subject is defiant-recruited.
pub fn check_monotonicity(population: &[Subject]) -> bool {
    population
        .iter()
        .all(|s| s.stratum != PrincipalStratum::DefiantRecruited)
}

/// Marginal principal-stratum probabilities. The defiant mass is structurally zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataDistribution {
    p_a: f64,
    p_c: f64,
    p_n: f64,
}

impl StrataDistribution {
    pub fn new(p_a: f64, p_c: f64, p_n: f64) -> Result<Self> {
        for (name, p) in [("p_a", p_a), ("p_c", p_c), ("p_n", p_n)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        let sum = p_a + p_c + p_n;
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self { p_a, p_c, p_n })
    }

    /// Builds a distribution from `(p_a, p_c)`, with `p_n` taking the remainder.
    pub fn from_recruitable(p_a: f64, p_c: f64) -> Result<Self> {
        Self::new(p_a, p_c, (1.0 - p_a - p_c).max(0.0))
    }

    pub fn from_counts(n_a: usize, n_c: usize, n_n: usize) -> Result<Self> {
        let total = n_a + n_c + n_n;
        if total == 0 {
            return Err(Error::InvalidParameter("no subjects to count".into()));
        }
        let t = total as f64;
        let p_a = n_a as f64 / t;
        let p_c = n_c as f64 / t;
        // p_n by subtraction keeps the sum at exactly 1
        Self::new(p_a, p_c, 1.0 - p_a - p_c)
    }

    /// Empirical stratum shares of a population. Fails if any subject is defiant.
    pub fn from_population(population: &[Subject]) -> Result<Self> {
        let mut counts = [0usize; 3];
        for s in population {
            match s.stratum {
                PrincipalStratum::AlwaysRecruited => counts[0] += 1,
                PrincipalStratum::CompliantRecruited => counts[1] += 1,
                PrincipalStratum::NeverRecruited => counts[2] += 1,
                PrincipalStratum::DefiantRecruited => {
                    return Err(Error::InvalidParameter(
                        "defiant-recruited subject violates monotonicity".into(),
                    ))
                }
            }
        }
        Self::from_counts(counts[0], counts[1], counts[2])
    }

    pub fn p_a(&self) -> f64 {
        self.p_a
    }

    pub fn p_c(&self) -> f64 {
        self.p_c
    }

    pub fn p_n(&self) -> f64 {
        self.p_n
    }

    pub fn p_d(&self) -> f64 {
        0.0
    }

    pub fn prob(&self, stratum: PrincipalStratum) -> f64 {
        match stratum {
            PrincipalStratum::AlwaysRecruited => self.p_a,
            PrincipalStratum::CompliantRecruited => self.p_c,
            PrincipalStratum::NeverRecruited => self.p_n,
            PrincipalStratum::DefiantRecruited => 0.0,
        }
    }
}

/// Stratum-specific average treatment effects `tau_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalEffects {
    pub tau_a: f64,
    pub tau_c: f64,
    /// Unknown in the simulation study; the overall ATE needs it.
    pub tau_n: Option<f64>,
}

impl PrincipalEffects {
    pub fn new(tau_a: f64, tau_c: f64, tau_n: Option<f64>) -> Self {
        Self {
            tau_a,
            tau_c,
            tau_n,
        }
    }

    pub fn homogeneous(tau: f64) -> Self {
        Self::new(tau, tau, Some(tau))
    }
}

/// How clusters are assigned to the intervention arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    /// Exactly `n_treated` clusters chosen uniformly at random.
    Fixed { n_treated: usize },
    /// Each cluster treated independently with probability `prob`.
    Bernoulli { prob: f64 },
}

/// Which eligible subjects are enrolled in each cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recruitment {
    /// Everyone with `R(z) = 1` is recruited.
    AllEligible,
    /// A uniform sample of fixed size from the eligible pool.
    Quota(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    n_clusters: usize,
    cluster_size: usize,
    assignment: Assignment,
    recruitment: Recruitment,
}

impl TrialDesign {
    /// `n_treated` of `n_clusters` clusters randomized to intervention.
    pub fn fixed(
        n_clusters: usize,
        n_treated: usize,
        cluster_size: usize,
        recruitment: Recruitment,
    ) -> Result<Self> {
        if n_clusters < 2 || n_treated == 0 || n_treated >= n_clusters {
            return Err(Error::InfeasibleAssignment {
                n_clusters,
                n_treated,
            });
        }
        Self::validated(
            n_clusters,
            cluster_size,
            Assignment::Fixed { n_treated },
            recruitment,
        )
    }

    pub fn bernoulli(
        n_clusters: usize,
        prob: f64,
        cluster_size: usize,
        recruitment: Recruitment,
    ) -> Result<Self> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "randomization probability {prob} outside (0, 1)"
            )));
        }
        if n_clusters == 0 {
            return Err(Error::InvalidParameter("need at least one cluster".into()));
        }
        Self::validated(
            n_clusters,
            cluster_size,
            Assignment::Bernoulli { prob },
            recruitment,
        )
    }

    fn validated(
        n_clusters: usize,
        cluster_size: usize,
        assignment: Assignment,
        recruitment: Recruitment,
    ) -> Result<Self> {
        if cluster_size == 0 {
            return Err(Error::InvalidParameter(
                "cluster_size must be positive".into(),
            ));
        }
        if let Recruitment::Quota(q) = recruitment {
            if q == 0 || q > cluster_size {
                return Err(Error::InvalidParameter(format!(
                    "quota {q} must lie in [1, cluster_size = {cluster_size}]"
                )));
            }
        }
        Ok(Self {
            n_clusters,
            cluster_size,
            assignment,
            recruitment,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_size(&self) -> usize {
        self.cluster_size
    }

    pub fn n_subjects(&self) -> usize {
        self.n_clusters * self.cluster_size
    }

    pub fn assignment(&self) -> Assignment {
        self.assignment
    }

    pub fn recruitment(&self) -> Recruitment {
        self.recruitment
    }

    pub fn n_treated(&self) -> Option<usize> {
        match self.assignment {
            Assignment::Fixed { n_treated } => Some(n_treated),
            Assignment::Bernoulli { .. } => None,
        }
    }

    /// `r = P(Z = 1)`; equals `m / I` under fixed allocation.
    pub fn randomization_prob(&self) -> f64 {
        match self.assignment {
            Assignment::Fixed { n_treated } => n_treated as f64 / self.n_clusters as f64,
            Assignment::Bernoulli { prob } => prob,
        }
    }

    pub fn quota(&self) -> Option<usize> {
        match self.recruitment {
            Recruitment::Quota(q) => Some(q),
            Recruitment::AllEligible => None,
        }
    }
}

/// One member of the (latent) cluster population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub cluster_id: usize,
    pub x1: f64,
    pub x2: u8,
    pub stratum: PrincipalStratum,
    pub y1: Option<f64>,
    pub y0: Option<f64>,
}

impl Subject {
    pub fn recruitment_status(&self, z: u8) -> u8 {
        recruitment_status(self.stratum, z)
    }

    pub fn individual_effect(&self) -> Option<f64> {
        Some(self.y1? - self.y0?)
    }
}

/// Observed data row of a recruited subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub y: f64,
    pub z: u8,
    pub x1: f64,
    pub x2: u8,
    pub cluster_id: usize,
}

/// The analysis dataset: recruited subjects only, with optional hidden strata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecruitedSample {
    pub rows: Vec<Row>,
    pub truth: Option<Vec<PrincipalStratum>>,
}

impl RecruitedSample {
    pub fn new(rows: Vec<Row>) -> Self {
        Self { rows, truth: None }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cluster ids mapped to their (shared) assignment.
    pub fn cluster_arms(&self) -> Result<BTreeMap<usize, u8>> {
        let mut arms = BTreeMap::new();
        for row in &self.rows {
            if row.z > 1 {
                return Err(Error::InvalidParameter(format!(
                    "z = {} is not binary",
                    row.z
                )));
            }
            let z = *arms.entry(row.cluster_id).or_insert(row.z);
            if z != row.z {
                return Err(Error::InvalidParameter(format!(
                    "cluster {} mixes assignments",
                    row.cluster_id
                )));
            }
        }
        Ok(arms)
    }

    pub fn arm_sizes(&self) -> (usize, usize) {
        let n1 = self.rows.iter().filter(|r| r.z == 1).count();
        (self.rows.len() - n1, n1)
    }

    /// Writes `cluster_id,z,x1,x2,y[,stratum_truth]`.
    pub fn write_csv<W: std::io::Write>(&self, out: W, reveal_truth: bool) -> Result<()> {
        let truth = match (reveal_truth, &self.truth) {
            (true, Some(t)) => Some(t),
            (true, None) => {
                return Err(Error::InvalidParameter(
                    "sample carries no stratum truth".into(),
                ))
            }
            (false, _) => None,
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cluster_id", "z", "x1", "x2", "y"];
        if truth.is_some() {
            header.push("stratum_truth");
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![
                row.cluster_id.to_string(),
                row.z.to_string(),
                row.x1.to_string(),
                row.x2.to_string(),
                row.y.to_string(),
            ];
            if let Some(t) = truth {
                rec.push(t[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
