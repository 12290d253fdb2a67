use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stratum probabilities must sum to 1 (got {sum})")]
    NotNormalized { sum: f64 },

    #[error("tau_n required for overall ATE")]
    MissingTauN,

    #[error("degenerate recruitment: nobody is ever recruited (p_a = {p_a}, r * p_c = {rpc})")]
    DegenerateRecruitment { p_a: f64, rpc: f64 },

    #[error("no balancing randomization probability exists when p_a = 0")]
    NoBalancingProbability,

    #[error("quota infeasible in cluster {cluster}: {eligible} eligible subjects, quota {quota}")]
    QuotaInfeasible {
        cluster: usize,
        eligible: usize,
        quota: usize,
    },

    #[error("infeasible treated cluster count {n_treated} for {n_clusters} clusters")]
    InfeasibleAssignment { n_clusters: usize, n_treated: usize },

    #[error("subject {index} is never-recruited or defiant and cannot carry a recruited outcome")]
    NotRecruitable { index: usize },

    #[error("subject {index} lacks potential outcomes")]
    MissingPotentialOutcomes { index: usize },

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(String),

    #[error("singular design matrix (rank deficient)")]
    SingularDesign,

    #[error(
        "truth inconsistency: closed form {closed_form} vs brute force {brute_force} (se {se})"
    )]
    TruthInconsistency {
        closed_form: f64,
        brute_force: f64,
        se: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
