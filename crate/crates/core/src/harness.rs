//! Monte Carlo scenarios: replicate loop, recruited-population truth, and the
//! bias / MCSD / ESE / coverage summary of the covariate-adjusted estimator.
//!
//! Replicate `k` of a scenario draws every random number from substreams keyed
//! by `(master_seed, k)` and results are folded in replicate order, so the
//! output does not depend on thread count or scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{OutcomeModel, QuotaPolicy, SimulationModel, StrataLogitModel};
use crate::error::{Error, Result};
use crate::estimands::{brute_force_estimands, recruited_ate_quota, BruteForceEstimate};
use crate::estimators::fit_lmm;
use crate::model::{PrincipalEffects, Recruitment, StrataDistribution, TrialDesign};
use crate::rng::{Stage, Substreams};

/// Seed for every truth computation; independent of the scenario seeds.
pub const TRUTH_SEED: u64 = 0x7275_7468;

/// Scenario flagged when more than this share of fits fail to converge.
pub const MAX_NONCONVERGED_SHARE: f64 = 0.01;

pub const TABLE1_JSON: &str = include_str!("../configs/table1.json");

/// One scenario as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub mu_a: f64,
    pub mu_c: f64,
    pub tau_a: f64,
    pub tau_c: f64,
    pub lambda_a: [f64; 2],
    pub lambda_c: [f64; 2],
    pub beta_a: [f64; 3],
    pub beta_c: [f64; 3],
    pub icc: f64,
    pub n_clusters: usize,
    pub n_treated: usize,
    pub cluster_size: usize,
    pub quota: usize,
    pub n_replicates: usize,
    pub master_seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Many(Vec<ScenarioConfig>),
    One(ScenarioConfig),
}

/// Parses a config holding either one scenario object or an array of them.
pub fn parse_configs(text: &str) -> Result<Vec<ScenarioConfig>> {
    // try the array form first so field errors point at the right place
    let parsed: ConfigFile = match serde_json::from_str::<Vec<ScenarioConfig>>(text) {
        Ok(v) => ConfigFile::Many(v),
        Err(array_err) => match serde_json::from_str::<ScenarioConfig>(text) {
            Ok(one) => ConfigFile::One(one),
            Err(obj_err) => {
                let err = if text.trim_start().starts_with('[') {
                    array_err
                } else {
                    obj_err
                };
                return Err(Error::Config(format!(
                    "line {} column {}: {err}",
                    err.line(),
                    err.column()
                )));
            }
        },
    };
    Ok(match parsed {
        ConfigFile::Many(v) => v,
        ConfigFile::One(c) => vec![c],
    })
}

pub fn load_configs(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_configs(&text)
}

pub fn table1_configs() -> Vec<ScenarioConfig> {
    parse_configs(TABLE1_JSON).expect("bundled table1.json is valid")
}

/// Whether the always- and compliant-recruited share one outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    NonDifferential,
    Differential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub outcome: OutcomeModel,
    pub strata: StrataLogitModel,
    pub design: TrialDesign,
    pub icc: f64,
    pub n_replicates: usize,
    pub master_seed: u64,
}

impl TryFrom<&ScenarioConfig> for Scenario {
    type Error = Error;

    fn try_from(c: &ScenarioConfig) -> Result<Self> {
        let outcome = OutcomeModel::with_icc(
            c.mu_a, c.mu_c, c.tau_a, c.tau_c, c.lambda_a, c.lambda_c, c.icc,
        )?;
        let strata = StrataLogitModel::from_arrays(c.beta_a, c.beta_c)?;
        let design = TrialDesign::fixed(
            c.n_clusters,
            c.n_treated,
            c.cluster_size,
            Recruitment::Quota(c.quota),
        )?;
        Ok(Self {
            label: c.label.clone(),
            outcome,
            strata,
            design,
            icc: c.icc,
            n_replicates: c.n_replicates,
            master_seed: c.master_seed,
        })
    }
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        let o = &self.outcome;
        if o.mu_a == o.mu_c && o.tau_a == o.tau_c && o.lambda_a == o.lambda_c {
            ScenarioKind::NonDifferential
        } else {
            ScenarioKind::Differential
        }
    }

    pub fn effects(&self) -> PrincipalEffects {
        PrincipalEffects::new(self.outcome.tau_a, self.outcome.tau_c, None)
    }

    pub fn simulation_model(&self) -> SimulationModel {
        SimulationModel {
            strata: self.strata,
            outcome: self.outcome,
            design: self.design,
            quota_policy: QuotaPolicy::Strict,
        }
    }
}

/// Monte Carlo budget for the recruited-population truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSettings {
    /// Covariate draws for integrating the stratum probabilities.
    pub n_draws: usize,
    /// Independent oracle populations for the brute-force cross-check.
    pub n_populations: usize,
    /// Assignments replayed per oracle population.
    pub n_assignments: usize,
}

impl Default for TruthSettings {
    fn default() -> Self {
        Self {
            n_draws: 1_000_000,
            n_populations: 40,
            n_assignments: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub tau_r: f64,
    pub dist: StrataDistribution,
    /// Pooled brute-force replay over independent populations; its standard
    /// error covers both population and assignment variation.
    pub brute_force: BruteForceEstimate,
}

/// Closed-form `tau^R` under equal quotas, checked against brute-force replay.
pub fn true_tau_r(scenario: &Scenario) -> Result<Truth> {
    true_tau_r_with(scenario, &TruthSettings::default())
}

pub fn true_tau_r_with(scenario: &Scenario, settings: &TruthSettings) -> Result<Truth> {
    let streams = Substreams::new(TRUTH_SEED);
    let mut rng = streams.stream(Stage::Truth, 0);
    let dist = scenario
        .strata
        .marginal_distribution(settings.n_draws, &mut rng)?;
    let fraction = scenario.design.randomization_prob();
    let tau_r = recruited_ate_quota(fraction, &dist, &scenario.effects())?;

    let model = scenario.simulation_model();
    let per_population: Vec<f64> = (0..settings.n_populations)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let pop = model.gen_oracle_population(&streams, k as u64)?;
            let est = brute_force_estimands(
                &pop.subjects,
                &scenario.design,
                settings.n_assignments,
                TRUTH_SEED.wrapping_add(k as u64 + 1),
            )?;
            Ok(est.tau_r)
        })
        .collect::<Result<_>>()?;
    let k = per_population.len() as f64;
    let mean = per_population.iter().sum::<f64>() / k;
    let se = if per_population.len() > 1 {
        (per_population
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (k - 1.0)
            / k)
            .sqrt()
    } else {
        f64::INFINITY
    };
    let brute_force = BruteForceEstimate {
        tau_o: None,
        tau_r: mean,
        tau_r_se: se,
        n_assignments: settings.n_populations * settings.n_assignments,
    };
    // rounding slack lets homogeneous scenarios (zero spread) pass exactly
    if (mean - tau_r).abs() > 3.0 * se + 1e-12 {
        return Err(Error::TruthInconsistency {
            closed_form: tau_r,
            brute_force: mean,
            se,
        });
    }
    Ok(Truth {
        tau_r,
        dist,
        brute_force,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub icc: f64,
    pub true_tau_r: f64,
    pub pct_bias_signed: f64,
    pub pct_bias_abs: f64,
    pub mcsd: f64,
    pub ese: f64,
    pub cp: f64,
    pub n_replicates: usize,
    pub n_converged: usize,
    pub master_seed: u64,
    #[serde(skip)]
    pub mean_tau_hat: f64,
    #[serde(skip)]
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ReplicateResult {
    tau_hat: f64,
    se: f64,
    covers: bool,
}

/// Runs every replicate of `scenario` and summarizes the covariate-adjusted fits.
pub fn run_scenario(scenario: &Scenario) -> Result<MetricsRow> {
    if scenario.n_replicates < 2 {
        return Err(Error::InvalidParameter("n_replicates must be >= 2".into()));
    }
    let truth = true_tau_r(scenario)?;
    let model = scenario.simulation_model();
    let streams = Substreams::new(scenario.master_seed);
    let results: Vec<Option<ReplicateResult>> = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|k| -> Result<Option<ReplicateResult>> {
            let data = model.simulate(&streams, k as u64)?;
            Ok(match fit_lmm(&data.sample, true) {
                Ok(fit) if fit.converged => Some(ReplicateResult {
                    tau_hat: fit.tau_hat,
                    se: fit.se,
                    covers: fit.covers(truth.tau_r),
                }),
                // singular or non-converged fits are excluded and counted
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(summarize(scenario, truth.tau_r, &results))
}

fn summarize(scenario: &Scenario, truth: f64, results: &[Option<ReplicateResult>]) -> MetricsRow {
    let ok: Vec<ReplicateResult> = results.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let mean = ok.iter().map(|r| r.tau_hat).sum::<f64>() / n;
    let mcsd = (ok.iter().map(|r| (r.tau_hat - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ese = ok.iter().map(|r| r.se).sum::<f64>() / n;
    let cp = 100.0 * ok.iter().filter(|r| r.covers).count() as f64 / n;
    let pct_bias_signed = 100.0 * (mean - truth) / truth;
    let n_failed = results.len() - ok.len();
    MetricsRow {
        label: scenario.label.clone(),
        icc: scenario.icc,
        true_tau_r: truth,
        pct_bias_signed,
        pct_bias_abs: pct_bias_signed.abs(),
        mcsd,
        ese,
        cp,
        n_replicates: results.len(),
        n_converged: ok.len(),
        master_seed: scenario.master_seed,
        mean_tau_hat: mean,
        flagged: n_failed as f64 > MAX_NONCONVERGED_SHARE * results.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    pub reps_override: Option<usize>,
    pub seed_override: Option<u64>,
}

/// Per-scenario outcome of an experiment run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub kind: Option<ScenarioKind>,
    pub result: Result<MetricsRow>,
}

/// Runs each config in order. A failing scenario does not stop the others.
pub fn run_table1(
    configs: &[ScenarioConfig],
    options: &RunOptions,
) -> Result<Vec<ScenarioOutcome>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = options.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes = pool.install(|| {
        configs
            .iter()
            .map(|c| {
                let mut config = c.clone();
                if let Some(reps) = options.reps_override {
                    config.n_replicates = reps;
                }
                if let Some(seed) = options.seed_override {
                    config.master_seed = seed;
                }
                let scenario = Scenario::try_from(&config);
                let kind = scenario.as_ref().ok().map(Scenario::kind);
                let result = scenario.and_then(|s| run_scenario(&s));
                ScenarioOutcome {
                    config,
                    kind,
                    result,
                }
            })
            .collect()
    });
    Ok(outcomes)
}

pub const RESULTS_HEADER: &str =
    "label,icc,true_tau_r,pct_bias_signed,pct_bias_abs,mcsd,ese,cp,n_replicates,n_converged,master_seed";

pub fn write_results_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reference performance metrics for one scenario row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub label: &'static str,
    pub true_tau_r: f64,
    pub pct_bias: f64,
    pub mcsd: f64,
    pub ese: f64,
    pub cp: f64,
}

const fn reference(
    label: &'static str,
    true_tau_r: f64,
    pct_bias: f64,
    mcsd: f64,
    ese: f64,
    cp: f64,
) -> Reference {
    Reference {
        label,
        true_tau_r,
        pct_bias,
        mcsd,
        ese,
        cp,
    }
}

/// Reference values, in the same order as the bundled `table1.json`.
pub const TABLE1_REFERENCE: [Reference; 20] = [
    reference("i-r1-icc0.01", 0.20, 0.02, 0.078, 0.075, 95.4),
    reference("i-r1-icc0.1", 0.20, 1.36, 0.152, 0.150, 94.3),
    reference("i-r2-icc0.01", 0.80, 0.01, 0.078, 0.075, 95.4),
    reference("i-r2-icc0.1", 0.80, 0.34, 0.152, 0.150, 94.3),
    reference("ii-r3-icc0.01", 0.20, 215.03, 0.081, 0.078, 0.1),
    reference("ii-r3-icc0.1", 0.20, 216.41, 0.153, 0.151, 20.2),
    reference("ii-r4-icc0.01", 0.80, 53.77, 0.081, 0.080, 0.1),
    reference("ii-r4-icc0.1", 0.80, 53.42, 0.153, 0.152, 21.4),
    reference("ii-r5-icc0.01", 0.33, 39.15, 0.079, 0.076, 62.5),
    reference("ii-r5-icc0.1", 0.33, 39.99, 0.152, 0.150, 84.6),
    reference("ii-r6-icc0.01", 0.67, 19.22, 0.079, 0.077, 63.2),
    reference("ii-r6-icc0.1", 0.67, 18.81, 0.152, 0.151, 86.4),
    reference("ii-r7-icc0.01", 0.33, 169.82, 0.086, 0.083, 0.0),
    reference("ii-r7-icc0.1", 0.33, 170.66, 0.156, 0.153, 5.5),
    reference("ii-r8-icc0.01", 0.67, 44.89, 0.078, 0.076, 3.9),
    reference("ii-r8-icc0.1", 0.67, 45.30, 0.152, 0.150, 48.9),
    reference("ii-r9-icc0.01", 0.33, 180.59, 0.088, 0.084, 0.0),
    reference("ii-r9-icc0.1", 0.33, 181.43, 0.157, 0.154, 4.0),
    reference("ii-r10-icc0.01", 0.67, 39.61, 0.079, 0.076, 8.8),
    reference("ii-r10-icc0.1", 0.67, 40.02, 0.152, 0.150, 57.4),
];

pub fn find_reference(label: &str) -> Option<&'static Reference> {
    TABLE1_REFERENCE.iter().find(|r| r.label == label)
}

/// One tolerance-band comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCheck {
    pub metric: &'static str,
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

impl BandCheck {
    fn new(metric: &'static str, value: f64, low: f64, high: f64) -> Self {
        Self {
            metric,
            value,
            low,
            high,
        }
    }

    pub fn passed(&self) -> bool {
        self.value >= self.low && self.value <= self.high
    }
}

/// Tolerance bands around the reference values.
///
/// Non-differential rows: |bias| < 2%, coverage in [93.5, 97], MCSD and ESE
/// within 10%. Differential rows: |bias| within max(5, 5% of the reference
/// value) points, coverage within 10 points, MCSD and ESE within 10%.
pub fn check_against_reference(
    row: &MetricsRow,
    kind: ScenarioKind,
    reference: &Reference,
) -> Vec<BandCheck> {
    let rel =
        |metric, value: f64, target: f64| BandCheck::new(metric, value, 0.9 * target, 1.1 * target);
    let mut checks = vec![
        rel("mcsd", row.mcsd, reference.mcsd),
        rel("ese", row.ese, reference.ese),
    ];
    match kind {
        ScenarioKind::NonDifferential => {
            checks.push(BandCheck::new("pct_bias_abs", row.pct_bias_abs, 0.0, 2.0));
            checks.push(BandCheck::new("cp", row.cp, 93.5, 97.0));
        }
        ScenarioKind::Differential => {
            let half = (0.05 * reference.pct_bias).max(5.0);
            checks.push(BandCheck::new(
                "pct_bias_abs",
                row.pct_bias_abs,
                reference.pct_bias - half,
                reference.pct_bias + half,
            ));
            checks.push(BandCheck::new(
                "cp",
                row.cp,
                (reference.cp - 10.0).max(0.0),
                (reference.cp + 10.0).min(100.0),
            ));
        }
    }
    checks
}
