//! Command-line front end.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimands::{
    assignment_given_recruited, balanced_randomization_prob, complier_weight, overall_ate,
    recruited_ate, recruitment_rate,
};
use crate::estimators::{fit_lmm, itt_estimate};
use crate::figure1::WorkedExample;
use crate::harness::{
    check_against_reference, find_reference, load_configs, run_table1, table1_configs,
    write_results_csv, RunOptions, Scenario,
};
use crate::model::{PrincipalEffects, StrataDistribution, NORMALIZATION_TOL};
use crate::rng::Substreams;

#[derive(Debug, Parser)]
#[command(
    name = "psbias",
    version,
    about = "Selection bias under post-randomization recruitment in cluster trials"
)]
pub struct Cli {
    /// Master seed; overrides seeds from config files.
    #[arg(long, global = true, env = "PSBIAS_SEED")]
    pub seed: Option<u64>,

    /// Write the primary output here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Overall and recruited-population ATEs from stratum shares and effects.
    Estimand {
        #[arg(long, value_parser = parse_ratio)]
        pa: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio)]
        pc: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio)]
        pn: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio, allow_negative_numbers = true)]
        ta: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio, allow_negative_numbers = true)]
        tc: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio, allow_negative_numbers = true)]
        tn: Option<Ratio<i128>>,
        /// Cluster randomization probability.
        #[arg(long, value_parser = parse_ratio)]
        r: Ratio<i128>,
    },
    /// Randomization probability that balances recruited arm sizes.
    Balance {
        #[arg(long, value_parser = parse_ratio)]
        pa: Ratio<i128>,
        #[arg(long, value_parser = parse_ratio)]
        pc: Ratio<i128>,
    },
    /// Generate one trial dataset and dump it as CSV.
    Simulate {
        /// Scenario config (JSON); defaults to the bundled table1 set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario label within the config; defaults to the first.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Include the latent stratum of each row.
        #[arg(long)]
        reveal_truth: bool,
        /// Also report the ITT and adjusted mixed-model estimates on stderr.
        #[arg(long)]
        fit: bool,
    },
    /// The three-stratum worked example.
    Figure1 {
        #[arg(long, value_parser = parse_ratio, default_value = "1/2")]
        r: Ratio<i128>,
    },
    /// Run the Monte Carlo experiment.
    Experiment {
        /// Scenario config (JSON); defaults to the bundled table1 set.
        config: Option<PathBuf>,
        /// Override the replicate count of every scenario.
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
        /// Compare against the reference rows and fail outside tolerance.
        #[arg(long)]
        check: bool,
        /// Only run scenarios with these labels.
        #[arg(long)]
        only: Vec<String>,
    },
}

/// Parses `"p/q"`, integers and plain decimals exactly.
pub fn parse_ratio(s: &str) -> std::result::Result<Ratio<i128>, String> {
    let s = s.trim();
    let bad = || format!("not a number or fraction: {s:?}");
    if let Some((num, den)) = s.split_once('/') {
        let num: i128 = num.trim().parse().map_err(|_| bad())?;
        let den: i128 = den.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(format!("zero denominator in {s:?}"));
        }
        return Ok(Ratio::new(num, den));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if (int.is_empty() && frac.is_empty())
        || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
        || frac.len() > 30
    {
        return Err(bad());
    }
    let digits: i128 = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let den = 10i128.pow(frac.len() as u32);
    let v = Ratio::new(digits, den);
    Ok(if neg { -v } else { v })
}

fn to_f64(r: &Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Formats to six significant digits, trimming trailing zeros.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Serialize)]
struct Entry {
    quantity: String,
    value: f64,
    formula: String,
}

fn entry(quantity: &str, value: f64, formula: &str) -> Entry {
    Entry {
        quantity: quantity.into(),
        value,
        formula: formula.into(),
    }
}

fn write_entries<W: Write>(out: &mut W, entries: &[Entry], format: Format) -> Result<()> {
    match format {
        Format::Table => {
            let width = entries.iter().map(|e| e.quantity.len()).max().unwrap_or(0);
            for e in entries {
                writeln!(
                    out,
                    "{:<width$}  {:>12}  {}",
                    e.quantity,
                    sig6(e.value),
                    e.formula
                )?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["quantity", "value", "formula"])?;
            for e in entries {
                w.write_record([e.quantity.as_str(), &sig6(e.value), e.formula.as_str()])?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, entries)
                .map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn check_normalized(p: &[Ratio<i128>]) -> Result<()> {
    let sum: Ratio<i128> = p.iter().copied().sum();
    let exact_one = sum == Ratio::from_integer(1);
    let sum_f = to_f64(&sum);
    if !exact_one && (sum_f - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum: sum_f });
    }
    Ok(())
}

fn distribution(
    pa: &Ratio<i128>,
    pc: &Ratio<i128>,
    pn: &Ratio<i128>,
) -> Result<StrataDistribution> {
    check_normalized(&[*pa, *pc, *pn])?;
    let (a, c) = (to_f64(pa), to_f64(pc));
    // p_n from the exact remainder keeps the float sum at 1 for inputs like thirds
    let n = if (*pa + *pc + *pn) == Ratio::from_integer(1) {
        to_f64(&(Ratio::from_integer(1) - *pa - *pc))
    } else {
        to_f64(pn)
    };
    StrataDistribution::new(a, c, n)
}

/// Everything the estimand subcommand prints.
pub fn estimand_report(
    dist: &StrataDistribution,
    effects: &PrincipalEffects,
    r: f64,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    if effects.tau_n.is_some() {
        out.push(("tau_O".to_string(), overall_ate(dist, effects)?));
    }
    out.push(("tau_R".to_string(), recruited_ate(r, dist, effects)?));
    out.push(("P(S=c|R=1)".to_string(), complier_weight(r, dist)?));
    out.push((
        "P(Z=1|R=1)".to_string(),
        assignment_given_recruited(r, dist)?.0,
    ));
    out.push(("P(R=1)".to_string(), recruitment_rate(r, dist)?));
    Ok(out)
}

fn formula_for(quantity: &str) -> &'static str {
    match quantity {
        "tau_O" => "sum_s tau_s p_s",
        "tau_R" => "w tau_c + (1 - w) tau_a, w = r p_c / (r p_c + p_a)",
        "P(S=c|R=1)" => "r p_c / (r p_c + p_a)",
        "P(Z=1|R=1)" => "(p_a + p_c) r / (p_a + r p_c)",
        "P(R=1)" => "p_a + r p_c",
        _ => "",
    }
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

/// Runs one invocation. Returns the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Estimand {
            pa,
            pc,
            pn,
            ta,
            tc,
            tn,
            r,
        } => {
            let dist = distribution(&pa, &pc, &pn)?;
            let effects = PrincipalEffects::new(to_f64(&ta), to_f64(&tc), tn.as_ref().map(to_f64));
            let rf = to_f64(&r);
            if !(rf > 0.0 && rf < 1.0) {
                return Err(Error::InvalidParameter(format!("r = {rf} outside (0, 1)")));
            }
            let entries: Vec<Entry> = estimand_report(&dist, &effects, rf)?
                .into_iter()
                .map(|(q, v)| entry(&q, v, formula_for(&q)))
                .collect();
            let mut out = open_output(&cli.output)?;
            write_entries(&mut out, &entries, cli.format)?;
            out.flush()?;
            Ok(0)
        }
        Command::Balance { pa, pc } => {
            let dist = StrataDistribution::from_recruitable(to_f64(&pa), to_f64(&pc))?;
            let r = balanced_randomization_prob(&dist)?;
            let mut out = open_output(&cli.output)?;
            write_entries(
                &mut out,
                &[entry("r", r, "p_a / (2 p_a + p_c)")],
                cli.format,
            )?;
            out.flush()?;
            Ok(0)
        }
        Command::Figure1 { r } => {
            let mut out = open_output(&cli.output)?;
            figure1_report(&mut out, to_f64(&r), cli.format)?;
            out.flush()?;
            Ok(0)
        }
        Command::Simulate {
            config,
            scenario,
            replicate,
            reveal_truth,
            fit,
        } => {
            let configs = match &config {
                Some(p) => load_configs(p)?,
                None => table1_configs(),
            };
            let chosen = match &scenario {
                Some(label) => configs
                    .iter()
                    .find(|c| &c.label == label)
                    .ok_or_else(|| Error::Config(format!("no scenario labelled {label:?}")))?,
                None => configs
                    .first()
                    .ok_or_else(|| Error::Config("config holds no scenarios".into()))?,
            };
            let s = Scenario::try_from(chosen)?;
            let seed = cli.seed.unwrap_or(s.master_seed);
            let data = s
                .simulation_model()
                .simulate(&Substreams::new(seed), replicate)?;
            let mut out = open_output(&cli.output)?;
            data.sample.write_csv(&mut out, reveal_truth)?;
            out.flush()?;
            if fit {
                let itt = itt_estimate(&data.sample)?;
                let lmm = fit_lmm(&data.sample, true)?;
                eprintln!("itt       {}", sig6(itt));
                eprintln!(
                    "lmm tau   {} (se {}, 95% CI [{}, {}])",
                    sig6(lmm.tau_hat),
                    sig6(lmm.se),
                    sig6(lmm.ci_low),
                    sig6(lmm.ci_high)
                );
                eprintln!(
                    "variance  sigma_gamma^2 {}  sigma_eps^2 {}  icc {}",
                    sig6(lmm.sigma_gamma_sq_hat),
                    sig6(lmm.sigma_eps_sq_hat),
                    sig6(lmm.icc_hat)
                );
            }
            Ok(0)
        }
        Command::Experiment {
            config,
            reps,
            jobs,
            check,
            only,
        } => {
            let mut configs = match &config {
                Some(p) => load_configs(p)?,
                None => table1_configs(),
            };
            if !only.is_empty() {
                configs.retain(|c| only.contains(&c.label));
            }
            let options = RunOptions {
                jobs,
                reps_override: reps,
                seed_override: cli.seed,
            };
            let outcomes = run_table1(&configs, &options)?;
            let mut ok = true;
            let mut rows = Vec::new();
            for o in &outcomes {
                match &o.result {
                    Ok(row) => {
                        eprintln!(
                            "{:<16} tau_R {:>8}  bias% {:>9}  mcsd {:>8}  ese {:>8}  cp {:>6}  conv {}/{}",
                            row.label,
                            sig6(row.true_tau_r),
                            sig6(row.pct_bias_signed),
                            sig6(row.mcsd),
                            sig6(row.ese),
                            sig6(row.cp),
                            row.n_converged,
                            row.n_replicates
                        );
                        if row.flagged {
                            eprintln!("{:<16} FLAGGED: more than 1% of fits failed", row.label);
                            ok = false;
                        }
                        if check {
                            match (find_reference(&row.label), o.kind) {
                                (Some(reference), Some(kind)) => {
                                    for c in check_against_reference(row, kind, reference) {
                                        let verdict = if c.passed() { "PASS" } else { "FAIL" };
                                        eprintln!(
                                            "{:<16} {verdict} {:<13} {} in [{}, {}]",
                                            row.label,
                                            c.metric,
                                            sig6(c.value),
                                            sig6(c.low),
                                            sig6(c.high)
                                        );
                                        ok &= c.passed();
                                    }
                                }
                                _ => eprintln!("{:<16} no reference row; not checked", row.label),
                            }
                        }
                        rows.push(row.clone());
                    }
                    Err(e) => {
                        eprintln!("{:<16} FAILED: {e}", o.config.label);
                        ok = false;
                    }
                }
            }
            let mut out = open_output(&cli.output)?;
            match cli.format {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut out, &rows)
                        .map_err(|e| Error::Io(e.to_string()))?;
                    writeln!(out)?;
                }
                // the results file is CSV whether or not a table was requested
                Format::Csv | Format::Table => write_results_csv(&rows, &mut out)?,
            }
            out.flush()?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

#[derive(Serialize)]
struct Figure1Json<'a> {
    full_data: &'a [crate::figure1::StratumRow],
    observed: Vec<crate::figure1::ObservedCell>,
    itt: f64,
    tau_o: f64,
    r: f64,
    tau_r: f64,
    itt_bias_vs_tau_o: f64,
    itt_bias_vs_tau_r: f64,
}

pub fn figure1_report<W: Write>(out: &mut W, r: f64, format: Format) -> Result<()> {
    let ex = WorkedExample::default();
    let itt = ex.itt()?;
    let tau_o = ex.tau_o()?;
    let tau_r = ex.tau_r(r)?;
    match format {
        Format::Json => {
            let doc = Figure1Json {
                full_data: &ex.rows,
                observed: ex.observed(),
                itt,
                tau_o,
                r,
                tau_r,
                itt_bias_vs_tau_o: itt - tau_o,
                itt_bias_vs_tau_r: itt - tau_r,
            };
            serde_json::to_writer_pretty(&mut *out, &doc).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out)?;
        }
        Format::Csv => {
            let entries = [
                entry("itt", itt, "mean(Y | Z=1, R=1) - mean(Y | Z=0, R=1)"),
                entry("tau_O", tau_o, formula_for("tau_O")),
                entry("r", r, ""),
                entry("tau_R", tau_r, formula_for("tau_R")),
                entry("itt_bias_vs_tau_O", itt - tau_o, ""),
                entry("itt_bias_vs_tau_R", itt - tau_r, ""),
            ];
            write_entries(out, &entries, Format::Csv)?;
        }
        Format::Table => {
            writeln!(out, "Full data (equal stratum shares)")?;
            writeln!(out, "  stratum      R(1) R(0)  Y(1)  Y(0)")?;
            for row in &ex.rows {
                let name = match row.stratum.code() {
                    'a' => "always",
                    'c' => "compliant",
                    'n' => "never",
                    _ => "defiant",
                };
                writeln!(
                    out,
                    "  {name:<11} {:>4} {:>4} {:>5} {:>5}",
                    row.r1,
                    row.r0,
                    sig6(row.y1),
                    sig6(row.y0)
                )?;
            }
            writeln!(out)?;
            writeln!(out, "Observed data, average of (R, Y) given assignment")?;
            for cell in ex.observed() {
                let strata: Vec<String> = cell.strata.iter().map(|s| s.to_string()).collect();
                let y = cell.mean_y.map(sig6).unwrap_or_else(|| "?".into());
                writeln!(
                    out,
                    "  Z = {}  strata {{{}}}  ({}, {})",
                    cell.z,
                    strata.join(","),
                    cell.recruited,
                    y
                )?;
            }
            writeln!(out)?;
            writeln!(out, "ITT estimate        {}", sig6(itt))?;
            writeln!(out, "tau_O               {}", sig6(tau_o))?;
            writeln!(out, "tau_R (r = {})  {}", sig6(r), sig6(tau_r))?;
            writeln!(out, "ITT bias vs tau_O   {}", sig6(itt - tau_o))?;
            writeln!(out, "ITT bias vs tau_R   {}", sig6(itt - tau_r))?;
        }
    }
    Ok(())
}
