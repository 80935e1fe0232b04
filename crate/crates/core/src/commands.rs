//! Subcommand implementations. Each one runs its experiments for every
//! configured seed, writes its artifacts under the output directory and
//! returns the human-readable summary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fl_engine::{run_experiment, Algorithm, RunOutput};
use crate::metrics::{build_fairness_report, client_std, render_table, FairnessReport};
use crate::oracles::{estimate_vs_oracle, leave_one_out, render_alignment_table, shapley_valuation, Alignment, ValuationResult};
use crate::synthdata::{export_federation, generate_federation, ClientDataset, FreeRiderSpec};
use crate::theory_checks::{convergence_compare, rho_bound_trace, shift_robustness_check, ShiftCheckResult};

/// Decimal text with 12 significant digits.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        return "0".into();
    }
    rounded.to_string()
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}

fn seed_dir(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    ensure_dir(&config.output_dir.join(format!("seed_{seed}")))
}

fn federation(config: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    let clients = config.select_clients(generate_federation(&config.federation_for(seed))?);
    if config.export_federation {
        let file = fs::File::create(seed_dir(config, seed)?.join("federation.jsonl"))?;
        export_federation(&clients, BufWriter::new(file))?;
    }
    Ok(clients)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_rounds(path: &Path, run: &RunOutput) -> Result<()> {
    let mut t =
        Table::new(&["round", "client_id", "gamma_cos", "gamma_err", "gamma_m", "gamma_s", "rho", "local_val_error", "global_val_error"]);
    for r in &run.rounds {
        for c in &r.clients {
            t.push(vec![
                r.round.to_string(),
                c.client_id.to_string(),
                fmt_num(c.gamma_cos),
                fmt_num(c.gamma_err),
                fmt_num(c.gamma_m),
                fmt_num(c.gamma_s),
                fmt_num(c.rho),
                fmt_num(c.local_val_error),
                fmt_num(c.global_val_error),
            ]);
        }
    }
    t.write(path)
}

#[derive(Serialize)]
struct ClientContribution {
    client_id: usize,
    rho_final: f64,
    cumulative_gamma_cos: f64,
    cumulative_gamma_err: f64,
    degenerate_round_count: usize,
}

#[derive(Serialize)]
struct Contributions {
    algorithm: Algorithm,
    seed: u64,
    clients: Vec<ClientContribution>,
}

fn contributions(run: &RunOutput, clients: &[ClientDataset], seed: u64) -> Contributions {
    Contributions {
        algorithm: run.algorithm,
        seed,
        clients: clients
            .iter()
            .enumerate()
            .map(|(i, c)| ClientContribution {
                client_id: c.client_id,
                rho_final: run.rho_final[i],
                cumulative_gamma_cos: run.ledger.cumulative_cos[i],
                cumulative_gamma_err: run.ledger.cumulative_err[i],
                degenerate_round_count: run.ledger.degenerate_counts[i],
            })
            .collect(),
    }
}

fn write_checkpoints(dir: &Path, run: &RunOutput) -> Result<()> {
    let dir = ensure_dir(&dir.join("checkpoints"))?;
    match &run.client_models {
        Some(models) => {
            for (i, w) in models.iter().enumerate() {
                fs::write(dir.join(format!("client_{i}.fcpv")), w.to_bytes())?;
            }
        }
        None => fs::write(dir.join("final.fcpv"), run.final_model.to_bytes())?,
    }
    Ok(())
}

const REPORT_HEADER: [&str; 9] =
    ["seed", "algorithm", "mean", "std", "pearson_r", "p_value", "euclidean_distance", "cosine_similarity", "scores"];

/// A report row. Correlation columns stay empty when they are undefined
/// (fewer than three clients, or constant scores).
fn report_row(seed: u64, algorithm: Algorithm, scores: &[f64], standalone: &[f64]) -> Result<(Vec<String>, Option<FairnessReport>)> {
    let joined = scores.iter().map(|s| fmt_num(*s)).collect::<Vec<_>>().join(";");
    let head = vec![seed.to_string(), algorithm.name().to_string(), fmt_num(mean(scores)), fmt_num(client_std(scores)?)];
    let mut row = head;
    let report = build_fairness_report(scores, standalone).ok();
    match &report {
        Some(r) => row.extend([fmt_num(r.pearson_r), fmt_num(r.p_value), fmt_num(r.euclidean_distance), fmt_num(r.cosine_similarity)]),
        None => row.extend(std::iter::repeat_n(String::new(), 4)),
    }
    row.push(joined);
    Ok((row, report))
}

/// `run`: trains the configured algorithm for every seed.
pub fn cmd_run(config: &ExperimentConfig) -> Result<String> {
    ensure_dir(&config.output_dir)?;
    let model = config.model();
    let mut report = Table::new(&REPORT_HEADER);
    let mut summary = String::new();
    for &seed in &config.seeds {
        let clients = federation(config, seed)?;
        let dir = seed_dir(config, seed)?;
        let run = run_experiment(&clients, &config.training(config.algorithm, seed))?;
        write_rounds(&dir.join("rounds.csv"), &run)?;
        write_json(&dir.join("contributions.json"), &contributions(&run, &clients, seed))?;
        write_checkpoints(&dir, &run)?;

        let standalone = if config.algorithm == Algorithm::Standalone {
            run.test_scores(&model, &clients)?
        } else {
            run_experiment(&clients, &config.training(Algorithm::Standalone, seed))?.test_scores(&model, &clients)?
        };
        let scores = run.test_scores(&model, &clients)?;
        let (row, full) = report_row(seed, config.algorithm, &scores, &standalone)?;
        report.push(row);
        summary.push_str(&format!("seed {seed}\n"));
        match full {
            Some(r) => summary.push_str(&render_table(&[(config.algorithm.name().to_string(), r)])),
            None => summary.push_str(&format!(
                "{:<14}avg {:.2}  std {:.2}\n",
                config.algorithm.name(),
                mean(&scores) * 100.0,
                client_std(&scores)? * 100.0
            )),
        }
    }
    report.write(&config.output_dir.join("report.csv"))?;
    Ok(summary)
}

/// `report`: every configured algorithm on every seed, compared with standalone training.
pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    ensure_dir(&config.output_dir)?;
    let model = config.model();
    let mut report = Table::new(&REPORT_HEADER);
    let mut summary = String::new();
    for &seed in &config.seeds {
        let clients = federation(config, seed)?;
        let standalone = run_experiment(&clients, &config.training(Algorithm::Standalone, seed))?.test_scores(&model, &clients)?;
        let mut rows = Vec::new();
        for &algorithm in &config.report.algorithms {
            let scores = if algorithm == Algorithm::Standalone {
                standalone.clone()
            } else {
                run_experiment(&clients, &config.training(algorithm, seed))?.test_scores(&model, &clients)?
            };
            let (row, full) = report_row(seed, algorithm, &scores, &standalone)?;
            report.push(row);
            if let Some(r) = full {
                rows.push((algorithm.name().to_string(), r));
            }
        }
        summary.push_str(&format!("seed {seed}\n{}", render_table(&rows)));
    }
    report.write(&config.output_dir.join("report.csv"))?;
    Ok(summary)
}

#[derive(Serialize)]
struct ClientValuation {
    client_id: usize,
    shapley: Option<f64>,
    loo_drop: f64,
    loo_share: f64,
    sample_share: f64,
}

#[derive(Serialize)]
struct ValuationFile {
    seed: u64,
    full_performance: f64,
    degenerate: bool,
    clients: Vec<ClientValuation>,
}

/// Shares the estimators are graded against: clamped, normalized Shapley
/// values when available, otherwise the leave-one-out shares.
pub fn oracle_shares(v: &ValuationResult) -> Result<Vec<f64>> {
    match &v.shapley {
        Some(s) => {
            let clamped: Vec<f64> = s.iter().map(|x| x.max(0.0)).collect();
            Ok(crate::contribution::normalize(&clamped)?.0)
        }
        None => Ok(v.loo_share.clone()),
    }
}

/// Weight vector an estimator assigns: sample proportions for FedAvg, final
/// weights for the contribution-weighted variants.
pub fn estimator_weights(clients: &[ClientDataset], config: &ExperimentConfig, algorithm: Algorithm, seed: u64) -> Result<Vec<f64>> {
    match algorithm {
        Algorithm::Fedavg | Algorithm::Standalone => Ok(clients.iter().map(|c| c.p).collect()),
        _ => Ok(run_experiment(clients, &config.training(algorithm, seed))?.rho_final),
    }
}

fn valuation_command(config: &ExperimentConfig, exact: bool) -> Result<String> {
    ensure_dir(&config.output_dir)?;
    let mut alignment = Table::new(&["seed", "estimator", "pearson_r", "p_value", "euclidean_distance", "cosine_similarity"]);
    let mut summary = String::new();
    for &seed in &config.seeds {
        let clients = federation(config, seed)?;
        let training = config.training(Algorithm::Fedavg, seed);
        let v = if exact { shapley_valuation(&clients, &training)? } else { leave_one_out(&clients, &training)? };
        let file = ValuationFile {
            seed,
            full_performance: v.full_performance,
            degenerate: v.degenerate,
            clients: clients
                .iter()
                .enumerate()
                .map(|(i, c)| ClientValuation {
                    client_id: c.client_id,
                    shapley: v.shapley.as_ref().map(|s| s[i]),
                    loo_drop: v.loo_drop[i],
                    loo_share: v.loo_share[i],
                    sample_share: v.sample_share[i],
                })
                .collect(),
        };
        write_json(&seed_dir(config, seed)?.join("valuation.json"), &file)?;

        let shares = oracle_shares(&v)?;
        let mut rows: Vec<(String, Alignment)> = Vec::new();
        for &est in &config.valuation.estimators {
            let w = estimator_weights(&clients, config, est, seed)?;
            match estimate_vs_oracle(&w, &shares) {
                Ok(a) => {
                    alignment.push(vec![
                        seed.to_string(),
                        est.name().to_string(),
                        fmt_num(a.pearson_r),
                        fmt_num(a.p_value),
                        fmt_num(a.euclidean_distance),
                        fmt_num(a.cosine_similarity),
                    ]);
                    rows.push((est.name().to_string(), a));
                }
                // Constant weights or shares leave the correlation undefined.
                Err(Error::InvalidArgument(_)) => {}
                Err(e) => return Err(e),
            }
        }
        summary.push_str(&format!("seed {seed}\n{}", render_alignment_table(&rows)));
    }
    alignment.write(&config.output_dir.join("alignment.csv"))?;
    Ok(summary)
}

/// `shapley`: exact Shapley values (N ≤ 8) plus leave-one-out columns.
pub fn cmd_shapley(config: &ExperimentConfig) -> Result<String> {
    valuation_command(config, true)
}

/// `loo`: leave-one-out valuation.
pub fn cmd_loo(config: &ExperimentConfig) -> Result<String> {
    valuation_command(config, false)
}

/// Round (1-based) from which the free rider holds the top score in every
/// remaining round.
pub fn detection_round(scores: &[Vec<f64>], rider: usize) -> Option<usize> {
    let is_top = |row: &Vec<f64>| row.iter().all(|&s| s <= row[rider]);
    let mut first = None;
    for (k, row) in scores.iter().enumerate() {
        match (is_top(row), first) {
            (true, None) => first = Some(k + 1),
            (false, _) => first = None,
            _ => {}
        }
    }
    first
}

/// `freerider`: one federation per client position, with that client
/// replaced by a free rider.
pub fn cmd_freerider(config: &ExperimentConfig) -> Result<String> {
    ensure_dir(&config.output_dir)?;
    let positions: Vec<usize> = config.clients.clone().unwrap_or_else(|| (0..config.federation.n_clients).collect());
    let rounds = config.freerider.rounds.unwrap_or(config.rounds);
    let mut scores_csv = Table::new(&["seed", "free_rider", "round", "client_id", "score"]);
    let mut matrix = Table::new(&["seed", "free_rider", "round", "rider_score", "max_other_score", "rider_is_max"]);
    let mut summary = format!("{:<8}{:>12}{:>16}\n", "seed", "free rider", "detected from");
    for &seed in &config.seeds {
        for (rider, &generated) in positions.iter().enumerate() {
            let mut spec = config.federation_for(seed);
            spec.free_rider = Some(FreeRiderSpec { client: generated, repeat: config.freerider.repeat });
            let clients = config.select_clients(generate_federation(&spec)?);
            let training = crate::fl_engine::TrainingConfig { rounds, ..config.training(config.algorithm, seed) };
            let run = run_experiment(&clients, &training)?;
            let per_round: Vec<Vec<f64>> = run.rounds.iter().map(|r| r.clients.iter().map(|c| c.free_rider_score).collect()).collect();
            for (r, row) in run.rounds.iter().zip(&per_round) {
                for (c, s) in r.clients.iter().zip(row) {
                    scores_csv.push(vec![
                        seed.to_string(),
                        generated.to_string(),
                        r.round.to_string(),
                        c.client_id.to_string(),
                        fmt_num(*s),
                    ]);
                }
                let other = row.iter().enumerate().filter(|&(i, _)| i != rider).map(|(_, s)| *s).fold(0.0, f64::max);
                matrix.push(vec![
                    seed.to_string(),
                    generated.to_string(),
                    r.round.to_string(),
                    fmt_num(row[rider]),
                    fmt_num(other),
                    (row[rider] >= other).to_string(),
                ]);
            }
            let detected = detection_round(&per_round, rider).map_or("never".to_string(), |k| k.to_string());
            summary.push_str(&format!("{:<8}{:>12}{:>16}\n", seed, generated, detected));
        }
    }
    scores_csv.write(&config.output_dir.join("freerider.csv"))?;
    matrix.write(&config.output_dir.join("freerider_matrix.csv"))?;
    Ok(summary)
}

#[derive(Serialize)]
struct ShiftEntry {
    seed: u64,
    #[serde(flatten)]
    result: ShiftCheckResult,
}

/// `theory`: shift-robustness check, convergence curves and the weight trace.
pub fn cmd_theory(config: &ExperimentConfig) -> Result<String> {
    ensure_dir(&config.output_dir)?;
    let removed = match (&config.clients, config.removed_client()?) {
        (Some(subset), r) => subset.iter().position(|&c| c == r).ok_or_else(|| Error::Config {
            path: "theory.removed_client".into(),
            message: format!("client {r} is not in the `clients` subset"),
        })?,
        (None, r) => r,
    };
    let mut shifts = Vec::new();
    let mut trials = Vec::new();
    let mut summary = format!("{:<8}{:>14}{:>12}{:>14}\n", "seed", "max |delta|", "W1", "implied B");
    for &seed in &config.seeds {
        let clients = federation(config, seed)?;
        let training = config.training(config.algorithm, seed);
        let result = shift_robustness_check(&clients, &training, removed)?;
        summary.push_str(&format!(
            "{:<8}{:>13.2}%{:>12.4}{:>14.4}\n",
            seed,
            result.max_abs_delta * 100.0,
            result.wasserstein,
            result.implied_constant
        ));
        shifts.push(ShiftEntry { seed, result });

        let run = run_experiment(&clients, &training)?;
        let trace = rho_bound_trace(&run, &training)?;
        trace.write_csv(fs::File::create(seed_dir(config, seed)?.join("rho_trace.csv"))?)?;
        trials.push((seed, clients));
    }
    write_json(&config.output_dir.join("shift_check.json"), &shifts)?;

    let base = config.training(Algorithm::Fedavg, 0);
    let curves = convergence_compare(&trials, &base, &config.theory.algorithms)?;
    let mut t = Table::new(&["round", "algorithm", "seed", "mean_val_score"]);
    for p in &curves.points {
        t.push(vec![p.round.to_string(), p.algorithm.clone(), p.seed.to_string(), fmt_num(p.mean_val_score)]);
    }
    t.write(&config.output_dir.join("convergence.csv"))?;

    summary.push_str(&format!("\n{:<8}{:<14}{:>14}\n", "seed", "algorithm", "final score"));
    for (seed, _) in &trials {
        for &a in &config.theory.algorithms {
            let c = curves.curve(a, *seed);
            summary.push_str(&format!("{:<8}{:<14}{:>14.4}\n", seed, a.name(), c.last().copied().unwrap_or(f64::NAN)));
        }
    }
    Ok(summary)
}
