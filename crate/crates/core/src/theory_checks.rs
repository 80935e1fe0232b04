//! Empirical checks for the stability and convergence claims: how much the
//! contribution estimates move when a shifted client leaves, a per-round trace
//! of the weights, and convergence-curve comparisons across algorithms.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contribution::normalize;
use crate::error::{Error, Result};
use crate::fl_engine::{check_simplex, run_experiment, Algorithm, RunOutput, TrainingConfig};
use crate::oracles::sub_federation;
use crate::synthdata::ClientDataset;

/// W1 between two equal-size empirical distributions: the mean absolute
/// difference of the sorted samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein sample"));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!("wasserstein_1d needs equal sample sizes, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample in wasserstein input".into()));
    }
    let sa = sorted(a);
    let sb = sorted(b);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `m` evenly spaced order statistics (mid-quantiles) of `values`.
pub fn quantile_resample(values: &[f64], m: usize) -> Result<Vec<f64>> {
    if values.is_empty() || m == 0 {
        return Err(Error::Empty("quantile resample"));
    }
    let s = sorted(values);
    let n = s.len();
    Ok((0..m).map(|j| s[(((j as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1)]).collect())
}

/// W1 between samples of different sizes, after resampling both to the
/// smaller size.
pub fn wasserstein_resampled(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = a.len().min(b.len());
    if a.len() == b.len() {
        return wasserstein_1d(a, b);
    }
    wasserstein_1d(&quantile_resample(a, m)?, &quantile_resample(b, m)?)
}

fn pooled_projection<'a>(clients: impl IntoIterator<Item = &'a ClientDataset>) -> Vec<f64> {
    clients.into_iter().flat_map(|c| c.projection()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCheckResult {
    pub removed_client: usize,
    /// Client ids of the surviving clients, in federation order.
    pub survivors: Vec<usize>,
    /// Final weights with every client present.
    pub rho_full: Vec<f64>,
    /// `rho_full` restricted to the survivors and renormalized.
    pub rho_full_renormalized: Vec<f64>,
    /// Final weights of the federation trained without the removed client.
    pub rho_reduced: Vec<f64>,
    pub abs_delta: Vec<f64>,
    pub max_abs_delta: f64,
    /// W1 between the pooled first-coordinate projections of both federations.
    pub wasserstein: f64,
    /// Smallest stability constant consistent with the observed change,
    /// `max_abs_delta / (2 N W1)`; infinite when W1 is zero.
    pub implied_constant: f64,
}

/// Trains on all clients and again with `removed` left out, then compares the
/// surviving clients' final weights.
pub fn shift_robustness_check(clients: &[ClientDataset], config: &TrainingConfig, removed: usize) -> Result<ShiftCheckResult> {
    let n = clients.len();
    if removed >= n {
        return Err(Error::invalid(format!("removed client {removed} out of range for {n} clients")));
    }
    if n < 2 {
        return Err(Error::invalid("shift check needs at least 2 clients"));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != removed).collect();
    let reduced = sub_federation(clients, &keep);
    let (full_run, reduced_run) = rayon::join(|| run_experiment(clients, config), || run_experiment(&reduced, config));
    let rho_full = full_run?.rho_final;
    let rho_reduced = reduced_run?.rho_final;
    let kept: Vec<f64> = keep.iter().map(|&i| rho_full[i]).collect();
    let (rho_full_renormalized, _) = normalize(&kept)?;
    check_simplex(&rho_full_renormalized)?;
    let abs_delta: Vec<f64> = rho_full_renormalized.iter().zip(&rho_reduced).map(|(a, b)| (a - b).abs()).collect();
    let max_abs_delta = abs_delta.iter().cloned().fold(0.0, f64::max);
    let wasserstein = wasserstein_resampled(&pooled_projection(clients), &pooled_projection(&reduced))?;
    let implied_constant = if wasserstein > 0.0 { max_abs_delta / (2.0 * n as f64 * wasserstein) } else { f64::INFINITY };
    Ok(ShiftCheckResult {
        removed_client: clients[removed].client_id,
        survivors: keep.iter().map(|&i| clients[i].client_id).collect(),
        rho_full,
        rho_full_renormalized,
        rho_reduced,
        abs_delta,
        max_abs_delta,
        wasserstein,
        implied_constant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoTraceRow {
    pub round: usize,
    pub client_id: usize,
    pub rho: f64,
    pub kappa: usize,
    pub eta: f64,
    /// `rho * ||Δ_i||`: the length of the client's weighted step this round.
    pub bound_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RhoBoundTrace {
    pub rows: Vec<RhoTraceRow>,
}

impl RhoBoundTrace {
    pub fn max_rho(&self) -> f64 {
        self.rows.iter().map(|r| r.rho).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let rows = csv::Reader::from_reader(r).deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// One trace row per round and client.
pub fn rho_bound_trace(run: &RunOutput, config: &TrainingConfig) -> Result<RhoBoundTrace> {
    let mut rows = Vec::new();
    for round in &run.rounds {
        let rho: Vec<f64> = round.clients.iter().map(|c| c.rho).collect();
        check_simplex(&rho)?;
        for c in &round.clients {
            let row = RhoTraceRow {
                round: round.round,
                client_id: c.client_id,
                rho: c.rho,
                kappa: config.local_steps,
                eta: config.client_lr,
                bound_proxy: c.rho * c.delta_norm,
            };
            if !row.bound_proxy.is_finite() {
                return Err(Error::Numeric(format!("non-finite trace entry at round {}", row.round)));
            }
            rows.push(row);
        }
    }
    Ok(RhoBoundTrace { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub algorithm: String,
    pub seed: u64,
    pub mean_val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceCurves {
    pub points: Vec<CurvePoint>,
}

impl ConvergenceCurves {
    pub fn curve(&self, algorithm: Algorithm, seed: u64) -> Vec<f64> {
        self.points.iter().filter(|p| p.seed == seed && p.algorithm == algorithm.name()).map(|p| p.mean_val_score).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Number of rounds (1-based) until `curve` first reaches `target`.
pub fn rounds_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&s| s >= target).map(|i| i + 1)
}

/// Runs every algorithm on every trial federation. Each trial's seed also
/// seeds the model initialization, so algorithms within a trial share it.
pub fn convergence_compare(
    trials: &[(u64, Vec<ClientDataset>)],
    config: &TrainingConfig,
    algorithms: &[Algorithm],
) -> Result<ConvergenceCurves> {
    let jobs: Vec<(u64, &[ClientDataset], Algorithm)> =
        trials.iter().flat_map(|(seed, clients)| algorithms.iter().map(move |&a| (*seed, clients.as_slice(), a))).collect();
    let runs: Vec<Vec<CurvePoint>> = jobs
        .par_iter()
        .map(|&(seed, clients, algorithm)| {
            let cfg = TrainingConfig { algorithm, init_seed: seed, ..config.clone() };
            let out = run_experiment(clients, &cfg)?;
            Ok(out
                .rounds
                .iter()
                .map(|r| CurvePoint { round: r.round, algorithm: algorithm.name().into(), seed, mean_val_score: r.mean_val_score() })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(ConvergenceCurves { points: runs.into_iter().flatten().collect() })
}
