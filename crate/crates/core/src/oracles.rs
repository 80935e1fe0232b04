//! Ground-truth client valuation: exact Shapley values by enumerating every
//! coalition, and leave-one-out retraining.
//!
//! Coalition utilities retrain with FedAvg so the oracle never depends on the
//! contribution estimator it is used to grade.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contribution::normalize;
use crate::error::{check_dim, Error, Result};
use crate::fl_engine::{run_experiment, Algorithm, TrainingConfig};
use crate::metrics::{cosine_sim, euclidean, pearson};
use crate::synthdata::{assign_sample_weights, ClientDataset};

/// Largest federation for which exact enumeration (2^N coalitions) is allowed.
pub const MAX_SHAPLEY_CLIENTS: usize = 8;

/// Coalition value in [0, 1]; coalitions are ascending client indices.
pub trait Utility: Sync {
    fn value(&self, coalition: &[usize]) -> Result<f64>;
}

impl<F> Utility for F
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    fn value(&self, coalition: &[usize]) -> Result<f64> {
        self(coalition)
    }
}

fn members(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Utilities of every coalition, indexed by bitmask.
pub fn coalition_table(utility: &dyn Utility, n: usize) -> Result<Vec<f64>> {
    if n > MAX_SHAPLEY_CLIENTS {
        return Err(Error::TooManyClients(n));
    }
    (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let subset = members(mask, n);
            utility.value(&subset).map_err(|e| Error::SubRun { subset, source: Box::new(e) })
        })
        .collect()
}

/// Shapley values from a full coalition table.
pub fn shapley_from_table(table: &[f64], n: usize) -> Vec<f64> {
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    (0..n)
        .map(|i| {
            let bit = 1 << i;
            (0..table.len())
                .filter(|mask| mask & bit == 0)
                .map(|mask| {
                    let s = mask.count_ones() as usize;
                    let weight = fact[s] * fact[n - 1 - s] / fact[n];
                    weight * (table[mask | bit] - table[mask])
                })
                .sum()
        })
        .collect()
}

/// Exact Shapley values over `n` players.
pub fn exact_shapley(utility: &dyn Utility, n: usize) -> Result<Vec<f64>> {
    let table = coalition_table(utility, n)?;
    Ok(shapley_from_table(&table, n))
}

/// Retrains FedAvg on a coalition and scores the result on every client's test set.
pub struct FederatedUtility<'a> {
    clients: &'a [ClientDataset],
    config: TrainingConfig,
}

impl<'a> FederatedUtility<'a> {
    pub fn new(clients: &'a [ClientDataset], config: &TrainingConfig) -> Self {
        let config = TrainingConfig { algorithm: Algorithm::Fedavg, ..config.clone() };
        Self { clients, config }
    }

    fn performance(&self, model: &crate::models::ParamVector) -> Result<f64> {
        let mut err = 0.0;
        for c in self.clients {
            err += self.config.model.evaluate_error(model, &c.test)?;
        }
        Ok(1.0 - err / self.clients.len() as f64)
    }
}

/// Copies of the chosen clients with sample weights recomputed within the subset.
pub fn sub_federation(clients: &[ClientDataset], subset: &[usize]) -> Vec<ClientDataset> {
    let mut sub: Vec<ClientDataset> = subset.iter().map(|&i| clients[i].clone()).collect();
    assign_sample_weights(&mut sub);
    sub
}

impl Utility for FederatedUtility<'_> {
    /// The empty coalition scores the untrained initial model.
    fn value(&self, coalition: &[usize]) -> Result<f64> {
        if coalition.is_empty() {
            return self.performance(&self.config.model.init_params(self.config.init_seed));
        }
        let sub = sub_federation(self.clients, coalition);
        let out = run_experiment(&sub, &self.config)?;
        self.performance(&out.final_model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationResult {
    pub shapley: Option<Vec<f64>>,
    /// Performance with all clients minus performance without client i.
    pub loo_drop: Vec<f64>,
    /// Drops clamped at 0 and normalized to sum to 1.
    pub loo_share: Vec<f64>,
    pub sample_share: Vec<f64>,
    pub full_performance: f64,
    /// No client's removal hurt performance; shares fell back to uniform.
    pub degenerate: bool,
}

fn loo_from_values(full: f64, without: &[f64], clients: &[ClientDataset]) -> Result<ValuationResult> {
    let loo_drop: Vec<f64> = without.iter().map(|w| full - w).collect();
    let clamped: Vec<f64> = loo_drop.iter().map(|d| d.max(0.0)).collect();
    let (loo_share, degenerate) = normalize(&clamped)?;
    Ok(ValuationResult {
        shapley: None,
        loo_drop,
        loo_share,
        sample_share: clients.iter().map(|c| c.p).collect(),
        full_performance: full,
        degenerate,
    })
}

/// N + 1 FedAvg trainings: all clients, then each client left out in turn.
pub fn leave_one_out(clients: &[ClientDataset], config: &TrainingConfig) -> Result<ValuationResult> {
    let n = clients.len();
    if n < 2 {
        return Err(Error::invalid("leave-one-out needs at least 2 clients"));
    }
    let utility = FederatedUtility::new(clients, config);
    let run = |subset: Vec<usize>| -> Result<f64> { utility.value(&subset).map_err(|e| Error::SubRun { subset, source: Box::new(e) }) };
    let full = run((0..n).collect())?;
    let without: Vec<f64> = (0..n).into_par_iter().map(|i| run((0..n).filter(|&j| j != i).collect())).collect::<Result<_>>()?;
    loo_from_values(full, &without, clients)
}

/// Shapley values plus the leave-one-out columns, which are read off the same
/// coalition table.
pub fn shapley_valuation(clients: &[ClientDataset], config: &TrainingConfig) -> Result<ValuationResult> {
    let n = clients.len();
    if n > MAX_SHAPLEY_CLIENTS {
        return Err(Error::TooManyClients(n));
    }
    let utility = FederatedUtility::new(clients, config);
    let table = coalition_table(&utility, n)?;
    let all = (1usize << n) - 1;
    let without: Vec<f64> = (0..n).map(|i| table[all & !(1 << i)]).collect();
    let mut result = loo_from_values(table[all], &without, clients)?;
    result.shapley = Some(shapley_from_table(&table, n));
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pearson_r: f64,
    pub p_value: f64,
    pub euclidean_distance: f64,
    pub cosine_similarity: f64,
}

/// How closely an estimate vector tracks the oracle's shares.
pub fn estimate_vs_oracle(estimate: &[f64], oracle_shares: &[f64]) -> Result<Alignment> {
    check_dim(oracle_shares.len(), estimate.len())?;
    let (pearson_r, p_value) = pearson(estimate, oracle_shares)?;
    Ok(Alignment {
        pearson_r,
        p_value,
        euclidean_distance: euclidean(estimate, oracle_shares)?,
        cosine_similarity: cosine_sim(estimate, oracle_shares)?,
    })
}

/// Fixed-width alignment table: one row per estimator.
pub fn render_alignment_table(rows: &[(String, Alignment)]) -> String {
    use std::fmt::Write;
    let mut out = format!("{:<14}{:>22}{:>12}{:>10}\n", "Method", "Pearson (p)", "Euclid.", "Cosine");
    for (name, a) in rows {
        let corr = format!("{:.2} ({:.1e})", a.pearson_r * 100.0, a.p_value);
        let _ = writeln!(out, "{:<14}{:>22}{:>12.4}{:>10.4}", name, corr, a.euclidean_distance, a.cosine_similarity);
    }
    out
}
