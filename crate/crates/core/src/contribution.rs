//! Per-round client contribution estimates and the aggregation weights built
//! from them.
//!
//! Two signals are measured for every client each round:
//!
//! * gradient space: `1 - cos(Δ_i, Δ_{-i})`, where `Δ_{-i}` is the global
//!   delta with the client's own update taken out;
//! * data space: the error of the leave-client-out model on the client's
//!   validation samples.
//!
//! Both are normalized across clients, combined by product or sum, summed over
//! the rounds seen so far and normalized onto the simplex to give `ρ_k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fl_engine::{exclude_client_gradient, exclude_client_model, PseudoGradient, RoundContext};
use crate::metrics::{dot, norm};
use crate::models::{ModelSpec, ParamVector};
use crate::synthdata::ClientDataset;

/// Vectors shorter than this are treated as directionless.
pub const ZERO_NORM: f64 = 1e-12;
/// Sums below this make normalization fall back to uniform weights.
pub const ZERO_SUM: f64 = 1e-12;
/// Gradient-space fallback for directionless vectors (orthogonality).
pub const COS_FALLBACK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    Multi,
    Sum,
}

/// `1 - cos(a, b)`. Returns the fallback value and `true` when either vector
/// has (near-)zero norm.
pub fn gamma_cos(client: &[f64], others: &[f64]) -> (f64, bool) {
    let (na, nb) = (norm(client), norm(others));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return (COS_FALLBACK, true);
    }
    let cos = (dot(client, others) / (na * nb)).clamp(-1.0, 1.0);
    (1.0 - cos, false)
}

/// Leave-client-out model error on the client's validation set.
pub fn gamma_err(model: &ModelSpec, excluded: &ParamVector, client: &ClientDataset) -> Result<f64> {
    if client.val.is_empty() {
        return Err(Error::Empty("client validation set"));
    }
    model.evaluate_error(excluded, &client.val)
}

/// Divides by the sum; an all-zero input yields the uniform vector and `true`.
pub fn normalize(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    if values.is_empty() {
        return Err(Error::Empty("values to normalize"));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Negative { index, value });
    }
    let sum: f64 = values.iter().sum();
    if sum < ZERO_SUM {
        return Ok((vec![1.0 / values.len() as f64; values.len()], true));
    }
    Ok((values.iter().map(|v| v / sum).collect(), false))
}

pub fn combine(gcos: &[f64], gerr: &[f64], mode: Combination) -> Result<Vec<f64>> {
    check_dim(gcos.len(), gerr.len())?;
    Ok(gcos
        .iter()
        .zip(gerr)
        .map(|(c, e)| match mode {
            Combination::Multi => c * e,
            Combination::Sum => c + e,
        })
        .collect())
}

/// Result of one weight update.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoUpdate {
    pub rho: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub degenerate: bool,
}

/// Adds this round's combined terms to the running totals and normalizes the
/// totals onto the simplex.
pub fn update_rho(cumulative: &[f64], combined: &[f64]) -> Result<RhoUpdate> {
    check_dim(cumulative.len(), combined.len())?;
    if let Some((index, &value)) = combined.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Negative { index, value });
    }
    let cumulative: Vec<f64> = cumulative.iter().zip(combined).map(|(a, b)| a + b).collect();
    let (rho, degenerate) = normalize(&cumulative)?;
    Ok(RhoUpdate { rho, cumulative, degenerate })
}

/// `(1 - cos(Δ_i, Δ)) · |E_local - E_global|`, higher meaning more suspicious.
/// The flag reports the zero-norm fallback.
pub fn free_rider_score(client: &PseudoGradient, global: &PseudoGradient, local_err: f64, global_err: f64) -> (f64, bool) {
    let (gc, degenerate) = gamma_cos(client.as_slice(), global.as_slice());
    ((gc * (local_err - global_err).abs()).max(0.0), degenerate)
}

/// One round's contribution terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundContributions {
    pub gamma_cos_raw: Vec<f64>,
    pub gamma_err_raw: Vec<f64>,
    /// Normalized over clients.
    pub gamma_cos: Vec<f64>,
    pub gamma_err: Vec<f64>,
    pub gamma_m: Vec<f64>,
    pub gamma_s: Vec<f64>,
    pub rho: Vec<f64>,
    /// Per-client fallback flags (zero-norm direction or impossible exclusion).
    pub degenerate_clients: Vec<bool>,
    /// Some normalization in this round fell back to uniform.
    pub degenerate_round: bool,
    /// Round-0 bootstrap terms are logged but never accumulated.
    pub bootstrap: bool,
}

/// Round 0: uniform terms, sample-proportion weights.
pub fn bootstrap_contributions(p: &[f64]) -> RoundContributions {
    let n = p.len();
    let u = 1.0 / n as f64;
    RoundContributions {
        gamma_cos_raw: vec![u; n],
        gamma_err_raw: vec![u; n],
        gamma_cos: vec![u; n],
        gamma_err: vec![u; n],
        gamma_m: vec![u * u; n],
        gamma_s: vec![2.0 * u; n],
        rho: p.to_vec(),
        degenerate_clients: vec![false; n],
        degenerate_round: false,
        bootstrap: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRound {
    pub round: usize,
    #[serde(flatten)]
    pub terms: RoundContributions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLedger {
    combination: Combination,
    pub rounds: Vec<LedgerRound>,
    pub cumulative_cos: Vec<f64>,
    pub cumulative_err: Vec<f64>,
    pub cumulative_m: Vec<f64>,
    pub cumulative_s: Vec<f64>,
    pub degenerate_counts: Vec<usize>,
}

impl ContributionLedger {
    pub fn new(n_clients: usize, combination: Combination) -> Self {
        Self {
            combination,
            rounds: Vec::new(),
            cumulative_cos: vec![0.0; n_clients],
            cumulative_err: vec![0.0; n_clients],
            cumulative_m: vec![0.0; n_clients],
            cumulative_s: vec![0.0; n_clients],
            degenerate_counts: vec![0; n_clients],
        }
    }

    pub fn combination(&self) -> Combination {
        self.combination
    }

    pub fn n_clients(&self) -> usize {
        self.cumulative_m.len()
    }

    /// Running totals of the combined term that drives `ρ`.
    pub fn cumulative(&self, mode: Combination) -> &[f64] {
        match mode {
            Combination::Multi => &self.cumulative_m,
            Combination::Sum => &self.cumulative_s,
        }
    }

    pub fn latest_rho(&self) -> Option<&[f64]> {
        self.rounds.last().map(|r| r.terms.rho.as_slice())
    }

    pub fn record(&mut self, round: usize, terms: RoundContributions) -> Result<()> {
        let n = self.n_clients();
        for v in [&terms.gamma_cos, &terms.gamma_err, &terms.gamma_m, &terms.gamma_s, &terms.rho] {
            check_dim(n, v.len())?;
        }
        if !terms.bootstrap {
            let add = |acc: &mut Vec<f64>, v: &[f64]| acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            add(&mut self.cumulative_cos, &terms.gamma_cos);
            add(&mut self.cumulative_err, &terms.gamma_err);
            add(&mut self.cumulative_m, &terms.gamma_m);
            add(&mut self.cumulative_s, &terms.gamma_s);
            for (count, &flag) in self.degenerate_counts.iter_mut().zip(&terms.degenerate_clients) {
                *count += (flag || terms.degenerate_round) as usize;
            }
        }
        self.rounds.push(LedgerRound { round, terms });
        Ok(())
    }
}

struct ClientTerms {
    gcos: f64,
    gerr: f64,
    degenerate: bool,
}

fn client_terms(ctx: &RoundContext<'_>, i: usize) -> Result<ClientTerms> {
    let weight = ctx.clients[i].p;
    let delta = &ctx.local_deltas[i];
    let zero = PseudoGradient::zeros(delta.len());
    let global_delta = ctx.global_delta.unwrap_or(&zero);
    // A client holding all the weight leaves nothing to exclude: fall back to
    // the orthogonality value and score the unmodified global model.
    if weight >= 1.0 - ZERO_NORM {
        let gerr = gamma_err(ctx.model, ctx.global, &ctx.clients[i])?;
        return Ok(ClientTerms { gcos: COS_FALLBACK, gerr, degenerate: true });
    }
    let others = exclude_client_gradient(global_delta, delta, weight)?;
    let (gcos, degenerate) = gamma_cos(delta.as_slice(), others.as_slice());
    let excluded = exclude_client_model(ctx.global, &ctx.local_models[i], weight)?;
    let gerr = gamma_err(ctx.model, &excluded, &ctx.clients[i])?;
    Ok(ClientTerms { gcos, gerr, degenerate })
}

/// Scores round `k ≥ 1` and derives `ρ_k` from the ledger's history.
pub fn compute_round_contributions(ctx: &RoundContext<'_>, ledger: &ContributionLedger, mode: Combination) -> Result<RoundContributions> {
    let n = ctx.clients.len();
    if ctx.round == 0 {
        return Err(Error::invalid("round 0 is the bootstrap round and has no contribution estimate"));
    }
    check_dim(n, ledger.n_clients())?;
    check_dim(n, ctx.prev_rho.len())?;
    let terms: Vec<ClientTerms> = (0..n).into_par_iter().map(|i| client_terms(ctx, i)).collect::<Result<_>>()?;
    let gamma_cos_raw: Vec<f64> = terms.iter().map(|t| t.gcos).collect();
    let gamma_err_raw: Vec<f64> = terms.iter().map(|t| t.gerr).collect();
    let (gamma_cos, cos_degenerate) = normalize(&gamma_cos_raw)?;
    let (gamma_err, err_degenerate) = normalize(&gamma_err_raw)?;
    let gamma_m = combine(&gamma_cos, &gamma_err, Combination::Multi)?;
    let gamma_s = combine(&gamma_cos, &gamma_err, Combination::Sum)?;
    let selected = match mode {
        Combination::Multi => &gamma_m,
        Combination::Sum => &gamma_s,
    };
    let update = update_rho(ledger.cumulative(mode), selected)?;
    Ok(RoundContributions {
        gamma_cos_raw,
        gamma_err_raw,
        gamma_cos,
        gamma_err,
        gamma_m,
        gamma_s,
        rho: update.rho,
        degenerate_clients: terms.iter().map(|t| t.degenerate).collect(),
        degenerate_round: cos_degenerate || err_degenerate || update.degenerate,
        bootstrap: false,
    })
}
