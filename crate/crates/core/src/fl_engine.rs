//! Federated round loop.
//!
//! Every round the server broadcasts `w_k`, each client runs `κ` full-batch
//! gradient steps and returns its pseudo-gradient (post- minus pre-update
//! parameters), the weight rule produces `ρ_k`, and the server applies
//! `w_{k+1} = w_k + server_lr · Σ_i ρ_{k,i} Δ_i`, summing in client order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contribution::{
    bootstrap_contributions, compute_round_contributions, free_rider_score, Combination, ContributionLedger, RoundContributions,
};
use crate::error::{check_dim, Error, Result};
use crate::metrics::norm;
use crate::models::{ModelSpec, ParamVector, Sample};
use crate::synthdata::ClientDataset;

/// Tolerance on `|Σρ - 1|` accepted by aggregation.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Parameter delta, post-update minus pre-update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoGradient(Vec<f64>);

impl PseudoGradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pseudo-gradient".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for PseudoGradient {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `κ` full-batch gradient-descent steps from `w` on `train`.
pub fn local_update(model: &ModelSpec, w: &ParamVector, train: &[Sample], steps: usize, lr: f64) -> Result<(ParamVector, PseudoGradient)> {
    if train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    if steps < 1 {
        return Err(Error::invalid("local steps must be at least 1"));
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid("learning rate must be nonnegative"));
    }
    let mut local = w.clone();
    for _ in 0..steps {
        let g = model.gradient(&local, train)?;
        local.add_scaled(-lr, g.as_slice())?;
    }
    if !local.is_finite() {
        return Err(Error::Numeric("local update diverged".into()));
    }
    let delta = PseudoGradient(local.sub(w)?.into_vec());
    Ok((local, delta))
}

/// `w_k - w_{k-1}`.
pub fn global_pseudo_gradient(current: &ParamVector, previous: &ParamVector) -> Result<PseudoGradient> {
    Ok(PseudoGradient(current.sub(previous)?.into_vec()))
}

fn exclusion_factor(weight: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&weight) {
        if weight >= 1.0 {
            return Err(Error::DegenerateExclusion(weight));
        }
        return Err(Error::invalid(format!("exclusion weight {weight} must lie in [0, 1)")));
    }
    Ok(1.0 - weight)
}

/// Aggregate direction without client `i`: `(g - w_i g_i) / (1 - w_i)`.
pub fn exclude_client_gradient(global: &PseudoGradient, client: &PseudoGradient, weight: f64) -> Result<PseudoGradient> {
    check_dim(global.len(), client.len())?;
    let denom = exclusion_factor(weight)?;
    PseudoGradient::new(global.0.iter().zip(&client.0).map(|(g, gi)| (g - weight * gi) / denom).collect())
}

/// Aggregated model without client `i`: `(w_k - w_i w_{k,i}) / (1 - w_i)`.
pub fn exclude_client_model(global: &ParamVector, local: &ParamVector, weight: f64) -> Result<ParamVector> {
    check_dim(global.len(), local.len())?;
    let denom = exclusion_factor(weight)?;
    ParamVector::new(global.as_slice().iter().zip(local.as_slice()).map(|(g, l)| (g - weight * l) / denom).collect())
}

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || !((sum - 1.0).abs() <= SIMPLEX_TOL) {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

/// `w_k + server_lr · Σ_i ρ_i Δ_i`, reduced in ascending client order.
pub fn aggregate(global: &ParamVector, deltas: &[PseudoGradient], weights: &[f64], server_lr: f64) -> Result<ParamVector> {
    check_dim(deltas.len(), weights.len())?;
    check_simplex(weights)?;
    let mut step = vec![0.0; global.len()];
    for (delta, &rho) in deltas.iter().zip(weights) {
        check_dim(global.len(), delta.len())?;
        for (s, d) in step.iter_mut().zip(&delta.0) {
            *s += rho * d;
        }
    }
    let mut next = global.clone();
    next.add_scaled(server_lr, &step)?;
    if !next.is_finite() {
        return Err(Error::Numeric("aggregated model is not finite".into()));
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    FedceMulti,
    FedceSum,
    Standalone,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedceMulti => "fedce_multi",
            Algorithm::FedceSum => "fedce_sum",
            Algorithm::Standalone => "standalone",
        }
    }

    pub fn combination(self) -> Combination {
        match self {
            Algorithm::FedceSum => Combination::Sum,
            _ => Combination::Multi,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::Fedavg),
            "fedce_multi" => Ok(Algorithm::FedceMulti),
            "fedce_sum" => Ok(Algorithm::FedceSum),
            "standalone" => Ok(Algorithm::Standalone),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelSpec,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_steps: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub init_seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.rounds < 1 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.local_steps < 1 {
            return Err(Error::invalid("local steps must be at least 1"));
        }
        if !(self.client_lr >= 0.0) || !self.server_lr.is_finite() {
            return Err(Error::invalid("learning rates must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Everything a weight rule may look at when scoring round `k`.
pub struct RoundContext<'a> {
    pub round: usize,
    pub model: &'a ModelSpec,
    pub clients: &'a [ClientDataset],
    /// `w_k`, the model broadcast this round.
    pub global: &'a ParamVector,
    /// `w_k - w_{k-1}`; absent in round 0.
    pub global_delta: Option<&'a PseudoGradient>,
    pub local_models: &'a [ParamVector],
    pub local_deltas: &'a [PseudoGradient],
    /// Weights used in the previous aggregation (`ρ_{k-1}`).
    pub prev_rho: &'a [f64],
}

impl RoundContext<'_> {
    pub fn sample_weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.p).collect()
    }
}

/// Produces a round's contribution terms and aggregation weights.
pub trait WeightRule: Sync {
    fn contributions(&self, ctx: &RoundContext<'_>, ledger: &ContributionLedger) -> Result<RoundContributions>;
}

/// The contribution-weighted rule.
#[derive(Debug, Clone, Copy)]
pub struct FedCe(pub Combination);

impl WeightRule for FedCe {
    fn contributions(&self, ctx: &RoundContext<'_>, ledger: &ContributionLedger) -> Result<RoundContributions> {
        compute_round_contributions(ctx, ledger, self.0)
    }
}

/// Records the contribution terms but aggregates with sample proportions.
#[derive(Debug, Clone, Copy)]
pub struct SampleProportion;

impl WeightRule for SampleProportion {
    fn contributions(&self, ctx: &RoundContext<'_>, ledger: &ContributionLedger) -> Result<RoundContributions> {
        let mut c = compute_round_contributions(ctx, ledger, ledger.combination())?;
        c.rho = ctx.sample_weights();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundLog {
    pub client_id: usize,
    pub gamma_cos: f64,
    pub gamma_err: f64,
    pub gamma_m: f64,
    pub gamma_s: f64,
    pub rho: f64,
    /// Error of the client's locally updated model on its validation set.
    pub local_val_error: f64,
    /// Error of the broadcast model `w_k` on the client's validation set.
    pub global_val_error: f64,
    /// Error of the model after this round's aggregation.
    pub post_val_error: f64,
    pub free_rider_score: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub global_delta_norm: f64,
    pub clients: Vec<ClientRoundLog>,
}

impl RoundLog {
    /// Mean over clients of `1 - error` for the post-aggregation model.
    pub fn mean_val_score(&self) -> f64 {
        1.0 - self.clients.iter().map(|c| c.post_val_error).sum::<f64>() / self.clients.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub final_model: ParamVector,
    /// Per-client models for standalone training.
    pub client_models: Option<Vec<ParamVector>>,
    pub rho_final: Vec<f64>,
    pub rounds: Vec<RoundLog>,
    pub ledger: ContributionLedger,
}

impl RunOutput {
    /// Model used to score client `i`.
    pub fn model_for(&self, i: usize) -> &ParamVector {
        match &self.client_models {
            Some(models) => &models[i],
            None => &self.final_model,
        }
    }

    /// Per-client `1 - error` on the test sets.
    pub fn test_scores(&self, model: &ModelSpec, clients: &[ClientDataset]) -> Result<Vec<f64>> {
        clients.iter().enumerate().map(|(i, c)| Ok(1.0 - model.evaluate_error(self.model_for(i), &c.test)?)).collect()
    }
}

fn check_federation(clients: &[ClientDataset], model: &ModelSpec) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Empty("federation"));
    }
    for c in clients {
        if c.train.is_empty() || c.val.is_empty() {
            return Err(Error::invalid(format!("client {} needs training and validation samples", c.client_id)));
        }
        for s in c.all_samples() {
            check_dim(model.input_dim(), s.features.len())?;
        }
    }
    let p: Vec<f64> = clients.iter().map(|c| c.p).collect();
    check_simplex(&p)
}

pub fn run_experiment(clients: &[ClientDataset], config: &TrainingConfig) -> Result<RunOutput> {
    match config.algorithm {
        Algorithm::Fedavg => run_with_rule(clients, config, &SampleProportion),
        Algorithm::FedceMulti | Algorithm::FedceSum => run_with_rule(clients, config, &FedCe(config.algorithm.combination())),
        Algorithm::Standalone => run_standalone(clients, config),
    }
}

fn val_errors(model: &ModelSpec, w: &ParamVector, clients: &[ClientDataset]) -> Result<Vec<f64>> {
    clients.par_iter().map(|c| model.evaluate_error(w, &c.val)).collect()
}

/// Federated training with an arbitrary weight rule. Round 0 aggregates with
/// sample proportions since no global delta exists yet.
pub fn run_with_rule(clients: &[ClientDataset], config: &TrainingConfig, rule: &dyn WeightRule) -> Result<RunOutput> {
    config.validate()?;
    check_federation(clients, &config.model)?;
    let model = &config.model;
    let n = clients.len();
    let p: Vec<f64> = clients.iter().map(|c| c.p).collect();
    let mut ledger = ContributionLedger::new(n, config.algorithm.combination());
    let mut global = model.init_params(config.init_seed);
    let mut previous: Option<ParamVector> = None;
    let mut prev_rho = p.clone();
    let mut global_val = val_errors(model, &global, clients)?;
    let mut rounds = Vec::with_capacity(config.rounds);

    for k in 0..config.rounds {
        let updates: Vec<(ParamVector, PseudoGradient)> = clients
            .par_iter()
            .map(|c| local_update(model, &global, &c.train, config.local_steps, config.client_lr))
            .collect::<Result<_>>()?;
        let (local_models, deltas): (Vec<_>, Vec<_>) = updates.into_iter().unzip();
        let local_val: Vec<f64> =
            clients.par_iter().zip(&local_models).map(|(c, w)| model.evaluate_error(w, &c.val)).collect::<Result<_>>()?;
        let global_delta = previous.as_ref().map(|prev| global_pseudo_gradient(&global, prev)).transpose()?;

        let contrib = if k == 0 {
            bootstrap_contributions(&p)
        } else {
            let ctx = RoundContext {
                round: k,
                model,
                clients,
                global: &global,
                global_delta: global_delta.as_ref(),
                local_models: &local_models,
                local_deltas: &deltas,
                prev_rho: &prev_rho,
            };
            rule.contributions(&ctx, &ledger)?
        };
        check_simplex(&contrib.rho)?;

        let zero = PseudoGradient::zeros(global.len());
        let gd = global_delta.as_ref().unwrap_or(&zero);
        let scores: Vec<f64> = (0..n).map(|i| free_rider_score(&deltas[i], gd, local_val[i], global_val[i]).0).collect();

        let next = aggregate(&global, &deltas, &contrib.rho, config.server_lr)?;
        let post_val = val_errors(model, &next, clients)?;

        rounds.push(RoundLog {
            round: k,
            global_delta_norm: gd.norm(),
            clients: (0..n)
                .map(|i| ClientRoundLog {
                    client_id: clients[i].client_id,
                    gamma_cos: contrib.gamma_cos[i],
                    gamma_err: contrib.gamma_err[i],
                    gamma_m: contrib.gamma_m[i],
                    gamma_s: contrib.gamma_s[i],
                    rho: contrib.rho[i],
                    local_val_error: local_val[i],
                    global_val_error: global_val[i],
                    post_val_error: post_val[i],
                    free_rider_score: scores[i],
                    delta_norm: deltas[i].norm(),
                })
                .collect(),
        });
        prev_rho = contrib.rho.clone();
        ledger.record(k, contrib)?;
        previous = Some(std::mem::replace(&mut global, next));
        global_val = post_val;
    }

    Ok(RunOutput { algorithm: config.algorithm, final_model: global, client_models: None, rho_final: prev_rho, rounds, ledger })
}

/// Each client trains alone for `rounds · κ` steps.
fn run_standalone(clients: &[ClientDataset], config: &TrainingConfig) -> Result<RunOutput> {
    config.validate()?;
    check_federation(clients, &config.model)?;
    let model = &config.model;
    let n = clients.len();
    let p: Vec<f64> = clients.iter().map(|c| c.p).collect();
    let init = model.init_params(config.init_seed);
    let mut models = vec![init.clone(); n];
    let mut current_val = val_errors(model, &init, clients)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for k in 0..config.rounds {
        let updates: Vec<(ParamVector, PseudoGradient)> = clients
            .par_iter()
            .zip(&models)
            .map(|(c, w)| local_update(model, w, &c.train, config.local_steps, config.client_lr))
            .collect::<Result<_>>()?;
        let post_val: Vec<f64> =
            clients.par_iter().zip(&updates).map(|(c, (w, _))| model.evaluate_error(w, &c.val)).collect::<Result<_>>()?;
        rounds.push(RoundLog {
            round: k,
            global_delta_norm: 0.0,
            clients: (0..n)
                .map(|i| ClientRoundLog {
                    client_id: clients[i].client_id,
                    gamma_cos: 0.0,
                    gamma_err: 0.0,
                    gamma_m: 0.0,
                    gamma_s: 0.0,
                    rho: p[i],
                    local_val_error: post_val[i],
                    global_val_error: current_val[i],
                    post_val_error: post_val[i],
                    free_rider_score: 0.0,
                    delta_norm: updates[i].1.norm(),
                })
                .collect(),
        });
        models = updates.into_iter().map(|(w, _)| w).collect();
        current_val = post_val;
    }
    Ok(RunOutput {
        algorithm: Algorithm::Standalone,
        final_model: init,
        client_models: Some(models),
        rho_final: p,
        rounds,
        ledger: ContributionLedger::new(n, Combination::Multi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use crate::models::Label;
    use crate::synthdata::{generate_federation, FederationSpec, Task};

    fn pg(v: &[f64]) -> PseudoGradient {
        PseudoGradient::new(v.to_vec()).unwrap()
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn toy_client() -> (ModelSpec, Vec<Sample>) {
        let spec = ModelSpec::Logistic { input_dim: 2, classes: 2 };
        let data = vec![
            Sample { features: vec![1.0, 0.5], label: Label::Class(1) },
            Sample { features: vec![-0.3, 0.8], label: Label::Class(0) },
            Sample { features: vec![0.2, -1.0], label: Label::Class(1) },
        ];
        (spec, data)
    }

    #[test]
    fn one_local_step_is_a_gradient_step() {
        let (spec, data) = toy_client();
        let w = pv(&[0.1, -0.2, 0.05]);
        let (_, delta) = local_update(&spec, &w, &data, 1, 0.3).unwrap();
        let g = spec.gradient(&w, &data).unwrap();
        for (d, gi) in delta.as_slice().iter().zip(g.as_slice()) {
            assert_abs_diff_eq!(*d, -0.3 * gi, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (spec, data) = toy_client();
        let w = pv(&[0.1, -0.2, 0.05]);
        let (local, delta) = local_update(&spec, &w, &data, 3, 0.0).unwrap();
        assert_eq!(local, w);
        assert!(delta.as_slice().iter().all(|&v| v == 0.0));
        assert!(local_update(&spec, &w, &[], 1, 0.1).is_err());
    }

    #[test]
    fn two_steps_compose() {
        let (spec, data) = toy_client();
        let w = pv(&[0.1, -0.2, 0.05]);
        let (two, _) = local_update(&spec, &w, &data, 2, 0.4).unwrap();
        let (one, _) = local_update(&spec, &w, &data, 1, 0.4).unwrap();
        let (again, _) = local_update(&spec, &one, &data, 1, 0.4).unwrap();
        for (a, b) in two.as_slice().iter().zip(again.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_delta_definition() {
        let w = pv(&[1.0, 2.0]);
        assert_eq!(global_pseudo_gradient(&w, &w).unwrap(), PseudoGradient::zeros(2));
        let next = pv(&[1.5, 1.0]);
        assert_eq!(global_pseudo_gradient(&next, &w).unwrap(), pg(&[0.5, -1.0]));
        assert!(global_pseudo_gradient(&w, &pv(&[1.0])).is_err());
    }

    #[test]
    fn exclusion_special_cases() {
        let g = pg(&[0.3, -0.4]);
        assert_eq!(exclude_client_gradient(&g, &pg(&[9.0, 9.0]), 0.0).unwrap(), g);
        let (g1, g2) = (pg(&[1.0, 2.0]), pg(&[-3.0, 0.5]));
        let avg = pg(&[-1.0, 1.25]);
        assert_eq!(exclude_client_gradient(&avg, &g1, 0.5).unwrap(), g2);
        assert!(matches!(exclude_client_gradient(&g, &g1, 1.0), Err(Error::DegenerateExclusion(_))));

        let w = pv(&[0.2, 0.7]);
        assert_eq!(exclude_client_model(&w, &pv(&[5.0, 5.0]), 0.0).unwrap(), w);
        assert_eq!(exclude_client_model(&w, &w, 0.37).unwrap().as_slice()[1], 0.7);
        assert!(exclude_client_model(&w, &w, 1.2).is_err());
    }

    proptest! {
        #[test]
        fn reinclusion_identities(
            g in prop::collection::vec(-10.0f64..10.0, 5),
            gi in prop::collection::vec(-10.0f64..10.0, 5),
            wt in 0.0f64..0.95,
        ) {
            let excl = exclude_client_gradient(&pg(&g), &pg(&gi), wt).unwrap();
            for j in 0..5 {
                prop_assert!(((1.0 - wt) * excl.as_slice()[j] + wt * gi[j] - g[j]).abs() < 1e-12 * (1.0 + g[j].abs() + gi[j].abs()) * 10.0);
            }
            let m = exclude_client_model(&pv(&g), &pv(&gi), wt).unwrap();
            for j in 0..5 {
                prop_assert!(((1.0 - wt) * m.as_slice()[j] + wt * gi[j] - g[j]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn aggregation_cases() {
        let w = pv(&[1.0, 1.0]);
        let deltas = [pg(&[0.5, 0.0]), pg(&[0.0, -2.0]), pg(&[1.0, 1.0])];
        assert_eq!(aggregate(&w, &deltas, &[0.0, 1.0, 0.0], 1.0).unwrap(), pv(&[1.0, -1.0]));
        let zeros = vec![PseudoGradient::zeros(2); 3];
        assert_eq!(aggregate(&w, &zeros, &[0.2, 0.3, 0.5], 1.0).unwrap(), w);
        assert!(aggregate(&w, &deltas, &[0.2, 0.3, 0.6], 1.0).is_err());
        assert!(aggregate(&w, &deltas, &[-0.2, 0.7, 0.5], 1.0).is_err());
        // Model-averaging form with server_lr = 1.
        let rho = [0.2, 0.3, 0.5];
        let next = aggregate(&w, &deltas, &rho, 1.0).unwrap();
        for j in 0..2 {
            let avg: f64 = (0..3).map(|i| rho[i] * (w.as_slice()[j] + deltas[i].as_slice()[j])).sum();
            assert_abs_diff_eq!(next.as_slice()[j], avg, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_proportions_reproduce_independent_fedavg_step() {
        let mut spec = FederationSpec::new(Task::Classification, vec![8, 12, 20], 3);
        spec.input_dim = 3;
        let clients = generate_federation(&spec).unwrap();
        let model = ModelSpec::Logistic { input_dim: 3, classes: 2 };
        let w = model.init_params(1);
        let updates: Vec<_> = clients.iter().map(|c| local_update(&model, &w, &c.train, 2, 0.5).unwrap()).collect();
        let deltas: Vec<_> = updates.iter().map(|u| u.1.clone()).collect();
        let p: Vec<f64> = clients.iter().map(|c| c.p).collect();
        let got = aggregate(&w, &deltas, &p, 1.0).unwrap();
        // FedAvg: sample-count weighted average of the local models.
        let total: usize = clients.iter().map(|c| c.train.len()).sum();
        for j in 0..model.dim() {
            let expected: f64 = clients.iter().zip(&updates).map(|(c, u)| c.train.len() as f64 / total as f64 * u.0.as_slice()[j]).sum();
            assert_abs_diff_eq!(got.as_slice()[j], expected, epsilon = 1e-12);
        }
    }

    fn seg_config(algorithm: Algorithm, rounds: usize) -> TrainingConfig {
        TrainingConfig {
            model: ModelSpec::PixelSeg { grid: 8 },
            algorithm,
            rounds,
            local_steps: 1,
            client_lr: 2.0,
            server_lr: 1.0,
            init_seed: 4,
        }
    }

    #[test]
    fn identical_clients_get_uniform_weights() {
        let mut two = FederationSpec::new(Task::Segmentation, vec![12, 12], 5);
        two.shared_stream = true;
        two.client_shift = vec![crate::synthdata::ClientShift { mean_offset: 0.0, rotation: 0.0, noise: 0.3, contrast: 1.0 }; 2];
        let base = generate_federation(&two).unwrap();
        let mut clients: Vec<ClientDataset> = (0..3).map(|i| ClientDataset { client_id: i, ..base[0].clone() }).collect();
        crate::synthdata::assign_sample_weights(&mut clients);
        let out = run_experiment(&clients, &seg_config(Algorithm::FedceMulti, 6)).unwrap();
        for r in &out.rho_final {
            assert_abs_diff_eq!(*r, 1.0 / 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn single_client_fedavg_matches_standalone() {
        let spec = FederationSpec::new(Task::Segmentation, vec![16, 16], 8);
        let mut clients = generate_federation(&spec).unwrap();
        clients.truncate(1);
        crate::synthdata::assign_sample_weights(&mut clients);
        let fed = run_experiment(&clients, &seg_config(Algorithm::Fedavg, 5)).unwrap();
        let alone = run_experiment(&clients, &seg_config(Algorithm::Standalone, 5)).unwrap();
        for (a, b) in fed.final_model.as_slice().iter().zip(alone.model_for(0).as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_delta_is_previous_weighted_sum() {
        let spec = FederationSpec::new(Task::Segmentation, vec![12, 16, 20], 2);
        let clients = generate_federation(&spec).unwrap();
        let cfg = seg_config(Algorithm::FedceMulti, 3);
        let out = run_experiment(&clients, &cfg).unwrap();
        // Replay round 0 by hand: w_1 - w_0 is the p-weighted sum of the local deltas.
        let w0 = cfg.model.init_params(cfg.init_seed);
        let mut step = vec![0.0; w0.len()];
        for c in &clients {
            let (_, d) = local_update(&cfg.model, &w0, &c.train, 1, cfg.client_lr).unwrap();
            for (s, v) in step.iter_mut().zip(d.as_slice()) {
                *s += c.p * v;
            }
        }
        let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        assert_abs_diff_eq!(out.rounds[1].global_delta_norm, norm, epsilon = 1e-12);
        assert_eq!(out.rounds[0].global_delta_norm, 0.0);
    }

    #[test]
    fn weights_stay_on_simplex() {
        let mut spec = FederationSpec::new(Task::Segmentation, vec![12, 16, 20, 8], 12);
        spec.outlier = Some(crate::synthdata::OutlierSpec { client: 3, magnitude: 0.6 });
        let clients = generate_federation(&spec).unwrap();
        for alg in [Algorithm::Fedavg, Algorithm::FedceMulti, Algorithm::FedceSum] {
            let out = run_experiment(&clients, &seg_config(alg, 8)).unwrap();
            for r in &out.rounds {
                let s: f64 = r.clients.iter().map(|c| c.rho).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(r.clients.iter().all(|c| c.rho >= 0.0));
            }
        }
    }
}
