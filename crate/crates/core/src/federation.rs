//! Round orchestration: participant sampling, auxiliary-set matching and
//! projection, local solves and weighted aggregation.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{init_auxiliary, AuxMode, AuxiliaryDataset, ClientPartition, Dataset};
use crate::diagnostics::{self, similarity_probe};
use crate::error::{FedError, Result};
use crate::localsolver::{local_solve, Inexactness, ProxSpec, SolverBudget};
use crate::model::{self, Activation, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::trajectory::{mtt_update, project_trajectory, MttConfig, TrajectoryWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedptr")]
    FedPtr,
    #[serde(rename = "fedptr_s")]
    FedPtrS,
    #[serde(rename = "distill_augment")]
    DistillAugment,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedPtr => "fedptr",
            Algorithm::FedPtrS => "fedptr_s",
            Algorithm::DistillAugment => "distill_augment",
        }
    }

    fn client_aux(self) -> bool {
        matches!(self, Algorithm::FedPtr | Algorithm::DistillAugment)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means softmax regression.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub n_clients: usize,
    pub participation_ratio: f64,
    /// Trajectory window `m`: matching runs on `(w^{t-m}, w^t)` once `t > m`.
    pub window: usize,
    pub projection_steps: usize,
    pub projection_lr: f64,
    pub base_lambda: f64,
    pub adaptive_lambda: bool,
    pub mtt: MttConfig,
    /// Matching runs in rounds divisible by this; 0 means once per auxiliary set.
    pub mtt_frequency: usize,
    pub aux_per_class: usize,
    pub solver: SolverBudget,
    pub seed: u64,
    pub model: ModelConfig,
    /// Keep matching and projection but train without the proximal term.
    pub probe: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            algorithm: Algorithm::FedPtr,
            rounds: 100,
            n_clients: 10,
            participation_ratio: 1.0,
            window: 1,
            projection_steps: 5,
            projection_lr: 0.01,
            base_lambda: 0.05,
            adaptive_lambda: true,
            mtt: MttConfig::default(),
            mtt_frequency: 1,
            aux_per_class: 10,
            solver: SolverBudget::default(),
            seed: 0,
            model: ModelConfig::default(),
            probe: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::InvalidArgument(msg));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return bad(format!(
                "participation_ratio must lie in (0, 1], got {}",
                self.participation_ratio
            ));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(self.projection_lr.is_finite() && self.projection_lr > 0.0) {
            return bad(format!("projection_lr must be positive, got {}", self.projection_lr));
        }
        if !(self.base_lambda.is_finite() && self.base_lambda >= 0.0) {
            return bad(format!("base_lambda must be nonnegative, got {}", self.base_lambda));
        }
        if self.aux_per_class == 0 {
            return bad("aux_per_class must be at least 1".into());
        }
        self.mtt.validate()?;
        self.solver.validate()
    }
}

/// Sorted uniform sample of `max(1, round(ratio * n))` distinct clients.
pub fn sample_participants(n: usize, ratio: f64, round: u64, seed: u64) -> Vec<usize> {
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return (0..n).collect();
    }
    let mut rng = stream_rng(seed, Stream::Participation, round, 0);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `sum_i (w_i / sum w) * model_i`, accumulated in the given order.
pub fn aggregate(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.len() != weights.len() {
        return Err(FedError::DimensionMismatch {
            what: "aggregation weights vs models",
            expected: models.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(FedError::InvalidArgument("aggregation weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(FedError::AllZeroWeights);
    }
    let mut acc: Option<ParamVector> = None;
    for (m, &w) in models.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let share = w / total;
        match acc.as_mut() {
            None => {
                let mut first = m.clone();
                first.scale(share);
                acc = Some(first);
            }
            Some(a) => {
                a.ensure_same_layout(m)?;
                a.axpy(share, m);
            }
        }
    }
    Ok(acc.expect("some weight is positive"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub train_loss: f64,
    pub test_acc: f64,
    pub grad_norm: f64,
    pub gamma_mean: Option<f64>,
    pub cos_aux: Option<f64>,
    pub cos_local: Option<f64>,
    pub mtt_loss: Option<f64>,
    pub skipped_flags: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub round: u64,
    pub client: usize,
    pub layer: usize,
    /// `|w_[j] - ref_[j]|` at the start of the local solve.
    pub norm: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProbe {
    pub round: u64,
    pub client: usize,
    pub cos_aux: Option<f64>,
    pub cos_local: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub participants: Vec<usize>,
    pub lambdas: Vec<LambdaRecord>,
    pub probes: Vec<ClientProbe>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    /// Matching updates applied per client.
    pub client: Vec<usize>,
    pub server: usize,
}

impl UpdateCounters {
    pub fn total_client(&self) -> usize {
        self.client.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct FedState {
    round: u64,
    global: ParamVector,
    window: TrajectoryWindow,
    client_windows: Vec<TrajectoryWindow>,
    client_aux: Vec<Option<AuxiliaryDataset>>,
    server_aux: Option<AuxiliaryDataset>,
    counters: UpdateCounters,
}

impl FedState {
    /// Index of the next round to execute.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn global_model(&self) -> &ParamVector {
        &self.global
    }

    pub fn window(&self) -> &TrajectoryWindow {
        &self.window
    }

    pub fn client_aux(&self, i: usize) -> Option<&AuxiliaryDataset> {
        self.client_aux.get(i).and_then(Option::as_ref)
    }

    pub fn server_aux(&self) -> Option<&AuxiliaryDataset> {
        self.server_aux.as_ref()
    }

    pub fn counters(&self) -> &UpdateCounters {
        &self.counters
    }
}

struct ClientOutcome {
    client: usize,
    params: ParamVector,
    weight: f64,
    gamma: Inexactness,
    aux: Option<AuxiliaryDataset>,
    mtt_applied: bool,
    mtt_skipped: bool,
    mtt_loss: Option<f64>,
    projected: Option<ParamVector>,
    lambdas: Vec<LambdaRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub state: FedState,
}

impl RunOutput {
    pub fn metrics(&self) -> Vec<RoundMetrics> {
        self.reports.iter().map(|r| r.metrics.clone()).collect()
    }

    pub fn last5_acc(&self) -> f64 {
        last5_acc(&self.metrics())
    }
}

/// Mean test accuracy of the final five rounds (or all of them if fewer).
pub fn last5_acc(metrics: &[RoundMetrics]) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(5)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|m| m.test_acc).sum::<f64>() / tail.len() as f64
}

/// One configured experiment over a fixed partition.
pub struct Federation {
    cfg: FedConfig,
    spec: ModelSpec,
    num_classes: usize,
    shards: Vec<Option<Dataset>>,
    train_union: Batch,
    test: Batch,
    parallel: bool,
}

impl Federation {
    pub fn new(cfg: FedConfig, train: &Dataset, partition: &ClientPartition, test: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if partition.num_clients() != cfg.n_clients {
            return Err(FedError::DimensionMismatch {
                what: "partition clients vs config",
                expected: cfg.n_clients,
                found: partition.num_clients(),
            });
        }
        if test.dim() != train.dim() {
            return Err(FedError::DimensionMismatch {
                what: "test vs train width",
                expected: train.dim(),
                found: test.dim(),
            });
        }
        let num_classes = train.num_classes().max(test.num_classes());
        let spec = ModelSpec::mlp(train.dim(), &cfg.model.hidden, num_classes, cfg.model.activation)?;
        let mut shards = Vec::with_capacity(cfg.n_clients);
        let mut union = Vec::new();
        for idx in partition.clients() {
            if idx.iter().any(|&i| i >= train.len()) {
                return Err(FedError::InvalidArgument("partition index outside the training set".into()));
            }
            union.extend_from_slice(idx);
            shards.push(if idx.is_empty() {
                None
            } else {
                Some(Dataset::from_batch(train.batch().gather(idx)?, num_classes)?)
            });
        }
        if union.is_empty() {
            return Err(FedError::EmptyDataset);
        }
        union.sort_unstable();
        Ok(Federation {
            train_union: train.batch().gather(&union)?,
            test: test.batch().clone(),
            cfg,
            spec,
            num_classes,
            shards,
            parallel: true,
        })
    }

    /// Runs client work on the rayon pool (default) or on the caller's thread.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shard(&self, i: usize) -> Option<&Dataset> {
        self.shards.get(i).and_then(Option::as_ref)
    }

    pub fn train_batch(&self) -> &Batch {
        &self.train_union
    }

    pub fn init_state(&self) -> Result<FedState> {
        let cfg = &self.cfg;
        let global = self.spec.init_params(derive_seed(cfg.seed, Stream::ModelInit, 0, 0));
        let dim = self.spec.input_dim();
        let mut client_aux = vec![None; cfg.n_clients];
        if cfg.algorithm.client_aux() {
            for (i, shard) in self.shards.iter().enumerate() {
                if let Some(shard) = shard {
                    client_aux[i] = Some(init_auxiliary(
                        Some(shard),
                        self.num_classes,
                        cfg.aux_per_class,
                        dim,
                        AuxMode::Client,
                        derive_seed(cfg.seed, Stream::ClientAux, i as u64, 0),
                    )?);
                }
            }
        }
        let server_aux = if cfg.algorithm == Algorithm::FedPtrS {
            Some(init_auxiliary(
                None,
                self.num_classes,
                cfg.aux_per_class,
                dim,
                AuxMode::Server,
                derive_seed(cfg.seed, Stream::ServerAux, 0, 0),
            )?)
        } else {
            None
        };
        Ok(FedState {
            round: 0,
            global,
            window: TrajectoryWindow::new(cfg.window),
            client_windows: vec![TrajectoryWindow::new(cfg.window); cfg.n_clients],
            client_aux,
            server_aux,
            counters: UpdateCounters {
                client: vec![0; cfg.n_clients],
                server: 0,
            },
        })
    }

    fn mtt_due(&self, t: u64, applied_so_far: usize) -> bool {
        match self.cfg.mtt_frequency {
            0 => applied_so_far == 0,
            f => t.is_multiple_of(f as u64),
        }
    }

    fn prox_for(&self, reference: ParamVector, w_t: &ParamVector, lambda: f64) -> Result<ProxSpec> {
        if lambda == 0.0 {
            Ok(ProxSpec::none(reference))
        } else if self.cfg.adaptive_lambda {
            ProxSpec::adaptive(reference, w_t, lambda)
        } else {
            ProxSpec::fixed(reference, lambda)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn client_round(
        &self,
        t: u64,
        client: usize,
        w_t: &ParamVector,
        window: &TrajectoryWindow,
        aux: Option<AuxiliaryDataset>,
        applied_so_far: usize,
        shared_target: Option<&ParamVector>,
    ) -> Result<ClientOutcome> {
        let cfg = &self.cfg;
        let shard = self.shards[client].as_ref().expect("caller filters empty shards");
        let active = t > cfg.window as u64;
        let mut aux = aux;
        let (mut mtt_applied, mut mtt_skipped, mut mtt_loss) = (false, false, None);
        let mut projected = None;

        if cfg.algorithm.client_aux() && active {
            let cur = aux.take().expect("client auxiliary set initialized");
            let mut next = cur.clone();
            if self.mtt_due(t, applied_so_far) {
                match window.endpoints_or_oldest(t, cfg.window as u64) {
                    Some((_, start, end)) => {
                        let out = mtt_update(&self.spec, &cur, start, end, &cfg.mtt)?;
                        if out.skipped {
                            mtt_skipped = true;
                        } else {
                            mtt_applied = true;
                            mtt_loss = out.final_loss;
                            next = out.aux;
                        }
                    }
                    None => mtt_skipped = true,
                }
            }
            if cfg.algorithm == Algorithm::FedPtr {
                projected = Some(project_trajectory(
                    &self.spec,
                    w_t,
                    &next,
                    cfg.projection_steps,
                    cfg.projection_lr,
                )?);
            }
            aux = Some(next);
        }
        if cfg.algorithm == Algorithm::FedPtrS && active {
            projected = shared_target.cloned();
        }

        let lambda = if cfg.probe { 0.0 } else { cfg.base_lambda };
        let prox = match cfg.algorithm {
            Algorithm::FedAvg => ProxSpec::none(w_t.clone()),
            Algorithm::FedProx | Algorithm::DistillAugment => self.prox_for(w_t.clone(), w_t, lambda)?,
            Algorithm::FedPtr | Algorithm::FedPtrS => match &projected {
                Some(target) => self.prox_for(target.clone(), w_t, lambda)?,
                None => ProxSpec::none(w_t.clone()),
            },
        };

        let augmented;
        let local = match (&aux, cfg.algorithm) {
            (Some(a), Algorithm::DistillAugment) => {
                augmented = Dataset::from_batch(shard.batch().concat(&a.batch())?, self.num_classes)?;
                &augmented
            }
            _ => shard,
        };
        let seed = derive_seed(cfg.seed, Stream::LocalSolve, client as u64, t);
        let sol = local_solve(&self.spec, w_t, local, &prox, &cfg.solver, seed)?;

        let lambdas = if prox.is_adaptive() {
            diagnostics::layer_norms(w_t, prox.reference())?
                .into_iter()
                .zip(prox.per_layer_lambda())
                .enumerate()
                .map(|(layer, (norm, &lambda))| LambdaRecord {
                    round: t,
                    client,
                    layer,
                    norm,
                    lambda,
                })
                .collect()
        } else {
            Vec::new()
        };

        Ok(ClientOutcome {
            client,
            params: sol.params,
            weight: shard.len() as f64,
            gamma: sol.gamma,
            aux,
            mtt_applied,
            mtt_skipped,
            mtt_loss,
            projected,
            lambdas,
        })
    }

    pub fn run_round(&self, state: &mut FedState) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let t = state.round;
        let w_t = state.global.clone();
        state.window.push(t, w_t.clone())?;
        let participants = sample_participants(cfg.n_clients, cfg.participation_ratio, t, cfg.seed);
        for &i in &participants {
            state.client_windows[i].push(t, w_t.clone())?;
        }

        let mut skipped = 0;
        let mut mtt_losses = Vec::new();
        let mut shared_target = None;
        if cfg.algorithm == Algorithm::FedPtrS && t > cfg.window as u64 {
            let mut aux = state.server_aux.take().expect("server auxiliary set initialized");
            if self.mtt_due(t, state.counters.server) {
                match state.window.endpoints(t, cfg.window as u64) {
                    Some((start, end)) => {
                        let out = mtt_update(&self.spec, &aux, start, end, &cfg.mtt)?;
                        if out.skipped {
                            skipped += 1;
                        } else {
                            state.counters.server += 1;
                            mtt_losses.extend(out.final_loss);
                            aux = out.aux;
                        }
                    }
                    None => skipped += 1,
                }
            }
            shared_target = Some(project_trajectory(
                &self.spec,
                &w_t,
                &aux,
                cfg.projection_steps,
                cfg.projection_lr,
            )?);
            state.server_aux = Some(aux);
        }

        let jobs: Vec<(usize, Option<AuxiliaryDataset>, usize)> = participants
            .iter()
            .filter(|&&i| self.shards[i].is_some())
            .map(|&i| (i, state.client_aux[i].take(), state.counters.client[i]))
            .collect();
        let run = |(i, aux, applied): (usize, Option<AuxiliaryDataset>, usize)| {
            self.client_round(t, i, &w_t, &state.client_windows[i], aux, applied, shared_target.as_ref())
        };
        let results: Vec<Result<ClientOutcome>> = if self.parallel {
            jobs.into_par_iter().map(run).collect()
        } else {
            jobs.into_iter().map(run).collect()
        };
        let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut gammas = Vec::new();
        let mut lambdas = Vec::new();
        let mut models = Vec::with_capacity(outcomes.len());
        let mut weights = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            if let Inexactness::Ratio(g) = o.gamma {
                gammas.push(g);
            }
            if o.mtt_applied {
                state.counters.client[o.client] += 1;
            }
            skipped += o.mtt_skipped as usize;
            mtt_losses.extend(o.mtt_loss);
            lambdas.extend(o.lambdas.iter().cloned());
            models.push(o.params.clone());
            weights.push(o.weight);
        }
        let next = if models.is_empty() {
            log::warn!("round {t}: no selected client holds data; global model unchanged");
            w_t.clone()
        } else {
            aggregate(&models, &weights)?
        };

        let mut probes = Vec::new();
        for o in outcomes {
            let cos_aux_local = o
                .projected
                .as_ref()
                .map(|p| similarity_probe(&w_t, p, &o.params, &next));
            probes.push(ClientProbe {
                round: t,
                client: o.client,
                cos_aux: cos_aux_local.and_then(|p| p.cos_aux),
                cos_local: cos_aux_local
                    .map(|p| p.cos_local)
                    .unwrap_or_else(|| diagnostics::cosine_similarity(&w_t.sub(&o.params), &w_t.sub(&next))),
            });
            if o.aux.is_some() {
                state.client_aux[o.client] = o.aux;
            }
        }

        let (train_loss, g) = model::loss_and_grad(&self.spec, &next, &self.train_union)?;
        let metrics = RoundMetrics {
            round: t,
            train_loss,
            test_acc: model::accuracy(&self.spec, &next, &self.test)?,
            grad_norm: g.norm(),
            gamma_mean: mean(&gammas),
            cos_aux: mean(&probes.iter().filter_map(|p| p.cos_aux).collect::<Vec<_>>()),
            cos_local: mean(&probes.iter().filter_map(|p| p.cos_local).collect::<Vec<_>>()),
            mtt_loss: mean(&mtt_losses),
            skipped_flags: skipped,
        };
        state.global = next;
        state.round += 1;
        Ok(RoundReport {
            metrics,
            participants,
            lambdas,
            probes,
        })
    }

    /// All configured rounds from a fresh state.
    pub fn run(&self) -> Result<RunOutput> {
        let mut state = self.init_state()?;
        let mut reports = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            reports.push(self.run_round(&mut state)?);
        }
        Ok(RunOutput { reports, state })
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}
