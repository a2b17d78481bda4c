//! Synchronous FedAvg with a periodic active-learning step on every client.
//!
//! A round broadcasts the global model, lets every client (optionally) query
//! and annotate, then train `E` epochs starting from the broadcast weights,
//! and finally averages the returned models weighted by labeled-sample
//! counts. Clients only ever send parameters to the server.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{annotate_and_move, compute_budget, query, PoolState, QueryBudget, Strategy};
use crate::data::{ClientData, FederatedDataset};
use crate::error::{config_err, shape_err, FedAlError, Result};
use crate::metrics::{cross_client_macro, evaluate, EvalRecord};
use crate::model::{init_params, train_local, Batch, ModelParams};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// T: number of communication rounds.
    pub total_rounds: usize,
    /// E: local epochs per round.
    pub local_epochs: usize,
    /// K: the AL step runs in rounds where `t % K == 0`.
    pub al_interval: usize,
    /// No AL after this round; the remaining rounds fine-tune.
    pub al_last_round: usize,
}

impl Default for Schedule {
    /// 125 epochs, communication every 5, AL every 10 epochs up to epoch 100.
    fn default() -> Self {
        Self {
            total_rounds: 25,
            local_epochs: 5,
            al_interval: 2,
            al_last_round: 20,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(config_err("schedule.total_rounds must be at least 1"));
        }
        if self.al_interval == 0 {
            return Err(config_err("schedule.al_interval must be at least 1"));
        }
        if self.al_last_round > self.total_rounds {
            return Err(config_err(format!(
                "schedule.al_last_round ({}) exceeds total_rounds ({})",
                self.al_last_round, self.total_rounds
            )));
        }
        Ok(())
    }

    pub fn is_al_round(&self, round: usize) -> bool {
        round >= 1 && round <= self.al_last_round && round.is_multiple_of(self.al_interval)
    }

    /// 1-based index of the AL execution happening in `round`, if any.
    pub fn al_index(&self, round: usize) -> Option<usize> {
        self.is_al_round(round).then(|| round / self.al_interval)
    }

    pub fn total_al_rounds(&self) -> usize {
        self.al_last_round / self.al_interval
    }

    pub fn al_rounds(&self) -> Vec<usize> {
        (1..=self.al_last_round)
            .filter(|&t| self.is_al_round(t))
            .collect()
    }
}

/// Global model held by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ModelParams,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlClientState {
    pub id: usize,
    pub pool: PoolState,
    /// Model this client trained last round; first ensemble member in the AL step.
    pub cached_local: ModelParams,
    pub optimizer: OptimizerState,
    pub budget: Option<QueryBudget>,
}

/// Settings shared by every client in a round.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub seed: u64,
    pub schedule: Schedule,
    pub strategy: Option<Strategy>,
    pub batch_size: usize,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub round: usize,
    pub client: usize,
    pub al_round: usize,
    pub count: usize,
    pub labeled_after: usize,
}

/// `psi = sum_m (n_m / n) phi_m`, accumulated as a running weighted mean so
/// that identical inputs come back unchanged; every coordinate is kept inside
/// the clients' `[min, max]` range.
pub fn fedavg_aggregate(
    client_params: &[&ModelParams],
    client_weights: &[f64],
) -> Result<ModelParams> {
    let first = client_params
        .first()
        .ok_or_else(|| config_err("aggregation needs at least one client"))?;
    if client_params.len() != client_weights.len() {
        return Err(shape_err(format!(
            "{} client models but {} weights",
            client_params.len(),
            client_weights.len()
        )));
    }
    if let Some(p) = client_params
        .iter()
        .find(|p| p.layer_dims() != first.layer_dims())
    {
        return Err(shape_err(format!(
            "client dims {:?} differ from {:?}",
            p.layer_dims(),
            first.layer_dims()
        )));
    }
    if client_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(config_err(
            "aggregation weights must be finite and nonnegative",
        ));
    }
    let start = client_weights
        .iter()
        .position(|&w| w > 0.0)
        .ok_or_else(|| config_err("aggregation weights sum to zero"))?;

    let mut acc = client_params[start].weights().to_vec();
    let mut seen = client_weights[start];
    for (p, &w) in client_params.iter().zip(client_weights).skip(start + 1) {
        if w == 0.0 {
            continue;
        }
        seen += w;
        let alpha = w / seen;
        for (a, &x) in acc.iter_mut().zip(p.weights()) {
            *a += alpha * (x - *a);
        }
    }
    for (i, a) in acc.iter_mut().enumerate() {
        let (lo, hi) = client_params
            .iter()
            .map(|p| p.weights()[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        *a = a.clamp(lo, hi);
    }
    ModelParams::from_parts(first.layer_dims().to_vec(), acc)
}

/// One client's share of round `round`: optional AL step, then `E` epochs
/// of local training starting from the broadcast model.
pub fn run_client_round(
    client: &mut FlClientState,
    incoming_global: &ModelParams,
    ctx: &RoundContext,
    round: usize,
    data: &ClientData,
) -> Result<(ModelParams, Option<AnnotationEvent>)> {
    if round == 0 {
        return Err(FedAlError::Protocol("rounds are numbered from 1".into()));
    }
    if client.cached_local.layer_dims() != incoming_global.layer_dims() {
        return Err(shape_err(
            "cached local model dims differ from global model",
        ));
    }
    let mut rng = rng::client_round_stream(ctx.seed, client.id, round);

    let mut event = None;
    if let (Some(strategy), Some(k)) = (ctx.strategy, ctx.schedule.al_index(round)) {
        let budget = client.budget.ok_or_else(|| {
            FedAlError::Protocol(format!("client {} has no query budget", client.id))
        })?;
        let selected = query(
            strategy,
            &client.pool,
            Some(&client.cached_local),
            Some(incoming_global),
            budget.for_round(k),
            &data.train_features,
            &mut rng,
        )?;
        annotate_and_move(&mut client.pool, &selected, &data.train_labels)?;
        event = Some(AnnotationEvent {
            round,
            client: client.id,
            al_round: k,
            count: selected.len(),
            labeled_after: client.pool.labeled_len(),
        });
    }

    let labeled = client
        .pool
        .labeled_batch(&data.train_features)
        .map_err(|_| {
            config_err(format!(
                "client {} has an empty labeled pool; raise init_label_fraction",
                client.id
            ))
        })?;
    // broadcast-replace: local training always starts from the global model
    let (trained, opt) = train_local(
        incoming_global,
        &client.optimizer,
        &labeled,
        ctx.schedule.local_epochs,
        ctx.batch_size,
        &mut rng,
    )?;
    client.optimizer = opt;
    client.cached_local = trained.clone();
    Ok((trained, event))
}

/// Global model evaluated on every client for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Sum of labeled over sum of training samples across clients.
    pub sample_ratio: f64,
    pub labeled_counts: Vec<usize>,
    pub al_executed: bool,
    pub val: Vec<EvalRecord>,
    pub val_macro: EvalRecord,
    pub test: Vec<EvalRecord>,
    pub test_macro: EvalRecord,
}

fn evaluate_round(
    models: &[&ModelParams],
    data: &FederatedDataset,
    round: usize,
    sample_ratio: f64,
) -> Result<(Vec<EvalRecord>, EvalRecord, Vec<EvalRecord>, EvalRecord)> {
    let mut val = Vec::with_capacity(data.num_clients());
    let mut test = Vec::with_capacity(data.num_clients());
    for (m, c) in data.clients.iter().enumerate() {
        let model = models[m.min(models.len() - 1)];
        val.push(evaluate(
            model,
            &c.val_features,
            &c.val_labels,
            Some(m),
            round,
            sample_ratio,
        )?);
        test.push(evaluate(
            model,
            &c.test_features,
            &c.test_labels,
            Some(m),
            round,
            sample_ratio,
        )?);
    }
    let mut val_macro = cross_client_macro(&val)?;
    let mut test_macro = cross_client_macro(&test)?;
    val_macro.sample_ratio = sample_ratio;
    test_macro.sample_ratio = sample_ratio;
    Ok((val, val_macro, test, test_macro))
}

fn sample_ratio(clients: &[FlClientState], data: &FederatedDataset) -> f64 {
    let labeled: usize = clients.iter().map(|c| c.pool.labeled_len()).sum();
    let total: usize = data.clients.iter().map(|c| c.train_len()).sum();
    labeled as f64 / total as f64
}

/// Broadcast, run every client, aggregate, evaluate.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [FlClientState],
    data: &FederatedDataset,
    ctx: &RoundContext,
) -> Result<(RoundRecord, Vec<AnnotationEvent>)> {
    if clients.len() != data.num_clients() {
        return Err(shape_err(format!(
            "{} client states for {} client datasets",
            clients.len(),
            data.num_clients()
        )));
    }
    let t = server.round + 1;
    let global = &server.global;
    let outputs: Vec<(ModelParams, Option<AnnotationEvent>)> = if ctx.parallel {
        clients
            .par_iter_mut()
            .zip(data.clients.par_iter())
            .map(|(c, d)| run_client_round(c, global, ctx, t, d))
            .collect::<Result<_>>()?
    } else {
        clients
            .iter_mut()
            .zip(&data.clients)
            .map(|(c, d)| run_client_round(c, global, ctx, t, d))
            .collect::<Result<_>>()?
    };

    let weights: Vec<f64> = clients
        .iter()
        .map(|c| c.pool.labeled_len() as f64)
        .collect();
    let locals: Vec<&ModelParams> = outputs.iter().map(|(p, _)| p).collect();
    server.global = fedavg_aggregate(&locals, &weights)?;
    server.round = t;

    let ratio = sample_ratio(clients, data);
    let (val, val_macro, test, test_macro) = evaluate_round(&[&server.global], data, t, ratio)?;
    let events: Vec<AnnotationEvent> = outputs.into_iter().filter_map(|(_, e)| e).collect();
    Ok((
        RoundRecord {
            round: t,
            sample_ratio: ratio,
            labeled_counts: clients.iter().map(|c| c.pool.labeled_len()).collect(),
            al_executed: !events.is_empty(),
            val,
            val_macro,
            test,
            test_macro,
        },
        events,
    ))
}

/// Validation metric used to pick the reported model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    MacroF1,
    MicroF1,
    Auc,
}

impl SelectionMetric {
    pub fn of(self, r: &EvalRecord) -> f64 {
        match self {
            SelectionMetric::MacroF1 => r.macro_f1,
            SelectionMetric::MicroF1 => r.micro_f1,
            SelectionMetric::Auc => r.auc.unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// What a single run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// FedAvg with an AL step using the given sampling function.
    Active(Strategy),
    /// FedAvg with every training sample labeled from round 1.
    FullDataFl,
    /// One model on the pooled training data of all clients.
    Centralized,
    /// Every client trains alone; no aggregation.
    Localized,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Active(s) => s.name(),
            Mode::FullDataFl => "FullDataFL",
            Mode::Centralized => "Centralized",
            Mode::Localized => "Localized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: Schedule,
    pub gamma: f64,
    pub init_label_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub selection_metric: SelectionMetric,
    pub parallel_clients: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            gamma: 0.5,
            init_label_fraction: 0.05,
            hidden_dims: vec![32],
            optimizer: AdamConfig::default(),
            batch_size: 16,
            selection_metric: SelectionMetric::MacroF1,
            parallel_clients: true,
        }
    }
}

impl RunConfig {
    pub fn layer_dims(&self, data: &FederatedDataset) -> Vec<usize> {
        let mut dims = vec![data.feature_dim];
        dims.extend(&self.hidden_dims);
        dims.push(data.num_classes);
        dims
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.init_label_fraction) {
            return Err(config_err(format!(
                "init_label_fraction must be in [0, 1], got {}",
                self.init_label_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(config_err("hidden_dims entries must be positive"));
        }
        if matches!(mode, Mode::Active(_)) && self.schedule.total_al_rounds() == 0 {
            return Err(config_err(
                "schedule has no AL rounds: al_last_round must be >= al_interval",
            ));
        }
        Ok(())
    }
}

/// Best model's held-out test performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    /// Round of the selected model, per client.
    pub best_rounds: Vec<usize>,
    pub per_client: Vec<EvalRecord>,
    pub macro_avg: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub mode: Mode,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub rounds: Vec<RoundRecord>,
    pub annotations: Vec<AnnotationEvent>,
    pub initial_labeled: Vec<usize>,
    pub train_sizes: Vec<usize>,
    /// Number of FedAvg aggregations performed.
    pub aggregations: usize,
    pub final_report: FinalReport,
}

fn init_clients(
    data: &FederatedDataset,
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
    psi0: &ModelParams,
) -> Result<Vec<FlClientState>> {
    data.clients
        .iter()
        .enumerate()
        .map(|(m, c)| {
            let pool = match mode {
                Mode::Active(_) => PoolState::init_random(
                    &c.train_labels,
                    cfg.init_label_fraction,
                    data.num_classes,
                    &mut rng::stream(seed, &[tag::INIT_POOL, m as u64]),
                )?,
                _ => PoolState::fully_labeled(&c.train_labels),
            };
            let budget = match mode {
                Mode::Active(_) => Some(compute_budget(
                    pool.initial_unlabeled_count().max(1),
                    cfg.gamma,
                    cfg.schedule.total_al_rounds(),
                )?),
                _ => None,
            };
            Ok(FlClientState {
                id: m,
                pool,
                cached_local: psi0.clone(),
                optimizer: OptimizerState::new(psi0.len(), cfg.optimizer)?,
                budget,
            })
        })
        .collect()
}

/// Round index of the best validation score; earliest wins ties.
fn best_round<'a>(scores: impl Iterator<Item = (usize, f64)> + 'a) -> usize {
    scores
        .fold((0, f64::NEG_INFINITY), |(br, bs), (r, s)| {
            if s > bs {
                (r, s)
            } else {
                (br, bs)
            }
        })
        .0
}

fn federated_run(
    data: &FederatedDataset,
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<RunHistory> {
    let psi0 = init_params(&cfg.layer_dims(data), seed)?;
    let mut clients = init_clients(data, cfg, mode, seed, &psi0)?;
    let initial_labeled = clients.iter().map(|c| c.pool.labeled_len()).collect();
    let mut server = ServerState {
        global: psi0,
        round: 0,
    };
    let ctx = RoundContext {
        seed,
        schedule: cfg.schedule,
        strategy: match mode {
            Mode::Active(s) => Some(s),
            _ => None,
        },
        batch_size: cfg.batch_size,
        parallel: cfg.parallel_clients,
    };

    let mut rounds = Vec::with_capacity(cfg.schedule.total_rounds);
    let mut annotations = Vec::new();
    for _ in 0..cfg.schedule.total_rounds {
        let (record, events) = run_round(&mut server, &mut clients, data, &ctx)?;
        rounds.push(record);
        annotations.extend(events);
    }

    let best = best_round(
        rounds
            .iter()
            .enumerate()
            .map(|(i, r)| (i, cfg.selection_metric.of(&r.val_macro))),
    );
    let chosen = &rounds[best];
    Ok(RunHistory {
        mode,
        seed,
        gamma: matches!(mode, Mode::Active(_)).then_some(cfg.gamma),
        initial_labeled,
        train_sizes: data.clients.iter().map(|c| c.train_len()).collect(),
        aggregations: rounds.len(),
        final_report: FinalReport {
            best_rounds: vec![chosen.round; data.num_clients()],
            per_client: chosen.test.clone(),
            macro_avg: chosen.test_macro.clone(),
        },
        annotations,
        rounds,
    })
}

fn pooled_train(data: &FederatedDataset) -> Result<Batch> {
    let views: Vec<_> = data
        .clients
        .iter()
        .map(|c| c.train_features.view())
        .collect();
    let features = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| shape_err(format!("cannot pool client features: {e}")))?;
    let labels = data
        .clients
        .iter()
        .flat_map(|c| c.train_labels.iter().copied())
        .collect();
    Batch::new(features, labels)
}

fn centralized_run(data: &FederatedDataset, cfg: &RunConfig, seed: u64) -> Result<RunHistory> {
    let mut params = init_params(&cfg.layer_dims(data), seed)?;
    let mut opt = OptimizerState::new(params.len(), cfg.optimizer)?;
    let pooled = pooled_train(data)?;
    let mut rounds = Vec::with_capacity(cfg.schedule.total_rounds);
    for t in 1..=cfg.schedule.total_rounds {
        // same stream as client 0 of a federated run, so M = 1 coincides with FedAvg
        let mut rng = rng::client_round_stream(seed, 0, t);
        let (p, o) = train_local(
            &params,
            &opt,
            &pooled,
            cfg.schedule.local_epochs,
            cfg.batch_size,
            &mut rng,
        )?;
        params = p;
        opt = o;
        let (val, val_macro, test, test_macro) = evaluate_round(&[&params], data, t, 1.0)?;
        rounds.push(RoundRecord {
            round: t,
            sample_ratio: 1.0,
            labeled_counts: data.clients.iter().map(|c| c.train_len()).collect(),
            al_executed: false,
            val,
            val_macro,
            test,
            test_macro,
        });
    }
    let best = best_round(
        rounds
            .iter()
            .enumerate()
            .map(|(i, r)| (i, cfg.selection_metric.of(&r.val_macro))),
    );
    let chosen = &rounds[best];
    Ok(RunHistory {
        mode: Mode::Centralized,
        seed,
        gamma: None,
        initial_labeled: data.clients.iter().map(|c| c.train_len()).collect(),
        train_sizes: data.clients.iter().map(|c| c.train_len()).collect(),
        aggregations: 0,
        final_report: FinalReport {
            best_rounds: vec![chosen.round; data.num_clients()],
            per_client: chosen.test.clone(),
            macro_avg: chosen.test_macro.clone(),
        },
        annotations: Vec::new(),
        rounds,
    })
}

fn localized_run(data: &FederatedDataset, cfg: &RunConfig, seed: u64) -> Result<RunHistory> {
    let psi0 = init_params(&cfg.layer_dims(data), seed)?;
    let mut models: Vec<ModelParams> = vec![psi0.clone(); data.num_clients()];
    let mut opts: Vec<OptimizerState> = (0..data.num_clients())
        .map(|_| OptimizerState::new(psi0.len(), cfg.optimizer))
        .collect::<Result<_>>()?;
    let batches: Vec<Batch> = data
        .clients
        .iter()
        .map(|c| c.train_batch())
        .collect::<Result<_>>()?;

    let mut rounds = Vec::with_capacity(cfg.schedule.total_rounds);
    for t in 1..=cfg.schedule.total_rounds {
        let step =
            |(m, (params, opt)): (usize, (&mut ModelParams, &mut OptimizerState))| -> Result<()> {
                let mut rng = rng::client_round_stream(seed, m, t);
                let (p, o) = train_local(
                    params,
                    opt,
                    &batches[m],
                    cfg.schedule.local_epochs,
                    cfg.batch_size,
                    &mut rng,
                )?;
                *params = p;
                *opt = o;
                Ok(())
            };
        if cfg.parallel_clients {
            models
                .par_iter_mut()
                .zip(opts.par_iter_mut())
                .enumerate()
                .try_for_each(step)?;
        } else {
            models
                .iter_mut()
                .zip(opts.iter_mut())
                .enumerate()
                .try_for_each(step)?;
        }
        let refs: Vec<&ModelParams> = models.iter().collect();
        let (val, val_macro, test, test_macro) = evaluate_round(&refs, data, t, 1.0)?;
        rounds.push(RoundRecord {
            round: t,
            sample_ratio: 1.0,
            labeled_counts: data.clients.iter().map(|c| c.train_len()).collect(),
            al_executed: false,
            val,
            val_macro,
            test,
            test_macro,
        });
    }

    let mut best_rounds = Vec::with_capacity(data.num_clients());
    let mut per_client = Vec::with_capacity(data.num_clients());
    for m in 0..data.num_clients() {
        let best = best_round(
            rounds
                .iter()
                .enumerate()
                .map(|(i, r)| (i, cfg.selection_metric.of(&r.val[m]))),
        );
        best_rounds.push(rounds[best].round);
        per_client.push(rounds[best].test[m].clone());
    }
    let mut macro_avg = cross_client_macro(&per_client)?;
    macro_avg.round = 0;
    Ok(RunHistory {
        mode: Mode::Localized,
        seed,
        gamma: None,
        initial_labeled: data.clients.iter().map(|c| c.train_len()).collect(),
        train_sizes: data.clients.iter().map(|c| c.train_len()).collect(),
        aggregations: 0,
        final_report: FinalReport {
            best_rounds,
            per_client,
            macro_avg,
        },
        annotations: Vec::new(),
        rounds,
    })
}

/// Run one arm for one seed on a prepared dataset.
pub fn run_experiment(
    data: &FederatedDataset,
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<RunHistory> {
    cfg.validate(mode)?;
    if data.num_clients() == 0 {
        return Err(config_err("dataset has no clients"));
    }
    match mode {
        Mode::Active(_) | Mode::FullDataFl => federated_run(data, cfg, mode, seed),
        Mode::Centralized => centralized_run(data, cfg, seed),
        Mode::Localized => localized_run(data, cfg, seed),
    }
}
