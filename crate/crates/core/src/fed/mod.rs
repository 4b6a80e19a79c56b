//! Two-phase federated split training with per-domain FedAvg, plus the
//! centralized and full-model federated baselines.
//!
//! Every client keeps its own AdamW moments across rounds; aggregation only
//! overwrites parameter values. Batches and dropout masks come from a
//! per-client ChaCha stream, so runs are bit-reproducible for a seed.

mod comm;

pub use comm::{comm_cost, fl_cost, fsdt_cost, ClientCost, CommCost, CommLedger, RoundTraffic};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::OfflineDataset;
use crate::dt::{evaluate_loss, sample_batch, train_step, ContextBatch, DtConfig, SplitModel, Trainable};
use crate::env::RatProfile;
use crate::error::{Error, Result};
use crate::nn::params::check_compatible;
use crate::nn::{AdamW, Float, ParamSet, Traffic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    /// RAT profile names; the prefix before '/' is the agent type.
    pub clients: Vec<String>,
    pub rounds: usize,
    /// Phase-1 steps per client per round.
    pub client_steps: usize,
    /// Phase-2 decoder steps per round, shared evenly among clients.
    pub server_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Windows per client in the fixed held-out batch.
    pub heldout_batch: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            clients: RatProfile::BUILTIN_NAMES.iter().map(|s| s.to_string()).collect(),
            rounds: 20,
            client_steps: 100,
            server_steps: 100,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            heldout_batch: 256,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let mut names = self.clients.clone();
        names.sort();
        names.dedup();
        if self.clients.is_empty() || names.len() != self.clients.len() {
            return Err(Error::Config("client list must be nonempty and free of duplicates".into()));
        }
        if self.batch_size == 0
            || self.heldout_batch == 0
            || self.lr.is_nan()
            || self.lr <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!("invalid federation settings {self:?}")));
        }
        Ok(())
    }

    /// Agent types in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.clients {
            let d = domain_of(c);
            if !out.iter().any(|o| o == d) {
                out.push(d.to_string());
            }
        }
        out
    }

    /// Gradient steps one FSDT run takes over all parties; the baselines get
    /// the same budget.
    pub fn total_steps(&self) -> usize {
        self.rounds * (self.clients.len() * self.client_steps + self.server_steps)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.lr, self.weight_decay)
    }
}

pub fn domain_of(client: &str) -> &str {
    client.split('/').next().unwrap_or(client)
}

/// `total` split into `parts` near-equal shares, larger shares first.
pub fn even_split(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Fsdt,
    Cdt,
    Fdt,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Fsdt, Algo::Cdt, Algo::Fdt];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Fsdt => "fsdt",
            Algo::Cdt => "cdt",
            Algo::Fdt => "fdt",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}; expected fsdt, cdt or fdt")))
    }
}

/// Element-wise mean of parameter sets with identical names and shapes.
pub fn fedavg<T: Float>(sets: &[&ParamSet<T>]) -> Result<ParamSet<T>> {
    let (first, rest) = sets.split_first().ok_or_else(|| Error::usage("fedavg of zero parameter sets"))?;
    let mut out = first.values_only();
    for other in rest {
        check_compatible(&out, other)?;
        for (acc, p) in out.iter_mut().zip(other.iter()) {
            for (a, &v) in acc.value.data_mut().iter_mut().zip(p.value.data()) {
                *a += v;
            }
        }
    }
    let n = T::lit(sets.len() as f64);
    for p in out.iter_mut() {
        for a in p.value.data_mut() {
            *a /= n;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
    Local,
    Central,
    Heldout,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Local => "local",
            Phase::Central => "central",
            Phase::Heldout => "heldout",
        }
    }
}

/// Mean loss of one party in one phase of one round. Held-out entries are
/// action MSE on a fixed batch, with round 0 taken before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub round: usize,
    pub client: String,
    pub phase: Phase,
    pub loss: f64,
}

/// Parameter fingerprints around the two phases of one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCheck {
    pub round: usize,
    pub decoder_before_phase1: String,
    pub decoder_after_phase1: String,
    pub locals_before_phase2: String,
    pub locals_after_phase2: String,
}

impl PhaseCheck {
    pub fn holds(&self) -> bool {
        self.decoder_before_phase1 == self.decoder_after_phase1 && self.locals_before_phase2 == self.locals_after_phase2
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct DomainModel {
    pub domain: String,
    pub model: SplitModel<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub algo: Algo,
    /// One deployable model per agent type. The baselines repeat their single
    /// model under every agent type.
    pub models: Vec<DomainModel>,
    pub ledger: CommLedger,
    pub history: Vec<LossRecord>,
    /// Every training-step loss in execution order.
    pub trace: Vec<f64>,
    pub checks: Vec<PhaseCheck>,
}

impl TrainOutcome {
    pub fn model_for(&self, client: &str) -> Option<&SplitModel<f32>> {
        let d = domain_of(client);
        self.models.iter().find(|m| m.domain == d).map(|m| &m.model)
    }

    /// Mean held-out loss over clients, indexed by round.
    pub fn heldout_curve(&self) -> Vec<f64> {
        let rounds = self.history.iter().filter(|h| h.phase == Phase::Heldout).map(|h| h.round).max();
        let Some(rounds) = rounds else { return Vec::new() };
        (0..=rounds)
            .map(|r| {
                let v: Vec<f64> =
                    self.history.iter().filter(|h| h.phase == Phase::Heldout && h.round == r).map(|h| h.loss).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("round,client,phase,loss\n");
        for h in &self.history {
            out.push_str(&format!("{},{},{},{}\n", h.round, h.client, h.phase.as_str(), h.loss));
        }
        out
    }
}

/// One client's training inputs.
#[derive(Clone, Copy, Debug)]
pub struct ClientData<'a> {
    pub train: &'a OfflineDataset,
    pub heldout: Option<&'a OfflineDataset>,
}

/// Losses and split-point traffic of a run of optimizer steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseStats {
    pub losses: Vec<f64>,
    pub traffic: Traffic,
}

impl PhaseStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().sum::<f64>() / self.losses.len() as f64)
    }

    fn absorb(&mut self, other: PhaseStats) {
        self.losses.extend(other.losses);
        self.traffic.forward += other.traffic.forward;
        self.traffic.backward += other.traffic.backward;
    }
}

/// Edge-side state of one client: its embedding and prediction modules with
/// their optimizer moments, and its sampling stream.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub name: String,
    pub embed: ParamSet<f32>,
    pub predict: ParamSet<f32>,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(name: impl Into<String>, init: &SplitModel<f32>, seed: u64, index: usize) -> Self {
        ClientState {
            name: name.into(),
            embed: init.embed.clone(),
            predict: init.predict.clone(),
            rng: client_rng(seed, index),
        }
    }

    pub fn domain(&self) -> &str {
        domain_of(&self.name)
    }

    /// Hash of the embedding and prediction values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.embed.fingerprint());
        h.update(self.predict.fingerprint());
        h.finalize().into()
    }
}

fn client_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn heldout_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + index as u64);
    rng
}

/// Runs `f` on a model assembled from borrowed parts, then hands the parts back.
fn with_parts<R>(
    config: &DtConfig,
    embed: &mut ParamSet<f32>,
    decoder: &mut ParamSet<f32>,
    predict: &mut ParamSet<f32>,
    f: impl FnOnce(&mut SplitModel<f32>) -> R,
) -> R {
    let mut model = SplitModel {
        config: config.clone(),
        embed: std::mem::take(embed),
        decoder: std::mem::take(decoder),
        predict: std::mem::take(predict),
    };
    let out = f(&mut model);
    *embed = model.embed;
    *decoder = model.decoder;
    *predict = model.predict;
    out
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    model: &mut SplitModel<f32>,
    opt: &AdamW,
    data: &OfflineDataset,
    rng: &mut ChaCha8Rng,
    steps: usize,
    batch_size: usize,
    trainable: Trainable,
    split: bool,
) -> Result<PhaseStats> {
    let mut stats = PhaseStats::default();
    for _ in 0..steps {
        let batch = sample_batch(&data.trajectories, &model.config, batch_size, rng)?;
        let dropout_seed = rng.random::<u64>();
        let s = train_step(model, opt, &batch, trainable, split, dropout_seed)?;
        stats.losses.push(s.loss);
        stats.traffic.forward += s.traffic.forward;
        stats.traffic.backward += s.traffic.backward;
    }
    Ok(stats)
}

/// Phase 1 for one client: `steps` updates of its embedding and prediction
/// modules through the frozen decoder.
pub fn update_local(
    client: &mut ClientState,
    data: &OfflineDataset,
    decoder: &mut ParamSet<f32>,
    config: &DtConfig,
    opt: &AdamW,
    steps: usize,
    batch_size: usize,
) -> Result<PhaseStats> {
    data.ensure_trainable()?;
    let ClientState { embed, predict, rng, .. } = client;
    with_parts(config, embed, decoder, predict, |m| {
        run_steps(m, opt, data, rng, steps, batch_size, Trainable::LOCAL, true)
    })
}

/// Phase 2: the decoder visits clients in order, taking its share of `steps`
/// updates on each client's data with that client's modules frozen.
pub fn train_server(
    clients: &mut [ClientState],
    data: &[&OfflineDataset],
    decoder: &mut ParamSet<f32>,
    config: &DtConfig,
    opt: &AdamW,
    steps: usize,
    batch_size: usize,
) -> Result<Vec<PhaseStats>> {
    if clients.len() != data.len() {
        return Err(Error::usage("one dataset per client is required"));
    }
    let shares = even_split(steps, clients.len());
    let mut out = Vec::with_capacity(clients.len());
    for ((client, ds), share) in clients.iter_mut().zip(data).zip(shares) {
        let ClientState { embed, predict, rng, .. } = client;
        let stats = with_parts(config, embed, decoder, predict, |m| {
            run_steps(m, opt, ds, rng, share, batch_size, Trainable::DECODER, true)
        })?;
        out.push(stats);
    }
    Ok(out)
}

fn check_inputs(fed: &FedConfig, config: &DtConfig, data: &[ClientData]) -> Result<()> {
    fed.validate()?;
    config.validate()?;
    if data.len() != fed.clients.len() {
        return Err(Error::Config(format!("{} datasets for {} clients", data.len(), fed.clients.len())));
    }
    for d in data {
        for ds in std::iter::once(d.train).chain(d.heldout) {
            ds.ensure_trainable()?;
            if ds.state_dim != config.state_dim || ds.action_dim != config.action_dim {
                return Err(Error::Schema(format!(
                    "dataset dims {}/{} do not match model dims {}/{}",
                    ds.state_dim, ds.action_dim, config.state_dim, config.action_dim
                )));
            }
        }
    }
    Ok(())
}

fn heldout_batches(
    fed: &FedConfig,
    config: &DtConfig,
    data: &[ClientData],
    seed: u64,
) -> Result<Vec<Option<ContextBatch>>> {
    data.iter()
        .enumerate()
        .map(|(i, d)| {
            d.heldout
                .map(|h| sample_batch(&h.trajectories, config, fed.heldout_batch, &mut heldout_rng(seed, i)))
                .transpose()
        })
        .collect()
}

fn new_ledger(algo: Algo, fed: &FedConfig, config: &DtConfig) -> CommLedger {
    CommLedger {
        algo: algo.as_str().into(),
        rounds: fed.rounds,
        batch_size: fed.batch_size,
        context_len: config.context_len,
        hidden_dim: config.hidden_dim,
        clients: if algo == Algo::Cdt { Vec::new() } else { fed.clients.clone() },
        entries: Vec::new(),
    }
}

/// Two-phase federated split training.
///
/// Each round: every client updates its edge modules through the frozen
/// decoder, clients of one agent type are averaged, then the decoder trains on
/// each client in turn with the averaged edge modules frozen. Decoder and edge
/// fingerprints are compared around the phases every round; a change is a
/// contract error.
pub fn train_fsdt(fed: &FedConfig, config: &DtConfig, data: &[ClientData], seed: u64) -> Result<TrainOutcome> {
    check_inputs(fed, config, data)?;
    let init = SplitModel::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let opt = fed.optimizer();
    let mut decoder = init.decoder.clone();
    let mut clients: Vec<ClientState> =
        fed.clients.iter().enumerate().map(|(i, name)| ClientState::new(name, &init, seed, i)).collect();
    let train: Vec<&OfflineDataset> = data.iter().map(|d| d.train).collect();
    let heldout = heldout_batches(fed, config, data, seed)?;
    let p_local = (init.counts().local() * 2) as u64;

    let mut out = TrainOutcome {
        algo: Algo::Fsdt,
        models: Vec::new(),
        ledger: new_ledger(Algo::Fsdt, fed, config),
        history: Vec::new(),
        trace: Vec::new(),
        checks: Vec::new(),
    };
    let eval =
        |clients: &mut [ClientState], decoder: &mut ParamSet<f32>, round: usize, history: &mut Vec<LossRecord>| {
            for (c, batch) in clients.iter_mut().zip(&heldout) {
                if let Some(batch) = batch {
                    let loss = with_parts(config, &mut c.embed, decoder, &mut c.predict, |m| evaluate_loss(m, batch))?;
                    history.push(LossRecord { round, client: c.name.clone(), phase: Phase::Heldout, loss });
                }
            }
            Ok::<_, Error>(())
        };
    eval(&mut clients, &mut decoder, 0, &mut out.history)?;

    for round in 1..=fed.rounds {
        let decoder_before = decoder.fingerprint();
        let mut phase1 = Vec::with_capacity(clients.len());
        for (c, ds) in clients.iter_mut().zip(&train) {
            phase1.push(update_local(c, ds, &mut decoder, config, &opt, fed.client_steps, fed.batch_size)?);
        }
        let decoder_after = decoder.fingerprint();

        for domain in fed.domains() {
            let members: Vec<usize> = (0..clients.len()).filter(|&i| clients[i].domain() == domain).collect();
            let embed = fedavg(&members.iter().map(|&i| &clients[i].embed).collect::<Vec<_>>())?;
            let predict = fedavg(&members.iter().map(|&i| &clients[i].predict).collect::<Vec<_>>())?;
            for &i in &members {
                clients[i].embed.copy_values_from(&embed)?;
                clients[i].predict.copy_values_from(&predict)?;
            }
        }

        let locals_before = locals_fingerprint(&clients);
        let phase2 = train_server(&mut clients, &train, &mut decoder, config, &opt, fed.server_steps, fed.batch_size)?;
        let locals_after = locals_fingerprint(&clients);

        let check = PhaseCheck {
            round,
            decoder_before_phase1: hex(&decoder_before),
            decoder_after_phase1: hex(&decoder_after),
            locals_before_phase2: hex(&locals_before),
            locals_after_phase2: hex(&locals_after),
        };
        if !check.holds() {
            return Err(Error::Contract(format!("phase isolation violated in round {round}")));
        }
        out.checks.push(check);

        out.trace.extend(phase1.iter().chain(&phase2).flat_map(|s| s.losses.iter().copied()));
        for ((c, p1), p2) in clients.iter().zip(phase1).zip(phase2) {
            for (phase, stats) in [(Phase::Phase1, &p1), (Phase::Phase2, &p2)] {
                if let Some(loss) = stats.mean_loss() {
                    out.history.push(LossRecord { round, client: c.name.clone(), phase, loss });
                }
            }
            let mut both = p1;
            both.absorb(p2);
            out.ledger.entries.push(RoundTraffic {
                round,
                client: c.name.clone(),
                params: p_local,
                features: both.traffic.forward,
                gradients: both.traffic.backward,
                split_batches: both.losses.len() as u64,
            });
        }
        eval(&mut clients, &mut decoder, round, &mut out.history)?;
    }

    for domain in fed.domains() {
        let c = clients.iter().find(|c| c.domain() == domain).expect("every domain has a client");
        out.models.push(DomainModel {
            domain,
            model: SplitModel {
                config: config.clone(),
                embed: c.embed.values_only(),
                decoder: decoder.values_only(),
                predict: c.predict.values_only(),
            },
        });
    }
    Ok(out)
}

fn locals_fingerprint(clients: &[ClientState]) -> [u8; 32] {
    let mut h = Sha256::new();
    for c in clients {
        h.update(c.fingerprint());
    }
    h.finalize().into()
}

fn replicated(fed: &FedConfig, model: &SplitModel<f32>) -> Vec<DomainModel> {
    let values = SplitModel {
        config: model.config.clone(),
        embed: model.embed.values_only(),
        decoder: model.decoder.values_only(),
        predict: model.predict.values_only(),
    };
    fed.domains().into_iter().map(|domain| DomainModel { domain, model: values.clone() }).collect()
}

fn eval_heldout(
    model: &SplitModel<f32>,
    names: &[String],
    heldout: &[Option<ContextBatch>],
    round: usize,
    history: &mut Vec<LossRecord>,
) -> Result<()> {
    for (name, batch) in names.iter().zip(heldout) {
        if let Some(batch) = batch {
            let loss = evaluate_loss(model, batch)?;
            history.push(LossRecord { round, client: name.clone(), phase: Phase::Heldout, loss });
        }
    }
    Ok(())
}

/// Full-model federated baseline: every client trains all layers locally, then
/// all layers are averaged over all clients. A client's local budget per round
/// is its phase-1 steps plus its share of the phase-2 steps.
pub fn train_fdt(fed: &FedConfig, config: &DtConfig, data: &[ClientData], seed: u64) -> Result<TrainOutcome> {
    check_inputs(fed, config, data)?;
    let init = SplitModel::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let opt = fed.optimizer();
    let heldout = heldout_batches(fed, config, data, seed)?;
    let shares = even_split(fed.server_steps, fed.clients.len());
    let mut locals: Vec<(SplitModel<f32>, ChaCha8Rng)> =
        (0..fed.clients.len()).map(|i| (init.clone(), client_rng(seed, i))).collect();
    let mut global = init;
    let p_tot = (global.counts().total() * 2) as u64;

    let mut out = TrainOutcome {
        algo: Algo::Fdt,
        models: Vec::new(),
        ledger: new_ledger(Algo::Fdt, fed, config),
        history: Vec::new(),
        trace: Vec::new(),
        checks: Vec::new(),
    };
    eval_heldout(&global, &fed.clients, &heldout, 0, &mut out.history)?;
    for round in 1..=fed.rounds {
        for (i, (model, rng)) in locals.iter_mut().enumerate() {
            model.embed.copy_values_from(&global.embed)?;
            model.decoder.copy_values_from(&global.decoder)?;
            model.predict.copy_values_from(&global.predict)?;
            let steps = fed.client_steps + shares[i];
            let stats = run_steps(model, &opt, data[i].train, rng, steps, fed.batch_size, Trainable::ALL, false)?;
            out.trace.extend(&stats.losses);
            if let Some(loss) = stats.mean_loss() {
                out.history.push(LossRecord { round, client: fed.clients[i].clone(), phase: Phase::Local, loss });
            }
            out.ledger.entries.push(RoundTraffic {
                round,
                client: fed.clients[i].clone(),
                params: p_tot,
                ..RoundTraffic::default()
            });
        }
        global.embed = fedavg(&locals.iter().map(|(m, _)| &m.embed).collect::<Vec<_>>())?;
        global.decoder = fedavg(&locals.iter().map(|(m, _)| &m.decoder).collect::<Vec<_>>())?;
        global.predict = fedavg(&locals.iter().map(|(m, _)| &m.predict).collect::<Vec<_>>())?;
        eval_heldout(&global, &fed.clients, &heldout, round, &mut out.history)?;
    }
    out.models = replicated(fed, &global);
    Ok(out)
}

/// Centralized baseline: one model trained on the union of all client data
/// with the same total step budget as a federated split run, spread evenly
/// over the rounds. It samples from the first client's stream, so with one
/// client it replays the full-model federated run step for step.
pub fn train_cdt(fed: &FedConfig, config: &DtConfig, data: &[ClientData], seed: u64) -> Result<TrainOutcome> {
    check_inputs(fed, config, data)?;
    let mut model = SplitModel::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let opt = fed.optimizer();
    let heldout = heldout_batches(fed, config, data, seed)?;
    let union = OfflineDataset::merged(&data.iter().map(|d| d.train).collect::<Vec<_>>())?;
    let mut rng = client_rng(seed, 0);

    let mut out = TrainOutcome {
        algo: Algo::Cdt,
        models: Vec::new(),
        ledger: new_ledger(Algo::Cdt, fed, config),
        history: Vec::new(),
        trace: Vec::new(),
        checks: Vec::new(),
    };
    eval_heldout(&model, &fed.clients, &heldout, 0, &mut out.history)?;
    for (r, steps) in even_split(fed.total_steps(), fed.rounds).into_iter().enumerate() {
        let stats = run_steps(&mut model, &opt, &union, &mut rng, steps, fed.batch_size, Trainable::ALL, false)?;
        out.trace.extend(&stats.losses);
        if let Some(loss) = stats.mean_loss() {
            out.history.push(LossRecord { round: r + 1, client: "central".into(), phase: Phase::Central, loss });
        }
        eval_heldout(&model, &fed.clients, &heldout, r + 1, &mut out.history)?;
    }
    out.models = replicated(fed, &model);
    Ok(out)
}

pub fn train(algo: Algo, fed: &FedConfig, config: &DtConfig, data: &[ClientData], seed: u64) -> Result<TrainOutcome> {
    match algo {
        Algo::Fsdt => train_fsdt(fed, config, data, seed),
        Algo::Cdt => train_cdt(fed, config, data, seed),
        Algo::Fdt => train_fdt(fed, config, data, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_set(v: f32) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn fedavg_examples() {
        let (a, b) = (scalar_set(2.0), scalar_set(4.0));
        assert_eq!(fedavg(&[&a, &b]).unwrap().get("w").unwrap().value.data(), &[3.0]);
        assert_eq!(fedavg(&[&a]).unwrap().fingerprint(), a.fingerprint());
        assert_eq!(fedavg(&[&a, &a, &a]).unwrap().fingerprint(), a.fingerprint());
        assert!(fedavg::<f32>(&[]).is_err());
        let mut other = ParamSet::new();
        other.push("v", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        assert!(fedavg(&[&a, &other]).is_err());
    }

    #[test]
    fn negative_zero_survives_single_client_average() {
        let z = scalar_set(-0.0);
        assert_eq!(fedavg(&[&z]).unwrap().fingerprint(), z.fingerprint());
    }

    #[test]
    fn budgets() {
        assert_eq!(even_split(100, 5), vec![20; 5]);
        assert_eq!(even_split(7, 3), vec![3, 2, 2]);
        assert_eq!(even_split(0, 2), vec![0, 0]);
        let fed = FedConfig::default();
        assert_eq!(fed.total_steps(), 20 * (5 * 100 + 100));
        assert_eq!(fed.domains(), vec!["UMB", "Sub6GHz", "WiFi"]);
        assert_eq!("fdt".parse::<Algo>().unwrap(), Algo::Fdt);
        assert!("dt".parse::<Algo>().is_err());
    }
}
