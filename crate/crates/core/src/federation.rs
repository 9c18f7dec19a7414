//! Simulated federated training: weighted aggregation, full-model and
//! encoder-only sharing, the single-client and centralized baselines, and
//! communication accounting.
//!
//! Parameters travel as serialized messages through a [`Transport`], so the
//! ledger counts the bytes that would actually cross the wire.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_net::{
    init_params, load_checkpoint, param_partition, save_checkpoint, Group, ModelParams,
};
use crate::metrics::{
    compute_metrics_with, MetricsReport, DEFAULT_THRESHOLDS_DEG, DEFAULT_THRESHOLDS_M,
};
use crate::seed;
use crate::synthetic::{load_world, ClientDataset, GeneratedWorld};
use crate::tensor::{Real, Tensor};
use crate::training::{
    append_log, evaluate_pose_errors, train_epoch, Adam, EpochStats, TrainConfig, TrainLogRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationStrategy {
    FullModel,
    EncoderOnly,
}

impl AggregationStrategy {
    /// Parameter group exchanged with the server.
    pub fn group(self) -> Group {
        match self {
            AggregationStrategy::FullModel => Group::All,
            AggregationStrategy::EncoderOnly => Group::Encoder,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    Uniform,
    #[default]
    DatasetSize,
}

/// Raw aggregation weights for clients of the given dataset sizes.
pub fn client_weights(mode: WeightsMode, sizes: &[usize]) -> Vec<f64> {
    match mode {
        WeightsMode::Uniform => vec![1.0; sizes.len()],
        WeightsMode::DatasetSize => sizes.iter().map(|&k| k as f64).collect(),
    }
}

/// Weighted mean of the strategy's parameter group with weights normalized
/// to sum to one. Summation runs over clients in index order in `f64`.
/// Parameters outside the group are copied from `reference`.
pub fn aggregate(
    models: &[ModelParams],
    weights: &[f64],
    strategy: AggregationStrategy,
    reference: &ModelParams,
) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("aggregate over no models".into()));
    }
    if weights.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and non-negative, got {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "aggregation weights are all zero".into(),
        ));
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    for (j, m) in models.iter().enumerate() {
        if m.names() != reference.names()
            || m.tensors()
                .iter()
                .zip(reference.tensors())
                .any(|(a, b)| a.dims() != b.dims())
        {
            return Err(Error::shape(
                "aggregate",
                format!("model {j} does not match the reference layout"),
            ));
        }
    }
    let group = strategy.group();
    let mut out = reference.clone();
    for (k, name) in reference.names().iter().enumerate() {
        if !crate::feature_net::group_of(name).is_some_and(|g| group.contains(g)) {
            continue;
        }
        let n = reference.tensors()[k].numel();
        let mut acc = vec![0.0f64; n];
        for (m, &w) in models.iter().zip(&norm) {
            for (a, &v) in acc.iter_mut().zip(m.tensors()[k].data()) {
                *a += w * v as f64;
            }
        }
        let dst = &mut out.tensors_mut()[k];
        for (d, a) in dst.data_mut().iter_mut().zip(acc) {
            *d = a as Real;
        }
    }
    Ok(out)
}

/// Named tensors exchanged in one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMessage {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct MessageHeader {
    names: Vec<String>,
    dims: Vec<Vec<usize>>,
}

/// Wire form of a [`ParamMessage`]: little-endian `u32` header length, a
/// JSON header with names and shapes, then the values as little-endian
/// `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// Bytes spent on the length prefix and header.
    pub overhead: usize,
}

impl ParamMessage {
    pub fn from_group(params: &ModelParams, group: Group) -> Self {
        let (names, tensors) = param_partition(params, group)
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .unzip();
        ParamMessage { names, tensors }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn encode(&self) -> Result<Encoded> {
        let header = serde_json::to_vec(&MessageHeader {
            names: self.names.clone(),
            dims: self.tensors.iter().map(|t| t.dims().to_vec()).collect(),
        })?;
        let overhead = 4 + header.len();
        let mut bytes = Vec::with_capacity(overhead + 4 * self.scalar_count());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for t in &self.tensors {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(Encoded { bytes, overhead })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("parameter message: {m}"));
        let len = u32::from_le_bytes(
            bytes
                .get(..4)
                .ok_or_else(|| bad("truncated length"))?
                .try_into()
                .expect("4 bytes"),
        );
        let body = bytes
            .get(4..4 + len as usize)
            .ok_or_else(|| bad("truncated header"))?;
        let header: MessageHeader = serde_json::from_slice(body)?;
        if header.names.len() != header.dims.len() {
            return Err(bad("names and shapes differ in length"));
        }
        let mut values = bytes[4 + len as usize..].chunks_exact(4);
        if !values.remainder().is_empty() {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let mut tensors = Vec::with_capacity(header.dims.len());
        for dims in header.dims {
            let n: usize = dims.iter().product();
            let data: Vec<Real> = values
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                .collect();
            if data.len() != n {
                return Err(bad("payload shorter than the declared shapes"));
            }
            tensors.push(Tensor::new(dims, data)?);
        }
        if values.next().is_some() {
            return Err(bad("payload longer than the declared shapes"));
        }
        Ok(ParamMessage {
            names: header.names,
            tensors,
        })
    }

    /// Overwrites the matching tensors of `params`.
    pub fn apply(&self, params: &mut ModelParams) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            params.set(n, t.clone())?;
        }
        Ok(())
    }
}

/// Carries encoded messages between server and clients. The in-process
/// simulation hands bytes straight back; a socket implementation would
/// plug in here.
pub trait Transport {
    fn deliver(&mut self, bytes: Vec<u8>) -> Result<Vec<u8>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InProcess;

impl Transport for InProcess {
    fn deliver(&mut self, bytes: Vec<u8>) -> Result<Vec<u8>> {
        Ok(bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub scalars: usize,
    /// `4 * scalars`.
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
    #[serde(skip)]
    pub names: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    pub records: Vec<CommRecord>,
}

impl CommLedger {
    /// Encodes `msg`, sends it through `transport`, decodes the delivery and
    /// records its size.
    pub fn transmit(
        &mut self,
        transport: &mut dyn Transport,
        msg: &ParamMessage,
        round: usize,
        client: usize,
        direction: Direction,
    ) -> Result<ParamMessage> {
        let enc = msg.encode()?;
        let total = enc.bytes.len();
        let delivered = ParamMessage::decode(&transport.deliver(enc.bytes)?)?;
        self.records.push(CommRecord {
            round,
            client,
            direction,
            scalars: delivered.scalar_count(),
            payload_bytes: total - enc.overhead,
            overhead_bytes: enc.overhead,
            names: delivered.names.clone(),
        });
        Ok(delivered)
    }

    /// True when every transmitted tensor belongs to `group`.
    pub fn only_transmits(&self, group: Group) -> bool {
        self.records
            .iter()
            .flat_map(|r| &r.names)
            .all(|n| crate::feature_net::group_of(n).is_some_and(|g| group.contains(g)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommTotals {
    pub uplink_scalars: usize,
    pub downlink_scalars: usize,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
}

impl CommTotals {
    fn add(&mut self, r: &CommRecord) {
        match r.direction {
            Direction::Uplink => self.uplink_scalars += r.scalars,
            Direction::Downlink => self.downlink_scalars += r.scalars,
        }
        self.payload_bytes += r.payload_bytes;
        self.overhead_bytes += r.overhead_bytes;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    /// `(round, totals)` in round order.
    pub per_round: Vec<(usize, CommTotals)>,
    /// `(client, totals)` in client order.
    pub per_client: Vec<(usize, CommTotals)>,
    pub total: CommTotals,
}

impl CommReport {
    /// Uplink scalars of `self` relative to `other`.
    pub fn uplink_ratio(&self, other: &CommReport) -> Option<f64> {
        (other.total.uplink_scalars > 0)
            .then(|| self.total.uplink_scalars as f64 / other.total.uplink_scalars as f64)
    }
}

pub fn comm_report(ledger: &CommLedger) -> CommReport {
    let mut rounds = std::collections::BTreeMap::<usize, CommTotals>::new();
    let mut clients = std::collections::BTreeMap::<usize, CommTotals>::new();
    let mut total = CommTotals::default();
    for r in &ledger.records {
        rounds.entry(r.round).or_default().add(r);
        clients.entry(r.client).or_default().add(r);
        total.add(r);
    }
    CommReport {
        per_round: rounds.into_iter().collect(),
        per_client: clients.into_iter().collect(),
        total,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub strategy: AggregationStrategy,
    pub weights_mode: WeightsMode,
    pub seed: u64,
    /// Worker threads for client training; results do not depend on it.
    pub threads: usize,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            n_clients: 4,
            rounds: 7,
            strategy: AggregationStrategy::FullModel,
            weights_mode: WeightsMode::DatasetSize,
            seed: 0,
            threads: 1,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 {
            return Err(Error::Config(format!(
                "need at least one client and one round, got {} and {}",
                self.n_clients, self.rounds
            )));
        }
        Ok(())
    }
}

/// One participant's model and optimizer.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub params: ModelParams,
    pub opt: Adam,
}

impl ClientState {
    pub fn new(params: ModelParams) -> Self {
        let opt = Adam::new(&params);
        ClientState { params, opt }
    }
}

#[derive(Clone, Debug)]
pub struct FederationState {
    /// Completed rounds.
    pub round: usize,
    /// Server copy; only the strategy's group is meaningful.
    pub global: ModelParams,
    pub clients: Vec<ClientState>,
    pub ledger: CommLedger,
}

impl FederationState {
    pub fn new(init: &ModelParams, n_clients: usize) -> Self {
        FederationState {
            round: 0,
            global: init.clone(),
            clients: (0..n_clients)
                .map(|_| ClientState::new(init.clone()))
                .collect(),
            ledger: CommLedger::default(),
        }
    }

    /// The model a client would use for inference: for encoder-only sharing
    /// its private decoder with the current global encoder.
    pub fn client_model(
        &self,
        client: usize,
        strategy: AggregationStrategy,
    ) -> Result<ModelParams> {
        let mut p = self.clients[client].params.clone();
        ParamMessage::from_group(&self.global, strategy.group()).apply(&mut p)?;
        Ok(p)
    }
}

const TAG_TRAIN: u64 = 0x7a1;
const TAG_INIT: u64 = 0x1a1;

/// Seed of one local epoch; shared by every scenario so that identical
/// data and configuration give identical runs.
pub fn epoch_seed(base: u64, round: usize, client: usize, epoch: usize) -> u64 {
    seed::derive(
        base,
        &[TAG_TRAIN, round as u64, client as u64, epoch as u64],
    )
}

pub fn initial_params(base: u64) -> ModelParams {
    init_params(seed::derive(base, &[TAG_INIT]))
}

/// Runs `local_epochs` of training for each `(state, dataset)` pair,
/// optionally on several threads. Results come back in input order.
fn train_clients(
    jobs: Vec<(usize, ClientState, &ClientDataset)>,
    train: &TrainConfig,
    round: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<(ClientState, Vec<EpochStats>)>> {
    let run = |(client, mut st, data): (usize, ClientState, &ClientDataset)| -> Result<(ClientState, Vec<EpochStats>)> {
        let mut stats = Vec::with_capacity(train.local_epochs);
        for epoch in 0..train.local_epochs {
            let s = train_epoch(&mut st.params, &mut st.opt, data, train, epoch_seed(seed, round, client, epoch))
                .map_err(|e| e.context(format!("client {client}, round {round}, epoch {epoch}")))?;
            stats.push(s);
        }
        Ok((st, stats))
    };
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(run).collect();
    }
    let mut slots: Vec<Option<Result<(ClientState, Vec<EpochStats>)>>> =
        (0..jobs.len()).map(|_| None).collect();
    let mut queue: Vec<(usize, (usize, ClientState, &ClientDataset))> =
        jobs.into_iter().enumerate().collect();
    while !queue.is_empty() {
        let batch: Vec<_> = queue.drain(..threads.min(queue.len())).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .into_iter()
                .map(|(i, job)| (i, s.spawn(move || run(job))))
                .collect();
            for (i, h) in handles {
                slots[i] = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::InvalidArgument("client worker panicked".into()))
                }));
            }
        });
    }
    slots
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

/// One communication round: distribute the shared parameters, train every
/// client locally, collect uploads and aggregate them. On error the state
/// is left untouched.
pub fn run_round(
    state: &mut FederationState,
    cfg: &FLConfig,
    train: &TrainConfig,
    datasets: &[ClientDataset],
    transport: &mut dyn Transport,
) -> Result<Vec<Vec<EpochStats>>> {
    cfg.validate()?;
    if datasets.len() != state.clients.len() {
        return Err(Error::InvalidArgument(format!(
            "{} datasets for {} clients",
            datasets.len(),
            state.clients.len()
        )));
    }
    let round = state.round + 1;
    let group = cfg.strategy.group();
    let mut ledger = state.ledger.clone();
    let down = ParamMessage::from_group(&state.global, group);
    let mut jobs = Vec::with_capacity(datasets.len());
    for (j, (client, data)) in state.clients.iter().zip(datasets).enumerate() {
        let msg = ledger.transmit(transport, &down, round, j, Direction::Downlink)?;
        let mut st = client.clone();
        msg.apply(&mut st.params)?;
        jobs.push((j, st, data));
    }
    let trained = train_clients(jobs, train, round, cfg.seed, cfg.threads)?;
    let mut uploads = Vec::with_capacity(trained.len());
    for (j, (st, _)) in trained.iter().enumerate() {
        let msg = ledger.transmit(
            transport,
            &ParamMessage::from_group(&st.params, group),
            round,
            j,
            Direction::Uplink,
        )?;
        let mut m = state.global.clone();
        msg.apply(&mut m)?;
        uploads.push(m);
    }
    let sizes: Vec<usize> = datasets.iter().map(ClientDataset::len).collect();
    let global = aggregate(
        &uploads,
        &client_weights(cfg.weights_mode, &sizes),
        cfg.strategy,
        &state.global,
    )?;

    let (clients, stats): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    state.global = global;
    state.clients = clients;
    state.ledger = ledger;
    state.round = round;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "single-client")]
    SingleClient,
    #[serde(rename = "fl-full")]
    FlFull,
    #[serde(rename = "fl-encoder")]
    FlEncoder,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Centralized,
        Scenario::SingleClient,
        Scenario::FlFull,
        Scenario::FlEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Centralized => "centralized",
            Scenario::SingleClient => "single-client",
            Scenario::FlFull => "fl-full",
            Scenario::FlEncoder => "fl-encoder",
        }
    }

    pub fn strategy(self) -> Option<AggregationStrategy> {
        match self {
            Scenario::FlFull => Some(AggregationStrategy::FullModel),
            Scenario::FlEncoder => Some(AggregationStrategy::EncoderOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown scenario {s:?} (expected centralized, single-client, fl-full or fl-encoder)"
            ))
        })
    }
}

fn default_thresholds_m() -> Vec<f64> {
    DEFAULT_THRESHOLDS_M.to_vec()
}

fn default_thresholds_deg() -> Vec<f64> {
    DEFAULT_THRESHOLDS_DEG.to_vec()
}

fn default_one() -> usize {
    1
}

fn default_tau() -> usize {
    5
}

fn default_rounds() -> usize {
    7
}

fn default_clients() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_clients")]
    pub n_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Solver iterations per pyramid level.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    /// Must agree with the scenario when given.
    #[serde(default)]
    pub strategy: Option<AggregationStrategy>,
    #[serde(default)]
    pub weights_mode: WeightsMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub out_dir: PathBuf,
    #[serde(default = "default_thresholds_m")]
    pub thresholds_m: Vec<f64>,
    #[serde(default = "default_thresholds_deg")]
    pub thresholds_deg: Vec<f64>,
    /// Optimizer and solver settings; `tau` and `local_epochs` above win.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_one")]
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentConfig {
            scenario,
            n_clients: default_clients(),
            rounds: default_rounds(),
            tau: default_tau(),
            local_epochs: 1,
            strategy: None,
            weights_mode: WeightsMode::default(),
            seed: 0,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            thresholds_m: default_thresholds_m(),
            thresholds_deg: default_thresholds_deg(),
            train: TrainConfig::default(),
            threads: 1,
        }
    }

    /// Training settings with the top-level overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.local_epochs = self.local_epochs;
        t.solver.max_iters_per_level = self.tau;
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 || self.tau == 0 || self.local_epochs == 0 {
            return Err(Error::Config(
                "n_clients, rounds, tau and local_epochs must all be at least 1".into(),
            ));
        }
        if let Some(s) = self.strategy {
            if self.scenario.strategy() != Some(s) {
                return Err(Error::Config(format!(
                    "strategy {s:?} does not apply to scenario {}",
                    self.scenario
                )));
            }
        }
        if self.thresholds_m.is_empty() || self.thresholds_m.len() != self.thresholds_deg.len() {
            return Err(Error::Config(
                "thresholds_m and thresholds_deg must be nonempty and of equal length".into(),
            ));
        }
        if self
            .thresholds_m
            .iter()
            .chain(&self.thresholds_deg)
            .any(|t| !(*t > 0.0))
        {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        self.train_config().validate()
    }

    fn fl_config(&self) -> FLConfig {
        FLConfig {
            n_clients: self.n_clients,
            rounds: self.rounds,
            strategy: self
                .scenario
                .strategy()
                .unwrap_or(AggregationStrategy::FullModel),
            weights_mode: self.weights_mode,
            seed: self.seed,
            threads: self.threads,
        }
    }
}

/// One metrics.csv row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub round: usize,
    pub metric_family: String,
    pub threshold: f64,
    pub value_percent: f64,
}

/// One comm.csv row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub scenario: String,
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub scalars: usize,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct ResultsBundle {
    pub scenario: Scenario,
    /// Per-round reports, round 1 first.
    pub reports: Vec<MetricsReport>,
    pub metrics: Vec<MetricsRow>,
    pub ledger: CommLedger,
    pub comm: CommReport,
    /// Final models: one for centralized and full-model runs, one per
    /// client otherwise.
    pub models: Vec<ModelParams>,
    pub train_log: Vec<TrainLogRecord>,
}

fn log_records(
    scenario: Scenario,
    round: usize,
    client: usize,
    stats: &[EpochStats],
) -> Vec<TrainLogRecord> {
    stats
        .iter()
        .enumerate()
        .map(|(epoch, s)| TrainLogRecord {
            scenario: scenario.name().to_string(),
            round,
            client,
            epoch,
            mean_loss: s.mean_loss,
            wall_time_s: s.wall_time_s,
        })
        .collect()
}

/// Pools the test errors of every model.
fn evaluate(
    models: &[ModelParams],
    test: &ClientDataset,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let solver = cfg.train_config().solver;
    let mut errors = Vec::with_capacity(models.len() * test.len());
    for m in models {
        errors.extend(evaluate_pose_errors(m, test, &solver)?);
    }
    let report = compute_metrics_with(&errors, &cfg.thresholds_m, &cfg.thresholds_deg)?;
    report.check()?;
    Ok(report)
}

/// Runs one scenario on an in-memory world, evaluating on the test set
/// after every round.
pub fn run_experiment_on(cfg: &ExperimentConfig, world: &GeneratedWorld) -> Result<ResultsBundle> {
    cfg.validate()?;
    if world.clients.len() < cfg.n_clients {
        return Err(Error::Config(format!(
            "config asks for {} clients but the dataset has {}",
            cfg.n_clients,
            world.clients.len()
        )));
    }
    if world.test.is_empty() {
        return Err(Error::Config("the dataset has no test samples".into()));
    }
    let datasets = &world.clients[..cfg.n_clients];
    let train = cfg.train_config();
    let init = initial_params(cfg.seed);
    let fl = cfg.fl_config();
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut train_log = Vec::new();
    let mut ledger = CommLedger::default();
    let models = match cfg.scenario {
        Scenario::Centralized | Scenario::SingleClient => {
            let sets: Vec<ClientDataset> = if cfg.scenario == Scenario::Centralized {
                vec![ClientDataset::pooled("pooled", datasets)]
            } else {
                datasets.to_vec()
            };
            let mut states: Vec<ClientState> = sets
                .iter()
                .map(|_| ClientState::new(init.clone()))
                .collect();
            for round in 1..=cfg.rounds {
                let jobs = states
                    .drain(..)
                    .zip(&sets)
                    .enumerate()
                    .map(|(j, (s, d))| (j, s, d))
                    .collect();
                let trained = train_clients(jobs, &train, round, cfg.seed, cfg.threads)?;
                for (j, (st, stats)) in trained.into_iter().enumerate() {
                    train_log.extend(log_records(cfg.scenario, round, j, &stats));
                    states.push(st);
                }
                let models: Vec<ModelParams> = states.iter().map(|s| s.params.clone()).collect();
                reports.push(
                    evaluate(&models, &world.test, cfg)
                        .map_err(|e| e.context(format!("evaluation after round {round}")))?,
                );
            }
            states.into_iter().map(|s| s.params).collect()
        }
        Scenario::FlFull | Scenario::FlEncoder => {
            let mut state = FederationState::new(&init, cfg.n_clients);
            let mut transport = InProcess;
            for round in 1..=cfg.rounds {
                let stats = run_round(&mut state, &fl, &train, datasets, &mut transport)
                    .map_err(|e| e.context(format!("round {round}")))?;
                for (j, s) in stats.iter().enumerate() {
                    train_log.extend(log_records(cfg.scenario, round, j, s));
                }
                let models = match fl.strategy {
                    AggregationStrategy::FullModel => vec![state.global.clone()],
                    AggregationStrategy::EncoderOnly => (0..cfg.n_clients)
                        .map(|j| state.client_model(j, fl.strategy))
                        .collect::<Result<_>>()?,
                };
                reports.push(
                    evaluate(&models, &world.test, cfg)
                        .map_err(|e| e.context(format!("evaluation after round {round}")))?,
                );
            }
            ledger = state.ledger.clone();
            match fl.strategy {
                AggregationStrategy::FullModel => vec![state.global],
                AggregationStrategy::EncoderOnly => (0..cfg.n_clients)
                    .map(|j| state.client_model(j, fl.strategy))
                    .collect::<Result<_>>()?,
            }
        }
    };
    let metrics = reports
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.recalls.iter().map(move |x| MetricsRow {
                scenario: cfg.scenario.name().to_string(),
                round: i + 1,
                metric_family: x.family.name().to_string(),
                threshold: x.threshold,
                value_percent: x.value_percent,
            })
        })
        .collect();
    Ok(ResultsBundle {
        scenario: cfg.scenario,
        reports,
        metrics,
        comm: comm_report(&ledger),
        ledger,
        models,
        train_log,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], headers: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(headers).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub const METRICS_HEADERS: [&str; 5] = [
    "scenario",
    "round",
    "metric_family",
    "threshold",
    "value_percent",
];
pub const COMM_HEADERS: [&str; 7] = [
    "scenario",
    "round",
    "client",
    "direction",
    "scalars",
    "payload_bytes",
    "overhead_bytes",
];

/// Writes metrics.csv, comm.csv, config.echo.json, the training log and the
/// final checkpoints into `out_dir`.
pub fn write_results(bundle: &ResultsBundle, cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let ctx = |e: Error| e.context(format!("writing results to {}", out_dir.display()));
    fs::create_dir_all(out_dir).map_err(|e| ctx(e.into()))?;
    write_csv(
        &out_dir.join(METRICS_FILE),
        &bundle.metrics,
        &METRICS_HEADERS,
    )
    .map_err(ctx)?;
    let comm: Vec<CommRow> = bundle
        .ledger
        .records
        .iter()
        .map(|r| CommRow {
            scenario: bundle.scenario.name().to_string(),
            round: r.round,
            client: r.client,
            direction: r.direction,
            scalars: r.scalars,
            payload_bytes: r.payload_bytes,
            overhead_bytes: r.overhead_bytes,
        })
        .collect();
    write_csv(&out_dir.join(COMM_FILE), &comm, &COMM_HEADERS).map_err(ctx)?;
    let echo = serde_json::json!({
        "config": cfg,
        "evaluation": "after aggregation, every round, on the held-out test set; errors pooled over all evaluated models",
        "aggregation": "weights normalized to sum to one",
    });
    fs::write(
        out_dir.join(CONFIG_ECHO_FILE),
        serde_json::to_string_pretty(&echo)?,
    )
    .map_err(|e| ctx(e.into()))?;
    let log = out_dir.join(TRAIN_LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| ctx(e.into()))?;
    }
    append_log(&log, &bundle.train_log).map_err(ctx)?;
    for (j, m) in bundle.models.iter().enumerate() {
        let name = if bundle.models.len() == 1 {
            "model".to_string()
        } else {
            format!("model_client_{j}")
        };
        let meta = [
            ("scenario".to_string(), bundle.scenario.name().to_string()),
            ("rounds".to_string(), cfg.rounds.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
        ]
        .into_iter()
        .collect();
        save_checkpoint(m, &out_dir.join("checkpoints").join(name), meta).map_err(ctx)?;
    }
    Ok(())
}

/// Loads the dataset from `cfg.data_dir`, runs the scenario and writes the
/// results to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    cfg.validate()?;
    let world = load_world(&cfg.data_dir)
        .map_err(|e| e.context(format!("loading dataset {}", cfg.data_dir.display())))?;
    let bundle = run_experiment_on(cfg, &world)?;
    write_results(&bundle, cfg, &cfg.out_dir)?;
    Ok(bundle)
}

/// Loads every checkpoint written by [`write_results`] under `dir`.
pub fn load_models(dir: &Path) -> Result<Vec<ModelParams>> {
    let single = dir.join("model");
    if single.exists() {
        return Ok(vec![load_checkpoint(&single)?.0]);
    }
    let mut out = Vec::new();
    for j in 0.. {
        let p = dir.join(format!("model_client_{j}"));
        if !p.exists() {
            break;
        }
        out.push(load_checkpoint(&p)?.0);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no checkpoints under {}",
            dir.display()
        )));
    }
    Ok(out)
}
