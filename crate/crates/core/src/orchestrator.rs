//! The federated round loop.
//!
//! A round runs as barrier-separated phases: select clients, broadcast the
//! global adapter, exchange prototypes (when alignment is on), train locally
//! against fixed anchors, upload Top-K masked adapters, and merge them. Client
//! work inside a phase runs in parallel; the server always consumes results in
//! ascending client id, so a run is a pure function of its configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apud::{aggregate_masked, make_sparse_update, SparseAdapterUpdate};
use crate::data::{build_public, dirichlet_partition, BlobGenerator, Dataset, PublicDataset};
use crate::erpa::{
    build_anchors, client_local_prototypes, client_public_prototypes, server_aggregate,
    ClientPrototypes, PrototypeBundle, PrototypeKind,
};
use crate::error::{Error, Result};
use crate::model::{
    embed, grad_total, logits, AdapterParams, AnchorSet, BackboneParams, LabeledBatch,
    NetworkShape, Sgd,
};
use crate::seed::{self, Stream};
use crate::trace::{Ledger, RoundSummary, Trace, TraceHeader, TraceRecord, FORMAT_VERSION};

/// Which of the two mechanisms a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoErpa,
    NoApud,
    Neither,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoErpa, Mode::NoApud, Mode::Neither];

    pub fn uses_alignment(self) -> bool {
        matches!(self, Mode::Full | Mode::NoApud)
    }

    pub fn uses_dropping(self) -> bool {
        matches!(self, Mode::Full | Mode::NoErpa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoErpa => "no_erpa",
            Mode::NoApud => "no_apud",
            Mode::Neither => "neither",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts the canonical names and the ablation-table labels
    /// (`"w/o ERPA"`, `"w/o APUD & ERPA"`, ...), case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match norm.as_str() {
            "full" | "refprotofl" | "refprotoflfull" => Ok(Mode::Full),
            "noerpa" | "woerpa" | "withouterpa" => Ok(Mode::NoErpa),
            "noapud" | "woapud" | "withoutapud" => Ok(Mode::NoApud),
            "neither" | "none" | "fedavg" | "woapuderpa" | "woerpaapud" | "woapudanderpa"
            | "woerpaandapud" => Ok(Mode::Neither),
            _ => Err(Error::invalid("mode", format!("unknown mode {s:?}"))),
        }
    }
}

/// Top-K budget specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KBudget {
    Count(usize),
    /// `ceil(fraction * d)`.
    Fraction(f64),
    PerClient(Vec<usize>),
}

/// Which classes the public dataset covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PublicCoverage {
    /// The first `round(fraction * num_classes)` class ids.
    Fraction(f64),
    Classes(BTreeSet<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    /// Every client starts from the same backbone.
    Shared,
    /// Each client draws its own initial backbone.
    PerClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub shape: NetworkShape,
    pub num_clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub k_budget: KBudget,
    pub alpha: f64,
    pub public_coverage: PublicCoverage,
    pub public_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub center_radius: f64,
    pub noise_std: f64,
    pub backbone_init: BackboneInit,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shape: NetworkShape {
                input_dim: 16,
                hidden_dim: 32,
                embed_dim: 16,
                num_classes: 10,
            },
            num_clients: 10,
            client_fraction: 1.0,
            rounds: 50,
            local_epochs: 1,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            k_budget: KBudget::Fraction(0.1),
            alpha: 0.5,
            public_coverage: PublicCoverage::Fraction(0.5),
            public_per_class: 16,
            train_per_class: 600,
            test_per_class: 100,
            center_radius: 3.0,
            noise_std: 1.0,
            backbone_init: BackboneInit::Shared,
            mode: Mode::Full,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn adapter_len(&self) -> usize {
        self.shape.adapter_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let d = self.adapter_len();
        if self.num_clients == 0 {
            return Err(Error::invalid("num_clients", "must be at least 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::invalid(
                "client_fraction",
                format!("{} is outside (0, 1]", self.client_fraction),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} must be nonnegative and finite")));
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be positive and finite"));
        }
        match &self.k_budget {
            KBudget::Count(k) if *k > d => {
                return Err(Error::invalid("k_budget", format!("K = {k} exceeds adapter length d = {d}")))
            }
            KBudget::Fraction(f) if !(*f >= 0.0 && *f <= 1.0) => {
                return Err(Error::invalid("k_fraction", format!("{f} is outside [0, 1]")))
            }
            KBudget::PerClient(ks) => {
                if ks.len() != self.num_clients {
                    return Err(Error::invalid(
                        "k_budget_per_client",
                        format!("{} budgets for {} clients", ks.len(), self.num_clients),
                    ));
                }
                if let Some(k) = ks.iter().find(|&&k| k > d) {
                    return Err(Error::invalid("k_budget_per_client", format!("K = {k} exceeds adapter length d = {d}")));
                }
            }
            _ => {}
        }
        match &self.public_coverage {
            PublicCoverage::Fraction(f) if !(*f >= 0.0 && *f <= 1.0) => {
                return Err(Error::invalid("public_fraction", format!("{f} is outside [0, 1]")))
            }
            PublicCoverage::Classes(cs) => {
                if let Some(c) = cs.iter().find(|&&c| c >= self.shape.num_classes) {
                    return Err(Error::invalid("public_classes", format!("class {c} out of range")));
                }
            }
            _ => {}
        }
        for (name, v) in [
            ("public_per_class", self.public_per_class),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Per-client budget after the mode is applied: runs without dropping send
    /// the whole adapter.
    pub fn resolved_k(&self) -> Vec<usize> {
        let d = self.adapter_len();
        if !self.mode.uses_dropping() {
            return vec![d; self.num_clients];
        }
        match &self.k_budget {
            KBudget::Count(k) => vec![(*k).min(d); self.num_clients],
            KBudget::Fraction(f) => vec![((f * d as f64).ceil() as usize).min(d); self.num_clients],
            KBudget::PerClient(ks) => ks.iter().map(|&k| k.min(d)).collect(),
        }
    }

    /// Alignment weight after the mode is applied.
    pub fn resolved_lambda(&self) -> f64 {
        if self.mode.uses_alignment() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn covered_classes(&self) -> BTreeSet<usize> {
        match &self.public_coverage {
            PublicCoverage::Fraction(f) => {
                let n = (f * self.shape.num_classes as f64).round() as usize;
                (0..n.min(self.shape.num_classes)).collect()
            }
            PublicCoverage::Classes(cs) => cs.clone(),
        }
    }

    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn selected_count(&self) -> usize {
        ((self.client_fraction * self.num_clients as f64).ceil() as usize).clamp(1, self.num_clients)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub backbone: BackboneParams,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub adapter: Vec<f64>,
    pub round: usize,
    /// Next logical timestamp for trace records.
    pub next_seq: u64,
}

/// Data every round reads but never changes.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: ExperimentConfig,
    pub public: PublicDataset,
    pub test: Dataset,
}

/// Everything a round produces besides the new states.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub records: Vec<TraceRecord>,
    pub summary: RoundSummary,
    pub bundle: PrototypeBundle,
    /// Locally trained adapters of the selected clients, ascending client id.
    pub local_adapters: Vec<(usize, Vec<f64>)>,
    pub updates: Vec<(usize, SparseAdapterUpdate)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub shape: NetworkShape,
    pub adapter: Vec<f64>,
    pub backbones: Vec<BackboneParams>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub trace: Trace,
    pub rounds: Vec<RoundTrace>,
    pub snapshot: Snapshot,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.summary.mean_acc)
    }

    /// `round,mode,mean_acc,uplink_values,uplink_indices,uplink_proto_scalars,downlink_scalars`
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        write_metrics(w, &[self])
    }
}

pub fn write_metrics<W: Write>(w: W, results: &[&ExperimentResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "round",
        "mode",
        "mean_acc",
        "uplink_values",
        "uplink_indices",
        "uplink_proto_scalars",
        "downlink_scalars",
    ])?;
    for res in results {
        for s in res.trace.summaries() {
            out.write_record([
                s.round.to_string(),
                res.config.mode.to_string(),
                s.mean_acc.to_string(),
                s.ledger.uplink_values.to_string(),
                s.ledger.uplink_indices.to_string(),
                s.ledger.uplink_proto_scalars.to_string(),
                s.ledger.downlink_scalars.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// The simulated world: environment plus mutable states.
#[derive(Debug, Clone)]
pub struct Federation {
    pub env: Environment,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    /// Generates data, partitions it, and initializes all parameters from the
    /// master seed. Nothing here depends on the mode.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let shape = config.shape;
        let gen = BlobGenerator::new(
            shape.num_classes,
            shape.input_dim,
            config.center_radius,
            config.noise_std,
            config.seed,
        )?;
        let classes = gen.all_classes();
        let train = gen.sample(&classes, config.train_per_class, Stream::Train)?;
        let test = gen.sample(&classes, config.test_per_class, Stream::Test)?;
        let public = build_public(&gen, &config.covered_classes(), config.public_per_class)?;
        let partition = dirichlet_partition(&train, config.num_clients, config.alpha, config.seed)?;

        let adapter = AdapterParams::init(&shape, &mut seed::stream(config.seed, Stream::AdapterInit, &[]));
        let shared = BackboneParams::init(&shape, &mut seed::stream(config.seed, Stream::BackboneInit, &[]));
        let clients = (0..config.num_clients)
            .map(|k| {
                let backbone = match config.backbone_init {
                    BackboneInit::Shared => shared.clone(),
                    BackboneInit::PerClient => BackboneParams::init(
                        &shape,
                        &mut seed::stream(config.seed, Stream::BackboneInit, &[k as u64]),
                    ),
                };
                Ok(ClientState {
                    id: k,
                    backbone,
                    data: train.subset(partition.client_rows(k))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env: Environment {
                config: config.clone(),
                public,
                test,
            },
            server: ServerState {
                adapter: adapter.flatten(),
                round: 0,
                next_seq: 0,
            },
            clients,
        })
    }

    /// Assembles a federation from explicit parts (replays, hand-built scenarios).
    pub fn from_parts(
        config: ExperimentConfig,
        adapter: Vec<f64>,
        clients: Vec<ClientState>,
        public: PublicDataset,
        test: Dataset,
    ) -> Result<Self> {
        config.validate()?;
        if adapter.len() != config.adapter_len() {
            return Err(Error::DimensionMismatch {
                axis: "adapter parameters",
                expected: config.adapter_len(),
                found: adapter.len(),
            });
        }
        if clients.len() != config.num_clients || clients.iter().enumerate().any(|(k, c)| c.id != k) {
            return Err(Error::invalid("clients", "ids must be 0..num_clients in order"));
        }
        Ok(Self {
            env: Environment { config, public, test },
            server: ServerState {
                adapter,
                round: 0,
                next_seq: 0,
            },
            clients,
        })
    }

    /// Runs one round and commits the new states only if it succeeds.
    pub fn step(&mut self) -> Result<RoundTrace> {
        let (server, clients, trace) = run_round(&self.server, &self.clients, &self.env)?;
        self.server = server;
        self.clients = clients;
        Ok(trace)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            shape: self.env.config.shape,
            adapter: self.server.adapter.clone(),
            backbones: self.clients.iter().map(|c| c.backbone.clone()).collect(),
        }
    }
}

fn select_clients(config: &ExperimentConfig, round: usize) -> Vec<usize> {
    let n = config.num_clients;
    let count = config.selected_count();
    if count == n {
        return (0..n).collect();
    }
    let mut rng = seed::stream(config.seed, Stream::Selection, &[round as u64]);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Local optimization of backbone and adapter against fixed anchors. Momentum
/// buffers start at zero every round.
pub fn train_client(
    client: &ClientState,
    adapter: &[f64],
    anchors: &AnchorSet,
    lambda: f64,
    config: &ExperimentConfig,
    round: usize,
) -> Result<(BackboneParams, Vec<f64>)> {
    let shape = config.shape;
    let sgd = config.sgd();
    let mut rng = seed::stream(config.seed, Stream::Training, &[round as u64, client.id as u64]);
    let mut backbone = client.backbone.flatten();
    let mut adapter = adapter.to_vec();
    let mut v_backbone = vec![0.0; backbone.len()];
    let mut v_adapter = vec![0.0; adapter.len()];
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let batch = LabeledBatch::new(client.data.inputs(), client.data.labels(), rows, shape.num_classes)?;
            let bb = BackboneParams::unflatten(&shape, &backbone)?;
            let ad = AdapterParams::unflatten(&shape, &adapter)?;
            let (g_backbone, g_adapter) = grad_total(&batch, &bb, &ad, anchors, lambda)?;
            (backbone, v_backbone) = sgd.step(&backbone, &g_backbone.flatten(), &v_backbone)?;
            (adapter, v_adapter) = sgd.step(&adapter, &g_adapter.flatten(), &v_adapter)?;
        }
    }
    let backbone = BackboneParams::unflatten(&shape, &backbone)?;
    if !backbone.is_finite() || !adapter.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(
            "training",
            format!("client {} diverged in round {round}; lower lr or lambda", client.id),
        ));
    }
    Ok((backbone, adapter))
}

/// Top-1 accuracy of one client's backbone with `adapter` on `test`. Ties in
/// the argmax go to the lowest class id.
pub fn client_accuracy(backbone: &BackboneParams, adapter: &AdapterParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &y) in test.inputs().iter_rows().zip(test.labels()) {
        let l = logits(x, backbone, adapter)?;
        let pred = (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best });
        correct += usize::from(pred == y);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean and per-client accuracy, each client using its private backbone with
/// the shared adapter.
pub fn evaluate(clients: &[ClientState], adapter: &[f64], test: &Dataset, shape: &NetworkShape) -> Result<(f64, Vec<f64>)> {
    let adapter = AdapterParams::unflatten(shape, adapter)?;
    let per_client = clients
        .par_iter()
        .map(|c| client_accuracy(&c.backbone, &adapter, test))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_client.iter().sum::<f64>() / per_client.len().max(1) as f64;
    Ok((mean, per_client))
}

/// Test-set embeddings per client: `(client_id, label, embedding)`.
pub fn embeddings(snapshot: &Snapshot, test: &Dataset) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let adapter = AdapterParams::unflatten(&snapshot.shape, &snapshot.adapter)?;
    let mut out = Vec::with_capacity(snapshot.backbones.len() * test.len());
    for (k, backbone) in snapshot.backbones.iter().enumerate() {
        for (x, &y) in test.inputs().iter_rows().zip(test.labels()) {
            out.push((k, y, embed(x, backbone, &adapter.feature)?));
        }
    }
    Ok(out)
}

pub fn write_embeddings_csv<W: Write>(w: W, rows: &[(usize, usize, Vec<f64>)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let m = rows.first().map_or(0, |r| r.2.len());
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..m).map(|i| format!("e{i}")));
    out.write_record(&header)?;
    for (k, y, e) in rows {
        let mut rec = vec![k.to_string(), y.to_string()];
        rec.extend(e.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One protocol round. Pure: the inputs are untouched and, on error, nothing
/// is committed.
pub fn run_round(
    server: &ServerState,
    clients: &[ClientState],
    env: &Environment,
) -> Result<(ServerState, Vec<ClientState>, RoundTrace)> {
    let config = &env.config;
    let shape = config.shape;
    let d = config.adapter_len();
    let m = shape.embed_dim;
    let round = server.round;
    let mode = config.mode;
    let indicator = env.public.indicator();
    let k_budget = config.resolved_k();
    let lambda = config.resolved_lambda();

    let mut seq = server.next_seq;
    let mut records = Vec::new();
    let mut emit = |records: &mut Vec<TraceRecord>, make: &dyn Fn(u64) -> TraceRecord| {
        records.push(make(seq));
        seq += 1;
    };

    // (1) selection, (2) broadcast.
    let selected = select_clients(config, round);
    if round == 0 && mode.uses_alignment() && !env.public.data().is_empty() {
        let rows = env.public.data().len();
        emit(&mut records, &|seq| TraceRecord::PublicBroadcast {
            seq,
            round,
            rows,
            input_dim: shape.input_dim,
            recipients: config.num_clients,
        });
    }
    emit(&mut records, &|seq| TraceRecord::AdapterBroadcast {
        seq,
        round,
        d,
        recipients: selected.len(),
    });

    // (3) prototype upload, (4) server aggregation and anchor broadcast.
    let global = AdapterParams::unflatten(&shape, &server.adapter)?;
    let mut bundle = PrototypeBundle::default();
    if mode.uses_alignment() {
        let uploads = selected
            .par_iter()
            .map(|&k| {
                let c = &clients[k];
                let mut prototypes = if indicator.covered().next().is_some() {
                    client_public_prototypes(&env.public, &c.backbone, &global.feature)?
                } else {
                    Vec::new()
                };
                prototypes.extend(client_local_prototypes(&c.data, &indicator, &c.backbone, &global.feature)?);
                Ok(ClientPrototypes { client_id: k, prototypes })
            })
            .collect::<Result<Vec<_>>>()?;
        for up in &uploads {
            for p in &up.prototypes {
                emit(&mut records, &|seq| TraceRecord::PrototypeUpload {
                    seq,
                    round,
                    client_id: up.client_id,
                    class_id: p.class_id,
                    kind: p.kind,
                    weight: p.weight,
                    vector: p.vector.clone(),
                });
            }
        }
        bundle = server_aggregate(&uploads, &selected, &indicator, m)?;
        let broadcasts = bundle
            .external
            .iter()
            .map(|(c, v)| (*c, PrototypeKind::ExternalReference, v))
            .chain(bundle.global.iter().map(|(c, v)| (*c, PrototypeKind::Global, v)));
        let mut broadcasts: Vec<_> = broadcasts.collect();
        broadcasts.sort_by_key(|b| b.0);
        for (class_id, kind, vector) in broadcasts {
            emit(&mut records, &|seq| TraceRecord::AnchorBroadcast {
                seq,
                round,
                class_id,
                kind,
                recipients: selected.len(),
                vector: vector.clone(),
            });
        }
    }
    let anchors = build_anchors(&bundle, &indicator);

    // (5) local training.
    let trained = selected
        .par_iter()
        .map(|&k| train_client(&clients[k], &server.adapter, &anchors, lambda, config, round))
        .collect::<Result<Vec<_>>>()?;

    // (6) sparse uploads, (7) masked aggregation.
    let mut updates = Vec::with_capacity(selected.len());
    for (&k, (_, local)) in selected.iter().zip(&trained) {
        let update = make_sparse_update(local, &server.adapter, k_budget[k], clients[k].data.len() as u64)?;
        emit(&mut records, &|seq| TraceRecord::SparseUpdate {
            seq,
            round,
            client_id: k,
            d,
            k: k_budget[k],
            indices: update.mask.selected().to_vec(),
            values: update.values.clone(),
            data_size: update.data_size,
        });
        updates.push((k, update));
    }
    let ordered: Vec<SparseAdapterUpdate> = updates.iter().map(|(_, u)| u.clone()).collect();
    let new_adapter = aggregate_masked(&server.adapter, &ordered)?;

    let mut new_clients = clients.to_vec();
    let mut local_adapters = Vec::with_capacity(selected.len());
    for (&k, (backbone, local)) in selected.iter().zip(trained) {
        new_clients[k].backbone = backbone;
        local_adapters.push((k, local));
    }

    let (mean_acc, client_acc) = evaluate(&new_clients, &new_adapter, &env.test, &shape)?;
    let mut ledger = Ledger::default();
    for r in &records {
        ledger.add(&r.cost());
    }
    let summary = RoundSummary {
        seq,
        round,
        selected,
        ledger,
        anchors_external: anchors.iter().filter(|(c, _)| !indicator.is_missing(*c)).count(),
        anchors_global: anchors.iter().filter(|(c, _)| indicator.is_missing(*c)).count(),
        mean_acc,
        client_acc,
    };
    records.push(TraceRecord::RoundSummary(summary.clone()));

    Ok((
        ServerState {
            adapter: new_adapter,
            round: round + 1,
            next_seq: seq + 1,
        },
        new_clients,
        RoundTrace {
            records,
            summary,
            bundle,
            local_adapters,
            updates,
        },
    ))
}

/// Runs `config.rounds` rounds of an already-built federation.
pub fn run_federation(mut fed: Federation) -> Result<ExperimentResult> {
    let config = fed.env.config.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut totals = Ledger::default();
    let mut records = Vec::new();
    for _ in 0..config.rounds {
        let rt = fed.step()?;
        totals.add(&rt.summary.ledger);
        records.extend(rt.records.iter().cloned());
        rounds.push(rt);
    }
    let header = TraceHeader {
        format_version: FORMAT_VERSION,
        mode: config.mode.to_string(),
        seed: config.seed,
        num_clients: config.num_clients,
        rounds: config.rounds,
        num_classes: config.shape.num_classes,
        input_dim: config.shape.input_dim,
        embed_dim: config.shape.embed_dim,
        adapter_dim: config.adapter_len(),
        k_budget: config.resolved_k(),
        totals,
    };
    Ok(ExperimentResult {
        snapshot: fed.snapshot(),
        config,
        trace: Trace { header, records },
        rounds,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_federation(Federation::build(config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub final_mean_acc: f64,
    pub uplink_values: u64,
    pub uplink_total: u64,
}

/// All four modes from one master seed: identical data, partition,
/// initialization and mini-batch order; only the mechanisms differ.
pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<(AblationRow, ExperimentResult)>> {
    Mode::ALL
        .par_iter()
        .map(|&mode| {
            let config = ExperimentConfig { mode, ..base.clone() };
            let result = run_experiment(&config)?;
            let totals = result.trace.header.totals;
            Ok((
                AblationRow {
                    mode,
                    final_mean_acc: result.final_accuracy(),
                    uplink_values: totals.uplink_values,
                    uplink_total: totals.uplink_total(),
                },
                result,
            ))
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["mode", "final_mean_acc", "uplink_values", "uplink_total"])?;
    for r in rows {
        out.write_record([
            r.mode.to_string(),
            r.final_mean_acc.to_string(),
            r.uplink_values.to_string(),
            r.uplink_total.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
