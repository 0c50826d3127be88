//! Run traces: one JSON object per line.
//!
//! The first line is a [`TraceHeader`] carrying run-wide totals. Every other
//! line is a [`TraceRecord`] with a `type` tag, the round it belongs to, and a
//! `seq` logical timestamp that increases by one per record across the run.
//!
//! Communication is priced in transmitted scalars:
//!
//! | record              | direction | uplink / downlink scalars               |
//! |---------------------|-----------|-----------------------------------------|
//! | `sparse_update`     | up        | `len(values)` values, `len(indices)` indices |
//! | `prototype_upload`  | up        | `len(vector)`, plus 1 for a local count |
//! | `adapter_broadcast` | down      | `d * recipients`                        |
//! | `anchor_broadcast`  | down      | `len(vector) * recipients`              |
//! | `public_broadcast`  | down      | `rows * (input_dim + 1) * recipients`   |
//!
//! Only `sparse_update` and `prototype_upload` travel from clients to the
//! server; their field sets are closed (see [`UPLINK_FIELDS`]).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::erpa::PrototypeKind;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Allowed keys of each client-to-server record type.
pub const UPLINK_FIELDS: &[(&str, &[&str])] = &[
    (
        "sparse_update",
        &["type", "seq", "round", "client_id", "d", "k", "indices", "values", "data_size"],
    ),
    (
        "prototype_upload",
        &["type", "seq", "round", "client_id", "class_id", "kind", "weight", "vector"],
    ),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub uplink_values: u64,
    pub uplink_indices: u64,
    pub uplink_proto_scalars: u64,
    pub downlink_scalars: u64,
}

impl Ledger {
    pub fn add(&mut self, other: &Ledger) {
        self.uplink_values += other.uplink_values;
        self.uplink_indices += other.uplink_indices;
        self.uplink_proto_scalars += other.uplink_proto_scalars;
        self.downlink_scalars += other.downlink_scalars;
    }

    pub fn uplink_total(&self) -> u64 {
        self.uplink_values + self.uplink_indices + self.uplink_proto_scalars
    }

    fn diff(&self, other: &Ledger) -> Option<String> {
        let pairs = [
            ("uplink_values", self.uplink_values, other.uplink_values),
            ("uplink_indices", self.uplink_indices, other.uplink_indices),
            ("uplink_proto_scalars", self.uplink_proto_scalars, other.uplink_proto_scalars),
            ("downlink_scalars", self.downlink_scalars, other.downlink_scalars),
        ];
        pairs
            .iter()
            .find(|(_, a, b)| a != b)
            .map(|(name, a, b)| format!("{name} recorded {a}, recomputed {b}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "header")]
pub struct TraceHeader {
    pub format_version: u32,
    pub mode: String,
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub adapter_dim: usize,
    pub k_budget: Vec<usize>,
    pub totals: Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub seq: u64,
    pub round: usize,
    pub selected: Vec<usize>,
    pub ledger: Ledger,
    pub anchors_external: usize,
    pub anchors_global: usize,
    pub mean_acc: f64,
    pub client_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    PublicBroadcast {
        seq: u64,
        round: usize,
        rows: usize,
        input_dim: usize,
        recipients: usize,
    },
    AdapterBroadcast {
        seq: u64,
        round: usize,
        d: usize,
        recipients: usize,
    },
    PrototypeUpload {
        seq: u64,
        round: usize,
        client_id: usize,
        class_id: usize,
        kind: PrototypeKind,
        weight: u64,
        vector: Vec<f64>,
    },
    AnchorBroadcast {
        seq: u64,
        round: usize,
        class_id: usize,
        kind: PrototypeKind,
        recipients: usize,
        vector: Vec<f64>,
    },
    SparseUpdate {
        seq: u64,
        round: usize,
        client_id: usize,
        d: usize,
        k: usize,
        indices: Vec<usize>,
        values: Vec<f64>,
        data_size: u64,
    },
    RoundSummary(RoundSummary),
}

impl TraceRecord {
    pub fn seq(&self) -> u64 {
        match self {
            TraceRecord::PublicBroadcast { seq, .. }
            | TraceRecord::AdapterBroadcast { seq, .. }
            | TraceRecord::PrototypeUpload { seq, .. }
            | TraceRecord::AnchorBroadcast { seq, .. }
            | TraceRecord::SparseUpdate { seq, .. } => *seq,
            TraceRecord::RoundSummary(s) => s.seq,
        }
    }

    pub fn round(&self) -> usize {
        match self {
            TraceRecord::PublicBroadcast { round, .. }
            | TraceRecord::AdapterBroadcast { round, .. }
            | TraceRecord::PrototypeUpload { round, .. }
            | TraceRecord::AnchorBroadcast { round, .. }
            | TraceRecord::SparseUpdate { round, .. } => *round,
            TraceRecord::RoundSummary(s) => s.round,
        }
    }

    /// Scalars this record puts on the wire.
    pub fn cost(&self) -> Ledger {
        let mut l = Ledger::default();
        match self {
            TraceRecord::PublicBroadcast {
                rows,
                input_dim,
                recipients,
                ..
            } => l.downlink_scalars = (rows * (input_dim + 1) * recipients) as u64,
            TraceRecord::AdapterBroadcast { d, recipients, .. } => {
                l.downlink_scalars = (d * recipients) as u64
            }
            TraceRecord::PrototypeUpload { kind, vector, .. } => {
                l.uplink_proto_scalars =
                    vector.len() as u64 + u64::from(*kind == PrototypeKind::Local)
            }
            TraceRecord::AnchorBroadcast {
                vector, recipients, ..
            } => l.downlink_scalars = (vector.len() * recipients) as u64,
            TraceRecord::SparseUpdate {
                indices, values, ..
            } => {
                l.uplink_values = values.len() as u64;
                l.uplink_indices = indices.len() as u64;
            }
            TraceRecord::RoundSummary(_) => {}
        }
        l
    }

    fn phase(&self) -> u8 {
        match self {
            TraceRecord::PublicBroadcast { .. } | TraceRecord::AdapterBroadcast { .. } => 0,
            TraceRecord::PrototypeUpload { .. } => 1,
            TraceRecord::AnchorBroadcast { .. } => 2,
            TraceRecord::SparseUpdate { .. } => 3,
            TraceRecord::RoundSummary(_) => 4,
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            TraceRecord::PublicBroadcast { .. } => "public_broadcast",
            TraceRecord::AdapterBroadcast { .. } => "adapter_broadcast",
            TraceRecord::PrototypeUpload { .. } => "prototype_upload",
            TraceRecord::AnchorBroadcast { .. } => "anchor_broadcast",
            TraceRecord::SparseUpdate { .. } => "sparse_update",
            TraceRecord::RoundSummary(_) => "round_summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn summaries(&self) -> impl Iterator<Item = &RoundSummary> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::RoundSummary(s) => Some(s),
            _ => None,
        })
    }

    pub fn recomputed_totals(&self) -> Ledger {
        let mut total = Ledger::default();
        for r in &self.records {
            total.add(&r.cost());
        }
        total
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?)
                .map_err(|e| Error::Trace(format!("line 1: bad header: {e}")))?,
            None => return Err(Error::Trace("empty trace".into())),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Trace(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self { header, records })
    }
}

/// A failed trace check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub check: &'static str,
    pub round: Option<usize>,
    pub detail: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.round {
            Some(r) => write!(f, "check={} round={} {}", self.check, r, self.detail),
            None => write!(f, "check={} {}", self.check, self.detail),
        }
    }
}

/// Recomputes every ledger and structural invariant of a trace. An empty
/// result means the trace is consistent.
pub fn verify(trace: &Trace) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |check, round, detail: String| findings.push(Finding { check, round, detail });

    // Per-round ledgers against round summaries.
    let mut per_round: BTreeMap<usize, Ledger> = BTreeMap::new();
    let mut updates_per_round: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &trace.records {
        per_round.entry(r.round()).or_default().add(&r.cost());
        if matches!(r, TraceRecord::SparseUpdate { .. }) {
            *updates_per_round.entry(r.round()).or_default() += 1;
        }
    }
    let summaries: Vec<&RoundSummary> = trace.summaries().collect();
    for s in &summaries {
        let recomputed = per_round.get(&s.round).copied().unwrap_or_default();
        if let Some(d) = s.ledger.diff(&recomputed) {
            push("ledger", Some(s.round), d);
        }
        let updates = updates_per_round.get(&s.round).copied().unwrap_or(0);
        if updates != s.selected.len() {
            push(
                "ledger",
                Some(s.round),
                format!("{} sparse updates for {} selected clients", updates, s.selected.len()),
            );
        }
    }
    for round in per_round.keys() {
        if !summaries.iter().any(|s| s.round == *round) {
            push("ledger", Some(*round), "records without a round summary".into());
        }
    }
    if summaries.len() != trace.header.rounds {
        push(
            "ledger",
            None,
            format!("header declares {} rounds, found {}", trace.header.rounds, summaries.len()),
        );
    }
    if let Some(d) = trace.header.totals.diff(&trace.recomputed_totals()) {
        push("ledger", None, format!("header totals: {d}"));
    }

    // Logical clock and phase order.
    let mut last: Option<(u64, usize, u8)> = None;
    for r in &trace.records {
        let here = (r.seq(), r.round(), r.phase());
        if let Some((seq, round, phase)) = last {
            if here.0 <= seq {
                push("order", Some(here.1), format!("seq {} does not follow {seq}", here.0));
            }
            if here.1 < round || (here.1 == round && here.2 < phase) {
                push(
                    "order",
                    Some(here.1),
                    format!("{} record (seq {}) out of protocol order", r.type_name(), here.0),
                );
            }
        }
        last = Some(here);
    }

    // Record-level consistency.
    let d = trace.header.adapter_dim;
    let m = trace.header.embed_dim;
    for r in &trace.records {
        match r {
            TraceRecord::SparseUpdate {
                round,
                client_id,
                d: rd,
                k,
                indices,
                values,
                ..
            } => {
                let sorted = indices.windows(2).all(|w| w[0] < w[1]);
                if *rd != d || indices.len() != values.len() || indices.len() != (*k).min(d) || !sorted
                    || indices.iter().any(|&i| i >= d)
                {
                    push(
                        "sparse_update",
                        Some(*round),
                        format!("malformed update from client {client_id}"),
                    );
                }
                if trace.header.mode == "no_apud" && indices.len() != d {
                    push("mode", Some(*round), format!("client {client_id} sent {} of {d} values without dropping", indices.len()));
                }
            }
            TraceRecord::PrototypeUpload { round, client_id, vector, .. } => {
                if vector.len() != m {
                    push("prototype", Some(*round), format!("client {client_id} vector length {}", vector.len()));
                }
                if matches!(trace.header.mode.as_str(), "no_erpa" | "neither") {
                    push("mode", Some(*round), "prototype exchange in a mode without alignment".into());
                }
            }
            _ => {}
        }
    }
    findings
}

/// Scans raw trace lines for client-to-server records carrying anything other
/// than their documented fields.
pub fn privacy_scan(lines: &[Value]) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let Some(obj) = line.as_object() else {
            findings.push(Finding {
                check: "privacy",
                round: None,
                detail: format!("line {} is not an object", i + 1),
            });
            continue;
        };
        let ty = obj.get("type").and_then(Value::as_str).unwrap_or("");
        let Some((_, allowed)) = UPLINK_FIELDS.iter().find(|(t, _)| *t == ty) else {
            continue;
        };
        let round = obj.get("round").and_then(Value::as_u64).map(|r| r as usize);
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                findings.push(Finding {
                    check: "privacy",
                    round,
                    detail: format!("line {}: {ty} carries undeclared field {key:?}", i + 1),
                });
            }
        }
    }
    findings
}
