//! Replay of the 2-client, d = 23, K = 5 micro-scenario frozen by
//! `oracles/oracle.py`.

#![allow(dead_code)]

use std::collections::BTreeSet;

use refproto::data::{Dataset, PublicDataset};
use refproto::model::{BackboneParams, Dense, Matrix, NetworkShape};
use refproto::orchestrator::{
    ClientState, ExperimentConfig, Federation, KBudget, PublicCoverage, RoundTrace,
};
use refproto::erpa::PrototypeKind;
use refproto::trace::TraceRecord;
use refproto::Mode;
use serde_json::Value;

const FIXTURE: &str = include_str!("../fixtures/oracle_values.json");

pub fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn rows(v: &Value) -> Vec<Vec<f64>> {
    v.as_array().unwrap().iter().map(floats).collect()
}

pub fn dense(v: &Value) -> Dense {
    Dense::new(Matrix::from_rows(&rows(&v["weight"])).unwrap(), floats(&v["bias"])).unwrap()
}

fn dataset(v: &Value, classes: usize) -> Dataset {
    let labels = v["labels"].as_array().unwrap().iter().map(|l| l.as_u64().unwrap() as usize).collect();
    Dataset::new(Matrix::from_rows(&rows(&v["inputs"])).unwrap(), labels, classes).unwrap()
}

pub fn usize_of(v: &Value) -> usize {
    v.as_u64().unwrap() as usize
}

pub struct Scenario {
    pub round: RoundTrace,
    pub federation: Federation,
    pub expected: Value,
}

pub fn replay() -> Scenario {
    let all: Value = serde_json::from_str(FIXTURE).unwrap();
    let ht = &all["hand_trace"];
    let s = &ht["shape"];
    let shape = NetworkShape::new(
        usize_of(&s["input_dim"]),
        usize_of(&s["hidden_dim"]),
        usize_of(&s["embed_dim"]),
        usize_of(&s["num_classes"]),
    )
    .unwrap();
    let cfg = &ht["config"];
    let covered: BTreeSet<usize> = ht["covered_classes"].as_array().unwrap().iter().map(usize_of).collect();
    let config = ExperimentConfig {
        shape,
        num_clients: 2,
        rounds: 1,
        local_epochs: usize_of(&cfg["local_epochs"]),
        batch_size: usize_of(&cfg["batch_size"]),
        lr: cfg["lr"].as_f64().unwrap(),
        momentum: cfg["momentum"].as_f64().unwrap(),
        weight_decay: cfg["weight_decay"].as_f64().unwrap(),
        lambda: cfg["lambda"].as_f64().unwrap(),
        k_budget: KBudget::Count(usize_of(&cfg["k_budget"])),
        public_coverage: PublicCoverage::Classes(covered),
        mode: Mode::Full,
        ..ExperimentConfig::default()
    };
    let clients = (0..2)
        .map(|k| ClientState {
            id: k,
            backbone: BackboneParams { layer: dense(&ht["backbones"][k]) },
            data: dataset(&ht["clients"][k], shape.num_classes),
        })
        .collect();
    let public = PublicDataset::new(dataset(&ht["public"], shape.num_classes));
    let test = dataset(&ht["public"], shape.num_classes);
    let mut federation =
        Federation::from_parts(config, floats(&ht["init_adapter"]), clients, public, test).unwrap();
    assert_eq!(federation.env.config.adapter_len(), 23);
    let round = federation.step().unwrap();
    Scenario {
        round,
        federation,
        expected: ht["expected"].clone(),
    }
}


fn close(actual: &[f64], expected: &[f64], tol: f64, what: &str) -> Result<(), String> {
    if actual.len() != expected.len() {
        return Err(format!("{what}: length {} vs {}", actual.len(), expected.len()));
    }
    match actual.iter().zip(expected).position(|(a, e)| (a - e).abs() > tol) {
        Some(i) => Err(format!("{what}[{i}]: {} vs {}", actual[i], expected[i])),
        None => Ok(()),
    }
}

/// Every comparison at once: prototype records and server prototypes
/// bit-for-bit, masks exactly, parameters to 1e-12.
pub fn check(sc: &Scenario) -> Result<(), String> {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let uploads: Vec<_> = sc
        .round
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::PrototypeUpload { client_id, class_id, kind, weight, vector, .. } => {
                Some((*client_id, *class_id, *kind, *weight, vector.clone()))
            }
            _ => None,
        })
        .collect();
    let expected = sc.expected["prototype_records"].as_array().unwrap();
    if uploads.len() != expected.len() {
        return Err(format!("{} prototype records, expected {}", uploads.len(), expected.len()));
    }
    for (got, want) in uploads.iter().zip(expected) {
        let kind = match want["kind"].as_str().unwrap() {
            "local" => PrototypeKind::Local,
            _ => PrototypeKind::PublicInduced,
        };
        let header = (usize_of(&want["client_id"]), usize_of(&want["class_id"]), kind, want["weight"].as_u64().unwrap());
        if (got.0, got.1, got.2, got.3) != header || bits(&got.4) != bits(&floats(&want["vector"])) {
            return Err(format!("prototype record client {} class {} differs", got.0, got.1));
        }
    }
    for (name, map) in [("external", &sc.round.bundle.external), ("global", &sc.round.bundle.global)] {
        for (c, v) in sc.expected[name].as_object().unwrap() {
            let got = map.get(&c.parse::<usize>().unwrap()).ok_or(format!("{name} prototype {c} missing"))?;
            if bits(got) != bits(&floats(v)) {
                return Err(format!("{name} prototype {c} differs"));
            }
        }
    }
    for (k, want) in sc.expected["updates"].as_array().unwrap().iter().enumerate() {
        let (_, update) = &sc.round.updates[k];
        let indices: Vec<usize> = want["indices"].as_array().unwrap().iter().map(usize_of).collect();
        if update.mask.selected() != indices.as_slice() {
            return Err(format!("client {k} mask {:?} vs {indices:?}", update.mask.selected()));
        }
        close(&update.values, &floats(&want["values"]), 1e-12, "sparse values")?;
    }
    for (k, want) in sc.expected["backbones"].as_array().unwrap().iter().enumerate() {
        let expected = BackboneParams { layer: dense(want) }.flatten();
        close(&sc.federation.clients[k].backbone.flatten(), &expected, 1e-12, "backbone")?;
    }
    close(&sc.federation.server.adapter, &floats(&sc.expected["global_adapter"]), 1e-12, "global adapter")
}
