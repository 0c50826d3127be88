//! Prototype exchange and anchor construction.
//!
//! For classes the public dataset covers, every selected client embeds the
//! public samples with its own backbone and the broadcast feature adapter; the
//! server averages those uniformly into an external-reference prototype. For
//! uncovered classes, clients holding the class send a local mean embedding
//! with its sample count, and the server takes the count-weighted mean. The
//! resulting per-class vectors become the anchors of the alignment loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AvailabilityIndicator, Dataset, PublicDataset};
use crate::error::{ensure_len, Error, Result};
use crate::model::{embed, AnchorSet, BackboneParams, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    PublicInduced,
    Local,
    ExternalReference,
    Global,
}

impl PrototypeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeKind::PublicInduced => "public_induced",
            PrototypeKind::Local => "local",
            PrototypeKind::ExternalReference => "external_reference",
            PrototypeKind::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub kind: PrototypeKind,
    /// Sample count behind a local prototype; zero for other kinds.
    pub weight: u64,
    pub vector: Vec<f64>,
}

/// One client's prototype upload for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPrototypes {
    pub client_id: usize,
    pub prototypes: Vec<Prototype>,
}

/// Server broadcast: external references for covered classes and global
/// prototypes for uncovered classes that some selected client holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBundle {
    pub external: BTreeMap<usize, Vec<f64>>,
    pub global: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeBundle {
    pub fn len(&self) -> usize {
        self.external.len() + self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mean_embedding(
    data: &Dataset,
    rows: &[usize],
    backbone: &BackboneParams,
    feature: &Dense,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; feature.out_dim()];
    for &r in rows {
        let e = embed(data.inputs().row(r), backbone, feature)?;
        for (a, v) in acc.iter_mut().zip(&e) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Mean public embedding for every publicly covered class.
pub fn client_public_prototypes(
    public: &PublicDataset,
    backbone: &BackboneParams,
    feature: &Dense,
) -> Result<Vec<Prototype>> {
    public
        .covered_classes()
        .iter()
        .map(|&c| {
            Ok(Prototype {
                class_id: c,
                kind: PrototypeKind::PublicInduced,
                weight: 0,
                vector: mean_embedding(public.data(), public.data().class_rows(c), backbone, feature)?,
            })
        })
        .collect()
}

/// Mean local embedding for every uncovered class the client holds.
pub fn client_local_prototypes(
    local: &Dataset,
    indicator: &AvailabilityIndicator,
    backbone: &BackboneParams,
    feature: &Dense,
) -> Result<Vec<Prototype>> {
    indicator
        .uncovered()
        .filter(|&c| local.class_count(c) > 0)
        .map(|c| {
            let rows = local.class_rows(c);
            Ok(Prototype {
                class_id: c,
                kind: PrototypeKind::Local,
                weight: rows.len() as u64,
                vector: mean_embedding(local, rows, backbone, feature)?,
            })
        })
        .collect()
}

/// Folds client uploads into a [`PrototypeBundle`], visiting `selected` in
/// the order given (ascending client id by convention).
pub fn server_aggregate(
    received: &[ClientPrototypes],
    selected: &[usize],
    indicator: &AvailabilityIndicator,
    embed_dim: usize,
) -> Result<PrototypeBundle> {
    let by_client: BTreeMap<usize, &ClientPrototypes> =
        received.iter().map(|r| (r.client_id, r)).collect();
    let lookup = |k: usize, c: usize, kind: PrototypeKind| -> Option<&Prototype> {
        by_client
            .get(&k)?
            .prototypes
            .iter()
            .find(|p| p.class_id == c && p.kind == kind)
    };
    for r in received {
        for p in &r.prototypes {
            ensure_len("prototype", embed_dim, p.vector.len())?;
            if !p.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("prototype", "non-finite entry"));
            }
            if p.class_id >= indicator.num_classes() {
                return Err(Error::invalid("prototype", format!("class {} out of range", p.class_id)));
            }
            let expected = if indicator.is_missing(p.class_id) {
                PrototypeKind::Local
            } else {
                PrototypeKind::PublicInduced
            };
            if p.kind != expected || (p.kind == PrototypeKind::Local && p.weight == 0) {
                return Err(Error::ProtocolViolation {
                    client_id: r.client_id,
                    class_id: p.class_id,
                    what: "prototype of the kind its class requires",
                });
            }
        }
    }

    let mut bundle = PrototypeBundle::default();
    for c in indicator.covered() {
        let mut acc = vec![0.0; embed_dim];
        for &k in selected {
            let p = lookup(k, c, PrototypeKind::PublicInduced).ok_or(Error::ProtocolViolation {
                client_id: k,
                class_id: c,
                what: "public-induced prototype",
            })?;
            for (a, v) in acc.iter_mut().zip(&p.vector) {
                *a += v;
            }
        }
        if !selected.is_empty() {
            let n = selected.len() as f64;
            bundle.external.insert(c, acc.into_iter().map(|a| a / n).collect());
        }
    }
    for c in indicator.uncovered() {
        let holders: Vec<&Prototype> = selected
            .iter()
            .filter_map(|&k| lookup(k, c, PrototypeKind::Local))
            .collect();
        if holders.is_empty() {
            continue;
        }
        let total: u64 = holders.iter().map(|p| p.weight).sum();
        let mut acc = vec![0.0; embed_dim];
        for p in holders {
            let w = p.weight as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(&p.vector) {
                *a += w * v;
            }
        }
        bundle.global.insert(c, acc);
    }
    Ok(bundle)
}

/// Anchor per class: the external reference when the class is covered, the
/// global prototype when it is not and one exists, otherwise none.
pub fn build_anchors(bundle: &PrototypeBundle, indicator: &AvailabilityIndicator) -> AnchorSet {
    (0..indicator.num_classes())
        .filter_map(|c| {
            let source = if indicator.is_missing(c) {
                &bundle.global
            } else {
                &bundle.external
            };
            source.get(&c).map(|v| (c, v.clone()))
        })
        .collect()
}
