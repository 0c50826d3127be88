//! Magnitude-aware Top-K update dropping.
//!
//! Clients rank adapter coordinates by how far training moved them and send
//! the current values of the `K` largest movers. The server merges each
//! coordinate over the clients that sent it, weighted by their data sizes,
//! and keeps the previous global value for coordinates nobody sent.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Sorted, distinct coordinate indices into an adapter of length `dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    dim: usize,
    selected: Vec<usize>,
}

impl SelectionMask {
    pub fn new(dim: usize, mut selected: Vec<usize>) -> Result<Self> {
        selected.sort_unstable();
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("mask", "duplicate index"));
        }
        if selected.last().is_some_and(|&i| i >= dim) {
            return Err(Error::invalid("mask", format!("index out of range for d = {dim}")));
        }
        Ok(Self { dim, selected })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.selected.binary_search(&i).is_ok()
    }

    /// Dense 0/1 form.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut bits = vec![0u8; self.dim];
        for &i in &self.selected {
            bits[i] = 1;
        }
        bits
    }
}

/// A client's masked adapter upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseAdapterUpdate {
    pub mask: SelectionMask,
    /// `values[j]` is the local parameter at `mask.selected()[j]`.
    pub values: Vec<f64>,
    pub data_size: u64,
}

impl SparseAdapterUpdate {
    pub fn new(mask: SelectionMask, values: Vec<f64>, data_size: u64) -> Result<Self> {
        ensure_len("sparse values", mask.len(), values.len())?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("sparse values", "non-finite value"));
        }
        Ok(Self {
            mask,
            values,
            data_size,
        })
    }
}

/// Scalars a sparse update puts on the wire.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UplinkCost {
    pub values: u64,
    pub indices: u64,
}

/// `|local - global|`, element-wise.
pub fn update_magnitude(local: &[f64], global: &[f64]) -> Result<Vec<f64>> {
    ensure_len("local adapter", global.len(), local.len())?;
    Ok(local.iter().zip(global).map(|(l, g)| (l - g).abs()).collect())
}

/// Indices of the `min(k, d)` largest magnitudes; ties go to the lower index.
pub fn topk_select(magnitudes: &[f64], k: usize) -> SelectionMask {
    let d = magnitudes.len();
    let k = k.min(d);
    let mut order: Vec<usize> = (0..d).collect();
    let by_magnitude = |&a: &usize, &b: &usize| {
        magnitudes[b].total_cmp(&magnitudes[a]).then(a.cmp(&b))
    };
    if k < d {
        order.select_nth_unstable_by(k, by_magnitude);
    }
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    SelectionMask { dim: d, selected }
}

/// Client-side step: select by magnitude, ship the local values.
pub fn make_sparse_update(
    local: &[f64],
    global: &[f64],
    k: usize,
    data_size: u64,
) -> Result<SparseAdapterUpdate> {
    let magnitudes = update_magnitude(local, global)?;
    let mask = topk_select(&magnitudes, k);
    let values = mask.selected().iter().map(|&i| local[i]).collect();
    SparseAdapterUpdate::new(mask, values, data_size)
}

/// Server-side merge. `updates` are consumed in list order; the orchestrator
/// passes them in ascending client id.
pub fn aggregate_masked(global: &[f64], updates: &[SparseAdapterUpdate]) -> Result<Vec<f64>> {
    let d = global.len();
    let mut weight_total = vec![0u64; d];
    for u in updates {
        ensure_len("mask dimension", d, u.mask.dim())?;
        ensure_len("sparse values", u.mask.len(), u.values.len())?;
        for &i in u.mask.selected() {
            weight_total[i] += u.data_size;
        }
    }
    let mut touched = vec![false; d];
    for u in updates {
        for &i in u.mask.selected() {
            touched[i] = true;
        }
    }
    if let Some(i) = (0..d).find(|&i| touched[i] && weight_total[i] == 0) {
        return Err(Error::ZeroDataSize { coordinate: i });
    }

    let mut acc = vec![0.0; d];
    for u in updates {
        for (&i, &v) in u.mask.selected().iter().zip(&u.values) {
            acc[i] += (u.data_size as f64 / weight_total[i] as f64) * v;
        }
    }
    Ok((0..d)
        .map(|i| if touched[i] { acc[i] } else { global[i] })
        .collect())
}

pub fn uplink_cost(update: &SparseAdapterUpdate) -> UplinkCost {
    UplinkCost {
        values: update.values.len() as u64,
        indices: update.mask.len() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn magnitude_basics() {
        assert_eq!(update_magnitude(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(update_magnitude(&[-1.0, 4.0], &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert!(update_magnitude(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_select(&[0.1, 0.9, 0.5], 2).selected(), &[1, 2]);
        assert_eq!(topk_select(&[0.1, 0.9, 0.5], 3).selected(), &[0, 1, 2]);
        assert_eq!(topk_select(&[0.5, 0.5, 0.5], 2).selected(), &[0, 1]);
        assert_eq!(topk_select(&[0.5, 0.5, 0.5], 9).len(), 3);
        assert!(topk_select(&[0.5, 0.5], 0).is_empty());
    }

    #[test]
    fn sparse_update_examples() {
        let local = [1.0, -3.0, 0.5, 2.0, 0.0];
        let global = [0.9, 0.0, 0.5, -1.0, 0.2];
        // |delta| = (0.1, 3.0, 0.0, 3.0, 0.2): top-2 is {1, 3}
        let u = make_sparse_update(&local, &global, 2, 7).unwrap();
        assert_eq!(u.mask.selected(), &[1, 3]);
        assert_eq!(u.values, vec![-3.0, 2.0]);
        assert_eq!(u.mask.to_binary(), vec![0, 1, 0, 1, 0]);

        let empty = make_sparse_update(&local, &global, 0, 7).unwrap();
        assert!(empty.values.is_empty());
        assert_eq!(uplink_cost(&empty), UplinkCost { values: 0, indices: 0 });

        let dense = make_sparse_update(&local, &global, 5, 7).unwrap();
        assert_eq!(dense.values, local.to_vec());
        assert_eq!(uplink_cost(&dense), UplinkCost { values: 5, indices: 5 });
    }

    #[test]
    fn aggregate_hand_example() {
        let global = [9.0, 9.0, 9.0];
        let a = SparseAdapterUpdate::new(SelectionMask::new(3, vec![0, 1]).unwrap(), vec![1.0, 2.0], 10).unwrap();
        let b = SparseAdapterUpdate::new(SelectionMask::new(3, vec![1, 2]).unwrap(), vec![4.0, 5.0], 30).unwrap();
        let out = aggregate_masked(&global, &[a, b]).unwrap();
        assert_eq!(out, vec![1.0, 0.25 * 2.0 + 0.75 * 4.0, 5.0]);
    }

    #[test]
    fn aggregate_no_updates_keeps_global() {
        let global = [0.1, -2.5, 3.0];
        assert_eq!(bits(&aggregate_masked(&global, &[]).unwrap()), bits(&global));
    }

    #[test]
    fn aggregate_single_dense_sender() {
        let local = [0.3, 0.7, -1.1];
        let u = make_sparse_update(&local, &[0.0; 3], 3, 5).unwrap();
        assert_eq!(aggregate_masked(&[0.0; 3], &[u]).unwrap(), local.to_vec());
    }

    #[test]
    fn aggregate_rejects_zero_weight() {
        let u = SparseAdapterUpdate::new(SelectionMask::new(2, vec![1]).unwrap(), vec![1.0], 0).unwrap();
        assert!(matches!(aggregate_masked(&[0.0; 2], &[u]), Err(Error::ZeroDataSize { coordinate: 1 })));
    }

    #[test]
    fn aggregate_rejects_dim_mismatch() {
        let u = SparseAdapterUpdate::new(SelectionMask::new(3, vec![1]).unwrap(), vec![1.0], 1).unwrap();
        assert!(aggregate_masked(&[0.0; 2], &[u]).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(SelectionMask::new(3, vec![0, 0]).is_err());
        assert!(SelectionMask::new(3, vec![3]).is_err());
        assert_eq!(SelectionMask::new(3, vec![2, 0]).unwrap().selected(), &[0, 2]);
    }

    fn arb_round() -> impl Strategy<Value = (Vec<f64>, Vec<(Vec<f64>, usize, u64)>)> {
        (1usize..40).prop_flat_map(|d| {
            (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(
                    (prop::collection::vec(-5.0f64..5.0, d), 0..=d, 1u64..500),
                    1..6,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn masked_aggregation_properties((global, clients) in arb_round()) {
            let d = global.len();
            let updates: Vec<_> = clients.iter()
                .map(|(local, k, n)| make_sparse_update(local, &global, *k, *n).unwrap())
                .collect();
            for (u, (_, k, _)) in updates.iter().zip(&clients) {
                prop_assert_eq!(uplink_cost(u).values as usize, (*k).min(d));
            }
            let out = aggregate_masked(&global, &updates).unwrap();
            for i in 0..d {
                let senders: Vec<_> = updates.iter().filter(|u| u.mask.contains(i)).collect();
                if senders.is_empty() {
                    prop_assert_eq!(out[i].to_bits(), global[i].to_bits());
                } else {
                    let z: u64 = senders.iter().map(|u| u.data_size).sum();
                    let wsum: f64 = senders.iter().map(|u| u.data_size as f64 / z as f64).sum();
                    prop_assert!((wsum - 1.0).abs() <= 1e-15);
                    let vals: Vec<f64> = senders.iter()
                        .map(|u| u.values[u.mask.selected().binary_search(&i).unwrap()])
                        .collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
                }
            }

            // Reordering senders changes rounding only.
            let mut reversed = updates.clone();
            reversed.reverse();
            let out_rev = aggregate_masked(&global, &reversed).unwrap();
            for i in 0..d {
                let n = updates.iter().filter(|u| u.mask.contains(i)).count().max(1) as f64;
                let scale = updates.iter()
                    .filter_map(|u| u.mask.selected().binary_search(&i).ok().map(|j| u.values[j].abs()))
                    .fold(global[i].abs(), f64::max);
                prop_assert!((out[i] - out_rev[i]).abs() <= 4.0 * f64::EPSILON * n * scale.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn dense_budget_is_weighted_fedavg((global, clients) in arb_round()) {
            let d = global.len();
            let updates: Vec<_> = clients.iter()
                .map(|(local, _, n)| make_sparse_update(local, &global, d, *n).unwrap())
                .collect();
            let out = aggregate_masked(&global, &updates).unwrap();
            let z: u64 = clients.iter().map(|c| c.2).sum();
            for i in 0..d {
                let mut acc = 0.0;
                for (local, _, n) in &clients {
                    acc += (*n as f64 / z as f64) * local[i];
                }
                prop_assert_eq!(out[i].to_bits(), acc.to_bits());
            }
        }
    }
}
