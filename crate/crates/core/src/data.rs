//! Synthetic Gaussian-blob tasks, Dirichlet label-skew partitioning, and the
//! server-held public dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::Matrix;
use crate::seed::{self, Stream};

pub const MAX_PARTITION_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        ensure_len("labels", inputs.rows(), labels.len())?;
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::invalid(
                    "labels",
                    format!("label {y} at row {row} out of range for {num_classes} classes"),
                ));
            }
            class_index.entry(y).or_default().push(row);
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, input_dim),
            labels: Vec::new(),
            num_classes,
            class_index: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows of class `c`, in row order; empty when the class is absent.
    pub fn class_rows(&self, c: usize) -> &[usize] {
        self.class_index.get(&c).map_or(&[], Vec::as_slice)
    }

    pub fn class_count(&self, c: usize) -> usize {
        self.class_rows(c).len()
    }

    /// Classes with at least one row, ascending.
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_index.keys().copied()
    }

    /// A new dataset made of `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let cols = self.input_dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid("rows", format!("row {r} out of range")));
            }
            data.extend_from_slice(self.inputs.row(r));
            labels.push(self.labels[r]);
        }
        Dataset::new(Matrix::from_vec(rows.len(), cols, data)?, labels, self.num_classes)
    }

    /// CSV with header `x0,...,x{n-1},label`, one sample per line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &y) in self.inputs.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let cols = r
            .headers()?
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("csv", "missing label column"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            ensure_len("csv fields", cols + 1, rec.len())?;
            for field in rec.iter().take(cols) {
                data.push(parse_field(field)?);
            }
            labels.push(
                rec[cols]
                    .parse::<usize>()
                    .map_err(|e| Error::invalid("csv", format!("bad label {:?}: {e}", &rec[cols])))?,
            );
        }
        Dataset::new(Matrix::from_vec(labels.len(), cols, data)?, labels, num_classes)
    }
}

fn parse_field(field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::invalid("csv", format!("bad number {field:?}: {e}")))
}

/// Isotropic Gaussian blobs around pseudo-random class centers on a sphere.
///
/// Centers depend only on the seed; each call to [`BlobGenerator::sample`]
/// draws from its own stream so training, public and test rows never share
/// random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobGenerator {
    pub num_classes: usize,
    pub input_dim: usize,
    pub center_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
    centers: Vec<Vec<f64>>,
}

impl BlobGenerator {
    pub fn new(
        num_classes: usize,
        input_dim: usize,
        center_radius: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::invalid("blobs", "num_classes and input_dim must be at least 1"));
        }
        if !(center_radius > 0.0) || !center_radius.is_finite() {
            return Err(Error::invalid("center_radius", "must be positive and finite"));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::invalid("noise_std", "must be nonnegative and finite"));
        }
        let mut rng = seed::stream(seed, Stream::Centers, &[]);
        let centers = (0..num_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.iter().map(|a| a / norm * center_radius).collect();
                }
            })
            .collect();
        Ok(Self {
            num_classes,
            input_dim,
            center_radius,
            noise_std,
            seed,
            centers,
        })
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c]
    }

    /// `per_class_n` samples for each class in `classes`, class-major order.
    pub fn sample(&self, classes: &[usize], per_class_n: usize, stream: Stream) -> Result<Dataset> {
        let mut rng = seed::stream(self.seed, stream, &[]);
        let noise = Normal::new(0.0, self.noise_std)
            .map_err(|e| Error::invalid("noise_std", e.to_string()))?;
        let mut data = Vec::with_capacity(classes.len() * per_class_n * self.input_dim);
        let mut labels = Vec::with_capacity(classes.len() * per_class_n);
        for &c in classes {
            if c >= self.num_classes {
                return Err(Error::invalid("classes", format!("class {c} out of range")));
            }
            for _ in 0..per_class_n {
                data.extend(self.centers[c].iter().map(|mu| mu + noise.sample(&mut rng)));
                labels.push(c);
            }
        }
        Dataset::new(
            Matrix::from_vec(labels.len(), self.input_dim, data)?,
            labels,
            self.num_classes,
        )
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.num_classes).collect()
    }
}

/// A blob dataset with `per_class_n` rows per class drawn from the training stream.
pub fn gen_blobs(
    num_classes: usize,
    per_class_n: usize,
    input_dim: usize,
    center_radius: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if per_class_n == 0 {
        return Err(Error::invalid("per_class_n", "must be at least 1"));
    }
    let gen = BlobGenerator::new(num_classes, input_dim, center_radius, noise_std, seed)?;
    gen.sample(&gen.all_classes(), per_class_n, Stream::Train)
}

/// Disjoint per-client row assignments covering the whole source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>, num_rows: usize) -> Result<Self> {
        let mut seen = vec![false; num_rows];
        for (k, rows) in assignments.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::invalid("partition", format!("client {k} has no rows")));
            }
            for &r in rows {
                if r >= num_rows || seen[r] {
                    return Err(Error::invalid("partition", format!("row {r} duplicated or out of range")));
                }
                seen[r] = true;
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::invalid("partition", format!("row {r} unassigned")));
        }
        Ok(Self { assignments })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_rows(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    /// Mean over classes present in `dataset` of the largest single-client share.
    pub fn mean_max_share(&self, dataset: &Dataset) -> f64 {
        let mut owner = vec![0usize; dataset.len()];
        for (k, rows) in self.assignments.iter().enumerate() {
            for &r in rows {
                owner[r] = k;
            }
        }
        let classes: Vec<usize> = dataset.present_classes().collect();
        let total: f64 = classes
            .iter()
            .map(|&c| {
                let rows = dataset.class_rows(c);
                let mut counts = vec![0usize; self.num_clients()];
                for &r in rows {
                    counts[owner[r]] += 1;
                }
                *counts.iter().max().unwrap_or(&0) as f64 / rows.len() as f64
            })
            .sum();
        total / classes.len() as f64
    }

    /// CSV `client_id,row`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["client_id", "row"])?;
        for (k, rows) in self.assignments.iter().enumerate() {
            for r in rows {
                w.write_record([k.to_string(), r.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_rows: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut assignments: Vec<Vec<usize>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            ensure_len("csv fields", 2, rec.len())?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::invalid("csv", format!("bad integer {s:?}: {e}")))
            };
            let (k, row) = (parse(&rec[0])?, parse(&rec[1])?);
            if assignments.len() <= k {
                assignments.resize_with(k + 1, Vec::new);
            }
            assignments[k].push(row);
        }
        Partition::new(assignments, num_rows)
    }
}

/// Splits `n` items by `proportions` with largest-remainder rounding; ties in
/// the fractional part go to the lower index.
fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet_proportions<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Ok(draws.iter().map(|g| g / sum).collect())
    } else {
        // Every draw underflowed: put all mass on the largest (first on ties).
        let best = (0..n).fold(0, |b, k| if draws[k] > draws[b] { k } else { b });
        Ok((0..n).map(|k| if k == best { 1.0 } else { 0.0 }).collect())
    }
}

/// Per-class Dirichlet label-skew split of `dataset` across `num_clients`.
///
/// Each class's rows are shuffled, then cut into consecutive chunks whose sizes
/// follow a `Dir(alpha)` draw rounded by largest remainder. A draw that leaves
/// any client empty is retried with the next attempt's stream.
pub fn dirichlet_partition(dataset: &Dataset, num_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::invalid("num_clients", "must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", "must be positive and finite"));
    }
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = seed::stream(seed, Stream::Partition, &[attempt as u64]);
        let mut assignments = vec![Vec::new(); num_clients];
        for c in dataset.present_classes() {
            let mut rows = dataset.class_rows(c).to_vec();
            rows.shuffle(&mut rng);
            let proportions = if num_clients == 1 {
                vec![1.0]
            } else {
                dirichlet_proportions(alpha, num_clients, &mut rng)?
            };
            let counts = largest_remainder(rows.len(), &proportions);
            let mut start = 0;
            for (k, n) in counts.into_iter().enumerate() {
                assignments[k].extend_from_slice(&rows[start..start + n]);
                start += n;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Partition::new(assignments, dataset.len());
        }
    }
    Err(Error::PartitionFailed {
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

/// Server-held auxiliary data covering a subset of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicDataset {
    data: Dataset,
    covered: BTreeSet<usize>,
}

impl PublicDataset {
    pub fn new(data: Dataset) -> Self {
        let covered = data.present_classes().collect();
        Self { data, covered }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn covered_classes(&self) -> &BTreeSet<usize> {
        &self.covered
    }

    pub fn covers(&self, c: usize) -> bool {
        self.covered.contains(&c)
    }

    /// `delta_c`: 1 when class `c` has no public samples.
    pub fn indicator(&self) -> AvailabilityIndicator {
        AvailabilityIndicator::new(self.data.num_classes(), &self.covered)
    }
}

/// `missing[c]` is true exactly when the public dataset has no samples of `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityIndicator {
    missing: Vec<bool>,
}

impl AvailabilityIndicator {
    pub fn new(num_classes: usize, covered: &BTreeSet<usize>) -> Self {
        Self {
            missing: (0..num_classes).map(|c| !covered.contains(&c)).collect(),
        }
    }

    pub fn delta(&self, c: usize) -> u8 {
        u8::from(self.missing[c])
    }

    pub fn is_missing(&self, c: usize) -> bool {
        self.missing[c]
    }

    pub fn num_classes(&self) -> usize {
        self.missing.len()
    }

    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.missing.len()).filter(|&c| !self.missing[c])
    }

    pub fn uncovered(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.missing.len()).filter(|&c| self.missing[c])
    }
}

/// Fresh samples of exactly `covered_classes`, from the public stream.
pub fn build_public(
    generator: &BlobGenerator,
    covered_classes: &BTreeSet<usize>,
    per_class_pub_n: usize,
) -> Result<PublicDataset> {
    if per_class_pub_n == 0 {
        return Err(Error::invalid("per_class_pub_n", "must be at least 1"));
    }
    let classes: Vec<usize> = covered_classes.iter().copied().collect();
    let data = generator.sample(&classes, per_class_pub_n, Stream::Public)?;
    Ok(PublicDataset::new(data))
}
