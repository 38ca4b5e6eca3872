//! Datasets, Dirichlet label partitioning, synthetic mixtures and
//! auxiliary-dataset initialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::Batch;
use crate::rng::{stream_rng, Stream};

/// Labeled feature matrix; every label is below `num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    batch: Batch,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FedError::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            batch: Batch::new(features, labels, dim)?,
            num_classes,
        })
    }

    pub fn from_batch(batch: Batch, num_classes: usize) -> Result<Self> {
        if let Some(&label) = batch.labels().iter().find(|&&l| l >= num_classes) {
            return Err(FedError::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset { batch, num_classes })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn features(&self) -> &[f64] {
        self.batch.features()
    }

    pub fn labels(&self) -> &[usize] {
        self.batch.labels()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.batch.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Rows `indices`, keeping `num_classes`. Fails on an empty selection.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            batch: self.batch.gather(indices)?,
            num_classes: self.num_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionWarning {
    /// Small concentration parameters can leave a client with no data.
    ZeroSampleClient { client: usize },
}

/// Disjoint per-client index sets over one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    clients: Vec<Vec<usize>>,
    #[serde(default)]
    warnings: Vec<PartitionWarning>,
}

impl ClientPartition {
    /// Checks disjointness and bounds against a pool of `pool_size` rows.
    pub fn new(mut clients: Vec<Vec<usize>>, pool_size: usize) -> Result<Self> {
        let mut seen = vec![false; pool_size];
        for set in &mut clients {
            set.sort_unstable();
            for &i in set.iter() {
                if i >= pool_size {
                    return Err(FedError::InvalidArgument(format!(
                        "sample index {i} outside pool of {pool_size}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FedError::InvalidArgument(format!(
                        "sample index {i} assigned to more than one client"
                    )));
                }
            }
        }
        let warnings = clients
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_empty())
            .map(|(client, _)| PartitionWarning::ZeroSampleClient { client })
            .collect();
        Ok(ClientPartition { clients, warnings })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.clients[i]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    /// `m_i` for every client.
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total_assigned(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn warnings(&self) -> &[PartitionWarning] {
        &self.warnings
    }

    pub fn zero_sample_clients(&self) -> Vec<usize> {
        self.warnings
            .iter()
            .map(|PartitionWarning::ZeroSampleClient { client }| *client)
            .collect()
    }

    /// Per-client class histogram.
    pub fn label_counts(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|set| {
                let mut counts = vec![0; data.num_classes()];
                for &i in set {
                    counts[data.labels()[i]] += 1;
                }
                counts
            })
            .collect()
    }

    /// Mean label-distribution entropy (nats) over non-empty clients.
    pub fn mean_label_entropy(&self, data: &Dataset) -> f64 {
        let entropies: Vec<f64> = self
            .label_counts(data)
            .iter()
            .filter(|c| c.iter().sum::<usize>() > 0)
            .map(|c| label_entropy(c))
            .collect();
        if entropies.is_empty() {
            return 0.0;
        }
        entropies.iter().sum::<f64>() / entropies.len() as f64
    }

    /// One `client_id,sample_index` row per assignment.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["client_id", "sample_index"])?;
        for (c, set) in self.clients.iter().enumerate() {
            for &i in set {
                w.write_record([c.to_string(), i.to_string()])?;
            }
        }
        w.flush().map_err(|e| FedError::io("partition csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_clients: usize, pool_size: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut clients = vec![Vec::new(); num_clients];
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let parse = |k: usize| -> Result<usize> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| FedError::MalformedRow {
                        line,
                        reason: "expected `client_id,sample_index`".into(),
                    })
            };
            let (c, i) = (parse(0)?, parse(1)?);
            if c >= num_clients {
                return Err(FedError::MalformedRow {
                    line,
                    reason: format!("client {c} out of range"),
                });
            }
            clients[c].push(i);
        }
        ClientPartition::new(clients, pool_size)
    }
}

pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Draws from `Dir_n(alpha)`.
///
/// Gamma variates are formed in log space (`Gamma(a) = Gamma(a+1) U^(1/a)`)
/// so that concentrations like 0.01 do not underflow every component to 0.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Splits `count` items by `props`: floors first, then the remainder one at
/// a time by descending fractional part, ties to the lower client index.
pub fn apportion(count: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * count as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle().take(count.saturating_sub(assigned)) {
        out[j] += 1;
    }
    out
}

/// Per class `k`, draws `p_k ~ Dir_N(alpha)` and hands out the (shuffled)
/// class-`k` samples to clients in proportions `p_k`.
pub fn dirichlet_partition(
    data: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(FedError::InvalidArgument("n_clients must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::InvalidArgument(format!(
            "Dirichlet alpha must be positive and finite, got {alpha}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, 0, 0);
    let mut clients = vec![Vec::new(); n_clients];
    for mut idx in data.class_indices() {
        idx.shuffle(&mut rng);
        let props = sample_dirichlet(&mut rng, n_clients, alpha);
        let counts = apportion(idx.len(), &props);
        let mut rest = idx.as_slice();
        for (client, &c) in counts.iter().enumerate() {
            let (take, tail) = rest.split_at(c);
            clients[client].extend_from_slice(take);
            rest = tail;
        }
    }
    let partition = ClientPartition::new(clients, data.len())?;
    for w in partition.warnings() {
        log::warn!("dirichlet partition (alpha={alpha}): {w:?}");
    }
    Ok(partition)
}

/// Gaussian class clusters with unit covariance around fixed means.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    means: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

impl Mixture {
    /// Class means point in random directions with norm `separation`.
    pub fn new(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim == 0 {
            return Err(FedError::InvalidArgument(
                "mixture needs at least two classes and one dimension".into(),
            ));
        }
        let mut rng = stream_rng(seed, Stream::Mixture, 0, 0);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Orthogonal directions while there is room for them.
            if dirs.len() < dim {
                for prev in &dirs {
                    let proj: f64 = dir.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (x, p) in dir.iter_mut().zip(prev) {
                        *x -= proj * p;
                    }
                }
            }
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dirs.push(dir.iter().map(|x| x / norm).collect());
        }
        let means = dirs.iter().flatten().map(|x| separation * x).collect();
        Ok(Mixture {
            means,
            num_classes,
            dim,
        })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// `n_per_class` rows per class, class-major order.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(FedError::EmptyDataset);
        }
        let mut rng = stream_rng(seed, Stream::MixtureSamples, 0, 0);
        let n = n_per_class * self.num_classes;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for k in 0..self.num_classes {
            for _ in 0..n_per_class {
                for &mu in self.mean(k) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(mu + z);
                }
                labels.push(k);
            }
        }
        Dataset::new(features, labels, self.dim, self.num_classes)
    }
}

pub fn gen_synthetic_mixture(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    Mixture::new(num_classes, dim, separation, seed)?.sample(n_per_class, seed)
}

/// Parses `label,f1,...,fd` rows (no header). `num_classes` is one more
/// than the largest label.
pub fn parse_csv_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut fields = rec.iter();
        let label: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FedError::MalformedRow {
                line,
                reason: "label must be a non-negative integer".into(),
            })?;
        let start = features.len();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| FedError::MalformedRow {
                line,
                reason: format!("cannot parse feature `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(FedError::MalformedRow {
                    line,
                    reason: format!("non-finite feature `{f}`"),
                });
            }
            features.push(v);
        }
        let found = features.len() - start;
        match width {
            None if found == 0 => {
                return Err(FedError::MalformedRow {
                    line,
                    reason: "row has no features".into(),
                })
            }
            None => width = Some(found),
            Some(expected) if expected != found => {
                return Err(FedError::WidthMismatch {
                    line,
                    expected,
                    found,
                })
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let Some(dim) = width else {
        return Err(FedError::EmptyDataset);
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, dim, num_classes)
}

pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FedError::io(path, e))?;
    parse_csv_dataset(std::io::BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    /// Real local rows for classes the client holds, noise for the rest.
    Client,
    /// Pure noise; no client data involved.
    Server,
}

pub const INITIAL_BETA: f64 = 0.01;

/// Small learnable dataset: features and the inner step size `beta` are
/// optimized, labels are fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    /// `beta = exp(log_beta)` keeps the step size positive under updates.
    log_beta: f64,
}

impl AuxiliaryDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        beta: f64,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(FedError::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Dataset::new(features.clone(), labels.clone(), dim, num_classes)?;
        Ok(AuxiliaryDataset {
            features,
            labels,
            dim,
            num_classes,
            log_beta: beta.ln(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn log_beta(&self) -> f64 {
        self.log_beta
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub(crate) fn set_log_beta(&mut self, log_beta: f64) {
        self.log_beta = log_beta;
    }

    pub fn batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone(), self.dim)
            .expect("auxiliary rows are validated on update")
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::from_batch(self.batch(), self.num_classes).expect("labels validated at init")
    }

    pub fn is_finite(&self) -> bool {
        self.log_beta.is_finite() && self.features.iter().all(|v| v.is_finite())
    }
}

/// Builds `per_class` rows for every class, labels in class order.
///
/// Client mode samples real rows (with replacement) for classes present in
/// `local`; classes it lacks, and everything in server mode, start as
/// standard-normal noise. `beta` starts at [`INITIAL_BETA`].
pub fn init_auxiliary(
    local: Option<&Dataset>,
    num_classes: usize,
    per_class: usize,
    dim: usize,
    mode: AuxMode,
    seed: u64,
) -> Result<AuxiliaryDataset> {
    if per_class == 0 {
        return Err(FedError::InvalidArgument("per_class must be at least 1".into()));
    }
    let by_class = match (mode, local) {
        (AuxMode::Client, None) => {
            return Err(FedError::InvalidArgument(
                "client-mode auxiliary init needs local data".into(),
            ))
        }
        (AuxMode::Client, Some(d)) => {
            if d.dim() != dim {
                return Err(FedError::DimensionMismatch {
                    what: "local data vs auxiliary width",
                    expected: dim,
                    found: d.dim(),
                });
            }
            Some((d, d.class_indices()))
        }
        (AuxMode::Server, _) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let pool = by_class
            .as_ref()
            .and_then(|(d, idx)| idx.get(k).filter(|v| !v.is_empty()).map(|v| (d, v)));
        for _ in 0..per_class {
            match pool {
                Some((d, rows)) => {
                    let pick = rows[rng.random_range(0..rows.len())];
                    features.extend_from_slice(d.row(pick));
                }
                None => {
                    features.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
                }
            }
            labels.push(k);
        }
    }
    AuxiliaryDataset::new(features, labels, dim, num_classes, INITIAL_BETA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_conserves_and_breaks_ties_by_index() {
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(apportion(3, &[0.25, 0.25, 0.25, 0.25]), vec![1, 1, 1, 0]);
        assert_eq!(apportion(7, &[0.1, 0.6, 0.3]), vec![1, 4, 2]);
        let counts = apportion(1001, &[0.333, 0.333, 0.334]);
        assert_eq!(counts.iter().sum::<usize>(), 1001);
    }

    #[test]
    fn tiny_alpha_dirichlet_stays_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = sample_dirichlet(&mut rng, 10, 0.001);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_parses_rows() {
        let d = parse_csv_dataset("0,1.0,2.0\n1,3.0,4.0\n".as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_accepts_crlf() {
        let d = parse_csv_dataset("0,1.0,2.0\r\n2,3.0,4.0\r\n".as_bytes()).unwrap();
        assert_eq!(d.num_classes(), 3);
    }

    #[test]
    fn csv_width_mismatch_names_line() {
        let err = parse_csv_dataset("0,1.0,2.0\n2,1.0\n".as_bytes()).unwrap_err();
        match err {
            FedError::WidthMismatch { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 2, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err_line("0,1.0\nx,2.0\n") == Some(2));
        assert!(err_line("0,1.0\n1,abc\n") == Some(2));
    }

    fn err_line(src: &str) -> Option<u64> {
        match parse_csv_dataset(src.as_bytes()) {
            Err(FedError::MalformedRow { line, .. }) => Some(line),
            _ => None,
        }
    }

    #[test]
    fn csv_empty_file() {
        assert!(matches!(parse_csv_dataset("".as_bytes()), Err(FedError::EmptyDataset)));
    }

    #[test]
    fn partition_rejects_overlap() {
        assert!(ClientPartition::new(vec![vec![0, 1], vec![1]], 3).is_err());
        assert!(ClientPartition::new(vec![vec![0, 5]], 3).is_err());
        let p = ClientPartition::new(vec![vec![2, 0], vec![]], 3).unwrap();
        assert_eq!(p.client(0), &[0, 2]);
        assert_eq!(p.zero_sample_clients(), vec![1]);
    }

    #[test]
    fn partition_csv_round_trip() {
        let p = ClientPartition::new(vec![vec![0, 3], vec![1], vec![]], 4).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client_id,sample_index\n0,0\n0,3\n1,1\n"));
        let back = ClientPartition::read_csv(buf.as_slice(), 3, 4).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn server_aux_is_noise_with_class_ordered_labels() {
        let aux = init_auxiliary(None, 100, 2, 5, AuxMode::Server, 1).unwrap();
        assert_eq!(aux.len(), 200);
        assert_eq!(&aux.labels()[..6], &[0, 0, 1, 1, 2, 2]);
        assert!((aux.beta() - INITIAL_BETA).abs() < 1e-17);
    }

    #[test]
    fn client_aux_needs_local_data() {
        assert!(init_auxiliary(None, 3, 1, 2, AuxMode::Client, 0).is_err());
        let d = Dataset::new(vec![1.0, 2.0], vec![0], 2, 3).unwrap();
        assert!(init_auxiliary(Some(&d), 3, 0, 2, AuxMode::Client, 0).is_err());
    }

    #[test]
    fn single_class_single_row_is_copied() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0, 0, 1], 2, 2).unwrap();
        let aux = init_auxiliary(Some(&d), 2, 1, 2, AuxMode::Client, 9).unwrap();
        let first = &aux.features()[..2];
        assert!(first == [1.0, 2.0] || first == [3.0, 4.0]);
        assert_eq!(&aux.features()[2..], &[5.0, 6.0]);
    }
}
