//! Synthetic non-IID federated datasets and CSV ingestion.
//!
//! Each client draws class-`c` samples from an isotropic Gaussian around a
//! fixed class center, shifted by a per-client offset. Label skew comes from
//! the per-client class counts, site shift from the offset.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, FedAlError, Result};
use crate::model::Batch;
use crate::rng::{self, tag};

/// Per-client class counts of the four-hospital skin-lesion federation
/// (nevus, benign keratosis, melanoma).
pub const HOSPITAL_COUNTS: [[usize; 3]; 4] = [
    [803, 490, 342],
    [1832, 475, 680],
    [3720, 124, 24],
    [1372, 254, 374],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scales {
    pub class_mean_scale: f64,
    pub client_shift_scale: f64,
    pub noise_std: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Self {
            class_mean_scale: 2.0,
            client_shift_scale: 0.75,
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `clients x classes` sample counts.
    pub client_class_counts: Vec<Vec<usize>>,
    pub class_mean_scale: f64,
    pub client_shift_scale: f64,
    pub noise_std: f64,
}

impl DatasetSpec {
    pub fn num_clients(&self) -> usize {
        self.client_class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(config_err(
                "dataset: num_classes and feature_dim must be positive",
            ));
        }
        if self.feature_dim < self.num_classes {
            return Err(config_err(format!(
                "dataset.feature_dim ({}) must be at least num_classes ({}) to place class centers",
                self.feature_dim, self.num_classes
            )));
        }
        if self.client_class_counts.is_empty() {
            return Err(config_err("dataset: at least one client required"));
        }
        for (m, row) in self.client_class_counts.iter().enumerate() {
            if row.len() != self.num_classes {
                return Err(config_err(format!(
                    "dataset: client {m} has {} class counts, expected {}",
                    row.len(),
                    self.num_classes
                )));
            }
            if row.iter().all(|&n| n == 0) {
                return Err(config_err(format!("dataset: client {m} has no samples")));
            }
        }
        if !(self.class_mean_scale > 0.0) {
            return Err(config_err("dataset.class_mean_scale must be positive"));
        }
        if !(self.client_shift_scale >= 0.0) {
            return Err(config_err("dataset.client_shift_scale must be nonnegative"));
        }
        if !(self.noise_std > 0.0) {
            return Err(config_err("dataset.noise_std must be positive"));
        }
        Ok(())
    }
}

/// The four-client, three-class skin-lesion layout, each count divided by
/// `divisor` (integer division, clamped to at least 1).
pub fn hospital_spec(feature_dim: usize, scales: Scales, divisor: usize) -> DatasetSpec {
    let divisor = divisor.max(1);
    DatasetSpec {
        num_classes: 3,
        feature_dim,
        client_class_counts: HOSPITAL_COUNTS
            .iter()
            .map(|row| row.iter().map(|&n| (n / divisor).max(1)).collect())
            .collect(),
        class_mean_scale: scales.class_mean_scale,
        client_shift_scale: scales.client_shift_scale,
        noise_std: scales.noise_std,
    }
}

/// Unsplit samples of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSamples {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl ClientSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn take(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// One client's train/val/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train_features: Array2<f64>,
    pub train_labels: Vec<usize>,
    pub val_features: Array2<f64>,
    pub val_labels: Vec<usize>,
    pub test_features: Array2<f64>,
    pub test_labels: Vec<usize>,
}

impl ClientData {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn train_batch(&self) -> Result<Batch> {
        Batch::new(self.train_features.clone(), self.train_labels.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Split pre-loaded client samples with per-client derived seeds.
    pub fn from_samples(samples: &[ClientSamples], num_classes: usize, seed: u64) -> Result<Self> {
        let feature_dim = samples
            .first()
            .ok_or_else(|| config_err("dataset: at least one client required"))?
            .features
            .ncols();
        let mut clients = Vec::with_capacity(samples.len());
        for (m, s) in samples.iter().enumerate() {
            if s.features.ncols() != feature_dim {
                return Err(config_err(format!(
                    "dataset: client {m} has {} features, client 0 has {feature_dim}",
                    s.features.ncols()
                )));
            }
            if let Some(&bad) = s.labels.iter().find(|&&y| y >= num_classes) {
                return Err(config_err(format!(
                    "dataset: client {m} has label {bad} >= num_classes {num_classes}"
                )));
            }
            let split_seed = rng::derive_seed(seed, &[tag::SPLIT, m as u64]);
            clients.push(split(s, DEFAULT_RATIOS, split_seed)?);
        }
        Ok(Self {
            clients,
            num_classes,
            feature_dim,
        })
    }
}

/// Class center `c`: `class_mean_scale` along coordinate axis `c`.
pub fn class_center(spec: &DatasetSpec, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; spec.feature_dim];
    v[class] = spec.class_mean_scale;
    v
}

/// Per-client covariate shift: a random direction of length `client_shift_scale`.
pub fn client_offset(spec: &DatasetSpec, seed: u64, client: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[tag::DATA, client as u64, 1]);
    let dir: Vec<f64> = (0..spec.feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || spec.client_shift_scale == 0.0 {
        return vec![0.0; spec.feature_dim];
    }
    dir.iter()
        .map(|v| v / norm * spec.client_shift_scale)
        .collect()
}

/// Draw every client's samples, grouped by class, without splitting.
pub fn generate_samples(spec: &DatasetSpec, seed: u64) -> Result<Vec<ClientSamples>> {
    spec.validate()?;
    let d = spec.feature_dim;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| class_center(spec, c))
        .collect();
    (0..spec.num_clients())
        .map(|m| {
            let offset = client_offset(spec, seed, m);
            let mut rng = rng::stream(seed, &[tag::DATA, m as u64, 0]);
            let counts = &spec.client_class_counts[m];
            let n: usize = counts.iter().sum();
            let mut feats = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(n);
            for (c, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        feats.push(centers[c][j] + offset[j] + spec.noise_std * z);
                    }
                    labels.push(c);
                }
            }
            Ok(ClientSamples {
                features: Array2::from_shape_vec((n, d), feats).expect("row-major fill"),
                labels,
            })
        })
        .collect()
}

/// Generate and split a full federation.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<FederatedDataset> {
    let samples = generate_samples(spec, seed)?;
    FederatedDataset::from_samples(&samples, spec.num_classes, seed)
}

pub const DEFAULT_RATIOS: (usize, usize, usize) = (7, 1, 2);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` cut into train/val/test. Validation and test
/// sizes are floored, train takes the remainder.
pub fn split_indices(n: usize, ratios: (usize, usize, usize), seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(config_err(format!(
            "split needs at least 10 samples, got {n}"
        )));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 {
        return Err(config_err("split ratios must not all be zero"));
    }
    let n_val = n * ratios.1 / total;
    let n_test = n * ratios.2 / total;
    let n_train = n - n_val - n_test;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    Ok(SplitIndices {
        train: perm[..n_train].to_vec(),
        val: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    })
}

pub fn split(
    samples: &ClientSamples,
    ratios: (usize, usize, usize),
    seed: u64,
) -> Result<ClientData> {
    let idx = split_indices(samples.len(), ratios, seed)?;
    let (train_features, train_labels) = samples.take(&idx.train);
    let (val_features, val_labels) = samples.take(&idx.val);
    let (test_features, test_labels) = samples.take(&idx.test);
    Ok(ClientData {
        train_features,
        train_labels,
        val_features,
        val_labels,
        test_features,
        test_labels,
    })
}

/// Read `label,f0,f1,...` rows. Line numbers in errors are 1-based file lines.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<ClientSamples> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path.as_ref())?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r?,
        None => {
            return Err(FedAlError::Schema {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let width = header.len();
    let header_ok = width >= 2
        && &header[0] == "label"
        && (1..width).all(|j| header[j] == format!("f{}", j - 1));
    if !header_ok {
        return Err(FedAlError::Schema {
            line: 1,
            message: format!(
                "header must be `label,f0,...`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let d = width - 1;

    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(FedAlError::Schema {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| FedAlError::Parse {
            line,
            message: format!("invalid label `{}`", &rec[0]),
        })?;
        if label >= num_classes {
            return Err(FedAlError::Schema {
                line,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        for j in 1..width {
            let v: f64 = rec[j].trim().parse().map_err(|_| FedAlError::Parse {
                line,
                message: format!("invalid number `{}` in column f{}", &rec[j], j - 1),
            })?;
            feats.push(v);
        }
        labels.push(label);
    }
    let n = labels.len();
    Ok(ClientSamples {
        features: Array2::from_shape_vec((n, d), feats).expect("width checked per row"),
        labels,
    })
}

pub fn write_csv(path: impl AsRef<Path>, samples: &ClientSamples) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let d = samples.features.ncols();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (row, &y) in samples.features.rows().into_iter().zip(&samples.labels) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
