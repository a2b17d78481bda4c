//! Experiment configuration: JSON file merged with command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::active::Strategy;
use crate::data::{generate, hospital_spec, load_csv, FederatedDataset, Scales};
use crate::error::{config_err, Result};
use crate::federation::{Mode, RunConfig, Schedule, SelectionMetric};
use crate::optim::AdamConfig;

/// Non-AL reference arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "FullDataFL")]
    FullDataFl,
    Centralized,
    Localized,
}

impl Baseline {
    pub fn mode(self) -> Mode {
        match self {
            Baseline::FullDataFl => Mode::FullDataFl,
            Baseline::Centralized => Mode::Centralized,
            Baseline::Localized => Mode::Localized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Per-client CSV files; when empty a synthetic dataset is generated.
    pub csv_paths: Vec<PathBuf>,
    pub num_classes: usize,
    /// Synthetic client/class counts are the reference counts divided by this.
    pub divisor: usize,
    pub feature_dim: usize,
    pub scales: Scales,
    /// Seeds generation and the train/val/test split; independent of run seeds.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            csv_paths: Vec::new(),
            num_classes: 3,
            divisor: 10,
            feature_dim: 64,
            scales: Scales::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub schedule: Schedule,
    /// Target labeled fraction for AL arms.
    pub gamma: f64,
    /// Optional grid of sample ratios; overrides `gamma` in `run` when set.
    pub gammas: Option<Vec<f64>>,
    pub init_label_fraction: f64,
    pub strategies: Vec<Strategy>,
    pub baselines: Vec<Baseline>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub selection_metric: SelectionMetric,
    /// Sample ratios swept by the ablation.
    pub ablation_ratios: Vec<f64>,
    pub parallel_clients: bool,
    pub parallel_arms: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            schedule: Schedule::default(),
            gamma: 0.5,
            gammas: None,
            init_label_fraction: 0.05,
            strategies: Strategy::ALL.to_vec(),
            baselines: vec![
                Baseline::FullDataFl,
                Baseline::Centralized,
                Baseline::Localized,
            ],
            seeds: (0..5).collect(),
            model: ModelConfig::default(),
            optimizer: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            batch_size: 16,
            selection_metric: SelectionMetric::MacroF1,
            ablation_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            parallel_clients: true,
            parallel_arms: true,
            out_dir: PathBuf::from("results"),
        }
    }
}

/// Command-line flags that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategies: Vec<Strategy>,
    pub gamma: Option<f64>,
    pub seeds: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

fn collect_unknown(doc: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(d), Value::Object(t)) = (doc, template) {
        for (k, v) in d {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match t.get(k) {
                Some(tv) => collect_unknown(v, tv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        if !doc.is_object() {
            return Err(config_err("config must be a JSON object"));
        }
        let template = serde_json::to_value(ExperimentConfig::default())?;
        let mut unknown = Vec::new();
        collect_unknown(&doc, &template, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(config_err(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        serde_json::from_value(doc).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.strategies.is_empty() {
            self.strategies = o.strategies.clone();
        }
        if let Some(g) = o.gamma {
            self.gamma = g;
            self.gammas = None;
        }
        if let Some(n) = o.seeds {
            self.seeds = (0..n as u64).collect();
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
    }

    /// Sample ratios used by `run`.
    pub fn gamma_grid(&self) -> Vec<f64> {
        self.gammas.clone().unwrap_or_else(|| vec![self.gamma])
    }

    pub fn run_config(&self, gamma: f64) -> RunConfig {
        RunConfig {
            schedule: self.schedule,
            gamma,
            init_label_fraction: self.init_label_fraction,
            hidden_dims: self.model.hidden_dims.clone(),
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            selection_metric: self.selection_metric,
            parallel_clients: self.parallel_clients,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds must contain at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_err("seeds must be distinct"));
        }
        if self.strategies.is_empty() {
            return Err(config_err("strategies must not be empty"));
        }
        let check_ratio = |name: &str, g: f64| {
            if g > 0.0 && g <= 1.0 {
                Ok(())
            } else {
                Err(config_err(format!("{name} must be in (0, 1], got {g}")))
            }
        };
        check_ratio("gamma", self.gamma)?;
        if let Some(gs) = &self.gammas {
            if gs.is_empty() {
                return Err(config_err("gammas must not be empty when given"));
            }
            gs.iter().try_for_each(|&g| check_ratio("gammas", g))?;
        }
        if self.ablation_ratios.is_empty() {
            return Err(config_err("ablation_ratios must not be empty"));
        }
        self.ablation_ratios
            .iter()
            .try_for_each(|&g| check_ratio("ablation_ratios", g))?;
        if !(0.0..=1.0).contains(&self.init_label_fraction) {
            return Err(config_err(format!(
                "init_label_fraction must be in [0, 1], got {}",
                self.init_label_fraction
            )));
        }
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err(config_err("dataset.num_classes must be at least 2"));
        }
        if d.csv_paths.is_empty() {
            if d.divisor == 0 {
                return Err(config_err("dataset.divisor must be at least 1"));
            }
            if d.num_classes != 3 {
                return Err(config_err(
                    "dataset.num_classes must be 3 for the synthetic dataset",
                ));
            }
            hospital_spec(d.feature_dim, d.scales, d.divisor).validate()?;
        }
        self.run_config(self.gamma)
            .validate(Mode::Active(Strategy::EnsembleEntropy))
    }

    pub fn load_dataset(&self) -> Result<FederatedDataset> {
        let d = &self.dataset;
        if d.csv_paths.is_empty() {
            generate(&hospital_spec(d.feature_dim, d.scales, d.divisor), d.seed)
        } else {
            let samples = d
                .csv_paths
                .iter()
                .map(|p| load_csv(p, d.num_classes))
                .collect::<Result<Vec<_>>>()?;
            FederatedDataset::from_samples(&samples, d.num_classes, d.seed)
        }
    }
}

/// Read, merge overrides, validate.
pub fn parse_config(path: impl AsRef<Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json_str(text)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
