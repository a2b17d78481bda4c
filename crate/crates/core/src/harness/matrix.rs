//! Experiment matrix: arms x seeds, result files and the summary.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::Strategy;
use crate::data::FederatedDataset;
use crate::error::Result;
use crate::federation::{run_experiment, Mode, RunHistory};
use crate::harness::config::ExperimentConfig;
use crate::metrics::EvalRecord;
use crate::stats::{mean, paired_t_test, sample_std};

pub const CURVES_HEADER: [&str; 10] = [
    "arm",
    "strategy",
    "gamma",
    "seed",
    "round",
    "sample_ratio",
    "client",
    "micro_f1",
    "macro_f1",
    "auc",
];

/// Arm every other arm is tested against.
pub const PRIMARY: Strategy = Strategy::EnsembleEntropy;

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub mode: Mode,
    /// Sample ratio; 1 for the fully labeled baselines.
    pub gamma: f64,
}

impl ArmSpec {
    pub fn active(strategy: Strategy, gamma: f64) -> Self {
        Self {
            name: format!("{strategy}@{gamma}"),
            mode: Mode::Active(strategy),
            gamma,
        }
    }

    pub fn baseline(mode: Mode) -> Self {
        Self {
            name: mode.name().to_string(),
            mode,
            gamma: 1.0,
        }
    }
}

/// One arm's runs, in seed order, or the first error it hit.
#[derive(Debug)]
pub struct ArmResult {
    pub spec: ArmSpec,
    pub runs: std::result::Result<Vec<RunHistory>, (u64, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            std: sample_std(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub micro_f1: MeanStd,
    pub macro_f1: MeanStd,
    /// Over the runs where AUC is defined.
    pub auc: Option<MeanStd>,
}

impl MetricSummary {
    fn of<'a>(records: impl Iterator<Item = &'a EvalRecord> + Clone) -> Self {
        let col = |f: fn(&EvalRecord) -> f64| records.clone().map(f).collect::<Vec<_>>();
        Self {
            micro_f1: MeanStd::of(&col(|r| r.micro_f1)),
            macro_f1: MeanStd::of(&col(|r| r.macro_f1)),
            auc: {
                let defined: Vec<f64> = records.clone().filter_map(|r| r.auc).collect();
                (!defined.is_empty()).then(|| MeanStd::of(&defined))
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Round of the reported model, per client.
    pub best_rounds: Vec<usize>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValues {
    pub reference: String,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub strategy: String,
    pub gamma: f64,
    pub runs: usize,
    /// Cross-client macro average of the final test report.
    #[serde(flatten)]
    pub metrics: MetricSummary,
    pub per_client: Vec<ClientSummary>,
    pub per_seed: Vec<SeedResult>,
    /// Paired t-test over seeds against the primary arm; absent for the primary arm itself.
    pub p_values: Option<PValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub arm: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    /// Population the reported std is taken over.
    pub std_over: String,
    pub primary: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub failures: Vec<Failure>,
}

impl Summary {
    pub fn empty(mode: &str) -> Self {
        Self {
            mode: mode.to_string(),
            std_over: "seeds".to_string(),
            primary: PRIMARY.name().to_string(),
            seeds: Vec::new(),
            arms: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub summary: Summary,
    pub results: Vec<ArmResult>,
    pub out_dir: PathBuf,
}

impl MatrixOutcome {
    pub fn failed(&self) -> bool {
        !self.summary.failures.is_empty()
    }
}

/// Arms of a `run`: every strategy at every sample ratio, then the baselines.
pub fn run_arms(cfg: &ExperimentConfig) -> Vec<ArmSpec> {
    let mut arms: Vec<ArmSpec> = cfg
        .gamma_grid()
        .into_iter()
        .flat_map(|g| cfg.strategies.iter().map(move |&s| ArmSpec::active(s, g)))
        .collect();
    arms.extend(cfg.baselines.iter().map(|b| ArmSpec::baseline(b.mode())));
    arms
}

pub fn ablation_arms(cfg: &ExperimentConfig) -> Vec<ArmSpec> {
    cfg.ablation_ratios
        .iter()
        .flat_map(|&g| {
            [
                Strategy::LocalEntropy,
                Strategy::GlobalEntropy,
                Strategy::EnsembleEntropy,
            ]
            .into_iter()
            .map(move |s| ArmSpec::active(s, g))
        })
        .collect()
}

/// Run every (arm, seed) pair; results come back in arm then seed order
/// whatever the scheduling.
pub fn execute(
    cfg: &ExperimentConfig,
    data: &FederatedDataset,
    arms: &[ArmSpec],
) -> Vec<ArmResult> {
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let run = |&(a, seed): &(usize, u64)| {
        let spec = &arms[a];
        run_experiment(data, &cfg.run_config(spec.gamma), spec.mode, seed)
            .map_err(|e| (seed, e.to_string()))
    };
    let mut outputs: Vec<_> = if cfg.parallel_arms {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let per_arm = cfg.seeds.len();
    arms.iter()
        .rev()
        .map(|spec| {
            let runs = outputs.split_off(outputs.len() - per_arm);
            ArmResult {
                spec: spec.clone(),
                runs: runs.into_iter().collect(),
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect()
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// `curves.csv`: test metrics of the evaluated model(s) on every client plus
/// the cross-client macro average, per arm, seed and round.
pub fn write_curves(path: &Path, results: &[ArmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVES_HEADER)?;
    for res in results {
        let Ok(runs) = &res.runs else { continue };
        for run in runs {
            for r in &run.rounds {
                let rows = r
                    .test
                    .iter()
                    .map(|e| (e.client.map_or("macro".to_string(), |c| c.to_string()), e))
                    .chain(std::iter::once(("macro".to_string(), &r.test_macro)));
                for (client, e) in rows {
                    w.write_record([
                        res.spec.name.clone(),
                        res.spec.mode.name().to_string(),
                        fmt_f64(res.spec.gamma),
                        run.seed.to_string(),
                        r.round.to_string(),
                        fmt_f64(r.sample_ratio),
                        client,
                        fmt_f64(e.micro_f1),
                        fmt_f64(e.macro_f1),
                        e.auc.map(fmt_f64).unwrap_or_default(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn p_value(a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> Option<f64> {
    paired_t_test(&a?, &b?).ok().map(|t| t.p_value)
}

/// Per-seed values, or `None` if any seed lacks one.
fn seed_col(s: &ArmSummary, f: fn(&SeedResult) -> Option<f64>) -> Option<Vec<f64>> {
    s.per_seed.iter().map(f).collect()
}

/// Aggregate finished runs; the reference for each arm is the primary
/// strategy at the same sample ratio (the configured `gamma` for baselines).
pub fn build_summary(mode: &str, cfg: &ExperimentConfig, results: &[ArmResult]) -> Summary {
    let mut summary = Summary::empty(mode);
    summary.seeds = cfg.seeds.clone();
    let mut refs: Vec<f64> = Vec::new();
    for res in results {
        let runs = match &res.runs {
            Ok(r) => r,
            Err((seed, error)) => {
                summary.failures.push(Failure {
                    arm: res.spec.name.clone(),
                    seed: *seed,
                    error: error.clone(),
                });
                continue;
            }
        };
        let finals: Vec<&EvalRecord> = runs.iter().map(|r| &r.final_report.macro_avg).collect();
        let num_clients = runs[0].final_report.per_client.len();
        summary.arms.push(ArmSummary {
            arm: res.spec.name.clone(),
            strategy: res.spec.mode.name().to_string(),
            gamma: res.spec.gamma,
            runs: runs.len(),
            metrics: MetricSummary::of(finals.iter().copied()),
            per_client: (0..num_clients)
                .map(|m| ClientSummary {
                    client: m,
                    metrics: MetricSummary::of(runs.iter().map(|r| &r.final_report.per_client[m])),
                })
                .collect(),
            per_seed: runs
                .iter()
                .map(|r| SeedResult {
                    seed: r.seed,
                    best_rounds: r.final_report.best_rounds.clone(),
                    micro_f1: r.final_report.macro_avg.micro_f1,
                    macro_f1: r.final_report.macro_avg.macro_f1,
                    auc: r.final_report.macro_avg.auc,
                })
                .collect(),
            p_values: None,
        });
        refs.push(match res.spec.mode {
            Mode::Active(_) => res.spec.gamma,
            _ => cfg.gamma,
        });
    }

    let tested: Vec<Option<PValues>> = summary
        .arms
        .iter()
        .zip(&refs)
        .map(|(arm, &g)| {
            let reference = ArmSpec::active(PRIMARY, g).name;
            if arm.arm == reference {
                return None;
            }
            let r = summary.arm(&reference)?;
            Some(PValues {
                micro_f1: p_value(
                    seed_col(arm, |s| Some(s.micro_f1)),
                    seed_col(r, |s| Some(s.micro_f1)),
                ),
                macro_f1: p_value(
                    seed_col(arm, |s| Some(s.macro_f1)),
                    seed_col(r, |s| Some(s.macro_f1)),
                ),
                auc: p_value(seed_col(arm, |s| s.auc), seed_col(r, |s| s.auc)),
                reference,
            })
        })
        .collect();
    for (arm, p) in summary.arms.iter_mut().zip(tested) {
        arm.p_values = p;
    }
    summary
}

fn run_into(
    cfg: &ExperimentConfig,
    mode: &str,
    arms: &[ArmSpec],
    out_dir: PathBuf,
) -> Result<MatrixOutcome> {
    let data = cfg.load_dataset()?;
    let results = execute(cfg, &data, arms);
    fs::create_dir_all(&out_dir)?;
    write_curves(&out_dir.join("curves.csv"), &results)?;
    let summary = build_summary(mode, cfg, &results);
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(MatrixOutcome {
        summary,
        results,
        out_dir,
    })
}

/// All strategies over the sample-ratio grid plus the baselines, into `out_dir`.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<MatrixOutcome> {
    run_into(cfg, "run", &run_arms(cfg), cfg.out_dir.clone())
}

/// Local, global and ensemble entropy over the ablation ratios, into `out_dir/ablation`.
pub fn ablation_mode(cfg: &ExperimentConfig) -> Result<MatrixOutcome> {
    run_into(
        cfg,
        "ablation",
        &ablation_arms(cfg),
        cfg.out_dir.join("ablation"),
    )
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Summary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
