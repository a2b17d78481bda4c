//! Per-client active learning: pool bookkeeping, query budgets, ensemble
//! entropy scoring, top-k selection and oracle annotation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, FedAlError, Result};
use crate::model::{forward_probs, Batch, ModelParams, PROB_FLOOR};
use crate::rng::Stream;

/// Sampling function used in the AL step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    LocalEntropy,
    GlobalEntropy,
    EnsembleEntropy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::LocalEntropy,
        Strategy::GlobalEntropy,
        Strategy::EnsembleEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "Random",
            Strategy::LocalEntropy => "LocalEntropy",
            Strategy::GlobalEntropy => "GlobalEntropy",
            Strategy::EnsembleEntropy => "EnsembleEntropy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = FedAlError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| config_err(format!("unknown strategy `{s}`")))
    }
}

/// Labeled / unlabeled partition of one client's training indices.
///
/// Labels live only in `labeled`: they are revealed by the oracle when an
/// index moves across.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    labeled: BTreeMap<usize, usize>,
    unlabeled: BTreeSet<usize>,
    initial_unlabeled_count: usize,
}

impl PoolState {
    /// Pool over `0..oracle.len()` with `initial` already annotated.
    pub fn new(oracle: &[usize], initial: &[usize]) -> Result<Self> {
        let mut labeled = BTreeMap::new();
        for &i in initial {
            if i >= oracle.len() {
                return Err(config_err(format!("initial index {i} out of range")));
            }
            labeled.insert(i, oracle[i]);
        }
        let unlabeled: BTreeSet<usize> = (0..oracle.len())
            .filter(|i| !labeled.contains_key(i))
            .collect();
        Ok(Self {
            initial_unlabeled_count: unlabeled.len(),
            labeled,
            unlabeled,
        })
    }

    /// Everything labeled from the start.
    pub fn fully_labeled(oracle: &[usize]) -> Self {
        Self {
            labeled: oracle.iter().copied().enumerate().collect(),
            unlabeled: BTreeSet::new(),
            initial_unlabeled_count: 0,
        }
    }

    /// Random initial pool of `max(floor(fraction * n), num_classes)` samples
    /// (capped at `n`), seeded with one instance of every class present.
    pub fn init_random(
        oracle: &[usize],
        fraction: f64,
        num_classes: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(config_err(format!(
                "init_label_fraction must be in [0, 1], got {fraction}"
            )));
        }
        let n = oracle.len();
        let target = ((fraction * n as f64 + 1e-9).floor() as usize)
            .max(num_classes)
            .min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);

        let mut chosen: Vec<usize> = Vec::with_capacity(target);
        let mut seen = vec![false; num_classes];
        for &i in &perm {
            let y = oracle[i];
            if y < num_classes && !seen[y] {
                seen[y] = true;
                chosen.push(i);
            }
        }
        chosen.truncate(target);
        let mut taken: BTreeSet<usize> = chosen.iter().copied().collect();
        for &i in &perm {
            if chosen.len() >= target {
                break;
            }
            if taken.insert(i) {
                chosen.push(i);
            }
        }
        Self::new(oracle, &chosen)
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn initial_unlabeled_count(&self) -> usize {
        self.initial_unlabeled_count
    }

    pub fn labeled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.labeled.keys().copied()
    }

    pub fn unlabeled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.unlabeled.iter().copied()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled.contains_key(&i)
    }

    /// Training batch over the labeled indices, labels from the annotations.
    pub fn labeled_batch(&self, train_features: &Array2<f64>) -> Result<Batch> {
        let idx: Vec<usize> = self.labeled.keys().copied().collect();
        Batch::new(
            train_features.select(Axis(0), &idx),
            self.labeled.values().copied().collect(),
        )
    }
}

/// Per-round annotation budget derived once from the initial unlabeled count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryBudget {
    pub per_round: usize,
    pub final_round: usize,
    pub gamma: f64,
    pub total_al_rounds: usize,
}

impl QueryBudget {
    /// Budget of the `k`-th AL execution (1-based).
    pub fn for_round(&self, k: usize) -> usize {
        match k {
            0 => 0,
            k if k < self.total_al_rounds => self.per_round,
            k if k == self.total_al_rounds => self.final_round,
            _ => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.per_round * (self.total_al_rounds - 1) + self.final_round
    }
}

/// `floor(U * gamma / rounds)` per round; the last round absorbs the
/// remainder so the cumulative total is exactly `floor(U * gamma)`.
pub fn compute_budget(
    initial_unlabeled: usize,
    gamma: f64,
    total_al_rounds: usize,
) -> Result<QueryBudget> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(config_err(format!("gamma must be in (0, 1], got {gamma}")));
    }
    if total_al_rounds == 0 {
        return Err(config_err("total AL rounds must be at least 1"));
    }
    // the epsilon absorbs products like 100 * 0.29 = 28.999...
    let total = (initial_unlabeled as f64 * gamma + 1e-9).floor() as usize;
    let total = total.min(initial_unlabeled);
    let per_round = total / total_al_rounds;
    Ok(QueryBudget {
        per_round,
        final_round: total - per_round * (total_al_rounds - 1),
        gamma,
        total_al_rounds,
    })
}

/// Natural-log Shannon entropy with `0 ln 0 = 0`.
pub fn shannon_entropy(prob: &[f64]) -> Result<f64> {
    if prob.iter().any(|&p| !(p >= 0.0)) {
        return Err(domain_err(format!(
            "negative or NaN probability in {prob:?}"
        )));
    }
    let sum: f64 = prob.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(domain_err(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(prob))
}

fn entropy_unchecked(prob: &[f64]) -> f64 {
    -prob
        .iter()
        .map(|&p| p * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Entropy of the ensemble-mean predictive distribution for every row.
pub fn ensemble_entropy_scores(
    models: &[&ModelParams],
    features: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| domain_err("ensemble needs at least one model"))?;
    if models.iter().any(|m| m.layer_dims() != first.layer_dims()) {
        return Err(FedAlError::Shape(
            "ensemble members have different layer dims".into(),
        ));
    }
    let mut mean = Array2::<f64>::zeros((features.nrows(), first.num_classes()));
    for m in models {
        mean += &forward_probs(m, features)?;
    }
    mean.mapv_inplace(|v| v / models.len() as f64);
    mean.rows()
        .into_iter()
        .map(|row| shannon_entropy(row.as_slice().expect("standard layout")))
        .collect()
}

/// The `k` highest-scoring indices; equal scores go to the lower index.
pub fn select_top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut ranked: Vec<&(usize, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|&(i, _)| i).collect()
}

/// Pick up to `budget` unlabeled indices according to `strategy`.
///
/// `train_features` holds every training row of the client; only the
/// unlabeled rows are scored.
pub fn query(
    strategy: Strategy,
    pool: &PoolState,
    local: Option<&ModelParams>,
    global: Option<&ModelParams>,
    budget: usize,
    train_features: &Array2<f64>,
    rng: &mut Stream,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = pool.unlabeled_indices().collect();
    let k = budget.min(candidates.len());

    let missing = |what: &str| FedAlError::Protocol(format!("{strategy} needs a {what} model"));
    let ensemble: Vec<&ModelParams> = match strategy {
        Strategy::Random => {
            return Ok(rand::seq::index::sample(rng, candidates.len(), k)
                .into_iter()
                .map(|j| candidates[j])
                .collect());
        }
        Strategy::LocalEntropy => vec![local.ok_or_else(|| missing("local"))?],
        Strategy::GlobalEntropy => vec![global.ok_or_else(|| missing("global"))?],
        Strategy::EnsembleEntropy => vec![
            local.ok_or_else(|| missing("local"))?,
            global.ok_or_else(|| missing("global"))?,
        ],
    };
    if k == 0 {
        return Ok(Vec::new());
    }
    let rows = train_features.select(Axis(0), &candidates);
    let scores = ensemble_entropy_scores(&ensemble, rows.view())?;
    let keyed: Vec<(usize, f64)> = candidates.into_iter().zip(scores).collect();
    Ok(select_top_k(&keyed, k))
}

/// Move `selected` from unlabeled to labeled, revealing their oracle labels.
pub fn annotate_and_move(pool: &mut PoolState, selected: &[usize], oracle: &[usize]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &i in selected {
        if pool.labeled.contains_key(&i) || !seen.insert(i) {
            return Err(FedAlError::Protocol(format!(
                "index {i} is already labeled"
            )));
        }
        if !pool.unlabeled.contains(&i) {
            return Err(FedAlError::Protocol(format!(
                "index {i} is not in the unlabeled pool"
            )));
        }
    }
    for &i in selected {
        pool.unlabeled.remove(&i);
        pool.labeled.insert(i, oracle[i]);
    }
    Ok(())
}
