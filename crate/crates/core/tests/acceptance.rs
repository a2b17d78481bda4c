//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;

use fedal::active::{compute_budget, ensemble_entropy_scores, shannon_entropy, Strategy};
use fedal::federation::{fedavg_aggregate, run_experiment, Mode, Schedule};
use fedal::harness::matrix::Summary;
use fedal::harness::{ablation_mode, run_matrix, Baseline, ExperimentConfig};
use fedal::metrics::{auc_ovr_macro, confusion_matrix};
use fedal::model::{backprop_grad, cross_entropy_loss, forward_probs, Batch, ModelParams};
use fedal::rng::stream;
use fedal::stats::paired_t_test;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_params(dims: &[usize], rng: &mut impl Rng) -> ModelParams {
    let n = fedal::model::param_count(dims);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelParams::from_parts(dims.to_vec(), w).unwrap()
}

fn relu_margin(params: &ModelParams, x: &Array2<f64>) -> f64 {
    // smallest |pre-activation| over hidden units of a single-hidden-layer net
    let dims = params.layer_dims();
    let (d, h) = (dims[0], dims[1]);
    let w = params.weights();
    let mut m = f64::INFINITY;
    for row in x.rows() {
        for j in 0..h {
            let z: f64 = (0..d).map(|i| row[i] * w[i * h + j]).sum::<f64>() + w[d * h + j];
            m = m.min(z.abs());
        }
    }
    m
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(101, &[]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let dims = [
            rng.random_range(2..7),
            rng.random_range(2..9),
            rng.random_range(2..5),
        ];
        let params = random_params(&dims, &mut rng);
        let rows = rng.random_range(1..9);
        let x = Array2::from_shape_fn((rows, dims[0]), |_| rng.random_range(-2.0..2.0));
        // finite differences are not an oracle across a ReLU kink
        if relu_margin(&params, &x) < 1e-3 {
            continue;
        }
        let y = (0..rows).map(|_| rng.random_range(0..dims[2])).collect();
        let batch = Batch::new(x, y).unwrap();
        let analytic = backprop_grad(&params, &batch).unwrap();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.weights_mut()[i] += h;
            let mut minus = params.clone();
            minus.weights_mut()[i] -= h;
            let numeric = (cross_entropy_loss(&plus, &batch).unwrap()
                - cross_entropy_loss(&minus, &batch).unwrap())
                / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        cases += 1;
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-4, || {
        format!("max relative error {worst:.3e} >= 1e-4")
    })?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("100 cases, max rel err {worst:.2e}, {elapsed:.2?}"))
}

/// Softmax-only model whose output is `softmax(bias)` for every input.
fn constant_model(bias: &[f64]) -> ModelParams {
    let c = bias.len();
    let mut w = vec![0.0; c];
    w.extend_from_slice(bias);
    ModelParams::from_parts(vec![1, c], w).unwrap()
}

fn entropy_oracle(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

fn ensemble_entropy() -> Outcome {
    let x = Array2::zeros((1, 1));
    let score = |models: &[&ModelParams]| ensemble_entropy_scores(models, x.view()).unwrap()[0];

    let hot = constant_model(&[60.0, 0.0, 0.0]);
    let h_hot = score(&[&hot, &hot]);
    ensure(h_hot.abs() < 1e-9, || format!("one-hot entropy {h_hot}"))?;

    let uni = constant_model(&[0.0, 0.0, 0.0]);
    let h_uni = score(&[&uni, &uni]);
    ensure((h_uni - 3f64.ln()).abs() < 1e-9, || {
        format!("uniform entropy {h_uni}")
    })?;

    let other = constant_model(&[0.0, 60.0, 0.0]);
    let h_dis = score(&[&hot, &other]);
    ensure((h_dis - 2f64.ln()).abs() < 1e-9, || {
        format!("disagreeing one-hots {h_dis}")
    })?;

    let mut rng = stream(303, &[]);
    for _ in 0..1000 {
        let c = rng.random_range(2..6);
        let draw = |rng: &mut fedal::rng::Stream| {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0) + 1e-12).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let h_mix = shannon_entropy(&mix).unwrap();
        let bound = (entropy_oracle(&p) + entropy_oracle(&q)) / 2.0;
        ensure(h_mix >= bound - 1e-12, || {
            format!("Jensen violated: {h_mix} < {bound}")
        })?;
        ensure((h_mix - entropy_oracle(&mix)).abs() < 1e-12, || {
            "entropy disagrees with oracle".into()
        })?;
    }

    // random networks: scores equal the entropy of the averaged forward passes
    let dims = [3, 5, 3];
    let (a, b) = (
        random_params(&dims, &mut rng),
        random_params(&dims, &mut rng),
    );
    let feats = Array2::from_shape_fn((20, 3), |_| rng.random_range(-3.0..3.0));
    let scores = ensemble_entropy_scores(&[&a, &b], feats.view()).unwrap();
    let (pa, pb) = (
        forward_probs(&a, feats.view()).unwrap(),
        forward_probs(&b, feats.view()).unwrap(),
    );
    for (r, s) in scores.iter().enumerate() {
        let mix: Vec<f64> = (0..3).map(|k| (pa[[r, k]] + pb[[r, k]]) / 2.0).collect();
        ensure((s - entropy_oracle(&mix)).abs() < 1e-12, || {
            format!("row {r} score mismatch")
        })?;
    }
    Ok(format!(
        "one-hot {h_hot:.1e}, uniform {h_uni:.12}, disagree {h_dis:.12}, 1000 Jensen pairs"
    ))
}

fn weighted_aggregation() -> Outcome {
    let a = ModelParams::from_parts(vec![1, 1], vec![0.0, 0.0]).unwrap();
    let b = ModelParams::from_parts(vec![1, 1], vec![4.0, 4.0]).unwrap();
    let psi = fedavg_aggregate(&[&a, &b], &[1.0, 3.0]).unwrap();
    ensure(psi.weights() == [3.0, 3.0], || {
        format!("weighted mean gave {:?}", psi.weights())
    })?;

    let mut rng = stream(404, &[]);
    let same = random_params(&[4, 6, 3], &mut rng);
    let fixed = fedavg_aggregate(&[&same, &same, &same], &[5.0, 17.0, 2.0]).unwrap();
    ensure(fixed == same, || {
        "identical clients not a fixed point".into()
    })?;

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..7);
        let models: Vec<ModelParams> = (0..m)
            .map(|_| random_params(&[3, 4, 2], &mut rng))
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(1..500) as f64).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let psi = fedavg_aggregate(&refs, &weights).unwrap();
        let total: f64 = weights.iter().sum();
        for i in 0..psi.len() {
            let col: Vec<f64> = models.iter().map(|p| p.weights()[i]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = psi.weights()[i];
            ensure(lo <= v && v <= hi, || {
                format!("coordinate {i} = {v} outside [{lo}, {hi}]")
            })?;
            let oracle: f64 = col.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / total;
            worst = worst.max((v - oracle).abs());
        }
    }
    ensure(worst < 1e-12, || {
        format!("deviation from weighted mean {worst:e}")
    })?;
    Ok(format!(
        "example exact, fixed point exact, 100 convex instances (max dev {worst:.1e})"
    ))
}

fn preset_active_run(strategy: Strategy) -> (ExperimentConfig, fedal::federation::RunHistory) {
    let cfg = ExperimentConfig::default();
    let data = cfg.load_dataset().unwrap();
    let run = run_experiment(&data, &cfg.run_config(cfg.gamma), Mode::Active(strategy), 0).unwrap();
    (cfg, run)
}

fn budget_accounting() -> Outcome {
    let b = compute_budget(1000, 0.5, 10).unwrap();
    let cumulative: usize = (1..=10).map(|k| b.for_round(k)).sum();
    ensure(cumulative == 500, || {
        format!("cumulative budget {cumulative}")
    })?;

    let (cfg, run) = preset_active_run(Strategy::EnsembleEntropy);
    let last = run.rounds.last().unwrap();
    for m in 0..run.train_sizes.len() {
        let init = run.initial_labeled[m];
        let unlabeled = run.train_sizes[m] - init;
        // gamma = 1/2 of an integer pool
        assert_eq!(cfg.gamma, 0.5);
        let expected = init + unlabeled / 2;
        ensure(last.labeled_counts[m] == expected, || {
            format!(
                "client {m}: {} labeled, expected {expected}",
                last.labeled_counts[m]
            )
        })?;
        let annotated: usize = run
            .annotations
            .iter()
            .filter(|e| e.client == m)
            .map(|e| e.count)
            .sum();
        ensure(annotated == unlabeled / 2, || {
            format!("client {m}: {annotated} annotations")
        })?;
    }
    Ok(format!(
        "U=1000 -> {cumulative}; final pools {:?}",
        last.labeled_counts
    ))
}

fn al_schedule() -> Outcome {
    let (cfg, run) = preset_active_run(Strategy::EnsembleEntropy);
    ensure(cfg.schedule == Schedule::default(), || {
        "preset schedule changed".into()
    })?;
    let s = cfg.schedule;
    ensure(
        (s.total_rounds, s.al_interval, s.al_last_round) == (25, 2, 20),
        || format!("unexpected schedule {s:?}"),
    )?;
    let expected: BTreeSet<usize> = (1..=10).map(|k| 2 * k).collect();
    let executed: BTreeSet<usize> = run
        .rounds
        .iter()
        .filter(|r| r.al_executed)
        .map(|r| r.round)
        .collect();
    ensure(executed == expected, || format!("AL ran at {executed:?}"))?;
    for m in 0..run.train_sizes.len() {
        let rounds: Vec<usize> = run
            .annotations
            .iter()
            .filter(|e| e.client == m)
            .map(|e| e.round)
            .collect();
        ensure(
            rounds.len() == 10 && rounds.iter().copied().collect::<BTreeSet<_>>() == expected,
            || format!("client {m} annotated at {rounds:?}"),
        )?;
    }
    let frozen = &run.rounds[19].labeled_counts;
    for r in &run.rounds[20..25] {
        ensure(&r.labeled_counts == frozen, || {
            format!("pool changed in round {}", r.round)
        })?;
    }
    Ok(format!(
        "AL at {:?}, pools frozen in rounds 21-25",
        executed
    ))
}

fn small_config(dir: &std::path::Path, parallel: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.divisor = 20;
    cfg.dataset.feature_dim = 8;
    cfg.seeds = vec![0, 1];
    cfg.strategies = vec![Strategy::EnsembleEntropy, Strategy::Random];
    cfg.schedule = Schedule {
        total_rounds: 6,
        local_epochs: 2,
        al_interval: 2,
        al_last_round: 4,
    };
    cfg.parallel_clients = parallel;
    cfg.parallel_arms = parallel;
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn read_outputs(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    (
        std::fs::read(dir.join("curves.csv")).unwrap(),
        std::fs::read(dir.join("summary.json")).unwrap(),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = ["a", "b", "serial"].map(|d| tmp.path().join(d));
    run_matrix(&small_config(&dirs[0], true)).unwrap();
    run_matrix(&small_config(&dirs[1], true)).unwrap();
    run_matrix(&small_config(&dirs[2], false)).unwrap();
    let (a, b, s) = (
        read_outputs(&dirs[0]),
        read_outputs(&dirs[1]),
        read_outputs(&dirs[2]),
    );
    ensure(a == b, || "replay differs".into())?;
    ensure(a == s, || "serial and parallel execution differ".into())?;
    Ok(format!(
        "replay and serial/parallel byte-identical ({} + {} bytes)",
        a.0.len(),
        a.1.len()
    ))
}

fn macro_mean(s: &Summary, arm: &str) -> Result<f64, String> {
    s.arm(arm).map(|a| a.metrics.macro_f1.mean).ok_or_else(|| {
        format!(
            "arm {arm} missing from summary (failures: {:?})",
            s.failures
        )
    })
}

fn preset_matrix() -> Result<(Summary, Duration), String> {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.path().to_path_buf();
    cfg.strategies = vec![Strategy::EnsembleEntropy, Strategy::Random];
    cfg.baselines = vec![
        Baseline::FullDataFl,
        Baseline::Centralized,
        Baseline::Localized,
    ];
    let start = Instant::now();
    let out = run_matrix(&cfg).map_err(|e| e.to_string())?;
    Ok((out.summary, start.elapsed()))
}

fn active_vs_random(s: &Summary, elapsed: Duration) -> Outcome {
    let ens = macro_mean(s, "EnsembleEntropy@0.5")?;
    let rnd = macro_mean(s, "Random@0.5")?;
    let full = macro_mean(s, "FullDataFL")?;
    let detail = format!(
        "macro-F1 ensemble {:.2} / random {:.2} / full-data FL {:.2} ({elapsed:.1?})",
        100.0 * ens,
        100.0 * rnd,
        100.0 * full
    );
    ensure(ens >= rnd, || format!("ensemble below random: {detail}"))?;
    ensure((ens - full).abs() <= 0.03, || {
        format!("more than 3 points from full data: {detail}")
    })?;
    ensure(elapsed < Duration::from_secs(600), || {
        format!("too slow: {detail}")
    })?;
    Ok(detail)
}

fn centralized_vs_localized(s: &Summary) -> Outcome {
    let c = macro_mean(s, "Centralized")?;
    let l = macro_mean(s, "Localized")?;
    let detail = format!(
        "macro-F1 centralized {:.2} / localized {:.2}",
        100.0 * c,
        100.0 * l
    );
    ensure(c >= l, || detail.clone())?;
    Ok(detail)
}

fn ablation() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.path().to_path_buf();
    let out = ablation_mode(&cfg).map_err(|e| e.to_string())?;
    let s = &out.summary;
    ensure(s.arms.len() == 15, || {
        format!("{} ablation arms", s.arms.len())
    })?;
    let ens = macro_mean(s, "EnsembleEntropy@0.5")?;
    let local = macro_mean(s, "LocalEntropy@0.5")?;
    let global = macro_mean(s, "GlobalEntropy@0.5")?;
    let detail = format!(
        "ratio 0.5 macro-F1 ensemble {:.2} / local {:.2} / global {:.2}",
        100.0 * ens,
        100.0 * local,
        100.0 * global
    );
    ensure(ens >= local.min(global), || detail.clone())?;
    Ok(detail)
}

fn metric_oracles() -> Outcome {
    let mut rng = stream(1010, &[]);
    for _ in 0..1000 {
        let c = rng.random_range(2..6);
        let n = rng.random_range(1..60);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let acc = y.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let micro = confusion_matrix(&y, &p, c).unwrap().micro_f1().unwrap();
        ensure((micro - acc).abs() < 1e-12, || {
            format!("micro-F1 {micro} vs accuracy {acc}")
        })?;
    }

    let mut auc_cases = 0;
    while auc_cases < 500 {
        let c = rng.random_range(2..5);
        let n = rng.random_range(2..=50);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let present: BTreeSet<usize> = y.iter().copied().collect();
        if present.len() < 2 {
            continue;
        }
        // coarse scores so ties are common
        let mut probs = Array2::from_shape_fn((n, c), |_| rng.random_range(1..4) as f64);
        for mut row in probs.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let got = auc_ovr_macro(&y, probs.view()).unwrap();
        let mut total = 0.0;
        for &k in &present {
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in (0..n).filter(|&i| y[i] == k) {
                for j in (0..n).filter(|&j| y[j] != k) {
                    pairs += 1.0;
                    wins += match probs[[i, k]].partial_cmp(&probs[[j, k]]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            total += wins / pairs;
        }
        let brute = total / present.len() as f64;
        ensure((got - brute).abs() < 1e-12, || {
            format!("AUC {got} vs pair count {brute}")
        })?;
        auc_cases += 1;
    }

    // scipy.stats.ttest_rel on the same pairs
    let a = [85.2, 78.1, 90.4, 72.6, 81.0];
    let b = [82.0, 77.5, 86.1, 70.2, 80.3];
    let t = paired_t_test(&a, &b).unwrap();
    ensure((t.t - 3.1286625045694803).abs() < 1e-6, || {
        format!("t = {}", t.t)
    })?;
    ensure((t.p_value - 0.03523068969096166).abs() < 1e-6, || {
        format!("p = {}", t.p_value)
    })?;
    Ok(format!(
        "1000 micro-F1 instances, {auc_cases} AUC instances, t = {:.6}, p = {:.6}",
        t.t, t.p_value
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why}");
            }
        }
    };

    report(1, "gradient correctness", &mut gradient_check);
    report(2, "ensemble entropy", &mut ensemble_entropy);
    report(3, "weighted aggregation", &mut weighted_aggregation);
    report(4, "query budget accounting", &mut budget_accounting);
    report(5, "active learning schedule", &mut al_schedule);
    report(6, "determinism", &mut determinism);
    let matrix = preset_matrix();
    report(7, "ensemble vs random vs full-data FL", &mut || {
        let (s, t) = matrix.as_ref().map_err(|e| e.clone())?;
        active_vs_random(s, *t)
    });
    report(8, "centralized vs localized", &mut || {
        let (s, _) = matrix.as_ref().map_err(|e| e.clone())?;
        centralized_vs_localized(s)
    });
    report(9, "ensemble vs single-model entropy", &mut ablation);
    report(10, "metric oracles", &mut metric_oracles);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
