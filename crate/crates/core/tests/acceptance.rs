//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! cargo test -p gbair-core --test acceptance

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gbair_core::data::{self, generate_synthetic};
use gbair_core::gbair::{select_examples, EmbeddingCache, SelectionInput};
use gbair_core::harness::{self, SweepResult};
use gbair_core::metrics;
use gbair_core::model;
use gbair_core::output;
use gbair_core::seeds::{self, Stream};
use gbair_core::tracin::RetrievalIndex;
use gbair_core::*;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synthetic(seed: u64) -> DatasetSplit {
    generate_synthetic(&SyntheticConfig {
        seed,
        ..Default::default()
    })
    .expect("synthetic split")
}

/// The pinned configuration used for the end-to-end criteria.
fn pinned(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        train: TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        },
        ..Default::default()
    }
}

// ---------------------------------------------------------------- oracles

fn oracle_loss(p: &[f64], m: usize, d: usize, e: &[f64], y: f64) -> f64 {
    let mut logit = p[m * d + m];
    for j in 0..m {
        let a: f64 = (0..d).map(|i| p[j * d + i] * e[i]).sum();
        logit += p[m * d + j] * a.tanh();
    }
    let pr = (1.0 / (1.0 + (-logit).exp())).clamp(1e-12, 1.0 - 1e-12);
    -(y * pr.ln() + (1.0 - y) * (1.0 - pr).ln())
}

/// Average precision by enumerating every PR point of the ranked list.
fn oracle_ap(items: &[(f64, bool)]) -> f64 {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].0.partial_cmp(&items[a].0).unwrap());
    let total = items.iter().filter(|x| x.1).count() as f64;
    let mut points = vec![(0.0, 1.0)];
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if items[i].1 {
            tp += 1.0;
        }
        points.push((tp / total, tp / (rank + 1) as f64));
    }
    points.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum()
}

// ---------------------------------------------------------------- criteria

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = seeds::rng(1, Stream::Synthetic, 0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let params = PromptHeadParams::init(m, d, 0.5, &mut rng);
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = if rng.random_bool(0.5) { Label::NotOk } else { Label::Ok };
        let y = label.target();
        let g = model::gradient_embedded(&params, &e, label).unwrap();
        let flat = params.flatten();
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (oracle_loss(&plus, m, d, &e, y) - oracle_loss(&minus, m, d, &e, y)) / (2.0 * h);
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!("max rel err {worst:.2e}, {elapsed:.2?}"),
    )
}

fn c2_average_precision() -> Outcome {
    let mut rng = seeds::rng(2, Stream::Synthetic, 0);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(1..=50);
        let levels = rng.random_range(1..=10);
        let items: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.3)))
            .collect();
        if !items.iter().any(|x| x.1) {
            assert!(metrics::average_precision(&items).is_err());
            continue;
        }
        let ap = metrics::average_precision(&items).unwrap();
        worst = worst.max((ap - oracle_ap(&items)).abs());
        checked += 1;
    }
    let hand = metrics::average_precision(&[(0.9, true), (0.8, false), (0.7, true)]).unwrap();
    let hand_ok = (hand - 5.0 / 6.0).abs() < 1e-12;
    outcome(
        worst <= 1e-12 && hand_ok,
        format!("max |ap - oracle| {worst:.1e} over 1000 instances, [1,0,1] -> {hand:.6}"),
    )
}

fn c3_ci2r() -> Outcome {
    let corrupted = ["a", "b"].iter().map(|s| s.to_string()).collect();
    let two = metrics::ci2r(&[vec!["a", "b"], vec!["a", "x"]], &corrupted).unwrap();
    let full = metrics::ci2r(&[vec!["a"], vec!["b", "a"]], &corrupted).unwrap();
    let miss = metrics::ci2r(&[vec!["x", "y"]], &corrupted).unwrap();
    let arithmetic = two == 0.75 && full == 1.0 && miss == 0.0;

    let split = synthetic(0);
    let cache = EmbeddingCache::new(Encoder::new(EncoderConfig::default()).unwrap(), &split.train);
    let hits: Vec<f64> = (0..200u64)
        .into_par_iter()
        .map(|trial| {
            let (train, record) = data::corrupt(&split.train, 0.3, trial).unwrap();
            let config = ExperimentConfig {
                seed: trial,
                method: Method::Random,
                ..Default::default()
            };
            let input = SelectionInput {
                train: &train,
                misclassified: &[],
                checkpoints: &[],
                cache: &cache,
                iteration: 1,
            };
            let sel = select_examples(Method::Random, &input, &config).unwrap();
            metrics::hit_fraction(&sel.ids, &record.corrupted_ids)
        })
        .collect();
    let mean = hits.iter().sum::<f64>() / hits.len() as f64;
    outcome(
        arithmetic && (0.25..=0.35).contains(&mean),
        format!("(1,0.5)->{two}, full->{full}, miss->{miss}, random first-iteration hit {mean:.4}"),
    )
}

struct MethodRuns {
    by_method: BTreeMap<Method, Vec<RunSummary>>,
    first_hit: Vec<f64>,
    slowest: Duration,
}

fn method_runs() -> MethodRuns {
    let jobs: Vec<(u64, Method)> = SEEDS
        .iter()
        .flat_map(|&s| [Method::Gbair, Method::Random, Method::Embedding].map(|m| (s, m)))
        .collect();
    let results: Vec<(Method, RunOutput, Duration)> = jobs
        .par_iter()
        .map(|&(seed, method)| {
            let start = Instant::now();
            let split = synthetic(seed);
            let config = ExperimentConfig { method, ..pinned(seed) };
            let out = run_experiment(&config, &split).expect("experiment");
            (method, out, start.elapsed())
        })
        .collect();
    let mut by_method: BTreeMap<Method, Vec<RunSummary>> = BTreeMap::new();
    let mut first_hit = Vec::new();
    let mut slowest = Duration::ZERO;
    for (method, out, elapsed) in results {
        if method == Method::Gbair {
            first_hit.push(out.reports[1].hit_fraction);
            slowest = slowest.max(elapsed);
        }
        by_method.entry(method).or_default().push(out.summary());
    }
    MethodRuns {
        by_method,
        first_hit,
        slowest,
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c4_recovery(runs: &MethodRuns) -> Outcome {
    let g = &runs.by_method[&Method::Gbair];
    let clean = mean(g.iter().map(|s| s.clean_ap));
    let corrupted = mean(g.iter().map(|s| s.corrupted_ap));
    let recovered = mean(g.iter().map(|s| s.final_ap));
    let drop = clean - corrupted;
    let target = corrupted + 0.5 * drop;
    outcome(
        clean >= 0.95 && drop >= 0.15 && recovered >= target && runs.slowest <= Duration::from_secs(300),
        format!(
            "mean over {} seeds: clean {clean:.3}, corrupted {corrupted:.3} (drop {drop:.3}), \
             after 10 iterations {recovered:.3} (need {target:.3}), slowest seed {:.2?}",
            g.len(),
            runs.slowest
        ),
    )
}

fn c5_ordering(runs: &MethodRuns) -> Outcome {
    let ci2r = |m: Method| mean(runs.by_method[&m].iter().map(|s| s.ci2r));
    let final_ap = |m: Method| mean(runs.by_method[&m].iter().map(|s| s.final_ap));
    let (g, r, e) = (ci2r(Method::Gbair), ci2r(Method::Random), ci2r(Method::Embedding));
    let (gf, rf) = (final_ap(Method::Gbair), final_ap(Method::Random));
    outcome(
        g >= r + 0.10 && gf >= rf && (e - r).abs() <= 0.05,
        format!("CI2R gbair {g:.3} random {r:.3} embedding {e:.3}; final AP gbair {gf:.3} random {rf:.3}"),
    )
}

fn c6_first_iteration(runs: &MethodRuns) -> Outcome {
    let need = 2.0 * 0.3;
    let worst = runs.first_hit.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        worst >= need,
        format!("iteration-1 hit fractions {:?} (need >= {need})", runs.first_hit),
    )
}

fn ablation_spec() -> SweepSpec {
    SweepSpec {
        base: pinned(0),
        axes: SweepAxes {
            corruption_rate: Some(vec![0.1, 0.2, 0.3, 0.4]),
            val_subset_size: Some(vec![300, 500, 1000]),
            measure: Some(vec![Measure::Cosine, Measure::Dot]),
            intervention: Some(vec![Intervention::Relabel, Intervention::Remove]),
            ..Default::default()
        },
        seeds: SEEDS.to_vec(),
    }
}

fn override_of<'a>(cell: &'a harness::CellSummary, name: &str) -> &'a str {
    cell.overrides
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.as_str())
        .expect("override present")
}

fn c7_ablation() -> Outcome {
    let split = synthetic(0);
    let result = match run_sweep(&ablation_spec(), &split, rayon::current_num_threads()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let summary = &result.summary;
    let failed: usize = summary.cells.iter().map(|c| c.failures.len()).sum();

    // corrupted AP along the rate axis, for every other combination
    let mut lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for cell in &summary.cells {
        let rate: f64 = override_of(cell, "corruption_rate").parse().unwrap();
        let rest = format!(
            "{}/{}/{}",
            override_of(cell, "val_subset_size"),
            override_of(cell, "measure"),
            override_of(cell, "intervention")
        );
        lines.entry(rest).or_default().push((rate, cell.corrupted_ap.mean));
    }
    let mut worst_rise = f64::NEG_INFINITY;
    for pts in lines.values_mut() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pts.windows(2) {
            worst_rise = worst_rise.max(w[1].1 - w[0].1);
        }
    }

    // recovered share of the drop per intervention: pooled over the whole grid,
    // and per cell at the default rate (at 0.1 the drop is too small for a ratio)
    let mut pooled: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut at_default: BTreeMap<String, f64> = BTreeMap::new();
    for cell in &summary.cells {
        let drop = cell.clean_ap.mean - cell.corrupted_ap.mean;
        let gain = cell.final_ap.mean - cell.corrupted_ap.mean;
        let intervention = override_of(cell, "intervention").to_string();
        let p = pooled.entry(intervention.clone()).or_default();
        p.0 += gain;
        p.1 += drop;
        if override_of(cell, "corruption_rate") == "0.3" {
            let worst = at_default.entry(intervention).or_insert(f64::INFINITY);
            *worst = worst.min(gain / drop);
        }
    }
    let share = |i: &str| pooled[i].0 / pooled[i].1;
    let recovers = ["relabel", "remove"]
        .iter()
        .all(|i| share(i) >= 0.25 && at_default[*i] >= 0.25);
    outcome(
        failed == 0 && worst_rise <= 0.03 && recovers,
        format!(
            "{} cells x {} seeds, {failed} failed; max corrupted-AP rise {worst_rise:+.3}; \
             recovered share pooled relabel {:.2} remove {:.2}, worst cell at rate 0.3 relabel {:.2} remove {:.2}",
            summary.cells.len(),
            SEEDS.len(),
            share("relabel"),
            share("remove"),
            at_default["relabel"],
            at_default["remove"]
        ),
    )
}

fn files_named(dir: &Path, names: &[&str], out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_named(&p, names, out);
        } else if names.iter().any(|n| p.file_name().is_some_and(|f| f == *n)) {
            out.push(p);
        }
    }
}

fn same_tree(a: &Path, b: &Path) -> (usize, bool) {
    let names = [output::REPORTS_FILE, output::SUMMARY_FILE];
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files_named(a, &names, &mut fa);
    files_named(b, &names, &mut fb);
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    let same = rel(a, &fa) == rel(b, &fb)
        && fa
            .iter()
            .zip(&fb)
            .all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap());
    (fa.len(), same)
}

fn c8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let split = synthetic(3);
    let config = ExperimentConfig {
        store_influence: true,
        n_iterations: 4,
        ..pinned(11)
    };
    for name in ["run-a", "run-b"] {
        let out = run_experiment(&config, &split).unwrap();
        output::write_run(&tmp.path().join(name), &out).unwrap();
    }
    let (run_files, run_same) = same_tree(&tmp.path().join("run-a"), &tmp.path().join("run-b"));

    let spec = SweepSpec {
        base: ExperimentConfig {
            n_iterations: 3,
            ..pinned(0)
        },
        axes: SweepAxes {
            corruption_rate: Some(vec![0.1, 0.3]),
            method: Some(vec![Method::Gbair, Method::Random]),
            ..Default::default()
        },
        seeds: vec![5, 6],
    };
    let sweeps: Vec<SweepResult> = [1, 3].iter().map(|&p| run_sweep(&spec, &split, p).unwrap()).collect();
    for (name, result) in ["sweep-a", "sweep-b"].iter().zip(&sweeps) {
        harness::write_sweep(&tmp.path().join(name), result).unwrap();
    }
    let (sweep_files, sweep_same) = same_tree(&tmp.path().join("sweep-a"), &tmp.path().join("sweep-b"));
    outcome(
        run_same && sweep_same && run_files == 2 && sweep_files > 8,
        format!("run: {run_files} files identical={run_same}; sweep (1 vs 3 workers): {sweep_files} files identical={sweep_same}"),
    )
}

fn c9_scale_invariance() -> Outcome {
    let mut rng = seeds::rng(9, Stream::Synthetic, 0);
    let lambda = 17.3;
    let mut cosine_stable = true;
    let mut orderings = 0;
    for _ in 0..50 {
        let n = 12;
        let dim = 8;
        let mut views: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
        let order = |views: &Vec<Vec<f64>>, query: &Vec<f64>| -> Vec<String> {
            let index = RetrievalIndex::new(ids.clone(), vec![views.clone()], vec![1], Measure::Cosine).unwrap();
            index
                .top_k("v", std::slice::from_ref(query), n)
                .unwrap()
                .into_iter()
                .map(|r| r.train_id)
                .collect()
        };
        let base = order(&views, &query);
        let scaled_query: Vec<f64> = query.iter().map(|x| x * lambda).collect();
        cosine_stable &= order(&views, &scaled_query) == base;
        orderings += 1;
        for i in 0..n {
            let saved = views[i].clone();
            views[i] = saved.iter().map(|x| x * lambda).collect();
            cosine_stable &= order(&views, &query) == base;
            views[i] = saved;
            orderings += 1;
        }
    }

    let ids = vec!["a".to_string(), "b".to_string()];
    let query = vec![vec![1.0, 0.0]];
    let dot_order = |a: Vec<f64>| -> Vec<String> {
        let index = RetrievalIndex::new(ids.clone(), vec![vec![a, vec![2.0, 5.0]]], vec![1], Measure::Dot).unwrap();
        index
            .top_k("v", &query, 2)
            .unwrap()
            .into_iter()
            .map(|r| r.train_id)
            .collect()
    };
    let before = dot_order(vec![1.0, 0.0]);
    let after = dot_order(vec![lambda, 0.0]);
    let dot_changes = before != after;
    outcome(
        cosine_stable && dot_changes,
        format!("cosine: {orderings} rescaled orderings unchanged={cosine_stable}; dot: {before:?} -> {after:?}"),
    )
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", c1_gradients()),
        ("2 average precision oracle", c2_average_precision()),
        ("3 CI2R arithmetic", c3_ci2r()),
    ];
    let runs = method_runs();
    results.push(("4 end-to-end recovery", c4_recovery(&runs)));
    results.push(("5 method ordering", c5_ordering(&runs)));
    results.push(("6 first-iteration precision", c6_first_iteration(&runs)));
    results.push(("7 ablation harness", c7_ablation()));
    results.push(("8 determinism", c8_determinism()));
    results.push(("9 scale invariance", c9_scale_invariance()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.1?}",
        results.len() - failed,
        results.len(),
        start.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
