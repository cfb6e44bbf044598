//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use claimsect::annotation::{noiseless_answer, REPORTS_FILE};
use claimsect::classify::{
    classify_multilabel, detect_claims, normalize_score, DetectOptions, ThresholdSet,
};
use claimsect::eval::{
    experiment_folds, experiment_p_sweep, fit_temperature, ground_truth_threshold,
    mixed_fold_problems, separable_problems, weighted_f1, FoldCategory,
};
use claimsect::pba::{
    run_session, BisectionConfig, BisectionState, OracleError, Proposal, Query, SessionStatus,
    StopReason, UpdateOutcome,
};
use claimsect::scores::{parse_dataset, Document, ScoreRange, ScoredDoc};
use claimsect::synthetic;
use claimsect::taxonomy::{parse_taxonomy, Taxonomy};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("bayes-update-oracle", bayes_update_oracle),
        ("median-query-factors", median_query_factors),
        (
            "deterministic-bisection-limit",
            deterministic_bisection_limit,
        ),
        ("convergence-shape", convergence_shape),
        ("early-stop-soundness", early_stop_soundness),
        ("fold-stability-shape", fold_stability_shape),
        ("normalization-properties", normalization_properties),
        ("classification-oracle", classification_oracle),
        ("negation-filter-monotonicity", negation_filter_monotonicity),
        ("ground-truth-threshold", ground_truth_brute_force),
        ("temperature-recovery", temperature_recovery),
        ("replay-crash-determinism", replay_crash_determinism),
        ("cli-end-to-end", cli_end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check)
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Engine

fn config(p: f64, grid_size: usize) -> BisectionConfig {
    BisectionConfig {
        p,
        grid_size,
        stop_on_complete: false,
        ..BisectionConfig::default()
    }
}

fn random_posterior(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random::<f64>().powi(3) + 1e-9
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|m| m / total).collect()
}

/// Likelihood times prior, renormalized.
fn bayes_oracle(grid: &[f64], prior: &[f64], p: f64, s: f64, entails: bool) -> Vec<f64> {
    let q = 1.0 - p;
    let joint: Vec<f64> = grid
        .iter()
        .zip(prior)
        .map(|(&x, &m)| {
            let below = x < s;
            let lik = if below == entails { p } else { q };
            m * lik
        })
        .collect();
    let z: f64 = joint.iter().rev().sum();
    joint.iter().map(|j| j / z).collect()
}

fn bayes_update_oracle() -> Outcome {
    let mut rng = synthetic::rng(11);
    let (mut applied, mut rejected, mut worst, mut worst_sum) = (0, 0, 0.0f64, 0.0f64);
    for trial in 0..2000 {
        let n = [11, 101, 1001][trial % 3];
        let p = rng.random_range(0.51..0.99);
        let prior = random_posterior(n, &mut rng);
        let mut state = BisectionState::from_masses(config(p, n), prior.clone()).unwrap();
        let s = if rng.random_bool(0.5) {
            state.grid()[rng.random_range(0..n)]
        } else {
            rng.random::<f64>()
        };
        let entails = rng.random_bool(0.5);
        let lower: f64 = state
            .grid()
            .iter()
            .zip(&prior)
            .filter(|(x, _)| **x < s)
            .map(|(_, m)| m)
            .sum();
        let raised = if entails { lower } else { 1.0 - lower };
        match state.update(s, entails).unwrap() {
            UpdateOutcome::Applied => {
                applied += 1;
                ensure(raised < p + 1e-12, || {
                    format!("applied with raised mass {raised} >= p {p}")
                })?;
                let expected = bayes_oracle(state.grid(), &prior, p, s, entails);
                for (a, b) in state.masses().iter().zip(&expected) {
                    worst = worst.max((a - b).abs());
                }
            }
            UpdateOutcome::Rejected => {
                rejected += 1;
                ensure(raised > p - 1e-12, || {
                    format!("rejected with raised mass {raised} < p {p}")
                })?;
                ensure(state.masses() == prior.as_slice(), || {
                    "rejection changed the posterior".into()
                })?;
            }
        }
        let sum: f64 = state.masses().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    // Mass stays normalized along whole sessions.
    for seed in 0..50 {
        let mut rng = synthetic::rng(1000 + seed);
        let column = synthetic::uniform_column(300, &mut rng);
        let root = rng.random::<f64>();
        let p = rng.random_range(0.55..0.95);
        let mut state = BisectionState::init(config(p, 1001)).unwrap();
        for _ in 0..60 {
            let Proposal::Query(doc) = state.propose_next(&column) else {
                break;
            };
            let answer = (doc.score > root) ^ rng.random_bool(0.1);
            if state.record(&doc.doc_id, doc.score, answer).unwrap() == UpdateOutcome::Rejected {
                break;
            }
            let sum: f64 = state.masses().iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || {
        format!("max deviation {worst:e} > 1e-12")
    })?;
    ensure(worst_sum <= 1e-12, || {
        format!("mass sum off by {worst_sum:e}")
    })?;
    ensure(applied >= 500, || format!("only {applied} updates applied"))?;
    Ok(format!(
        "{applied} applied / {rejected} rejected updates, max |diff| {worst:.1e}, max |sum-1| {worst_sum:.1e}"
    ))
}

fn median_query_factors() -> Outcome {
    let mut rng = synthetic::rng(5);
    let mut checked = 0;
    for _ in 0..200 {
        // Dyadic masses with exactly half the mass below the query point.
        let n = 2 * rng.random_range(2..200usize) + 1;
        let half = n / 2;
        // Half the mass on each side of the query point, all of it dyadic.
        let mut weights = dyadic_side(half, &mut rng);
        weights.extend(dyadic_side(n - half, &mut rng));
        let masses: Vec<f64> = weights
            .iter()
            .map(|&w| w as f64 / (1u64 << 20) as f64)
            .collect();
        let p = [0.6, 0.7, 0.8, 0.9, 0.75][rng.random_range(0..5)];
        let mut state = BisectionState::from_masses(config(p, n), masses.clone()).unwrap();
        let s = state.grid()[half];
        ensure(state.mass_below(s) == 0.5, || {
            "constructed split is not 0.5".into()
        })?;
        let entails = rng.random_bool(0.5);
        ensure(
            state.update(s, entails).unwrap() == UpdateOutcome::Applied,
            || "median query rejected".into(),
        )?;
        let q = 1.0 - p;
        let (f_lower, f_upper) = if entails {
            (2.0 * p, 2.0 * q)
        } else {
            (2.0 * q, 2.0 * p)
        };
        for (i, (&after, &before)) in state.masses().iter().zip(&masses).enumerate() {
            let factor = if i < half { f_lower } else { f_upper };
            ensure(after == before * factor, || {
                format!("point {i}: {after} != {before} * {factor}")
            })?;
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} median queries scale the sides by exactly 2p and 2q"
    ))
}

/// Positive weights summing to exactly 2^19.
fn dyadic_side(count: usize, rng: &mut impl Rng) -> Vec<u64> {
    let target = 1u64 << 19;
    let raw: Vec<u64> = (0..count).map(|_| rng.random_range(1..=1024)).collect();
    let total: u64 = raw.iter().sum();
    let mut w: Vec<u64> = raw.iter().map(|x| x * target / total).collect();
    let sum: u64 = w.iter().sum();
    *w.last_mut().unwrap() += target - sum;
    w
}

/// Support of a posterior: grid points holding more than `rel` of the
/// largest mass.
fn support(state: &BisectionState, rel: f64) -> (usize, usize) {
    let max = state.masses().iter().copied().fold(0.0, f64::max);
    let idx: Vec<usize> = state
        .masses()
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > rel * max)
        .map(|(i, _)| i)
        .collect();
    (idx[0], *idx.last().unwrap())
}

fn deterministic_bisection_limit() -> Outcome {
    // 4097 points keep several cells in the bracket after 10 halvings.
    let n = 4097;
    let h = 1.0 / (n - 1) as f64;
    let mut rng = synthetic::rng(3);
    let mut worst_cells = 0.0f64;
    let mut roots = 0;
    for (p, rel) in [(1.0, 0.0), (1.0 - 1e-9, 1e-6)] {
        for _ in 0..300 {
            let root = rng.random::<f64>();
            let mut state = BisectionState::init_unchecked(config(p, n)).unwrap();
            let grid = state.grid().to_vec();
            // Classic bisection over the same candidate thresholds.
            let (mut lo, mut hi) = (0usize, n - 1);
            for k in 1..=10 {
                let s = state.median();
                let entails = root < s;
                ensure(
                    state.update(s, entails).unwrap() == UpdateOutcome::Applied,
                    || format!("p={p} root={root}: update {k} rejected"),
                )?;
                // With p < 1 the vanishing tails may break an even split
                // toward the upper central point; either one is a bisection
                // query.
                let lower_mid = lo + (hi - lo) / 2;
                let mid = grid.iter().position(|&x| x == s).unwrap();
                let central = mid == lower_mid || (p < 1.0 && mid == lo + (hi - lo).div_ceil(2));
                ensure(central, || {
                    format!(
                        "p={p} step {k}: query {s} is not central in [{}, {}]",
                        grid[lo], grid[hi]
                    )
                })?;
                if root < grid[mid] {
                    hi = mid - 1;
                } else {
                    lo = mid;
                }
                let (a, b) = support(&state, rel);
                let dev = ((grid[a] - grid[lo]).abs()).max((grid[b] - grid[hi]).abs()) / h;
                worst_cells = worst_cells.max(dev);
                ensure(dev <= 1.0 + 1e-9, || {
                    format!(
                        "p={p} root={root} step {k}: support [{}, {}] vs bracket [{}, {}]",
                        grid[a], grid[b], grid[lo], grid[hi]
                    )
                })?;
                // The bracket halves every step and keeps the root's cell.
                let width = grid[b] - grid[a];
                ensure(width <= 0.5f64.powi(k) + 2.0 * h, || {
                    format!("p={p} step {k}: support width {width} exceeds 2^-{k}")
                })?;
                ensure(grid[a] <= root + h && root <= grid[b] + h, || {
                    format!(
                        "p={p} step {k}: root {root} outside [{}, {}]",
                        grid[a], grid[b]
                    )
                })?;
            }
            roots += 1;
        }
    }
    Ok(format!(
        "{roots} roots, p in {{1, 1-1e-9}}, k <= 10: max deviation {worst_cells} grid cells"
    ))
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn convergence_shape() -> Outcome {
    let problems = separable_problems(500, 0.6, 50, 0.0, 0);
    let p_values = [0.6, 0.7, 0.8, 0.9];
    let report = experiment_p_sweep(&problems, &p_values, &BisectionConfig::default(), 30, 4)
        .map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for p in [0.6, 0.7, 0.8] {
        let at = |step| report.row(p, step).unwrap().mean_dist_carried;
        let trend: Vec<(f64, f64)> = (5..=30).map(|s| (s as f64, at(s))).collect();
        let slope = ols_slope(&trend);
        ensure(at(30) <= 0.05, || {
            format!("p={p}: mean distance {} at step 30", at(30))
        })?;
        ensure(slope <= 0.0, || {
            format!("p={p}: distance trend slope {slope} > 0 over steps 5..30")
        })?;
        notes.push(format!(
            "p={p} d5={:.4} d30={:.4} slope={slope:.1e}",
            at(5),
            at(30)
        ));
    }
    let var = |p| report.row(p, 30).unwrap().var_error_carried;
    ensure(var(0.9) > var(0.7), || {
        format!(
            "variance at step 30: p=0.9 {} <= p=0.7 {}",
            var(0.9),
            var(0.7)
        )
    })?;
    notes.push(format!(
        "var30 p=0.9 {:.2e} > p=0.7 {:.2e}",
        var(0.9),
        var(0.7)
    ));
    Ok(notes.join("; "))
}

fn early_stop_soundness() -> Outcome {
    // Grid of 17 points on [0, 1]; masses are multiples of 1/64, so side
    // masses are exact.
    let n = 17;
    let p = 0.75;
    let mut cases = 0;
    let build = |below: u32| -> Vec<f64> {
        // `below` 64ths on the first 8 points, the rest on the last 9.
        let mut w = vec![0u32; n];
        for i in 0..below as usize {
            w[i % 8] += 1;
        }
        for i in 0..(64 - below) as usize {
            w[8 + i % 9] += 1;
        }
        w.iter().map(|&x| x as f64 / 64.0).collect()
    };
    let s = 0.5; // grid point 8: mass strictly below it is `below / 64`.
    for below in 1..64u32 {
        let lower = below as f64 / 64.0;
        let upper = 1.0 - lower;
        for entails in [true, false] {
            let mut state = BisectionState::from_masses(config(p, n), build(below)).unwrap();
            ensure(state.mass_below(s) == lower, || "constructed mass".into())?;
            let raised = if entails { lower } else { upper };
            let outcome = state.update(s, entails).unwrap();
            let expect_stop = raised >= p;
            let stopped = outcome == UpdateOutcome::Rejected;
            ensure(stopped == expect_stop, || {
                format!(
                    "lower={lower} entails={entails}: stopped={stopped}, expected {expect_stop}"
                )
            })?;
            ensure(
                (state.status() == SessionStatus::EarlyStop) == expect_stop,
                || format!("lower={lower}: status {:?}", state.status()),
            )?;
            cases += 1;
        }
        // Proposal side: a lone candidate at s is offered iff both sides
        // hold less than p.
        let state = BisectionState::from_masses(config(p, n), build(below)).unwrap();
        let column = vec![ScoredDoc::new("d", s)];
        let admissible = lower < p && upper < p;
        let proposal = state.propose_next(&column);
        let offered = matches!(proposal, Proposal::Query(_));
        ensure(offered == admissible, || {
            format!("lower={lower}: offered={offered}, admissible={admissible}")
        })?;
        if !admissible {
            ensure(proposal == Proposal::Stop(StopReason::ScaleLimit), || {
                "stop reason".into()
            })?;
        }
        cases += 1;
    }
    // A session whose remaining documents all lie far from the median ends
    // as an early stop without asking.
    let column: Vec<ScoredDoc> = [0.01, 0.02, 0.98, 0.99]
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredDoc::new(format!("d{i}"), s))
        .collect();
    let mut asked = 0;
    let mut oracle = |_: &Query<'_>| -> Result<bool, OracleError> {
        asked += 1;
        Ok(true)
    };
    let out = run_session("far", BisectionConfig::default(), &column, &mut oracle).unwrap();
    ensure(
        out.report.status == SessionStatus::EarlyStop && asked == 0,
        || {
            format!(
                "far-only column: {:?} after {asked} questions",
                out.report.status
            )
        },
    )?;
    Ok(format!(
        "{cases} constructed posteriors on both sides of the mass = p boundary"
    ))
}

fn fold_stability_shape() -> Outcome {
    let config = BisectionConfig {
        p: 0.9,
        ..BisectionConfig::default()
    };
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let problems = mixed_fold_problems(20, 600, 0.0, seed * 100);
        let ids: Vec<String> = (0..600).map(synthetic::doc_id).collect();
        let report =
            experiment_folds(&ids, &problems, 3, seed, &config, 4).map_err(|e| e.to_string())?;
        let complete = report.by_category.get(&FoldCategory::Complete);
        let early = report.by_category.get(&FoldCategory::EarlyStop);
        let (Some(c), Some(e)) = (complete, early) else {
            return Err(format!(
                "seed {seed}: need both categories, got {:?}",
                report.by_category.keys().collect::<Vec<_>>()
            ));
        };
        ensure(c.max <= 0.12, || {
            format!("seed {seed}: complete spread up to {}", c.max)
        })?;
        ensure(c.avg < e.avg, || {
            format!(
                "seed {seed}: complete avg {} >= early stop avg {}",
                c.avg, e.avg
            )
        })?;
        notes.push(format!(
            "seed {seed}: complete n={} avg {:.3} max {:.3} < early stop n={} avg {:.3}",
            c.count, c.avg, c.max, e.count, e.avg
        ));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// Classification

fn normalization_properties() -> Outcome {
    let xs: Vec<f64> = (0..10_000).map(|i| i as f64 / 9_999.0).collect();
    let mut thresholds: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    thresholds.extend([1e-6, 0.001, 0.999, 1.0 - 1e-6]);
    for &t in &thresholds {
        ensure(normalize_score(t, t) == 0.5, || {
            format!("f({t},{t}) != 0.5")
        })?;
        ensure(normalize_score(0.0, t) == 0.0, || format!("f(0,{t}) != 0"))?;
        ensure(normalize_score(1.0, t) == 1.0, || format!("f(1,{t}) != 1"))?;
        let lip = 0.5 / t.min(1.0 - t) * (1.0 + 1e-9);
        for w in xs.windows(2) {
            let (a, b) = (normalize_score(w[0], t), normalize_score(w[1], t));
            ensure(b >= a, || {
                format!("t={t}: f({}) = {b} < f({}) = {a}", w[1], w[0])
            })?;
            ensure(b - a <= lip * (w[1] - w[0]) + 1e-15, || {
                format!("t={t}: jump {} between {} and {}", b - a, w[0], w[1])
            })?;
        }
        for eps in [1e-6, 1e-9, 1e-12] {
            let left = normalize_score((t - eps).max(0.0), t);
            let right = normalize_score((t + eps).min(1.0), t);
            ensure(
                (left - 0.5).abs() <= lip * eps * 1.01 && (right - 0.5).abs() <= lip * eps * 1.01,
                || format!("t={t}: discontinuous at threshold"),
            )?;
        }
    }
    Ok(format!(
        "{} thresholds x 10^4 points: monotone, Lipschitz-continuous, f(t,t)=0.5, f(0)=0, f(1)=1",
        thresholds.len()
    ))
}

fn classification_oracle() -> Outcome {
    let mut rng = synthetic::rng(21);
    let mut kinds: HashMap<String, usize> = HashMap::new();
    let count = 2000;
    for i in 0..count {
        let inst = support::random_instance(&mut rng);
        *kinds
            .entry(format!("{:?}", inst.taxonomy.task_kind))
            .or_default() += 1;
        support::check_instance(&inst).map_err(|e| format!("instance {i}: {e}"))?;
    }
    let mut kinds: Vec<_> = kinds.into_iter().collect();
    kinds.sort();
    Ok(format!(
        "{count} random instances match enumeration ({kinds:?})"
    ))
}

fn negation_filter_monotonicity() -> Outcome {
    let mut rng = synthetic::rng(31);
    for i in 0..1500 {
        let inst = support::random_instance(&mut rng);
        let run = |negation_filter| {
            detect_claims(
                &inst.matrix,
                &inst.thresholds,
                &inst.taxonomy,
                DetectOptions {
                    negation_filter,
                    ..DetectOptions::default()
                },
            )
            .unwrap()
        };
        for (off, on) in run(false).iter().zip(run(true)) {
            let off: BTreeSet<&String> = off.claims.iter().collect();
            ensure(on.claims.iter().all(|c| off.contains(c)), || {
                format!("instance {i}, doc {}: filter added a claim", on.doc_id)
            })?;
        }
    }
    let mut notes = Vec::new();
    for seed in 0..10 {
        let prob = synthetic::negation_problem(400, 4, &mut synthetic::rng(seed));
        let thresholds = ThresholdSet::uniform(&prob.taxonomy, 0.5);
        let precision = |negation_filter| {
            let detected = detect_claims(
                &prob.scores,
                &thresholds,
                &prob.taxonomy,
                DetectOptions {
                    negation_filter,
                    ..DetectOptions::default()
                },
            )
            .unwrap();
            let classes = classify_multilabel(&detected, &prob.taxonomy);
            let pred: Vec<BTreeSet<String>> = classes
                .iter()
                .map(|c| c.classes.iter().cloned().collect())
                .collect();
            let gold: Vec<BTreeSet<String>> = prob
                .documents
                .iter()
                .map(|d| d.gold_classes.clone().unwrap())
                .collect();
            let ids: Vec<String> = prob.taxonomy.class_ids().map(str::to_string).collect();
            weighted_f1(&pred, &gold, &ids).unwrap().weighted.precision
        };
        let (off, on) = (precision(false), precision(true));
        ensure(on >= off, || {
            format!("seed {seed}: precision {off:.4} -> {on:.4}")
        })?;
        if seed < 3 {
            notes.push(format!("{off:.3}->{on:.3}"));
        }
    }
    Ok(format!(
        "subset on 1500 instances; weighted precision never drops on 10 synthetic sets ({} ...)",
        notes.join(", ")
    ))
}

fn ground_truth_brute_force() -> Outcome {
    let unit = ScoreRange { lo: 0.0, hi: 1.0 };
    let grid: Vec<f64> = (0..10_000).map(|k| k as f64 / 9_999.0).collect();
    let accuracy =
        |pairs: &[(f64, bool)], t: f64| pairs.iter().filter(|&&(s, e)| (s > t) == e).count();
    let mut rng = synthetic::rng(41);
    for i in 0..1000 {
        let n = rng.random_range(2..60);
        let root = rng.random::<f64>();
        let noise = rng.random::<f64>() * 0.4;
        let mut pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let s = (rng.random::<f64>() * 1000.0).round() / 1000.0;
                ((s), (s > root) ^ rng.random_bool(noise))
            })
            .collect();
        pairs[0].1 = true;
        pairs[1].1 = false;
        let gt = ground_truth_threshold(&pairs, unit).map_err(|e| e.to_string())?;
        let best = grid.iter().map(|&t| accuracy(&pairs, t)).max().unwrap();
        let first = *grid.iter().find(|&&t| accuracy(&pairs, t) == best).unwrap();
        ensure(accuracy(&pairs, gt.threshold) == best, || {
            format!(
                "instance {i}: accuracy {} < grid best {best}",
                accuracy(&pairs, gt.threshold)
            )
        })?;
        ensure(
            pairs
                .iter()
                .all(|&(s, _)| (s > gt.threshold) == (s > first)),
            || {
                format!(
                    "instance {i}: threshold {} is not the smallest optimum {first}",
                    gt.threshold
                )
            },
        )?;
    }
    Ok("1000 instances agree with a 10^4-point grid search".into())
}

fn temperature_recovery() -> Outcome {
    let mut notes = Vec::new();
    for t0 in [0.5, 1.0, 2.0] {
        let mut fits = Vec::new();
        for seed in 0..20u64 {
            let samples =
                synthetic::temperature_samples(5000, t0, 6.0, &mut synthetic::rng(seed * 7 + 1));
            let fit = fit_temperature(&samples, 160, seed).map_err(|e| e.to_string())?;
            fits.push(fit.temperature);
        }
        let mean = fits.iter().sum::<f64>() / fits.len() as f64;
        let mut sorted = fits.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[9] + sorted[10]);
        let within = fits.iter().filter(|t| (*t / t0 - 1.0).abs() <= 0.1).count();
        ensure((mean / t0 - 1.0).abs() <= 0.1, || {
            format!("T0={t0}: mean recovered T {mean:.3} off by more than 10%")
        })?;
        ensure((median / t0 - 1.0).abs() <= 0.1, || {
            format!("T0={t0}: median recovered T {median:.3} off by more than 10%")
        })?;
        notes.push(format!(
            "T0={t0}: mean {mean:.3}, median {median:.3}, {within}/20 seeds individually within 10%"
        ));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// CLI

fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/examples/demo")
}

fn claimsect() -> Command {
    Command::new(env!("CARGO_BIN_EXE_claimsect"))
}

fn run_cli(args: &[&str]) -> Result<(i32, String, String), String> {
    let out = claimsect().args(args).output().map_err(|e| e.to_string())?;
    Ok((
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    ))
}

fn demo_inputs() -> (Taxonomy, HashMap<String, Document>) {
    let dir = demo_dir();
    let taxonomy = parse_taxonomy(&std::fs::read(dir.join("taxonomy.json")).unwrap()).unwrap();
    let docs = parse_dataset(&std::fs::read(dir.join("dataset.jsonl")).unwrap()).unwrap();
    (
        taxonomy,
        docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect(),
    )
}

fn tune_args<'a>(campaign: &'a str, annotator: &'a str, paths: &'a [String; 3]) -> Vec<&'a str> {
    vec![
        "tune",
        "--campaign",
        campaign,
        "--taxonomy",
        &paths[0],
        "--scores",
        &paths[1],
        "--dataset",
        &paths[2],
        "--annotator",
        annotator,
    ]
}

fn demo_paths() -> [String; 3] {
    let dir = demo_dir();
    ["taxonomy.json", "scores.jsonl", "dataset.jsonl"].map(|f| dir.join(f).display().to_string())
}

/// Drives an interactive-terminal `tune` process through its pipes.
struct Session {
    child: Child,
    stdin: std::process::ChildStdin,
    stdout: BufReader<std::process::ChildStdout>,
    claim: Option<String>,
}

impl Session {
    fn spawn(args: &[&str]) -> Session {
        let mut child = claimsect()
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn claimsect");
        let stdin = child.stdin.take().unwrap();
        let stdout = BufReader::new(child.stdout.take().unwrap());
        Session {
            child,
            stdin,
            stdout,
            claim: None,
        }
    }

    /// Next (claim, document) the process asks about, or None once it stops
    /// asking.
    fn next_item(&mut self) -> Option<(String, String)> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.stdout.read_line(&mut line).ok()? == 0 {
                return None;
            }
            if let Some(i) = line.find("== claim ") {
                let rest = &line[i + "== claim ".len()..];
                self.claim = Some(rest.split(':').next().unwrap().to_string());
            }
            if let Some(i) = line.find(" score=") {
                let doc = line[..i].split_whitespace().last().unwrap().to_string();
                return Some((self.claim.clone().expect("claim header first"), doc));
            }
        }
    }

    fn send(&mut self, answer: &str) {
        writeln!(self.stdin, "{answer}").unwrap();
        self.stdin.flush().unwrap();
    }
}

fn gold_answer(
    taxonomy: &Taxonomy,
    docs: &HashMap<String, Document>,
    claim: &str,
    doc: &str,
) -> bool {
    let claim = taxonomy.claim(claim).unwrap();
    noiseless_answer(
        docs[doc].gold_classes.as_ref().unwrap(),
        claim,
        taxonomy.task_kind,
    )
}

fn read_reports(dir: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(dir.join(REPORTS_FILE)).map_err(|e| format!("{}: {e}", dir.display()))
}

fn replay_crash_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = demo_paths();
    let (taxonomy, docs) = demo_inputs();
    let path = |name: &str| tmp.path().join(name).display().to_string();
    let (full, again, killed) = (path("full"), path("again"), path("killed"));

    for dir in [&full, &again] {
        let mut args = tune_args(dir, "simulated", &paths);
        args.extend(["--seed", "7"]);
        let (code, _, err) = run_cli(&args)?;
        ensure(code == 0, || format!("simulated tune exited {code}: {err}"))?;
    }
    ensure(
        read_reports(Path::new(&full))? == read_reports(Path::new(&again))?,
        || "two seeded runs differ".into(),
    )?;

    // Answer a few items interactively, then kill the process without
    // letting it shut down.
    let mut killed_after = 0;
    for round in 0..3 {
        let mut args = vec![
            "tune",
            "--campaign",
            killed.as_str(),
            "--annotator",
            "interactive-terminal",
        ];
        if round == 0 {
            args = tune_args(&killed, "interactive-terminal", &paths);
        }
        let mut session = Session::spawn(&args);
        for _ in 0..6 {
            let Some((claim, doc)) = session.next_item() else {
                break;
            };
            let answer = gold_answer(&taxonomy, &docs, &claim, &doc);
            session.send(if answer { "y" } else { "n" });
            killed_after += 1;
        }
        // The next prompt means the last answer is durable.
        session.next_item();
        session.child.kill().map_err(|e| e.to_string())?;
        session.child.wait().map_err(|e| e.to_string())?;
    }
    // Also tear the last log line, as a crash mid-write would.
    let logs = Path::new(&killed).join("logs");
    let log = std::fs::read_dir(&logs)
        .map_err(|e| e.to_string())?
        .next()
        .ok_or("no annotation log after the interactive runs")?
        .map_err(|e| e.to_string())?
        .path();
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(&log)
        .map_err(|e| e.to_string())?;
    f.write_all(b"{\"doc_id\":\"doc-0")
        .map_err(|e| e.to_string())?;
    let (code, _, err) = run_cli(&[
        "tune",
        "--campaign",
        &killed,
        "--annotator",
        "simulated",
        "--seed",
        "7",
    ])?;
    ensure(code == 0, || format!("resume exited {code}: {err}"))?;
    ensure(
        read_reports(Path::new(&killed))? == read_reports(Path::new(&full))?,
        || "resumed campaign's reports differ from the uninterrupted run".into(),
    )?;
    Ok(format!(
        "3 kills after {killed_after} interactive answers and a torn log line; resumed reports byte-identical"
    ))
}

fn cli_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = demo_paths();
    let (taxonomy, docs) = demo_inputs();
    let campaign = tmp.path().join("interactive").display().to_string();
    let reference = tmp.path().join("reference").display().to_string();
    let out = |name: &str| tmp.path().join(name).display().to_string();

    let (code, stdout, _) = run_cli(&["--help"])?;
    ensure(
        code == 0 && stdout.contains("scores.jsonl") && stdout.contains("EXIT CODES"),
        || "--help does not document the file formats".into(),
    )?;
    let (code, _, _) = run_cli(&["tune", "--no-such-flag"])?;
    ensure(code == 64, || {
        format!("unknown flag exited {code}, expected 64")
    })?;
    let (code, _, _) = run_cli(&[
        "validate",
        "--taxonomy",
        &paths[0],
        "--scores",
        &paths[1],
        "--dataset",
        &paths[2],
    ])?;
    ensure(code == 0, || format!("validate exited {code}"))?;

    // Interactive run answered from gold labels, with a typo and an undo.
    let mut session = Session::spawn(&tune_args(&campaign, "interactive-terminal", &paths));
    let mut answered = 0;
    let mut undone = false;
    while let Some((claim, doc)) = session.next_item() {
        let answer = gold_answer(&taxonomy, &docs, &claim, &doc);
        if answered == 2 && !undone {
            session.send("maybe");
            session.send(if answer { "n" } else { "y" });
            // Take the wrong answer back; the same item comes again.
            session
                .next_item()
                .ok_or("process ended after wrong answer")?;
            session.send("u");
            undone = true;
            continue;
        }
        session.send(if answer { "y" } else { "n" });
        answered += 1;
    }
    drop(session.stdin);
    let status = session.child.wait().map_err(|e| e.to_string())?;
    ensure(status.success(), || {
        format!("interactive tune exited {status}")
    })?;

    let mut args = tune_args(&reference, "simulated", &paths);
    args.extend(["--seed", "1"]);
    let (code, _, err) = run_cli(&args)?;
    ensure(code == 0, || format!("simulated tune exited {code}: {err}"))?;
    ensure(
        read_reports(Path::new(&campaign))? == read_reports(Path::new(&reference))?,
        || "interactive reports differ from the noiseless simulated run".into(),
    )?;

    let preds = out("preds.jsonl");
    let zero = out("zero.jsonl");
    let (code, _, err) = run_cli(&[
        "classify",
        "--campaign",
        &campaign,
        "--negation-filter",
        "--out",
        &preds,
    ])?;
    ensure(code == 0, || format!("classify exited {code}: {err}"))?;
    let (code, _, err) = run_cli(&[
        "classify",
        "--taxonomy",
        &paths[0],
        "--scores",
        &paths[1],
        "--zero-shot",
        "--out",
        &zero,
    ])?;
    ensure(code == 0, || {
        format!("zero-shot classify exited {code}: {err}")
    })?;
    let (code, _, _) = run_cli(&["classify", "--taxonomy", &paths[0], "--scores", &paths[1]])?;
    ensure(code == 1, || {
        format!("classify without thresholds exited {code}, expected 1")
    })?;
    let (code, stdout, err) = run_cli(&[
        "eval",
        "--taxonomy",
        &paths[0],
        "--dataset",
        &paths[2],
        "--predictions",
        &preds,
        "--baseline",
        &zero,
        "--split",
        "test",
    ])?;
    ensure(code == 0, || format!("eval exited {code}: {err}"))?;
    let f1_line = stdout
        .lines()
        .find(|l| l.starts_with("weighted avg"))
        .ok_or("no weighted average in eval output")?
        .to_string();
    Ok(format!(
        "{answered} interactive answers (plus a typo and an undo) match the simulated run; classify/eval ok: {}",
        f1_line.split_whitespace().collect::<Vec<_>>().join(" ")
    ))
}
