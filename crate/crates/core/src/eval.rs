//! Metrics, baselines and experiment harnesses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{noiseless_answer, simulate_answer};
use crate::classify::{PredictionRecord, Stance};
use crate::pba::{
    run_session, BisectionConfig, OracleError, PbaError, Query, SessionError, SessionStatus,
    ThresholdReport,
};
use crate::scores::{Document, ScoreMatrix, ScoreRange, ScoredDoc};
use crate::synthetic;
use crate::taxonomy::{TaskKind, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("class sets differ: only in a {only_a:?}, only in b {only_b:?}")]
    MismatchedClasses {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("need {needed} samples per label, have {positives} positive and {negatives} negative")]
    InsufficientSamples {
        needed: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("no answer for document {doc_id:?} on claim {claim_id:?}")]
    MissingAnswer { claim_id: String, doc_id: String },
    #[error(transparent)]
    Engine(#[from] PbaError),
}

// ---------------------------------------------------------------------------
// Weighted F1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    /// Averages weighted by gold support.
    pub weighted: Averages,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class precision/recall/F1 over label sets, and their average weighted
/// by gold support. A class with no gold and no predicted occurrence gets
/// precision and recall 0.
pub fn weighted_f1(
    predicted: &[BTreeSet<String>],
    gold: &[BTreeSet<String>],
    classes: &[String],
) -> Result<MetricReport, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::Invalid(format!(
            "{} predictions for {} gold rows",
            predicted.len(),
            gold.len()
        )));
    }
    let mut rows = Vec::with_capacity(classes.len());
    for class in classes {
        let (mut tp, mut support, mut pred) = (0, 0, 0);
        for (p, g) in predicted.iter().zip(gold) {
            let (in_p, in_g) = (p.contains(class), g.contains(class));
            tp += usize::from(in_p && in_g);
            support += usize::from(in_g);
            pred += usize::from(in_p);
        }
        let precision = ratio(tp, pred);
        let recall = ratio(tp, support);
        rows.push(ClassMetrics {
            class_id: class.clone(),
            precision,
            recall,
            f1: harmonic(precision, recall),
            support,
            predicted: pred,
        });
    }
    let total: usize = rows.iter().map(|r| r.support).sum();
    let avg = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            rows.iter().map(|r| f(r) * r.support as f64).sum::<f64>() / total as f64
        }
    };
    let weighted = Averages {
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
    };
    Ok(MetricReport {
        classes: rows,
        weighted,
        annotations: None,
    })
}

/// Metrics of a predictions file against dataset gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Classes (multi-label) or topics.
    pub classes: MetricReport,
    /// Favor/against/neutral, for stance taxonomies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<MetricReport>,
    pub documents: usize,
}

/// Split a stance gold label `topic:stance`.
pub fn parse_stance_label(label: &str) -> Option<(&str, Stance)> {
    let (topic, side) = label.rsplit_once(':')?;
    let stance = Stance::ALL.into_iter().find(|s| s.as_str() == side)?;
    Some((topic, stance))
}

/// Score predictions against the gold labels of `documents`. Only documents
/// that have gold labels and a prediction are counted.
pub fn evaluate(
    records: &[PredictionRecord],
    documents: &[Document],
    taxonomy: &Taxonomy,
) -> Result<Evaluation, EvalError> {
    let by_doc: HashMap<&str, &PredictionRecord> =
        records.iter().map(|r| (r.doc_id(), r)).collect();
    let class_ids: Vec<String> = taxonomy.class_ids().map(str::to_string).collect();
    let mut pred_classes = Vec::new();
    let mut gold_classes = Vec::new();
    let mut pred_stance = Vec::new();
    let mut gold_stance = Vec::new();
    for doc in documents {
        let (Some(gold), Some(rec)) = (&doc.gold_classes, by_doc.get(doc.doc_id.as_str())) else {
            continue;
        };
        match (taxonomy.task_kind, rec) {
            (TaskKind::MultiLabel, PredictionRecord::Labels { classes, .. }) => {
                pred_classes.push(classes.iter().cloned().collect());
                gold_classes.push(gold.clone());
            }
            (TaskKind::MultiClassTopic, PredictionRecord::Topic { topic, .. }) => {
                pred_classes.push(BTreeSet::from([topic.clone()]));
                gold_classes.push(gold.clone());
            }
            (TaskKind::Stance, PredictionRecord::Topic { topic, stance, .. }) => {
                let parsed: Vec<(&str, Stance)> =
                    gold.iter().filter_map(|l| parse_stance_label(l)).collect();
                pred_classes.push(BTreeSet::from([topic.clone()]));
                gold_classes.push(parsed.iter().map(|(t, _)| t.to_string()).collect());
                let side = stance.unwrap_or(Stance::Neutral);
                pred_stance.push(BTreeSet::from([side.as_str().to_string()]));
                gold_stance.push(parsed.iter().map(|(_, s)| s.as_str().to_string()).collect());
            }
            _ => {
                return Err(EvalError::Invalid(format!(
                    "prediction for {:?} does not match a {:?} taxonomy",
                    doc.doc_id, taxonomy.task_kind
                )))
            }
        }
    }
    let stance = if taxonomy.task_kind == TaskKind::Stance {
        let sides: Vec<String> = Stance::ALL.iter().map(|s| s.as_str().to_string()).collect();
        Some(weighted_f1(&pred_stance, &gold_stance, &sides)?)
    } else {
        None
    };
    Ok(Evaluation {
        classes: weighted_f1(&pred_classes, &gold_classes, &class_ids)?,
        stance,
        documents: pred_classes.len(),
    })
}

// ---------------------------------------------------------------------------
// Run comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub class_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub classes: Vec<DeltaRow>,
    pub weighted: DeltaRow,
}

/// `b - a` for every class and the weighted average.
pub fn compare_runs(a: &MetricReport, b: &MetricReport) -> Result<DeltaTable, EvalError> {
    let ids = |r: &MetricReport| -> BTreeSet<String> {
        r.classes.iter().map(|c| c.class_id.clone()).collect()
    };
    let (ia, ib) = (ids(a), ids(b));
    if ia != ib {
        return Err(EvalError::MismatchedClasses {
            only_a: ia.difference(&ib).cloned().collect(),
            only_b: ib.difference(&ia).cloned().collect(),
        });
    }
    let classes = a
        .classes
        .iter()
        .map(|ca| {
            let cb = b
                .classes
                .iter()
                .find(|c| c.class_id == ca.class_id)
                .expect("same class sets");
            DeltaRow {
                class_id: ca.class_id.clone(),
                precision: cb.precision - ca.precision,
                recall: cb.recall - ca.recall,
                f1: cb.f1 - ca.f1,
            }
        })
        .collect();
    Ok(DeltaTable {
        classes,
        weighted: DeltaRow {
            class_id: "weighted".into(),
            precision: b.weighted.precision - a.weighted.precision,
            recall: b.weighted.recall - a.weighted.recall,
            f1: b.weighted.f1 - a.weighted.f1,
        },
    })
}

/// Signed two-decimal rendering, e.g. `+0.02`; zero renders as `0.00`.
pub fn format_delta(x: f64) -> String {
    let s = format!("{x:+.2}");
    if s == "+0.00" || s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

// ---------------------------------------------------------------------------
// Ground-truth threshold

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub threshold: f64,
    pub accuracy: f64,
}

/// The threshold maximizing the accuracy of `entails iff score > threshold`
/// over labeled pairs. Candidates are midpoints between consecutive distinct
/// scores plus the range endpoints; ties go to the smallest candidate.
pub fn ground_truth_threshold(
    pairs: &[(f64, bool)],
    range: ScoreRange,
) -> Result<GroundTruth, EvalError> {
    let positives = pairs.iter().filter(|(_, e)| *e).count();
    if positives == 0 || positives == pairs.len() {
        return Err(EvalError::Degenerate(
            "need at least one entailing and one non-entailing pair".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut candidates = vec![range.lo];
    for w in sorted.windows(2) {
        if w[0].0 < w[1].0 {
            candidates.push(0.5 * (w[0].0 + w[1].0));
        }
    }
    candidates.push(range.hi);
    candidates.sort_by(f64::total_cmp);

    // correct(t) = #negatives with s <= t + #positives with s > t
    let mut idx = 0;
    let mut neg_at_or_below = 0usize;
    let mut pos_at_or_below = 0usize;
    let mut best: Option<(usize, f64)> = None;
    for &t in &candidates {
        while idx < sorted.len() && sorted[idx].0 <= t {
            if sorted[idx].1 {
                pos_at_or_below += 1;
            } else {
                neg_at_or_below += 1;
            }
            idx += 1;
        }
        let correct = neg_at_or_below + (positives - pos_at_or_below);
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, t));
        }
    }
    let (correct, threshold) = best.expect("at least two candidates");
    Ok(GroundTruth {
        threshold,
        accuracy: correct as f64 / pairs.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Tuning problems shared by the experiments

/// One claim to tune against known answers.
#[derive(Debug, Clone)]
pub struct TuningProblem {
    pub claim_id: String,
    pub column: Vec<ScoredDoc>,
    /// Annotator answer for every document of the column.
    pub answers: HashMap<String, bool>,
    /// Reference threshold distances are measured against.
    pub truth: f64,
}

impl TuningProblem {
    /// Build a problem whose reference is the accuracy-maximizing threshold
    /// of its own answers.
    pub fn with_ground_truth(
        claim_id: impl Into<String>,
        column: Vec<ScoredDoc>,
        answers: HashMap<String, bool>,
        range: ScoreRange,
    ) -> Result<Self, EvalError> {
        let claim_id = claim_id.into();
        let pairs = column
            .iter()
            .map(|d| {
                answers
                    .get(&d.doc_id)
                    .map(|a| (d.score, *a))
                    .ok_or_else(|| EvalError::MissingAnswer {
                        claim_id: claim_id.clone(),
                        doc_id: d.doc_id.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let truth = ground_truth_threshold(&pairs, range)?.threshold;
        Ok(TuningProblem {
            claim_id,
            column,
            answers,
            truth,
        })
    }

    fn tune(
        &self,
        column: &[ScoredDoc],
        config: BisectionConfig,
    ) -> Result<(ThresholdReport, Vec<f64>), EvalError> {
        let mut oracle = |q: &Query<'_>| {
            self.answers
                .get(q.doc_id)
                .copied()
                .ok_or_else(|| OracleError(q.doc_id.to_string()))
        };
        match run_session(&self.claim_id, config, column, &mut oracle) {
            Ok(out) => Ok((out.report, out.medians)),
            Err(SessionError::Oracle { source, .. }) => Err(EvalError::MissingAnswer {
                claim_id: self.claim_id.clone(),
                doc_id: source.0,
            }),
            Err(SessionError::Engine(e)) => Err(e.into()),
        }
    }
}

/// Problems built from a labeled dataset, one per taxonomy claim.
///
/// Answers are simulated from gold labels with the given noise. Each
/// problem's reference threshold comes from the noiseless answers. Documents
/// without gold labels or without a score are skipped. Claims whose
/// noiseless answers are all equal have no reference and are returned in the
/// second list.
pub fn dataset_problems(
    taxonomy: &Taxonomy,
    scores: &ScoreMatrix,
    documents: &[Document],
    noise: f64,
    seed: u64,
) -> Result<(Vec<TuningProblem>, Vec<String>), EvalError> {
    let labeled: Vec<&Document> = documents
        .iter()
        .filter(|d| d.gold_classes.is_some())
        .collect();
    let mut problems = Vec::new();
    let mut skipped = Vec::new();
    let keep: BTreeSet<String> = labeled.iter().map(|d| d.doc_id.clone()).collect();
    let by_id: HashMap<&str, &Document> = labeled.iter().map(|d| (d.doc_id.as_str(), *d)).collect();
    for claim in &taxonomy.claims {
        let column = scores
            .column(&claim.claim_id)
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        let column = synthetic::restrict(&column, &keep);
        let mut answers = HashMap::new();
        let mut pairs = Vec::with_capacity(column.len());
        for d in &column {
            let doc = by_id[d.doc_id.as_str()];
            let gold = doc.gold_classes.as_ref().expect("labeled");
            let clean = noiseless_answer(gold, claim, taxonomy.task_kind);
            let answer = simulate_answer(doc, claim, taxonomy.task_kind, noise, seed)
                .map_err(|e| EvalError::Invalid(e.to_string()))?;
            answers.insert(d.doc_id.clone(), answer);
            pairs.push((d.score, clean));
        }
        match ground_truth_threshold(&pairs, scores.range()) {
            Ok(gt) => problems.push(TuningProblem {
                claim_id: claim.claim_id.clone(),
                column,
                answers,
                truth: gt.threshold,
            }),
            Err(EvalError::Degenerate(_)) => skipped.push(claim.claim_id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((problems, skipped))
}

/// `(score, noiseless answer)` for every labeled (document, claim) pair.
pub fn dataset_samples(
    taxonomy: &Taxonomy,
    scores: &ScoreMatrix,
    documents: &[Document],
) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for doc in documents {
        let Some(gold) = &doc.gold_classes else {
            continue;
        };
        for claim in &taxonomy.claims {
            if let Some(s) = scores.get(&doc.doc_id, &claim.claim_id) {
                out.push((s, noiseless_answer(gold, claim, taxonomy.task_kind)));
            }
        }
    }
    out
}

/// A problem whose documents entail iff their score exceeds `root`, each
/// answer flipped with probability `noise`. The reference threshold is `root`.
pub fn threshold_problem(
    claim_id: impl Into<String>,
    column: Vec<ScoredDoc>,
    root: f64,
    noise: f64,
    rng: &mut impl Rng,
) -> TuningProblem {
    let answers = column
        .iter()
        .map(|d| {
            (
                d.doc_id.clone(),
                (d.score > root) ^ rng.random_bool(noise.clamp(0.0, 1.0)),
            )
        })
        .collect();
    TuningProblem {
        claim_id: claim_id.into(),
        column,
        answers,
        truth: root,
    }
}

/// `count` independent threshold problems over `n_docs` uniform scores,
/// problem `i` drawn from seed `seed + i`.
pub fn separable_problems(
    n_docs: usize,
    root: f64,
    count: usize,
    noise: f64,
    seed: u64,
) -> Vec<TuningProblem> {
    (0..count)
        .map(|i| {
            let mut rng = synthetic::rng(seed.wrapping_add(i as u64));
            let column = synthetic::uniform_column(n_docs, &mut rng);
            threshold_problem(format!("s{i:03}"), column, root, noise, &mut rng)
        })
        .collect()
}

/// `count` problems for fold experiments. Even-numbered ones score `n_docs`
/// documents uniformly; odd-numbered ones put few documents above their
/// threshold (see [`synthetic::sparse_column`]). Thresholds are drawn from
/// `[0.3, 0.7]`.
pub fn mixed_fold_problems(
    count: usize,
    n_docs: usize,
    noise: f64,
    seed: u64,
) -> Vec<TuningProblem> {
    (0..count)
        .map(|i| {
            let mut rng = synthetic::rng(seed.wrapping_add(i as u64));
            let root = 0.3 + 0.4 * rng.random::<f64>();
            let column = if i % 2 == 0 {
                synthetic::uniform_column(n_docs, &mut rng)
            } else {
                synthetic::sparse_column(n_docs, root, 0.05, 0.03, &mut rng)
            };
            threshold_problem(format!("c{i:03}"), column, root, noise, &mut rng)
        })
        .collect()
}

fn mean_se(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), var)
}

fn thread_pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

// ---------------------------------------------------------------------------
// p sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub p: f64,
    pub step: usize,
    /// Mean |median - truth| over runs still annotating at this step.
    pub mean_dist: f64,
    pub se: f64,
    pub n_active: usize,
    /// Same, with finished runs contributing their final median.
    pub mean_dist_carried: f64,
    pub se_carried: f64,
    /// Sample variance of the signed error (median - truth), carried forward.
    pub var_error_carried: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub p: f64,
    pub claim_id: String,
    pub annotations: usize,
    pub status: SessionStatus,
    pub threshold: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub rows: Vec<TrajectoryRow>,
    pub runs: Vec<SweepRun>,
}

impl TrajectoryReport {
    pub fn row(&self, p: f64, step: usize) -> Option<&TrajectoryRow> {
        self.rows.iter().find(|r| r.p == p && r.step == step)
    }

    /// `p,step,mean_dist,se,n_active` over steps with at least one active run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,step,mean_dist,se,n_active\n");
        for r in self.rows.iter().filter(|r| r.n_active > 0) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.p, r.step, r.mean_dist, r.se, r.n_active
            );
        }
        out
    }

    /// Same columns, with finished runs carried at their final median;
    /// `n_active` is then the number of runs.
    pub fn to_csv_carried(&self) -> String {
        let mut out = String::from("p,step,mean_dist,se,n_active\n");
        for r in &self.rows {
            let n = self.runs.iter().filter(|x| x.p == r.p).count();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.p, r.step, r.mean_dist_carried, r.se_carried, n
            );
        }
        out
    }
}

/// Tune every problem once per `p` and aggregate the distance between the
/// running median and each problem's reference threshold, step by step up to
/// `max_step`.
pub fn experiment_p_sweep(
    problems: &[TuningProblem],
    p_values: &[f64],
    base: &BisectionConfig,
    max_step: usize,
    jobs: usize,
) -> Result<TrajectoryReport, EvalError> {
    if problems.is_empty() {
        return Ok(TrajectoryReport::default());
    }
    for &p in p_values {
        BisectionConfig { p, ..base.clone() }.validate()?;
    }
    let tasks: Vec<(f64, &TuningProblem)> = p_values
        .iter()
        .flat_map(|&p| problems.iter().map(move |pr| (p, pr)))
        .collect();
    let outcomes: Vec<Result<(ThresholdReport, Vec<f64>), EvalError>> =
        thread_pool(jobs).install(|| {
            tasks
                .par_iter()
                .map(|(p, pr)| {
                    pr.tune(
                        &pr.column,
                        BisectionConfig {
                            p: *p,
                            ..base.clone()
                        },
                    )
                })
                .collect()
        });

    let mut report = TrajectoryReport::default();
    let mut per_p: BTreeMap<usize, Vec<(Vec<f64>, f64)>> = BTreeMap::new();
    for (i, ((p, pr), outcome)) in tasks.iter().zip(outcomes).enumerate() {
        let (rep, medians) = outcome?;
        report.runs.push(SweepRun {
            p: *p,
            claim_id: pr.claim_id.clone(),
            annotations: rep.annotations,
            status: rep.status,
            threshold: rep.threshold,
            truth: pr.truth,
        });
        per_p
            .entry(i / problems.len())
            .or_default()
            .push((medians, pr.truth));
    }
    for (pi, runs) in per_p {
        let p = p_values[pi];
        for step in 0..=max_step {
            let active: Vec<f64> = runs
                .iter()
                .filter_map(|(m, truth)| m.get(step).map(|x| (x - truth).abs()))
                .collect();
            let carried_err: Vec<f64> = runs
                .iter()
                .map(|(m, truth)| m.get(step).unwrap_or(m.last().expect("prior median")) - truth)
                .collect();
            let carried_abs: Vec<f64> = carried_err.iter().map(|e| e.abs()).collect();
            let (mean_dist, se, _) = mean_se(&active);
            let (mean_c, se_c, _) = mean_se(&carried_abs);
            let (_, _, var_err) = mean_se(&carried_err);
            report.rows.push(TrajectoryRow {
                p,
                step,
                mean_dist,
                se,
                n_active: active.len(),
                mean_dist_carried: mean_c,
                se_carried: se_c,
                var_error_carried: var_err,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Fold stability

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldCategory {
    /// Complete on every fold.
    Complete,
    /// Complete on no fold.
    EarlyStop,
    Mixed,
}

impl FoldCategory {
    pub fn label(self) -> &'static str {
        match self {
            FoldCategory::Complete => "Complete",
            FoldCategory::EarlyStop => "Early stop",
            FoldCategory::Mixed => "Mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldClaimResult {
    pub claim_id: String,
    pub thresholds: Vec<f64>,
    pub statuses: Vec<SessionStatus>,
    pub annotations: Vec<usize>,
    /// max - min threshold across folds.
    pub spread: f64,
    pub category: FoldCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub std: f64,
}

impl SpreadStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (avg, _, var) = mean_se(values);
        Some(SpreadStats {
            count: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            avg,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub k: usize,
    pub fold_size: usize,
    pub claims: Vec<FoldClaimResult>,
    pub overall: Option<SpreadStats>,
    pub by_category: BTreeMap<FoldCategory, SpreadStats>,
}

/// Seeded shuffle of `doc_ids` into `k` folds of equal size; the remainder
/// is dropped.
pub fn make_folds(
    doc_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<String>>, EvalError> {
    if k < 2 {
        return Err(EvalError::Invalid(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if doc_ids.len() < k {
        return Err(EvalError::Invalid(format!(
            "{} documents cannot fill {k} folds",
            doc_ids.len()
        )));
    }
    let mut ids = doc_ids.to_vec();
    ids.shuffle(&mut synthetic::rng(seed));
    let size = ids.len() / k;
    Ok(ids
        .chunks(size)
        .take(k)
        .map(|c| c.iter().cloned().collect())
        .collect())
}

/// Tune every claim separately on each fold and report how far the fold
/// thresholds spread.
pub fn experiment_folds(
    doc_ids: &[String],
    problems: &[TuningProblem],
    k: usize,
    seed: u64,
    config: &BisectionConfig,
    jobs: usize,
) -> Result<FoldReport, EvalError> {
    config.validate()?;
    let folds = make_folds(doc_ids, k, seed)?;
    let tasks: Vec<(&TuningProblem, &BTreeSet<String>)> = problems
        .iter()
        .flat_map(|pr| folds.iter().map(move |f| (pr, f)))
        .collect();
    let outcomes: Vec<Result<(ThresholdReport, Vec<f64>), EvalError>> =
        thread_pool(jobs).install(|| {
            tasks
                .par_iter()
                .map(|(pr, fold)| pr.tune(&synthetic::restrict(&pr.column, fold), config.clone()))
                .collect()
        });
    let mut outcomes = outcomes.into_iter();
    let mut claims = Vec::with_capacity(problems.len());
    for pr in problems {
        let mut thresholds = Vec::with_capacity(k);
        let mut statuses = Vec::with_capacity(k);
        let mut annotations = Vec::with_capacity(k);
        for _ in 0..k {
            let (rep, _) = outcomes.next().expect("one outcome per task")?;
            thresholds.push(rep.threshold);
            statuses.push(rep.status);
            annotations.push(rep.annotations);
        }
        let complete = statuses
            .iter()
            .filter(|s| **s == SessionStatus::Complete)
            .count();
        let category = match complete {
            0 => FoldCategory::EarlyStop,
            n if n == k => FoldCategory::Complete,
            _ => FoldCategory::Mixed,
        };
        let max = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
        claims.push(FoldClaimResult {
            claim_id: pr.claim_id.clone(),
            thresholds,
            statuses,
            annotations,
            spread: max - min,
            category,
        });
    }
    let spreads: Vec<f64> = claims.iter().map(|c| c.spread).collect();
    let mut by_category = BTreeMap::new();
    for cat in [
        FoldCategory::Complete,
        FoldCategory::EarlyStop,
        FoldCategory::Mixed,
    ] {
        let values: Vec<f64> = claims
            .iter()
            .filter(|c| c.category == cat)
            .map(|c| c.spread)
            .collect();
        if let Some(stats) = SpreadStats::of(&values) {
            by_category.insert(cat, stats);
        }
    }
    Ok(FoldReport {
        k,
        fold_size: folds[0].len(),
        claims,
        overall: SpreadStats::of(&spreads),
        by_category,
    })
}

impl FoldReport {
    /// Spread summary: one row overall and one per category.
    pub fn render(&self) -> String {
        let mut rows = Vec::new();
        let fmt = |name: &str, s: &SpreadStats| {
            vec![
                name.to_string(),
                s.count.to_string(),
                format!("{:.2}", s.min),
                format!("{:.2}", s.max),
                format!("{:.2}", s.avg),
                format!("{:.2}", s.std),
            ]
        };
        if let Some(s) = &self.overall {
            rows.push(fmt("Overall", s));
        }
        for (cat, s) in &self.by_category {
            rows.push(fmt(cat.label(), s));
        }
        render_table(&["Claims", "n", "Min", "Max", "Avg", "Std"], &rows)
    }
}

// ---------------------------------------------------------------------------
// Temperature scaling

/// Logit clamp used when converting scores to logits.
pub const LOGIT_EPS: f64 = 1e-6;
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;

pub fn logit(x: f64) -> f64 {
    let x = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (x / (1.0 - x)).ln()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Negative log-likelihood of labels under `sigmoid(logit / t)`.
pub fn temperature_nll(logits: &[(f64, bool)], t: f64) -> f64 {
    logits
        .iter()
        .map(|&(z, y)| {
            let u = z / t;
            if y {
                softplus(-u)
            } else {
                softplus(u)
            }
        })
        .sum()
}

pub fn calibrated_score(x: f64, t: f64) -> f64 {
    1.0 / (1.0 + (-logit(x) / t).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    /// The likelihood barely depends on T, or the optimum sits at a bound.
    pub low_confidence: bool,
}

/// Fit a temperature on all samples.
pub fn fit_temperature_samples(samples: &[(f64, bool)]) -> TemperatureFit {
    let logits: Vec<(f64, bool)> = samples.iter().map(|&(x, y)| (logit(x), y)).collect();
    let f = |u: f64| temperature_nll(&logits, u.exp());
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-9 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut u = 0.5 * (a + b);
    // Golden-section assumes unimodality; guard the bounds explicitly.
    for edge in [lo, hi] {
        if f(edge) < f(u) {
            u = edge;
        }
    }
    let nll = f(u);
    let at_bound = (u - lo).abs() < 1e-3 || (hi - u).abs() < 1e-3;
    let spread = [lo, hi, 0.0]
        .iter()
        .map(|&e| f(e))
        .fold(f64::NEG_INFINITY, f64::max)
        - nll;
    let flat = spread < 1e-3 * logits.len().max(1) as f64;
    TemperatureFit {
        temperature: u.exp(),
        nll,
        low_confidence: at_bound || flat,
    }
}

/// Draw `n` positive and `n` negative samples (seeded) and fit a temperature.
pub fn fit_temperature(
    samples: &[(f64, bool)],
    n: usize,
    seed: u64,
) -> Result<TemperatureFit, EvalError> {
    let mut pos: Vec<(f64, bool)> = samples.iter().copied().filter(|s| s.1).collect();
    let mut neg: Vec<(f64, bool)> = samples.iter().copied().filter(|s| !s.1).collect();
    if n == 0 || pos.len() < n || neg.len() < n {
        return Err(EvalError::InsufficientSamples {
            needed: n,
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let mut rng = synthetic::rng(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(n);
    pos.extend_from_slice(&neg[..n]);
    Ok(fit_temperature_samples(&pos))
}

// ---------------------------------------------------------------------------
// Threshold statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub claims: usize,
    pub complete: usize,
    pub early_stop: usize,
    pub capped: usize,
    pub avg_annotations: f64,
    pub avg_ci_width: f64,
    /// [min, max] threshold among complete claims.
    pub complete_range: Option<(f64, f64)>,
    pub early_stop_range: Option<(f64, f64)>,
}

impl ThresholdStats {
    pub fn from_reports(reports: &[ThresholdReport]) -> Self {
        let count = |s| reports.iter().filter(|r| r.status == s).count();
        let range = |s| {
            let v: Vec<f64> = reports
                .iter()
                .filter(|r| r.status == s)
                .map(|r| r.threshold)
                .collect();
            (!v.is_empty()).then(|| {
                (
                    v.iter().copied().fold(f64::INFINITY, f64::min),
                    v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            })
        };
        let n = reports.len().max(1) as f64;
        ThresholdStats {
            claims: reports.len(),
            complete: count(SessionStatus::Complete),
            early_stop: count(SessionStatus::EarlyStop),
            capped: count(SessionStatus::Capped),
            avg_annotations: reports.iter().map(|r| r.annotations as f64).sum::<f64>() / n,
            avg_ci_width: reports.iter().map(|r| r.ci_width).sum::<f64>() / n,
            complete_range: range(SessionStatus::Complete),
            early_stop_range: range(SessionStatus::EarlyStop),
        }
    }

    pub fn render(&self, name: &str) -> String {
        let rng =
            |r: Option<(f64, f64)>| r.map_or("-".to_string(), |(a, b)| format!("[{a:.2}, {b:.2}]"));
        render_table(
            &[
                "Taxonomy",
                "Claims",
                "Complete",
                "Early stop",
                "Capped",
                "Avg nb annots",
                "Avg 95% CI width",
                "Complete range",
                "Early stop range",
            ],
            &[vec![
                name.to_string(),
                self.claims.to_string(),
                self.complete.to_string(),
                self.early_stop.to_string(),
                self.capped.to_string(),
                format!("{:.1}", self.avg_annotations),
                format!("{:.3}", self.avg_ci_width),
                rng(self.complete_range),
                rng(self.early_stop_range),
            ]],
        )
    }
}

/// Per-class and weighted metrics as a table.
pub fn render_metrics(report: &MetricReport) -> String {
    let mut rows: Vec<Vec<String>> = report
        .classes
        .iter()
        .map(|c| {
            vec![
                c.class_id.clone(),
                format!("{:.2}", c.precision),
                format!("{:.2}", c.recall),
                format!("{:.2}", c.f1),
                c.support.to_string(),
            ]
        })
        .collect();
    let support: usize = report.classes.iter().map(|c| c.support).sum();
    rows.push(vec![
        "weighted avg".into(),
        format!("{:.2}", report.weighted.precision),
        format!("{:.2}", report.weighted.recall),
        format!("{:.2}", report.weighted.f1),
        support.to_string(),
    ]);
    render_table(&["Class", "P", "R", "F1", "Support"], &rows)
}

pub fn render_deltas(table: &DeltaTable) -> String {
    let row = |r: &DeltaRow| {
        vec![
            r.class_id.clone(),
            format_delta(r.precision),
            format_delta(r.recall),
            format_delta(r.f1),
        ]
    };
    let mut rows: Vec<Vec<String>> = table.classes.iter().map(row).collect();
    rows.push(row(&table.weighted));
    render_table(&["Class", "dP", "dR", "dF1"], &rows)
}

/// Plain ASCII table with a header rule.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let pad = w - cell.chars().count();
            s.push_str(cell);
            s.push_str(&" ".repeat(pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}
