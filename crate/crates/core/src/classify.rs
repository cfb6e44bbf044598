//! Turning scores into claim detections and class predictions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::ReportSet;
use crate::jsonl;
use crate::pba::ThresholdReport;
use crate::scores::{ScoreMatrix, ScoreRange};
use crate::taxonomy::{negated_column_id, ClaimDef, ClassMode, TaskKind, Taxonomy};

/// Lower clamp for thresholds in [`normalize_score`]; the upper clamp is
/// `1 - THRESHOLD_EPS`.
pub const THRESHOLD_EPS: f64 = 1e-6;

/// The single threshold used by the zero-shot baseline.
pub const ZERO_SHOT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("no threshold for claim {0:?}")]
    MissingThreshold(String),
    #[error("threshold {threshold} for claim {claim_id:?} is outside [{lo}, {hi}]")]
    ThresholdOutOfRange {
        claim_id: String,
        threshold: f64,
        lo: f64,
        hi: f64,
    },
    #[error("score matrix has no column {0:?}")]
    MissingColumn(String),
    #[error("taxonomy is {actual:?}, expected {expected}")]
    WrongTaskKind {
        expected: &'static str,
        actual: TaskKind,
    },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("invalid thresholds file: {0}")]
    InvalidThresholds(String),
}

/// How a score is compared against its threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// Detected iff `score > threshold`.
    #[default]
    Strict,
    /// Detected iff `score >= threshold`.
    AtLeast,
}

impl Comparator {
    pub fn passes(self, score: f64, threshold: f64) -> bool {
        match self {
            Comparator::Strict => score > threshold,
            Comparator::AtLeast => score >= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectOptions {
    pub comparator: Comparator,
    /// Also require the claim to outscore its negation, where one exists.
    pub negation_filter: bool,
}

/// Per-claim decision thresholds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(pub BTreeMap<String, f64>);

impl ThresholdSet {
    /// The same threshold for every claim of the taxonomy.
    pub fn uniform(taxonomy: &Taxonomy, threshold: f64) -> Self {
        ThresholdSet(
            taxonomy
                .claim_ids()
                .map(|id| (id.to_string(), threshold))
                .collect(),
        )
    }

    pub fn from_reports(reports: &[ThresholdReport]) -> Self {
        ThresholdSet(
            reports
                .iter()
                .map(|r| (r.claim_id.clone(), r.threshold))
                .collect(),
        )
    }

    /// Accepts a report set (`reports.json`) or a plain `{claim_id: threshold}`
    /// object.
    pub fn parse(source: &[u8]) -> Result<Self, ClassifyError> {
        if let Ok(set) = ReportSet::parse(source) {
            return Ok(Self::from_reports(&set.reports));
        }
        serde_json::from_slice::<BTreeMap<String, f64>>(source)
            .map(ThresholdSet)
            .map_err(|e| ClassifyError::InvalidThresholds(e.to_string()))
    }

    pub fn get(&self, claim_id: &str) -> Option<f64> {
        self.0.get(claim_id).copied()
    }

    pub fn insert(&mut self, claim_id: impl Into<String>, threshold: f64) {
        self.0.insert(claim_id.into(), threshold);
    }

    /// Every taxonomy claim has a threshold inside the score range.
    pub fn check(&self, taxonomy: &Taxonomy, range: ScoreRange) -> Result<(), ClassifyError> {
        for id in taxonomy.claim_ids() {
            let t = self
                .get(id)
                .ok_or_else(|| ClassifyError::MissingThreshold(id.to_string()))?;
            if !(t.is_finite() && range.contains(t)) {
                return Err(ClassifyError::ThresholdOutOfRange {
                    claim_id: id.to_string(),
                    threshold: t,
                    lo: range.lo,
                    hi: range.hi,
                });
            }
        }
        Ok(())
    }
}

/// Piecewise-linear rescaling that sends the threshold to 0.5:
/// `x <= t` maps to `0.5 x / t`, `x > t` to `0.5 + 0.5 (x - t) / (1 - t)`.
/// `t` is clamped to `[1e-6, 1 - 1e-6]` and `x` to `[0, 1]`.
pub fn normalize_score(x: f64, t: f64) -> f64 {
    let t = t.clamp(THRESHOLD_EPS, 1.0 - THRESHOLD_EPS);
    let x = x.clamp(0.0, 1.0);
    if x <= t {
        0.5 * x / t
    } else {
        0.5 + 0.5 * (x - t) / (1.0 - t)
    }
}

/// [`normalize_score`] for scores on an arbitrary range: score and threshold
/// are first mapped affinely onto `[0, 1]`.
pub fn normalize_in_range(x: f64, t: f64, range: ScoreRange) -> f64 {
    let unit = |v: f64| (v - range.lo) / range.width();
    normalize_score(unit(x), unit(t))
}

fn threshold_for(thresholds: &ThresholdSet, claim_id: &str) -> Result<f64, ClassifyError> {
    thresholds
        .get(claim_id)
        .ok_or_else(|| ClassifyError::MissingThreshold(claim_id.to_string()))
}

fn score(matrix: &ScoreMatrix, doc_id: &str, column: &str) -> Result<f64, ClassifyError> {
    if !matrix.has_claim(column) {
        return Err(ClassifyError::MissingColumn(column.to_string()));
    }
    matrix
        .get(doc_id, column)
        .ok_or_else(|| ClassifyError::UnknownDocument(doc_id.to_string()))
}

fn detect_one(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    claim: &ClaimDef,
    doc_id: &str,
    opts: DetectOptions,
) -> Result<bool, ClassifyError> {
    let t = threshold_for(thresholds, &claim.claim_id)?;
    let s = score(matrix, doc_id, &claim.claim_id)?;
    if !opts.comparator.passes(s, t) {
        return Ok(false);
    }
    if opts.negation_filter && claim.negated_text.is_some() {
        let negated = score(matrix, doc_id, &negated_column_id(&claim.claim_id))?;
        return Ok(s > negated);
    }
    Ok(true)
}

fn precheck(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    claims: &[&ClaimDef],
    opts: DetectOptions,
) -> Result<(), ClassifyError> {
    for claim in claims {
        threshold_for(thresholds, &claim.claim_id)?;
        if !matrix.has_claim(&claim.claim_id) {
            return Err(ClassifyError::MissingColumn(claim.claim_id.clone()));
        }
        if opts.negation_filter && claim.negated_text.is_some() {
            let neg = negated_column_id(&claim.claim_id);
            if !matrix.has_claim(&neg) {
                return Err(ClassifyError::MissingColumn(neg));
            }
        }
    }
    Ok(())
}

/// Claims detected in one document, in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocClaims {
    pub doc_id: String,
    pub claims: Vec<String>,
}

pub fn detect_claims(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    taxonomy: &Taxonomy,
    opts: DetectOptions,
) -> Result<Vec<DocClaims>, ClassifyError> {
    let claims: Vec<&ClaimDef> = taxonomy.claims.iter().collect();
    precheck(matrix, thresholds, &claims, opts)?;
    matrix
        .doc_ids()
        .iter()
        .map(|doc_id| {
            let mut detected = Vec::new();
            for claim in &claims {
                if detect_one(matrix, thresholds, claim, doc_id, opts)? {
                    detected.push(claim.claim_id.clone());
                }
            }
            Ok(DocClaims {
                doc_id: doc_id.clone(),
                claims: detected,
            })
        })
        .collect()
}

/// Classes assigned to one document, in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocClasses {
    pub doc_id: String,
    pub classes: Vec<String>,
}

/// Apply any-of / all-of membership, then the absence veto.
pub fn classify_multilabel(labeling: &[DocClaims], taxonomy: &Taxonomy) -> Vec<DocClasses> {
    labeling
        .iter()
        .map(|doc| {
            let detected: BTreeSet<&str> = doc.claims.iter().map(String::as_str).collect();
            let classes = taxonomy
                .classes
                .iter()
                .filter(|class| {
                    let mut members = class
                        .member_claims
                        .iter()
                        .map(|c| detected.contains(c.as_str()));
                    let matched = match class.mode {
                        ClassMode::AnyOf => members.any(|hit| hit),
                        ClassMode::AllOf => members.all(|hit| hit),
                    };
                    let vetoed = class
                        .absence_claims
                        .iter()
                        .any(|c| detected.contains(c.as_str()));
                    matched && !vetoed
                })
                .map(|class| class.class_id.clone())
                .collect();
            DocClasses {
                doc_id: doc.doc_id.clone(),
                classes,
            }
        })
        .collect()
}

fn mean_normalized(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    doc_id: &str,
    claims: &[&str],
) -> Result<f64, ClassifyError> {
    let range = matrix.range();
    let mut total = 0.0;
    for claim_id in claims {
        let t = threshold_for(thresholds, claim_id)?;
        total += normalize_in_range(score(matrix, doc_id, claim_id)?, t, range);
    }
    Ok(total / claims.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicPrediction {
    pub doc_id: String,
    pub topic: String,
}

/// Pick, per document, the class whose claims have the highest mean
/// normalized score. Ties go to the smallest class id.
pub fn classify_topic(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    taxonomy: &Taxonomy,
) -> Result<Vec<TopicPrediction>, ClassifyError> {
    if taxonomy.task_kind == TaskKind::MultiLabel {
        return Err(ClassifyError::WrongTaskKind {
            expected: "multi_class_topic or stance",
            actual: taxonomy.task_kind,
        });
    }
    let claims: Vec<&ClaimDef> = taxonomy.claims.iter().collect();
    precheck(matrix, thresholds, &claims, DetectOptions::default())?;
    matrix
        .doc_ids()
        .iter()
        .map(|doc_id| {
            let mut best: Option<(f64, &str)> = None;
            for class in &taxonomy.classes {
                let members: Vec<&str> = class.member_claims.iter().map(String::as_str).collect();
                let mean = mean_normalized(matrix, thresholds, doc_id, &members)?;
                let better = match best {
                    None => true,
                    Some((m, id)) => mean > m || (mean == m && class.class_id.as_str() < id),
                };
                if better {
                    best = Some((mean, &class.class_id));
                }
            }
            let (_, topic) = best.expect("taxonomies declare at least one class");
            Ok(TopicPrediction {
                doc_id: doc_id.clone(),
                topic: topic.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Favor,
    Against,
    Neutral,
}

impl Stance {
    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Favor => "favor",
            Stance::Against => "against",
            Stance::Neutral => "neutral",
        }
    }

    pub const ALL: [Stance; 3] = [Stance::Favor, Stance::Against, Stance::Neutral];
}

/// Gold-label spelling of a stance on a topic, e.g. `abortion:against`.
pub fn stance_gold_label(topic: &str, stance: Stance) -> String {
    format!("{topic}:{}", stance.as_str())
}

/// Stance of one document toward `topic`.
///
/// The side with more detected claims wins; with no detections the stance is
/// neutral. An equal nonzero count is settled by the mean normalized score of
/// each side's claims, and an exact tie there is neutral.
pub fn classify_stance(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    taxonomy: &Taxonomy,
    topic: &str,
    doc_id: &str,
    opts: DetectOptions,
) -> Result<Stance, ClassifyError> {
    if taxonomy.task_kind != TaskKind::Stance {
        return Err(ClassifyError::WrongTaskKind {
            expected: "stance",
            actual: taxonomy.task_kind,
        });
    }
    let partition = taxonomy
        .stance_partition(topic)
        .ok_or_else(|| ClassifyError::UnknownClass(topic.to_string()))?;
    let count = |ids: &[&str]| -> Result<usize, ClassifyError> {
        let mut n = 0;
        for id in ids {
            let claim = taxonomy.claim(id).expect("partition claims exist");
            n += usize::from(detect_one(matrix, thresholds, claim, doc_id, opts)?);
        }
        Ok(n)
    };
    let n_favor = count(&partition.favor)?;
    let n_against = count(&partition.against)?;
    Ok(match n_favor.cmp(&n_against) {
        _ if n_favor == 0 && n_against == 0 => Stance::Neutral,
        std::cmp::Ordering::Greater => Stance::Favor,
        std::cmp::Ordering::Less => Stance::Against,
        std::cmp::Ordering::Equal => {
            let favor = mean_normalized(matrix, thresholds, doc_id, &partition.favor)?;
            let against = mean_normalized(matrix, thresholds, doc_id, &partition.against)?;
            if favor > against {
                Stance::Favor
            } else if against > favor {
                Stance::Against
            } else {
                Stance::Neutral
            }
        }
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionRecord {
    Labels {
        doc_id: String,
        claims: Vec<String>,
        classes: Vec<String>,
    },
    Topic {
        doc_id: String,
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stance: Option<Stance>,
    },
}

impl PredictionRecord {
    pub fn doc_id(&self) -> &str {
        match self {
            PredictionRecord::Labels { doc_id, .. } | PredictionRecord::Topic { doc_id, .. } => {
                doc_id
            }
        }
    }
}

/// Full classification according to the taxonomy's task kind. Stance
/// taxonomies first pick a topic, then the stance toward it.
pub fn classify(
    matrix: &ScoreMatrix,
    thresholds: &ThresholdSet,
    taxonomy: &Taxonomy,
    opts: DetectOptions,
) -> Result<Vec<PredictionRecord>, ClassifyError> {
    match taxonomy.task_kind {
        TaskKind::MultiLabel => {
            let labeling = detect_claims(matrix, thresholds, taxonomy, opts)?;
            let classes = classify_multilabel(&labeling, taxonomy);
            Ok(labeling
                .into_iter()
                .zip(classes)
                .map(|(l, c)| PredictionRecord::Labels {
                    doc_id: l.doc_id,
                    claims: l.claims,
                    classes: c.classes,
                })
                .collect())
        }
        TaskKind::MultiClassTopic => Ok(classify_topic(matrix, thresholds, taxonomy)?
            .into_iter()
            .map(|p| PredictionRecord::Topic {
                doc_id: p.doc_id,
                topic: p.topic,
                stance: None,
            })
            .collect()),
        TaskKind::Stance => {
            let claims: Vec<&ClaimDef> = taxonomy.claims.iter().collect();
            precheck(matrix, thresholds, &claims, opts)?;
            classify_topic(matrix, thresholds, taxonomy)?
                .into_iter()
                .map(|p| {
                    let stance =
                        classify_stance(matrix, thresholds, taxonomy, &p.topic, &p.doc_id, opts)?;
                    Ok(PredictionRecord::Topic {
                        doc_id: p.doc_id,
                        topic: p.topic,
                        stance: Some(stance),
                    })
                })
                .collect()
        }
    }
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    records.iter().map(jsonl::to_line).collect()
}

pub fn parse_predictions(source: &str) -> Result<Vec<PredictionRecord>, (usize, String)> {
    jsonl::parse_lines(source)
        .map(|rows| rows.into_iter().map(|(_, r)| r).collect())
        .map_err(|(line, e)| (line, e.to_string()))
}
