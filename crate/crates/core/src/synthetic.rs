//! Seeded synthetic data for experiments and tests.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scores::{Document, ScoreKind, ScoreMatrix, ScoredDoc};
use crate::taxonomy::{
    negated_column_id, ClaimDef, ClassMode, ClassRef, ClassRule, Polarity, TaskKind, Taxonomy,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

/// `n` documents with scores uniform on `[0, 1]`.
pub fn uniform_column(n: usize, rng: &mut impl Rng) -> Vec<ScoredDoc> {
    (0..n)
        .map(|i| ScoredDoc::new(doc_id(i), rng.random::<f64>()))
        .collect()
}

/// `n` documents whose scores avoid `(root - gap, root + gap)`: half fall
/// below the gap, half above. Sessions on such columns run out of
/// informative documents before the posterior narrows.
pub fn gapped_column(n: usize, root: f64, gap: f64, rng: &mut impl Rng) -> Vec<ScoredDoc> {
    let below = (root - gap).max(0.0);
    let above = (root + gap).min(1.0);
    (0..n)
        .map(|i| {
            let s = if i % 2 == 0 {
                rng.random::<f64>() * below
            } else {
                above + rng.random::<f64>() * (1.0 - above)
            };
            ScoredDoc::new(doc_id(i), s)
        })
        .collect()
}

/// `n` documents mostly scoring below `root - gap`; each lands in
/// `[root + gap, 1]` instead with probability `above`. Few documents lie near
/// the threshold, so which of them a sample contains moves its estimate.
pub fn sparse_column(
    n: usize,
    root: f64,
    gap: f64,
    above: f64,
    rng: &mut impl Rng,
) -> Vec<ScoredDoc> {
    let below = (root - gap).max(0.0);
    let high = (root + gap).min(1.0);
    (0..n)
        .map(|i| {
            let s = if rng.random::<f64>() < above {
                high + rng.random::<f64>() * (1.0 - high)
            } else {
                rng.random::<f64>() * below
            };
            ScoredDoc::new(doc_id(i), s)
        })
        .collect()
}

/// Clip a score column onto a subset of documents, keeping the order.
pub fn restrict(column: &[ScoredDoc], keep: &BTreeSet<String>) -> Vec<ScoredDoc> {
    column
        .iter()
        .filter(|d| keep.contains(&d.doc_id))
        .cloned()
        .collect()
}

/// A multi-label problem where every claim has a negated column that is
/// informative: false positives of a claim tend to score higher on its
/// negation than true positives do.
pub struct NegationProblem {
    pub taxonomy: Taxonomy,
    pub scores: ScoreMatrix,
    pub documents: Vec<Document>,
}

pub fn negation_problem(n_docs: usize, n_claims: usize, rng: &mut impl Rng) -> NegationProblem {
    let claims: Vec<ClaimDef> = (0..n_claims)
        .map(|c| ClaimDef {
            claim_id: format!("c{c}"),
            text: format!("claim {c}"),
            negated_text: Some(format!("not claim {c}")),
            classes: vec![ClassRef {
                class_id: format!("k{c}"),
                polarity: Polarity::Supports,
            }],
        })
        .collect();
    let classes = (0..n_claims)
        .map(|c| ClassRule {
            class_id: format!("k{c}"),
            label: format!("class {c}"),
            mode: ClassMode::AnyOf,
            member_claims: vec![format!("c{c}")],
            absence_claims: Vec::new(),
        })
        .collect();
    let taxonomy = Taxonomy {
        taxonomy_id: "negation-synthetic".into(),
        task_kind: TaskKind::MultiLabel,
        claims,
        classes,
    };

    let mut column_ids = Vec::new();
    for c in 0..n_claims {
        column_ids.push(format!("c{c}"));
        column_ids.push(negated_column_id(&format!("c{c}")));
    }
    let mut values = Vec::with_capacity(n_docs * column_ids.len());
    let mut documents = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut gold = BTreeSet::new();
        for c in 0..n_claims {
            let present = rng.random::<f64>() < 0.3;
            let (s, neg) = if present {
                (0.55 + 0.45 * rng.random::<f64>(), 0.4 * rng.random::<f64>())
            } else if rng.random::<f64>() < 0.3 {
                // Confusable negative: high on the claim, higher on its negation.
                let s = 0.55 + 0.4 * rng.random::<f64>();
                (s, (s + 0.05 + 0.3 * rng.random::<f64>()).min(1.0))
            } else {
                (0.5 * rng.random::<f64>(), rng.random::<f64>())
            };
            if present {
                gold.insert(format!("k{c}"));
            }
            values.push(s);
            values.push(neg);
        }
        documents.push(Document {
            doc_id: doc_id(d),
            text: format!("synthetic document {d}"),
            gold_classes: Some(gold),
            split: None,
        });
    }
    let scores = ScoreMatrix::new(
        documents.iter().map(|d| d.doc_id.clone()).collect(),
        column_ids,
        values,
        ScoreKind::Entailment,
    )
    .expect("synthetic scores are in range");
    NegationProblem {
        taxonomy,
        scores,
        documents,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scores whose labels follow `sigmoid(logit / t0)`, with logits uniform on
/// `[-spread, spread]` so both labels are equally likely.
pub fn temperature_samples(n: usize, t0: f64, spread: f64, rng: &mut impl Rng) -> Vec<(f64, bool)> {
    (0..n)
        .map(|_| {
            let z = spread * (2.0 * rng.random::<f64>() - 1.0);
            let label = rng.random::<f64>() < sigmoid(z / t0);
            (sigmoid(z), label)
        })
        .collect()
}
