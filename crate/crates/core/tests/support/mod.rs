//! Random small classification instances and brute-force reference answers.
//! Shared by the property tests here and by the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeSet;

use claimsect::classify::{Stance, ThresholdSet};
use claimsect::scores::{ScoreKind, ScoreMatrix};
use claimsect::taxonomy::{negated_column_id, parse_taxonomy, TaskKind, Taxonomy};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

pub struct Instance {
    pub taxonomy: Taxonomy,
    pub matrix: ScoreMatrix,
    pub thresholds: ThresholdSet,
}

const LATTICE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

// Half the draws land on a coarse lattice so equalities with thresholds and
// between claims actually occur.
fn value(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        *LATTICE.choose(rng).unwrap()
    } else {
        rng.random::<f64>()
    }
}

/// An instance with at most 4 documents, 4 claims and 3 classes.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let kind = *[
        TaskKind::MultiLabel,
        TaskKind::MultiClassTopic,
        TaskKind::Stance,
    ]
    .choose(rng)
    .unwrap();
    let n_docs = rng.random_range(1..=4);
    let n_claims = match kind {
        TaskKind::Stance => rng.random_range(2..=4),
        _ => rng.random_range(1..=4),
    };
    let max_classes = match kind {
        TaskKind::MultiLabel => 3,
        TaskKind::MultiClassTopic => n_claims.min(3),
        TaskKind::Stance => (n_claims / 2).min(3),
    };
    let n_classes = rng.random_range(1..=max_classes);

    // refs[claim] = list of (class index, supports?)
    let mut refs: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n_claims];
    let mut absence: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    let mut modes = Vec::new();
    match kind {
        TaskKind::MultiLabel => {
            for k in 0..n_classes {
                modes.push(if rng.random_bool(0.5) {
                    "any_of"
                } else {
                    "all_of"
                });
                let anchor = rng.random_range(0..n_claims);
                refs[anchor].push((k, true));
            }
            for (c, r) in refs.iter_mut().enumerate() {
                for k in 0..n_classes {
                    if r.iter().any(|&(kk, _)| kk == k) {
                        continue;
                    }
                    match rng.random_range(0..4) {
                        0 => r.push((k, true)),
                        1 => r.push((k, false)),
                        2 if rng.random_bool(0.3) => absence[k].push(c),
                        _ => {}
                    }
                }
            }
        }
        TaskKind::MultiClassTopic => {
            for (c, r) in refs.iter_mut().enumerate() {
                let k = if c < n_classes {
                    c
                } else {
                    rng.random_range(0..n_classes)
                };
                r.push((k, true));
            }
            modes = vec!["any_of"; n_classes];
        }
        TaskKind::Stance => {
            for (c, r) in refs.iter_mut().enumerate() {
                if c < 2 * n_classes {
                    r.push((c / 2, c % 2 == 0));
                } else {
                    r.push((rng.random_range(0..n_classes), rng.random_bool(0.5)));
                }
            }
            modes = vec!["any_of"; n_classes];
        }
    }

    let negated: Vec<bool> = (0..n_claims).map(|_| rng.random_bool(0.5)).collect();
    let claims: Vec<_> = (0..n_claims)
        .map(|c| {
            let mut claim = json!({
                "claim_id": format!("c{c}"),
                "text": format!("claim {c}"),
                "classes": refs[c].iter().map(|&(k, sup)| json!({
                    "class_id": format!("k{k}"),
                    "polarity": if sup { "supports" } else { "opposes" },
                })).collect::<Vec<_>>(),
            });
            if negated[c] {
                claim["negated_text"] = json!(format!("not claim {c}"));
            }
            claim
        })
        .collect();
    let classes: Vec<_> = (0..n_classes)
        .map(|k| {
            json!({
                "class_id": format!("k{k}"),
                "label": format!("class {k}"),
                "mode": modes[k],
                "absence_claims": absence[k].iter().map(|c| format!("c{c}")).collect::<Vec<_>>(),
            })
        })
        .collect();
    let kind_name = match kind {
        TaskKind::MultiLabel => "multi_label",
        TaskKind::MultiClassTopic => "multi_class_topic",
        TaskKind::Stance => "stance",
    };
    let file = json!({
        "taxonomy_id": "random",
        "task_kind": kind_name,
        "claims": claims,
        "classes": classes,
    });
    let taxonomy =
        parse_taxonomy(file.to_string().as_bytes()).expect("generated taxonomy is valid");

    let columns = taxonomy.required_columns();
    let doc_ids: Vec<String> = (0..n_docs).map(|d| format!("d{d}")).collect();
    let values: Vec<f64> = (0..n_docs * columns.len()).map(|_| value(rng)).collect();
    let matrix = ScoreMatrix::new(doc_ids, columns, values, ScoreKind::Entailment).unwrap();
    let mut thresholds = ThresholdSet::default();
    for c in 0..n_claims {
        thresholds.insert(format!("c{c}"), value(rng));
    }
    Instance {
        taxonomy,
        matrix,
        thresholds,
    }
}

fn s(inst: &Instance, doc: &str, column: &str) -> f64 {
    inst.matrix.get(doc, column).unwrap()
}

fn t(inst: &Instance, claim: &str) -> f64 {
    inst.thresholds.get(claim).unwrap()
}

pub fn oracle_detected(inst: &Instance, doc: &str, claim: &str, filter: bool) -> bool {
    let score = s(inst, doc, claim);
    if score <= t(inst, claim) {
        return false;
    }
    let has_negation = inst.taxonomy.claim(claim).unwrap().negated_text.is_some();
    !(filter && has_negation) || score > s(inst, doc, &negated_column_id(claim))
}

/// Detected claim set for every (document, claim) pair.
pub fn oracle_detect(inst: &Instance, filter: bool) -> Vec<BTreeSet<String>> {
    inst.matrix
        .doc_ids()
        .iter()
        .map(|d| {
            inst.taxonomy
                .claim_ids()
                .filter(|c| oracle_detected(inst, d, c, filter))
                .map(str::to_string)
                .collect()
        })
        .collect()
}

/// Classes by direct evaluation of each rule against the detected set.
pub fn oracle_multilabel(inst: &Instance, detected: &[BTreeSet<String>]) -> Vec<BTreeSet<String>> {
    detected
        .iter()
        .map(|found| {
            let mut out = BTreeSet::new();
            for class in &inst.taxonomy.classes {
                let hits = class
                    .member_claims
                    .iter()
                    .filter(|c| found.contains(*c))
                    .count();
                let matched = match class.mode {
                    claimsect::taxonomy::ClassMode::AnyOf => hits > 0,
                    claimsect::taxonomy::ClassMode::AllOf => hits == class.member_claims.len(),
                };
                let vetoed = class.absence_claims.iter().any(|c| found.contains(c));
                if matched && !vetoed {
                    out.insert(class.class_id.clone());
                }
            }
            out
        })
        .collect()
}

fn norm(x: f64, t: f64) -> f64 {
    let t = t.clamp(1e-6, 1.0 - 1e-6);
    if x <= t {
        x / (2.0 * t)
    } else {
        0.5 + (x - t) / (2.0 * (1.0 - t))
    }
}

fn mean_norm(inst: &Instance, doc: &str, claims: &[&str]) -> f64 {
    let mut total = 0.0;
    for c in claims {
        total += norm(s(inst, doc, c), t(inst, c));
    }
    total / claims.len() as f64
}

/// Topic of each document: scan all classes, keep every maximizer, pick the
/// smallest id among them.
pub fn oracle_topic(inst: &Instance) -> Vec<String> {
    inst.matrix
        .doc_ids()
        .iter()
        .map(|d| {
            let means: Vec<(f64, &str)> = inst
                .taxonomy
                .classes
                .iter()
                .map(|k| {
                    let members: Vec<&str> = k.member_claims.iter().map(String::as_str).collect();
                    (mean_norm(inst, d, &members), k.class_id.as_str())
                })
                .collect();
            let best = means.iter().map(|m| m.0).fold(f64::NEG_INFINITY, f64::max);
            means
                .iter()
                .filter(|m| m.0 == best)
                .map(|m| m.1)
                .min()
                .unwrap()
                .to_string()
        })
        .collect()
}

pub fn oracle_stance(inst: &Instance, topic: &str, doc: &str, filter: bool) -> Stance {
    let class = inst.taxonomy.class(topic).unwrap();
    let mut favor = Vec::new();
    let mut against = Vec::new();
    for id in &class.member_claims {
        let claim = inst.taxonomy.claim(id).unwrap();
        let r = claim.classes.iter().find(|r| r.class_id == topic).unwrap();
        match r.polarity {
            claimsect::taxonomy::Polarity::Supports => favor.push(id.as_str()),
            claimsect::taxonomy::Polarity::Opposes => against.push(id.as_str()),
        }
    }
    let nf = favor
        .iter()
        .filter(|c| oracle_detected(inst, doc, c, filter))
        .count();
    let na = against
        .iter()
        .filter(|c| oracle_detected(inst, doc, c, filter))
        .count();
    if nf == 0 && na == 0 {
        Stance::Neutral
    } else if nf > na {
        Stance::Favor
    } else if na > nf {
        Stance::Against
    } else {
        let mf = mean_norm(inst, doc, &favor);
        let ma = mean_norm(inst, doc, &against);
        if mf > ma {
            Stance::Favor
        } else if ma > mf {
            Stance::Against
        } else {
            Stance::Neutral
        }
    }
}

/// Compare every classification entry point on one instance with the
/// brute-force answers. Returns a description of the first mismatch.
pub fn check_instance(inst: &Instance) -> Result<(), String> {
    use claimsect::classify::{
        classify, classify_multilabel, classify_stance, classify_topic, detect_claims,
        DetectOptions, PredictionRecord,
    };
    for filter in [false, true] {
        let opts = DetectOptions {
            negation_filter: filter,
            ..Default::default()
        };
        let expected_claims = oracle_detect(inst, filter);
        let labeling = detect_claims(&inst.matrix, &inst.thresholds, &inst.taxonomy, opts)
            .map_err(|e| e.to_string())?;
        let got: Vec<BTreeSet<String>> = labeling
            .iter()
            .map(|d| d.claims.iter().cloned().collect())
            .collect();
        if got != expected_claims {
            return Err(format!(
                "detect (filter={filter}): {got:?} != {expected_claims:?}"
            ));
        }
        let records = classify(&inst.matrix, &inst.thresholds, &inst.taxonomy, opts)
            .map_err(|e| e.to_string())?;
        match inst.taxonomy.task_kind {
            TaskKind::MultiLabel => {
                let expected = oracle_multilabel(inst, &expected_claims);
                let got: Vec<BTreeSet<String>> = classify_multilabel(&labeling, &inst.taxonomy)
                    .iter()
                    .map(|d| d.classes.iter().cloned().collect())
                    .collect();
                if got != expected {
                    return Err(format!("multilabel: {got:?} != {expected:?}"));
                }
                for (rec, exp) in records.iter().zip(&expected) {
                    let PredictionRecord::Labels { classes, .. } = rec else {
                        return Err("classify returned a topic record".into());
                    };
                    if classes.iter().cloned().collect::<BTreeSet<_>>() != *exp {
                        return Err(format!("classify labels {classes:?} != {exp:?}"));
                    }
                }
            }
            kind => {
                let expected = oracle_topic(inst);
                let got: Vec<String> =
                    classify_topic(&inst.matrix, &inst.thresholds, &inst.taxonomy)
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .map(|p| p.topic)
                        .collect();
                if got != expected {
                    return Err(format!("topic: {got:?} != {expected:?}"));
                }
                for ((rec, topic), doc) in records.iter().zip(&expected).zip(inst.matrix.doc_ids())
                {
                    let PredictionRecord::Topic {
                        topic: t, stance, ..
                    } = rec
                    else {
                        return Err("classify returned a labels record".into());
                    };
                    if t != topic {
                        return Err(format!("classify topic {t} != {topic}"));
                    }
                    if kind == TaskKind::Stance {
                        let want = oracle_stance(inst, topic, doc, filter);
                        if *stance != Some(want) {
                            return Err(format!("classify stance {stance:?} != {want:?}"));
                        }
                        // Every topic, not only the predicted one.
                        for k in inst.taxonomy.class_ids() {
                            let got = classify_stance(
                                &inst.matrix,
                                &inst.thresholds,
                                &inst.taxonomy,
                                k,
                                doc,
                                opts,
                            )
                            .map_err(|e| e.to_string())?;
                            let want = oracle_stance(inst, k, doc, filter);
                            if got != want {
                                return Err(format!(
                                    "stance on {k} for {doc}: {got:?} != {want:?}"
                                ));
                            }
                        }
                    } else if stance.is_some() {
                        return Err("topic taxonomy produced a stance".into());
                    }
                }
            }
        }
    }
    Ok(())
}
