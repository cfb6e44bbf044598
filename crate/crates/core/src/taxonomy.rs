//! Claim taxonomies: the declarative mapping from claims to classes.
//!
//! A taxonomy file lists claims, each pointing at the classes it bears on,
//! and the classes with their combination rule:
//!
//! ```json
//! {
//!   "taxonomy_id": "demo",
//!   "task_kind": "multi_label",
//!   "claims": [
//!     {"claim_id": "ice", "text": "The world's ice is not melting",
//!      "negated_text": "The world's ice is melting",
//!      "classes": [{"class_id": "1_1", "polarity": "supports"}]}
//!   ],
//!   "classes": [{"class_id": "1_1", "label": "Ice isn't melting", "mode": "any_of"}]
//! }
//! ```
//!
//! Member claims of a class are the claims that reference it. In `stance`
//! taxonomies every class is a topic and the polarity splits its claims
//! into a favor (`supports`) and an against (`opposes`) set. In the other
//! task kinds an `opposes` reference makes the claim an absence claim
//! (a veto) for that class, alongside any listed in `absence_claims`.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::ScoreMatrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid taxonomy at {path}: {message}")]
    Invalid { path: String, message: String },
}

impl TaxonomyError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        TaxonomyError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Supports,
    Opposes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    AnyOf,
    AllOf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiLabel,
    MultiClassTopic,
    Stance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRef {
    pub class_id: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimDef {
    pub claim_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated_text: Option<String>,
    pub classes: Vec<ClassRef>,
}

impl ClaimDef {
    pub fn polarity_for(&self, class_id: &str) -> Option<Polarity> {
        self.classes
            .iter()
            .find(|r| r.class_id == class_id)
            .map(|r| r.polarity)
    }
}

/// A class and the rule deciding it from detected claims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRule {
    pub class_id: String,
    pub label: String,
    pub mode: ClassMode,
    /// Claims whose detection counts toward the class, in taxonomy order.
    pub member_claims: Vec<String>,
    /// Claims whose detection suppresses the class.
    pub absence_claims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub taxonomy_id: String,
    pub task_kind: TaskKind,
    pub claims: Vec<ClaimDef>,
    pub classes: Vec<ClassRule>,
}

/// Favor/against split of one stance topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StancePartition<'a> {
    pub favor: Vec<&'a str>,
    pub against: Vec<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    class_id: String,
    label: String,
    mode: ClassMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    absence_claims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    taxonomy_id: String,
    task_kind: TaskKind,
    claims: Vec<ClaimDef>,
    classes: Vec<ClassEntry>,
}

/// Column id under which the scores of a claim's negation are stored.
pub fn negated_column_id(claim_id: &str) -> String {
    format!("¬{claim_id}")
}

/// A mismatch between a taxonomy and a score matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "claim_id", rename_all = "snake_case")]
pub enum Discrepancy {
    MissingColumn(String),
    MissingNegated(String),
}

pub fn parse_taxonomy(source: &[u8]) -> Result<Taxonomy, TaxonomyError> {
    let file: TaxonomyFile =
        serde_json::from_slice(source).map_err(|err| TaxonomyError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        })?;
    Taxonomy::from_file(file)
}

impl Taxonomy {
    fn from_file(file: TaxonomyFile) -> Result<Self, TaxonomyError> {
        if file.taxonomy_id.trim().is_empty() {
            return Err(TaxonomyError::invalid("taxonomy_id", "must not be empty"));
        }

        let mut class_index: HashMap<&str, usize> = HashMap::new();
        for (i, class) in file.classes.iter().enumerate() {
            if class.class_id.is_empty() {
                return Err(TaxonomyError::invalid(
                    format!("classes[{i}].class_id"),
                    "must not be empty",
                ));
            }
            if class_index.insert(&class.class_id, i).is_some() {
                return Err(TaxonomyError::invalid(
                    format!("classes[{i}].class_id"),
                    format!("duplicate class id {:?}", class.class_id),
                ));
            }
        }

        let mut claim_ids: HashSet<&str> = HashSet::new();
        let mut members: Vec<Vec<String>> = vec![Vec::new(); file.classes.len()];
        let mut vetoes: Vec<Vec<String>> = vec![Vec::new(); file.classes.len()];
        for (i, claim) in file.claims.iter().enumerate() {
            if claim.claim_id.is_empty() {
                return Err(TaxonomyError::invalid(
                    format!("claims[{i}].claim_id"),
                    "must not be empty",
                ));
            }
            if claim.claim_id.starts_with('¬') {
                return Err(TaxonomyError::invalid(
                    format!("claims[{i}].claim_id"),
                    "the '¬' prefix is reserved for negated columns",
                ));
            }
            if !claim_ids.insert(&claim.claim_id) {
                return Err(TaxonomyError::invalid(
                    format!("claims[{i}].claim_id"),
                    format!("duplicate claim id {:?}", claim.claim_id),
                ));
            }
            if claim.text.trim().is_empty() {
                return Err(TaxonomyError::invalid(
                    format!("claims[{i}].text"),
                    "must not be empty",
                ));
            }
            if matches!(&claim.negated_text, Some(t) if t.trim().is_empty()) {
                return Err(TaxonomyError::invalid(
                    format!("claims[{i}].negated_text"),
                    "must not be empty when present",
                ));
            }
            let mut seen = HashSet::new();
            for (j, class_ref) in claim.classes.iter().enumerate() {
                let path = format!("claims[{i}].classes[{j}].class_id");
                let Some(&ci) = class_index.get(class_ref.class_id.as_str()) else {
                    return Err(TaxonomyError::invalid(
                        path,
                        format!("undeclared class {:?}", class_ref.class_id),
                    ));
                };
                if !seen.insert(ci) {
                    return Err(TaxonomyError::invalid(
                        path,
                        format!("class {:?} referenced twice", class_ref.class_id),
                    ));
                }
                let is_member =
                    file.task_kind == TaskKind::Stance || class_ref.polarity == Polarity::Supports;
                if is_member {
                    members[ci].push(claim.claim_id.clone());
                } else {
                    vetoes[ci].push(claim.claim_id.clone());
                }
            }
        }

        let mut classes = Vec::with_capacity(file.classes.len());
        for (i, entry) in file.classes.into_iter().enumerate() {
            let member_claims = std::mem::take(&mut members[i]);
            if member_claims.is_empty() {
                return Err(TaxonomyError::invalid(
                    format!("classes[{i}]"),
                    format!("class {:?} has no member claims", entry.class_id),
                ));
            }
            if file.task_kind == TaskKind::Stance && !entry.absence_claims.is_empty() {
                return Err(TaxonomyError::invalid(
                    format!("classes[{i}].absence_claims"),
                    "absence claims are not supported in stance taxonomies",
                ));
            }
            let mut absence_claims = std::mem::take(&mut vetoes[i]);
            for (j, id) in entry.absence_claims.iter().enumerate() {
                let path = format!("classes[{i}].absence_claims[{j}]");
                if !claim_ids.contains(id.as_str()) {
                    return Err(TaxonomyError::invalid(
                        path,
                        format!("undeclared claim {id:?}"),
                    ));
                }
                if member_claims.contains(id) {
                    return Err(TaxonomyError::invalid(
                        path,
                        format!("claim {id:?} is both a member and an absence claim"),
                    ));
                }
                if !absence_claims.contains(id) {
                    absence_claims.push(id.clone());
                }
            }
            classes.push(ClassRule {
                class_id: entry.class_id,
                label: entry.label,
                mode: entry.mode,
                member_claims,
                absence_claims,
            });
        }

        let taxonomy = Taxonomy {
            taxonomy_id: file.taxonomy_id,
            task_kind: file.task_kind,
            claims: file.claims,
            classes,
        };
        if taxonomy.task_kind == TaskKind::Stance {
            for (i, class) in taxonomy.classes.iter().enumerate() {
                let partition = taxonomy
                    .stance_partition(&class.class_id)
                    .expect("declared");
                if partition.favor.is_empty() || partition.against.is_empty() {
                    return Err(TaxonomyError::invalid(
                        format!("classes[{i}]"),
                        format!(
                            "stance topic {:?} needs at least one supporting and one opposing claim",
                            class.class_id
                        ),
                    ));
                }
            }
        }
        Ok(taxonomy)
    }

    /// Serialize back to the file schema. Absence claims that come from
    /// `opposes` references are implied by the claims and not repeated.
    pub fn to_json(&self) -> String {
        let classes = self
            .classes
            .iter()
            .map(|class| ClassEntry {
                class_id: class.class_id.clone(),
                label: class.label.clone(),
                mode: class.mode,
                absence_claims: class
                    .absence_claims
                    .iter()
                    .filter(|id| {
                        self.claim(id)
                            .and_then(|c| c.polarity_for(&class.class_id))
                            .is_none()
                    })
                    .cloned()
                    .collect(),
            })
            .collect();
        let file = TaxonomyFile {
            taxonomy_id: self.taxonomy_id.clone(),
            task_kind: self.task_kind,
            claims: self.claims.clone(),
            classes,
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn claim(&self, claim_id: &str) -> Option<&ClaimDef> {
        self.claims.iter().find(|c| c.claim_id == claim_id)
    }

    pub fn class(&self, class_id: &str) -> Option<&ClassRule> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn claim_ids(&self) -> impl Iterator<Item = &str> {
        self.claims.iter().map(|c| c.claim_id.as_str())
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.class_id.as_str())
    }

    /// Favor/against claim sets of a stance topic; `None` when the class is
    /// not declared.
    pub fn stance_partition(&self, class_id: &str) -> Option<StancePartition<'_>> {
        let class = self.class(class_id)?;
        let mut partition = StancePartition {
            favor: Vec::new(),
            against: Vec::new(),
        };
        for id in &class.member_claims {
            let claim = self.claim(id)?;
            match claim.polarity_for(class_id)? {
                Polarity::Supports => partition.favor.push(&claim.claim_id),
                Polarity::Opposes => partition.against.push(&claim.claim_id),
            }
        }
        Some(partition)
    }

    /// Every column this taxonomy needs from a score matrix: one per claim,
    /// plus one per negated variant.
    pub fn required_columns(&self) -> Vec<String> {
        let mut columns = Vec::new();
        for claim in &self.claims {
            columns.push(claim.claim_id.clone());
            if claim.negated_text.is_some() {
                columns.push(negated_column_id(&claim.claim_id));
            }
        }
        columns
    }
}

/// Report which taxonomy columns the score matrix lacks. Empty means the
/// matrix covers every claim and negated variant.
pub fn validate_against_scores(taxonomy: &Taxonomy, scores: &ScoreMatrix) -> Vec<Discrepancy> {
    let present: BTreeSet<&str> = scores.claim_ids().iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for claim in &taxonomy.claims {
        if !present.contains(claim.claim_id.as_str()) {
            out.push(Discrepancy::MissingColumn(claim.claim_id.clone()));
        }
        if claim.negated_text.is_some()
            && !present.contains(negated_column_id(&claim.claim_id).as_str())
        {
            out.push(Discrepancy::MissingNegated(claim.claim_id.clone()));
        }
    }
    out
}
