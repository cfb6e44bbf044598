//! The document x claim score matrix, the dataset file, and the optional
//! remote scoring provider.
//!
//! Score files are JSONL: one header record followed by one record per cell.
//!
//! ```text
//! {"score_kind":"entailment","range":[0.0,1.0]}
//! {"doc_id":"d1","claim_id":"1_1_0_0","score":0.8731}
//! ```
//!
//! Values are kept as `f64` and written with the shortest representation
//! that parses back to the same bits, so export followed by ingest is exact.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::taxonomy::{negated_column_id, ClaimDef};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("score file has no header record")]
    MissingHeader,
    #[error("line {line}: header must be the first record and appear once")]
    MisplacedHeader { line: usize },
    #[error("header declares {declared:?} scores but {expected:?} was requested")]
    KindMismatch {
        declared: ScoreKind,
        expected: ScoreKind,
    },
    #[error("header range [{lo}, {hi}] does not match the {kind:?} range")]
    RangeMismatch { kind: ScoreKind, lo: f64, hi: f64 },
    #[error("line {line}: score {score} for ({doc_id}, {claim_id}) is outside [{lo}, {hi}]")]
    OutOfRange {
        line: usize,
        doc_id: String,
        claim_id: String,
        score: f64,
        lo: f64,
        hi: f64,
    },
    #[error("line {line}: duplicate cell ({doc_id}, {claim_id})")]
    DuplicateCell {
        line: usize,
        doc_id: String,
        claim_id: String,
    },
    #[error("missing cell ({doc_id}, {claim_id})")]
    MissingCell { doc_id: String, claim_id: String },
    #[error("duplicate {what} id {id:?}")]
    DuplicateId { what: &'static str, id: String },
    #[error("matrix shape mismatch: {docs} docs x {claims} claims but {values} values")]
    Shape {
        docs: usize,
        claims: usize,
        values: usize,
    },
    #[error("unknown claim {0:?}")]
    UnknownClaim(String),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// NLI entailment probability.
    Entailment,
    /// Embedding cosine similarity.
    Cosine,
}

impl ScoreKind {
    pub fn range(self) -> ScoreRange {
        match self {
            ScoreKind::Entailment => ScoreRange { lo: 0.0, hi: 1.0 },
            ScoreKind::Cosine => ScoreRange { lo: -1.0, hi: 1.0 },
        }
    }
}

/// Closed score interval `[lo, hi]`. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for ScoreRange {
    fn from([lo, hi]: [f64; 2]) -> Self {
        ScoreRange { lo, hi }
    }
}

impl From<ScoreRange> for [f64; 2] {
    fn from(r: ScoreRange) -> Self {
        [r.lo, r.hi]
    }
}

impl ScoreRange {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        self.lo + 0.5 * self.width()
    }
}

/// One entry of a sorted score column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

impl ScoredDoc {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        ScoredDoc {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Dense score table, rows are documents and columns claims.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    doc_ids: Vec<String>,
    claim_ids: Vec<String>,
    values: Vec<f64>,
    kind: ScoreKind,
    doc_index: HashMap<String, usize>,
    claim_index: HashMap<String, usize>,
}

impl ScoreMatrix {
    /// Build from row-major `values` (`values[d * claims + c]`).
    pub fn new(
        doc_ids: Vec<String>,
        claim_ids: Vec<String>,
        values: Vec<f64>,
        kind: ScoreKind,
    ) -> Result<Self, ScoreError> {
        if values.len() != doc_ids.len() * claim_ids.len() {
            return Err(ScoreError::Shape {
                docs: doc_ids.len(),
                claims: claim_ids.len(),
                values: values.len(),
            });
        }
        let doc_index = index_of(&doc_ids, "document")?;
        let claim_index = index_of(&claim_ids, "claim")?;
        let range = kind.range();
        for (i, &v) in values.iter().enumerate() {
            if !range.contains(v) {
                let (d, c) = (i / claim_ids.len(), i % claim_ids.len());
                return Err(ScoreError::OutOfRange {
                    line: 0,
                    doc_id: doc_ids[d].clone(),
                    claim_id: claim_ids[c].clone(),
                    score: v,
                    lo: range.lo,
                    hi: range.hi,
                });
            }
        }
        Ok(ScoreMatrix {
            doc_ids,
            claim_ids,
            values,
            kind,
            doc_index,
            claim_index,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn claim_ids(&self) -> &[String] {
        &self.claim_ids
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn range(&self) -> ScoreRange {
        self.kind.range()
    }

    pub fn has_claim(&self, claim_id: &str) -> bool {
        self.claim_index.contains_key(claim_id)
    }

    pub fn get(&self, doc_id: &str, claim_id: &str) -> Option<f64> {
        let d = *self.doc_index.get(doc_id)?;
        let c = *self.claim_index.get(claim_id)?;
        Some(self.values[d * self.claim_ids.len() + c])
    }

    /// The claim's scores sorted ascending, ties broken by doc id.
    pub fn column(&self, claim_id: &str) -> Result<Vec<ScoredDoc>, ScoreError> {
        let c = *self
            .claim_index
            .get(claim_id)
            .ok_or_else(|| ScoreError::UnknownClaim(claim_id.to_string()))?;
        let n = self.claim_ids.len();
        let mut column: Vec<ScoredDoc> = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(d, id)| ScoredDoc::new(id.clone(), self.values[d * n + c]))
            .collect();
        sort_column(&mut column);
        Ok(column)
    }

    /// Restrict to the given documents, in the given order.
    pub fn select_docs(&self, doc_ids: &[String]) -> Result<ScoreMatrix, ScoreError> {
        let n = self.claim_ids.len();
        let mut values = Vec::with_capacity(doc_ids.len() * n);
        for id in doc_ids {
            let d = *self
                .doc_index
                .get(id)
                .ok_or_else(|| ScoreError::UnknownDocument(id.clone()))?;
            values.extend_from_slice(&self.values[d * n..(d + 1) * n]);
        }
        ScoreMatrix::new(doc_ids.to_vec(), self.claim_ids.clone(), values, self.kind)
    }

    /// Export as a score file; [`ingest_scores`] reads it back bit-exactly.
    pub fn to_jsonl(&self) -> String {
        let mut out = jsonl::to_line(&Header {
            score_kind: self.kind,
            range: self.range(),
            format: Some(crate::FORMAT_VERSION.to_string()),
        });
        let n = self.claim_ids.len();
        for (d, doc_id) in self.doc_ids.iter().enumerate() {
            for (c, claim_id) in self.claim_ids.iter().enumerate() {
                out.push_str(&jsonl::to_line(&Cell {
                    doc_id: doc_id.clone(),
                    claim_id: claim_id.clone(),
                    score: self.values[d * n + c],
                }));
            }
        }
        out
    }
}

pub(crate) fn sort_column(column: &mut [ScoredDoc]) {
    column.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

fn index_of(ids: &[String], what: &'static str) -> Result<HashMap<String, usize>, ScoreError> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(ScoreError::DuplicateId {
                what,
                id: id.clone(),
            });
        }
    }
    Ok(index)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    score_kind: ScoreKind,
    range: ScoreRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Cell {
    doc_id: String,
    claim_id: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Record {
    Header(Header),
    Cell(Cell),
}

/// Parse a score file. Row and column order follow first appearance.
pub fn ingest_scores(source: &[u8], kind: ScoreKind) -> Result<ScoreMatrix, ScoreError> {
    let text = std::str::from_utf8(source).map_err(|e| ScoreError::Syntax {
        line: 0,
        message: e.to_string(),
    })?;
    let records: Vec<(usize, Record)> =
        jsonl::parse_lines(text).map_err(|(line, err)| ScoreError::Syntax {
            line,
            message: err.to_string(),
        })?;

    let mut records = records.into_iter();
    let range = match records.next() {
        Some((_, Record::Header(h))) => {
            if h.score_kind != kind {
                return Err(ScoreError::KindMismatch {
                    declared: h.score_kind,
                    expected: kind,
                });
            }
            if h.range != kind.range() {
                return Err(ScoreError::RangeMismatch {
                    kind,
                    lo: h.range.lo,
                    hi: h.range.hi,
                });
            }
            h.range
        }
        Some((line, Record::Cell(_))) => return Err(ScoreError::MisplacedHeader { line }),
        None => return Err(ScoreError::MissingHeader),
    };

    let mut doc_ids = Vec::new();
    let mut claim_ids = Vec::new();
    let mut doc_index: HashMap<String, usize> = HashMap::new();
    let mut claim_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    for (line, record) in records {
        let cell = match record {
            Record::Cell(cell) => cell,
            Record::Header(_) => return Err(ScoreError::MisplacedHeader { line }),
        };
        if !cell.score.is_finite() || !range.contains(cell.score) {
            return Err(ScoreError::OutOfRange {
                line,
                doc_id: cell.doc_id,
                claim_id: cell.claim_id,
                score: cell.score,
                lo: range.lo,
                hi: range.hi,
            });
        }
        let d = *doc_index.entry(cell.doc_id.clone()).or_insert_with(|| {
            doc_ids.push(cell.doc_id.clone());
            doc_ids.len() - 1
        });
        let c = *claim_index.entry(cell.claim_id.clone()).or_insert_with(|| {
            claim_ids.push(cell.claim_id.clone());
            claim_ids.len() - 1
        });
        if cells.insert((d, c), cell.score).is_some() {
            return Err(ScoreError::DuplicateCell {
                line,
                doc_id: cell.doc_id,
                claim_id: cell.claim_id,
            });
        }
    }

    let mut values = Vec::with_capacity(doc_ids.len() * claim_ids.len());
    for (d, doc_id) in doc_ids.iter().enumerate() {
        for (c, claim_id) in claim_ids.iter().enumerate() {
            match cells.get(&(d, c)) {
                Some(&v) => values.push(v),
                None => {
                    return Err(ScoreError::MissingCell {
                        doc_id: doc_id.clone(),
                        claim_id: claim_id.clone(),
                    })
                }
            }
        }
    }
    ScoreMatrix::new(doc_ids, claim_ids, values, kind)
}

/// Read the score kind from a score file header without parsing the body.
pub fn peek_score_kind(source: &[u8]) -> Result<ScoreKind, ScoreError> {
    #[derive(Deserialize)]
    struct Head {
        score_kind: ScoreKind,
    }
    let text = std::str::from_utf8(source).map_err(|e| ScoreError::Syntax {
        line: 1,
        message: e.to_string(),
    })?;
    let (idx, first) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(ScoreError::MissingHeader)?;
    serde_json::from_str::<Head>(first)
        .map(|h| h.score_kind)
        .map_err(|e| ScoreError::Syntax {
            line: idx + 1,
            message: format!("header: {e}"),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One dataset record. `gold_classes` is `None` when the document is
/// unlabeled and `Some(empty)` when it is labeled with no class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_classes: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

pub fn parse_dataset(source: &[u8]) -> Result<Vec<Document>, ScoreError> {
    let text = std::str::from_utf8(source).map_err(|e| ScoreError::Syntax {
        line: 0,
        message: e.to_string(),
    })?;
    let docs: Vec<(usize, Document)> =
        jsonl::parse_lines(text).map_err(|(line, err)| ScoreError::Syntax {
            line,
            message: err.to_string(),
        })?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(docs.len());
    for (_, doc) in docs {
        if !seen.insert(doc.doc_id.clone()) {
            return Err(ScoreError::DuplicateId {
                what: "document",
                id: doc.doc_id,
            });
        }
        out.push(doc);
    }
    Ok(out)
}

pub fn dataset_to_jsonl(docs: &[Document]) -> String {
    docs.iter().map(jsonl::to_line).collect()
}

// ---------------------------------------------------------------------------
// Remote provider

/// Environment variable naming the scoring endpoint.
pub const PROVIDER_URL_ENV: &str = "CLAIMSECT_PROVIDER_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRequest {
    pub doc_id: String,
    pub claim_id: String,
    pub text: String,
    pub claim_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub doc_id: String,
    pub claim_id: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequestBody {
    pub pairs: Vec<PairRequest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponseBody {
    pub scores: Vec<PairScore>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider failure: {0}")]
    Fatal(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
}

/// Anything that can score (document, claim) pairs.
pub trait ScoreProvider: Sync {
    fn score(&self, pairs: &[PairRequest]) -> Result<Vec<PairScore>, ProviderError>;
}

/// JSON-over-HTTP provider: `POST {pairs:[...]}` returning `{scores:[...]}`.
pub struct HttpProvider {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Fatal(e.to_string()))?;
        Ok(HttpProvider {
            url: url.into(),
            client,
        })
    }

    pub fn from_env(timeout: Duration) -> Result<Self, ProviderError> {
        let url = std::env::var(PROVIDER_URL_ENV)
            .map_err(|_| ProviderError::Fatal(format!("{PROVIDER_URL_ENV} is not set")))?;
        Self::new(url, timeout)
    }
}

impl ScoreProvider for HttpProvider {
    fn score(&self, pairs: &[PairRequest]) -> Result<Vec<PairScore>, ProviderError> {
        let body = ScoreRequestBody {
            pairs: pairs.to_vec(),
        };
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Fatal(format!("HTTP {status}")));
        }
        let bytes = response
            .bytes()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let parsed: ScoreResponseBody =
            serde_json::from_slice(&bytes).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        Ok(parsed.scores)
    }
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub kind: ScoreKind,
    pub batch_size: usize,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Number of batches in flight at once.
    pub concurrency: usize,
    /// Score file used as a cache; cells found there are not requested again.
    pub cache_path: Option<PathBuf>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            kind: ScoreKind::Entailment,
            batch_size: 32,
            max_retries: 4,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(5),
            concurrency: 4,
            cache_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("provider failed for {} pair(s) after retries: {message}", failed.len())]
    Provider {
        failed: Vec<(String, String)>,
        message: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cache: {0}")]
    Cache(#[from] ScoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Score every (document, claim) pair, plus negated variants where a claim
/// has one. Cells already present in the cache file are reused; the merged
/// matrix is written back to the cache.
pub fn fetch_scores(
    provider: &dyn ScoreProvider,
    docs: &[crate::scores::Document],
    claims: &[ClaimDef],
    config: &FetchConfig,
) -> Result<ScoreMatrix, FetchError> {
    let mut columns: Vec<(String, String)> = Vec::new();
    for claim in claims {
        columns.push((claim.claim_id.clone(), claim.text.clone()));
        if let Some(neg) = &claim.negated_text {
            columns.push((negated_column_id(&claim.claim_id), neg.clone()));
        }
    }

    let cached = match &config.cache_path {
        Some(path) if path.exists() => Some(ingest_scores(&std::fs::read(path)?, config.kind)?),
        _ => None,
    };

    let n = columns.len();
    let mut values = vec![f64::NAN; docs.len() * n];
    let mut pending = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for (c, (claim_id, claim_text)) in columns.iter().enumerate() {
            match cached.as_ref().and_then(|m| m.get(&doc.doc_id, claim_id)) {
                Some(v) => values[d * n + c] = v,
                None => pending.push((
                    d * n + c,
                    PairRequest {
                        doc_id: doc.doc_id.clone(),
                        claim_id: claim_id.clone(),
                        text: doc.text.clone(),
                        claim_text: claim_text.clone(),
                    },
                )),
            }
        }
    }

    if !pending.is_empty() {
        let batches: Vec<&[(usize, PairRequest)]> =
            pending.chunks(config.batch_size.max(1)).collect();
        type Slot = Mutex<Option<Result<Vec<PairScore>, ProviderError>>>;
        let results: Vec<Slot> = batches.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..config.concurrency.max(1).min(batches.len()) {
                scope.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(b) else { break };
                    let requests: Vec<PairRequest> =
                        batch.iter().map(|(_, req)| req.clone()).collect();
                    let outcome = score_with_retry(provider, &requests, config);
                    *results[b].lock().expect("result slot") = Some(outcome);
                });
            }
        });

        let range = config.kind.range();
        let mut failed = Vec::new();
        let mut last_error = String::new();
        for (batch, slot) in batches.iter().zip(results) {
            match slot.into_inner().expect("result slot").expect("batch ran") {
                Ok(scores) => {
                    let mut by_pair: HashMap<(&str, &str), f64> = HashMap::new();
                    for s in &scores {
                        if !s.score.is_finite() || !range.contains(s.score) {
                            return Err(FetchError::Protocol(format!(
                                "score {} for ({}, {}) is outside [{}, {}]",
                                s.score, s.doc_id, s.claim_id, range.lo, range.hi
                            )));
                        }
                        if by_pair.insert((&s.doc_id, &s.claim_id), s.score).is_some() {
                            return Err(FetchError::Protocol(format!(
                                "duplicate score for ({}, {})",
                                s.doc_id, s.claim_id
                            )));
                        }
                    }
                    if by_pair.len() != batch.len() {
                        return Err(FetchError::Protocol(format!(
                            "expected {} scores, got {}",
                            batch.len(),
                            by_pair.len()
                        )));
                    }
                    for (slot, req) in batch.iter() {
                        let v = by_pair
                            .get(&(req.doc_id.as_str(), req.claim_id.as_str()))
                            .ok_or_else(|| {
                                FetchError::Protocol(format!(
                                    "no score for ({}, {})",
                                    req.doc_id, req.claim_id
                                ))
                            })?;
                        values[*slot] = *v;
                    }
                }
                Err(ProviderError::Protocol(msg)) => return Err(FetchError::Protocol(msg)),
                Err(err) => {
                    last_error = err.to_string();
                    failed.extend(
                        batch
                            .iter()
                            .map(|(_, r)| (r.doc_id.clone(), r.claim_id.clone())),
                    );
                }
            }
        }
        if !failed.is_empty() {
            return Err(FetchError::Provider {
                failed,
                message: last_error,
            });
        }
    }

    let matrix = ScoreMatrix::new(
        docs.iter().map(|d| d.doc_id.clone()).collect(),
        columns.into_iter().map(|(id, _)| id).collect(),
        values,
        config.kind,
    )?;
    if let Some(path) = &config.cache_path {
        jsonl::write_atomic(path, matrix.to_jsonl().as_bytes())?;
    }
    Ok(matrix)
}

fn score_with_retry(
    provider: &dyn ScoreProvider,
    requests: &[PairRequest],
    config: &FetchConfig,
) -> Result<Vec<PairScore>, ProviderError> {
    let mut backoff = config.initial_backoff;
    let mut attempt = 0;
    loop {
        match provider.score(requests) {
            Err(ProviderError::Transient(msg)) => {
                if attempt >= config.max_retries {
                    return Err(ProviderError::Transient(msg));
                }
                attempt += 1;
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(config.max_backoff);
            }
            other => return other,
        }
    }
}
