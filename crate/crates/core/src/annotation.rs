//! Annotation campaigns: one bisection session per taxonomy claim, persisted
//! as append-only logs so a campaign can always be rebuilt from disk.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/campaign.json        campaign id, taxonomy id, bisection config, claim order
//! <dir>/taxonomy.json        copy of the taxonomy
//! <dir>/scores.jsonl         copy of the score matrix
//! <dir>/dataset.jsonl        documents (optional; supplies text and gold labels)
//! <dir>/logs/<claim>.jsonl   header line, then one LogEntry per answer
//! <dir>/reports.json         reports of finished sessions
//! ```

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{stance_gold_label, Stance};
use crate::jsonl;
use crate::pba::{
    BisectionConfig, BisectionState, LogEntry, PbaError, Proposal, SessionStatus, ThresholdReport,
    UpdateOutcome,
};
use crate::scores::{
    dataset_to_jsonl, ingest_scores, parse_dataset, peek_score_kind, Document, ScoreError,
    ScoreMatrix, ScoredDoc,
};
use crate::taxonomy::{
    parse_taxonomy, validate_against_scores, ClaimDef, Discrepancy, Polarity, TaskKind, Taxonomy,
    TaxonomyError,
};
use crate::FORMAT_VERSION;

pub const CAMPAIGN_FILE: &str = "campaign.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REPORTS_FILE: &str = "reports.json";
pub const LOGS_DIR: &str = "logs";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid campaign: {0}")]
    Invalid(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Scores(#[from] ScoreError),
    #[error(transparent)]
    Engine(#[from] PbaError),
    #[error("taxonomy and scores disagree: {0:?}")]
    Discrepancies(Vec<Discrepancy>),
    #[error("campaign already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no campaign at {0}")]
    NotFound(PathBuf),
    #[error("unknown claim {0:?}")]
    UnknownClaim(String),
    #[error("session for {claim_id:?} has finished")]
    Finished {
        claim_id: String,
        report: ThresholdReport,
    },
    #[error("stale version {given}, current is {current}")]
    StaleVersion { given: u64, current: u64 },
    #[error("expected an answer for {expected:?}, got {given:?}")]
    WrongDocument { expected: String, given: String },
    #[error("no annotations to undo for {0:?}")]
    NothingToUndo(String),
    #[error("annotator failed: {0}")]
    Annotator(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Contents of `campaign.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignMeta {
    pub format: String,
    pub campaign_id: String,
    pub taxonomy_id: String,
    pub config: BisectionConfig,
    /// Claims in tuning order.
    pub claims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    format: String,
    claim_id: String,
    #[serde(default)]
    undos: u64,
}

/// Contents of `reports.json` (also used for threshold files).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSet {
    pub format: String,
    pub reports: Vec<ThresholdReport>,
}

impl ReportSet {
    pub fn new(reports: Vec<ThresholdReport>) -> Self {
        ReportSet {
            format: FORMAT_VERSION.to_string(),
            reports,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn parse(source: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(source)
    }
}

/// Campaign ids double as directory names.
pub fn valid_campaign_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// File name for a claim's log; bytes outside `[A-Za-z0-9_-]` are
/// percent-encoded.
pub fn log_file_name(claim_id: &str) -> String {
    let mut out = String::new();
    for b in claim_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out.push_str(".jsonl");
    out
}

pub struct NewCampaign {
    pub campaign_id: String,
    pub taxonomy: Taxonomy,
    pub scores: ScoreMatrix,
    pub documents: Vec<Document>,
    pub config: BisectionConfig,
}

/// One claim's live session.
#[derive(Debug, Clone)]
pub struct ClaimSession {
    claim_id: String,
    column: Vec<ScoredDoc>,
    state: BisectionState,
    log: Vec<LogEntry>,
    undos: u64,
}

impl ClaimSession {
    fn new(
        claim_id: &str,
        column: Vec<ScoredDoc>,
        config: &BisectionConfig,
    ) -> Result<Self, PbaError> {
        let mut session = ClaimSession {
            claim_id: claim_id.to_string(),
            column,
            state: BisectionState::init(config.clone())?,
            log: Vec::new(),
            undos: 0,
        };
        session.settle();
        Ok(session)
    }

    pub fn claim_id(&self) -> &str {
        &self.claim_id
    }

    pub fn state(&self) -> &BisectionState {
        &self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Bumped by every answer and every undo, never reused.
    pub fn version(&self) -> u64 {
        self.log.len() as u64 + 2 * self.undos
    }

    pub fn report(&self) -> Option<ThresholdReport> {
        self.state.finalize(&self.claim_id).ok()
    }

    /// The document awaiting an answer, if the session is running.
    pub fn current(&self) -> Option<&ScoredDoc> {
        if self.state.status() != SessionStatus::Running {
            return None;
        }
        match self.state.propose_next(&self.column) {
            Proposal::Query(doc) => self.column.iter().find(|d| d.doc_id == doc.doc_id),
            Proposal::Stop(_) => None,
        }
    }

    /// Conclude a running session once the engine has nothing left to ask.
    fn settle(&mut self) {
        if self.state.status() == SessionStatus::Running
            && matches!(self.state.propose_next(&self.column), Proposal::Stop(_))
        {
            self.state.conclude();
        }
    }

    fn rebuild(&mut self, config: &BisectionConfig) -> Result<(), PbaError> {
        let mut state = BisectionState::init(config.clone())?;
        state.apply_log(&self.log)?;
        self.state = state;
        self.settle();
        Ok(())
    }

    fn header(&self) -> LogHeader {
        LogHeader {
            format: FORMAT_VERSION.to_string(),
            claim_id: self.claim_id.clone(),
            undos: self.undos,
        }
    }

    fn answer(&mut self, logs: &Path, doc_id: &str, entails: bool) -> Result<(), CampaignError> {
        let Some(doc) = self.current().cloned() else {
            return Err(self.finished());
        };
        if doc.doc_id != doc_id {
            return Err(CampaignError::WrongDocument {
                expected: doc.doc_id,
                given: doc_id.to_string(),
            });
        }
        let entry = LogEntry {
            step: self.log.len() + 1,
            doc_id: doc.doc_id.clone(),
            s_t: doc.score,
            entails,
        };
        let path = logs.join(log_file_name(&self.claim_id));
        append_entry(&path, &self.header(), &entry)?;
        let outcome = self.state.record(&entry.doc_id, entry.s_t, entry.entails)?;
        debug_assert_eq!(outcome, UpdateOutcome::Applied);
        self.log.push(entry);
        self.settle();
        Ok(())
    }

    fn undo(&mut self, logs: &Path, config: &BisectionConfig) -> Result<(), CampaignError> {
        if self.log.is_empty() {
            return Err(CampaignError::NothingToUndo(self.claim_id.clone()));
        }
        self.log.pop();
        self.undos += 1;
        let path = logs.join(log_file_name(&self.claim_id));
        let mut contents = jsonl::to_line(&self.header());
        for entry in &self.log {
            contents.push_str(&jsonl::to_line(entry));
        }
        jsonl::write_atomic(&path, contents.as_bytes()).map_err(io_err(&path))?;
        self.rebuild(config)?;
        Ok(())
    }

    fn finished(&self) -> CampaignError {
        CampaignError::Finished {
            claim_id: self.claim_id.clone(),
            report: self.report().expect("session is terminal"),
        }
    }
}

fn append_entry(path: &Path, header: &LogHeader, entry: &LogEntry) -> Result<(), CampaignError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut text = String::new();
    if fresh {
        text.push_str(&jsonl::to_line(header));
    }
    text.push_str(&jsonl::to_line(entry));
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(text.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))?;
    if fresh {
        sync_dir(path.parent());
    }
    Ok(())
}

fn sync_dir(dir: Option<&Path>) {
    if let Some(dir) = dir {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
}

/// Read a claim log, dropping a torn final line left by a crash mid-append.
fn load_log(path: &Path, claim_id: &str) -> Result<(u64, Vec<LogEntry>), CampaignError> {
    let mut bytes = match fs::read(path) {
        Ok(bytes) => bytes,
        Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok((0, Vec::new())),
        Err(err) => return Err(io_err(path)(err)),
    };
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        bytes.truncate(keep);
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(keep as u64).map_err(io_err(path))?;
        file.sync_all().map_err(io_err(path))?;
    }
    let corrupt = |line: usize, message: String| CampaignError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let text = std::str::from_utf8(&bytes).map_err(|e| corrupt(0, e.to_string()))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok((0, Vec::new()));
    };
    let header: LogHeader = serde_json::from_str(first).map_err(|e| corrupt(1, e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(corrupt(
            1,
            format!("unsupported format {:?}", header.format),
        ));
    }
    if header.claim_id != claim_id {
        return Err(corrupt(
            1,
            format!("log belongs to claim {:?}", header.claim_id),
        ));
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let entry: LogEntry =
            serde_json::from_str(line).map_err(|e| corrupt(idx + 1, e.to_string()))?;
        entries.push(entry);
    }
    Ok((header.undos, entries))
}

/// What the annotator is asked to judge.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationItem<'a> {
    pub claim: &'a ClaimDef,
    pub doc_id: &'a str,
    pub doc_text: Option<&'a str>,
    pub score: f64,
    pub step: usize,
    pub median: f64,
    pub ci_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Entails(bool),
    Undo,
    Quit,
}

pub trait Annotator {
    fn answer(&mut self, item: &AnnotationItem<'_>) -> Result<Answer, CampaignError>;

    /// Informational message (e.g. an undo with nothing to undo).
    fn notice(&mut self, _message: &str) {}
}

/// Per-claim dashboard row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimSummary {
    pub claim_id: String,
    pub text: String,
    pub status: ClaimProgress,
    pub annotations: usize,
    pub median: f64,
    pub ci_width: f64,
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimProgress {
    Pending,
    Running,
    Complete,
    EarlyStop,
    Capped,
}

/// Snapshot of a session after an answer or undo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub claim_id: String,
    pub version: u64,
    pub median: f64,
    pub ci_width: f64,
    pub annotations_used: usize,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignRun {
    /// Reports of finished sessions, in claim order.
    pub reports: Vec<ThresholdReport>,
    /// The annotator asked to stop before every session finished.
    pub quit: bool,
}

pub struct Campaign {
    dir: PathBuf,
    meta: CampaignMeta,
    taxonomy: Taxonomy,
    scores: ScoreMatrix,
    documents: HashMap<String, Document>,
    sessions: Vec<ClaimSession>,
}

impl std::fmt::Debug for Campaign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Campaign")
            .field("dir", &self.dir)
            .field("campaign_id", &self.meta.campaign_id)
            .finish_non_exhaustive()
    }
}

impl Campaign {
    /// Validate inputs and persist a fresh campaign under `dir`.
    pub fn create(dir: &Path, new: NewCampaign) -> Result<Campaign, CampaignError> {
        if !valid_campaign_id(&new.campaign_id) {
            return Err(CampaignError::Invalid(format!(
                "campaign id {:?} must be 1-128 characters of [A-Za-z0-9_-]",
                new.campaign_id
            )));
        }
        new.config.validate()?;
        if new.config.range != new.scores.range() {
            return Err(CampaignError::Invalid(format!(
                "config range [{}, {}] differs from the score range [{}, {}]",
                new.config.range.lo,
                new.config.range.hi,
                new.scores.range().lo,
                new.scores.range().hi
            )));
        }
        if new.scores.doc_ids().is_empty() {
            return Err(CampaignError::Invalid(
                "score matrix has no documents".into(),
            ));
        }
        let discrepancies = validate_against_scores(&new.taxonomy, &new.scores);
        if !discrepancies.is_empty() {
            return Err(CampaignError::Discrepancies(discrepancies));
        }
        if dir.join(CAMPAIGN_FILE).exists() {
            return Err(CampaignError::AlreadyExists(dir.to_path_buf()));
        }
        let logs = dir.join(LOGS_DIR);
        fs::create_dir_all(&logs).map_err(io_err(&logs))?;

        let write = |name: &str, contents: &[u8]| {
            let path = dir.join(name);
            jsonl::write_atomic(&path, contents).map_err(io_err(&path))
        };
        write(TAXONOMY_FILE, new.taxonomy.to_json().as_bytes())?;
        write(SCORES_FILE, new.scores.to_jsonl().as_bytes())?;
        if !new.documents.is_empty() {
            write(DATASET_FILE, dataset_to_jsonl(&new.documents).as_bytes())?;
        }
        let meta = CampaignMeta {
            format: FORMAT_VERSION.to_string(),
            campaign_id: new.campaign_id,
            taxonomy_id: new.taxonomy.taxonomy_id.clone(),
            config: new.config,
            claims: new.taxonomy.claim_ids().map(str::to_string).collect(),
        };
        let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        meta_json.push('\n');
        // campaign.json goes last: its presence marks a fully written campaign.
        write(CAMPAIGN_FILE, meta_json.as_bytes())?;
        Self::open(dir)
    }

    /// Load a campaign and replay every claim log.
    pub fn open(dir: &Path) -> Result<Campaign, CampaignError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(io_err(&path))
        };
        let meta_path = dir.join(CAMPAIGN_FILE);
        if !meta_path.exists() {
            return Err(CampaignError::NotFound(dir.to_path_buf()));
        }
        let meta: CampaignMeta =
            serde_json::from_slice(&read(CAMPAIGN_FILE)?).map_err(|e| CampaignError::Corrupt {
                path: meta_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
        if meta.format != FORMAT_VERSION {
            return Err(CampaignError::Invalid(format!(
                "unsupported campaign format {:?}",
                meta.format
            )));
        }
        let taxonomy = parse_taxonomy(&read(TAXONOMY_FILE)?)?;
        let kind = peek_score_kind(&read(SCORES_FILE)?)?;
        let scores = ingest_scores(&read(SCORES_FILE)?, kind)?;
        let documents = if dir.join(DATASET_FILE).exists() {
            parse_dataset(&read(DATASET_FILE)?)?
        } else {
            Vec::new()
        };
        let documents = documents
            .into_iter()
            .map(|d| (d.doc_id.clone(), d))
            .collect();

        let logs = dir.join(LOGS_DIR);
        let mut sessions = Vec::with_capacity(meta.claims.len());
        for claim_id in &meta.claims {
            if taxonomy.claim(claim_id).is_none() {
                return Err(CampaignError::UnknownClaim(claim_id.clone()));
            }
            let mut session = ClaimSession::new(claim_id, scores.column(claim_id)?, &meta.config)?;
            let path = logs.join(log_file_name(claim_id));
            let (undos, log) = load_log(&path, claim_id)?;
            session.undos = undos;
            session.log = log;
            session
                .rebuild(&meta.config)
                .map_err(|e| CampaignError::Corrupt {
                    path: path.clone(),
                    line: 0,
                    message: e.to_string(),
                })?;
            sessions.push(session);
        }
        Ok(Campaign {
            dir: dir.to_path_buf(),
            meta,
            taxonomy,
            scores,
            documents,
            sessions,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &CampaignMeta {
        &self.meta
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn scores(&self) -> &ScoreMatrix {
        &self.scores
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn sessions(&self) -> &[ClaimSession] {
        &self.sessions
    }

    pub fn session(&self, claim_id: &str) -> Result<&ClaimSession, CampaignError> {
        self.sessions
            .iter()
            .find(|s| s.claim_id == claim_id)
            .ok_or_else(|| CampaignError::UnknownClaim(claim_id.to_string()))
    }

    fn session_index(&self, claim_id: &str) -> Result<usize, CampaignError> {
        self.sessions
            .iter()
            .position(|s| s.claim_id == claim_id)
            .ok_or_else(|| CampaignError::UnknownClaim(claim_id.to_string()))
    }

    fn logs_dir(&self) -> PathBuf {
        self.dir.join(LOGS_DIR)
    }

    pub fn reports(&self) -> Vec<ThresholdReport> {
        self.sessions
            .iter()
            .filter_map(ClaimSession::report)
            .collect()
    }

    fn write_reports(&self) -> Result<(), CampaignError> {
        let path = self.dir.join(REPORTS_FILE);
        let body = ReportSet::new(self.reports()).to_json();
        jsonl::write_atomic(&path, body.as_bytes()).map_err(io_err(&path))
    }

    pub fn summaries(&self) -> Vec<ClaimSummary> {
        self.sessions
            .iter()
            .map(|s| {
                let state = s.state();
                let status = match state.status() {
                    SessionStatus::Running if s.log.is_empty() => ClaimProgress::Pending,
                    SessionStatus::Running => ClaimProgress::Running,
                    SessionStatus::Complete => ClaimProgress::Complete,
                    SessionStatus::EarlyStop => ClaimProgress::EarlyStop,
                    SessionStatus::Capped => ClaimProgress::Capped,
                };
                let text = self
                    .taxonomy
                    .claim(&s.claim_id)
                    .map(|c| c.text.clone())
                    .unwrap_or_default();
                ClaimSummary {
                    claim_id: s.claim_id.clone(),
                    text,
                    status,
                    annotations: state.annotations_used(),
                    median: state.median(),
                    ci_width: state.ci_width(),
                    version: s.version(),
                    threshold: s.report().map(|r| r.threshold),
                }
            })
            .collect()
    }

    pub fn snapshot(&self, claim_id: &str) -> Result<SessionSnapshot, CampaignError> {
        let s = self.session(claim_id)?;
        Ok(SessionSnapshot {
            claim_id: s.claim_id.clone(),
            version: s.version(),
            median: s.state.median(),
            ci_width: s.state.ci_width(),
            annotations_used: s.state.annotations_used(),
            status: s.state.status(),
        })
    }

    /// Record an answer for the document currently proposed for `claim_id`.
    /// The log entry is on disk before the in-memory state changes.
    pub fn record_answer(
        &mut self,
        claim_id: &str,
        doc_id: &str,
        entails: bool,
        expected_version: Option<u64>,
    ) -> Result<SessionSnapshot, CampaignError> {
        let idx = self.session_index(claim_id)?;
        let logs = self.logs_dir();
        let session = &mut self.sessions[idx];
        if let Some(given) = expected_version {
            if given != session.version() {
                return Err(CampaignError::StaleVersion {
                    given,
                    current: session.version(),
                });
            }
        }
        session.answer(&logs, doc_id, entails)?;
        if session.state.status().is_terminal() {
            self.write_reports()?;
        }
        self.snapshot(claim_id)
    }

    /// Drop the last answer for `claim_id` and rebuild its state from the log.
    pub fn undo_last(&mut self, claim_id: &str) -> Result<&BisectionState, CampaignError> {
        let idx = self.session_index(claim_id)?;
        let logs = self.logs_dir();
        let was_terminal = self.sessions[idx].state.status().is_terminal();
        self.sessions[idx].undo(&logs, &self.meta.config)?;
        if was_terminal {
            self.write_reports()?;
        }
        Ok(&self.sessions[idx].state)
    }

    fn item_for<'a>(
        taxonomy: &'a Taxonomy,
        documents: &'a HashMap<String, Document>,
        session: &'a ClaimSession,
        doc: &'a ScoredDoc,
    ) -> AnnotationItem<'a> {
        AnnotationItem {
            claim: taxonomy
                .claim(&session.claim_id)
                .expect("claims checked at open"),
            doc_id: &doc.doc_id,
            doc_text: documents.get(&doc.doc_id).map(|d| d.text.as_str()),
            score: doc.score,
            step: session.log.len() + 1,
            median: session.state.median(),
            ci_width: session.state.ci_width(),
        }
    }

    fn drive_session(
        taxonomy: &Taxonomy,
        documents: &HashMap<String, Document>,
        config: &BisectionConfig,
        logs: &Path,
        session: &mut ClaimSession,
        annotator: &mut dyn Annotator,
    ) -> Result<bool, CampaignError> {
        while let Some(doc) = session.current().cloned() {
            let answer = annotator.answer(&Self::item_for(taxonomy, documents, session, &doc))?;
            match answer {
                Answer::Entails(entails) => session.answer(logs, &doc.doc_id, entails)?,
                Answer::Undo if session.log.is_empty() => annotator.notice("nothing to undo"),
                Answer::Undo => session.undo(logs, config)?,
                Answer::Quit => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Tune every claim in order, resuming where the logs leave off.
    pub fn run(&mut self, annotator: &mut dyn Annotator) -> Result<CampaignRun, CampaignError> {
        let logs = self.logs_dir();
        let mut quit = false;
        for idx in 0..self.sessions.len() {
            let done = Self::drive_session(
                &self.taxonomy,
                &self.documents,
                &self.meta.config,
                &logs,
                &mut self.sessions[idx],
                annotator,
            );
            // Persist whatever finished even if the annotator failed.
            self.write_reports()?;
            if !done? {
                quit = true;
                break;
            }
        }
        Ok(CampaignRun {
            reports: self.reports(),
            quit,
        })
    }

    /// Tune claims concurrently on `jobs` threads, one annotator per claim.
    pub fn run_parallel<A, F>(&mut self, jobs: usize, make: F) -> Result<CampaignRun, CampaignError>
    where
        A: Annotator,
        F: Fn(&str) -> A + Sync,
    {
        let logs = self.logs_dir();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CampaignError::Invalid(e.to_string()))?;
        let (taxonomy, documents, config) = (&self.taxonomy, &self.documents, &self.meta.config);
        let results: Vec<Result<bool, CampaignError>> = pool.install(|| {
            self.sessions
                .par_iter_mut()
                .map(|session| {
                    let mut annotator = make(&session.claim_id);
                    Self::drive_session(taxonomy, documents, config, &logs, session, &mut annotator)
                })
                .collect()
        });
        self.write_reports()?;
        let mut quit = false;
        for result in results {
            quit |= !result?;
        }
        Ok(CampaignRun {
            reports: self.reports(),
            quit,
        })
    }
}

// ---------------------------------------------------------------------------
// Annotators

/// Noiseless answer implied by a document's gold classes.
///
/// A claim is entailed when the document carries a class the claim supports.
/// In stance taxonomies gold labels read `topic:favor` / `topic:against`, a
/// supporting claim matches `favor` and an opposing claim matches `against`.
/// Elsewhere opposing (absence) claims are never implied by gold labels.
pub fn noiseless_answer(gold: &BTreeSet<String>, claim: &ClaimDef, task_kind: TaskKind) -> bool {
    claim.classes.iter().any(|r| match (task_kind, r.polarity) {
        (TaskKind::Stance, Polarity::Supports) => {
            gold.contains(&stance_gold_label(&r.class_id, Stance::Favor))
        }
        (TaskKind::Stance, Polarity::Opposes) => {
            gold.contains(&stance_gold_label(&r.class_id, Stance::Against))
        }
        (_, Polarity::Supports) => gold.contains(&r.class_id),
        (_, Polarity::Opposes) => false,
    })
}

/// Whether the seeded noise flips the answer for this (claim, document).
/// Each pair gets its own stream so answers do not depend on query order.
fn flips(seed: u64, noise: f64, claim_id: &str, doc_id: &str) -> bool {
    if noise <= 0.0 {
        return false;
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((claim_id.len() as u64).to_le_bytes());
    hasher.update(claim_id.as_bytes());
    hasher.update(doc_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key).random::<f64>() < noise
}

pub fn simulate_answer(
    doc: &Document,
    claim: &ClaimDef,
    task_kind: TaskKind,
    noise: f64,
    seed: u64,
) -> Result<bool, CampaignError> {
    let gold = doc.gold_classes.as_ref().ok_or_else(|| {
        CampaignError::Annotator(format!("document {:?} has no gold labels", doc.doc_id))
    })?;
    let clean = noiseless_answer(gold, claim, task_kind);
    Ok(clean ^ flips(seed, noise, &claim.claim_id, &doc.doc_id))
}

/// Answers from gold labels, optionally flipped with probability `noise`.
#[derive(Debug, Clone)]
pub struct SimulatedAnnotator {
    gold: HashMap<String, Option<BTreeSet<String>>>,
    task_kind: TaskKind,
    noise: f64,
    seed: u64,
}

impl SimulatedAnnotator {
    pub fn new(
        documents: &[Document],
        task_kind: TaskKind,
        noise: f64,
        seed: u64,
    ) -> Result<Self, CampaignError> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(CampaignError::Invalid(format!(
                "noise must lie in [0, 1], got {noise}"
            )));
        }
        let gold = documents
            .iter()
            .map(|d| (d.doc_id.clone(), d.gold_classes.clone()))
            .collect();
        Ok(SimulatedAnnotator {
            gold,
            task_kind,
            noise,
            seed,
        })
    }
}

impl Annotator for SimulatedAnnotator {
    fn answer(&mut self, item: &AnnotationItem<'_>) -> Result<Answer, CampaignError> {
        let gold = match self.gold.get(item.doc_id) {
            Some(Some(gold)) => gold,
            _ => {
                return Err(CampaignError::Annotator(format!(
                    "document {:?} has no gold labels",
                    item.doc_id
                )))
            }
        };
        let clean = noiseless_answer(gold, item.claim, self.task_kind);
        Ok(Answer::Entails(
            clean ^ flips(self.seed, self.noise, &item.claim.claim_id, item.doc_id),
        ))
    }
}

/// Replays answers from existing claim logs; quits when a log runs out.
#[derive(Debug, Clone, Default)]
pub struct ReplayAnnotator {
    logs: HashMap<String, VecDeque<LogEntry>>,
}

impl ReplayAnnotator {
    pub fn new(logs: HashMap<String, Vec<LogEntry>>) -> Self {
        ReplayAnnotator {
            logs: logs.into_iter().map(|(k, v)| (k, v.into())).collect(),
        }
    }

    /// Load the logs of another campaign directory.
    pub fn from_campaign(dir: &Path) -> Result<Self, CampaignError> {
        let path = dir.join(CAMPAIGN_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let meta: CampaignMeta =
            serde_json::from_slice(&bytes).map_err(|e| CampaignError::Corrupt {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
        let mut logs = HashMap::new();
        for claim_id in &meta.claims {
            let (_, entries) =
                load_log(&dir.join(LOGS_DIR).join(log_file_name(claim_id)), claim_id)?;
            logs.insert(claim_id.clone(), entries);
        }
        Ok(Self::new(logs))
    }
}

impl Annotator for ReplayAnnotator {
    fn answer(&mut self, item: &AnnotationItem<'_>) -> Result<Answer, CampaignError> {
        let Some(queue) = self.logs.get_mut(&item.claim.claim_id) else {
            return Ok(Answer::Quit);
        };
        let Some(entry) = queue.pop_front() else {
            return Ok(Answer::Quit);
        };
        if entry.doc_id != item.doc_id {
            return Err(CampaignError::Annotator(format!(
                "replay diverged for {:?} at step {}: log has {:?}, engine proposed {:?}",
                item.claim.claim_id, item.step, entry.doc_id, item.doc_id
            )));
        }
        Ok(Answer::Entails(entry.entails))
    }
}
