//! Probabilistic bisection over a claim's decision threshold.
//!
//! The location of the threshold is tracked as a discrete distribution over
//! an evenly spaced grid covering the score range. Each step proposes the
//! unannotated document whose score is nearest the current median, asks the
//! annotator whether it entails the claim, and applies Bayes' rule with an
//! annotator that is right with probability `p`:
//!
//! * "does not entail" at score `s`: grid points `>= s` get likelihood `p`,
//!   points `< s` get `q = 1 - p`;
//! * "entails": the reverse.
//!
//! When the query sits exactly on a half-mass split the two sides are scaled
//! by `2p` and `2q`.
//!
//! A query is only useful while the side an answer would scale up holds less
//! than `p` of the mass. A candidate is *admissible* when that holds for both
//! possible answers; the engine proposes the nearest admissible candidate and
//! signals an early stop when none is left.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::{ScoreRange, ScoredDoc};

/// Slack used when comparing accumulated masses against 0.5 or a target.
const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PbaError {
    #[error("invalid bisection config: {0}")]
    InvalidConfig(String),
    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),
    #[error("session is not running (status {0:?})")]
    NotRunning(SessionStatus),
    #[error("session is still running")]
    StillRunning,
    #[error("score {score} is outside [{lo}, {hi}]")]
    ScoreOutOfRange { score: f64, lo: f64, hi: f64 },
    #[error("document {0:?} was already annotated")]
    AlreadyAnnotated(String),
    #[error("annotation log entry {step}: {message}")]
    Replay { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BisectionConfig {
    /// Probability that an answer points the right way.
    pub p: f64,
    pub grid_size: usize,
    pub completion_ci_mass: f64,
    /// Absolute width, in score units, the credible interval must fit in.
    pub completion_ci_width: f64,
    #[serde(default)]
    pub max_annotations: Option<usize>,
    pub range: ScoreRange,
    /// End the session as soon as the completion target is met. When false
    /// the session runs until candidates are exhausted or the cap is hit and
    /// is labeled complete or early stop from its final interval.
    #[serde(default = "default_true")]
    pub stop_on_complete: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BisectionConfig {
    fn default() -> Self {
        BisectionConfig {
            p: 0.7,
            grid_size: 1001,
            completion_ci_mass: 0.95,
            completion_ci_width: 0.20,
            max_annotations: None,
            range: ScoreRange { lo: 0.0, hi: 1.0 },
            stop_on_complete: true,
        }
    }
}

impl BisectionConfig {
    pub fn with_range(mut self, range: ScoreRange) -> Self {
        self.range = range;
        self
    }

    pub fn validate(&self) -> Result<(), PbaError> {
        self.validate_shape()?;
        if !(self.p > 0.5 && self.p < 1.0) {
            return Err(PbaError::InvalidConfig(format!(
                "p must lie in (0.5, 1), got {}",
                self.p
            )));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<(), PbaError> {
        let bad = |msg: String| Err(PbaError::InvalidConfig(msg));
        if !(self.range.lo.is_finite()
            && self.range.hi.is_finite()
            && self.range.lo < self.range.hi)
        {
            return bad(format!(
                "range must satisfy lo < hi, got [{}, {}]",
                self.range.lo, self.range.hi
            ));
        }
        if self.grid_size < 2 {
            return bad(format!(
                "grid_size must be at least 2, got {}",
                self.grid_size
            ));
        }
        if !(self.completion_ci_mass > 0.0 && self.completion_ci_mass < 1.0) {
            return bad(format!(
                "completion_ci_mass must lie in (0, 1), got {}",
                self.completion_ci_mass
            ));
        }
        if !(self.completion_ci_width > 0.0 && self.completion_ci_width <= self.range.width()) {
            return bad(format!(
                "completion_ci_width must lie in (0, {}], got {}",
                self.range.width(),
                self.completion_ci_width
            ));
        }
        if self.max_annotations == Some(0) {
            return bad("max_annotations must be positive when set".into());
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must lie in (0, 1], got {}", self.p));
        }
        Ok(())
    }

    pub fn q(&self) -> f64 {
        1.0 - self.p
    }

    /// Evenly spaced grid over the range, endpoints included.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_size;
        let step = self.range.width() / (n - 1) as f64;
        (0..n)
            .map(|k| {
                if k == n - 1 {
                    self.range.hi
                } else {
                    self.range.lo + step * k as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Complete,
    EarlyStop,
    Capped,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Running
    }
}

/// Why [`BisectionState::propose_next`] declined to propose a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every document has been annotated.
    Exhausted,
    /// Every remaining document sits where one of the answers would have to
    /// scale up a side already holding at least `p` of the mass.
    ScaleLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Query(ScoredDoc),
    Stop(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// The answer would scale up a side holding `>= p` of the mass; the
    /// posterior is untouched and the session ends as an early stop.
    Rejected,
}

/// Smallest grid interval holding a given share of the mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub lo: f64,
    pub hi: f64,
}

impl CredibleInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone)]
pub struct BisectionState {
    config: BisectionConfig,
    grid: Vec<f64>,
    masses: Vec<f64>,
    median: f64,
    interval: CredibleInterval,
    annotations_used: usize,
    status: SessionStatus,
    annotated: BTreeSet<String>,
}

/// Side masses around a query point: `lower` sums grid points strictly below
/// it, `upper` the rest. Summation order is fixed (forward for the lower
/// side, backward for the upper) so proposals and updates agree bit for bit.
#[derive(Debug, Clone, Copy)]
struct Split {
    index: usize,
    lower: f64,
    upper: f64,
}

impl BisectionState {
    /// Uniform prior over the grid.
    pub fn init(config: BisectionConfig) -> Result<Self, PbaError> {
        config.validate()?;
        Ok(Self::uniform(config))
    }

    /// Like [`init`](Self::init) but accepts `p = 1` (and `p <= 0.5`), for
    /// studying the noiseless limit. Other fields are still validated.
    pub fn init_unchecked(config: BisectionConfig) -> Result<Self, PbaError> {
        config.validate_shape()?;
        Ok(Self::uniform(config))
    }

    fn uniform(config: BisectionConfig) -> Self {
        let n = config.grid_size;
        let masses = vec![1.0 / n as f64; n];
        Self::with_masses(config, masses)
    }

    /// Start from an arbitrary posterior. Masses must be non-negative and
    /// sum to one within 1e-12.
    pub fn from_masses(config: BisectionConfig, masses: Vec<f64>) -> Result<Self, PbaError> {
        config.validate_shape()?;
        if masses.len() != config.grid_size {
            return Err(PbaError::InvalidPosterior(format!(
                "expected {} masses, got {}",
                config.grid_size,
                masses.len()
            )));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(PbaError::InvalidPosterior(
                "masses must be finite and non-negative".into(),
            ));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_EPS {
            return Err(PbaError::InvalidPosterior(format!(
                "masses sum to {total}, not 1"
            )));
        }
        Ok(Self::with_masses(config, masses))
    }

    fn with_masses(config: BisectionConfig, masses: Vec<f64>) -> Self {
        let grid = config.grid();
        let mut state = BisectionState {
            config,
            grid,
            masses,
            median: 0.0,
            interval: CredibleInterval { lo: 0.0, hi: 0.0 },
            annotations_used: 0,
            status: SessionStatus::Running,
            annotated: BTreeSet::new(),
        };
        state.refresh();
        state
    }

    pub fn config(&self) -> &BisectionConfig {
        &self.config
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn median(&self) -> f64 {
        self.median
    }

    pub fn credible_interval(&self) -> CredibleInterval {
        self.interval
    }

    pub fn ci_width(&self) -> f64 {
        self.interval.width()
    }

    pub fn annotations_used(&self) -> usize {
        self.annotations_used
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn is_annotated(&self, doc_id: &str) -> bool {
        self.annotated.contains(doc_id)
    }

    pub fn annotated_docs(&self) -> &BTreeSet<String> {
        &self.annotated
    }

    /// Cumulative mass at each grid point, `F(x_k) = sum of masses[..=k]`.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect()
    }

    /// Mass on grid points strictly below `s`.
    pub fn mass_below(&self, s: f64) -> f64 {
        self.split(s).lower
    }

    fn split_index(&self, s: f64) -> usize {
        self.grid.partition_point(|&x| x < s)
    }

    fn split(&self, s: f64) -> Split {
        let index = self.split_index(s);
        let lower = self.masses[..index].iter().fold(0.0, |acc, m| acc + m);
        let upper = self.masses[index..]
            .iter()
            .rev()
            .fold(0.0, |acc, m| acc + m);
        Split {
            index,
            lower,
            upper,
        }
    }

    fn admissible(&self, lower: f64, upper: f64) -> bool {
        lower < self.config.p && upper < self.config.p
    }

    /// Whether a query at `s` leaves both answers informative.
    pub fn is_admissible(&self, s: f64) -> bool {
        let split = self.split(s);
        self.admissible(split.lower, split.upper)
    }

    fn refresh(&mut self) {
        self.median = self.compute_median();
        self.interval = self.compute_interval(self.config.completion_ci_mass);
    }

    /// Smallest grid point whose cumulative mass reaches one half.
    fn compute_median(&self) -> f64 {
        let mut acc = 0.0;
        for (x, m) in self.grid.iter().zip(&self.masses) {
            acc += m;
            if acc >= 0.5 - MASS_EPS {
                return *x;
            }
        }
        *self.grid.last().expect("grid is never empty")
    }

    /// Narrowest run of consecutive grid points holding at least `mass`.
    pub fn compute_interval(&self, mass: f64) -> CredibleInterval {
        let n = self.masses.len();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for m in &self.masses {
            acc += m;
            prefix.push(acc);
        }
        let target = mass - MASS_EPS;
        let mut best = CredibleInterval {
            lo: self.grid[0],
            hi: self.grid[n - 1],
        };
        let mut i = 0;
        for j in 0..n {
            if prefix[j + 1] - prefix[i] < target {
                continue;
            }
            while i < j && prefix[j + 1] - prefix[i + 1] >= target {
                i += 1;
            }
            if self.grid[j] - self.grid[i] < best.width() {
                best = CredibleInterval {
                    lo: self.grid[i],
                    hi: self.grid[j],
                };
            }
        }
        best
    }

    fn interval_is_narrow(&self) -> bool {
        self.interval.width() <= self.config.completion_ci_width + MASS_EPS
    }

    /// Pick the next document to annotate from a score column (any order).
    ///
    /// Unannotated admissible candidates compete on distance to the median,
    /// then lower score, then doc id.
    pub fn propose_next(&self, column: &[ScoredDoc]) -> Proposal {
        let n = self.masses.len();
        // lower[k]: forward sum of masses[..k]; upper[k]: backward sum of masses[k..].
        let mut lower = vec![0.0; n + 1];
        for k in 0..n {
            lower[k + 1] = lower[k] + self.masses[k];
        }
        let mut upper = vec![0.0; n + 1];
        for k in (0..n).rev() {
            upper[k] = upper[k + 1] + self.masses[k];
        }

        let mut any_unannotated = false;
        let mut best: Option<(&ScoredDoc, f64)> = None;
        for cand in column {
            if self.annotated.contains(&cand.doc_id) {
                continue;
            }
            any_unannotated = true;
            let k = self.split_index(cand.score);
            if !self.admissible(lower[k], upper[k]) {
                continue;
            }
            let dist = (cand.score - self.median).abs();
            let better = match best {
                None => true,
                Some((b, bd)) => {
                    if (dist - bd).abs() > MASS_EPS {
                        dist < bd
                    } else {
                        (cand.score, &cand.doc_id) < (b.score, &b.doc_id)
                    }
                }
            };
            if better {
                best = Some((cand, dist));
            }
        }
        match best {
            Some((cand, _)) => Proposal::Query(cand.clone()),
            None if any_unannotated => Proposal::Stop(StopReason::ScaleLimit),
            None => Proposal::Stop(StopReason::Exhausted),
        }
    }

    /// Bayes update for an answer at score `s_t`.
    pub fn update(&mut self, s_t: f64, entails: bool) -> Result<UpdateOutcome, PbaError> {
        if self.status.is_terminal() {
            return Err(PbaError::NotRunning(self.status));
        }
        let range = self.config.range;
        if !(s_t.is_finite() && range.contains(s_t)) {
            return Err(PbaError::ScoreOutOfRange {
                score: s_t,
                lo: range.lo,
                hi: range.hi,
            });
        }
        let Split {
            index,
            lower,
            upper,
        } = self.split(s_t);
        let (p, q) = (self.config.p, self.config.q());
        // "entails" puts the threshold below s_t.
        let (lik_lower, lik_upper) = if entails { (p, q) } else { (q, p) };
        let raised = if entails { lower } else { upper };
        let evidence = lik_lower * lower + lik_upper * upper;
        if raised >= p || evidence <= 0.0 {
            self.status = SessionStatus::EarlyStop;
            return Ok(UpdateOutcome::Rejected);
        }

        let scale_lower = lik_lower / evidence;
        let scale_upper = lik_upper / evidence;
        for m in &mut self.masses[..index] {
            *m *= scale_lower;
        }
        for m in &mut self.masses[index..] {
            *m *= scale_upper;
        }
        self.annotations_used += 1;
        self.refresh();

        if self.config.stop_on_complete && self.interval_is_narrow() {
            self.status = SessionStatus::Complete;
        } else if self
            .config
            .max_annotations
            .is_some_and(|cap| self.annotations_used >= cap)
        {
            self.status = if self.interval_is_narrow() {
                SessionStatus::Complete
            } else {
                SessionStatus::Capped
            };
        }
        Ok(UpdateOutcome::Applied)
    }

    /// Update for a specific document, remembering it so it is not proposed
    /// again.
    pub fn record(
        &mut self,
        doc_id: &str,
        s_t: f64,
        entails: bool,
    ) -> Result<UpdateOutcome, PbaError> {
        if self.status.is_terminal() {
            return Err(PbaError::NotRunning(self.status));
        }
        if self.annotated.contains(doc_id) {
            return Err(PbaError::AlreadyAnnotated(doc_id.to_string()));
        }
        let outcome = self.update(s_t, entails)?;
        self.annotated.insert(doc_id.to_string());
        Ok(outcome)
    }

    /// End a running session after a stop signal; the label follows the
    /// final credible interval.
    pub fn conclude(&mut self) {
        if self.status == SessionStatus::Running {
            self.status = if self.interval_is_narrow() {
                SessionStatus::Complete
            } else {
                SessionStatus::EarlyStop
            };
        }
    }

    pub fn finalize(&self, claim_id: &str) -> Result<ThresholdReport, PbaError> {
        if self.status == SessionStatus::Running {
            return Err(PbaError::StillRunning);
        }
        Ok(ThresholdReport {
            claim_id: claim_id.to_string(),
            threshold: self.median,
            ci_width: self.interval.width(),
            annotations: self.annotations_used,
            status: self.status,
        })
    }

    /// Aggregate the posterior into at most `max_points` bins of adjacent grid
    /// points; each bin reports its mean position and total mass.
    pub fn downsample(&self, max_points: usize) -> Vec<PosteriorPoint> {
        let n = self.masses.len();
        let bins = max_points.clamp(1, n);
        (0..bins)
            .map(|b| {
                let start = b * n / bins;
                let end = (b + 1) * n / bins;
                let mass = self.masses[start..end].iter().sum();
                let x = self.grid[start..end].iter().sum::<f64>() / (end - start) as f64;
                PosteriorPoint { x, mass }
            })
            .collect()
    }

    /// Rebuild a state by replaying an annotation log from the prior.
    pub fn replay(config: BisectionConfig, log: &[LogEntry]) -> Result<Self, PbaError> {
        let mut state = Self::init(config)?;
        state.apply_log(log)?;
        Ok(state)
    }

    pub(crate) fn apply_log(&mut self, log: &[LogEntry]) -> Result<(), PbaError> {
        for (i, entry) in log.iter().enumerate() {
            let expected = i + 1;
            if entry.step != expected {
                return Err(PbaError::Replay {
                    step: entry.step,
                    message: format!("expected step {expected}"),
                });
            }
            self.record(&entry.doc_id, entry.s_t, entry.entails)
                .map_err(|err| PbaError::Replay {
                    step: entry.step,
                    message: err.to_string(),
                })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPoint {
    pub x: f64,
    pub mass: f64,
}

/// Outcome of tuning one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub claim_id: String,
    pub threshold: f64,
    pub ci_width: f64,
    pub annotations: usize,
    pub status: SessionStatus,
}

/// One answered query, as stored in annotation logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub step: usize,
    pub doc_id: String,
    pub s_t: f64,
    pub entails: bool,
}

/// What the annotator is shown for one step.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub step: usize,
    pub doc_id: &'a str,
    pub score: f64,
    pub median: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("annotator failed: {0}")]
pub struct OracleError(pub String);

/// Answers "does this document entail the claim?".
pub trait Oracle {
    fn ask(&mut self, query: &Query<'_>) -> Result<bool, OracleError>;
}

impl<F> Oracle for F
where
    F: FnMut(&Query<'_>) -> Result<bool, OracleError>,
{
    fn ask(&mut self, query: &Query<'_>) -> Result<bool, OracleError> {
        self(query)
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub report: ThresholdReport,
    pub log: Vec<LogEntry>,
    /// Median after each annotation; index 0 is the prior median.
    pub medians: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{source}")]
    Oracle {
        source: OracleError,
        partial_log: Vec<LogEntry>,
    },
    #[error(transparent)]
    Engine(#[from] PbaError),
}

/// Drive a session to completion with an oracle.
pub fn run_session(
    claim_id: &str,
    config: BisectionConfig,
    column: &[ScoredDoc],
    oracle: &mut dyn Oracle,
) -> Result<SessionOutcome, SessionError> {
    let mut state = BisectionState::init(config)?;
    drive(&mut state, column, oracle, &mut |_: &LogEntry| Ok(())).map(|(log, medians)| {
        SessionOutcome {
            report: state.finalize(claim_id).expect("session ended"),
            log,
            medians,
        }
    })
}

/// Continue a running state until it stops; returns the new log entries and
/// the median trajectory (starting with the current median).
pub(crate) fn drive(
    state: &mut BisectionState,
    column: &[ScoredDoc],
    oracle: &mut dyn Oracle,
    sink: &mut dyn FnMut(&LogEntry) -> Result<(), OracleError>,
) -> Result<(Vec<LogEntry>, Vec<f64>), SessionError> {
    let mut log = Vec::new();
    let mut medians = vec![state.median()];
    let first_step = state.annotations_used() + 1;
    while state.status() == SessionStatus::Running {
        let cand = match state.propose_next(column) {
            Proposal::Query(cand) => cand,
            Proposal::Stop(_) => {
                state.conclude();
                break;
            }
        };
        let step = first_step + log.len();
        let query = Query {
            step,
            doc_id: &cand.doc_id,
            score: cand.score,
            median: state.median(),
        };
        let entails = oracle.ask(&query).map_err(|source| SessionError::Oracle {
            source,
            partial_log: log.clone(),
        })?;
        let entry = LogEntry {
            step,
            doc_id: cand.doc_id.clone(),
            s_t: cand.score,
            entails,
        };
        sink(&entry).map_err(|source| SessionError::Oracle {
            source,
            partial_log: log.clone(),
        })?;
        state.record(&entry.doc_id, entry.s_t, entry.entails)?;
        log.push(entry);
        medians.push(state.median());
    }
    Ok((log, medians))
}
