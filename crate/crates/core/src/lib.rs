//! Claim-based text classification with per-claim thresholds tuned by
//! probabilistic bisection.
//!
//! The pipeline has four stages, each backed by a module:
//!
//! 1. [`taxonomy`]: declare claims and the logic that maps detected claims
//!    to classes.
//! 2. [`scores`]: ingest (or fetch) a dense document x claim score matrix.
//! 3. [`pba`] and [`annotation`]: tune one decision threshold per claim by
//!    asking an annotator about a handful of documents picked by the
//!    bisection engine.
//! 4. [`classify`]: apply the thresholds and the taxonomy to label documents.
//!
//! [`eval`] holds metrics and the experiment harnesses; [`synthetic`]
//! generates seeded synthetic score columns for them.

pub mod annotation;
pub mod classify;
pub mod eval;
pub mod pba;
pub mod scores;
pub mod synthetic;
pub mod taxonomy;

mod jsonl;

/// Version tag carried by every persisted file and API payload.
pub const FORMAT_VERSION: &str = "claimsect/v1";
