//! Desk-scale head-CT triage pipeline.
//!
//! The crate covers the full loop: synthesize labeled head phantoms
//! ([`phantom`]), serialize them as a minimal DICOM subset ([`dicom`]),
//! train a small inception-style multi-label classifier with a
//! tier-masked loss ([`net`], [`taxonomy`]), pool slice posteriors into
//! confidence-gated study verdicts ([`aggregate`]), and evaluate with
//! ROC / bootstrap-CI / miss-rate metrics ([`eval`]).

pub mod aggregate;
pub mod dicom;
pub mod eval;
pub mod net;
pub mod phantom;
pub mod plot;
pub mod seeded;
pub mod taxonomy;
pub mod tensor;
