//! Speculative decoding with a pivot-aware acceptance gate, at desk scale.
//!
//! Everything runs against small synthetic table models so that the
//! statistical claims — lossless verification, utility preservation under an
//! exact gate, classifier quality — can be checked against closed-form or
//! brute-force oracles instead of eyeballed. The crate is deterministic end
//! to end: every source of randomness is a [`rand_chacha::ChaCha8Rng`] on a
//! derived stream, and parallel and sequential builds (feature `parallel`)
//! produce identical bytes.
//!
//! Module map, roughly in pipeline order:
//!
//! * [`dist`], [`model`] — distributions, sampling adjustments, synthetic
//!   target/draft pairs;
//! * [`verify`], [`decode`] — draft/verify blocks and full decoding loops;
//! * [`gate`] — the pivot gate that overrides coin rejections;
//! * [`utility`] — task utilities, rollout and exact estimates, the
//!   preservation check;
//! * [`label`] — harvesting rejected candidates into labeled training data;
//! * [`classifier`] — the pivot scorer MLP, its trainer, and ROC analysis;
//! * [`replay`] — recorded transcripts for paired policy comparisons;
//! * [`sim`] — the latency model and run reports;
//! * [`format`], [`par`], [`error`] — shared plumbing.

pub mod classifier;
pub mod decode;
pub mod dist;
pub mod error;
pub mod format;
pub mod gate;
pub mod label;
pub mod model;
pub mod par;
pub mod replay;
pub mod sim;
pub mod utility;
pub mod verify;

pub use dist::{Distribution, GenerationParams, TokenId, EOS};
pub use error::{CoreError, Result};
