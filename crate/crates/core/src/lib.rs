//! Feature-space zero-shot classifier with a generalization branch, a bank
//! of balanced specialization sub-modules with learned dataset gates, and
//! calibrated generalized evaluation.
//!
//! Everything is deterministic for a given seed: one seeded ChaCha stream per
//! concern, ordered containers throughout, and fixed reduction order even on
//! the rayon-parallel paths (`parallel` feature, on by default).

pub mod bsnet;
pub mod dataforge;
pub mod error;
pub mod eval;
pub mod gnet;
pub mod gradcheck;
pub mod numkit;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
