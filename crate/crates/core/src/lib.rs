//! Long-term action anticipation from clip features and prompt-guided object tokens.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`] — dense tensors, a reverse-mode tape and a finite-difference checker.
//! * [`datastore`] — annotation/detection JSON-lines and the `FPK1` feature pack.
//! * [`prompts`] — object-prompt vocabularies (most common, k-means, fixed list).
//! * [`tokens`] — frame sampling, detection filtering and object feature assembly.
//! * [`pte`] — the predictive transformer encoder and its decoders.
//! * [`train`] — loss, optimizer, schedule, DropToken and the training loop.
//! * [`evalkit`] — candidate generation and the edit-distance / accuracy metrics.
//! * [`rollout`] — attention rollout and object retrieval.
//! * [`synthlab`] — a seeded synthetic benchmark in the on-disk formats above.

pub mod datastore;
pub mod error;
pub mod evalkit;
pub mod numcore;
pub mod prompts;
pub mod pte;
pub mod rollout;
pub mod synthlab;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
