//! Training and evaluation toolkit for conversational query producers.
//!
//! Gold queries that mention concepts absent from the dialogue history
//! ("over-association") make seq2seq query producers harder to train. This
//! crate measures how strongly each training pair is affected and offers
//! instance-level weighting strategies that soften it:
//!
//! * [`overassoc`]: per-pair degree, buckets, corpus reports.
//! * [`losses`]: CE, data weighting and pruning, stepwise
//!   self-distillation, whole-sequence REINFORCE.
//! * [`trainer`]: warm-up then fine-tune schedules with dev-set checkpoint
//!   selection.
//! * [`metrics`]: Unigram F1, BLEU-1/2, ROUGE-1/2/L and reward scorers.
//! * [`model`]: the seq2seq contract, decoding, and a small reference model.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod overassoc;
pub mod textnorm;
pub mod trainer;

pub use error::{Error, Result};
