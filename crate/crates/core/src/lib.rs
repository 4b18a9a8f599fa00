//! Fast adversarial audio generation against a toy CTC speech recognizer.
//!
//! The pipeline is `audio` -> `features` (MFCC) -> `model` (tanh RNN) ->
//! `ctc`. `train` builds a white-box target from a synthetic tone corpus;
//! `attack` selects a beginning clip and optimizes a perturbation on it;
//! `eval` holds the metrics, the prepend-audio defense and the timing bench.

pub mod attack;
pub mod audio;
pub mod ctc;
pub mod error;
pub mod features;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
