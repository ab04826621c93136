//! Two-stage emotional talking-head generation.
//!
//! Stage one maps speech to a sequence of 68-point face landmarks: MFCC
//! blocks are refined by a memory-sharing emotional feature extractor
//! ([`msef`]) and decoded by an LSTM ([`audio2lm`]) in a PCA shape space
//! ([`landmarks`]). Stage two renders frames from a landmark sketch and a
//! reference face with an attention-augmented U-net ([`aatu`], [`attention`]).
//! [`metrics`] scores results, [`synthdata`] generates a corpus with a known
//! ground truth and [`harness`] trains, checkpoints and runs inference.

pub mod aatu;
pub mod attention;
pub mod audio2lm;
pub mod audio_features;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod imaging;
pub mod landmarks;
pub mod metrics;
pub mod msef;
pub mod nn;
pub mod synthdata;

pub use error::{Error, Result};
