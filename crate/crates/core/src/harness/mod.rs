//! Training loops, configuration, checkpoints and end-to-end inference.
//!
//! Both stages train with Adam at a per-epoch exponentially decayed rate.
//! Batch order is a pure function of `(seed, epoch)`, which is what makes a
//! resumed run step-for-step identical to an uninterrupted one.

mod checkpoint;
mod config;
mod curve;
mod data;
mod infer;
mod optim;
mod stage1;
mod stage2;

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use config::{Stage, TrainConfig, SEED_ENV};
pub use curve::{LossCurve, StepRecord};
pub use data::{
    audio_features, load_reference_landmarks, load_split, load_video, VideoData, AUDIO_FILE, REFERENCE_IMAGE,
    REFERENCE_LANDMARKS,
};
pub use infer::{infer, predict_landmarks, InferIndex, INDEX_FILE};
pub use optim::{is_optimizer_key, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use stage1::{train_stage1, LandmarkModel, Stage1Data, Stage1Outcome, STAGE1_LOSS_NAMES};
pub use stage2::{
    perceptual_extractor, train_stage2, RenderModel, RenderPair, Stage2Data, Stage2Outcome, STAGE2_LOSS_NAMES,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stamps a non-finite error raised inside a model with the training step.
fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

fn ensure_finite(what: &str, step: usize, names: &[&str], values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let detail: Vec<String> = names.iter().zip(values).map(|(n, v)| format!("{n}={v}")).collect();
    log::error!("non-finite loss at step {step}: {}", detail.join(", "));
    Err(Error::NonFinite {
        what: format!("{what} ({})", detail.join(", ")),
        step,
    })
}
