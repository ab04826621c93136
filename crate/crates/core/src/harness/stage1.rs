use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{Stage, TrainConfig};
use super::curve::LossCurve;
use super::data::{load_split, VideoData};
use super::optim::Adam;
use super::{at_step, ensure_finite, epoch_order};
use crate::audio2lm::{joint_loss, Audio2Lm, Audio2LmConfig, FeatureStats, Stage1Output, Stage1Target};
use crate::audio_features::FrameAlignedAudio;
use crate::landmarks::{LandmarkFrame, PcaBasis, LANDMARK_DIM};
use crate::msef::{one_hot, NUM_EMOTIONS};
use crate::nn::ParamStore;
use crate::synthdata::{Manifest, Split};
use crate::{Error, Result};

pub const STAGE1_LOSS_NAMES: [&str; 5] = ["joint", "pca", "landmark", "lip", "ec"];

/// Training videos plus the statistics fitted on them.
#[derive(Debug, Clone)]
pub struct Stage1Data {
    pub videos: Vec<VideoData>,
    pub basis: PcaBasis,
    pub stats: FeatureStats,
}

impl Stage1Data {
    pub fn load(root: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let root = root.as_ref();
        let manifest = Manifest::load(root)?;
        let videos = load_split(
            root,
            &manifest,
            Split::Train,
            config.n_mfcc,
            config.max_videos,
            config.parallel_loading,
        )?;
        Self::from_videos(videos, config.pca_k)
    }

    /// Fits the PCA basis on every training frame and the MFCC statistics
    /// on every training row.
    pub fn from_videos(videos: Vec<VideoData>, pca_k: usize) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::InvalidInput("no training videos".into()))?;
        let dim = first.audio.row_dim();
        if videos.iter().any(|v| v.audio.row_dim() != dim) {
            return Err(Error::InvalidInput("videos disagree on MFCC layout".into()));
        }
        let frames: Vec<LandmarkFrame> = videos.iter().flat_map(|v| v.landmarks.iter().cloned()).collect();
        let basis = PcaBasis::fit(&frames, pca_k)?;
        let stats = FeatureStats::fit(
            videos.iter().flat_map(|v| (0..v.audio.n_frames()).map(move |i| v.audio.row(i))),
            dim,
        )?;
        Ok(Self { videos, basis, stats })
    }

    pub fn mfcc_dim(&self) -> usize {
        self.stats.mean.len()
    }
}

/// Stage-one network with the parameter store that owns its weights.
pub struct LandmarkModel {
    store: ParamStore,
    net: Audio2Lm,
}

impl std::fmt::Debug for LandmarkModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LandmarkModel").field("store", &self.store).finish()
    }
}

impl LandmarkModel {
    pub fn new(seed: u64, pca_k: usize, basis: &PcaBasis, stats: &FeatureStats) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, seed);
        let net = Audio2Lm::new(&mut store, Audio2LmConfig::new(stats.mean.len(), pca_k), basis, stats)?;
        Ok(Self { store, net })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Landmarks)?;
        let basis = ck.pca.as_ref().ok_or_else(|| Error::Checkpoint("landmark checkpoint without PCA basis".into()))?;
        let stats = ck
            .header
            .feature_stats
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("landmark checkpoint without feature statistics".into()))?;
        let model = Self::new(ck.header.config.seed, basis.k(), basis, stats)?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn net(&self) -> &Audio2Lm {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn predict(&self, reference: &LandmarkFrame, audio: &FrameAlignedAudio) -> Result<Stage1Output> {
        self.net.predict_frames(reference, audio)
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, steps: usize, adam: Option<&Adam>) -> Result<Checkpoint> {
        let mut tensors = self.store.export()?;
        if let Some(a) = adam {
            tensors.extend(a.export()?);
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                stage: Stage::Landmarks,
                config: config.clone(),
                mfcc_dim: Some(self.net.config.mfcc_dim),
                feature_stats: Some(self.net.feature_stats().clone()),
                steps,
            },
            tensors,
            pca: Some(self.net.basis().clone()),
        })
    }

    /// Fraction of frames whose most probable emotion is the video label.
    pub fn emotion_accuracy(&self, videos: &[VideoData]) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for v in videos {
            let out = self.predict(&v.reference, &v.audio)?;
            for probs in &out.emotion_probs {
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                hits += usize::from(best == v.emotion);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidInput("no frames to score".into()));
        }
        Ok(hits as f64 / total as f64)
    }
}

#[derive(Debug)]
pub struct Stage1Outcome {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
    /// Frame-level emotion accuracy on the training videos after training.
    pub train_accuracy: f64,
    pub model: LandmarkModel,
}

struct Batch {
    reference: Tensor,
    audio: Tensor,
    target: Stage1Target,
}

fn make_batch(videos: &[VideoData], pca: &[Vec<f64>], picks: &[usize], k: usize) -> Result<Batch> {
    let dev = Device::Cpu;
    let t = picks.iter().map(|&i| videos[i].n_frames()).min().unwrap_or(0);
    if t == 0 {
        return Err(Error::InvalidInput("batch contains an empty video".into()));
    }
    let b = picks.len();
    let d = videos[picks[0]].audio.row_dim();
    let mut reference = Vec::with_capacity(b * LANDMARK_DIM);
    let mut audio = Vec::with_capacity(b * t * d);
    let mut lms = Vec::with_capacity(b * t * LANDMARK_DIM);
    let mut coeffs = Vec::with_capacity(b * t * k);
    let mut labels = Vec::with_capacity(b * t);
    for &i in picks {
        let v = &videos[i];
        reference.extend(v.reference.flatten());
        audio.extend_from_slice(&v.audio.as_slice()[..t * d]);
        for f in &v.landmarks[..t] {
            lms.extend(f.flatten());
        }
        coeffs.extend_from_slice(&pca[i][..t * k]);
        labels.extend(std::iter::repeat_n(v.emotion, t));
    }
    let f32_tensor = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &dev)?.to_dtype(DType::F32)?)
    };
    Ok(Batch {
        reference: f32_tensor(reference, &[b, LANDMARK_DIM])?,
        audio: f32_tensor(audio, &[b, t, d])?,
        target: Stage1Target {
            pca: f32_tensor(coeffs, &[b, t, k])?,
            landmarks: f32_tensor(lms, &[b, t, LANDMARK_DIM])?,
            emotion: one_hot(&labels, DType::F32, &dev)?.reshape((b, t, NUM_EMOTIONS))?,
        },
    })
}

/// Trains the landmark stage with Adam on the joint loss.
///
/// With `resume`, weights, optimizer moments and the step counter come from
/// the checkpoint and training continues where it stopped; the batch order
/// is the one an uninterrupted run would have used.
pub fn train_stage1(config: &TrainConfig, data: &Stage1Data, resume: Option<&Checkpoint>) -> Result<Stage1Outcome> {
    config.validate()?;
    let (model, mut adam, start) = match resume {
        Some(ck) => {
            let model = LandmarkModel::from_checkpoint(ck)?;
            let adam = Adam::restore(&model.store, &ck.tensors, ck.header.steps)?;
            (model, adam, ck.header.steps)
        }
        None => {
            let model = LandmarkModel::new(config.seed, config.pca_k, &data.basis, &data.stats)?;
            let adam = Adam::new(&model.store)?;
            (model, adam, 0)
        }
    };
    if model.net.config.mfcc_dim != data.mfcc_dim() {
        return Err(Error::shape(format!("MFCC width {}", model.net.config.mfcc_dim), data.mfcc_dim()));
    }
    let basis = model.net.basis();
    let k = basis.k();
    let pca: Vec<Vec<f64>> = data
        .videos
        .iter()
        .map(|v| {
            let mut out = Vec::with_capacity(v.n_frames() * k);
            for f in &v.landmarks {
                out.extend(basis.project(f)?.0);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = data.videos.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = (config.epochs * per_epoch).min(config.max_steps.unwrap_or(usize::MAX));
    log::info!(
        "stage 1: {n} videos, {} parameters, {per_epoch} steps/epoch, steps {start}..{total}",
        model.store.num_params()
    );
    let mut curve = LossCurve::new(&STAGE1_LOSS_NAMES);
    let mut step = start;
    while step < total {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        let order = epoch_order(n, config.seed, epoch);
        let picks = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(n)];
        let batch = make_batch(&data.videos, &pca, picks, k)?;
        let pred = model.net.predict_sequence(&batch.reference, &batch.audio).map_err(|e| at_step(e, step + 1))?;
        let loss = joint_loss(&pred, &batch.target, &config.loss_weights)?;
        let values = loss.values()?;
        step += 1;
        ensure_finite("stage-1 joint loss", step, &STAGE1_LOSS_NAMES, &values)?;
        let grads = loss.total.backward()?;
        let lr = config.lr_at_epoch(epoch);
        adam.step(&model.store, &grads, lr)?;
        curve.push(epoch, step, lr, &values);
        if step % per_epoch == 0 || step == total {
            if let Some(m) = curve.epoch_means(epoch) {
                log::info!(
                    "epoch {epoch}: L_joint {:.5} (pca {:.5}, landmark {:.6}, lip {:.6}, ec {:.5}) lr {lr:.3e}",
                    m[0], m[1], m[2], m[3], m[4]
                );
            }
        }
    }
    let train_accuracy = model.emotion_accuracy(&data.videos)?;
    log::info!("stage 1 done: train emotion accuracy {:.2}%", 100.0 * train_accuracy);
    let checkpoint = model.to_checkpoint(config, step, Some(&adam))?;
    Ok(Stage1Outcome {
        checkpoint,
        curve,
        train_accuracy,
        model,
    })
}
