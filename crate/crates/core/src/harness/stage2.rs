use std::path::Path;

use candle_core::{DType, Tensor};

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{Stage, TrainConfig};
use super::curve::LossCurve;
use super::data::{load_split, VideoData};
use super::optim::Adam;
use super::stage1::LandmarkModel;
use super::{at_step, ensure_finite, epoch_order};
use crate::aatu::{stage2_loss, translator_input, PerceptualExtractor, UNet, UNetConfig};
use crate::imaging::{FrameImage, GrayImage};
use crate::landmarks::{rasterize, LandmarkFrame};
use crate::nn::ParamStore;
use crate::synthdata::{Manifest, Split};
use crate::{Error, Result};

pub const STAGE2_LOSS_NAMES: [&str; 3] = ["total", "l1", "perceptual"];

/// One training example: sketch, index of the reference image, target frame.
#[derive(Debug, Clone)]
pub struct RenderPair {
    pub video: usize,
    pub frame: usize,
    pub sketch: GrayImage,
    pub target: FrameImage,
}

#[derive(Debug, Clone)]
pub struct Stage2Data {
    pub references: Vec<FrameImage>,
    pub pairs: Vec<RenderPair>,
}

impl Stage2Data {
    /// Loads sketch/frame pairs. With teacher forcing the sketch comes from
    /// the tracked landmarks, otherwise from `stage1` predictions driven by
    /// the video's audio. Only the sketch differs between the two modes.
    pub fn load(root: impl AsRef<Path>, config: &TrainConfig, stage1: Option<&LandmarkModel>) -> Result<Self> {
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
        Self::from_videos(&videos, config, stage1)
    }

    pub fn from_videos(videos: &[VideoData], config: &TrainConfig, stage1: Option<&LandmarkModel>) -> Result<Self> {
        if !config.teacher_forcing && stage1.is_none() {
            return Err(Error::InvalidInput(
                "render training without teacher forcing needs a landmark checkpoint".into(),
            ));
        }
        let size = config.unet.size;
        let cap = config.max_pairs.unwrap_or(usize::MAX);
        let mut references = Vec::new();
        let mut pairs = Vec::new();
        for v in videos {
            if pairs.len() >= cap {
                break;
            }
            let reference = v.reference_image()?;
            check_size(&reference, size, &v.id)?;
            references.push(reference);
            let shapes: Vec<LandmarkFrame> = match (config.teacher_forcing, stage1) {
                (true, _) => v.landmarks.clone(),
                (false, Some(model)) => model.predict(&v.reference, &v.audio)?.landmark_seq,
                (false, None) => unreachable!(),
            };
            for f in (0..v.n_frames()).step_by(config.frame_stride) {
                if pairs.len() >= cap {
                    break;
                }
                let target = FrameImage::load_png(v.frame_path(f))?;
                check_size(&target, size, &v.id)?;
                pairs.push(RenderPair {
                    video: references.len() - 1,
                    frame: f,
                    sketch: rasterize(&shapes[f], size)?,
                    target,
                });
            }
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no render training pairs".into()));
        }
        Ok(Self { references, pairs })
    }

    /// `(B, 4, S, S)` network inputs and `(B, 3, S, S)` targets.
    pub fn batch(&self, picks: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let mut inputs = Vec::with_capacity(picks.len());
        let mut targets = Vec::with_capacity(picks.len());
        for &i in picks {
            let p = &self.pairs[i];
            inputs.push(translator_input(&p.sketch, &self.references[p.video], dtype)?);
            targets.push(p.target.to_tensor(dtype, &candle_core::Device::Cpu)?);
        }
        Ok((Tensor::cat(&inputs, 0)?, Tensor::cat(&targets, 0)?))
    }
}

fn check_size(img: &FrameImage, size: usize, id: &str) -> Result<()> {
    if img.width != size || img.height != size {
        return Err(Error::InvalidInput(format!(
            "video {id}: image is {}x{} but the translator expects {size}x{size}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Stage-two translator with the store that owns its weights.
pub struct RenderModel {
    store: ParamStore,
    net: UNet,
}

impl std::fmt::Debug for RenderModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RenderModel").field("store", &self.store).finish()
    }
}

impl RenderModel {
    pub fn new(seed: u64, config: UNetConfig) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, seed);
        let net = UNet::new(&mut store, config)?;
        Ok(Self { store, net })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Render)?;
        let model = Self::new(ck.header.config.seed, ck.header.config.unet.clone())?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Renders one frame per sketch, `chunk` frames per forward pass.
    pub fn render(&self, sketches: &[GrayImage], reference: &FrameImage, chunk: usize) -> Result<Vec<FrameImage>> {
        let mut out = Vec::with_capacity(sketches.len());
        for part in sketches.chunks(chunk.max(1)) {
            let inputs = part
                .iter()
                .map(|s| translator_input(s, reference, DType::F32))
                .collect::<Result<Vec<_>>>()?;
            let y = self.net.forward(&Tensor::cat(&inputs, 0)?)?.detach();
            for i in 0..part.len() {
                out.push(FrameImage::from_tensor(&y.get(i)?)?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, steps: usize, adam: Option<&Adam>) -> Result<Checkpoint> {
        let mut tensors = self.store.export()?;
        if let Some(a) = adam {
            tensors.extend(a.export()?);
        }
        let mut config = config.clone();
        config.stage = Stage::Render;
        Ok(Checkpoint {
            header: CheckpointHeader {
                stage: Stage::Render,
                config,
                mfcc_dim: None,
                feature_stats: None,
                steps,
            },
            tensors,
            pca: None,
        })
    }
}

pub fn perceptual_extractor(config: &TrainConfig) -> Result<PerceptualExtractor> {
    let extractor = match &config.perceptual_weights {
        Some(path) => PerceptualExtractor::load_json(path, DType::F32)?,
        None => PerceptualExtractor::default_for(DType::F32)?,
    };
    match &config.perceptual_layers {
        Some(layers) => extractor.with_layers(layers.clone()),
        None => Ok(extractor),
    }
}

#[derive(Debug)]
pub struct Stage2Outcome {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
    pub model: RenderModel,
}

/// Trains the translator on L1 plus perceptual loss. Resume semantics match
/// [`super::train_stage1`].
pub fn train_stage2(config: &TrainConfig, data: &Stage2Data, resume: Option<&Checkpoint>) -> Result<Stage2Outcome> {
    config.validate()?;
    let (model, mut adam, start) = match resume {
        Some(ck) => {
            let model = RenderModel::from_checkpoint(ck)?;
            let adam = Adam::restore(&model.store, &ck.tensors, ck.header.steps)?;
            (model, adam, ck.header.steps)
        }
        None => {
            let model = RenderModel::new(config.seed, config.unet.clone())?;
            let adam = Adam::new(&model.store)?;
            (model, adam, 0)
        }
    };
    let extractor = perceptual_extractor(config)?;
    let n = data.pairs.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = (config.epochs * per_epoch).min(config.max_steps.unwrap_or(usize::MAX));
    log::info!(
        "stage 2: {n} pairs, {} parameters, {per_epoch} steps/epoch, steps {start}..{total}",
        model.store.num_params()
    );
    let mut curve = LossCurve::new(&STAGE2_LOSS_NAMES);
    let mut step = start;
    while step < total {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        let order = epoch_order(n, config.seed, epoch);
        let picks = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(n)];
        let (x, target) = data.batch(picks, DType::F32)?;
        let out = model.net.forward(&x).map_err(|e| at_step(e, step + 1))?;
        let loss = stage2_loss(&out, &target, &extractor)?;
        let values = loss.values()?;
        step += 1;
        ensure_finite("stage-2 loss", step, &STAGE2_LOSS_NAMES, &values)?;
        let grads = loss.total.backward()?;
        let lr = config.lr_at_epoch(epoch);
        adam.step(&model.store, &grads, lr)?;
        curve.push(epoch, step, lr, &values);
        if step % per_epoch == 0 || step == total {
            if let Some(m) = curve.epoch_means(epoch) {
                log::info!(
                    "epoch {epoch}: loss {:.5} (l1 {:.5}, perceptual {:.5}) lr {lr:.3e}",
                    m[0], m[1], m[2]
                );
            }
        }
    }
    let checkpoint = model.to_checkpoint(config, step, Some(&adam))?;
    Ok(Stage2Outcome {
        checkpoint,
        curve,
        model,
    })
}
