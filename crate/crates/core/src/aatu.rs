//! Stage two: the attention-augmented U-net translator and its losses.
//!
//! Input is a 4-channel tensor: the rasterised landmark sketch followed by
//! the RGB reference face. The encoder has five levels (four 2× max-pool
//! reductions), the decoder mirrors it with transposed-convolution upsampling
//! and skip concatenation, and CBAM gates follow the convolution block of the
//! first four encoder and all four decoder levels.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, Gates, PaddingMode, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::imaging::{FrameImage, GrayImage};
use crate::nn::{sigmoid, Conv2d, ConvTranspose2d, ParamStore, TensorRecord};

pub const INPUT_CHANNELS: usize = 4;
pub const NUM_LEVELS: usize = 5;
/// Levels (counted from the top) that carry a CBAM block.
pub const ATTENTION_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Square input and output side; must be divisible by 16.
    pub size: usize,
    /// Channel width per encoder level.
    pub widths: [usize; NUM_LEVELS],
    pub reduction: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            size: 128,
            widths: [32, 64, 128, 256, 512],
            reduction: DEFAULT_REDUCTION,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1 << (NUM_LEVELS - 1);
        if self.size == 0 || !self.size.is_multiple_of(factor) {
            return Err(Error::InvalidInput(format!(
                "image size {} must be a positive multiple of {factor}",
                self.size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidInput("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Test hooks for [`UNet::forward_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct ForwardOptions {
    pub zero_bottleneck: bool,
    pub gates: Gates,
}


#[derive(Debug, Clone)]
struct ConvBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            b: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.silu()?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<ConvBlock>,
    enc_attention: Vec<Cbam>,
    up: Vec<ConvTranspose2d>,
    decoder: Vec<ConvBlock>,
    dec_attention: Vec<Cbam>,
    head: Conv2d,
}

impl UNet {
    /// Registers `aatu.*` and `attention.{enc,dec}.N` parameters.
    pub fn new(store: &mut ParamStore, config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let mut encoder = Vec::new();
        let mut enc_attention = Vec::new();
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        let mut dec_attention = Vec::new();
        for level in 0..NUM_LEVELS {
            let cin = if level == 0 { INPUT_CHANNELS } else { w[level - 1] };
            encoder.push(ConvBlock::new(store, &format!("aatu.enc{}", level + 1), cin, w[level])?);
            if level < ATTENTION_LEVELS {
                enc_attention.push(Cbam::new(
                    store,
                    &format!("attention.enc.{}", level + 1),
                    w[level],
                    config.reduction.min(w[level]),
                )?);
            }
        }
        for level in 0..NUM_LEVELS - 1 {
            up.push(ConvTranspose2d::new(store, &format!("aatu.up{}", level + 1), w[level + 1], w[level], 2)?);
            decoder.push(ConvBlock::new(store, &format!("aatu.dec{}", level + 1), 2 * w[level], w[level])?);
            dec_attention.push(Cbam::new(
                store,
                &format!("attention.dec.{}", level + 1),
                w[level],
                config.reduction.min(w[level]),
            )?);
        }
        let head = Conv2d::new(store, "aatu.head", w[0], 3, 1, 1, 0)?;
        Ok(Self {
            config,
            encoder,
            enc_attention,
            up,
            decoder,
            dec_attention,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Sets the border mode of every spatial attention convolution.
    pub fn set_attention_padding(&mut self, mode: PaddingMode) {
        for c in self.enc_attention.iter_mut().chain(self.dec_attention.iter_mut()) {
            c.spatial.padding = mode;
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, ForwardOptions::default())
    }

    /// `(B, 4, S, S)` to `(B, 3, S, S)` in [0, 1].
    pub fn forward_with(&self, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.size;
        if c != INPUT_CHANNELS || h != s || w != s {
            return Err(Error::shape(
                format!("(B, {INPUT_CHANNELS}, {s}, {s})"),
                format!("(B, {c}, {h}, {w})"),
            ));
        }
        let mut skips = Vec::with_capacity(NUM_LEVELS - 1);
        let mut cur = x.clone();
        for level in 0..NUM_LEVELS {
            if level > 0 {
                cur = cur.max_pool2d(2)?;
            }
            cur = self.encoder[level].forward(&cur)?;
            if level < ATTENTION_LEVELS {
                cur = self.enc_attention[level].forward_gated(&cur, opts.gates)?;
            }
            if level < NUM_LEVELS - 1 {
                skips.push(cur.clone());
            }
        }
        if opts.zero_bottleneck {
            cur = cur.zeros_like()?;
        }
        for level in (0..NUM_LEVELS - 1).rev() {
            let upsampled = self.up[level].forward(&cur)?;
            cur = self.decoder[level].forward(&Tensor::cat(&[&upsampled, &skips[level]], 1)?)?;
            cur = self.dec_attention[level].forward_gated(&cur, opts.gates)?;
        }
        sigmoid(&self.head.forward(&cur)?)
    }
}

/// Stacks the sketch and the reference into a `(1, 4, H, W)` input.
pub fn translator_input(sketch: &GrayImage, reference: &FrameImage, dtype: DType) -> Result<Tensor> {
    if sketch.width != reference.width || sketch.height != reference.height {
        return Err(Error::shape(
            format!("{}x{}", reference.width, reference.height),
            format!("{}x{}", sketch.width, sketch.height),
        ));
    }
    let dev = Device::Cpu;
    let s = Tensor::from_slice(&sketch.data, (1, 1, sketch.height, sketch.width), &dev)?;
    let r = reference.to_tensor(DType::F32, &dev)?;
    Ok(Tensor::cat(&[&s, &r], 1)?.to_dtype(dtype)?)
}

/// Mean absolute difference over all elements.
pub fn l1_loss(out: &Tensor, target: &Tensor) -> Result<Tensor> {
    if out.dims() != target.dims() {
        return Err(Error::shape(format!("{:?}", out.dims()), format!("{:?}", target.dims())));
    }
    Ok((out - target)?.abs()?.mean_all()?)
}

/// Frozen convolutional feature pyramid for the perceptual loss.
///
/// Each layer is a 3×3 convolution followed by ReLU; layers after the first
/// halve the resolution.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    layers: Vec<Conv2d>,
    selected: Vec<usize>,
}

pub const DEFAULT_EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_0F_FEA7;

impl PerceptualExtractor {
    /// Randomly initialised pyramid with He-uniform weights and zero biases.
    pub fn random(widths: &[usize], seed: u64, dtype: DType) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidInput("perceptual extractor needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            let weight = Tensor::from_vec(w, (cout, cin, 3, 3), &dev)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(cout, dtype, &dev)?;
            layers.push(Conv2d::from_tensors(weight, bias, if i == 0 { 1 } else { 2 }, 1));
            cin = cout;
        }
        let selected = (0..layers.len()).collect();
        Ok(Self { layers, selected })
    }

    pub fn default_for(dtype: DType) -> Result<Self> {
        Self::random(&DEFAULT_EXTRACTOR_WIDTHS, DEFAULT_EXTRACTOR_SEED, dtype)
    }

    /// Builds the pyramid from `layer{i}.weight` / `layer{i}.bias` records,
    /// for example exported pretrained weights.
    pub fn from_records(records: &BTreeMap<String, TensorRecord>, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let mut layers = Vec::new();
        let mut cin = 3;
        for i in 0.. {
            let (Some(w), Some(b)) = (
                records.get(&format!("layer{i}.weight")),
                records.get(&format!("layer{i}.bias")),
            ) else {
                break;
            };
            if w.shape.len() != 4 || w.shape[1] != cin || w.shape[2] != 3 || w.shape[3] != 3 || b.shape != [w.shape[0]] {
                return Err(Error::shape(
                    format!("layer{i}: (out, {cin}, 3, 3)"),
                    format!("{:?}", w.shape),
                ));
            }
            cin = w.shape[0];
            layers.push(Conv2d::from_tensors(
                w.to_tensor(dtype, &dev)?,
                b.to_tensor(dtype, &dev)?,
                if i == 0 { 1 } else { 2 },
                1,
            ));
        }
        if layers.is_empty() {
            return Err(Error::InvalidInput("no extractor layers found in weights".into()));
        }
        let selected = (0..layers.len()).collect();
        Ok(Self { layers, selected })
    }

    /// Reads weights written by [`Self::save_json`].
    pub fn load_json(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_records(&serde_json::from_str(&text)?, dtype)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut records = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            records.insert(format!("layer{i}.weight"), TensorRecord::from_tensor(l.weight())?);
            records.insert(format!("layer{i}.bias"), TensorRecord::from_tensor(l.bias())?);
        }
        std::fs::write(path.as_ref(), serde_json::to_string(&records)?).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn selected_layers(&self) -> &[usize] {
        &self.selected
    }

    pub fn with_layers(mut self, selected: Vec<usize>) -> Result<Self> {
        if selected.is_empty() || selected.iter().any(|&i| i >= self.layers.len()) {
            return Err(Error::InvalidInput(format!(
                "layer selection {selected:?} invalid for {} layers",
                self.layers.len()
            )));
        }
        self.selected = selected;
        Ok(self)
    }

    /// Activations after every layer.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?.relu()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Mean over the selected layers of the mean absolute feature difference.
pub fn perceptual_loss(out: &Tensor, target: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    if out.dims() != target.dims() {
        return Err(Error::shape(format!("{:?}", out.dims()), format!("{:?}", target.dims())));
    }
    let fa = extractor.features(out)?;
    let fb = extractor.features(&target.detach())?;
    let mut total: Option<Tensor> = None;
    for &i in &extractor.selected {
        let d = (&fa[i] - &fb[i])?.abs()?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    let n = extractor.selected.len() as f64;
    Ok(total.expect("selection is non-empty").affine(1.0 / n, 0.0)?)
}

/// Weight of the perceptual term in the stage-two objective.
pub const PERCEPTUAL_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub total: Tensor,
    pub l1: Tensor,
    pub perceptual: Tensor,
}

impl Stage2Loss {
    /// `(total, l1, perceptual)`.
    pub fn values(&self) -> Result<[f64; 3]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([v(&self.total)?, v(&self.l1)?, v(&self.perceptual)?])
    }
}

pub fn stage2_loss(out: &Tensor, target: &Tensor, extractor: &PerceptualExtractor) -> Result<Stage2Loss> {
    let l1 = l1_loss(out, target)?;
    let perceptual = perceptual_loss(out, target, extractor)?;
    let total = (&l1 + perceptual.affine(PERCEPTUAL_WEIGHT, 0.0)?)?;
    Ok(Stage2Loss { total, l1, perceptual })
}
