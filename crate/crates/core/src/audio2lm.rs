//! Stage one: speech to landmark sequences.
//!
//! Per video frame the model concatenates a 512-d code of the reference
//! landmarks (broadcast over time), a 128-d code of the MFCC block and the
//! 128-d emotional feature `f_e` from [`Msef`], runs a single-layer LSTM and
//! emits PCA coefficients of the absolute normalised shape. Landmarks are
//! the PCA reconstruction of those coefficients.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio_features::FrameAlignedAudio;
use crate::error::{Error, Result};
use crate::landmarks::{CoordSpace, LandmarkFrame, PcaBasis, PcaCoeffs, LANDMARK_DIM, LIP_RANGE};
use crate::msef::{emotion_loss, Msef, MsefConfig};
use crate::nn::{sigmoid, Linear, Mlp, ParamStore};

pub const LANDMARK_CODE_DIM: usize = 512;
pub const AUDIO_CODE_DIM: usize = 128;
pub const LSTM_HIDDEN: usize = 256;

/// Scale factors of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("loss weights must be positive: {self:?}")))
        }
    }

    /// `L_pca + α·L_landmark + β·L_lip + γ·L_ec`.
    pub fn combine(&self, pca: f64, landmark: f64, lip: f64, ec: f64) -> f64 {
        pca + self.alpha * landmark + self.beta * lip + self.gamma * ec
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output) and zero
/// initial state.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[4 * hidden, input], bound)?,
            w_hh: store.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// `(B, T, I)` to the hidden states `(B, T, H)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, i) = x.dims3()?;
        if t == 0 {
            return Err(Error::InvalidInput("LSTM input sequence is empty".into()));
        }
        let h = self.hidden;
        let x_proj = x
            .reshape((b * t, i))?
            .matmul(&self.w_ih.t()?)?
            .broadcast_add(&self.bias)?
            .reshape((b, t, 4 * h))?;
        let w_hh_t = self.w_hh.t()?;
        let mut h_prev = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut c_prev = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (x_proj.narrow(1, step, 1)?.squeeze(1)? + h_prev.matmul(&w_hh_t)?)?;
            let i_g = sigmoid(&gates.narrow(1, 0, h)?)?;
            let f_g = sigmoid(&gates.narrow(1, h, h)?)?;
            let g_g = gates.narrow(1, 2 * h, h)?.tanh()?;
            let o_g = sigmoid(&gates.narrow(1, 3 * h, h)?)?;
            let c = ((f_g * &c_prev)? + (i_g * g_g)?)?;
            let h_new = (o_g * c.tanh()?)?;
            outputs.push(h_new.clone());
            h_prev = h_new;
            c_prev = c;
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Per-dimension standardisation of MFCC rows, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation over all rows; a floor of 1e-6 on
    /// the deviation keeps constant dimensions finite.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape(dim, r.len()));
            }
            n += 1;
            for (k, &v) in r.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit feature statistics on no rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audio2LmConfig {
    /// MFCC block width `W·C`.
    pub mfcc_dim: usize,
    pub pca_k: usize,
    pub landmark_code: usize,
    pub audio_code: usize,
    pub hidden: usize,
    pub msef: MsefConfig,
}

impl Audio2LmConfig {
    pub fn new(mfcc_dim: usize, pca_k: usize) -> Self {
        Self {
            mfcc_dim,
            pca_k,
            landmark_code: LANDMARK_CODE_DIM,
            audio_code: AUDIO_CODE_DIM,
            hidden: LSTM_HIDDEN,
            msef: MsefConfig::new(mfcc_dim),
        }
    }

    /// Per-frame LSTM input width.
    pub fn lstm_input(&self) -> usize {
        self.landmark_code + self.audio_code + self.msef.feature_dim
    }
}

/// Tensor-valued stage-one prediction for a batch of sequences.
#[derive(Debug, Clone)]
pub struct Stage1Prediction {
    /// `(B, T, k)`
    pub pca: Tensor,
    /// `(B, T, 136)`
    pub landmarks: Tensor,
    /// `(B, T, 8)`
    pub emotion_probs: Tensor,
}

/// Ground truth matching [`Stage1Prediction`]; `emotion` is one-hot.
#[derive(Debug, Clone)]
pub struct Stage1Target {
    pub pca: Tensor,
    pub landmarks: Tensor,
    pub emotion: Tensor,
}

/// Prediction for one sequence in landmark-space types.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub pca_seq: Vec<PcaCoeffs>,
    pub landmark_seq: Vec<LandmarkFrame>,
    pub emotion_probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Tensor,
    pub pca: Tensor,
    pub landmark: Tensor,
    pub lip: Tensor,
    pub ec: Tensor,
}

impl JointLoss {
    /// `(total, pca, landmark, lip, ec)` as scalars.
    pub fn values(&self) -> Result<[f64; 5]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([
            v(&self.total)?,
            v(&self.pca)?,
            v(&self.landmark)?,
            v(&self.lip)?,
            v(&self.ec)?,
        ])
    }
}

#[derive(Debug, Clone)]
pub struct Audio2Lm {
    pub config: Audio2LmConfig,
    pub landmark_encoder: Mlp,
    pub audio_encoder: Mlp,
    pub msef: Msef,
    pub lstm: Lstm,
    pub head: Linear,
    pca_mean: Tensor,
    pca_components: Tensor,
    input_mean: Tensor,
    input_std: Tensor,
    basis: PcaBasis,
    stats: FeatureStats,
}

impl Audio2Lm {
    /// Registers `msef.*` and `audio2lm.*` parameters. The PCA basis and the
    /// input statistics are fixed constants of the model.
    pub fn new(
        store: &mut ParamStore,
        config: Audio2LmConfig,
        basis: &PcaBasis,
        stats: &FeatureStats,
    ) -> Result<Self> {
        if basis.k() != config.pca_k {
            return Err(Error::shape(format!("{} PCA components", config.pca_k), basis.k()));
        }
        if stats.mean.len() != config.mfcc_dim || stats.std.len() != config.mfcc_dim {
            return Err(Error::shape(config.mfcc_dim, stats.mean.len()));
        }
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let landmark_encoder = Mlp::new(
            store,
            "audio2lm.landmark_encoder",
            LANDMARK_DIM,
            config.landmark_code,
            config.landmark_code,
        )?;
        let audio_encoder = Mlp::new(
            store,
            "audio2lm.audio_encoder",
            config.mfcc_dim,
            config.audio_code,
            config.audio_code,
        )?;
        let msef = Msef::new(store, "msef", config.msef)?;
        let lstm = Lstm::new(store, "audio2lm.lstm", config.lstm_input(), config.hidden)?;
        let head = Linear::new(store, "audio2lm.head", config.hidden, config.pca_k)?;
        let t = |v: &[f64], shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_slice(v, shape, &dev)?.to_dtype(dtype)?)
        };
        Ok(Self {
            config,
            landmark_encoder,
            audio_encoder,
            msef,
            lstm,
            head,
            pca_mean: t(&basis.mean, &[LANDMARK_DIM])?,
            pca_components: t(&basis.components, &[basis.k(), LANDMARK_DIM])?,
            input_mean: t(&stats.mean, &[config.mfcc_dim])?,
            input_std: t(&stats.std, &[config.mfcc_dim])?,
            basis: basis.clone(),
            stats: stats.clone(),
        })
    }

    pub fn basis(&self) -> &PcaBasis {
        &self.basis
    }

    pub fn feature_stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn dtype(&self) -> DType {
        self.pca_mean.dtype()
    }

    fn standardize(&self, audio: &Tensor) -> Result<Tensor> {
        Ok(audio
            .broadcast_sub(&self.input_mean)?
            .broadcast_div(&self.input_std)?)
    }

    /// Reference landmarks `(…, 136)` to the 512-d code.
    pub fn encode_landmarks(&self, reference: &Tensor) -> Result<Tensor> {
        self.landmark_encoder.forward(reference)
    }

    /// Raw MFCC blocks `(…, W·C)` to the 128-d audio code.
    pub fn encode_mfcc(&self, audio: &Tensor) -> Result<Tensor> {
        self.audio_encoder.forward(&self.standardize(audio)?)
    }

    /// `(B, T, k)` coefficients to `(B, T, 136)` landmarks.
    pub fn reconstruct(&self, pca: &Tensor) -> Result<Tensor> {
        let (b, t, k) = pca.dims3()?;
        Ok(pca
            .reshape((b * t, k))?
            .matmul(&self.pca_components)?
            .broadcast_add(&self.pca_mean)?
            .reshape((b, t, LANDMARK_DIM))?)
    }

    /// Runs the full stage-one model.
    ///
    /// `reference`: `(B, 136)` normalised landmarks; `audio`: `(B, T, W·C)`
    /// raw MFCC blocks.
    pub fn predict_sequence(&self, reference: &Tensor, audio: &Tensor) -> Result<Stage1Prediction> {
        let (b, t, d) = audio.dims3()?;
        if t == 0 {
            return Err(Error::InvalidInput("empty audio sequence".into()));
        }
        if d != self.config.mfcc_dim {
            return Err(Error::shape(self.config.mfcc_dim, d));
        }
        let (rb, rd) = reference.dims2()?;
        if rb != b || rd != LANDMARK_DIM {
            return Err(Error::shape(format!("({b}, {LANDMARK_DIM})"), format!("({rb}, {rd})")));
        }
        let x = self.standardize(audio)?;
        let audio_code = self.audio_encoder.forward(&x)?;
        let emo = self.msef.forward(&x)?;
        let lm_code = self
            .encode_landmarks(reference)?
            .unsqueeze(1)?
            .broadcast_as((b, t, self.config.landmark_code))?;
        let joint = Tensor::cat(&[&lm_code, &audio_code, &emo.f_e], D::Minus1)?;
        let hidden = self.lstm.forward(&joint)?;
        let pca = self.head.forward(&hidden)?;
        let landmarks = self.reconstruct(&pca)?;
        Ok(Stage1Prediction {
            pca,
            landmarks,
            emotion_probs: emo.probs,
        })
    }

    /// Single-sequence convenience wrapper over [`Self::predict_sequence`].
    pub fn predict_frames(&self, reference: &LandmarkFrame, audio: &FrameAlignedAudio) -> Result<Stage1Output> {
        if reference.space() != CoordSpace::Normalized {
            return Err(Error::InvalidInput("reference landmarks must be normalised".into()));
        }
        if audio.is_empty() {
            return Err(Error::InvalidInput("audio is shorter than one video frame".into()));
        }
        let dev = Device::Cpu;
        let dtype = self.dtype();
        let r = Tensor::from_vec(reference.flatten(), (1, LANDMARK_DIM), &dev)?.to_dtype(dtype)?;
        let a = Tensor::from_slice(audio.as_slice(), (1, audio.n_frames(), audio.row_dim()), &dev)?
            .to_dtype(dtype)?;
        let pred = self.predict_sequence(&r, &a)?;
        let pca = pred.pca.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let lms = pred.landmarks.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let probs = pred.emotion_probs.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(Stage1Output {
            pca_seq: pca.into_iter().map(PcaCoeffs).collect(),
            landmark_seq: lms
                .iter()
                .map(|row| LandmarkFrame::from_flat(row, CoordSpace::Normalized))
                .collect::<Result<_>>()?,
            emotion_probs: probs,
        })
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Joint stage-one loss. `L_landmark` and `L_lip` are mean squared errors
/// over all coordinates of the full shape and of points 48–67; `L_pca` is
/// the mean squared error of the coefficients.
pub fn joint_loss(pred: &Stage1Prediction, truth: &Stage1Target, w: &LossWeights) -> Result<JointLoss> {
    w.validate()?;
    for (name, a, b) in [
        ("pca", &pred.pca, &truth.pca),
        ("landmarks", &pred.landmarks, &truth.landmarks),
        ("emotion", &pred.emotion_probs, &truth.emotion),
    ] {
        if a.dims() != b.dims() {
            return Err(Error::shape(
                format!("{name} {:?}", a.dims()),
                format!("{:?}", b.dims()),
            ));
        }
    }
    let pca = mse(&pred.pca, &truth.pca)?;
    let landmark = mse(&pred.landmarks, &truth.landmarks)?;
    let lip_start = 2 * LIP_RANGE.start;
    let lip_len = 2 * LIP_RANGE.len();
    let lip = mse(
        &pred.landmarks.narrow(D::Minus1, lip_start, lip_len)?,
        &truth.landmarks.narrow(D::Minus1, lip_start, lip_len)?,
    )?;
    let ec = emotion_loss(&pred.emotion_probs, &truth.emotion)?;
    let total = (((&pca + landmark.affine(w.alpha, 0.0)?)? + lip.affine(w.beta, 0.0)?)?
        + ec.affine(w.gamma, 0.0)?)?;
    Ok(JointLoss {
        total,
        pca,
        landmark,
        lip,
        ec,
    })
}
