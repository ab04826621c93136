//! Memory-sharing emotional feature extractor.
//!
//! An MFCC block is lifted to a 128-d feature `f`, refined by two memory
//! matrices shared across all samples,
//!
//! ```text
//! f_e = f + g2(softmax(g1(f) · M1) · M2)
//! ```
//!
//! and classified into eight emotions with independent sigmoid outputs.
//! `g1`/`g2` are kernel-size-1 convolutions over the feature channels, i.e.
//! learned linear maps. `g2` starts at zero so an untrained extractor is the
//! identity on `f`.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, Mlp, ParamStore};

pub const FEATURE_DIM: usize = 128;
pub const NUM_EMOTIONS: usize = 8;
pub const PROB_EPS: f64 = 1e-7;

/// The eight emotion categories, in label-index order.
pub const EMOTIONS: [&str; NUM_EMOTIONS] = [
    "angry",
    "contempt",
    "disgusted",
    "fear",
    "happy",
    "neutral",
    "sad",
    "surprised",
];

pub fn emotion_index(name: &str) -> Result<usize> {
    EMOTIONS
        .iter()
        .position(|e| *e == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown emotion label {name:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsefConfig {
    /// Width of one frame-aligned MFCC row (`W·C`).
    pub input_dim: usize,
    pub feature_dim: usize,
    pub query_dim: usize,
    pub memory_slots: usize,
    pub num_classes: usize,
}

impl MsefConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            feature_dim: FEATURE_DIM,
            query_dim: 64,
            memory_slots: 64,
            num_classes: NUM_EMOTIONS,
        }
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// The shared memories `M1` (`d_q × m`) and `M2` (`m × d`).
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub m1: Tensor,
    pub m2: Tensor,
}

#[derive(Debug, Clone)]
pub struct MemoryUnit {
    pub g1: Linear,
    pub bank: MemoryBank,
    pub g2: Linear,
}

impl MemoryUnit {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, query_dim: usize, slots: usize) -> Result<Self> {
        let g1 = Linear::new(store, &format!("{name}.g1"), dim, query_dim)?;
        let m1 = store.uniform(&format!("{name}.m1"), &[query_dim, slots], 1.0 / (query_dim as f64).sqrt())?;
        let m2 = store.uniform(&format!("{name}.m2"), &[slots, dim], 1.0 / (slots as f64).sqrt())?;
        let g2 = Linear::zeros(store, &format!("{name}.g2"), dim, dim)?;
        Ok(Self {
            g1,
            bank: MemoryBank { m1, m2 },
            g2,
        })
    }

    /// Attention of each feature over the memory slots, `softmax(g1(f)·M1)`.
    pub fn slot_weights(&self, f: &Tensor) -> Result<Tensor> {
        let q = self.g1.forward(f)?;
        let dims = q.dims().to_vec();
        let scores = q
            .reshape(((), dims[dims.len() - 1]))?
            .matmul(&self.bank.m1)?;
        let check = scores.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite {
                what: "memory scores".into(),
                step: 0,
            });
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.bank.m1.dims()[1];
        Ok(softmax_last(&scores)?.reshape(out_dims)?)
    }

    /// `f_e = f + g2(softmax(g1(f)·M1)·M2)`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let w = self.slot_weights(f)?;
        let dims = w.dims().to_vec();
        let read = w
            .reshape(((), dims[dims.len() - 1]))?
            .matmul(&self.bank.m2)?
            .reshape(f.dims())?;
        Ok((f + self.g2.forward(&read)?)?)
    }
}

/// Linear head with per-class sigmoid.
#[derive(Debug, Clone)]
pub struct EmotionClassifier {
    pub head: Linear,
}

impl EmotionClassifier {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            head: Linear::new(store, name, dim, classes)?,
        })
    }

    pub fn logits(&self, f_e: &Tensor) -> Result<Tensor> {
        self.head.forward(f_e)
    }

    pub fn forward(&self, f_e: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(f_e)?)
    }
}

pub struct MsefOutput {
    pub f: Tensor,
    pub f_e: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Msef {
    pub config: MsefConfig,
    pub encoder: Mlp,
    pub memory: MemoryUnit,
    pub classifier: EmotionClassifier,
}

impl Msef {
    /// Registers parameters under `{prefix}.encoder`, `{prefix}.memory` and
    /// `{prefix}.classifier`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: MsefConfig) -> Result<Self> {
        let d = config.feature_dim;
        Ok(Self {
            config,
            encoder: Mlp::new(store, &format!("{prefix}.encoder"), config.input_dim, d, d)?,
            memory: MemoryUnit::new(
                store,
                &format!("{prefix}.memory"),
                d,
                config.query_dim,
                config.memory_slots,
            )?,
            classifier: EmotionClassifier::new(store, &format!("{prefix}.classifier"), d, config.num_classes)?,
        })
    }

    /// MFCC block(s) `(…, W·C)` to the pre-memory feature `f`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<MsefOutput> {
        let f = self.encode(x)?;
        let f_e = self.memory.forward(&f)?;
        let probs = self.classifier.forward(&f_e)?;
        Ok(MsefOutput { f, f_e, probs })
    }
}

/// Checks that every row of the last axis is a one-hot vector.
fn validate_one_hot(labels: &Tensor) -> Result<()> {
    let classes = *labels.dims().last().unwrap_or(&0);
    let flat = labels.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if classes == 0 {
        return Err(Error::InvalidInput("empty label tensor".into()));
    }
    for row in flat.chunks(classes) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::InvalidInput(format!("label {row:?} is not one-hot")));
        }
    }
    Ok(())
}

/// Binary cross-entropy averaged over classes and samples. Probabilities are
/// clamped to `[1e-7, 1 − 1e-7]` before the logs.
pub fn emotion_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.dims() != labels.dims() {
        return Err(Error::shape(format!("{:?}", probs.dims()), format!("{:?}", labels.dims())));
    }
    validate_one_hot(labels)?;
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let y = labels.to_dtype(probs.dtype())?;
    let pos = (&y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// One-hot `(n, 8)` label tensor.
pub fn one_hot(indices: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f32; indices.len() * NUM_EMOTIONS];
    for (row, &i) in indices.iter().enumerate() {
        if i >= NUM_EMOTIONS {
            return Err(Error::InvalidInput(format!("emotion index {i} out of range")));
        }
        data[row * NUM_EMOTIONS + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (indices.len(), NUM_EMOTIONS), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{all_entries, check_gradients};
    use candle_core::Device;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), cols), &Device::Cpu).unwrap()
    }

    fn vec2(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    fn randn(store_seed: u64, shape: (usize, usize)) -> Tensor {
        let mut s = ParamStore::new(DType::F64, store_seed);
        s.uniform("x", &[shape.0, shape.1], 2.0).unwrap()
    }

    #[test]
    fn encoder_zero_in_zero_out() {
        let mut s = ParamStore::new(DType::F64, 0);
        let m = Msef::new(&mut s, "msef", MsefConfig::new(52)).unwrap();
        for name in ["msef.encoder.fc1.bias", "msef.encoder.fc2.bias"] {
            let len = s.get(name).unwrap().elem_count();
            s.set(name, &Tensor::zeros(len, DType::F64, &Device::Cpu).unwrap()).unwrap();
        }
        let f = m.encode(&Tensor::zeros((3, 52), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(f.dims(), &[3, 128]);
        assert!(vec2(&f).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_identical_rows_identical_outputs() {
        let mut s = ParamStore::new(DType::F64, 1);
        let m = Msef::new(&mut s, "msef", MsefConfig::new(4)).unwrap();
        let row = [0.3, -1.0, 2.0, 0.5];
        let f = vec2(&m.encode(&t2(&[&row, &row, &row])).unwrap());
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
    }

    #[test]
    fn encoder_toy_matches_hand_arithmetic() {
        let mut s = ParamStore::new(DType::F64, 0);
        let cfg = MsefConfig {
            input_dim: 2,
            feature_dim: 2,
            query_dim: 2,
            memory_slots: 2,
            num_classes: 2,
        };
        let m = Msef::new(&mut s, "msef", cfg).unwrap();
        let (w1, b1) = ([[0.5, -1.0], [2.0, 0.25]], [0.1, -0.2]);
        let (w2, b2) = ([[1.0, -0.5], [0.3, 0.7]], [0.0, 0.05]);
        s.set("msef.encoder.fc1.weight", &t2(&[&w1[0], &w1[1]])).unwrap();
        s.set("msef.encoder.fc1.bias", &Tensor::new(&b1, &Device::Cpu).unwrap()).unwrap();
        s.set("msef.encoder.fc2.weight", &t2(&[&w2[0], &w2[1]])).unwrap();
        s.set("msef.encoder.fc2.bias", &Tensor::new(&b2, &Device::Cpu).unwrap()).unwrap();
        let x = [0.8, -0.6];
        let h: Vec<f64> = (0..2)
            .map(|i| silu(w1[i][0] * x[0] + w1[i][1] * x[1] + b1[i]))
            .collect();
        let want: Vec<f64> = (0..2).map(|i| w2[i][0] * h[0] + w2[i][1] * h[1] + b2[i]).collect();
        let got = vec2(&m.encode(&t2(&[&x])).unwrap());
        for i in 0..2 {
            assert!((got[0][i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_g2_is_residual_identity() {
        let mut s = ParamStore::new(DType::F64, 2);
        let m = Msef::new(&mut s, "msef", MsefConfig::new(52)).unwrap();
        let f = randn(9, (5, 128));
        let fe = m.memory.forward(&f).unwrap();
        let (a, b) = (vec2(&f), vec2(&fe));
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn single_slot_reads_m2_row() {
        let mut s = ParamStore::new(DType::F64, 3);
        let unit = MemoryUnit::new(&mut s, "mem", 4, 3, 1).unwrap();
        s.set("mem.g2.weight", &randn(4, (4, 4))).unwrap();
        let f = randn(5, (2, 4));
        let w = vec2(&unit.slot_weights(&f).unwrap());
        assert!(w.iter().all(|r| r == &vec![1.0]));
        let expected = (&f + unit.g2.forward(&unit.bank.m2.broadcast_as((2, 4)).unwrap()).unwrap()).unwrap();
        let got = unit.forward(&f).unwrap();
        for (a, b) in vec2(&got).iter().flatten().zip(vec2(&expected).iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn toy_memory_matches_scalar_oracle() {
        let mut s = ParamStore::new(DType::F64, 4);
        let unit = MemoryUnit::new(&mut s, "mem", 2, 2, 2).unwrap();
        let g1w = [[0.4, -0.3], [0.2, 0.9]];
        let g1b = [0.05, -0.1];
        let m1 = [[1.0, -0.5], [0.25, 0.75]];
        let m2 = [[0.3, -0.2], [-0.6, 0.8]];
        let g2w = [[0.5, 0.1], [-0.4, 0.2]];
        let g2b = [0.01, 0.02];
        s.set("mem.g1.weight", &t2(&[&g1w[0], &g1w[1]])).unwrap();
        s.set("mem.g1.bias", &Tensor::new(&g1b, &Device::Cpu).unwrap()).unwrap();
        s.set("mem.m1", &t2(&[&m1[0], &m1[1]])).unwrap();
        s.set("mem.m2", &t2(&[&m2[0], &m2[1]])).unwrap();
        s.set("mem.g2.weight", &t2(&[&g2w[0], &g2w[1]])).unwrap();
        s.set("mem.g2.bias", &Tensor::new(&g2b, &Device::Cpu).unwrap()).unwrap();

        let f = [1.5, -0.7];
        let q: Vec<f64> = (0..2).map(|i| g1w[i][0] * f[0] + g1w[i][1] * f[1] + g1b[i]).collect();
        let sc: Vec<f64> = (0..2).map(|j| q[0] * m1[0][j] + q[1] * m1[1][j]).collect();
        let z = sc[0].exp() + sc[1].exp();
        let p = [sc[0].exp() / z, sc[1].exp() / z];
        let r: Vec<f64> = (0..2).map(|j| p[0] * m2[0][j] + p[1] * m2[1][j]).collect();
        let want: Vec<f64> = (0..2)
            .map(|i| f[i] + g2w[i][0] * r[0] + g2w[i][1] * r[1] + g2b[i])
            .collect();
        let got = vec2(&unit.forward(&t2(&[&f])).unwrap());
        for i in 0..2 {
            assert!((got[0][i] - want[i]).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn classifier_examples() {
        let mut s = ParamStore::new(DType::F64, 5);
        let c = EmotionClassifier::new(&mut s, "cls", 2, 2).unwrap();
        s.set("cls.weight", &t2(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        s.set("cls.bias", &Tensor::new(&[0.0f64, 0.0], &Device::Cpu).unwrap()).unwrap();
        let p = vec2(&c.forward(&t2(&[&[3.0, -2.0]])).unwrap());
        assert_eq!(p[0], vec![0.5, 0.5]);

        let (w, b) = ([[1.0, 2.0], [-0.5, 0.25]], [0.1, -0.3]);
        s.set("cls.weight", &t2(&[&w[0], &w[1]])).unwrap();
        s.set("cls.bias", &Tensor::new(&b, &Device::Cpu).unwrap()).unwrap();
        let x = [0.4, -0.9];
        let p = vec2(&c.forward(&t2(&[&x])).unwrap());
        for k in 0..2 {
            let z = w[k][0] * x[0] + w[k][1] * x[1] + b[k];
            assert!((p[0][k] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-14);
        }
        // Raising the first input raises class 0's logit and hence its probability.
        let p2 = vec2(&c.forward(&t2(&[&[0.5, -0.9]])).unwrap());
        assert!(p2[0][0] > p[0][0]);
    }

    #[test]
    fn loss_closed_forms() {
        let dev = Device::Cpu;
        let labels = one_hot(&[3, 0], DType::F64, &dev).unwrap();
        let half = Tensor::full(0.5f64, (2, 8), &dev).unwrap();
        let l = emotion_loss(&half, &labels).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = emotion_loss(&labels, &labels).unwrap().to_scalar::<f64>().unwrap();
        assert!(l <= 1.1e-7, "{l}");
        let bad = t2(&[&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(emotion_loss(&Tensor::full(0.5f64, (1, 8), &dev).unwrap(), &bad).is_err());
        assert!(emotion_loss(&half, &one_hot(&[1], DType::F64, &dev).unwrap()).is_err());
        assert!(emotion_index("happy").is_ok());
        assert!(emotion_index("bored").is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut s = ParamStore::new(DType::F64, 6);
        let m = Msef::new(&mut s, "msef", MsefConfig::new(6)).unwrap();
        s.set("msef.memory.g2.weight", &randn(1, (128, 128)).affine(0.05, 0.0).unwrap()).unwrap();
        let x = randn(7, (4, 6));
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let a = m.forward(&x).unwrap().probs.index_select(&perm, 0).unwrap();
        let b = m.forward(&x.index_select(&perm, 0).unwrap()).unwrap().probs;
        assert_eq!(vec2(&a), vec2(&b));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::new(DType::F64, 8);
        let cfg = MsefConfig {
            input_dim: 6,
            feature_dim: 8,
            query_dim: 4,
            memory_slots: 4,
            num_classes: NUM_EMOTIONS,
        };
        let m = Msef::new(&mut s, "msef", cfg).unwrap();
        // Move g2 off zero so every parameter carries gradient.
        s.set("msef.memory.g2.weight", &randn(2, (8, 8)).affine(0.3, 0.0).unwrap()).unwrap();
        let x = randn(3, (5, 6));
        let y = one_hot(&[0, 3, 7, 3, 5], DType::F64, &Device::Cpu).unwrap();
        let report = check_gradients(&s, &all_entries(&s), 1e-5, || {
            emotion_loss(&m.forward(&x)?.probs, &y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000) {
            let x = randn(seed, (6, 64)).affine(10.0, 0.0).unwrap();
            for row in vec2(&softmax_last(&x).unwrap()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_non_negative(seed in 0u64..10_000, label in 0usize..8) {
            let p = randn(seed, (1, 8)).affine(0.5, 0.5).unwrap().clamp(0.0, 1.0).unwrap();
            let y = one_hot(&[label], DType::F64, &Device::Cpu).unwrap();
            prop_assert!(emotion_loss(&p, &y).unwrap().to_scalar::<f64>().unwrap() >= 0.0);
        }
    }
}
