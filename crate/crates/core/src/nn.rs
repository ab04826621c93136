//! Minimal neural-network building blocks on top of `candle_core`.
//!
//! Parameters live in a [`ParamStore`]: an ordered map of named [`Var`]s,
//! initialised from a seeded ChaCha stream so that a given seed always yields
//! the same weights. Layers hold tensor handles that share storage with the
//! store, so in-place optimizer updates are seen by every layer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat, named parameter record used by checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.vars.len())
            .field("params", &self.num_params())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Parameter drawn from U(-bound, bound).
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![0.0; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{:?}", value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn export(&self) -> Result<BTreeMap<String, TensorRecord>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), TensorRecord::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Loads every parameter of this store from `records`. Extra records are
    /// ignored; a missing or mis-shaped record is an error.
    pub fn load(&self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        for (name, var) in &self.vars {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if rec.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    rec.shape,
                    var.dims()
                )));
            }
            var.set(&rec.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Fully connected layer, `y = x Wᵀ + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// PyTorch-style U(-1/√in, 1/√in) initialisation.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[out_dim, in_dim])?;
        let bias = store.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("rank >= 1", "scalar"))?;
        if last != self.in_dim() {
            return Err(Error::shape(
                format!("last dim {}", self.in_dim()),
                format!("{dims:?}"),
            ));
        }
        let flat = x.reshape(((), last))?;
        let y = flat.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Two-layer perceptron `Linear → SiLU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform style U(-1/√fan_in, 1/√fan_in) initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps fixed tensors (weight `out×in×k×k`, bias `out`).
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Zero-padded 2-D convolution, `x: (B, C, H, W)`, `w: (O, C, k, k)`.
///
/// Same result as `Tensor::conv2d`, built from shifted slices and a single
/// matmul. Candle's CPU backward for its own conv goes through a direct
/// transposed-convolution loop that is an order of magnitude slower than
/// the slice/cat/matmul gradients used here.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (o, c, k, k2) = w.dims4()?;
    if k != k2 || stride == 0 {
        return Err(Error::InvalidInput(format!("unsupported kernel {k}x{k2} stride {stride}")));
    }
    let x = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let (b, xc, h, wd) = x.dims4()?;
    if xc != c {
        return Err(Error::shape(format!("{c} input channels"), xc));
    }
    if h < k || wd < k {
        return Err(Error::InvalidInput(format!("{h}x{wd} input is smaller than the {k}x{k} kernel")));
    }
    let (ho, wo) = ((h - k) / stride + 1, (wd - k) / stride + 1);
    let dev = x.device();
    let pick = |n: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n).map(|i| (i * stride) as u32).collect();
        Ok(Tensor::from_vec(idx, n, dev)?)
    };
    let (rows, cols) = if stride > 1 { (Some(pick(ho)?), Some(pick(wo)?)) } else { (None, None) };
    let span_h = (ho - 1) * stride + 1;
    let span_w = (wo - 1) * stride + 1;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let mut s = x.narrow(2, ky, span_h)?.narrow(3, kx, span_w)?;
            if let (Some(r), Some(cl)) = (&rows, &cols) {
                s = s.contiguous()?.index_select(r, 2)?.contiguous()?.index_select(cl, 3)?;
            }
            taps.push(s);
        }
    }
    let patches = if taps.len() == 1 {
        taps.pop().expect("one tap").reshape((b, c, ho * wo))?
    } else {
        Tensor::stack(&taps, 2)?.reshape((b, c * k * k, ho * wo))?
    };
    let y = w.reshape((o, c * k * k))?.broadcast_matmul(&patches)?;
    Ok(y.reshape((b, o, ho, wo))?)
}

/// Stride-`k` transposed convolution with a `k×k` kernel (exact upsampling by `k`).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Kernel equals stride, so output blocks do not overlap and the whole
        // op is one matmul followed by a pixel shuffle.
        let (cin, out_ch, k, _) = self.weight.dims4()?;
        let (b, c, h, w) = x.dims4()?;
        if c != cin {
            return Err(Error::shape(format!("{cin} input channels"), c));
        }
        let y = x
            .permute((0, 2, 3, 1))?
            .reshape((b * h * w, c))?
            .matmul(&self.weight.reshape((cin, out_ch * k * k))?)?
            .reshape((b, h, w, out_ch, k, k))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, out_ch, h * k, w * k))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn slice_conv_matches_candle_conv() {
        let mut seed = 0;
        for (c, o, k, pad, stride, hw) in [(3, 4, 3, 1, 1, 9), (2, 1, 7, 0, 1, 12), (5, 3, 1, 0, 1, 6), (3, 8, 3, 1, 2, 11), (4, 2, 3, 1, 2, 8)] {
            seed += 1;
            let x = rand_t(&[2, c, hw, hw + 1], seed);
            let w = rand_t(&[o, c, k, k], seed + 100);
            let ours = conv2d(&x, &w, pad, stride).unwrap();
            let theirs = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-12);
        }
    }

    #[test]
    fn shuffle_upsampling_matches_candle_transposed_conv() {
        let mut store = ParamStore::new(DType::F64, 4);
        let up = ConvTranspose2d::new(&mut store, "up", 6, 3, 2).unwrap();
        let x = rand_t(&[2, 6, 4, 5], 9);
        let theirs = x
            .conv_transpose2d(&up.weight, 0, 0, 2, 1)
            .unwrap()
            .broadcast_add(&up.bias.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&up.forward(&x).unwrap(), &theirs) < 1e-12);
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::new(DType::F64, 7);
        let mut b = ParamStore::new(DType::F64, 7);
        Linear::new(&mut a, "l", 5, 3).unwrap();
        Linear::new(&mut b, "l", 5, 3).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
        let mut c = ParamStore::new(DType::F64, 8);
        Linear::new(&mut c, "l", 5, 3).unwrap();
        assert_ne!(a.export().unwrap(), c.export().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.zeros("x", &[2]).unwrap();
        assert!(s.zeros("x", &[2]).is_err());
    }

    #[test]
    fn linear_matches_hand_arithmetic() {
        let mut s = ParamStore::new(DType::F64, 0);
        let l = Linear::new(&mut s, "l", 2, 1).unwrap();
        s.set("l.weight", &Tensor::new(&[[2.0f64, -1.0]], &Device::Cpu).unwrap())
            .unwrap();
        s.set("l.bias", &Tensor::new(&[0.5f64], &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::new(&[[[3.0f64, 4.0]]], &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.5]);
        assert!(l.forward(&Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn sigmoid_is_logistic() {
        let x = Tensor::new(&[-3.0f64, 0.0, 1.5], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xv, yv) in [-3.0f64, 0.0, 1.5].iter().zip(y) {
            assert!((yv - 1.0 / (1.0 + (-xv).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn export_load_roundtrip() {
        let mut a = ParamStore::new(DType::F32, 1);
        Conv2d::new(&mut a, "c", 2, 3, 3, 1, 1).unwrap();
        let rec = a.export().unwrap();
        let mut b = ParamStore::new(DType::F32, 99);
        Conv2d::new(&mut b, "c", 2, 3, 3, 1, 1).unwrap();
        b.load(&rec).unwrap();
        assert_eq!(b.export().unwrap(), rec);
    }
}
