//! Channel-then-spatial attention gating (CBAM) for batched `(B, C, H, W)`
//! feature maps.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, Linear, ParamStore};

pub const DEFAULT_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;

/// Border handling of the spatial attention convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    Zero,
    /// Mirror without repeating the edge; folds repeatedly on maps smaller
    /// than the padding.
    Reflect,
    Circular,
}

fn source_index(i: isize, n: usize, mode: PaddingMode) -> usize {
    let n = n as isize;
    match mode {
        PaddingMode::Circular => i.rem_euclid(n) as usize,
        PaddingMode::Reflect => {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - m }) as usize
        }
        PaddingMode::Zero => unreachable!(),
    }
}

/// Pads the last two axes by `pad` on every side.
pub fn pad2d(x: &Tensor, pad: usize, mode: PaddingMode) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let rank = x.rank();
    match mode {
        PaddingMode::Zero => Ok(x.pad_with_zeros(rank - 2, pad, pad)?.pad_with_zeros(rank - 1, pad, pad)?),
        _ => {
            let mut y = x.clone();
            for axis in [rank - 2, rank - 1] {
                let n = y.dims()[axis];
                let idx: Vec<u32> = (-(pad as isize)..(n + pad) as isize)
                    .map(|i| source_index(i, n, mode) as u32)
                    .collect();
                let idx = Tensor::from_vec(idx, n + 2 * pad, x.device())?;
                y = y.index_select(&idx, axis)?;
            }
            Ok(y)
        }
    }
}

/// `sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))` with a shared ReLU MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || reduction > channels || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidInput(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels)?,
        })
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Channel weights `(B, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.fc1.in_dim() {
            return Err(Error::shape(self.fc1.in_dim(), c));
        }
        let flat = x.flatten_from(2)?;
        let avg = flat.mean(D::Minus1)?;
        let max = flat.max(D::Minus1)?;
        sigmoid(&(self.mlp(&avg)? + self.mlp(&max)?)?)
    }
}

/// `sigmoid(conv_k([mean_c(x), max_c(x)]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
    pub padding: PaddingMode,
    kernel: usize,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("spatial kernel {kernel} must be odd")));
        }
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, kernel, 1, 0)?,
            padding: PaddingMode::default(),
            kernel,
        })
    }

    /// Spatial weights `(B, 1, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.dims4()?;
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let stacked = Tensor::cat(&[&avg, &max], 1)?;
        let padded = pad2d(&stacked, self.kernel / 2, self.padding)?;
        sigmoid(&self.conv.forward(&padded)?)
    }
}

/// Which gates a [`Cbam`] applies; a disabled gate acts as all ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gates {
    pub channel: bool,
    pub spatial: bool,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            channel: true,
            spatial: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, &format!("{name}.channel"), channels, reduction)?,
            spatial: SpatialAttention::new(store, &format!("{name}.spatial"), SPATIAL_KERNEL)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_gated(x, Gates::default())
    }

    pub fn forward_gated(&self, x: &Tensor, gates: Gates) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let x = if gates.channel {
            let ch = self.channel.forward(x)?.reshape((b, c, 1, 1))?;
            x.broadcast_mul(&ch)?
        } else {
            x.clone()
        };
        if gates.spatial {
            Ok(x.broadcast_mul(&self.spatial.forward(&x)?)?)
        } else {
            Ok(x)
        }
    }
}
