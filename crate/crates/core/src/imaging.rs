//! Image containers shared by the renderer, the translator and the metrics,
//! plus PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Single-channel `height × width` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path.as_ref(),
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))?
            .into_luma8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }
}

/// Three-channel image stored channel-major (`3 × H × W`), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl FrameImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(3 * width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..3 {
            img.data[c * width * height..(c + 1) * width * height].fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * plane + i] = *v;
        }
    }

    pub fn same_shape(&self, other: &FrameImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Builds an image from a `(3, H, W)` or `(1, 3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let dims = t.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::shape("(3, H, W)", format!("{dims:?}")));
        }
        let (h, w) = (dims[1], dims[2]);
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_data(w, h, data)
    }

    /// Quantises to 8 bits; values are clamped to [0, 1] first.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let plane = self.width * self.height;
        let mut bytes = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                bytes.push(to_u8(self.data[c * plane + i]));
            }
        }
        image::save_buffer(
            path.as_ref(),
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = raw[3 * i + c] as f32 / 255.0;
            }
        }
        Self::from_data(w, h, data)
    }

    /// Per-pixel channel mean.
    pub fn to_gray(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| (0..3).map(|c| self.data[c * plane + i] as f64).sum::<f64>() / 3.0)
            .collect()
    }
}
