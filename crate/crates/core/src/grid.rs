//! Host-side raster type shared by the dataset, metrics and I/O code.
//!
//! An [`ImageGrid`] stores `height × width × channels` samples in row-major
//! HWC order with values in the unit range `[0, 1]`. Network code works on
//! NCHW tensors in model space `[-1, 1]`; the conversions live here.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Luminance below which a pixel counts as drawn plan content.
pub const SILHOUETTE_THRESHOLD: f32 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation("image", "dimensions must be nonzero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::validation(
                "image",
                format!(
                    "expected {} samples for {height}x{width}x{channels}, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: &[f32]) {
        let base = (y * self.width + x) * self.channels;
        self.data[base..base + self.channels].copy_from_slice(px);
    }

    /// Rec. 709 luminance; single-channel grids are returned as-is.
    pub fn luminance(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
                .collect(),
        }
    }

    /// Foreground pixels of a rendered plan (dark lines and tinted fills on white).
    pub fn silhouette(&self, threshold: f32) -> Vec<bool> {
        self.luminance().into_iter().map(|l| l < threshold).collect()
    }

    /// Quantizes to 8 bits and back, i.e. what a PNG round trip would produce.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect();
        Self { data, ..*self }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// Model-space tensor of shape `(1, C, H, W)` with values `2v − 1`.
    pub fn to_model_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, c) = self.shape();
        let mut chw = vec![0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    chw[(ch * h + y) * w + x] = self.get(y, x, ch) * 2.0 - 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(chw, (1, c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageGrid::to_model_tensor`]; accepts `(C, H, W)` or `(1, C, H, W)`.
    /// Values outside model space are clamped.
    pub fn from_model_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::validation("tensor", format!("expected rank 3 or 4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let chw: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Self::from_fn(h, w, c, |y, x, ch| {
            ((chw[(ch * h + y) * w + x] + 1.0) * 0.5).clamp(0.0, 1.0)
        }))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_dynamic(img)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self> {
        match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                Self::from_u8(g.height() as usize, g.width() as usize, 1, g.as_raw())
            }
            _ => {
                let rgb = img.to_rgb8();
                Self::from_u8(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.to_u8())
                    .expect("buffer length checked at construction");
                img.write_to(&mut out, image::ImageFormat::Png)?;
            }
            3 => {
                let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.to_u8())
                    .expect("buffer length checked at construction");
                img.write_to(&mut out, image::ImageFormat::Png)?;
            }
            c => {
                return Err(Error::validation(
                    "image",
                    format!("cannot encode {c}-channel image as PNG"),
                ))
            }
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, self.channels, |y, x, c| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx, c)
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Intersection over union of two boolean masks; two empty masks give 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks must have equal size");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Tiles equally sized images left to right, separated by a one-pixel white gutter.
pub fn tile_row(images: &[ImageGrid]) -> Result<ImageGrid> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("images", "nothing to tile"))?;
    let (h, w, c) = first.shape();
    if images.iter().any(|i| i.shape() != (h, w, c)) {
        return Err(Error::validation("images", "mixed image sizes"));
    }
    let n = images.len();
    let total_w = n * w + (n - 1);
    Ok(ImageGrid::from_fn(h, total_w, c, |y, x, ch| {
        let (k, off) = (x / (w + 1), x % (w + 1));
        if off == w {
            1.0
        } else {
            images[k].get(y, off, ch)
        }
    }))
}
