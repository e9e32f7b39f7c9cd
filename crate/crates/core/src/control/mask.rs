use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Binary building-footprint raster, row-major, `true` inside the lot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl FootprintMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::validation(
                "mask",
                format!("{} pixels for a {height}x{width} mask", pixels.len()),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    /// Thresholds the luminance of `grid` at one half.
    pub fn from_grid(grid: &ImageGrid) -> Self {
        let pixels = grid.luminance().into_iter().map(|v| v >= 0.5).collect();
        Self {
            height: grid.height(),
            width: grid.width(),
            pixels,
        }
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid::from_fn(
            self.height,
            self.width,
            1,
            |y, x, _| {
                if self.get(y, x) {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// `(1, 1, H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.pixels.iter().map(|&p| f32::from(u8::from(p))).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|p| **p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            self.get((y * self.height) / height, (x * self.width) / width)
        })
    }
}

/// Applies `x' = A·x + t` to the mask with nearest-neighbour resampling.
///
/// Coordinates are `(column, row)` in pixels measured from the image centre,
/// so scalings grow or shrink the footprint in place. Output pixels whose
/// preimage falls outside the canvas are background.
pub fn affine_condition_transform(mask: &FootprintMask, a: [[f64; 2]; 2], t: [f64; 2]) -> Result<FootprintMask> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::validation("affine matrix", "singular"));
    }
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = (mask.width as f64 / 2.0, mask.height as f64 / 2.0);
    Ok(FootprintMask::from_fn(mask.height, mask.width, |row, col| {
        let px = col as f64 + 0.5 - cx - t[0];
        let py = row as f64 + 0.5 - cy - t[1];
        let sx = inv[0][0] * px + inv[0][1] * py + cx;
        let sy = inv[1][0] * px + inv[1][1] * py + cy;
        let (fx, fy) = (sx.floor(), sy.floor());
        if fx < 0.0 || fy < 0.0 || fx >= mask.width as f64 || fy >= mask.height as f64 {
            false
        } else {
            mask.get(fy as usize, fx as usize)
        }
    }))
}
