use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L` of the pixel values.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

fn same_shape(x: &ImageGrid, y: &ImageGrid) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::validation(
            "images",
            format!("shapes differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Weighted mean along one axis; taps falling off the image are dropped and
/// the remaining weights renormalized.
fn blur_axis(src: &[f64], h: usize, w: usize, taps: &[f64], along_x: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &wt) in taps.iter().enumerate() {
                let off = k as isize - r;
                let (yy, xx) = if along_x {
                    (y as isize, x as isize + off)
                } else {
                    (y as isize + off, x as isize)
                };
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                acc += wt * src[yy as usize * w + xx as usize];
                norm += wt;
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

fn blur(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let tmp = blur_axis(src, h, w, taps, true);
    blur_axis(&tmp, h, w, taps, false)
}

/// Mean Gaussian-window SSIM, averaged over pixels and then channels.
pub fn ssim(x: &ImageGrid, y: &ImageGrid, params: &SsimParams) -> Result<f64> {
    same_shape(x, y)?;
    if params.window == 0 || params.window % 2 == 0 || params.sigma <= 0.0 {
        return Err(Error::validation("ssim", "window must be odd and sigma positive"));
    }
    let (h, w, c) = x.shape();
    let taps = gaussian_taps(params.window, params.sigma);
    let c1 = (0.01 * params.data_range).powi(2);
    let c2 = (0.03 * params.data_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |im: &ImageGrid| -> Vec<f64> { (0..h * w).map(|i| f64::from(im.get(i / w, i % w, ch))).collect() };
        let (a, b) = (plane(x), plane(y));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = blur(&a, h, w, &taps);
        let mu_b = blur(&b, h, w, &taps);
        let aa = blur(&prod(&a, &a), h, w, &taps);
        let bb = blur(&prod(&b, &b), h, w, &taps);
        let ab = blur(&prod(&a, &b), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (h * w) as f64;
    }
    Ok(total / c as f64)
}

pub fn mse(x: &ImageGrid, y: &ImageGrid) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.data().len().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(max_val² / MSE)`; identical images give `+∞`.
pub fn psnr(x: &ImageGrid, y: &ImageGrid, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::validation("max_val", "must be positive"));
    }
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / m).log10()
    })
}
