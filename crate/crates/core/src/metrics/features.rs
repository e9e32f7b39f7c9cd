use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
}

/// Maps an image to a fixed-width vector. Distances computed from two feature
/// sets are only comparable when their extractor ids match.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageGrid) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    /// `n` rows of width `d`.
    pub features: Vec<Vec<f64>>,
    pub extractor_id: String,
    pub source: Source,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

struct Conv {
    c_in: usize,
    c_out: usize,
    /// `c_out × c_in × 3 × 3`
    weight: Vec<f64>,
}

impl Conv {
    fn random(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let weight = (0..c_out * c_in * 9)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self { c_in, c_out, weight }
    }

    /// Stride-2, zero-padded 3×3 convolution followed by ReLU. Input is CHW.
    fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; self.c_out * oh * ow];
        for o in 0..self.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..self.c_in {
                        for ky in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += self.weight[((o * self.c_in + c) * 3 + ky) * 3 + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        (out, oh, ow)
    }
}

/// Three stride-2 convolutions with ReLU and Gaussian weights drawn from a
/// fixed seed, then a global average pool.
pub struct RandomConvExtractor {
    seed: u64,
    layers: Vec<Conv>,
}

impl RandomConvExtractor {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Conv::random(3, 16, &mut rng),
            Conv::random(16, 32, &mut rng),
            Conv::random(32, Self::DIM, &mut rng),
        ];
        Self { seed, layers }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("random-conv-d{}-seed{}", Self::DIM, self.seed)
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        let (h, w, c) = image.shape();
        let mut x = vec![0.0; 3 * h * w];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..3 {
                    // grayscale images are broadcast to three channels
                    let v = image.get(y, xx, if c == 1 { 0 } else { ch });
                    x[(ch * h + y) * w + xx] = 2.0 * f64::from(v) - 1.0;
                }
            }
        }
        let (mut hh, mut ww) = (h, w);
        for layer in &self.layers {
            let (next, nh, nw) = layer.forward(&x, hh, ww);
            x = next;
            hh = nh;
            ww = nw;
        }
        let area = (hh * ww) as f64;
        Ok((0..Self::DIM)
            .map(|o| x[o * hh * ww..(o + 1) * hh * ww].iter().sum::<f64>() / area)
            .collect())
    }
}

pub fn extract_features(images: &[ImageGrid], extractor: &dyn FeatureExtractor, source: Source) -> Result<FeatureSet> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("images", "need at least one image"))?;
    let shape = (first.height(), first.width());
    if images.iter().any(|im| (im.height(), im.width()) != shape) {
        return Err(Error::validation("images", "mixed image sizes"));
    }
    if images.iter().any(|im| !matches!(im.channels(), 1 | 3)) {
        return Err(Error::validation("images", "expected 1 or 3 channels"));
    }
    let features = images
        .iter()
        .map(|im| extractor.extract(im))
        .collect::<Result<Vec<_>>>()?;
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("features", "non-finite entries"));
    }
    Ok(FeatureSet {
        features,
        extractor_id: extractor.id(),
        source,
    })
}
