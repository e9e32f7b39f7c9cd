use serde::{Deserialize, Serialize};

use super::distance::{fid, kid};
use super::features::{extract_features, FeatureExtractor, Source};
use super::image::{psnr, ssim, SsimParams};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// JSON has no infinities; they travel as the strings `"inf"` and `"-inf"`.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad number {t:?}"))),
        }
    }
}

pub const KID_DEGREE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    /// Unbiased MMD² with a cubic polynomial kernel, not rescaled.
    pub kid: f64,
    pub ssim_mean: f64,
    #[serde(with = "nonfinite")]
    pub psnr_mean: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor_id: String,
    pub ssim: SsimParams,
}

/// FID and KID over the two sets, SSIM and PSNR over index-aligned pairs.
/// Pixel values are taken in [0, 1].
pub fn evaluate(
    real: &[ImageGrid],
    generated: &[ImageGrid],
    extractor: &dyn FeatureExtractor,
    ssim_params: &SsimParams,
) -> Result<MetricReport> {
    if real.len() != generated.len() {
        return Err(Error::validation(
            "images",
            format!("{} real vs {} generated; pairs must align", real.len(), generated.len()),
        ));
    }
    let fr = extract_features(real, extractor, Source::Real)?;
    let fg = extract_features(generated, extractor, Source::Generated)?;
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (r, g) in real.iter().zip(generated) {
        ssim_sum += ssim(r, g, ssim_params)?;
        psnr_sum += psnr(r, g, ssim_params.data_range)?;
    }
    let n = real.len() as f64;
    Ok(MetricReport {
        fid: fid(&fr, &fg)?,
        kid: kid(&fr, &fg, KID_DEGREE)?,
        ssim_mean: ssim_sum / n,
        psnr_mean: psnr_sum / n,
        n_real: real.len(),
        n_gen: generated.len(),
        extractor_id: extractor.id(),
        ssim: *ssim_params,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

/// Plain-text table with one row per named report.
pub fn render_metric_table(rows: &[(&str, &MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str("| Model            | FID ↓     | KID ↓    | SSIM ↑ | PSNR ↑ |\n");
    out.push_str("|------------------|-----------|----------|--------|--------|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name:<16} | {:>9.3} | {:>8.4} | {:>6.3} | {:>6} |\n",
            r.fid,
            r.kid,
            r.ssim_mean,
            fmt_db(r.psnr_mean)
        ));
    }
    if let Some((_, first)) = rows.first() {
        out.push_str(&format!(
            "features: {}; KID: unbiased MMD², cubic kernel, unscaled; SSIM: window {}, sigma {}, L = {}\n",
            first.extractor_id, first.ssim.window, first.ssim.sigma, first.ssim.data_range
        ));
    }
    out
}
