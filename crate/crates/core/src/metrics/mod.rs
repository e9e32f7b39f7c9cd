//! Image-set metrics (FID, KID, SSIM, PSNR) and the rating statistics.

mod distance;
mod features;
mod image;
mod report;
mod stats;

pub use distance::{fid, frechet_distance, kid, mean_cov, poly_kernel};
pub use features::{extract_features, FeatureExtractor, FeatureSet, RandomConvExtractor, Source};
pub use image::{mse, psnr, ssim, SsimParams};
pub use report::{evaluate, nonfinite, render_metric_table, MetricReport, KID_DEGREE};
pub use stats::{score_summary, summarize, welch_t, RatedScore, ScoreSummary, ScoreTable, WelchTest};
