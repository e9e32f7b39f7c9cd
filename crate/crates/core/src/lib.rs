pub mod analytics;
pub mod checkpoint;
pub mod control;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use grid::ImageGrid;

/// The book's code blocks, run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/schedule.md")]
    struct Schedule;
    #[doc = include_str!("../../../book/src/denoiser.md")]
    struct Denoiser;
    #[doc = include_str!("../../../book/src/control.md")]
    struct Control;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/analytics.md")]
    struct Analytics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/service.md")]
    struct Service;
}
