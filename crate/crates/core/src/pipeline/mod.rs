//! End-to-end orchestration shared by the command line and the service:
//! run configuration, stage training, checkpoint loading, sampling, and
//! the evaluation and analysis passes.

mod artifacts;
mod config;
mod generator;
mod stages;
mod sweep;
mod tasks;

pub use artifacts::{git_blob_sha1, ArtifactEntry, RunManifest, RunRecorder, Timing};
pub use config::{derive_seed, CodecTraining, DatasetConfig, Precision, RunConfig};
pub use generator::{Generator, Model};
pub use stages::{
    codec_from_checkpoint, load_split, make_examples, plan_tensors, run_stage1, run_stage2, StageOutcome, STAGE1_FILE,
    STAGE2_FILE,
};
pub use sweep::{steps_fidelity_sweep, SweepReport, SweepRow};
pub use tasks::{embedding_grid, evaluate_records, generate_for_records, generator_embeddings};
