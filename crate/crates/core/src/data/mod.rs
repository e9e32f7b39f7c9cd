//! Synthetic (footprint, brief, plan) triples, their manifest and loaders.
//!
//! Plans are recursive binary partitions of a footprint: dark two-pixel walls,
//! rooms tinted by role, white outside the lot. Stadiums and arenas are drawn
//! as seating bowls of concentric bands around a pitch or court.

mod manifest;
mod render;
mod spec;

pub use manifest::{
    build_dataset, load_batches, Batch, BatchLoader, DatasetOptions, DatasetRecord, DatasetSummary, LoadedRecord,
    Manifest, Split, TypeMix, DEFAULT_SIZE, MANIFEST_FILE, SUMMARY_FILE, VAL_FRACTION,
};
pub use render::{generate_sample, Room, RoomRole, Sample, BACKGROUND, PITCH_LINE, WALL};
pub use spec::{prompt_from_spec, BuildingSpec, BuildingType, Footprint};
