//! Latent-space readouts: middle-block embeddings and their PCA projection.

mod embed;
mod pca;

pub use embed::{collect_embeddings, probe_timestep, EmbedOptions, EmbeddingQuery, MidBlock};
pub use pca::{export_projection, pca_fit, EmbeddingSet, PcaModel, ProjectionInfo};
