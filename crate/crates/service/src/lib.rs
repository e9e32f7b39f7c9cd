//! HTTP service behind the blind rating game and the generation studio.
//!
//! Ratings and sessions are appended to a JSONL event log that is replayed on
//! startup; statistics are always recomputed from that log.

mod error;
pub mod events;
pub mod pools;
mod routes;
mod state;

pub use error::ApiError;
pub use events::{stats_from_events, EventLog, LogEvent, RatingRecord, SessionRecord};
pub use pools::{ImagePools, PoolImage};
pub use routes::{prepare_mask, router, IMAGE_ID_HEADER};
pub use state::{AppState, ServiceConfig, MAX_GENERATE, SESSION_IMAGES};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
