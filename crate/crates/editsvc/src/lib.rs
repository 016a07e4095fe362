//! HTTP service behind the interactive mask-authoring workflow.
//!
//! A session holds one base image, its annotation, the user's edit specs in
//! submission order and an append-only history of (mask, preview) renders.

pub mod api;
pub mod session;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use crate::api::{router, ApiError, AppState, ServiceConfig};
pub use crate::session::{EditRequest, EditSession};
pub use crate::store::SessionStore;

/// Binds and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "edit service listening");
    axum::serve(listener, router(state)).await
}
