//! HTTP review service for curating model-produced labels.
//!
//! Reviewers pull one leased item at a time from `GET /api/queue/next`, then
//! accept or correct it with `POST /api/items/{id}/review`. Every decision is
//! appended to the review log before the response is sent, so the live state
//! can always be rebuilt by replaying the log over the manifest.
//!
//! | Route | Result |
//! |---|---|
//! | `GET /api/queue/next?reviewer=` | lowest-id free item with annotation, or `item: null` |
//! | `POST /api/items/{id}/review` | 404 unknown, 409 leased elsewhere, 422 invalid label |
//! | `GET /api/items/{id}/image[?p=360]` | original bytes or the model rendition; 410 if the file is gone |
//! | `GET /api/progress` | review counts and per-reviewer tallies |
//!
//! The reviewer id is read from the `x-reviewer` header, falling back to the
//! `reviewer` query or body field.

mod api;
mod config;
mod lease;

use std::net::SocketAddr;
use std::time::Duration;

use scenelayers::datastore::{DatastoreError, LabelStore};
use thiserror::Error;

pub use api::{
    router, AppState, ErrorBody, ItemPayload, QueueResponse, ReviewResponse, REVIEWER_HEADER,
};
pub use config::ServiceConfig;
pub use lease::LeaseTable;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] DatastoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

/// Opens the label store named by `config` and builds the shared state.
pub fn open_state(config: &ServiceConfig) -> Result<AppState, ServiceError> {
    let store = LabelStore::open(&config.dataset, &config.log_path())?;
    Ok(AppState::new(
        store,
        LeaseTable::new(Duration::from_secs(config.lease_seconds)),
    ))
}

/// Binds the configured address and returns the listener with its actual
/// address (useful with port 0).
pub async fn bind(
    config: &ServiceConfig,
) -> Result<(tokio::net::TcpListener, SocketAddr), ServiceError> {
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = open_state(&config)?;
    let (listener, addr) = bind(&config).await?;
    log::info!(
        "review service on http://{addr} for {}",
        config.dataset.display()
    );
    let app = router(state, config.ui_dir.as_deref());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Blocking wrapper around [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServiceConfig) -> Result<(), ServiceError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config))
}
