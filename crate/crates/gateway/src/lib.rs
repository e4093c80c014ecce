//! HTTP/JSON gateway over a running federation, with a server-sent event feed.
//!
//! The service owns one [`World`] built from a scenario. Bearer tokens and
//! their roles come from the scenario's `tokens` table. Every state-changing
//! endpoint submits at most one transaction; the audit log records which.

mod error;
mod routes;
mod state;

use std::net::SocketAddr;

use fedchain_core::harness::{Scenario, SetupError, World};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use error::{status_for, ApiError};
pub use routes::router;
pub use state::{ApiCall, AppState, CallKind, Envelope};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("port in use: {0}")]
    PortInUse(SocketAddr),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Setup(#[from] SetupError),
}

/// A running service. Dropping the handle leaves it running; call
/// [`ServiceHandle::shutdown`] to stop it.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    state: AppState,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Mutations seen so far, in order.
    pub fn audit_log(&self) -> Vec<ApiCall> {
        self.state.lock().api_log.clone()
    }

    /// Runs `f` against the world under the service lock.
    pub fn with_world<T>(&self, f: impl FnOnce(&World) -> T) -> T {
        f(&self.state.lock().world)
    }

    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task
            .await
            .unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }

    /// Waits until the server stops on its own.
    pub async fn wait(self) -> std::io::Result<()> {
        self.task
            .await
            .unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

/// Builds the world for `scenario` and serves it on `addr`.
pub async fn start_service(
    scenario: Scenario,
    addr: SocketAddr,
) -> Result<ServiceHandle, GatewayError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| match source.kind() {
            std::io::ErrorKind::AddrInUse => GatewayError::PortInUse(addr),
            _ => GatewayError::Bind { addr, source },
        })?;
    let addr = listener
        .local_addr()
        .map_err(|source| GatewayError::Bind { addr, source })?;
    let state = AppState::new(World::new(scenario)?);
    let app = router(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServiceHandle {
        addr,
        state,
        stop: Some(tx),
        task,
    })
}
