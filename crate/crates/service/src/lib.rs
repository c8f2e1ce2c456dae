//! HTTP/JSON front end: dataset upload, community views, training jobs,
//! attributions, what-if scenarios and saved strategies.

pub mod api;
pub mod config;
mod routes;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use config::ServiceConfig;
pub use routes::router;
pub use state::AppState;

/// Binds `host:port` and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.host, state.config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
