//! HTTP front end over [`FeedService`].

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use feedkit_core::feed::{FeedItem, FeedService, Surface};
use feedkit_core::Event;

#[derive(Debug, Deserialize)]
pub struct FeedQuery {
    pub surface: Option<Surface>,
    pub size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Refreshed {
    refreshed: usize,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<FeedService>;

async fn feed(
    State(svc): State<Shared>,
    Path(customer): Path<String>,
    Query(q): Query<FeedQuery>,
) -> Json<Vec<FeedItem>> {
    let surface = q.surface.unwrap_or(Surface::All);
    let size = q.size.unwrap_or(svc.feed_size());
    Json(svc.feed(&customer, surface, size))
}

async fn event(State(svc): State<Shared>, body: axum::body::Bytes) -> Result<StatusCode, ApiError> {
    let ev: Event =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("bad event: {e}")))?;
    match svc.ingest(&ev) {
        Ok(true) => Ok(StatusCode::NO_CONTENT),
        Ok(false) => Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("item {} is not in the catalog", ev.item_id),
        )),
        Err(e) => Err(ApiError(StatusCode::BAD_REQUEST, e.to_string())),
    }
}

async fn refresh(State(svc): State<Shared>) -> Json<Refreshed> {
    let refreshed = tokio::task::spawn_blocking(move || svc.refresh_incremental())
        .await
        .unwrap_or(0);
    Json(Refreshed { refreshed })
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/feed/{customer_id}", get(feed))
        .route("/event", post(event))
        .route("/refresh", post(refresh))
        .route("/health", get(health))
        .with_state(svc)
}

/// Serves until interrupted. With `refresh_every` set, active customers are
/// refreshed on that period in the background.
pub async fn run(svc: FeedService, addr: &str, refresh_every: Option<Duration>) -> Result<()> {
    let svc = Arc::new(svc);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    println!("listening on {local}");
    std::io::stdout().flush()?;
    log::info!("{} customers loaded", svc.customers());

    if let Some(period) = refresh_every {
        let svc = svc.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.tick().await;
            loop {
                tick.tick().await;
                let s = svc.clone();
                match tokio::task::spawn_blocking(move || s.refresh_incremental()).await {
                    Ok(n) if n > 0 => log::info!("refreshed {n} feeds"),
                    Ok(_) => {}
                    Err(e) => log::error!("refresh task failed: {e}"),
                }
            }
        });
    }

    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
