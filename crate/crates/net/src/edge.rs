//! HTTP wrapper around an emulated edge server.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use dedup_core::edge::{CacheStats, EntryRecord};
use dedup_core::stats::{HEADER_CPU, HEADER_GROUPS, HEADER_MEM};
use dedup_core::wire::{
    decode_payload, ResponseBody, HEADER_CLIENT_ID, HEADER_REUSED, HEADER_SIMILARITY, HEADER_TASK_ID,
    HEADER_THRESHOLD,
};
use dedup_core::{EdgeServer, Error, RegistrationMessage, TaskRequest};

use crate::error_response;
use crate::proxy::MigrateOrder;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MigrateRequest {
    /// Sent by the proxy: hand `[lo, hi]` to another server.
    Order(MigrateOrder),
    /// Sent by a peer: entries to store.
    Entries(Vec<EntryRecord>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrateResult {
    pub moved: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FailControl {
    #[serde(default = "yes")]
    pub failed: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone)]
pub struct EdgeState {
    server: Arc<EdgeServer>,
    client: reqwest::Client,
    started: Instant,
}

impl EdgeState {
    pub fn new(server: EdgeServer) -> Self {
        Self {
            server: Arc::new(server),
            client: reqwest::Client::new(),
            started: Instant::now(),
        }
    }

    pub fn server(&self) -> &Arc<EdgeServer> {
        &self.server
    }

    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    /// Registers with the proxy at `proxy`, advertising `address`.
    pub async fn register(&self, proxy: &str, address: &str) -> anyhow::Result<()> {
        let msg = RegistrationMessage { server: self.server.id(), address: address.to_owned() };
        self.client
            .post(format!("http://{proxy}/register"))
            .json(&msg)
            .send()
            .await?
            .error_for_status()?;
        Ok(())
    }

    /// Sends usage notifications to the proxy every `interval` until the
    /// server is failed.
    pub fn spawn_notifier(&self, proxy: String, interval: Duration) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            loop {
                tick.tick().await;
                let Some(report) = state.server.report_stats(state.now()) else {
                    continue;
                };
                let sent = state.client.post(format!("http://{proxy}/stats")).json(&report).send().await;
                if let Err(e) = sent {
                    tracing::debug!(error = %e, "stats notification failed");
                }
            }
        })
    }
}

pub fn router(state: EdgeState) -> Router {
    Router::new()
        .route("/svc/{service}", post(task))
        .route("/migrate", post(migrate))
        .route("/control/fail", post(fail))
        .route("/cache/stats", get(cache_stats))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: EdgeState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

async fn task(
    State(state): State<EdgeState>,
    Path(service): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if state.server.is_failed() {
        // A failed server just stops answering.
        std::future::pending::<()>().await;
    }
    let threshold = match header(&headers, HEADER_THRESHOLD).map(str::parse::<f64>) {
        None => 0.9,
        Some(Ok(t)) => t,
        Some(Err(_)) => return error_response(&Error::input("bad similarity threshold")),
    };
    let payload = match decode_payload(&body) {
        Ok(p) => p,
        Err(e) => return error_response(&e),
    };
    let req = TaskRequest {
        task_id: header(&headers, HEADER_TASK_ID).unwrap_or("").to_owned(),
        service,
        threshold,
        signature: None,
        payload,
        client_id: header(&headers, HEADER_CLIENT_ID).unwrap_or("").to_owned(),
    };
    let resp = match state.server.handle_task(&req, state.now()) {
        Ok(r) => r,
        Err(Error::Unavailable(_)) => {
            std::future::pending::<()>().await;
            unreachable!()
        }
        Err(e) => return error_response(&e),
    };
    let mut out = HeaderMap::new();
    out.insert(HeaderName::from_static(HEADER_REUSED), HeaderValue::from_static(if resp.reused { "1" } else { "0" }));
    if let Some(sim) = resp.similarity {
        out.insert(HeaderName::from_static(HEADER_SIMILARITY), value(&format!("{sim:.6}")));
    }
    let pb = &resp.piggyback;
    for (name, v) in [(HEADER_CPU, &pb.cpu), (HEADER_MEM, &pb.mem), (HEADER_GROUPS, &pb.groups)] {
        if let Some(v) = v {
            out.insert(HeaderName::from_static(name), value(v));
        }
    }
    let body = ResponseBody {
        task_id: resp.task_id,
        label: resp.result.label,
        reused: resp.reused,
        similarity: resp.similarity,
    };
    (out, Json(body)).into_response()
}

fn value(s: &str) -> HeaderValue {
    HeaderValue::from_str(s).expect("printable header value")
}

async fn migrate(State(state): State<EdgeState>, Json(req): Json<MigrateRequest>) -> Response {
    match req {
        MigrateRequest::Entries(records) => {
            let mut entries = Vec::with_capacity(records.len());
            for r in records {
                match state.server.from_record(r, state.now()) {
                    Ok(e) => entries.push(e),
                    Err(e) => return error_response(&e),
                }
            }
            let moved = state.server.insert_entries(entries);
            Json(MigrateResult { moved }).into_response()
        }
        MigrateRequest::Order(order) => {
            let entries = state.server.extract_range(order.lo, order.hi);
            if entries.is_empty() {
                return Json(MigrateResult { moved: 0 }).into_response();
            }
            let records: Vec<EntryRecord> = entries.iter().map(|e| state.server.to_record(e)).collect();
            let sent = state
                .client
                .post(format!("http://{}/migrate", order.to_address))
                .json(&MigrateRequest::Entries(records))
                .send()
                .await
                .and_then(|r| r.error_for_status());
            match sent {
                Ok(_) => {
                    state.server.record_migrated_out(entries.len());
                    Json(MigrateResult { moved: entries.len() }).into_response()
                }
                Err(e) => {
                    // Keep the entries; the target starts cold.
                    tracing::warn!(to = %order.to_address, error = %e, "migration failed");
                    state.server.restore_entries(entries);
                    (StatusCode::BAD_GATEWAY, e.to_string()).into_response()
                }
            }
        }
    }
}

async fn fail(State(state): State<EdgeState>, body: Option<Json<FailControl>>) -> StatusCode {
    let failed = body.is_none_or(|Json(c)| c.failed);
    state.server.set_failed(failed);
    StatusCode::NO_CONTENT
}

async fn cache_stats(State(state): State<EdgeState>) -> Json<CacheStats> {
    Json(state.server.cache_stats())
}
