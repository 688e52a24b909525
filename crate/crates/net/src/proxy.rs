//! HTTP front end of the deduplicator.
//!
//! Clients POST tasks to `/svc/{service}`; the proxy picks a server, forwards
//! the request with the bucket and epoch attached, and relays the answer
//! without the piggybacked usage headers.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::TcpListener;

use dedup_core::proxy::{Reconfiguration, WireTask};
use dedup_core::stats::{HEADER_CPU, HEADER_GROUPS, HEADER_MEM};
use dedup_core::wire::{
    HEADER_BUCKET, HEADER_CLIENT_ID, HEADER_EPOCH, HEADER_LSH, HEADER_REUSED, HEADER_SERVED_BY,
    HEADER_SIMILARITY, HEADER_TASK_ID, HEADER_THRESHOLD,
};
use dedup_core::{Deduplicator, Error, MigrationDirective, PiggybackFields, RegistrationMessage, StatsReport};

use crate::error_response;

/// Body of a migration order sent to the server giving up a range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct MigrateOrder {
    pub lo: u32,
    pub hi: u32,
    pub to_address: String,
}

#[derive(Clone)]
pub struct ProxyState {
    inner: Arc<Inner>,
}

struct Inner {
    dedup: Deduplicator,
    client: reqwest::Client,
    started: Instant,
}

impl ProxyState {
    pub fn new(dedup: Deduplicator) -> Self {
        Self {
            inner: Arc::new(Inner {
                dedup,
                client: reqwest::Client::new(),
                started: Instant::now(),
            }),
        }
    }

    pub fn dedup(&self) -> &Deduplicator {
        &self.inner.dedup
    }

    fn now(&self) -> Duration {
        self.inner.started.elapsed()
    }

    /// Closes the load window, resizes slices and sends out the resulting
    /// migration orders. Returns the orders that were sent.
    pub async fn redistribute_now(&self) -> Result<Vec<MigrationDirective>, Error> {
        match self.dedup().redistribution_tick()? {
            Some(Reconfiguration { directives, .. }) => {
                self.dispatch(&directives).await;
                Ok(directives)
            }
            None => Ok(Vec::new()),
        }
    }

    /// Drops servers that look dead.
    pub fn check_failures(&self) {
        for server in self.dedup().detect_failures(self.now()) {
            tracing::warn!(%server, "server considered failed");
            if let Err(e) = self.dedup().handle_failure(server) {
                tracing::error!(%server, error = %e, "failure handling");
            }
        }
    }

    async fn dispatch(&self, directives: &[MigrationDirective]) {
        for d in directives {
            let (Some(from), Some(to)) = (self.dedup().address_of(d.from), self.dedup().address_of(d.to)) else {
                continue;
            };
            let order = MigrateOrder { lo: d.lo, hi: d.hi, to_address: to };
            let sent = self
                .inner
                .client
                .post(format!("http://{from}/migrate"))
                .json(&order)
                .send()
                .await
                .and_then(|r| r.error_for_status());
            if let Err(e) = sent {
                tracing::warn!(from = %d.from, to = %d.to, error = %e, "migration order failed");
            }
        }
    }

    /// Periodic redistribution and failure detection.
    pub fn spawn_background(&self) -> Vec<tokio::task::JoinHandle<()>> {
        let cfg = *self.dedup().config();
        let redistribute = {
            let state = self.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(cfg.redistribution_interval);
                tick.tick().await;
                loop {
                    tick.tick().await;
                    if let Err(e) = state.redistribute_now().await {
                        tracing::error!(error = %e, "redistribution failed; keeping the previous table");
                    }
                }
            })
        };
        let detect = {
            let state = self.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(cfg.notification_interval);
                loop {
                    tick.tick().await;
                    state.check_failures();
                }
            })
        };
        vec![redistribute, detect]
    }
}

pub fn router(state: ProxyState) -> Router {
    Router::new()
        .route("/svc/{service}", post(forward_task))
        .route("/register", post(register))
        .route("/stats", post(stats))
        .route("/metrics", get(metrics))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: ProxyState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

async fn forward_task(
    State(state): State<ProxyState>,
    Path(service): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let client_id = header(&headers, HEADER_CLIENT_ID).unwrap_or("");
    let decision = match state.dedup().route_wire(&WireTask {
        client_id,
        signature_hex: header(&headers, HEADER_LSH),
        body: &body,
    }) {
        Ok(d) => d,
        Err(e) => return error_response(&e),
    };
    let Some(address) = state.dedup().address_of(decision.server) else {
        return error_response(&Error::UnknownServer(decision.server));
    };
    let bits = state.dedup().config().lsh.bits;
    let mut request = state
        .inner
        .client
        .post(format!("http://{address}/svc/{service}"))
        .timeout(state.dedup().config().response_timeout)
        .header(HEADER_BUCKET, decision.signature.to_hex(bits))
        .header(HEADER_EPOCH, decision.epoch.to_string())
        .header(HEADER_LSH, decision.signature.to_hex(bits))
        .body(body);
    for name in [HEADER_TASK_ID, HEADER_CLIENT_ID, HEADER_THRESHOLD] {
        if let Some(v) = headers.get(name) {
            request = request.header(name, v.clone());
        }
    }

    state.dedup().forward_started(decision.server);
    let upstream = match request.send().await {
        Ok(r) => r,
        Err(e) => {
            state.dedup().forward_finished(decision.server, state.now(), None);
            let status = if e.is_timeout() { StatusCode::GATEWAY_TIMEOUT } else { StatusCode::BAD_GATEWAY };
            return (status, format!("{} did not answer: {e}", decision.server)).into_response();
        }
    };
    let status = upstream.status();
    let up_headers = upstream.headers().clone();
    let piggyback = PiggybackFields {
        cpu: header(&up_headers, HEADER_CPU).map(str::to_owned),
        mem: header(&up_headers, HEADER_MEM).map(str::to_owned),
        groups: header(&up_headers, HEADER_GROUPS).map(str::to_owned),
    };
    let body = match upstream.bytes().await {
        Ok(b) => b,
        Err(e) => {
            state.dedup().forward_finished(decision.server, state.now(), None);
            return (StatusCode::BAD_GATEWAY, e.to_string()).into_response();
        }
    };
    state.dedup().forward_finished(decision.server, state.now(), Some(&piggyback));

    let mut out = HeaderMap::new();
    for name in [HEADER_REUSED, HEADER_SIMILARITY, "content-type"] {
        if let Some(v) = up_headers.get(name) {
            out.insert(HeaderName::from_static(name), v.clone());
        }
    }
    out.insert(
        HeaderName::from_static(HEADER_SERVED_BY),
        HeaderValue::from_str(&decision.server.0.to_string()).expect("digits"),
    );
    (StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY), out, body).into_response()
}

async fn register(State(state): State<ProxyState>, Json(msg): Json<RegistrationMessage>) -> Response {
    match state.dedup().handle_register(&msg, state.now()) {
        Ok(directives) => {
            tracing::info!(server = %msg.server, address = %msg.address, "registered");
            state.dispatch(&directives).await;
            (StatusCode::OK, Json(directives.len())).into_response()
        }
        Err(e) => error_response(&e),
    }
}

async fn stats(State(state): State<ProxyState>, Json(report): Json<StatsReport>) -> Response {
    match state.dedup().ingest_notification(&report, state.now()) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(&e),
    }
}

async fn metrics(State(state): State<ProxyState>) -> Response {
    Json(state.dedup().admin_metrics()).into_response()
}
