//! Webhook ingress: signature check, event filter, idempotency ledger and
//! the durable job queue. The HTTP response goes out before any analysis.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use hmac::{Hmac, KeyInit, Mac};
use serde_json::json;
use sha2::Sha256;
use tracing::{info, warn};
use triage_core::store::EnqueueOutcome;
use triage_core::StoreError;

use crate::service::Service;
use crate::wire::IssuesEvent;

pub const EVENT_HEADER: &str = "x-github-event";
pub const DELIVERY_HEADER: &str = "x-github-delivery";
pub const SIGNATURE_HEADER: &str = "x-hub-signature-256";

/// Seconds a forge should wait before redelivering when the queue is full.
pub const RETRY_AFTER_SECS: u64 = 30;

const MAX_BODY_BYTES: usize = 25 * 1024 * 1024;

/// Checks `sha256=<hex>` against the HMAC-SHA256 of the raw body. The
/// digest comparison is constant-time. Malformed headers are rejected.
pub fn verify_signature(secret: &[u8], raw_body: &[u8], signature_header: &str) -> bool {
    let Some(hex_digest) = signature_header.strip_prefix("sha256=") else {
        return false;
    };
    let Ok(expected) = hex::decode(hex_digest) else {
        return false;
    };
    let Ok(mut mac) = Hmac::<Sha256>::new_from_slice(secret) else {
        return false;
    };
    mac.update(raw_body);
    mac.verify_slice(&expected).is_ok()
}

/// The header value a sender computes for `raw_body`.
pub fn sign(secret: &[u8], raw_body: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(raw_body);
    format!("sha256={}", hex::encode(mac.finalize().into_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebhookDelivery {
    pub event: String,
    pub delivery_id: String,
    pub signature: String,
    /// Exactly the received bytes; verification never sees a re-encoding.
    pub raw_body: Bytes,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    Accepted { job_id: i64 },
    Ignored { reason: String },
    Rejected,
    Malformed { reason: String },
    QueueFull,
}

impl Disposition {
    fn ignored(reason: impl Into<String>) -> Self {
        Disposition::Ignored { reason: reason.into() }
    }
}

/// Classifies and records one delivery. Accepted deliveries are persisted
/// before this returns.
pub fn handle_delivery(service: &Service, delivery: &WebhookDelivery) -> Result<Disposition, StoreError> {
    if !verify_signature(
        service.webhook_secret().expose().as_bytes(),
        &delivery.raw_body,
        &delivery.signature,
    ) {
        warn!(delivery = %delivery.delivery_id, "rejected delivery with a bad signature");
        return Ok(Disposition::Rejected);
    }
    let store = service.store();
    if delivery.event != "issues" {
        let fresh = store.record_ignored_delivery(&delivery.delivery_id, &delivery.event)?;
        let reason = if fresh { format!("event `{}` not handled", delivery.event) } else { "replayed delivery".into() };
        return Ok(Disposition::ignored(reason));
    }
    let event: IssuesEvent = match serde_json::from_slice(&delivery.raw_body) {
        Ok(e) => e,
        Err(e) => return Ok(Disposition::Malformed { reason: e.to_string() }),
    };
    if event.action != "opened" {
        if !store.record_ignored_delivery(&delivery.delivery_id, &delivery.event)? {
            return Ok(Disposition::ignored("replayed delivery"));
        }
        // Keep the index current for edits, closes and reopens.
        if let Ok(repo) = event.repository.to_ref() {
            if let Ok(record) = event.issue.to_record(&repo, delivery.received_at) {
                if !event.issue.is_pull_request() {
                    service.indexer().sync_on_event(&record)?;
                }
            }
        }
        return Ok(Disposition::ignored(format!("issue action `{}` synced only", event.action)));
    }
    match store.enqueue_delivery(
        &delivery.delivery_id,
        &delivery.event,
        &delivery.raw_body,
        service.settings().queue_capacity,
    )? {
        EnqueueOutcome::Accepted(job_id) => {
            info!(delivery = %delivery.delivery_id, job_id, "accepted issue-opened delivery");
            service.wake_workers();
            Ok(Disposition::Accepted { job_id })
        }
        EnqueueOutcome::Replayed => Ok(Disposition::ignored("replayed delivery")),
        EnqueueOutcome::QueueFull => Ok(Disposition::QueueFull),
    }
}

fn header_str(headers: &HeaderMap, name: &str) -> Option<String> {
    headers
        .get(name)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

async fn webhook(State(service): State<Arc<Service>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(signature) = header_str(&headers, SIGNATURE_HEADER) else {
        return (StatusCode::UNAUTHORIZED, Json(json!({"error": "missing signature"}))).into_response();
    };
    let (Some(event), Some(delivery_id)) =
        (header_str(&headers, EVENT_HEADER), header_str(&headers, DELIVERY_HEADER))
    else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "missing event or delivery header"})))
            .into_response();
    };
    let delivery = WebhookDelivery {
        event,
        delivery_id,
        signature,
        raw_body: body,
        received_at: Utc::now(),
    };
    let svc = service.clone();
    let outcome = tokio::task::spawn_blocking(move || handle_delivery(&svc, &delivery)).await;
    match outcome {
        Ok(Ok(Disposition::Accepted { job_id })) => {
            (StatusCode::ACCEPTED, Json(json!({"status": "accepted", "job": job_id}))).into_response()
        }
        Ok(Ok(Disposition::Ignored { reason })) => {
            (StatusCode::ACCEPTED, Json(json!({"status": "ignored", "reason": reason}))).into_response()
        }
        Ok(Ok(Disposition::Rejected)) => {
            (StatusCode::UNAUTHORIZED, Json(json!({"error": "invalid signature"}))).into_response()
        }
        Ok(Ok(Disposition::Malformed { reason })) => {
            (StatusCode::BAD_REQUEST, Json(json!({"error": reason}))).into_response()
        }
        Ok(Ok(Disposition::QueueFull)) => (
            StatusCode::SERVICE_UNAVAILABLE,
            [(header::RETRY_AFTER, RETRY_AFTER_SECS.to_string())],
            Json(json!({"error": "queue full"})),
        )
            .into_response(),
        Ok(Err(e)) => {
            warn!(error = %e, "could not record delivery");
            (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "storage unavailable"})))
                .into_response()
        }
        Err(e) => {
            warn!(error = %e, "delivery handler panicked");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

async fn health(State(service): State<Arc<Service>>) -> Response {
    match service.store().queue_depth() {
        Ok(depth) => Json(json!({"status": "ok", "queue_depth": depth})).into_response(),
        Err(_) => StatusCode::SERVICE_UNAVAILABLE.into_response(),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/webhook", post(webhook))
        .route("/healthz", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

#[cfg(test)]
mod tests {
    use super::*;

    const JEFE_DIGEST: &str = "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843";

    #[test]
    fn hmac_reference_vector() {
        let header = format!("sha256={JEFE_DIGEST}");
        assert!(verify_signature(b"Jefe", b"what do ya want for nothing?", &header));
        assert_eq!(sign(b"Jefe", b"what do ya want for nothing?"), header);
    }

    #[test]
    fn malformed_headers_rejected() {
        let body = b"what do ya want for nothing?";
        assert!(!verify_signature(b"Jefe", body, JEFE_DIGEST));
        assert!(!verify_signature(b"Jefe", body, &format!("sha1={JEFE_DIGEST}")));
        assert!(!verify_signature(b"Jefe", body, "sha256=zz"));
        assert!(!verify_signature(b"Jefe", body, "sha256="));
        assert!(!verify_signature(b"Jefe", body, &format!("sha256={}", &JEFE_DIGEST[..62])));
        assert!(!verify_signature(b"Jefe", body, ""));
    }

    #[test]
    fn raw_bytes_matter() {
        let body = b"{ \"action\" :\t\"opened\" }\n";
        let header = sign(b"s3cret", body);
        assert!(verify_signature(b"s3cret", body, &header));
        assert!(!verify_signature(b"s3cret", b"{\"action\":\"opened\"}", &header));
        assert!(!verify_signature(b"other", body, &header));
    }
}
