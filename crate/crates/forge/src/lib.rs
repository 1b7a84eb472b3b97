//! Forge integration for the triage assistant: REST client, webhook
//! ingress, indexer, job pipeline, service wiring and a mock forge.

#![forbid(unsafe_code)]

pub mod client;
pub mod config;
pub mod indexer;
pub mod pipeline;
pub mod service;
pub mod sim;
pub mod webhook;
pub mod wire;

pub use client::{ForgeClient, ForgeError, IssuePage, LabelStatus, RetryPolicy};
pub use config::{Config, ConfigError, Secret};
pub use indexer::{IndexError, Indexer, RepoStatus, SyncOutcome};
pub use pipeline::{JobOutcome, PipelineError, PostReport};
pub use service::{build_host, RunningService, Service, ServiceError, ServiceSettings};
pub use sim::{FaultBehavior, FaultRule, Fixture, ForgeSim, NewIssue, SimServer};
pub use webhook::{handle_delivery, sign, verify_signature, Disposition, WebhookDelivery};
