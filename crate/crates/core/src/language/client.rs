//! Chat-completion client contract and the layers stacked around it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vcm::ImageBuffer;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network: {0}")]
    Network(String),
    #[error("malformed reply: {0}")]
    Decode(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("no cached reply for request {0}")]
    NotCached(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<TransportError>,
    },
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            TransportError::Network(_) | TransportError::Decode(_) => true,
            TransportError::MissingCredentials(_)
            | TransportError::NotCached(_)
            | TransportError::Exhausted { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    DescribeImage,
    Complete,
}

/// One request to a chat client. Images travel as raw pixels; encoding for
/// the wire is the client's business, so fingerprints do not depend on a
/// particular PNG encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum ChatRequest {
    DescribeImage { image: ImageBuffer, prompt: String },
    Complete { context: String, prompt: String },
}

#[derive(Serialize)]
struct CanonicalImage {
    height: u32,
    rgb_sha256: String,
    width: u32,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    client: &'a str,
    context: Option<&'a str>,
    endpoint: Endpoint,
    image: Option<CanonicalImage>,
    prompt: &'a str,
}

impl ChatRequest {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            ChatRequest::DescribeImage { .. } => Endpoint::DescribeImage,
            ChatRequest::Complete { .. } => Endpoint::Complete,
        }
    }

    pub fn prompt(&self) -> &str {
        match self {
            ChatRequest::DescribeImage { prompt, .. } | ChatRequest::Complete { prompt, .. } => {
                prompt
            }
        }
    }

    /// Canonical JSON of `(client id, endpoint, payload)`: keys sorted,
    /// image pixels replaced by their dimensions and SHA-256.
    pub fn canonical_json(&self, client_id: &str) -> String {
        let (context, image) = match self {
            ChatRequest::DescribeImage { image, .. } => (
                None,
                Some(CanonicalImage {
                    height: image.height(),
                    rgb_sha256: sha256_hex(image.as_bytes()),
                    width: image.width(),
                }),
            ),
            ChatRequest::Complete { context, .. } => (Some(context.as_str()), None),
        };
        let canon = CanonicalRequest {
            client: client_id,
            context,
            endpoint: self.endpoint(),
            image,
            prompt: self.prompt(),
        };
        serde_json::to_string(&canon).expect("plain struct serializes")
    }

    /// Lowercase hex SHA-256 of [`ChatRequest::canonical_json`].
    pub fn fingerprint(&self, client_id: &str) -> String {
        sha256_hex(self.canonical_json(client_id).as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A multimodal chat backend. Implementations must be total: every call
/// returns reply text or a [`TransportError`].
pub trait ChatClient: Send + Sync {
    /// Stable identifier folded into request fingerprints.
    fn id(&self) -> String;

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;

    fn describe_image(&self, image: &ImageBuffer, prompt: &str) -> Result<String, TransportError> {
        self.send(&ChatRequest::DescribeImage {
            image: image.clone(),
            prompt: prompt.to_owned(),
        })
    }

    fn complete(&self, context: &str, prompt: &str) -> Result<String, TransportError> {
        self.send(&ChatRequest::Complete {
            context: context.to_owned(),
            prompt: prompt.to_owned(),
        })
    }
}

impl<T: ChatClient + ?Sized> ChatClient for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for Box<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

/// Retries retryable transport errors with exponential backoff.
pub struct Retrying<C> {
    inner: C,
    policy: RetryPolicy,
}

impl<C: ChatClient> Retrying<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: ChatClient> ChatClient for Retrying<C> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut retry = 0;
        loop {
            match self.inner.send(request) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() && retry < self.policy.max_retries => {
                    let wait = self.policy.delay(retry);
                    log::warn!(
                        "{:?} failed ({e}); retry {} in {wait:?}",
                        request.endpoint(),
                        retry + 1
                    );
                    thread::sleep(wait);
                    retry += 1;
                }
                Err(e) if retry > 0 => {
                    return Err(TransportError::Exhausted {
                        attempts: retry + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub describe_image: u64,
    pub complete: u64,
    pub failed: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.describe_image + self.complete
    }
}

/// Counts the requests that reach the wrapped client.
pub struct Metered<C> {
    inner: C,
    describe: AtomicU64,
    complete: AtomicU64,
    failed: AtomicU64,
}

impl<C: ChatClient> Metered<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            describe: AtomicU64::new(0),
            complete: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            describe_image: self.describe.load(Ordering::Relaxed),
            complete: self.complete.load(Ordering::Relaxed),
            failed: self.failed.load(Ordering::Relaxed),
        }
    }
}

impl<C: ChatClient> ChatClient for Metered<C> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        match request.endpoint() {
            Endpoint::DescribeImage => &self.describe,
            Endpoint::Complete => &self.complete,
        }
        .fetch_add(1, Ordering::Relaxed);
        let out = self.inner.send(request);
        if out.is_err() {
            self.failed.fetch_add(1, Ordering::Relaxed);
        }
        out
    }
}

/// Adapts a closure into a client; handy for scripted replies in tests.
pub struct FnClient<F> {
    id: String,
    f: F,
}

impl<F> FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn id(&self) -> String {
        self.id.clone()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (self.f)(request)
    }
}
