//! Shared plumbing for the remote backends: error classification, bounded
//! in-flight requests, a token-bucket rate limit and exponential backoff.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Connection failure, timeout or a transient server status.
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    /// Terminal for the whole run.
    #[error("backend quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unreachable(_))
    }

    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::QuotaExceeded(_))
    }
}

/// A malformed line in a JSON Lines mock script.
#[derive(Debug, Error)]
#[error("mock script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut retry = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && retry + 1 < attempts => {
                    let delay = self.delay_for(retry);
                    log::warn!("retrying after {e} (attempt {} of {attempts}, sleeping {delay:?})", retry + 2);
                    thread::sleep(delay);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    released: Condvar,
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.max {
            current = self.released.wait(current).unwrap();
        }
        *current += 1;
        InFlightPermit { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().unwrap()
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut current = self.limit.current.lock().unwrap();
        *current -= 1;
        self.limit.released.notify_one();
    }
}

/// Token bucket; `rate` tokens per second with a burst of `max(rate, 1)`.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64) -> Self {
        let capacity = rate_per_sec.max(1.0);
        Self {
            rate: rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        if !self.rate.is_finite() || self.rate <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.rate).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

/// Maps a transport failure or HTTP status onto the backend error classes.
pub(crate) fn classify_http_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) => classify_status(code),
        ureq::Error::Json(e) => BackendError::Protocol(format!("invalid JSON response: {e}")),
        other => BackendError::Unreachable(other.to_string()),
    }
}

pub(crate) fn classify_status(code: u16) -> BackendError {
    match code {
        402 => BackendError::QuotaExceeded(format!("HTTP {code}")),
        408 | 429 | 500..=599 => BackendError::Unreachable(format!("HTTP {code}")),
        404 => BackendError::ImageUnreadable(format!("HTTP {code}")),
        _ => BackendError::Protocol(format!("HTTP {code}")),
    }
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// Reads image bytes from a filesystem path, `file://` URI or HTTP(S) URL.
pub fn read_image_bytes(uri: &str) -> Result<Vec<u8>, BackendError> {
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let agent = http_agent(Duration::from_secs(30));
        let mut resp = agent.get(uri).call().map_err(|e| match classify_http_error(e) {
            BackendError::Unreachable(m) => BackendError::Unreachable(m),
            other => BackendError::ImageUnreadable(format!("{uri}: {other}")),
        })?;
        return resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| BackendError::ImageUnreadable(format!("{uri}: {e}")));
    }
    let path = uri.strip_prefix("file://").unwrap_or(uri);
    std::fs::read(path).map_err(|e| BackendError::ImageUnreadable(format!("{path}: {e}")))
}
