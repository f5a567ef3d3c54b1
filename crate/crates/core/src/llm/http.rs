//! HTTP endpoint annotator: `POST {"model", "prompt"}` with a bearer token,
//! response body returned as-is.

use std::thread;
use std::time::{Duration, Instant};

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::FailureRecord;
use crate::error::{Error, Result};

fn default_in_flight() -> usize {
    4
}

fn default_rps() -> f64 {
    2.0
}

fn default_backoff() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            url: url.into(),
            auth_env: None,
            model: model.into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: default_backoff(),
            max_in_flight: default_in_flight(),
            requests_per_second: default_rps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.requests_per_second > 0.0) {
            return Err(Error::Config("requests_per_second must be positive".into()));
        }
        if self.url.is_empty() {
            return Err(Error::Config("endpoint url is empty".into()));
        }
        Ok(())
    }

    /// Reads the bearer token; a named but unset variable is an error.
    pub fn token(&self) -> Result<Option<String>> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(Error::Config(format!("auth environment variable {var} is not set"))),
            },
        }
    }
}

#[derive(Debug)]
pub struct HttpAnnotator {
    config: HttpConfig,
    agent: ureq::Agent,
    next_slot: Mutex<Instant>,
}

enum Attempt {
    Ok(String),
    Transient(String),
    Permanent(String),
}

impl HttpAnnotator {
    pub fn new(config: HttpConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(HttpAnnotator {
            config,
            agent,
            next_slot: Mutex::new(Instant::now()),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn wait_for_slot(&self) {
        let interval = Duration::from_secs_f64(1.0 / self.config.requests_per_second);
        let wait = {
            let mut next = self.next_slot.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }

    fn attempt(&self, prompt: &str, token: Option<&str>) -> Attempt {
        self.wait_for_slot();
        let body = serde_json::json!({ "model": self.config.model, "prompt": prompt }).to_string();
        let mut req = self
            .agent
            .post(&self.config.url)
            .header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        match req.send(body) {
            Ok(resp) => {
                let mut body = resp.into_body();
                match body.read_to_string() {
                    Ok(s) => Attempt::Ok(s),
                    Err(e) => Attempt::Transient(format!("reading body: {e}")),
                }
            }
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Attempt::Transient(format!("status {code}"))
            }
            Err(ureq::Error::StatusCode(code)) => Attempt::Permanent(format!("status {code}")),
            Err(
                e @ (ureq::Error::Timeout(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::Io(_)
                | ureq::Error::HostNotFound),
            ) => Attempt::Transient(e.to_string()),
            Err(e) => Attempt::Permanent(e.to_string()),
        }
    }

    /// Sends one prompt, retrying transient failures with exponential backoff.
    pub fn send(&self, index: usize, prompt: &str, token: Option<&str>, calls: &dyn Fn()) -> std::result::Result<String, FailureRecord> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            calls();
            match self.attempt(prompt, token) {
                Attempt::Ok(s) => return Ok(s),
                Attempt::Permanent(message) => {
                    return Err(FailureRecord {
                        index,
                        attempts,
                        transient: false,
                        message,
                    })
                }
                Attempt::Transient(message) => {
                    if attempts > self.config.max_retries {
                        return Err(FailureRecord {
                            index,
                            attempts,
                            transient: true,
                            message,
                        });
                    }
                    let backoff = self.config.backoff_base_ms.saturating_mul(1 << (attempts - 1).min(16));
                    thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }
}
