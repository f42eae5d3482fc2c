//! Prediction oracle that talks to a `/predict` endpoint over HTTP.

use std::time::Duration;

use veridip_core::oracle::{PredictionOracle, QueryCounter};
use veridip_core::OracleError;

use crate::server::{PredictRequest, PredictResponse};

/// Tolerance on `|Σ p - 1|` for every returned row.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub timeout: Duration,
    pub max_retries: u32,
    /// Rows per `/predict` call.
    pub batch_size: usize,
    /// Delay before the first retry; doubled after each further failure.
    pub backoff: Duration,
    pub budget: Option<u64>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_retries: 3,
            batch_size: 64,
            backoff: Duration::from_millis(100),
            budget: None,
        }
    }
}

pub struct RemoteOracle {
    endpoint: String,
    agent: ureq::Agent,
    config: RemoteConfig,
    counter: QueryCounter,
}

enum Failure {
    Transient(String),
    Fatal(OracleError),
}

impl RemoteOracle {
    /// `base_url` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str, config: RemoteConfig) -> Result<Self, OracleError> {
        let base = base_url.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) || base.len() <= "https://".len() {
            return Err(OracleError::Unreachable(format!("not an http(s) URL: {base_url:?}")));
        }
        if config.batch_size == 0 {
            return Err(OracleError::Protocol("batch size must be at least 1".into()));
        }
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(Self {
            endpoint: format!("{base}/predict"),
            agent,
            counter: QueryCounter::new(config.budget),
            config,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call_once(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, Failure> {
        let body = PredictRequest { features: rows.iter().map(|r| r.to_vec()).collect() };
        let resp = match self.agent.post(&self.endpoint).send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) if code >= 500 => {
                return Err(Failure::Transient(format!("HTTP {code}: {}", r.into_string().unwrap_or_default())))
            }
            Err(ureq::Error::Status(code, r)) => {
                return Err(Failure::Fatal(OracleError::Rejected(format!(
                    "HTTP {code}: {}",
                    r.into_string().unwrap_or_default()
                ))))
            }
            Err(ureq::Error::Transport(t)) => return Err(Failure::Transient(t.to_string())),
        };
        let text = resp.into_string().map_err(|e| Failure::Transient(format!("reading response: {e}")))?;
        let parsed: PredictResponse = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(OracleError::Protocol(format!("malformed response JSON: {e}"))))?;
        check_rows(&parsed.probs, rows.len()).map_err(Failure::Fatal)?;
        Ok(parsed.probs)
    }

    fn call(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.call_once(rows) {
                Ok(p) => return Ok(p),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) if attempt >= self.config.max_retries => {
                    return Err(OracleError::Unreachable(format!(
                        "{} after {} attempts: {msg}",
                        self.endpoint,
                        attempt + 1
                    )))
                }
                Err(Failure::Transient(_)) => {
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }
}

fn check_rows(probs: &[Vec<f64>], expected: usize) -> Result<(), OracleError> {
    if probs.len() != expected {
        return Err(OracleError::Protocol(format!("{} rows returned for {expected} queries", probs.len())));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.is_empty() || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(OracleError::Protocol(format!("row {i} is not a probability vector")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(OracleError::Protocol(format!("row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

impl PredictionOracle for RemoteOracle {
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        self.counter.reserve(rows.len() as u64)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(self.config.batch_size) {
            out.extend(self.call(chunk)?);
        }
        Ok(out)
    }

    fn query_count(&self) -> u64 {
        self.counter.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_urls_and_rows() {
        assert!(RemoteOracle::new("localhost:80", RemoteConfig::default()).is_err());
        assert!(RemoteOracle::new("http://", RemoteConfig::default()).is_err());
        let ok = RemoteOracle::new("http://127.0.0.1:9/", RemoteConfig::default()).unwrap();
        assert_eq!(ok.endpoint(), "http://127.0.0.1:9/predict");
        assert!(check_rows(&[vec![0.5, 0.5]], 1).is_ok());
        assert!(check_rows(&[vec![0.5, 0.6]], 1).is_err());
        assert!(check_rows(&[vec![0.5, 0.5]], 2).is_err());
        assert!(check_rows(&[vec![]], 1).is_err());
    }

    #[test]
    fn unreachable_after_retries() {
        // port 9 (discard) is closed on loopback in practice
        let cfg = RemoteConfig { max_retries: 2, backoff: Duration::from_millis(1), ..RemoteConfig::default() };
        let o = RemoteOracle::new("http://127.0.0.1:9", cfg).unwrap();
        let row = [1.0];
        assert!(matches!(o.predict_proba(&[&row]), Err(OracleError::Unreachable(_))));
        assert_eq!(o.query_count(), 1);
    }
}
