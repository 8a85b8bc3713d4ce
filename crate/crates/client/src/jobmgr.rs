//! Job manager client.

use std::time::Duration;

use chips_core::jobs::{JobRecord, JobSpec, JobState, JobSummary};

use crate::error::{json, ClientError};
use crate::wire::{JobStats, PurgeRequest, PurgeResponse};

#[derive(Clone, Debug)]
pub struct JobClient {
    base: String,
    http: reqwest::Client,
}

impl JobClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_timeout(base, None)
    }

    /// Every request is bounded by `timeout` when given.
    pub fn with_timeout(base: impl Into<String>, timeout: Option<Duration>) -> Self {
        let mut b = reqwest::Client::builder();
        if let Some(t) = timeout {
            b = b.timeout(t);
        }
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: b.build().expect("http client"),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn submit(&self, spec: &JobSpec) -> Result<JobRecord, ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/jobs", self.base))
            .json(spec)
            .send()
            .await?;
        json(resp).await
    }

    pub async fn get(&self, key: &str) -> Result<JobRecord, ClientError> {
        let resp = self
            .http
            .get(format!("{}/api/v1/jobs/{}", self.base, key))
            .send()
            .await?;
        json(resp).await
    }

    /// Returns once the job is terminal.
    pub async fn cancel(&self, key: &str) -> Result<JobRecord, ClientError> {
        let resp = self
            .http
            .delete(format!("{}/api/v1/jobs/{}", self.base, key))
            .send()
            .await?;
        json(resp).await
    }

    pub async fn list(&self, states: &[JobState]) -> Result<Vec<JobSummary>, ClientError> {
        let mut req = self.http.get(format!("{}/api/v1/jobs", self.base));
        if !states.is_empty() {
            let filter = states.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
            req = req.query(&[("state", filter)]);
        }
        json(req.send().await?).await
    }

    pub async fn purge(&self, remove_dirs: bool) -> Result<PurgeResponse, ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/purge", self.base))
            .json(&PurgeRequest { remove_dirs })
            .send()
            .await?;
        json(resp).await
    }

    pub async fn stats(&self) -> Result<JobStats, ClientError> {
        json(self.http.get(format!("{}/api/v1/stats", self.base)).send().await?).await
    }

    /// Polls until the job is terminal or `limit` elapses.
    pub async fn wait_terminal(&self, key: &str, every: Duration, limit: Duration) -> Result<JobRecord, ClientError> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            let r = self.get(key).await?;
            if r.is_terminal() {
                return Ok(r);
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(ClientError::Local(format!(
                    "job {key} still {} after {limit:?}",
                    r.state
                )));
            }
            tokio::time::sleep(every).await;
        }
    }
}
