//! Dispatcher client.

use std::time::Duration;

use chips_core::dispatch::{ComputeNode, StepPlan, StepRequest};

use crate::error::{json, ClientError};

#[derive(Clone, Debug)]
pub struct DispatcherClient {
    base: String,
    http: reqwest::Client,
    admin_token: Option<String>,
}

impl DispatcherClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client"),
            admin_token: None,
        }
    }

    pub fn with_admin_token(mut self, token: Option<String>) -> Self {
        self.admin_token = token;
        self
    }

    pub async fn create_step(&self, req: &StepRequest) -> Result<StepPlan, ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/steps", self.base))
            .json(req)
            .send()
            .await?;
        json(resp).await
    }

    pub async fn get_step(&self, id: &str) -> Result<StepPlan, ClientError> {
        json(
            self.http
                .get(format!("{}/api/v1/steps/{}", self.base, id))
                .send()
                .await?,
        )
        .await
    }

    pub async fn cancel_step(&self, id: &str) -> Result<StepPlan, ClientError> {
        json(
            self.http
                .delete(format!("{}/api/v1/steps/{}", self.base, id))
                .send()
                .await?,
        )
        .await
    }

    pub async fn steps(&self) -> Result<Vec<StepPlan>, ClientError> {
        json(self.http.get(format!("{}/api/v1/steps", self.base)).send().await?).await
    }

    pub async fn nodes(&self) -> Result<Vec<ComputeNode>, ClientError> {
        json(self.http.get(format!("{}/api/v1/nodes", self.base)).send().await?).await
    }

    /// Replaces the node registry.
    pub async fn put_nodes(&self, nodes: &[ComputeNode]) -> Result<Vec<ComputeNode>, ClientError> {
        let mut req = self.http.put(format!("{}/api/v1/nodes", self.base)).json(nodes);
        if let Some(t) = &self.admin_token {
            req = req.bearer_auth(t);
        }
        json(req.send().await?).await
    }

    /// Polls until the step is terminal or `limit` elapses.
    pub async fn wait_terminal(&self, id: &str, every: Duration, limit: Duration) -> Result<StepPlan, ClientError> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            let p = self.get_step(id).await?;
            if p.is_terminal() {
                return Ok(p);
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(ClientError::Local(format!(
                    "step {id} still {} after {limit:?}",
                    p.phase
                )));
            }
            tokio::time::sleep(every).await;
        }
    }
}
