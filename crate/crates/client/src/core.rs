//! Client for the core REST API.

use std::collections::BTreeMap;

use chips_core::dicom::MetadataRecord;
use chips_core::pacs::{PullReceipt, QuerySpec, StudyRecord};
use chips_core::workflow::{AnnotateAction, Feed, FeedTree, PluginDescriptor, PluginInstance, Role, UserInfo};

use crate::error::{json, ClientError};
use crate::wire::*;

#[derive(Clone, Debug)]
pub struct CoreClient {
    base: String,
    http: reqwest::Client,
    token: Option<String>,
}

impl CoreClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let r = self.http.request(method, format!("{}{}", self.base, path));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    /// Logs in and keeps the token for later calls.
    pub async fn login(&mut self, login: &str, secret: &str) -> Result<LoginResponse, ClientError> {
        let resp = self
            .req(reqwest::Method::POST, "/login")
            .json(&LoginRequest {
                login: login.into(),
                secret: secret.into(),
            })
            .send()
            .await?;
        let out: LoginResponse = json(resp).await?;
        self.token = Some(out.token.clone());
        Ok(out)
    }

    pub async fn add_user(&self, login: &str, secret: &str, role: Role) -> Result<UserInfo, ClientError> {
        let body = NewUserRequest {
            login: login.into(),
            secret: secret.into(),
            role,
        };
        json(self.req(reqwest::Method::POST, "/users").json(&body).send().await?).await
    }

    pub async fn feeds(&self) -> Result<Vec<Feed>, ClientError> {
        json(self.req(reqwest::Method::GET, "/feeds").send().await?).await
    }

    pub async fn feed(&self, id: u64) -> Result<Feed, ClientError> {
        json(self.req(reqwest::Method::GET, &format!("/feeds/{id}")).send().await?).await
    }

    pub async fn create_feed(&self, title: &str, receipt: &PullReceipt) -> Result<Feed, ClientError> {
        let body = CreateFeedRequest {
            title: title.into(),
            receipt: receipt.clone(),
        };
        json(self.req(reqwest::Method::POST, "/feeds").json(&body).send().await?).await
    }

    pub async fn tree(&self, feed: u64) -> Result<FeedTree, ClientError> {
        json(
            self.req(reqwest::Method::GET, &format!("/feeds/{feed}/tree"))
                .send()
                .await?,
        )
        .await
    }

    pub async fn share(&self, feed: u64, user: &str) -> Result<Feed, ClientError> {
        let body = ShareRequest { user: user.into() };
        json(
            self.req(reqwest::Method::POST, &format!("/feeds/{feed}/share"))
                .json(&body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn annotate(&self, feed: u64, action: &AnnotateAction) -> Result<Feed, ClientError> {
        json(
            self.req(reqwest::Method::POST, &format!("/feeds/{feed}/annotate"))
                .json(action)
                .send()
                .await?,
        )
        .await
    }

    pub async fn plugins(&self) -> Result<Vec<PluginDescriptor>, ClientError> {
        json(self.req(reqwest::Method::GET, "/plugins").send().await?).await
    }

    pub async fn register_plugin(&self, d: &PluginDescriptor) -> Result<PluginDescriptor, ClientError> {
        json(self.req(reqwest::Method::POST, "/plugins").json(d).send().await?).await
    }

    pub async fn create_instance(
        &self,
        feed: u64,
        parent: Option<u64>,
        plugin: &str,
        version: Option<&str>,
        params: BTreeMap<String, serde_json::Value>,
    ) -> Result<PluginInstance, ClientError> {
        let body = CreateInstanceRequest {
            parent,
            plugin: plugin.into(),
            version: version.map(str::to_string),
            params,
        };
        json(
            self.req(reqwest::Method::POST, &format!("/feeds/{feed}/instances"))
                .json(&body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn instance(&self, id: u64) -> Result<PluginInstance, ClientError> {
        json(
            self.req(reqwest::Method::GET, &format!("/instances/{id}"))
                .send()
                .await?,
        )
        .await
    }

    pub async fn cancel_instance(&self, id: u64) -> Result<CancelResponse, ClientError> {
        json(
            self.req(reqwest::Method::POST, &format!("/instances/{id}/cancel"))
                .send()
                .await?,
        )
        .await
    }

    /// `predicate` uses the `key op value [AND ...]` syntax.
    pub async fn query_metadata(&self, predicate: &str) -> Result<Vec<MetadataRecord>, ClientError> {
        json(
            self.req(reqwest::Method::GET, "/metadata/query")
                .query(&[("where", predicate)])
                .send()
                .await?,
        )
        .await
    }

    pub async fn pacs_query(&self, spec: &QuerySpec) -> Result<Vec<StudyRecord>, ClientError> {
        json(self.req(reqwest::Method::POST, "/pacs/query").json(spec).send().await?).await
    }

    /// Has core pull and anonymize a study into the caller's pull area.
    /// The receipt can then be turned into a feed.
    pub async fn pacs_pull(&self, study_uid: &str) -> Result<PullReceipt, ClientError> {
        let body = PacsPullRequest {
            study_uid: study_uid.into(),
        };
        json(self.req(reqwest::Method::POST, "/pacs/pull").json(&body).send().await?).await
    }
}
