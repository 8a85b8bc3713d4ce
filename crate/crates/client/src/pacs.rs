//! Query/retrieve client for the PACS simulator.

use std::path::Path;

use futures::StreamExt;

use chips_core::dicom::AnonymizationPolicy;
use chips_core::pacs::{AuthToken, FrameDecoder, FrameError, PullReceipt, PullWriter, QuerySpec, StudyRecord};

use crate::error::{check, json, ClientError};
use crate::wire::PacsAuthRequest;

#[derive(Clone, Debug)]
pub struct PacsClient {
    base: String,
    http: reqwest::Client,
}

impl PacsClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub async fn authenticate(&self, id: &str, secret: &str) -> Result<AuthToken, ClientError> {
        let resp = self
            .http
            .post(format!("{}/auth", self.base))
            .json(&PacsAuthRequest {
                id: id.into(),
                secret: secret.into(),
            })
            .send()
            .await?;
        json(resp).await
    }

    pub async fn query(&self, token: &str, spec: &QuerySpec) -> Result<Vec<StudyRecord>, ClientError> {
        let resp = self
            .http
            .post(format!("{}/query", self.base))
            .bearer_auth(token)
            .json(spec)
            .send()
            .await?;
        json(resp).await
    }

    /// Opens the retrieve stream. `fault` is passed through to servers that
    /// run with fault hooks enabled.
    pub async fn retrieve(
        &self,
        token: &str,
        study_uid: &str,
        fault: Option<&str>,
    ) -> Result<reqwest::Response, ClientError> {
        let mut req = self
            .http
            .get(format!("{}/retrieve/{}", self.base, study_uid))
            .bearer_auth(token);
        if let Some(f) = fault {
            req = req.query(&[("fault", f)]);
        }
        check(req.send().await?).await
    }

    /// Authenticates, retrieves and anonymizes a study into
    /// `dest/<study>/<series>/<ordinal>.dcm`. Nothing is written before
    /// anonymization.
    pub async fn pull_study(
        &self,
        id: &str,
        secret: &str,
        study_uid: &str,
        policy: AnonymizationPolicy,
        dest: &Path,
        fault: Option<&str>,
    ) -> Result<PullReceipt, ClientError> {
        let token = self.authenticate(id, secret).await?;
        let resp = self.retrieve(&token.token, study_uid, fault).await?;
        let dest = dest.to_path_buf();
        let study = study_uid.to_string();
        let mut writer = tokio::task::spawn_blocking(move || PullWriter::begin(&dest, &study, policy))
            .await
            .map_err(|e| ClientError::Local(e.to_string()))??;
        let mut decoder = FrameDecoder::new();
        let mut stream = resp.bytes_stream();
        let mut broken = false;
        while let Some(chunk) = stream.next().await {
            let Ok(chunk) = chunk else {
                break;
            };
            decoder.push(&chunk);
            while let Some(item) = decoder.next_frame() {
                match item {
                    Ok(frame) => {
                        writer = tokio::task::spawn_blocking(move || {
                            writer.accept(frame);
                            writer
                        })
                        .await
                        .map_err(|e| ClientError::Local(e.to_string()))?;
                    }
                    Err(FrameError::IntegrityMismatch { index }) => {
                        writer.reject(format!("frame {index}: hash mismatch"));
                    }
                    Err(e @ FrameError::Malformed { .. }) => {
                        writer.reject(e.to_string());
                        broken = true;
                    }
                }
            }
            if broken || decoder.finished() {
                break;
            }
        }
        let complete = decoder.finished() && decoder.pending() == 0 && !broken;
        Ok(writer.finish(complete)?)
    }
}
