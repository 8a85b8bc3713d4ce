//! Directory-tree transfer client.

use std::path::Path;
use std::time::Instant;

use bytes::Bytes;
use futures::StreamExt;

use chips_core::fileio::{archive_tree, Direction, FileIoError, RestoreSession, TransferReceipt};

use crate::error::{check, json, ClientError};
use crate::wire::{JobTrees, TREE_HASH_HEADER};

/// Corrupts an outgoing push, for fault-injection tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushFault {
    /// Abort the upload after this many bytes.
    Cut(usize),
    /// Invert the byte at this offset.
    Flip(usize),
}

const CHUNK: usize = 64 * 1024;

#[derive(Clone, Debug)]
pub struct FileIoClient {
    base: String,
    http: reqwest::Client,
}

impl FileIoClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// Sends `local_dir` as the input tree of `job_key`.
    pub async fn push_tree(
        &self,
        local_dir: &Path,
        job_key: &str,
        fault: Option<PushFault>,
    ) -> Result<TransferReceipt, ClientError> {
        let started = Instant::now();
        let dir = local_dir.to_path_buf();
        let (mut archive, manifest) = tokio::task::spawn_blocking(move || archive_tree(&dir))
            .await
            .map_err(|e| ClientError::Local(e.to_string()))??;
        let mut limit = archive.len();
        match fault {
            Some(PushFault::Flip(at)) if at < archive.len() => archive[at] ^= 0xFF,
            Some(PushFault::Cut(at)) => limit = at.min(archive.len()),
            _ => {}
        }
        let archive = Bytes::from(archive);
        let total = archive.len();
        let chunks: Vec<Result<Bytes, std::io::Error>> = {
            let mut v: Vec<_> = (0..limit)
                .step_by(CHUNK)
                .map(|i| Ok(archive.slice(i..(i + CHUNK).min(limit))))
                .collect();
            if limit < total {
                v.push(Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "upload cut")));
            }
            v
        };
        let body = reqwest::Body::wrap_stream(futures::stream::iter(chunks));
        let resp = self
            .http
            .post(format!("{}/api/v1/trees/{}/input", self.base, job_key))
            .header(TREE_HASH_HEADER, &manifest.tree_hash)
            .body(body)
            .send()
            .await?;
        let mut receipt: TransferReceipt = json(resp).await?;
        if receipt.manifest != manifest {
            return Err(FileIoError::IntegrityMismatch("remote manifest differs from local tree".into()).into());
        }
        receipt.duration_ms = started.elapsed().as_millis() as u64;
        Ok(receipt)
    }

    pub async fn manifests(&self, job_key: &str) -> Result<JobTrees, ClientError> {
        let resp = self
            .http
            .get(format!("{}/api/v1/trees/{}/manifest", self.base, job_key))
            .send()
            .await?;
        json(resp).await
    }

    /// Fetches the `input` or `output` tree of `job_key` into `local_dir`,
    /// verified against the remote manifest and committed atomically.
    pub async fn pull_tree(
        &self,
        job_key: &str,
        subdir: &str,
        local_dir: &Path,
        fault: Option<&str>,
    ) -> Result<TransferReceipt, ClientError> {
        let started = Instant::now();
        let trees = self.manifests(job_key).await?;
        let expected = match subdir {
            "input" => trees.input,
            "output" => trees.output,
            other => {
                return Err(ClientError::Local(format!(
                    "subdir must be input or output, not {other}"
                )))
            }
        }
        .ok_or_else(|| ClientError::Local(format!("job {job_key} has no {subdir} tree")))?;
        let mut req = self
            .http
            .get(format!("{}/api/v1/trees/{}/{}", self.base, job_key, subdir));
        if let Some(f) = fault {
            req = req.query(&[("fault", f)]);
        }
        let resp = check(req.send().await?).await?;
        let mut session = RestoreSession::begin(local_dir, Some(expected))?;
        let mut stream = resp.bytes_stream();
        while let Some(chunk) = stream.next().await {
            match chunk {
                Ok(c) => session.push(&c)?,
                // A broken stream is reported as a truncated archive.
                Err(_) => break,
            }
        }
        let bytes = session.bytes_received();
        let manifest = session.commit()?;
        Ok(TransferReceipt {
            job_key: job_key.into(),
            direction: Direction::Pull,
            manifest,
            bytes_transferred: bytes,
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }
}
