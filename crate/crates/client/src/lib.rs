//! Thin async client for the tvlab job service.

use std::time::Duration;

use reqwest::StatusCode;
use tvlab_api::{ErrorBody, Health, JobRequest, JobStatus, RecordPage};

pub use tvlab_api as api;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn decode<T: serde::de::DeserializeOwned>(r: reqwest::Response) -> Result<T> {
    let status = r.status();
    if status.is_success() {
        return Ok(r.json().await?);
    }
    let message = match r.json::<ErrorBody>().await {
        Ok(b) => b.error,
        Err(_) => status.canonical_reason().unwrap_or("error").to_string(),
    };
    Err(ClientError::Api { status, message })
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<Health> {
        decode(self.http.get(format!("{}/health", self.base)).send().await?).await
    }

    pub async fn submit(&self, req: &JobRequest) -> Result<JobStatus> {
        decode(self.http.post(format!("{}/v1/jobs", self.base)).json(req).send().await?).await
    }

    pub async fn status(&self, id: u64) -> Result<JobStatus> {
        decode(self.http.get(format!("{}/v1/jobs/{id}", self.base)).send().await?).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>> {
        decode(self.http.get(format!("{}/v1/jobs", self.base)).send().await?).await
    }

    pub async fn records(&self, id: u64, from: usize) -> Result<RecordPage> {
        let url = format!("{}/v1/jobs/{id}/records?from={from}", self.base);
        decode(self.http.get(url).send().await?).await
    }

    pub async fn cancel(&self, id: u64) -> Result<JobStatus> {
        decode(self.http.post(format!("{}/v1/jobs/{id}/cancel", self.base)).send().await?).await
    }

    /// Polls until the job finishes, handing every new record to `on_record`
    /// in order.
    pub async fn follow(&self, id: u64, poll: Duration, mut on_record: impl FnMut(&str)) -> Result<JobStatus> {
        let mut seen = 0;
        loop {
            let page = self.records(id, seen).await?;
            for r in &page.records {
                on_record(r);
            }
            seen += page.records.len();
            // the page and its state are read under one lock, so a finished
            // page already holds the last rows
            if page.state.finished() {
                return self.status(id).await;
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn run(&self, req: &JobRequest, poll: Duration, on_record: impl FnMut(&str)) -> Result<JobStatus> {
        let job = self.submit(req).await?;
        self.follow(job.id, poll, on_record).await
    }
}
