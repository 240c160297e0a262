//! Thin async client for the coopadapt HTTP service.

use std::time::Duration;

use coopadapt_api::{
    AdaptRequest, ApiError, ErrorBody, EvalRequest, GenerateRequest, GenerateResponse, Health, JobAccepted,
    JobStatus, PretrainRequest, SweepRequest,
};
use coopadapt_core::evaluation::EvalReport;
use coopadapt_core::training::EpochRecord;
use reqwest::{Method, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;
use url::Url;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{}", .0.message)]
    Api(ApiError),
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("invalid server url: {0}")]
    Url(#[from] url::ParseError),
    #[error("unexpected response ({status}): {body}")]
    Unexpected { status: u16, body: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: &str) -> Result<Self> {
        let mut base = Url::parse(base)?;
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        Ok(Client {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let url = self.base.join(path)?;
        let mut req = self.http.request(method, url);
        if let Some(b) = body {
            req = req.json(b);
        }
        decode(req.send().await?).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("health").await
    }

    pub async fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        self.post("v1/generate", req).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalReport> {
        self.post("v1/eval", req).await
    }

    pub async fn pretrain(&self, req: &PretrainRequest) -> Result<JobAccepted> {
        self.post("v1/train/pretrain", req).await
    }

    pub async fn adapt(&self, req: &AdaptRequest) -> Result<JobAccepted> {
        self.post("v1/train/adapt", req).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<JobAccepted> {
        self.post("v1/sweep", req).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>> {
        self.get("v1/jobs").await
    }

    pub async fn job(&self, id: u64) -> Result<JobStatus> {
        self.get(&format!("v1/jobs/{id}")).await
    }

    pub async fn cancel(&self, id: u64) -> Result<JobStatus> {
        self.call::<(), _>(Method::DELETE, &format!("v1/jobs/{id}"), None).await
    }

    /// Polls until the job reaches a terminal state, passing each new epoch record to `on_record`.
    pub async fn wait_job(&self, id: u64, every: Duration, mut on_record: impl FnMut(&EpochRecord)) -> Result<JobStatus> {
        let mut seen = 0;
        loop {
            let status = self.job(id).await?;
            for r in &status.records[seen.min(status.records.len())..] {
                on_record(r);
            }
            seen = status.records.len();
            if status.state.is_terminal() {
                return Ok(status);
            }
            tokio::time::sleep(every).await;
        }
    }
}

async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let status = resp.status();
    let bytes = resp.bytes().await?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ClientError::Unexpected {
            status: status.as_u16(),
            body: format!("{e}: {}", String::from_utf8_lossy(&bytes)),
        });
    }
    match serde_json::from_slice::<ErrorBody>(&bytes) {
        Ok(b) => Err(ClientError::Api(b.error)),
        Err(_) => Err(ClientError::Unexpected {
            status: status.as_u16(),
            body: String::from_utf8_lossy(&bytes).into_owned(),
        }),
    }
}
