//! Async client for a node service.

use std::time::Duration;

use qgrid_core::api::{
    ApiError, ChunkResult, CreateRequest, CreateResponse, FrameInfo, Health, IngestResult, IvStatus, KeyStatus,
    VerifyRequest, VerifyResponse,
};
use qgrid_core::stats::StatsSnapshot;
use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("node unavailable at {url}: {reason}")]
    Unavailable { url: String, reason: String },
    #[error("{message}")]
    Api { status: u16, code: String, message: String },
    #[error("unexpected response: {0}")]
    BadResponse(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Unavailable { .. } => "node-unavailable",
            ClientError::Api { code, .. } => code,
            ClientError::BadResponse(_) => "bad-response",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeClient {
    base: String,
    http: reqwest::Client,
}

impl NodeClient {
    /// `base` is `host:port` or a full `http://` URL.
    pub fn new(base: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Result<Self, ClientError> {
        let base = if base.contains("://") {
            base.trim_end_matches('/').to_string()
        } else {
            format!("http://{base}")
        };
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        Ok(Self { base, http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send().await.map_err(|e| ClientError::Unavailable {
            url: self.base.clone(),
            reason: e.to_string(),
        })?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        if status != StatusCode::OK {
            return Err(match serde_json::from_slice::<ApiError>(&bytes) {
                Ok(e) => ClientError::Api {
                    status: status.as_u16(),
                    code: e.error,
                    message: e.message,
                },
                Err(_) => ClientError::BadResponse(format!("HTTP {status}")),
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::BadResponse(e.to_string()))
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send(self.http.get(self.url(path))).await
    }

    async fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(self.http.post(self.url(path)).json(body)).await
    }

    async fn post_bytes<T: DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> Result<T, ClientError> {
        let req = self
            .http
            .post(self.url(path))
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(body);
        self.send(req).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn key_status(&self) -> Result<KeyStatus, ClientError> {
        self.get("/keys/status").await
    }

    pub async fn ingest(&self, frames: Vec<u8>) -> Result<IngestResult, ClientError> {
        self.post_bytes("/keys/ingest", frames).await
    }

    pub async fn iv_status(&self) -> Result<IvStatus, ClientError> {
        self.get("/iv/status").await
    }

    pub async fn chunk_ivs(&self, entropy: Vec<u8>) -> Result<ChunkResult, ClientError> {
        self.post_bytes("/iv/chunk", entropy).await
    }

    pub async fn create(&self, message: &str, topic: &str) -> Result<CreateResponse, ClientError> {
        let req = CreateRequest {
            message: message.to_string(),
            topic: topic.to_string(),
        };
        self.post_json("/payload/create", &req).await
    }

    pub async fn verify(&self, payload: &str, topic: &str) -> Result<VerifyResponse, ClientError> {
        let req = VerifyRequest {
            payload: payload.to_string(),
            topic: topic.to_string(),
        };
        self.post_json("/payload/verify", &req).await
    }

    pub async fn stats(&self) -> Result<StatsSnapshot, ClientError> {
        self.get("/stats").await
    }

    pub async fn inspect(&self, frames: Vec<u8>) -> Result<Vec<FrameInfo>, ClientError> {
        self.post_bytes("/frames/inspect", frames).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_url_forms() {
        assert_eq!(
            NodeClient::new("127.0.0.1:7000").unwrap().base_url(),
            "http://127.0.0.1:7000"
        );
        assert_eq!(NodeClient::new("http://h:1/").unwrap().base_url(), "http://h:1");
    }

    #[tokio::test]
    async fn unreachable_node() {
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let c = NodeClient::with_timeout(&format!("127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
        assert_eq!(c.health().await.unwrap_err().code(), "node-unavailable");
    }
}
