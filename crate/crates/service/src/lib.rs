//! HTTP/JSON front end for one authenticating node.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/health` | | [`Health`] |
//! | GET | `/keys/status` | | [`KeyStatus`] |
//! | POST | `/keys/ingest` | raw key frames | [`IngestResult`] |
//! | GET | `/iv/status` | | [`IvStatus`] |
//! | POST | `/iv/chunk` | raw entropy | [`ChunkResult`] |
//! | POST | `/payload/create` | [`CreateRequest`] | [`CreateResponse`] |
//! | POST | `/payload/verify` | [`VerifyRequest`] | [`VerifyResponse`] |
//! | GET | `/stats` | | [`StatsSnapshot`] |
//! | POST | `/frames/inspect` | raw key frames | list of [`FrameInfo`] |
//!
//! Failures carry an [`ApiError`] body.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qgrid_core::api::{
    ApiError, ChunkResult, CreateRequest, CreateResponse, FrameInfo, Health, IngestResult, IvStatus, KeyStatus,
    VerifyRequest, VerifyResponse,
};
use qgrid_core::authcodec::{encode_payload, CreateError};
use qgrid_core::keyframe::{scan_frames, KeyFileReader};
use qgrid_core::node::Node;
use qgrid_core::stats::StatsSnapshot;
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        Self(
            status,
            ApiError {
                error: code.to_string(),
                message: message.to_string(),
            },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<Json<T>, Failure>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "bad-request", e))
}

async fn health(State(node): State<Arc<Node>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        node_id: node.id.clone(),
        party: node.role,
    })
}

async fn key_status(State(node): State<Arc<Node>>) -> Json<KeyStatus> {
    Json(KeyStatus {
        counters: node.keys.counters(),
        reserve_threshold: node.pool.threshold,
        last_signing_serial: node.keys.last_signing_serial(node.role),
        counterpart_watermark: node.verifier.watermark(),
    })
}

async fn ingest(State(node): State<Arc<Node>>, body: Bytes) -> Reply<IngestResult> {
    let mut reader = KeyFileReader::new(&body[..]);
    let frames = reader
        .read_frames()
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, e.code(), e))?;
    let report = node.ingest(&frames);
    Ok(Json(IngestResult {
        frames: frames.len() as u64,
        crc_failures: reader.crc_failures(),
        report,
    }))
}

async fn iv_status(State(node): State<Arc<Node>>) -> Json<IvStatus> {
    Json(IvStatus {
        counters: node.ivs.counters(),
    })
}

async fn iv_chunk(State(node): State<Arc<Node>>, body: Bytes) -> Json<ChunkResult> {
    Json(ChunkResult {
        added: node.chunk_ivs(&body),
    })
}

async fn create(State(node): State<Arc<Node>>, body: Bytes) -> Reply<CreateResponse> {
    let req: CreateRequest = parse(&body)?;
    let c = node.create(req.message.as_bytes(), &req.topic).map_err(|e| {
        let status = match e {
            CreateError::BadTopic(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::CONFLICT,
        };
        Failure::new(status, e.code(), e)
    })?;
    Ok(Json(CreateResponse {
        payload: encode_payload(&c.payload),
        key_serial: c.payload.total.key_serial,
        fresh_key: c.fresh_key,
        iv_index: c.iv_index,
    }))
}

async fn verify(State(node): State<Arc<Node>>, body: Bytes) -> Reply<VerifyResponse> {
    let req: VerifyRequest = parse(&body)?;
    let v = node.verify_bytes(req.payload.as_bytes(), &req.topic);
    Ok(Json(VerifyResponse {
        accepted: v.accepted,
        reason: v.reason,
    }))
}

async fn stats(State(node): State<Arc<Node>>) -> Json<StatsSnapshot> {
    Json(node.snapshot())
}

async fn inspect(body: Bytes) -> Json<Vec<FrameInfo>> {
    Json(scan_frames(&body).iter().map(FrameInfo::from).collect())
}

async fn not_found() -> Failure {
    Failure::new(StatusCode::NOT_FOUND, "not-found", "no such route")
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/keys/status", get(key_status))
        .route("/keys/ingest", post(ingest))
        .route("/iv/status", get(iv_status))
        .route("/iv/chunk", post(iv_chunk))
        .route("/payload/create", post(create))
        .route("/payload/verify", post(verify))
        .route("/stats", get(stats))
        .route("/frames/inspect", post(inspect))
        .fallback(not_found)
        .with_state(node)
}

/// Serve `node` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    node: Arc<Node>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(node))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A service running on a background task.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(io::Error::other)?
    }
}

pub async fn spawn_service(addr: SocketAddr, node: Arc<Node>) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(serve(listener, node, async {
        let _ = rx.await;
    }));
    tracing::info!(%addr, "node service listening");
    Ok(ServiceHandle {
        addr,
        stop: Some(tx),
        task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use qgrid_core::authcodec::FreshnessPolicy;
    use qgrid_core::clock::{Clock, ManualClock};
    use qgrid_core::keystore::{KeyStore, PartyRole, PoolPolicy};
    use tower::ServiceExt;

    fn node() -> Arc<Node> {
        Arc::new(Node::new(
            "PV",
            PartyRole::Even,
            PoolPolicy::default(),
            FreshnessPolicy::default(),
            KeyStore::new(),
            Arc::new(ManualClock::new(1_000)) as Arc<dyn Clock>,
        ))
    }

    async fn call(node: Arc<Node>, method: &str, path: &str, body: Vec<u8>) -> (StatusCode, serde_json::Value) {
        let req = Request::builder()
            .method(method)
            .uri(path)
            .body(Body::from(body))
            .unwrap();
        let resp = router(node).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    #[tokio::test]
    async fn health_names_node() {
        let (s, v) = call(node(), "GET", "/health", vec![]).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["node_id"], "PV");
        assert_eq!(v["party"], "EVEN");
    }

    #[tokio::test]
    async fn create_without_keys_is_conflict() {
        let body = serde_json::to_vec(&CreateRequest {
            message: "{}".into(),
            topic: "PV/Measurement".into(),
        })
        .unwrap();
        let n = node();
        n.chunk_ivs(&[7u8; 64]);
        let (s, v) = call(n, "POST", "/payload/create", body).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["error"], "no-key-ever");
    }

    #[tokio::test]
    async fn bad_json_and_unknown_route() {
        let (s, v) = call(node(), "POST", "/payload/verify", b"{".to_vec()).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"], "bad-request");
        let (s, v) = call(node(), "GET", "/nope", vec![]).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        assert_eq!(v["error"], "not-found");
    }

    #[tokio::test]
    async fn garbage_verifies_as_malformed() {
        let body = serde_json::to_vec(&VerifyRequest {
            payload: "not a payload".into(),
            topic: "PV/Control".into(),
        })
        .unwrap();
        let (s, v) = call(node(), "POST", "/payload/verify", body).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["reason"], "MALFORMED");
    }
}
