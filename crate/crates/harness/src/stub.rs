//! A stand-in external backend speaking the wire protocol.
//!
//! The threshold mode segments `pixel >= 64 / 128 / 192`, which makes a 0/255
//! image come back unchanged in all three masks. The fault modes produce the
//! protocol violations a client has to reject.

use std::net::SocketAddr;
use std::str::FromStr;
use std::thread;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use promptseg_core::backend::wire::{
    HealthResponse, PredictRequest, PredictResponse, HEALTH_PATH, PREDICT_PATH,
};
use promptseg_core::mask::{iou, BinaryMask2D, RleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubMode {
    Threshold,
    TwoMasks,
    WrongDims,
    IouOutOfRange,
    MalformedJson,
    ServerError,
    Unhealthy,
}

impl FromStr for StubMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "threshold" => StubMode::Threshold,
            "two_masks" => StubMode::TwoMasks,
            "wrong_dims" => StubMode::WrongDims,
            "iou_out_of_range" => StubMode::IouOutOfRange,
            "malformed_json" => StubMode::MalformedJson,
            "server_error" => StubMode::ServerError,
            "unhealthy" => StubMode::Unhealthy,
            other => return Err(format!("unknown stub mode '{other}'")),
        })
    }
}

pub const STUB_MODEL: &str = "stub-threshold";
const LEVELS: [u8; 3] = [64, 128, 192];

async fn health(State(mode): State<StubMode>) -> Json<HealthResponse> {
    let status = if mode == StubMode::Unhealthy {
        "loading"
    } else {
        "ok"
    };
    Json(HealthResponse {
        status: status.into(),
        model: STUB_MODEL.into(),
    })
}

async fn predict(State(mode): State<StubMode>, Json(req): Json<PredictRequest>) -> Response {
    let image = match req.decode_image() {
        Ok(i) => i,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let (w, h) = (image.width(), image.height());
    let masks = LEVELS.map(|t| BinaryMask2D::from_fn(w, h, |x, y| image.get(x, y) >= t));
    let predicted_iou = [0, 1, 2].map(|i| iou(&masks[i], &masks[1]).expect("same dims"));
    let mut resp = PredictResponse {
        masks: masks.iter().map(RleMask::encode).collect(),
        predicted_iou: predicted_iou.to_vec(),
    };
    match mode {
        StubMode::Threshold | StubMode::Unhealthy => {}
        StubMode::TwoMasks => {
            resp.masks.pop();
        }
        StubMode::WrongDims => {
            resp.masks[2] = RleMask::encode(&BinaryMask2D::new(w + 1, h));
        }
        StubMode::IouOutOfRange => resp.predicted_iou[0] = 1.5,
        StubMode::MalformedJson => return (StatusCode::OK, "{\"masks\": [").into_response(),
        StubMode::ServerError => {
            return (
                StatusCode::INTERNAL_SERVER_ERROR,
                "{\"error\":\"inference failed\"}",
            )
                .into_response()
        }
    }
    Json(resp).into_response()
}

pub fn stub_router(mode: StubMode) -> Router {
    Router::new()
        .route(HEALTH_PATH, get(health))
        .route(PREDICT_PATH, post(predict))
        .with_state(mode)
}

/// A stub server on its own thread and runtime; stops when dropped.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral loopback port.
    pub fn start(mode: StubMode) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()?;
        let thread = thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, stub_router(mode))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("stub server");
            })
        });
        Ok(StubServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
