//! HTTP and WebSocket front end for live wound segmentation.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /segment` | encoded image in, 224x224 PNG mask out |
//! | `GET /models` | configured variants with parameter counts |
//! | `GET /config`, `PUT /config` | read or change threshold and active variant |
//! | `GET /stream` | WebSocket: binary frame packets in, mask packets out |

mod config;
mod stream;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use woundseg::infer::Segmenter;
use woundseg::models::{build_model, ModelVariant, Network};

pub use config::{ModelEntry, ServiceConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("port {addr} is already in use")]
    PortBusy { addr: SocketAddr },
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] woundseg::Error),
}

struct Loaded {
    net: Arc<Network>,
    entry: ModelEntry,
}

struct Live {
    variant: ModelVariant,
    segmenter: Segmenter,
}

/// Shared service state. Config changes swap the live segmenter
/// atomically; in-flight requests finish with the one they started with.
pub struct AppState {
    models: BTreeMap<ModelVariant, Loaded>,
    live: RwLock<Live>,
}

impl AppState {
    /// Builds or loads every configured model up front.
    pub fn new(cfg: &ServiceConfig) -> Result<Self, ServeError> {
        cfg.validate()?;
        let mut models = BTreeMap::new();
        for entry in cfg.resolved_models() {
            let net = match &entry.weights {
                Some(path) => {
                    let (net, _) = Network::from_archive_file(path)?;
                    if net.variant() != entry.variant {
                        return Err(woundseg::Error::ArchiveMismatch(format!(
                            "{} holds {} weights, configured as {}",
                            path.display(),
                            net.variant(),
                            entry.variant
                        ))
                        .into());
                    }
                    net
                }
                None => build_model(entry.variant, entry.seed)?,
            };
            log::info!("loaded {} ({} parameters)", entry.variant, net.count_parameters());
            models.insert(entry.variant, Loaded { net: Arc::new(net), entry });
        }
        let active = cfg.active_variant();
        let net = models.get(&active).expect("validated active variant").net.clone();
        let segmenter = Segmenter::from_shared(net, cfg.threshold)?;
        Ok(Self { models, live: RwLock::new(Live { variant: active, segmenter }) })
    }

    /// Snapshot of the segmenter to use for the next frame.
    pub fn segmenter(&self) -> Segmenter {
        self.live.read().expect("state poisoned").segmenter.clone()
    }

    pub fn current(&self) -> ConfigView {
        let live = self.live.read().expect("state poisoned");
        ConfigView { variant: live.variant, threshold: live.segmenter.threshold() }
    }

    /// Validates the whole update before applying any of it.
    pub fn update(&self, update: &ConfigUpdate) -> Result<ConfigView, woundseg::Error> {
        let mut live = self.live.write().expect("state poisoned");
        let threshold = update.threshold.unwrap_or(live.segmenter.threshold());
        let variant = match &update.variant {
            Some(name) => name.parse::<ModelVariant>()?,
            None => live.variant,
        };
        let loaded = self
            .models
            .get(&variant)
            .ok_or_else(|| woundseg::Error::Config(format!("variant {variant} is not configured on this server")))?;
        let segmenter = Segmenter::from_shared(loaded.net.clone(), threshold)?;
        *live = Live { variant, segmenter };
        Ok(ConfigView { variant, threshold })
    }

    pub fn models(&self) -> ModelsView {
        let current = self.current();
        ModelsView {
            active: current.variant,
            threshold: current.threshold,
            models: self
                .models
                .values()
                .map(|l| ModelInfo {
                    variant: l.entry.variant,
                    parameters: l.net.count_parameters(),
                    weights: l.entry.weights.as_ref().map(|p| p.display().to_string()),
                    active: l.entry.variant == current.variant,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigView {
    pub variant: ModelVariant,
    pub threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigUpdate {
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub variant: ModelVariant,
    pub parameters: usize,
    pub weights: Option<String>,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsView {
    pub active: ModelVariant,
    pub threshold: f64,
    pub models: Vec<ModelInfo>,
}

/// JSON error body shared by HTTP responses and stream error replies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<u64>,
}

fn error_response(status: StatusCode, e: impl std::fmt::Display) -> Response {
    (status, Json(ErrorReply { error: e.to_string(), sequence: None })).into_response()
}

fn status_for(e: &woundseg::Error) -> StatusCode {
    use woundseg::Error::*;
    match e {
        CorruptInput { .. } | Config(_) | Contract(_) | Shape(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn get_models(State(state): State<Arc<AppState>>) -> Json<ModelsView> {
    Json(state.models())
}

async fn get_config(State(state): State<Arc<AppState>>) -> Json<ConfigView> {
    Json(state.current())
}

async fn put_config(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let update: ConfigUpdate = match serde_json::from_slice(&body) {
        Ok(u) => u,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("invalid config update: {e}")),
    };
    match state.update(&update) {
        Ok(view) => Json(view).into_response(),
        Err(e) => error_response(status_for(&e), e),
    }
}

async fn post_segment(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let seg = state.segmenter();
    let result = tokio::task::spawn_blocking(move || {
        let s = seg.segment_encoded(&body)?;
        let png = s.mask.encode_png()?;
        Ok::<_, woundseg::Error>((s, png, seg))
    })
    .await;
    match result {
        Ok(Ok((s, png, seg))) => {
            let mut resp = png.into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            let mut set = |name: &'static str, value: String| {
                if let Ok(v) = HeaderValue::from_str(&value) {
                    h.insert(name, v);
                }
            };
            set("x-inference-ms", format!("{:.3}", s.inference_ms));
            set("x-variant", seg.network().variant().name().to_string());
            set("x-threshold", seg.threshold().to_string());
            set("x-crop-origin", format!("{},{}", s.origin.0, s.origin.1));
            resp
        }
        Ok(Err(e)) => error_response(status_for(&e), e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/segment", post(post_segment))
        .route("/models", get(get_models))
        .route("/config", get(get_config).put(put_config))
        .route("/stream", get(stream::stream))
        .with_state(state)
}

/// Binds the listening socket, reporting a busy port distinctly.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortBusy { addr }
        } else {
            ServeError::Bind { addr, source }
        }
    })
}

/// Serves `state` on an already bound listener.
pub async fn run(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), ServeError> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Loads the models, binds and serves until the future is dropped.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), ServeError> {
    let state = Arc::new(AppState::new(cfg)?);
    run(bind(cfg.addr()?).await?, state).await
}
