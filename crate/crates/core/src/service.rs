//! HTTP API over a loaded checkpoint for interactive palette editing.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::color::ColorPoint;
use crate::dataio::{gray_png, load_checkpoint, Checkpoint, ImageData};
use crate::field::Field;
use crate::palette::Palette;
use crate::renderer::RenderedImage;

/// Longest side of a render when the request does not give a width.
pub const DEFAULT_MAX_SIDE: usize = 256;
pub const REVISION_HEADER: &str = "x-palette-revision";

struct Session {
    checkpoint: Arc<Checkpoint>,
    palette: Arc<Palette>,
    revision: u64,
}

#[derive(Default)]
struct Inner {
    session: RwLock<Option<Session>>,
    // Layer weights do not depend on the palette, so renders are cached per
    // (view, width) and recomposited on each request.
    weights: Mutex<HashMap<(usize, usize), Arc<RenderedImage>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// A state with no checkpoint; `/healthz` answers 503 until [`AppState::load`].
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_checkpoint(checkpoint: Checkpoint) -> Self {
        let s = Self::new();
        s.load(checkpoint);
        s
    }

    /// Installs a checkpoint and resets the revision to 0.
    pub fn load(&self, checkpoint: Checkpoint) {
        let palette = Arc::new(checkpoint.palette.clone());
        *self.inner.session.write().expect("session lock") = Some(Session {
            checkpoint: Arc::new(checkpoint),
            palette,
            revision: 0,
        });
        self.inner.weights.lock().expect("cache lock").clear();
    }

    pub fn is_loaded(&self) -> bool {
        self.inner.session.read().expect("session lock").is_some()
    }

    fn snapshot(&self) -> Option<(Arc<Checkpoint>, Arc<Palette>, u64)> {
        self.inner
            .session
            .read()
            .expect("session lock")
            .as_ref()
            .map(|s| (s.checkpoint.clone(), s.palette.clone(), s.revision))
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, m.into())
}

fn not_loaded() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no checkpoint loaded".into())
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/meta", get(meta))
        .route("/api/palette", get(get_palette).put(put_palette))
        .route("/api/render", get(render))
        .layer(CorsLayer::very_permissive().expose_headers([header::ETAG, header::HeaderName::from_static(REVISION_HEADER)]))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> Response {
    if state.is_loaded() {
        (StatusCode::OK, "ok").into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, "loading").into_response()
    }
}

#[derive(Serialize)]
struct ViewInfo {
    index: usize,
    width: usize,
    height: usize,
}

async fn meta(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let (ck, _, revision) = state.snapshot().ok_or_else(not_loaded)?;
    let resolution: Vec<usize> = match &ck.field {
        Field::Image(f) => vec![f.height(), f.width()],
        Field::Scene(f) => f.resolution().to_vec(),
    };
    let views: Vec<ViewInfo> = (0..ck.view_count())
        .map(|i| {
            let (width, height) = ck.view_size(i).expect("view in range");
            ViewInfo { index: i, width, height }
        })
        .collect();
    Ok(Json(json!({
        "mode": ck.mode(),
        "resolution": resolution,
        "K": ck.palette.layer_count(),
        "views": views,
        "revision": revision,
        "initial_palette": ck.palette.to_hex_list(),
    })))
}

fn palette_body(palette: &Palette, revision: u64) -> Value {
    json!({
        "colors": palette.colors().iter().map(|c| c.to_array()).collect::<Vec<_>>(),
        "hex": palette.to_hex_list(),
        "background_index": 0,
        "revision": revision,
    })
}

fn etag(revision: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{revision}\"")).expect("ascii")
}

async fn get_palette(State(state): State<AppState>) -> ApiResult<Response> {
    let (_, palette, revision) = state.snapshot().ok_or_else(not_loaded)?;
    let mut resp = Json(palette_body(&palette, revision)).into_response();
    resp.headers_mut().insert(header::ETAG, etag(revision));
    Ok(resp)
}

fn parse_color(v: &Value) -> ApiResult<ColorPoint> {
    let c = match v {
        Value::String(s) => ColorPoint::from_hex(s).map_err(|e| bad_request(e.to_string()))?,
        Value::Array(a) if a.len() == 3 => {
            let ch: Option<Vec<f64>> = a.iter().map(|x| x.as_f64()).collect();
            let ch = ch.ok_or_else(|| bad_request("color channels must be numbers"))?;
            ColorPoint::new(ch[0], ch[1], ch[2])
        }
        _ => return Err(bad_request("color must be \"#RRGGBB\" or [r, g, b]")),
    };
    if !c.to_array().iter().all(|x| (0.0..=1.0).contains(x)) {
        return Err(bad_request("color channels must lie in [0, 1]"));
    }
    Ok(c)
}

fn apply_edit(current: &Palette, body: &Value) -> ApiResult<Palette> {
    if let Some(colors) = body.get("colors") {
        let list = colors.as_array().ok_or_else(|| bad_request("colors must be a list"))?;
        if list.len() != current.len() {
            return Err(bad_request(format!("expected {} colors, got {}", current.len(), list.len())));
        }
        let colors = list.iter().map(parse_color).collect::<ApiResult<Vec<_>>>()?;
        return Palette::new(colors)
            .and_then(|p| p.with_learnable(current.learnable().to_vec()))
            .map_err(|e| bad_request(e.to_string()));
    }
    let index = body
        .get("index")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad_request("body needs `colors` or `index` and `color`"))? as usize;
    let color = parse_color(body.get("color").ok_or_else(|| bad_request("missing `color`"))?)?;
    current.edit_color(index, color).map_err(|e| bad_request(e.to_string()))
}

fn if_match(headers: &HeaderMap) -> ApiResult<Option<Option<u64>>> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let s = v.to_str().map_err(|_| bad_request("unreadable If-Match"))?.trim();
    if s == "*" {
        return Ok(Some(None));
    }
    let s = s.trim_start_matches("W/").trim_matches('"');
    s.parse().map(|r| Some(Some(r))).map_err(|_| bad_request("If-Match must be a revision number"))
}

async fn put_palette(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let expected = if_match(&headers)?;
    let body: Value = serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed JSON: {e}")))?;
    let mut guard = state.inner.session.write().expect("session lock");
    let session = guard.as_mut().ok_or_else(not_loaded)?;
    if let Some(Some(rev)) = expected {
        if rev != session.revision {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("revision is {}, If-Match gave {rev}", session.revision),
            ));
        }
    }
    let next = apply_edit(&session.palette, &body)?;
    session.palette = Arc::new(next);
    session.revision += 1;
    let revision = session.revision;
    drop(guard);
    let mut resp = Json(json!({ "revision": revision })).into_response();
    resp.headers_mut().insert(header::ETAG, etag(revision));
    Ok(resp)
}

fn query_usize(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<usize>> {
    q.get(key)
        .map(|v| v.parse().map_err(|_| bad_request(format!("`{key}` must be a non-negative integer"))))
        .transpose()
}

async fn render(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let (ck, palette, revision) = state.snapshot().ok_or_else(not_loaded)?;
    let view = query_usize(&q, "view")?.unwrap_or(0);
    let (native_w, native_h) = ck.view_size(view).map_err(|e| bad_request(e.to_string()))?;
    let width = match query_usize(&q, "width")? {
        Some(w) if w == 0 || w > native_w => return Err(bad_request(format!("width must be in 1..={native_w}"))),
        Some(w) => w,
        None => {
            let side = native_w.max(native_h);
            if side > DEFAULT_MAX_SIDE {
                ((native_w * DEFAULT_MAX_SIDE) as f64 / side as f64).round().max(1.0) as usize
            } else {
                native_w
            }
        }
    };
    let layer = query_usize(&q, "layer")?;
    if let Some(j) = layer {
        if j > ck.palette.layer_count() {
            return Err(bad_request(format!("layer must be in 0..={}", ck.palette.layer_count())));
        }
    }

    let cached = state.inner.weights.lock().expect("cache lock").get(&(view, width)).cloned();
    let weights = match cached {
        Some(w) => w,
        None => {
            let (ck2, base) = (ck.clone(), ck.palette.clone());
            let img = tokio::task::spawn_blocking(move || ck2.render_view(view, Some(width), &base))
                .await
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            let img = Arc::new(img);
            state.inner.weights.lock().expect("cache lock").insert((view, width), img.clone());
            img
        }
    };
    let png = match layer {
        Some(j) => gray_png(&weights.layer_map(j), weights.width, weights.height),
        None => ImageData::new(weights.width, weights.height, weights.recolored(palette.colors()))
            .expect("sizes match")
            .to_png(),
    };
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    resp.headers_mut()
        .insert(REVISION_HEADER, HeaderValue::from_str(&revision.to_string()).expect("ascii"));
    Ok(resp)
}

/// Serves `state` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr`, loads `checkpoint` in the background and serves until
/// Ctrl-C. Bind and load failures are returned as errors.
pub fn run(checkpoint: PathBuf, addr: SocketAddr) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let state = AppState::new();
        let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<crate::Error>();
        let loader = state.clone();
        tokio::task::spawn_blocking(move || match load_checkpoint(&checkpoint) {
            Ok(ck) => loader.load(ck),
            Err(e) => {
                let _ = fail_tx.send(e);
            }
        });
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let failed = tokio::spawn(async move {
            match fail_rx.await {
                Ok(e) => {
                    let _ = stop_tx.send(());
                    Some(e)
                }
                Err(_) => None,
            }
        });
        serve(listener, state, async move {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                Ok(()) = stop_rx => {}
            }
        })
        .await?;
        if failed.is_finished() {
            if let Ok(Some(e)) = failed.await {
                return Err(e.into());
            }
        }
        Ok(())
    })
}
