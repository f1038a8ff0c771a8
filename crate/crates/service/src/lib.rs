//! Audit API over an oddforge run store.
//!
//! Every endpoint is read-only except `POST /api/runs/{run}/verdicts`.
//! Transition frames are rendered on demand, scored with the run's model
//! adapter and cached by `(run, scene, from, to, lambda, focus, adapter)`.

mod error;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use oddforge_core::eval::{confusion_accumulate, iou_from_matrix, Segmenter};
use oddforge_core::hash::sha256_hex;
use oddforge_core::pipeline::{interpolated_styles, Workspace};
use oddforge_core::render::{overlay, render};
use oddforge_core::scene::{read_mask_png, read_rgb_png};
use oddforge_core::store::{Verdict, VerdictKind};
use oddforge_core::sweep::{sample_id, ComplianceCell, SuiteManifest, SuiteResults, ORIGINAL};
use oddforge_core::{OddSpec, Scene, StyleCatalog, Store};

pub use error::ApiError;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8787";
pub const OVERLAY_ALPHA: f64 = 0.5;

type ApiResult<T> = Result<T, ApiError>;

/// Everything a run needs to render and score frames on demand.
struct RunContext {
    ws: Workspace,
    catalog: StyleCatalog,
    odd: OddSpec,
    segmenter: Box<dyn Segmenter>,
    fingerprint: String,
    scenes: Mutex<HashMap<String, Arc<Scene>>>,
}

impl RunContext {
    fn load(store: Arc<Store>, run: &str) -> oddforge_core::Result<Self> {
        let ws = Workspace::resume_in(store, run)?;
        let catalog = ws.catalog()?;
        let odd = match ws.odd_snapshot() {
            Ok(odd) => odd,
            Err(_) => ws.odd(&catalog)?,
        };
        let segmenter = ws.segmenter()?;
        let fingerprint = segmenter.fingerprint();
        Ok(Self {
            ws,
            catalog,
            odd,
            segmenter,
            fingerprint,
            scenes: Mutex::new(HashMap::new()),
        })
    }

    fn scene(&self, id: &str) -> oddforge_core::Result<Arc<Scene>> {
        if let Some(s) = self.scenes.lock().expect("scene cache poisoned").get(id) {
            return Ok(s.clone());
        }
        let scene = Arc::new(self.ws.scene(id)?);
        self.scenes
            .lock()
            .expect("scene cache poisoned")
            .insert(id.to_string(), scene.clone());
        Ok(scene)
    }

    fn known_condition(&self, name: &str) -> bool {
        name == ORIGINAL || self.odd.condition(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RenderKey {
    run: String,
    scene: String,
    from: String,
    to: String,
    lambda: u64,
    focus: u8,
    adapter: String,
}

#[derive(Debug, Clone)]
struct Rendered {
    png: Bytes,
    etag: String,
    focus_iou: Option<f64>,
    mean_iou: Option<f64>,
    model_error: Option<String>,
}

pub struct AppState {
    store: Arc<Store>,
    runs: RwLock<HashMap<String, Arc<RunContext>>>,
    cache: Mutex<HashMap<RenderKey, Arc<Rendered>>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// `render_permits` bounds concurrent on-demand renders; 0 uses the core count.
    pub fn new(store_root: impl Into<PathBuf>, render_permits: usize) -> oddforge_core::Result<Self> {
        let permits = if render_permits == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            render_permits
        };
        Ok(Self {
            store: Arc::new(Store::open(store_root)?),
            runs: RwLock::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            permits: Arc::new(Semaphore::new(permits)),
        })
    }

    fn workspace(&self, run: &str) -> ApiResult<Workspace> {
        Ok(Workspace::resume_in(self.store.clone(), run)?)
    }

    fn context(&self, run: &str) -> ApiResult<Arc<RunContext>> {
        if let Some(ctx) = self.runs.read().expect("run cache poisoned").get(run) {
            return Ok(ctx.clone());
        }
        let ctx = Arc::new(RunContext::load(self.store.clone(), run)?);
        self.runs
            .write()
            .expect("run cache poisoned")
            .insert(run.to_string(), ctx.clone());
        Ok(ctx)
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{run}/scenes", get(list_scenes))
        .route("/runs/{run}/scenes/{scene}/variants", get(list_variants))
        .route("/runs/{run}/scenes/{scene}/variants/{variant}/image", get(variant_image))
        .route("/runs/{run}/scenes/{scene}/render", get(render_frame))
        .route("/runs/{run}/scenes/{scene}/overlay", get(overlay_image))
        .route("/runs/{run}/verdicts", post(post_verdict))
        .route("/runs/{run}/compliance", get(compliance))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(index)),
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, ui_dir)).await
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(state: Arc<AppState>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state, addr, ui_dir))
}

async fn index() -> Html<&'static str> {
    Html(
        "<!doctype html><title>oddforge audit</title>\
         <p>No UI bundle configured. The API lives under <a href=\"/api/runs\">/api/runs</a>.</p>",
    )
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no-route", "no such endpoint")
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub tool_version: String,
    pub dataset_root: PathBuf,
    pub scenes: usize,
    pub has_suite: bool,
    pub has_compliance: bool,
}

async fn list_runs(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunSummary>>> {
    blocking(move || {
        let runs = st.store.list_runs()?;
        Ok(Json(
            runs.into_iter()
                .map(|m| RunSummary {
                    has_suite: st.store.has_report(&m.run_id, "suite"),
                    has_compliance: st.store.has_report(&m.run_id, "compliance"),
                    run_id: m.run_id,
                    created_at: m.created_at,
                    tool_version: m.tool_version,
                    dataset_root: m.dataset_root,
                    scenes: m.input_ids.len(),
                })
                .collect(),
        ))
    })
    .await
}

fn suite_results(st: &AppState, run: &str) -> ApiResult<Option<SuiteResults>> {
    if st.store.has_report(run, "suite") {
        Ok(Some(st.store.load_report(run, "suite")?))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub variants: usize,
    pub rejected: usize,
    pub original_mean_iou: Option<f64>,
}

async fn list_scenes(
    State(st): State<Arc<AppState>>,
    Path(run): Path<String>,
) -> ApiResult<Json<Vec<SceneSummary>>> {
    blocking(move || {
        let manifest = st.store.manifest(&run)?;
        let results = suite_results(&st, &run)?;
        let verdicts = st.store.effective_verdicts(&run)?;
        Ok(Json(
            manifest
                .input_ids
                .iter()
                .map(|id| {
                    let samples: Vec<_> = results
                        .iter()
                        .flat_map(|r| &r.samples)
                        .filter(|s| &s.scene_id == id)
                        .collect();
                    SceneSummary {
                        scene_id: id.clone(),
                        variants: samples.len(),
                        rejected: samples
                            .iter()
                            .filter(|s| verdicts.is_rejected(id, &s.condition))
                            .count(),
                        original_mean_iou: samples
                            .iter()
                            .find(|s| s.condition == ORIGINAL)
                            .and_then(|s| s.report.as_ref()?.mean_iou),
                    }
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub condition: String,
    pub mean_iou: Option<f64>,
    pub mean_iou_all: Option<f64>,
    pub frequency_weighted_iou: Option<f64>,
    /// Per-category IoU keyed by category id.
    pub category_iou: BTreeMap<u8, f64>,
    pub error: Option<String>,
    pub verdict: Option<Verdict>,
    pub image: String,
    pub overlay: String,
}

async fn list_variants(
    State(st): State<Arc<AppState>>,
    Path((run, scene)): Path<(String, String)>,
) -> ApiResult<Json<Vec<VariantSummary>>> {
    blocking(move || {
        let manifest = st.store.manifest(&run)?;
        if !manifest.input_ids.contains(&scene) {
            return Err(oddforge_core::Error::UnknownScene(scene).into());
        }
        let results = suite_results(&st, &run)?.ok_or_else(|| oddforge_core::Error::MissingStage {
            run: run.clone(),
            missing: "suite report".into(),
            command: "suite",
        })?;
        let verdicts = st.store.effective_verdicts(&run)?;
        let base = format!("/api/runs/{run}/scenes/{scene}");
        Ok(Json(
            results
                .samples
                .iter()
                .filter(|s| s.scene_id == scene)
                .map(|s| VariantSummary {
                    condition: s.condition.clone(),
                    mean_iou: s.report.as_ref().and_then(|r| r.mean_iou),
                    mean_iou_all: s.report.as_ref().and_then(|r| r.mean_iou_all),
                    frequency_weighted_iou: s.report.as_ref().and_then(|r| r.frequency_weighted_iou),
                    category_iou: s
                        .report
                        .iter()
                        .flat_map(|r| r.present())
                        .filter_map(|c| Some((c.category_id, c.iou?)))
                        .collect(),
                    error: s.error.clone(),
                    verdict: verdicts.get(&scene, &s.condition).cloned(),
                    image: format!("{base}/variants/{}/image", s.condition),
                    overlay: format!("{base}/overlay?variant={}", s.condition),
                })
                .collect(),
        ))
    })
    .await
}

/// Conditions the stored suite rendered for `run`.
fn suite_conditions(st: &AppState, run: &str) -> ApiResult<Vec<String>> {
    if !st.store.has_report(run, "suite_manifest") {
        return Err(oddforge_core::Error::MissingStage {
            run: run.to_string(),
            missing: "suite manifest".into(),
            command: "suite",
        }
        .into());
    }
    let manifest: SuiteManifest = st.store.load_report(run, "suite_manifest")?;
    let mut out = vec![ORIGINAL.to_string()];
    out.extend(manifest.conditions);
    Ok(out)
}

fn stored_variant(st: &AppState, run: &str, scene: &str, variant: &str, kind: &str) -> ApiResult<PathBuf> {
    let manifest = st.store.manifest(run)?;
    if !manifest.input_ids.iter().any(|id| id == scene) {
        return Err(oddforge_core::Error::UnknownScene(scene.to_string()).into());
    }
    if !suite_conditions(st, run)?.iter().any(|c| c == variant) {
        return Err(ApiError::not_found("unknown-variant", format!("no variant '{variant}'")));
    }
    let path = st.store.run_dir(run).join(kind).join(format!("{scene}_{variant}.png"));
    if !path.is_file() {
        return Err(ApiError::not_found(
            "missing-artifact",
            format!("{kind} for {scene}/{variant} is not stored"),
        ));
    }
    Ok(path)
}

fn png_response(png: Bytes, etag: &str, request: &HeaderMap, extra: &[(&'static str, String)]) -> Response {
    let quoted = format!("\"{etag}\"");
    let not_modified = request
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == quoted));
    let mut response = if not_modified {
        StatusCode::NOT_MODIFIED.into_response()
    } else {
        ([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response()
    };
    let headers = response.headers_mut();
    headers.insert(header::ETAG, HeaderValue::from_str(&quoted).expect("hex etag"));
    headers.insert(
        header::CACHE_CONTROL,
        HeaderValue::from_static("public, max-age=31536000, immutable"),
    );
    for (name, value) in extra {
        if let Ok(v) = HeaderValue::from_str(value) {
            headers.insert(*name, v);
        }
    }
    response
}

async fn variant_image(
    State(st): State<Arc<AppState>>,
    Path((run, scene, variant)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let png = blocking(move || {
        let path = stored_variant(&st, &run, &scene, &variant, "renders")?;
        std::fs::read(&path).map_err(|e| oddforge_core::Error::Io { path, source: e }.into())
    })
    .await?;
    let etag = sha256_hex(&png);
    Ok(png_response(Bytes::from(png), &etag, &headers, &[]))
}

async fn overlay_image(
    State(st): State<Arc<AppState>>,
    Path((run, scene)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let variant = q
        .get("variant")
        .cloned()
        .ok_or_else(|| ApiError::bad_request("missing-variant", "query parameter 'variant' is required"))?;
    let png = blocking(move || {
        let ws = st.workspace(&run)?;
        let image = read_rgb_png(&stored_variant(&st, &run, &scene, &variant, "renders")?)?;
        let pred = read_mask_png(
            &stored_variant(&st, &run, &scene, &variant, "predictions")?,
            ws.registry(),
        )?;
        Ok(overlay(&image, &pred, ws.registry(), OVERLAY_ALPHA)?.to_png())
    })
    .await?;
    let etag = sha256_hex(&png);
    Ok(png_response(Bytes::from(png), &etag, &headers, &[]))
}

fn parse_lambda(raw: Option<&String>) -> ApiResult<f64> {
    let raw = raw.ok_or_else(|| ApiError::bad_request("bad-lambda", "query parameter 'lambda' is required"))?;
    match raw.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(ApiError::bad_request(
            "bad-lambda",
            format!("lambda '{raw}' is not a number in [0, 1]"),
        )),
    }
}

async fn render_frame(
    State(st): State<Arc<AppState>>,
    Path((run, scene)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let lambda = parse_lambda(q.get("lambda"))?;
    let from = q.get("from").cloned().unwrap_or_else(|| ORIGINAL.to_string());
    let to = q.get("to").cloned().unwrap_or_else(|| ORIGINAL.to_string());
    let focus = q.get("focus").cloned();

    let st2 = st.clone();
    let run2 = run.clone();
    let ctx = blocking(move || st2.context(&run2)).await?;
    for c in [&from, &to] {
        if !ctx.known_condition(c) {
            return Err(ApiError::not_found("unknown-condition", format!("no condition '{c}'")));
        }
    }
    let focus = ctx
        .ws
        .registry()
        .resolve(focus.as_deref().unwrap_or(&ctx.ws.config().focus))?;
    let key = RenderKey {
        run,
        scene,
        from,
        to,
        lambda: lambda.to_bits(),
        focus,
        adapter: ctx.fingerprint.clone(),
    };

    let cached = st.cache.lock().expect("render cache poisoned").get(&key).cloned();
    let (rendered, hit) = match cached {
        Some(r) => (r, true),
        None => {
            let permit = st.permits.clone().try_acquire_owned().map_err(|_| ApiError::busy())?;
            let key2 = key.clone();
            let rendered = blocking(move || {
                let _permit = permit;
                Ok(Arc::new(render_and_score(&ctx, &key2, lambda)?))
            })
            .await?;
            st.cache
                .lock()
                .expect("render cache poisoned")
                .insert(key, rendered.clone());
            (rendered, false)
        }
    };
    let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
    let mut extra = vec![
        ("x-oddforge-lambda", lambda.to_string()),
        ("x-oddforge-focus-iou", fmt(rendered.focus_iou)),
        ("x-oddforge-mean-iou", fmt(rendered.mean_iou)),
        ("x-oddforge-cache", if hit { "hit" } else { "miss" }.to_string()),
    ];
    if let Some(e) = &rendered.model_error {
        extra.push(("x-oddforge-model-error", e.chars().filter(|c| !c.is_control()).take(200).collect()));
    }
    Ok(png_response(rendered.png.clone(), &rendered.etag, &headers, &extra))
}

fn render_and_score(ctx: &RunContext, key: &RenderKey, lambda: f64) -> ApiResult<Rendered> {
    let scene = ctx.scene(&key.scene)?;
    let cond = |name: &str| (name != ORIGINAL).then(|| ctx.odd.condition(name)).flatten();
    let registry = ctx.ws.registry();
    let styles = interpolated_styles(&scene, &ctx.catalog, cond(&key.from), cond(&key.to), lambda, registry)?;
    let image = render(&scene.mask, &scene.regions, &styles, &ctx.ws.render_params())?;
    let png = image.to_png();
    let id = sample_id(&key.scene, &format!("{}-{}-{lambda}", key.from, key.to));
    let prediction = ctx.segmenter.predict_batch(&[(id, &image)]).remove(0);
    let (focus_iou, mean_iou, model_error) = match prediction
        .map_err(|e| e.to_string())
        .and_then(|p| confusion_accumulate(&scene.mask, &p, registry).map_err(|e| e.to_string()))
    {
        Ok(m) => {
            let report = iou_from_matrix(&m);
            (report.iou(key.focus), report.mean_iou, None)
        }
        Err(e) => (None, None, Some(e)),
    };
    Ok(Rendered {
        etag: sha256_hex(&png),
        png: Bytes::from(png),
        focus_iou,
        mean_iou,
        model_error,
    })
}

/// Body of `POST /api/runs/{run}/verdicts`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub scene_id: String,
    pub sample: String,
    pub verdict: VerdictKind,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictResponse {
    pub effective: Verdict,
    pub history_len: usize,
    /// Compliance cells whose value or status changed with this verdict.
    pub changed_cells: Vec<ComplianceCell>,
}

async fn post_verdict(
    State(st): State<Arc<AppState>>,
    Path(run): Path<String>,
    body: Bytes,
) -> ApiResult<Json<VerdictResponse>> {
    let req: VerdictRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed-verdict", e.to_string())
    })?;
    blocking(move || {
        let ws = st.workspace(&run)?;
        let before = ws.compliance().ok();
        let ack = ws.store().record_verdict(&Verdict {
            run_id: run.clone(),
            scene_id: req.scene_id,
            sample: req.sample,
            verdict: req.verdict,
            reason: req.reason,
            author: req.author,
            timestamp: req.timestamp.unwrap_or_else(Utc::now),
        })?;
        let changed_cells = match (before, ws.compliance().ok()) {
            (Some(b), Some(a)) => b.changed_cells(&a),
            _ => Vec::new(),
        };
        Ok(Json(VerdictResponse {
            effective: ack.effective,
            history_len: ack.history_len,
            changed_cells,
        }))
    })
    .await
}

async fn compliance(
    State(st): State<Arc<AppState>>,
    Path(run): Path<String>,
) -> ApiResult<Json<oddforge_core::ComplianceReport>> {
    blocking(move || {
        let ws = st.workspace(&run)?;
        if !st.store.has_report(&run, "compliance") {
            return Err(oddforge_core::Error::MissingStage {
                run,
                missing: "compliance report".into(),
                command: "comply",
            }
            .into());
        }
        Ok(Json(ws.compliance()?))
    })
    .await
}
