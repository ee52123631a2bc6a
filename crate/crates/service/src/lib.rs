//! HTTP service for interactive tag inference over one loaded model.
//! Requests are stateless: every call carries the full evidence.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clintag_core::inference::{exact_last_tag, gibbs_posterior, Evidence, GibbsConfig};
use clintag_core::math::clamp_prob;
use clintag_core::model_file::{parse_model, sha256_hex};
use clintag_core::{Error as CoreError, ModelParams, NoiseModel};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

const DEFAULT_UI: &str = include_str!("../static/index.html");

/// Immutable model snapshot; requests hold an `Arc` to the one current at
/// arrival.
#[derive(Debug)]
pub struct LoadedModel {
    pub params: ModelParams,
    pub noise: Option<NoiseModel>,
    /// sha256 of the model file bytes
    pub version: String,
    pub source: Option<PathBuf>,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8], source: Option<PathBuf>) -> Result<Self, CoreError> {
        let (params, noise) = parse_model(bytes)?;
        Ok(Self {
            params,
            noise,
            version: sha256_hex(bytes),
            source,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, CoreError> {
        Self::from_bytes(&std::fs::read(path)?, Some(path.to_path_buf()))
    }
}

/// Default per-request sampler budget, smaller than the offline default.
pub fn interactive_gibbs() -> GibbsConfig {
    GibbsConfig {
        chains: 2,
        burn_in: 200,
        kept: 500,
        thin: 1,
        seed: 0,
    }
}

pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    pub sampler_defaults: GibbsConfig,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, ui_dir: Option<PathBuf>) -> Self {
        Self {
            model: RwLock::new(model.map(Arc::new)),
            sampler_defaults: interactive_gibbs(),
            ui_dir,
        }
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    /// Replaces the whole model at once; in-flight requests finish on the
    /// snapshot they started with.
    pub fn swap(&self, model: LoadedModel) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    /// Reloads from the current model's source file when its content hash
    /// changed. Returns whether a swap happened.
    pub fn reload_if_changed(&self) -> Result<bool, CoreError> {
        let Some(current) = self.current() else {
            return Ok(false);
        };
        let Some(path) = current.source.clone() else {
            return Ok(false);
        };
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) == current.version {
            return Ok(false);
        }
        self.swap(LoadedModel::from_bytes(&bytes, Some(path))?);
        Ok(true)
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_loaded() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            "no model is loaded",
        )
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ImpossibleEvidence(_) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "impossible_evidence",
                e.to_string(),
            ),
            CoreError::Config(_) => Self::bad_request("invalid_sampler", e.to_string()),
            other => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal",
                other.to_string(),
            ),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                code: self.code,
                message: self.message,
            }),
        )
            .into_response()
    }
}

/// JSON body extractor whose rejections use the error envelope.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(rej) => Err(ApiError::bad_request("invalid_request", rej.body_text())),
        }
    }
}

/// A feature by vocabulary token or by column index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureRef {
    Index(usize),
    Token(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    #[default]
    Gibbs,
    ExactLastTag,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    pub chains: Option<usize>,
    pub burn_in: Option<usize>,
    pub kept: Option<usize>,
    pub thin: Option<usize>,
}

/// Listed features are present; every other column is observed absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    #[serde(default)]
    pub features: Vec<FeatureRef>,
    #[serde(default)]
    pub confirmed: Vec<String>,
    #[serde(default)]
    pub rejected: Vec<String>,
    #[serde(default)]
    pub mode: Option<InferMode>,
    #[serde(default)]
    pub sampler: Option<SamplerOverrides>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TagState {
    Open,
    Confirmed,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TagPosterior {
    pub condition: String,
    pub index: usize,
    pub probability: f64,
    pub state: TagState,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Suggestion {
    pub condition: String,
    pub index: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub burn_in: usize,
    pub kept: usize,
    pub thin: usize,
    pub sweeps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferResponse {
    pub model_version: String,
    pub mode: InferMode,
    /// every condition in model order
    pub posteriors: Vec<TagPosterior>,
    /// open conditions, most probable first, ties by index
    pub suggestions: Vec<Suggestion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetaResponse {
    pub model_version: String,
    pub conditions: Vec<String>,
    pub n_features: usize,
    pub features: Vec<String>,
    pub sampler_defaults: GibbsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HealthResponse {
    pub status: &'static str,
    pub model_loaded: bool,
}

/// `x` lists the named features as present and every other feature as
/// absent; `observed` is false when the request names no features, which
/// leaves every feature unobserved.
struct ResolvedRequest {
    x: Vec<bool>,
    observed: bool,
    states: Vec<TagState>,
}

fn resolve(model: &ModelParams, req: &InferRequest) -> Result<ResolvedRequest, ApiError> {
    let mut x = vec![false; model.n()];
    for f in &req.features {
        let j = match f {
            FeatureRef::Index(j) if *j < model.n() => *j,
            FeatureRef::Index(j) => {
                return Err(ApiError::bad_request(
                    "unknown_feature",
                    format!("feature index {j} is outside 0..{}", model.n()),
                ))
            }
            FeatureRef::Token(t) => model
                .feature_names()
                .iter()
                .position(|name| name == t)
                .ok_or_else(|| {
                    ApiError::bad_request("unknown_feature", format!("unknown feature token '{t}'"))
                })?,
        };
        x[j] = true;
    }
    let lookup = |name: &String| {
        model.condition_by_name(name).ok_or_else(|| {
            ApiError::bad_request("unknown_condition", format!("unknown condition '{name}'"))
        })
    };
    let mut states = vec![TagState::Open; model.m()];
    for name in &req.confirmed {
        states[lookup(name)?] = TagState::Confirmed;
    }
    for name in &req.rejected {
        let i = lookup(name)?;
        if states[i] == TagState::Confirmed {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "conflicting_tags",
                format!("condition '{name}' is both confirmed and rejected"),
            ));
        }
        states[i] = TagState::Rejected;
    }
    Ok(ResolvedRequest {
        x,
        observed: !req.features.is_empty(),
        states,
    })
}

/// Per-request ceiling on sampler work, in chains times sweeps.
pub const MAX_SAMPLER_SWEEPS: usize = 1_000_000;

fn sampler_config(defaults: &GibbsConfig, req: &InferRequest) -> Result<GibbsConfig, ApiError> {
    let o = req.sampler.unwrap_or_default();
    let cfg = GibbsConfig {
        chains: o.chains.unwrap_or(defaults.chains),
        burn_in: o.burn_in.unwrap_or(defaults.burn_in),
        kept: o.kept.unwrap_or(defaults.kept),
        thin: o.thin.unwrap_or(defaults.thin),
        seed: req.seed.unwrap_or(defaults.seed),
    };
    cfg.validate()?;
    let work = cfg
        .kept
        .checked_mul(cfg.thin)
        .and_then(|k| k.checked_add(cfg.burn_in))
        .and_then(|s| s.checked_mul(cfg.chains));
    match work {
        Some(w) if w <= MAX_SAMPLER_SWEEPS => Ok(cfg),
        _ => Err(ApiError::bad_request(
            "invalid_sampler",
            format!("sampler budget exceeds {MAX_SAMPLER_SWEEPS} sweeps"),
        )),
    }
}

fn build_response(
    model: &LoadedModel,
    mode: InferMode,
    probs: &[f64],
    states: &[TagState],
    diagnostics: Option<Diagnostics>,
) -> InferResponse {
    let names = model.params.condition_names();
    let posteriors: Vec<TagPosterior> = (0..names.len())
        .map(|i| TagPosterior {
            condition: names[i].clone(),
            index: i,
            probability: match states[i] {
                TagState::Confirmed => 1.0,
                TagState::Rejected => 0.0,
                TagState::Open => probs[i],
            },
            state: states[i],
        })
        .collect();
    let mut suggestions: Vec<Suggestion> = posteriors
        .iter()
        .filter(|p| p.state == TagState::Open)
        .map(|p| Suggestion {
            condition: p.condition.clone(),
            index: p.index,
            probability: p.probability,
        })
        .collect();
    suggestions.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.index.cmp(&b.index))
    });
    InferResponse {
        model_version: model.version.clone(),
        mode,
        posteriors,
        suggestions,
        diagnostics,
    }
}

/// Gibbs marginals under the request's evidence.
pub fn posterior(
    model: &LoadedModel,
    defaults: &GibbsConfig,
    req: &InferRequest,
) -> Result<InferResponse, ApiError> {
    let resolved = resolve(&model.params, req)?;
    let cfg = sampler_config(defaults, req)?;
    let mut ev = if resolved.observed {
        Evidence::from_x(&model.params, &resolved.x)?
    } else {
        Evidence::empty(&model.params)
    };
    for (i, s) in resolved.states.iter().enumerate() {
        match s {
            TagState::Confirmed => ev.clamp(i, true)?,
            TagState::Rejected => ev.clamp(i, false)?,
            TagState::Open => {}
        }
    }
    let result = gibbs_posterior(&model.params, &ev, &cfg)?;
    let diagnostics = Diagnostics {
        chains: result.chains,
        burn_in: cfg.burn_in,
        kept: result.kept,
        thin: cfg.thin,
        sweeps: result.sweeps,
        seed: cfg.seed,
    };
    Ok(build_response(
        model,
        InferMode::Gibbs,
        &result.marginals,
        &resolved.states,
        Some(diagnostics),
    ))
}

/// Exact distribution over the one further open condition, given the
/// confirmed set; rejected conditions are excluded from the candidates.
pub fn last_tag(model: &LoadedModel, req: &InferRequest) -> Result<InferResponse, ApiError> {
    let resolved = resolve(&model.params, req)?;
    let known: Vec<usize> = (0..resolved.states.len())
        .filter(|&i| resolved.states[i] == TagState::Confirmed)
        .collect();
    if known.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_confirmed_tags",
            "last-tag inference needs at least one confirmed tag",
        ));
    }
    if resolved.states.iter().all(|s| *s != TagState::Open) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_open_tags",
            "every tag is already confirmed or rejected",
        ));
    }
    let candidates: Vec<(usize, f64)> = if resolved.observed {
        let r = exact_last_tag(&model.params, &resolved.x, &known)?;
        r.candidates.into_iter().zip(r.probabilities).collect()
    } else {
        prior_last_tag(&model.params, &resolved.states)
    };
    let mut probs = vec![0.0; model.params.m()];
    let mut total = 0.0;
    for (i, p) in candidates {
        if resolved.states[i] == TagState::Open {
            probs[i] = p;
            total += p;
        }
    }
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    } else {
        let open = resolved
            .states
            .iter()
            .filter(|s| **s == TagState::Open)
            .count() as f64;
        for (i, s) in resolved.states.iter().enumerate() {
            if *s == TagState::Open {
                probs[i] = 1.0 / open;
            }
        }
    }
    Ok(build_response(
        model,
        InferMode::ExactLastTag,
        &probs,
        &resolved.states,
        None,
    ))
}

/// Last-tag weights without feature evidence: proportional to prior odds.
fn prior_last_tag(model: &ModelParams, states: &[TagState]) -> Vec<(usize, f64)> {
    let odds: Vec<(usize, f64)> = (0..model.m())
        .filter(|&i| states[i] != TagState::Confirmed)
        .map(|i| {
            let p = clamp_prob(model.priors()[i]);
            (i, p / (1.0 - p))
        })
        .collect();
    let z: f64 = odds.iter().map(|(_, o)| o).sum();
    odds.into_iter().map(|(i, o)| (i, o / z)).collect()
}

fn loaded(state: &AppState) -> Result<Arc<LoadedModel>, ApiError> {
    state.current().ok_or_else(ApiError::not_loaded)
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn meta_handler(State(state): State<Arc<AppState>>) -> Result<Json<MetaResponse>, ApiError> {
    let model = loaded(&state)?;
    Ok(Json(MetaResponse {
        model_version: model.version.clone(),
        conditions: model.params.condition_names().to_vec(),
        n_features: model.params.n(),
        features: model.params.feature_names().to_vec(),
        sampler_defaults: state.sampler_defaults,
    }))
}

async fn posterior_handler(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<InferRequest>,
) -> Result<Json<InferResponse>, ApiError> {
    let model = loaded(&state)?;
    let defaults = state.sampler_defaults;
    if req.mode == Some(InferMode::ExactLastTag) {
        return run_blocking(move || last_tag(&model, &req)).await.map(Json);
    }
    run_blocking(move || posterior(&model, &defaults, &req))
        .await
        .map(Json)
}

async fn last_tag_handler(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<InferRequest>,
) -> Result<Json<InferResponse>, ApiError> {
    let model = loaded(&state)?;
    if req.mode == Some(InferMode::Gibbs) {
        return Err(ApiError::bad_request(
            "invalid_mode",
            "/api/last-tag only serves mode exact_last_tag",
        ));
    }
    run_blocking(move || last_tag(&model, &req)).await.map(Json)
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok",
        model_loaded: state.current().is_some(),
    })
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/meta", get(meta_handler))
        .route("/api/posterior", post(posterior_handler))
        .route("/api/last-tag", post(last_tag_handler))
        .route("/api/{*rest}", get(api_not_found).post(api_not_found))
        .route("/healthz", get(health_handler));
    let app = match &state.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(DEFAULT_UI) })),
    };
    app.with_state(state)
}

/// Polls the model file and swaps in new content when its hash changes.
pub fn spawn_reloader(state: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let s = state.clone();
            match tokio::task::spawn_blocking(move || s.reload_if_changed()).await {
                Ok(Ok(true)) => log::info!("model reloaded"),
                Ok(Ok(false)) => {}
                Ok(Err(e)) => log::warn!("model reload failed: {e}"),
                Err(e) => log::warn!("model reload task failed: {e}"),
            }
        }
    })
}

/// Binds and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
