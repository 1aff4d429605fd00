//! HTTP projection of the gateway.
//!
//! | Route | Purpose |
//! |---|---|
//! | `POST /v1/check` | JSON [`CheckRequest`] in, JSON [`CheckResponse`] out; 429 when denied |
//! | `POST /v1/complete` | release a concurrency slot returned by a check |
//! | `GET /v1/admin/rules` | every stored rule |
//! | `PUT /v1/admin/rules` | load a YAML rule document, replacing its domain |
//! | `GET /v1/admin/rules/{rule_id}` | one rule |
//! | `PUT /v1/admin/rules/{rule_id}` | JSON rule update; `version` is the version read |
//! | `GET /v1/metrics` | plain-text counters |
//! | `ANY /app/{*path}` | stub upstream behind the limiting middleware |

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use limitd_core::engine::Engine;
use limitd_core::rules::{RateLimitRule, RuleError, RuleManager, RuleStore, DEFAULT_CACHE_TTL};
use limitd_core::Clock;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::service::{CheckError, CheckRequest, CheckResponse, FailPolicy, Gateway, InFlight};

pub const LIMIT_HEADER: &str = "x-ratelimit-limit";
pub const REMAINING_HEADER: &str = "x-ratelimit-remaining";
pub const RETRY_AFTER_HEADER: &str = "retry-after";
pub const DEGRADED_HEADER: &str = "x-ratelimit-degraded";
pub const USER_ID_HEADER: &str = "x-user-id";
pub const FORWARDED_FOR_HEADER: &str = "x-forwarded-for";

/// How the middleware turns an HTTP request into a check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiddlewareConfig {
    /// Rule domain of middleware checks.
    pub domain: String,
}

impl Default for MiddlewareConfig {
    fn default() -> Self {
        Self { domain: "app".into() }
    }
}

impl MiddlewareConfig {
    /// Descriptors of an upstream request: `user_id` from `X-User-Id`, `ip`
    /// from the first `X-Forwarded-For` hop and `endpoint` from the path.
    pub fn check_request(&self, headers: &HeaderMap, path: &str) -> CheckRequest {
        let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::trim);
        let mut request = CheckRequest::new(&self.domain).descriptor("endpoint", path);
        if let Some(user) = header(USER_ID_HEADER).filter(|v| !v.is_empty()) {
            request = request.descriptor("user_id", user);
        }
        if let Some(ip) = header(FORWARDED_FOR_HEADER)
            .and_then(|v| v.split(',').next())
            .map(str::trim)
            .filter(|v| !v.is_empty())
        {
            request = request.descriptor("ip", ip);
        }
        request
    }
}

/// Everything `serve` needs to build a gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewayOptions {
    /// Rule document loaded at startup.
    pub rules: Option<PathBuf>,
    /// Rule store file; rules live in memory when absent.
    pub store: Option<PathBuf>,
    pub fail_policy: FailPolicy,
    pub cache_ttl: f64,
    pub middleware: MiddlewareConfig,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            rules: None,
            store: None,
            fail_policy: FailPolicy::default(),
            cache_ttl: DEFAULT_CACHE_TTL,
            middleware: MiddlewareConfig::default(),
        }
    }
}

/// A gateway over a fresh engine, with the configured store and rules.
pub fn build_gateway(options: &GatewayOptions, clock: Arc<dyn Clock>) -> Result<Gateway, RuleError> {
    let engine = Arc::new(Engine::new(clock.clone()));
    let store = match &options.store {
        Some(path) => RuleStore::open(path)?,
        None => RuleStore::in_memory(),
    };
    let rules = RuleManager::with_cache_ttl(engine, store, clock, options.cache_ttl);
    if let Some(path) = &options.rules {
        let source = std::fs::read_to_string(path).map_err(|e| RuleError::Io(format!("{}: {e}", path.display())))?;
        rules.load_rules(&source)?;
    }
    Ok(Gateway::new(rules, options.fail_policy)?)
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    middleware: Arc<MiddlewareConfig>,
}

pub fn router(gateway: Arc<Gateway>, middleware: MiddlewareConfig) -> Router {
    let state = AppState {
        gateway,
        middleware: Arc::new(middleware),
    };
    let app = Router::new()
        .route("/app/{*path}", any(upstream))
        .route_layer(middleware::from_fn_with_state(state.clone(), limit_requests));
    Router::new()
        .route("/v1/check", post(check))
        .route("/v1/complete", post(complete))
        .route("/v1/admin/rules", get(list_rules).put(load_rules))
        .route("/v1/admin/rules/{rule_id}", get(get_rule).put(update_rule))
        .route("/v1/metrics", get(metrics))
        .merge(app)
        .with_state(state)
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    gateway: Arc<Gateway>,
    middleware: MiddlewareConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(gateway, middleware))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(ErrorBody { error: message.to_string() })).into_response()
}

fn rule_error(e: RuleError) -> Response {
    let status = match e {
        RuleError::Parse { .. } | RuleError::Validation { .. } => StatusCode::BAD_REQUEST,
        RuleError::NotFound(_) => StatusCode::NOT_FOUND,
        RuleError::VersionConflict { .. } => StatusCode::CONFLICT,
        RuleError::Io(_) | RuleError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e)
}

fn check_error(e: CheckError) -> Response {
    match e {
        CheckError::Rules(e) => rule_error(e),
        e if e.is_client_error() => error(StatusCode::BAD_REQUEST, e),
        e => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn header_value(n: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&n.to_string()).expect("numeric header value")
}

/// Whole seconds a denied client should wait: rounded up, at least 1.
pub fn retry_after_seconds(retry_after: Option<f64>) -> u64 {
    retry_after.map_or(1, |s| s.ceil().max(1.0) as u64)
}

fn set_limit_headers(headers: &mut HeaderMap, response: &CheckResponse) {
    if response.matched_rule.is_some() {
        headers.insert(HeaderName::from_static(LIMIT_HEADER), header_value(response.limit));
        headers.insert(HeaderName::from_static(REMAINING_HEADER), header_value(response.remaining));
    }
    if !response.allowed {
        headers.insert(
            HeaderName::from_static(RETRY_AFTER_HEADER),
            header_value(retry_after_seconds(response.retry_after)),
        );
    }
    if response.degraded {
        headers.insert(HeaderName::from_static(DEGRADED_HEADER), HeaderValue::from_static("true"));
    }
}

fn status_of(response: &CheckResponse) -> StatusCode {
    if response.allowed {
        StatusCode::OK
    } else {
        StatusCode::TOO_MANY_REQUESTS
    }
}

async fn check(State(state): State<AppState>, Json(request): Json<CheckRequest>) -> Response {
    let gateway = &state.gateway;
    match gateway.handle_check(&request, gateway.now()) {
        Ok(response) => {
            let mut headers = HeaderMap::new();
            set_limit_headers(&mut headers, &response);
            (status_of(&response), headers, Json(response)).into_response()
        }
        Err(e) => check_error(e),
    }
}

#[derive(Debug, Serialize)]
struct Released {
    released: bool,
}

async fn complete(State(state): State<AppState>, Json(slot): Json<InFlight>) -> Response {
    match state.gateway.complete(&slot) {
        Ok(released) => Json(Released { released }).into_response(),
        Err(e) => check_error(e),
    }
}

async fn list_rules(State(state): State<AppState>) -> Json<Vec<RateLimitRule>> {
    Json(state.gateway.rules().list_rules())
}

async fn load_rules(State(state): State<AppState>, body: String) -> Response {
    match state.gateway.rules().load_rules(&body) {
        Ok(rules) => Json(rules).into_response(),
        Err(e) => rule_error(e),
    }
}

async fn get_rule(State(state): State<AppState>, Path(rule_id): Path<String>) -> Response {
    match state.gateway.rules().get_rule_by_id(&rule_id) {
        Ok(rule) => Json(rule).into_response(),
        Err(e) => rule_error(e),
    }
}

#[derive(Debug, Serialize)]
struct Updated {
    rule_id: String,
    version: u64,
}

async fn update_rule(
    State(state): State<AppState>,
    Path(rule_id): Path<String>,
    Json(rule): Json<RateLimitRule>,
) -> Response {
    if rule.rule_id != rule_id {
        return error(
            StatusCode::BAD_REQUEST,
            format!("body rule_id {:?} does not match path {rule_id:?}", rule.rule_id),
        );
    }
    match state.gateway.rules().update_rule(rule) {
        Ok(version) => Json(Updated { rule_id, version }).into_response(),
        Err(e) => rule_error(e),
    }
}

async fn metrics(State(state): State<AppState>) -> Response {
    (
        [(axum::http::header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        state.gateway.metrics().render(),
    )
        .into_response()
}

async fn upstream(Path(path): Path<String>) -> String {
    format!("upstream /{path}\n")
}

/// Checks the request, forwards it when allowed and answers 429 otherwise.
/// Concurrency slots are released once the upstream has answered.
async fn limit_requests(State(state): State<AppState>, request: Request, next: Next) -> Response {
    let gateway = &state.gateway;
    let check = state.middleware.check_request(request.headers(), request.uri().path());
    let decision = match gateway.handle_check(&check, gateway.now()) {
        Ok(decision) => decision,
        Err(e) => return check_error(e),
    };
    if !decision.allowed {
        let mut response = Response::new(Body::from("rate limit exceeded\n"));
        *response.status_mut() = StatusCode::TOO_MANY_REQUESTS;
        set_limit_headers(response.headers_mut(), &decision);
        return response;
    }
    let mut response = next.run(request).await;
    for slot in &decision.in_flight {
        // An unreleased slot expires with its window.
        let _ = gateway.complete(slot);
    }
    set_limit_headers(response.headers_mut(), &decision);
    response
}
