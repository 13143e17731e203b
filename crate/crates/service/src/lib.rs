//! HTTP facade over the windowed EoI pipeline.
//!
//! One writer task drains the ingest queue once per window and publishes a
//! new immutable snapshot; request handlers only ever read the latest one.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::DateTime;
use eoimap_core::eoi::EoiRecord;
use eoimap_core::packet::{parse_record_line, validate, AdapterRegistry, RawRecord};
use eoimap_core::pipeline::{Engine, PipelineConfig, PipelineStats, Published, DROP_INVALID};
use eoimap_core::query::{
    execute, plan, tag_cloud, CachedHistory, EoIQuery, HistorySource, QueryPlan,
};
use eoimap_core::scope::ScopeParams;
use eoimap_core::{BBox, SnapshotStore, TimeRange};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{error, info};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Window clock follows the newest record time (replays, backfills).
    #[default]
    Event,
    /// Window clock is the host's wall clock.
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub clock: Clock,
    pub max_cover_cells: usize,
    pub default_tagcloud_k: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            clock: Clock::Event,
            max_cover_cells: 512,
            default_tagcloud_k: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub service: ServiceSection,
}

impl ServiceConfig {
    pub fn from_toml(doc: &str) -> anyhow::Result<Self> {
        let c: ServiceConfig = toml::from_str(doc)?;
        c.pipeline.validate().map_err(anyhow::Error::msg)?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut c = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    /// Applies `EOIMAP_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: String) -> anyhow::Result<T> {
            v.parse()
                .map_err(|_| anyhow::anyhow!("{k}: cannot parse {v:?}"))
        }
        let p = &mut self.pipeline;
        if let Some(v) = var("EOIMAP_LISTEN") {
            p.listen = v;
        }
        if let Some(v) = var("EOIMAP_DATA_DIR") {
            p.data_dir = (!v.is_empty()).then(|| v.into());
        }
        if let Some(v) = var("EOIMAP_WINDOW_MS") {
            p.window_ms = num("EOIMAP_WINDOW_MS", v)?;
        }
        if let Some(v) = var("EOIMAP_INGEST_CAP") {
            p.ingest_cap = num("EOIMAP_INGEST_CAP", v)?;
        }
        if let Some(v) = var("EOIMAP_CLASS_THRESHOLD") {
            p.class_threshold = num("EOIMAP_CLASS_THRESHOLD", v)?;
        }
        if let Some(v) = var("EOIMAP_CORPUS_FILE") {
            p.corpus_file = Some(v.into());
        }
        if let Some(v) = var("EOIMAP_CLOCK") {
            self.service.clock = match v.as_str() {
                "event" => Clock::Event,
                "wall" => Clock::Wall,
                _ => anyhow::bail!("EOIMAP_CLOCK must be event or wall, got {v:?}"),
            };
        }
        self.pipeline.validate().map_err(anyhow::Error::msg)
    }
}

#[derive(Default)]
struct Pending {
    records: Vec<RawRecord>,
    dropped: BTreeMap<String, u64>,
}

pub struct AppState {
    engine: Mutex<Engine>,
    published: RwLock<Arc<Published>>,
    pending: Mutex<Pending>,
    registry: AdapterRegistry,
    history: Option<Arc<CachedHistory>>,
    scope: ScopeParams,
    settings: ServiceSection,
    ingest_cap: usize,
    totals: Mutex<PipelineStats>,
}

impl AppState {
    /// Builds the engine, replaying retained snapshots when a data directory is set.
    pub fn new(config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let mut engine = Engine::new(config.pipeline.clone())?;
        let restored = engine.recover()?;
        if restored > 0 {
            info!(restored, "recovered packets from snapshots");
        }
        let history = match &config.pipeline.data_dir {
            Some(dir) => Some(Arc::new(CachedHistory::new(SnapshotStore::open(dir)?))),
            None => None,
        };
        Ok(Arc::new(AppState {
            published: RwLock::new(engine.published()),
            registry: engine.registry().clone(),
            engine: Mutex::new(engine),
            pending: Mutex::new(Pending::default()),
            history,
            scope: config.pipeline.scope.clone(),
            settings: config.service.clone(),
            ingest_cap: config.pipeline.ingest_cap,
            totals: Mutex::new(PipelineStats::default()),
        }))
    }

    pub fn published(&self) -> Arc<Published> {
        self.published.read().expect("publish lock").clone()
    }

    pub fn queued(&self) -> usize {
        self.pending.lock().expect("queue lock").records.len()
    }

    /// Screens record lines and queues the accepted ones. `Err` carries the
    /// queue size when the batch would overflow it; nothing is queued then.
    pub fn enqueue(&self, body: &str) -> Result<IngestReceipt, usize> {
        let mut accepted = Vec::new();
        let mut dropped: BTreeMap<String, u64> = BTreeMap::new();
        let received = chrono::Utc::now().timestamp_millis();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let screened = parse_record_line(line, received)
                .and_then(|r| self.registry.wrap(&r).map(|p| (r, p)));
            match screened {
                Ok((r, p)) if validate(&p).is_empty() => accepted.push(r),
                Ok(_) => *dropped.entry(DROP_INVALID.to_string()).or_insert(0) += 1,
                Err(e) => *dropped.entry(e.reason().to_string()).or_insert(0) += 1,
            }
        }
        let mut q = self.pending.lock().expect("queue lock");
        if q.records.len() + accepted.len() > self.ingest_cap {
            return Err(q.records.len());
        }
        let receipt = IngestReceipt {
            accepted: accepted.len() as u64,
            dropped: dropped.values().sum(),
            reasons: dropped.clone(),
            queued: q.records.len() + accepted.len(),
        };
        q.records.extend(accepted);
        for (k, v) in dropped {
            *q.dropped.entry(k).or_insert(0) += v;
        }
        Ok(receipt)
    }

    /// Runs one window over everything queued and publishes the result.
    /// With the event clock an empty queue is a no-op.
    pub fn run_pending(&self) -> Option<PipelineStats> {
        let Pending { records, dropped } =
            std::mem::take(&mut *self.pending.lock().expect("queue lock"));
        let now = match self.settings.clock {
            Clock::Event if records.is_empty() && dropped.is_empty() => return None,
            Clock::Event => None,
            Clock::Wall => Some(chrono::Utc::now().timestamp_millis()),
        };
        let mut engine = self.engine.lock().expect("engine lock");
        let stats = engine.run_window_screened(records, &dropped, now);
        if let Some(h) = &self.history {
            for d in engine.rewritten_days() {
                h.invalidate(*d);
            }
        }
        *self.published.write().expect("publish lock") = engine.published();
        self.totals.lock().expect("totals lock").accumulate(&stats);
        Some(stats)
    }

    /// Compacts open snapshot days; called on shutdown.
    pub fn flush(&self) {
        if let Err(e) = self.engine.lock().expect("engine lock").flush() {
            error!(error = %e, "snapshot flush failed");
        }
    }

    fn history(&self) -> Option<&dyn HistorySource> {
        self.history.as_deref().map(|h| h as &dyn HistorySource)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub accepted: u64,
    pub dropped: u64,
    pub reasons: BTreeMap<String, u64>,
    pub queued: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ingest", post(ingest))
        .route("/eois", get(eois))
        .route("/tagcloud", get(tagcloud))
        .route("/stats", get(stats))
        .route("/health", get(health))
        .with_state(state)
}

/// Drains the queue every `window` until the process stops.
pub fn spawn_writer(state: Arc<AppState>, window: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(window);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tick.tick().await;
        loop {
            tick.tick().await;
            let s = state.clone();
            if let Err(e) = tokio::task::spawn_blocking(move || s.run_pending()).await {
                error!(error = %e, "window task failed");
            }
        }
    })
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&config.pipeline.listen).await?;
    run(listener, config, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Serves on `listener` until `shutdown` resolves, then runs a last window
/// over whatever is still queued and compacts the snapshots.
pub async fn run(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let window = Duration::from_millis(config.pipeline.window_ms as u64);
    let state = AppState::new(config)?;
    let writer = spawn_writer(state.clone(), window);
    info!(listen = %listener.local_addr()?, window_ms = window.as_millis() as u64, "serving");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    writer.abort();
    let s = state.clone();
    tokio::task::spawn_blocking(move || {
        s.run_pending();
        s.flush();
    })
    .await?;
    Ok(())
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

async fn ingest(
    State(state): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, "body is not UTF-8 text".into()))?;
    match state.enqueue(text) {
        Ok(receipt) => Ok((StatusCode::ACCEPTED, Json(receipt))),
        Err(queued) => Err(ApiError(
            StatusCode::TOO_MANY_REQUESTS,
            format!("ingest queue full ({queued} records waiting)"),
        )),
    }
}

fn parse_time(key: &str, v: &str) -> Result<i64, ApiError> {
    if let Ok(ms) = v.parse::<i64>() {
        return Ok(ms);
    }
    DateTime::parse_from_rfc3339(v)
        .map(|d| d.timestamp_millis())
        .map_err(|_| {
            invalid(format!(
                "{key}: expected epoch milliseconds or RFC 3339, got {v:?}"
            ))
        })
}

fn parse_bbox(v: &str) -> Result<BBox, ApiError> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid("bbox: expected minLat,minLon,maxLat,maxLon"))?;
    let [a, b, c, d] = parts[..] else {
        return Err(invalid("bbox: expected four numbers"));
    };
    BBox::new(a, b, c, d).map_err(|e| invalid(format!("bbox: {e}")))
}

/// Builds a query from URL parameters: `zoom`, `bbox`, `from`, `to`,
/// `keyword`, `limit`, `history`.
pub fn query_from_params(params: &HashMap<String, String>) -> Result<EoIQuery, String> {
    query_params(params).map_err(|e| e.1)
}

fn query_params(params: &HashMap<String, String>) -> Result<EoIQuery, ApiError> {
    let zoom = match params.get("zoom") {
        Some(z) => z
            .parse::<u8>()
            .map_err(|_| invalid(format!("zoom: not an integer: {z:?}")))?,
        None => 0,
    };
    let bbox = match params.get("bbox") {
        Some(b) => parse_bbox(b)?,
        None => BBox::WORLD,
    };
    let from = params
        .get("from")
        .map(|v| parse_time("from", v))
        .transpose()?
        .unwrap_or(i64::MIN);
    let to = params
        .get("to")
        .map(|v| parse_time("to", v))
        .transpose()?
        .unwrap_or(i64::MAX);
    let mut q = EoIQuery::new(zoom, bbox, TimeRange { from, to });
    q.keyword = params.get("keyword").cloned();
    if let Some(l) = params.get("limit") {
        q.limit = l
            .parse()
            .map_err(|_| invalid(format!("limit: not an integer: {l:?}")))?;
    }
    if let Some(h) = params.get("history") {
        q.include_history = match h.as_str() {
            "1" | "true" | "yes" => true,
            "0" | "false" | "no" => false,
            _ => {
                return Err(invalid(format!(
                    "history: expected true or false, got {h:?}"
                )))
            }
        };
    }
    q.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(q)
}

fn plan_for(state: &AppState, published: &Published, q: &EoIQuery) -> Result<QueryPlan, ApiError> {
    let ctx = published.plan_context(&state.scope, state.settings.max_cover_cells);
    plan(q, &ctx).map_err(|e| invalid(e.to_string()))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn eois(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Vec<EoiRecord>>, ApiError> {
    let q = query_params(&params)?;
    let published = state.published();
    let p = plan_for(&state, &published, &q)?;
    let hits = execute(&p, &published.eois, state.history()).map_err(internal)?;
    Ok(Json(hits.iter().map(|c| c.to_record()).collect()))
}

#[derive(Serialize)]
struct CloudTerm {
    term: String,
    weight: f64,
}

async fn tagcloud(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Vec<CloudTerm>>, ApiError> {
    let q = query_params(&params)?;
    let k = match params.get("k") {
        Some(k) => k
            .parse::<usize>()
            .map_err(|_| invalid(format!("k: not an integer: {k:?}")))?,
        None => state.settings.default_tagcloud_k,
    };
    let published = state.published();
    let p = plan_for(&state, &published, &q)?;
    let cloud = tag_cloud(&p, &published.eois, state.history(), k).map_err(internal)?;
    Ok(Json(
        cloud
            .into_iter()
            .map(|(term, weight)| CloudTerm { term, weight })
            .collect(),
    ))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let p = state.published();
    let totals = state.totals.lock().expect("totals lock").clone();
    Json(json!({
        "version": p.version,
        "now": p.now,
        "livePackets": p.live_packets,
        "eois": p.eois.len(),
        "rootEois": p.eois.iter().filter(|c| c.is_root()).count(),
        "queued": state.queued(),
        "availableDays": p.available_days.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
        "lastWindow": p.last_stats,
        "totals": totals,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": state.published().version }))
}
