//! HTTP JSON API over an archive directory. See `docs/api.md`.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use catos_core::analytics::{self, AnalyticsError, SessionStats};
use catos_core::archive::{self, ArchiveError, SessionIndex};
use catos_core::schema::{self, SchemaConfig};
use catos_core::vision::MovementRecordRow;

/// Where the config for the next session lives inside the archive root.
pub const SCHEMA_CONFIG_FILE: &str = "next_schema_config.json";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": msg.into() }),
        }
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }

    fn bad_request(msg: impl Into<String>, errors: Vec<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": msg.into(), "errors": errors }),
        }
    }

    fn internal(msg: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::MissingSession(_) => Self::not_found(e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl From<ArchiveError> for ApiError {
    fn from(e: ArchiveError) -> Self {
        Self::internal(e)
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct AppState {
    root: PathBuf,
    // serializes schema-config writes
    write_lock: Mutex<()>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionListItem {
    pub start_datetime: String,
    pub duration_ms: u64,
    #[serde(flatten)]
    pub stats: SessionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDetail {
    pub index: SessionIndex,
    pub stats: SessionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsView {
    pub session_id: String,
    pub stimulus_to_button: [u8; 3],
    pub results: Vec<schema::TrialResult>,
    pub summary: schema::SessionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementView {
    pub session_id: String,
    pub clip_id: String,
    pub camera_id: u8,
    pub width: u32,
    pub height: u32,
    pub start_ms: u64,
    pub end_ms: u64,
    pub rows: Vec<MovementRecordRow>,
}

/// Body of GET and PUT `/api/schema-config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VersionedSchemaConfig {
    /// Bumped on every successful PUT; a PUT must carry the current value.
    pub version: u64,
    pub config: SchemaConfig,
}

pub fn router(archive_root: PathBuf) -> Router {
    let state = Arc::new(AppState {
        root: archive_root,
        write_lock: Mutex::new(()),
    });
    Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(session_detail))
        .route("/api/sessions/{id}/trials", get(session_trials))
        .route("/api/sessions/{id}/movement/{clip}", get(clip_movement))
        .route("/api/performance", get(performance))
        .route("/api/schema-config", get(get_schema_config).put(put_schema_config))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(archive_root: PathBuf, addr: SocketAddr) -> io::Result<()> {
    if !archive_root.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("archive root {} is not a directory", archive_root.display()),
        ));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(archive_root))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn session_dir(root: &Path, id: &str) -> Result<PathBuf, ApiError> {
    let dir = root.join(id);
    if archive::is_session_id(id) && dir.join(archive::INDEX_FILE).is_file() {
        Ok(dir)
    } else {
        Err(ApiError::not_found(format!("unknown session {id}")))
    }
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult<Vec<SessionListItem>> {
    let mut out = Vec::new();
    for id in archive::list_sessions(&st.root)? {
        let dir = st.root.join(&id);
        let index = archive::read_index(&dir)?;
        out.push(SessionListItem {
            start_datetime: index.start_datetime,
            duration_ms: index.duration_ms,
            stats: analytics::session_stats(&dir)?,
        });
    }
    Ok(Json(out))
}

async fn session_detail(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionDetail> {
    let dir = session_dir(&st.root, &id)?;
    Ok(Json(SessionDetail {
        index: archive::read_index(&dir)?,
        stats: analytics::session_stats(&dir)?,
    }))
}

async fn session_trials(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<TrialsView> {
    let dir = session_dir(&st.root, &id)?;
    let index = archive::read_index(&dir)?;
    let path = dir.join(&index.results_file);
    let text = std::fs::read_to_string(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    let file = schema::parse_results_csv(&text).map_err(ApiError::internal)?;
    let summary = file
        .summary
        .ok_or_else(|| ApiError::internal(format!("{}: no summary line", path.display())))?;
    Ok(Json(TrialsView {
        session_id: index.session_id,
        stimulus_to_button: index.stimulus_to_button,
        results: file.results,
        summary,
    }))
}

async fn clip_movement(
    State(st): State<Arc<AppState>>,
    UrlPath((id, clip)): UrlPath<(String, String)>,
) -> ApiResult<MovementView> {
    let dir = session_dir(&st.root, &id)?;
    let index = archive::read_index(&dir)?;
    let rows = archive::clip_movement_rows(&dir, &index, &clip)?
        .ok_or_else(|| ApiError::not_found(format!("unknown clip {clip} in session {id}")))?;
    let entry = index.clips.iter().find(|c| c.id == clip).expect("clip found above");
    let cam = index
        .cameras
        .iter()
        .find(|c| c.camera_id == entry.camera_id)
        .ok_or_else(|| ApiError::internal(format!("clip {clip} from unknown camera")))?;
    Ok(Json(MovementView {
        session_id: index.session_id.clone(),
        clip_id: clip.clone(),
        camera_id: entry.camera_id,
        width: cam.width,
        height: cam.height,
        start_ms: entry.start_ms,
        end_ms: entry.end_ms,
        rows,
    }))
}

#[derive(Debug, Deserialize)]
struct PerformanceQuery {
    ids: Option<String>,
}

async fn performance(
    State(st): State<Arc<AppState>>,
    Query(q): Query<PerformanceQuery>,
) -> ApiResult<Vec<SessionStats>> {
    let ids: Vec<String> = q
        .ids
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(ApiError::bad_request("ids query parameter is required", vec![]));
    }
    Ok(Json(analytics::performance_series(&st.root, &ids)?))
}

fn read_schema_config(root: &Path) -> Result<VersionedSchemaConfig, ApiError> {
    let path = root.join(SCHEMA_CONFIG_FILE);
    match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(VersionedSchemaConfig {
            version: 0,
            config: SchemaConfig::default(),
        }),
        Err(e) => Err(ApiError::internal(format!("{}: {e}", path.display()))),
    }
}

async fn get_schema_config(State(st): State<Arc<AppState>>) -> ApiResult<VersionedSchemaConfig> {
    Ok(Json(read_schema_config(&st.root)?))
}

async fn put_schema_config(State(st): State<Arc<AppState>>, body: String) -> ApiResult<VersionedSchemaConfig> {
    let doc: VersionedSchemaConfig = serde_json::from_str(&body)
        .map_err(|e| ApiError::bad_request("malformed schema config", vec![e.to_string()]))?;
    let errors = doc.config.validate();
    if !errors.is_empty() {
        return Err(ApiError::bad_request("invalid schema config", errors));
    }
    let _guard = st.write_lock.lock().await;
    let current = read_schema_config(&st.root)?;
    if doc.version != current.version {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": format!("version {} is stale; current version is {}", doc.version, current.version),
                "current_version": current.version,
            }),
        });
    }
    let next = VersionedSchemaConfig {
        version: current.version + 1,
        config: doc.config,
    };
    let path = st.root.join(SCHEMA_CONFIG_FILE);
    let tmp = st.root.join(format!("{SCHEMA_CONFIG_FILE}.tmp"));
    let text = serde_json::to_string_pretty(&next).expect("config serializes") + "\n";
    std::fs::write(&tmp, text)
        .and_then(|()| std::fs::rename(&tmp, &path))
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(Json(next))
}
