//! Local HTTP service over an output directory, backing the annotation
//! client.
//!
//! | method | path                                      | body                         |
//! |--------|-------------------------------------------|------------------------------|
//! | GET    | `/api/sessions`                           | session index                |
//! | GET    | `/api/sessions/{pid}/{sid}/eda`           | 10 Hz series and SCR markers |
//! | GET    | `/api/sessions/{pid}/{sid}/trajectory`    | frames, events, geometry     |
//! | GET    | `/api/taxonomy`                           | label set                    |
//! | GET    | `/api/annotations[?participant_id&session_id&coder_id]` | records        |
//! | POST   | `/api/annotations`                        | `{"records": [...]}`         |
//!
//! Writes are validated as a whole batch against the taxonomy and the
//! detected SCRs; one bad field rejects the batch with a 422 listing every
//! problem, and nothing is written. Accepted batches are applied one at a
//! time and land in `annotations.csv` through a temporary file and rename.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use super::bundle::{read_text, SessionKey, ANNOTATIONS_FILE, EVENTS_FILE, TRAJECTORY_FILE};
use super::config::PipelineConfig;
use super::report::{SessionSummary, CONFIG_FILE, DECOMPOSITION_FILE, INDEX_FILE, SCR_TABLE_FILE};
use crate::annotation::{AnnotationRecord, AnnotationStore};
use crate::decomposition::read_decomposition_csv;
use crate::error::{Error, Result};
use crate::scr::read_scr_table;
use crate::segmentation::Trajectory;
use crate::simulator::read_events_csv;
use crate::util::open;

struct ServiceState {
    dir: PathBuf,
    config: PipelineConfig,
    sessions: Vec<SessionSummary>,
    /// Serializes annotation writes.
    write_lock: Mutex<()>,
}

/// One rejected field of a write batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    /// Position of the record in the batch; `None` for the body itself.
    pub index: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

/// Router over the output directory `dir`.
pub fn router(dir: &Path) -> Result<Router> {
    let config = PipelineConfig::from_toml(&read_text(&dir.join(CONFIG_FILE))?)?;
    let sessions: Vec<SessionSummary> = serde_json::from_str(&read_text(&dir.join(INDEX_FILE))?)
        .map_err(|e| Error::format(INDEX_FILE, e.to_string()))?;
    if !dir.join(ANNOTATIONS_FILE).exists() {
        write_store(dir, &AnnotationStore::new())?;
    }
    let state = Arc::new(ServiceState { dir: dir.to_path_buf(), config, sessions, write_lock: Mutex::new(()) });
    Ok(Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{pid}/{sid}/eda", get(session_eda))
        .route("/api/sessions/{pid}/{sid}/trajectory", get(session_trajectory))
        .route("/api/taxonomy", get(taxonomy))
        .route("/api/annotations", get(list_annotations).post(write_annotations))
        .with_state(state))
}

/// Serves `dir` on `127.0.0.1:port` until the process is stopped.
pub fn serve_sessions(dir: &Path, port: u16) -> Result<()> {
    let app = router(dir)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("serving {} on http://{addr}", dir.display());
        axum::serve(listener, app).await.map_err(|e| Error::io(addr.to_string(), e))
    })
}

type Shared = State<Arc<ServiceState>>;

fn failure(status: StatusCode, message: impl Into<String>) -> Response {
    let errors = [FieldError { index: None, field: None, message: message.into() }];
    (status, Json(json!({ "errors": errors }))).into_response()
}

fn internal(e: Error) -> Response {
    failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

impl ServiceState {
    #[allow(clippy::result_large_err)] // the error is the finished response
    fn session(&self, pid: &str, sid: &str) -> std::result::Result<&SessionSummary, Response> {
        self.sessions
            .iter()
            .find(|s| s.participant_id == pid && s.session_id == sid)
            .ok_or_else(|| failure(StatusCode::NOT_FOUND, format!("no session {pid}/{sid}")))
    }
}

async fn list_sessions(State(st): Shared) -> Json<Vec<SessionSummary>> {
    Json(st.sessions.clone())
}

async fn taxonomy(State(st): Shared) -> Response {
    Json(&st.config.taxonomy).into_response()
}

async fn session_eda(State(st): Shared, UrlPath((pid, sid)): UrlPath<(String, String)>) -> Response {
    if let Err(r) = st.session(&pid, &sid) {
        return r;
    }
    let dir = SessionKey::new(&pid, &sid).dir(&st.dir);
    let load = || -> Result<Value> {
        let d = read_decomposition_csv(open(&dir.join(DECOMPOSITION_FILE))?)?;
        let rows = read_scr_table(open(&dir.join(SCR_TABLE_FILE))?)?;
        let scrs: Vec<Value> = rows
            .iter()
            .map(|r| {
                json!({
                    "detected_scr_no": r.detected_scr_no,
                    "onset_unix": r.scr_onset_unix,
                    "unix": r.unix,
                    "amplitude": r.scr_amplitude,
                    "amp_class": r.amp_class,
                    "t_score": r.scr_t,
                    "position": r.position.map(|p| p.id()),
                    "annotation": r.annotation,
                })
            })
            .collect();
        Ok(json!({
            "participant_id": pid,
            "session_id": sid,
            "t": d.t,
            "sc": d.sc,
            "tonic": d.tonic,
            "phasic": d.phasic,
            "driver": d.driver,
            "scrs": scrs,
        }))
    };
    match load() {
        Ok(v) => Json(v).into_response(),
        Err(e) => internal(e),
    }
}

async fn session_trajectory(State(st): Shared, UrlPath((pid, sid)): UrlPath<(String, String)>) -> Response {
    let summary = match st.session(&pid, &sid) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let dir = SessionKey::new(&pid, &sid).dir(&st.dir);
    let load = || -> Result<Value> {
        let traj = Trajectory::read_csv(open(&dir.join(TRAJECTORY_FILE))?, &sid)?;
        let events_path = dir.join(EVENTS_FILE);
        let events = if events_path.exists() { read_events_csv(open(&events_path)?)? } else { Vec::new() };
        Ok(json!({
            "participant_id": pid,
            "session_id": sid,
            "geometry": st.config.geometry.for_session(summary.scenario.median),
            "frames": traj.samples,
            "events": events,
        }))
    };
    match load() {
        Ok(v) => Json(v).into_response(),
        Err(e) => internal(e),
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationQuery {
    participant_id: Option<String>,
    session_id: Option<String>,
    coder_id: Option<String>,
}

async fn list_annotations(State(st): Shared, Query(q): Query<AnnotationQuery>) -> Response {
    let _guard = st.write_lock.lock().await;
    let store = match read_store(&st.dir) {
        Ok(s) => s,
        Err(e) => return internal(e),
    };
    let keep = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
    let records: Vec<&AnnotationRecord> = store
        .records()
        .iter()
        .filter(|r| keep(&q.participant_id, &r.participant_id))
        .filter(|r| keep(&q.session_id, &r.session_id))
        .filter(|r| keep(&q.coder_id, &r.coder_id))
        .collect();
    Json(json!({ "records": records })).into_response()
}

async fn write_annotations(State(st): Shared, body: Bytes) -> Response {
    let parsed: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return failure(StatusCode::BAD_REQUEST, format!("body is not JSON: {e}")),
    };
    let Some(items) = parsed.get("records").and_then(Value::as_array) else {
        let errors = [FieldError { index: None, field: Some("records".into()), message: "expected an array".into() }];
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response();
    };
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64);
    let (records, errors) = validate_batch(&st, items, now);
    if !errors.is_empty() {
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response();
    }

    let _guard = st.write_lock.lock().await;
    let result = read_store(&st.dir).and_then(|mut store| {
        for r in &records {
            store.upsert(r.clone());
        }
        write_store(&st.dir, &store)?;
        Ok(store.len())
    });
    match result {
        Ok(total) => Json(json!({ "written": records.len(), "total": total, "records": records })).into_response(),
        Err(e) => internal(e),
    }
}

/// Checks every field of every record; labels are stored in canonical form.
fn validate_batch(st: &ServiceState, items: &[Value], now: i64) -> (Vec<AnnotationRecord>, Vec<FieldError>) {
    let n_scrs: BTreeMap<(&str, &str), usize> = st
        .sessions
        .iter()
        .map(|s| ((s.participant_id.as_str(), s.session_id.as_str()), s.n_scrs))
        .collect();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let mut err = |field: &str, message: String| {
            errors.push(FieldError { index: Some(i), field: Some(field.into()), message });
        };
        let text = |field: &str| item.get(field).and_then(Value::as_str).filter(|s| !s.trim().is_empty());
        let pid = text("participant_id");
        let sid = text("session_id");
        let coder = text("coder_id");
        let label = text("label");
        if pid.is_none() {
            err("participant_id", "required non-empty string".into());
        }
        if sid.is_none() {
            err("session_id", "required non-empty string".into());
        }
        if coder.is_none() {
            err("coder_id", "required non-empty string".into());
        }
        let session = pid.zip(sid).and_then(|k| n_scrs.get(&k).copied());
        if pid.is_some() && sid.is_some() && session.is_none() {
            err("session_id", format!("no session {}/{}", pid.unwrap_or(""), sid.unwrap_or("")));
        }
        let no = item.get("detected_scr_no").and_then(Value::as_u64);
        match (no, session) {
            (None, _) => err("detected_scr_no", "required positive integer".into()),
            (Some(n), Some(count)) if n == 0 || n > count as u64 => {
                err("detected_scr_no", format!("session has SCRs 1..={count}, got {n}"))
            }
            _ => {}
        }
        let mark = match label {
            None => {
                err("label", "required non-empty string".into());
                None
            }
            Some(l) => match st.config.taxonomy.resolve_mark(l) {
                Ok(m) => Some(m),
                Err(e) => {
                    err("label", e.to_string());
                    None
                }
            },
        };
        let created = match item.get("created_at_unix") {
            None | Some(Value::Null) => Some(now),
            Some(v) => v.as_i64().or_else(|| {
                err("created_at_unix", "expected an integer".into());
                None
            }),
        };
        if let (Some(pid), Some(sid), Some(coder), Some(no), Some(mark), Some(created), Some(_)) =
            (pid, sid, coder, no, mark, created, session)
        {
            records.push(AnnotationRecord {
                participant_id: pid.to_string(),
                session_id: sid.to_string(),
                detected_scr_no: no as u32,
                label: mark.to_string(),
                coder_id: coder.to_string(),
                created_at_unix: created,
            });
        }
    }
    if !errors.is_empty() {
        records.clear();
    }
    (records, errors)
}

fn read_store(dir: &Path) -> Result<AnnotationStore> {
    AnnotationStore::read(open(&dir.join(ANNOTATIONS_FILE))?)
}

fn write_store(dir: &Path, store: &AnnotationStore) -> Result<()> {
    let path = dir.join(ANNOTATIONS_FILE);
    let tmp = dir.join(format!(".{ANNOTATIONS_FILE}.tmp"));
    let mut buf = Vec::new();
    store.write(&mut buf)?;
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}
