//! Teaching-session protocol over HTTP.
//!
//! `POST /sessions` starts a session; `POST /sessions/{id}/messages` sends a
//! client message and answers with the server messages it caused; the same
//! server messages are pushed on `GET /sessions/{id}/events` (server-sent
//! events) and can be polled from `GET /sessions/{id}/messages?after=N`.
//! Every message carries the session id and a per-direction sequence number.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use situ_core::config::RunConfig;
use situ_core::demos::{DemoFile, DemoKind, Demonstration, Keyframe, Pose2, WorldState};
use situ_core::model::{NodeId, TaskModel};
use situ_core::sim::{execute, ExecEvent, Outcome, Scenario, SimEvent, World, WORLD_NOISE};
use situ_core::situ::{EditKind, EditRecord, RefitCounters, Updater};
use tokio::sync::broadcast;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type")]
pub enum ClientBody {
    #[serde(rename = "world.state")]
    WorldState,
    #[serde(rename = "demo.keyframe")]
    Keyframe { pose: Pose2, gripper: f64, reference: String },
    #[serde(rename = "demo.commit")]
    Commit { kind: DemoKind },
    #[serde(rename = "exec.start")]
    ExecStart { seed: u64 },
    #[serde(rename = "model.graph")]
    Graph,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClientMessage {
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ClientBody,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StartRequest {
    #[serde(rename = "type")]
    pub kind: String,
    pub scenario: String,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type")]
pub enum ServerBody {
    #[serde(rename = "session.started")]
    Started {
        scenario: String,
        variant: String,
        layout: Vec<String>,
        config_hash: String,
    },
    #[serde(rename = "world.state")]
    World {
        world: World,
        state: WorldState,
        pending_keyframes: usize,
    },
    #[serde(rename = "demo.keyframe")]
    KeyframeAccepted {
        index: usize,
        keyframe: Keyframe,
        effects: Vec<SimEvent>,
    },
    #[serde(rename = "model.update_result")]
    UpdateResult {
        demo_id: String,
        from_node: NodeId,
        edits: Vec<EditRecord>,
        edit_kinds: Vec<EditKind>,
        refit_counts: RefitCounters,
    },
    #[serde(rename = "model.graph")]
    Graph { dot: String, sha256: String },
    #[serde(rename = "exec.event")]
    Exec { seed: u64, event: ExecEvent },
    #[serde(rename = "exec.result")]
    ExecResult {
        seed: u64,
        completed: bool,
        goal_met: bool,
        failure: Option<FailurePoint>,
    },
}

/// Where a correction would attach after a failed execution.
#[derive(Debug, Clone, Serialize)]
pub struct FailurePoint {
    pub node: NodeId,
    pub state: WorldState,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServerMessage {
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

struct Session {
    id: String,
    scenario: Scenario,
    variant: String,
    world: World,
    keyframes: Vec<Keyframe>,
    model: TaskModel,
    /// Node and world a corrective commit attaches to.
    failure: Option<(NodeId, World)>,
    commits: Vec<DemoFile>,
    client_seq: u64,
    log: Vec<ServerMessage>,
    tx: broadcast::Sender<ServerMessage>,
}

impl Session {
    fn emit(&mut self, body: ServerBody, out: &mut Vec<ServerMessage>) {
        let msg = ServerMessage {
            session: self.id.clone(),
            seq: self.log.len() as u64 + 1,
            body,
        };
        self.log.push(msg.clone());
        // No subscribers is fine; polling still sees the log.
        let _ = self.tx.send(msg.clone());
        out.push(msg);
    }

    fn world_body(&self) -> ServerBody {
        ServerBody::World {
            world: self.world.clone(),
            state: self.world.capture(),
            pending_keyframes: self.keyframes.len(),
        }
    }

    fn graph_body(&self) -> ServerBody {
        let dot = self.model.to_dot();
        ServerBody::Graph {
            sha256: hex(&Sha256::digest(dot.as_bytes())),
            dot,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Hub {
    config: RunConfig,
    updater: Updater,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: Mutex<u64>,
}

type Shared = Arc<Hub>;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<situ_core::error::Error> for ApiError {
    fn from(e: situ_core::error::Error) -> Self {
        let code = match e {
            situ_core::error::Error::Consistency(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(config: RunConfig) -> Router {
    let hub = Arc::new(Hub {
        updater: Updater::new(config.learn),
        config,
        sessions: Mutex::new(HashMap::new()),
        next_id: Mutex::new(1),
    });
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(start))
        .route("/sessions/{id}/messages", post(message).get(poll))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/demos/{n}", get(demo_file))
        .with_state(hub)
}

async fn health(State(hub): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "config_hash": hub.config.hash() }))
}

fn session(hub: &Hub, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    hub.sessions
        .lock()
        .expect("session table lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no session `{id}`")))
}

async fn start(State(hub): State<Shared>, Json(req): Json<StartRequest>) -> Result<(StatusCode, Json<Vec<ServerMessage>>), ApiError> {
    if req.kind != "session.start" {
        return Err(bad(format!("expected session.start, got {}", req.kind)));
    }
    let scenario = Scenario::resolve(&req.scenario)?;
    let variant = req.variant.unwrap_or_else(|| situ_core::sim::BASE_VARIANT.to_string());
    let world = scenario.initial_world(&variant, 0.0, 0)?;
    let id = {
        let mut n = hub.next_id.lock().expect("id lock");
        let id = format!("s{n}");
        *n += 1;
        id
    };
    let (tx, _) = broadcast::channel(1024);
    let mut s = Session {
        id: id.clone(),
        model: TaskModel::new(scenario.layout()),
        variant: variant.clone(),
        world,
        keyframes: Vec::new(),
        failure: None,
        commits: Vec::new(),
        client_seq: 0,
        log: Vec::new(),
        tx,
        scenario,
    };
    let mut out = Vec::new();
    let started = ServerBody::Started {
        scenario: s.scenario.name.clone(),
        variant,
        layout: s.scenario.layout(),
        config_hash: hub.config.hash(),
    };
    s.emit(started, &mut out);
    let w = s.world_body();
    s.emit(w, &mut out);
    let g = s.graph_body();
    s.emit(g, &mut out);
    hub.sessions.lock().expect("session table lock").insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn message(
    State(hub): State<Shared>,
    Path(id): Path<String>,
    Json(msg): Json<ClientMessage>,
) -> Result<Json<Vec<ServerMessage>>, ApiError> {
    if msg.session != id {
        return Err(bad(format!("message for session `{}` posted to `{id}`", msg.session)));
    }
    let s = session(&hub, &id)?;
    // Updates and rollouts are CPU-bound; keep them off the async workers.
    let out = tokio::task::spawn_blocking(move || {
        let mut s = s.lock().expect("session lock");
        handle(&hub, &mut s, msg)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

fn handle(hub: &Hub, s: &mut Session, msg: ClientMessage) -> Result<Vec<ServerMessage>, ApiError> {
    if msg.seq <= s.client_seq {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("sequence number {} does not follow {}", msg.seq, s.client_seq),
        ));
    }
    s.client_seq = msg.seq;
    let mut out = Vec::new();
    match msg.body {
        ClientBody::WorldState => {
            let w = s.world_body();
            s.emit(w, &mut out);
        }
        ClientBody::Graph => {
            let g = s.graph_body();
            s.emit(g, &mut out);
        }
        ClientBody::Keyframe { pose, gripper, reference } => {
            if s.world.object(&reference).is_none() {
                return Err(bad(format!("unknown reference object `{reference}`")));
            }
            let before = s.world.capture();
            let effects = s.world.step_to(pose, gripper).map_err(|f| bad(f.to_string()))?;
            let keyframe = Keyframe {
                ee_pose: pose,
                gripper: s.world.gripper,
                reference_object: reference,
                world: before,
                timestamp: s.keyframes.len() as u64,
            };
            s.keyframes.push(keyframe.clone());
            let index = s.keyframes.len() - 1;
            s.emit(ServerBody::KeyframeAccepted { index, keyframe, effects }, &mut out);
        }
        ClientBody::Commit { kind } => {
            if s.keyframes.is_empty() {
                return Err(bad("nothing to commit"));
            }
            let from = match kind {
                DemoKind::Full => s.model.start_id,
                DemoKind::Corrective => s
                    .failure
                    .as_ref()
                    .map(|f| f.0)
                    .ok_or_else(|| bad("a corrective demonstration needs a failed execution first"))?,
            };
            let demo = Demonstration {
                demo_id: format!("{}-{}", s.id, s.commits.len() + 1),
                kind,
                keyframes: std::mem::take(&mut s.keyframes),
            };
            let outcome = hub.updater.situ_demo(&mut s.model, from, &demo)?;
            s.model.check_consistency()?;
            s.commits.push(DemoFile::new(&s.scenario.name, demo.clone()));
            s.failure = None;
            s.world = s.scenario.initial_world(&s.variant, 0.0, 0)?;
            let result = ServerBody::UpdateResult {
                demo_id: demo.demo_id,
                from_node: from,
                edit_kinds: outcome.kinds().into_iter().collect(),
                edits: outcome.edits,
                refit_counts: outcome.counters,
            };
            s.emit(result, &mut out);
            let g = s.graph_body();
            s.emit(g, &mut out);
            let w = s.world_body();
            s.emit(w, &mut out);
        }
        ClientBody::ExecStart { seed } => {
            if !s.keyframes.is_empty() {
                return Err(bad("commit or discard the pending demonstration first"));
            }
            let world = s.scenario.initial_world(&s.variant, WORLD_NOISE, seed)?;
            let trace = execute(&s.model, world, hub.config.learn.theta, seed)?;
            for event in trace.events.iter().cloned() {
                s.emit(ServerBody::Exec { seed, event }, &mut out);
            }
            let goal_met = s.scenario.goal_met(trace.final_world());
            let completed = trace.completed();
            let node = match &trace.outcome {
                Outcome::Failure { node, .. } => Some(*node),
                Outcome::Success if !goal_met => trace.visited.last().copied(),
                Outcome::Success => None,
            };
            let failure = node.map(|n| FailurePoint {
                node: n,
                state: trace.final_world().capture(),
            });
            s.failure = node.map(|n| (n, trace.final_world().clone()));
            // Correction mode starts from the failure state.
            s.world = match &s.failure {
                Some((_, w)) => w.clone(),
                None => s.scenario.initial_world(&s.variant, 0.0, 0)?,
            };
            s.emit(
                ServerBody::ExecResult {
                    seed,
                    completed,
                    goal_met,
                    failure,
                },
                &mut out,
            );
            let w = s.world_body();
            s.emit(w, &mut out);
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct After {
    #[serde(default)]
    after: u64,
}

async fn poll(
    State(hub): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<After>,
) -> Result<Json<Vec<ServerMessage>>, ApiError> {
    let s = session(&hub, &id)?;
    let s = s.lock().expect("session lock");
    Ok(Json(s.log.iter().filter(|m| m.seq > q.after).cloned().collect()))
}

async fn events(
    State(hub): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<After>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let s = session(&hub, &id)?;
    // Snapshot and subscribe under one lock so nothing falls between them.
    let (backlog, rx) = {
        let s = s.lock().expect("session lock");
        let backlog: Vec<ServerMessage> = s.log.iter().filter(|m| m.seq > q.after).cloned().collect();
        (backlog, s.tx.subscribe())
    };
    let last = backlog.last().map(|m| m.seq).unwrap_or(q.after);
    let live = stream::unfold((rx, last), |(mut rx, last)| async move {
        loop {
            match rx.recv().await {
                Ok(m) if m.seq <= last => continue,
                Ok(m) => {
                    let seq = m.seq;
                    return Some((m, (rx, seq)));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let all = stream::iter(backlog).chain(live).map(|m| {
        Ok(Event::default()
            .id(m.seq.to_string())
            .event(event_name(&m.body))
            .data(serde_json::to_string(&m).expect("message serializes")))
    });
    Ok(Sse::new(all).keep_alive(KeepAlive::default()))
}

fn event_name(body: &ServerBody) -> &'static str {
    match body {
        ServerBody::Started { .. } => "session.started",
        ServerBody::World { .. } => "world.state",
        ServerBody::KeyframeAccepted { .. } => "demo.keyframe",
        ServerBody::UpdateResult { .. } => "model.update_result",
        ServerBody::Graph { .. } => "model.graph",
        ServerBody::Exec { .. } => "exec.event",
        ServerBody::ExecResult { .. } => "exec.result",
    }
}

/// A committed demonstration exactly as the CLI would read it from disk.
async fn demo_file(State(hub): State<Shared>, Path((id, n)): Path<(String, usize)>) -> Result<String, ApiError> {
    let s = session(&hub, &id)?;
    let s = s.lock().expect("session lock");
    n.checked_sub(1)
        .and_then(|i| s.commits.get(i))
        .map(DemoFile::to_text)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("session `{id}` has no demonstration {n}")))
}
