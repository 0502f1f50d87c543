//! Teaching-session protocol, driven in-process through the router.

use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use situ_cli::server::router;
use situ_core::config::RunConfig;
use situ_core::demos::{DemoFile, DemoKind, Demonstration, Pose2};
use situ_core::sim::{generate_demo, Scenario, World};
use tower::ServiceExt;

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn types(msgs: &Value) -> Vec<&str> {
    msgs.as_array().unwrap().iter().map(|m| m["type"].as_str().unwrap()).collect()
}

fn sha(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// A client session with its own sequence counter.
struct Client {
    app: Router,
    id: String,
    seq: u64,
}

impl Client {
    async fn start(app: &Router, scenario: &str, variant: &str) -> (Client, Value) {
        let (status, msgs) = json_call(
            app,
            "POST",
            "/sessions",
            Some(json!({ "type": "session.start", "scenario": scenario, "variant": variant })),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED, "{msgs}");
        let id = msgs[0]["session"].as_str().unwrap().to_string();
        (Client { app: app.clone(), id, seq: 0 }, msgs)
    }

    async fn post(&mut self, body: Value) -> (StatusCode, Value) {
        self.seq += 1;
        let mut msg = body;
        msg["session"] = json!(self.id);
        msg["seq"] = json!(self.seq);
        json_call(&self.app, "POST", &format!("/sessions/{}/messages", self.id), Some(msg)).await
    }

    /// Demonstrates `variant`'s script segments from `world`, which tracks the server's.
    async fn demonstrate(&mut self, scenario: &Scenario, variant: &str, from: usize, world: &mut World) {
        for seg in &scenario.variant(variant).unwrap().script[from..] {
            for k in &seg.keyframes {
                let pose = world.pose(&seg.reference).unwrap().compose(&Pose2::new(k[0], k[1], k[2]));
                world.step_to(pose, k[3]).unwrap();
                let (status, msgs) = self
                    .post(json!({ "type": "demo.keyframe", "pose": pose, "gripper": k[3], "reference": seg.reference }))
                    .await;
                assert_eq!(status, StatusCode::OK, "{msgs}");
                assert_eq!(types(&msgs), ["demo.keyframe"]);
            }
        }
    }
}

#[tokio::test]
async fn health_reports_the_config_hash() {
    let cfg = RunConfig::default();
    let app = router(cfg.clone());
    let (status, body) = json_call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["config_hash"], cfg.hash());
}

#[tokio::test]
async fn browser_demo_matches_cli_ingestion() {
    let app = router(RunConfig::default());
    let s = Scenario::builtin("pour").unwrap();
    let (mut c, started) = Client::start(&app, "pour", "base").await;
    assert_eq!(types(&started), ["session.started", "world.state", "model.graph"]);

    let mut world = s.initial_world("base", 0.0, 0).unwrap();
    c.demonstrate(&s, "base", 0, &mut world).await;
    let (status, msgs) = c.post(json!({ "type": "demo.commit", "kind": "full" })).await;
    assert_eq!(status, StatusCode::OK, "{msgs}");
    assert_eq!(types(&msgs), ["model.update_result", "model.graph", "world.state"]);
    assert!(msgs[0]["edit_kinds"].as_array().unwrap().contains(&json!("node_addition")));
    let graph = &msgs[1];
    assert_eq!(graph["sha256"], sha(graph["dot"].as_str().unwrap()));

    // The committed file equals the scripted demonstration under the session's id.
    let (status, text) = send(&app, "GET", &format!("/sessions/{}/demos/1", c.id), None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(text).unwrap();
    let scripted = generate_demo(&s, "base", 0.0, 0).unwrap();
    let expected = DemoFile::new(
        "pour",
        Demonstration {
            demo_id: format!("{}-1", c.id),
            kind: DemoKind::Full,
            keyframes: scripted.keyframes,
        },
    );
    assert_eq!(text, expected.to_text());

    // Building from that file with the CLI yields the graph the session reported.
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo.json");
    let model = dir.path().join("model.json");
    std::fs::write(&demo, &text).unwrap();
    let bin = env!("CARGO_BIN_EXE_situ");
    let out = Command::new(bin)
        .args(["build", "--out"])
        .arg(&model)
        .arg(&demo)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dot = Command::new(bin).args(["export-dot", "--model"]).arg(&model).output().unwrap();
    assert_eq!(sha(&String::from_utf8(dot.stdout).unwrap()), graph["sha256"].as_str().unwrap());

    // Polling replays the whole log in order.
    let (_, log) = json_call(&app, "GET", &format!("/sessions/{}/messages?after=0", c.id), None).await;
    let seqs: Vec<u64> = log.as_array().unwrap().iter().map(|m| m["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    let (_, tail) = json_call(&app, "GET", &format!("/sessions/{}/messages?after={}", c.id, seqs.len() - 2), None).await;
    assert_eq!(types(&tail), ["model.graph", "world.state"]);
}

#[tokio::test]
async fn failure_opens_correction_at_the_failure_state() {
    let app = router(RunConfig::default());
    let s = Scenario::builtin("pour").unwrap();
    let (mut c, _) = Client::start(&app, "pour", "lid_on").await;

    // Teach the base motion in the lidded world; pouring through the lid fails.
    let mut world = s.initial_world("lid_on", 0.0, 0).unwrap();
    c.demonstrate(&s, "base", 0, &mut world).await;
    let (status, _) = c.post(json!({ "type": "demo.commit", "kind": "full" })).await;
    assert_eq!(status, StatusCode::OK);

    let (status, msgs) = c.post(json!({ "type": "exec.start", "seed": 4 })).await;
    assert_eq!(status, StatusCode::OK, "{msgs}");
    let kinds = types(&msgs);
    assert_eq!(kinds[kinds.len() - 2..], ["exec.result", "world.state"]);
    assert!(kinds[..kinds.len() - 2].iter().all(|k| *k == "exec.event"));
    let result = &msgs[kinds.len() - 2];
    assert_eq!(result["goal_met"], false);
    let failure = &result["failure"];
    assert!(failure["node"].is_u64(), "{result}");
    let now = &msgs[kinds.len() - 1];
    assert_eq!(now["state"], failure["state"]);

    // The next keyframe is recorded from exactly that state.
    let mut world: World = serde_json::from_value(now["world"].clone()).unwrap();
    let pose = world.ee;
    world.step_to(pose, 0.0).unwrap();
    let (status, kf) = c
        .post(json!({ "type": "demo.keyframe", "pose": pose, "gripper": 0.0, "reference": "pitcher" }))
        .await;
    assert_eq!(status, StatusCode::OK, "{kf}");
    assert_eq!(kf[0]["keyframe"]["world"], failure["state"]);

    let (status, msgs) = c.post(json!({ "type": "demo.commit", "kind": "corrective" })).await;
    assert_eq!(status, StatusCode::OK, "{msgs}");
    assert_eq!(msgs[0]["from_node"], failure["node"]);
}

#[tokio::test]
async fn protocol_errors() {
    let app = router(RunConfig::default());
    let (mut c, _) = Client::start(&app, "scoop", "base").await;

    let (status, _) = c.post(json!({ "type": "demo.commit", "kind": "full" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "empty commit");
    let (status, _) = c
        .post(json!({ "type": "demo.keyframe", "pose": Pose2::origin(), "gripper": 0.0, "reference": "nowhere" }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "unknown reference");

    let ee = Pose2::new(0.0, -0.9, 0.0);
    let (status, _) = c.post(json!({ "type": "demo.keyframe", "pose": ee, "gripper": 0.0, "reference": "spoon" })).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = c.post(json!({ "type": "demo.commit", "kind": "corrective" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "corrective commit without a failure");
    let (status, _) = c.post(json!({ "type": "exec.start", "seed": 0 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "exec with keyframes pending");

    let stale = json!({ "type": "world.state", "session": c.id, "seq": 1 });
    let (status, _) = json_call(&app, "POST", &format!("/sessions/{}/messages", c.id), Some(stale)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let foreign = json!({ "type": "world.state", "session": "other", "seq": 99 });
    let (status, _) = json_call(&app, "POST", &format!("/sessions/{}/messages", c.id), Some(foreign)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = json_call(&app, "GET", "/sessions/nope/messages", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = json_call(&app, "POST", "/sessions", Some(json!({ "type": "session.start", "scenario": "juggle" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, "GET", &format!("/sessions/{}/demos/1", c.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Reads server-sent events until `n` data lines have arrived.
async fn read_events(body: Body, n: usize) -> Vec<Value> {
    let mut body = body;
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let frame = tokio::time::timeout(std::time::Duration::from_secs(10), body.frame())
            .await
            .expect("event stream stalled")
            .expect("event stream ended")
            .unwrap();
        if let Ok(data) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            if let Some(line) = block.lines().find_map(|l| l.strip_prefix("data: ")) {
                out.push(serde_json::from_str(line).unwrap());
            }
        }
    }
    out
}

#[tokio::test]
async fn event_stream_replays_backlog_then_follows() {
    let app = router(RunConfig::default());
    let (mut c, started) = Client::start(&app, "pour", "base").await;
    let req = Request::builder()
        .uri(format!("/sessions/{}/events?after=1", c.id))
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);

    let (status, live) = c.post(json!({ "type": "model.graph" })).await;
    assert_eq!(status, StatusCode::OK);
    let got = read_events(resp.into_body(), 3).await;
    assert_eq!(got[0]["seq"], started[1]["seq"]);
    assert_eq!(got[1]["seq"], started[2]["seq"]);
    assert_eq!(got[2], live[0]);
}
