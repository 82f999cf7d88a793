use std::path::Path;
use std::process::Stdio;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::process::{Child, Command};
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    _child: Child,
    addr: String,
}

async fn serve(extra: &[&str]) -> Server {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut child = Command::new(env!("CARGO_BIN_EXE_telelink"))
        .args(["serve", "scenarios/finals_table2.scn", "--bind", "127.0.0.1:0", "--speed", "10"])
        .args(extra)
        .current_dir(root)
        .stdout(Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let line = timeout(Duration::from_secs(10), lines.next_line()).await.unwrap().unwrap().unwrap();
    let addr = line.strip_prefix("listening on http://").unwrap().to_string();
    Server { _child: child, addr }
}

async fn connect(s: &Server) -> Ws {
    connect_async(format!("ws://{}/feed", s.addr)).await.unwrap().0
}

struct Feed {
    ws: Ws,
    last_seq: u64,
}

impl Feed {
    async fn next(&mut self) -> Value {
        loop {
            let msg = timeout(Duration::from_secs(5), self.ws.next()).await.unwrap().unwrap().unwrap();
            if let Message::Text(t) = msg {
                let v: Value = serde_json::from_str(&t).unwrap();
                let seq = v["seq"].as_u64().unwrap();
                assert!(seq > self.last_seq, "seq not increasing");
                self.last_seq = seq;
                return v;
            }
        }
    }

    async fn next_kind(&mut self, kind: &str) -> Value {
        loop {
            let v = self.next().await;
            if v["kind"] == kind {
                return v;
            }
        }
    }

    async fn command(&mut self, cmd: Value) {
        self.ws.send(Message::Text(cmd.to_string().into())).await.unwrap();
    }

    /// Waits for the Ack or Error naming `id`.
    async fn reply(&mut self, id: u64) -> Value {
        loop {
            let v = self.next().await;
            if (v["kind"] == "Ack" || v["kind"] == "Error") && v["payload"]["command_id"] == id {
                return v;
            }
        }
    }
}

fn flow_mbits(overview: &Value, group: &str, link: &str) -> f64 {
    overview["payload"]["flows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["group"] == group && f["link"] == link)
        .map(|f| f["mbits"].as_f64().unwrap())
        .sum()
}

fn route(overview: &Value, group: &str) -> Value {
    overview["payload"]["routes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["group"] == group)
        .unwrap()["links"]
        .clone()
}

#[tokio::test]
async fn client_gets_full_state_immediately() {
    let s = serve(&[]).await;
    let mut feed = Feed { ws: connect(&s).await, last_seq: 0 };
    let start = tokio::time::Instant::now();
    let first = feed.next().await;
    assert!(start.elapsed() < Duration::from_secs(1));
    assert_eq!(first["kind"], "Overview");
    assert_eq!(first["seq"], 1);
    assert_eq!(first["schema_version"], 1);
    assert_eq!(feed.next().await["kind"], "Checks");
    let safety = feed.next().await;
    assert_eq!(safety["kind"], "Safety");
    assert_eq!(safety["payload"]["estop_engaged"], false);

    // a second connection is independent and starts from a full triple again
    let mut again = Feed { ws: connect(&s).await, last_seq: 0 };
    let kinds: Vec<Value> = [again.next().await, again.next().await, again.next().await]
        .into_iter()
        .map(|m| m["kind"].clone())
        .collect();
    assert_eq!(kinds, [json!("Overview"), json!("Checks"), json!("Safety")]);
}

#[tokio::test]
async fn routing_toggle_is_acked_and_shifts_bands() {
    let s = serve(&[]).await;
    let mut feed = Feed { ws: connect(&s).await, last_seq: 0 };
    // let a full window of traffic build up
    let mut before = feed.next_kind("Overview").await;
    while before["server_time_ns"].as_u64().unwrap() < 2_000_000_000 {
        before = feed.next_kind("Overview").await;
    }
    assert!((flow_mbits(&before, "hand_camera", "2g4") - 5.5).abs() < 0.3);
    assert_eq!(flow_mbits(&before, "hand_camera", "5g"), 0.0);

    feed.command(json!({"kind": "SetGroupLinks", "command_id": 1, "group": "hand_camera", "links": ["5g"]}))
        .await;
    let ack = feed.reply(1).await;
    assert_eq!(ack["kind"], "Ack");
    let acked_at = ack["server_time_ns"].as_u64().unwrap();

    let next = feed.next_kind("Overview").await;
    assert_eq!(route(&next, "hand_camera"), json!(["5g"]));
    assert!(flow_mbits(&next, "hand_camera", "5g") > 0.0);
    // one second after the ack the whole window is on the new band
    let mut later = next;
    while later["server_time_ns"].as_u64().unwrap() < acked_at + 1_100_000_000 {
        later = feed.next_kind("Overview").await;
    }
    assert_eq!(flow_mbits(&later, "hand_camera", "2g4"), 0.0);
    assert!((flow_mbits(&later, "hand_camera", "5g") - 5.5).abs() < 0.3);
}

#[tokio::test]
async fn bad_commands_get_errors_and_change_nothing() {
    let s = serve(&[]).await;
    let mut feed = Feed { ws: connect(&s).await, last_seq: 0 };
    let before = feed.next_kind("Overview").await;

    feed.command(json!({"kind": "SetGroupLinks", "command_id": 7, "group": "no_such_group", "links": ["5g"]}))
        .await;
    let err = feed.reply(7).await;
    assert_eq!(err["kind"], "Error");
    assert!(err["payload"]["message"].as_str().unwrap().contains("no_such_group"));

    feed.ws.send(Message::Text("{not json".into())).await.unwrap();
    let err = feed.next_kind("Error").await;
    assert_eq!(err["payload"]["command_id"], Value::Null);

    let after = feed.next_kind("Overview").await;
    assert_eq!(after["payload"]["routes"], before["payload"]["routes"]);
}

#[tokio::test]
async fn estop_command_engages_safety() {
    let s = serve(&[]).await;
    let mut feed = Feed { ws: connect(&s).await, last_seq: 0 };
    feed.next_kind("Safety").await;
    feed.command(json!({"kind": "EStopEngage", "command_id": 3})).await;
    assert_eq!(feed.reply(3).await["kind"], "Ack");
    let safety = feed.next_kind("Safety").await;
    assert_eq!(safety["payload"]["estop_engaged"], true);
    assert_eq!(safety["payload"]["base_depowered"], true);
    for arm in safety["payload"]["arms"].as_array().unwrap() {
        assert_eq!(arm["mode"], "SoftStop");
    }
    let checks = feed.next_kind("Checks").await;
    assert_eq!(checks["payload"]["verdict"]["decision"], "NoGo");
}

async fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes())
        .await
        .unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).await.unwrap();
    body
}

#[tokio::test]
async fn serves_static_assets() {
    let s = serve(&[]).await;
    let page = http_get(&s.addr, "/").await;
    assert!(page.starts_with("HTTP/1.1 200"));
    assert!(page.contains("/feed"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>panel</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let s = serve(&["--assets", dir.path().to_str().unwrap()]).await;
    assert!(http_get(&s.addr, "/").await.contains("<p>panel</p>"));
    assert!(http_get(&s.addr, "/app.js").await.contains("console.log(1)"));
    assert!(http_get(&s.addr, "/missing.css").await.starts_with("HTTP/1.1 404"));
}

#[tokio::test]
async fn bind_failure_exits_two() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let status = Command::new(env!("CARGO_BIN_EXE_telelink"))
        .args(["serve", "scenarios/finals_table2.scn", "--bind", &addr])
        .current_dir(&root)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .await
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(env!("CARGO_BIN_EXE_telelink"))
        .args(["serve", "scenarios/finals_table2.scn", "--speed", "0"])
        .current_dir(&root)
        .stderr(Stdio::null())
        .status()
        .await
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
