//! Paced simulation plus the `/feed` WebSocket and static files.
//!
//! The simulation runs on its own thread in 100 ms simulated steps. Control
//! commands queue up and are applied between steps; each is answered with
//! Ack or Error once applied. A full Overview/Checks/Safety triple is
//! published every simulated second and sent to a client as soon as it
//! connects.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use telelink::linksim::{Scenario, Simulator, SYSMON_TICK_NS};
use telelink::sysmon::{aggregate, AggregatePolicy};
use tokio::sync::{mpsc, oneshot, watch};
use tower_http::services::ServeDir;

use crate::feed::{
    salvage_command_id, AckPayload, ControlCommand, ErrorPayload, FeedKind, FeedMessage, Snapshot, SCHEMA_VERSION,
};
use crate::EXIT_USAGE;

const STEP_NS: u64 = 100_000_000;
const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

/// Applied-at time on success, reason on failure.
type Reply = Result<u64, (u64, String)>;
type Queued = (ControlCommand, oneshot::Sender<Reply>);

#[derive(Clone)]
struct Hub {
    snapshots: watch::Receiver<Option<Arc<Snapshot>>>,
    commands: mpsc::UnboundedSender<Queued>,
}

const INDEX: &str = r#"<!doctype html>
<meta charset="utf-8">
<title>telelink feed</title>
<pre id="log">connecting…</pre>
<script>
const log = document.getElementById("log");
const ws = new WebSocket(`ws://${location.host}/feed`);
ws.onmessage = (e) => {
  const m = JSON.parse(e.data);
  log.textContent = `${m.kind} #${m.seq} @ ${(m.server_time_ns / 1e9).toFixed(1)} s\n` +
    JSON.stringify(m.payload, null, 1).slice(0, 4000);
};
ws.onclose = () => { log.textContent += "\n(feed closed)"; };
</script>
"#;

pub fn cmd_serve(sc: Scenario, bind: SocketAddr, speed: f64, assets: Option<PathBuf>) -> ExitCode {
    let sim = match Simulator::new(&sc) {
        Ok(sim) => sim,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    runtime.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(bind).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot bind {bind}: {e}");
                return ExitCode::from(EXIT_USAGE);
            }
        };
        let addr = listener.local_addr().expect("bound socket has an address");
        let (snap_tx, snap_rx) = watch::channel(None);
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        std::thread::spawn(move || sim_loop(sim, speed, cmd_rx, snap_tx));

        let hub = Hub {
            snapshots: snap_rx,
            commands: cmd_tx,
        };
        let app = Router::new().route("/feed", get(feed)).with_state(hub);
        let app = match assets {
            Some(dir) => app.fallback_service(ServeDir::new(dir)),
            None => app.route("/", get(|| async { Html(INDEX) })),
        };
        println!("listening on http://{addr}");
        match axum::serve(listener, app).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_USAGE)
            }
        }
    })
}

fn publish(sim: &mut Simulator, tx: &watch::Sender<Option<Arc<Snapshot>>>) {
    let overview = sim.overview();
    let verdict = aggregate(sim.checks(), AggregatePolicy::default());
    let snap = Snapshot::new(&overview, sim.checks(), &verdict, &sim.safety_view());
    tx.send_replace(Some(Arc::new(snap)));
}

fn sim_loop(
    mut sim: Simulator,
    speed: f64,
    mut commands: mpsc::UnboundedReceiver<Queued>,
    snapshots: watch::Sender<Option<Arc<Snapshot>>>,
) {
    let wall_step = Duration::from_secs_f64(STEP_NS as f64 * 1e-9 / speed);
    let start = Instant::now();
    publish(&mut sim, &snapshots);
    for k in 1u32.. {
        loop {
            match commands.try_recv() {
                Ok((cmd, reply)) => {
                    let result = cmd
                        .kind
                        .to_action()
                        .and_then(|a| sim.apply_action(a))
                        .map(|()| sim.now_ns())
                        .map_err(|e| (sim.now_ns(), e));
                    let _ = reply.send(result);
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        }
        sim.run_until(sim.now_ns() + STEP_NS);
        if sim.now_ns().is_multiple_of(SYSMON_TICK_NS) {
            publish(&mut sim, &snapshots);
        }
        let due = start + wall_step * k;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

async fn feed(ws: WebSocketUpgrade, State(hub): State<Hub>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, hub))
}

struct Outbox {
    socket: WebSocket,
    seq: u64,
}

impl Outbox {
    async fn send(&mut self, kind: FeedKind, time_ns: u64, payload: serde_json::Value) -> bool {
        self.seq += 1;
        let msg = FeedMessage {
            schema_version: SCHEMA_VERSION,
            kind,
            seq: self.seq,
            server_time_ns: time_ns,
            payload,
        };
        let text = serde_json::to_string(&msg).expect("feed message serializes");
        self.socket.send(Message::Text(text.into())).await.is_ok()
    }

    async fn send_snapshot(&mut self, snap: &Snapshot) -> bool {
        for (kind, payload) in snap.parts() {
            if !self.send(kind, snap.time_ns, payload.clone()).await {
                return false;
            }
        }
        true
    }

    async fn send_error(&mut self, time_ns: u64, command_id: Option<u64>, message: String) -> bool {
        self.send(FeedKind::Error, time_ns, to_value(ErrorPayload { command_id, message })).await
    }
}

fn to_value(v: impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("payload serializes")
}

async fn connection(socket: WebSocket, hub: Hub) {
    let mut out = Outbox { socket, seq: 0 };
    let mut snapshots = hub.snapshots.clone();
    let current = snapshots.borrow_and_update().clone();
    let mut last_time = 0;
    if let Some(snap) = current {
        last_time = snap.time_ns;
        if !out.send_snapshot(&snap).await {
            return;
        }
    }
    loop {
        tokio::select! {
            changed = snapshots.changed() => {
                if changed.is_err() {
                    return;
                }
                let snap = snapshots.borrow_and_update().clone();
                if let Some(snap) = snap {
                    last_time = snap.time_ns;
                    if !out.send_snapshot(&snap).await {
                        return;
                    }
                }
            }
            incoming = out.socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                if !handle_command(&mut out, &hub, &text, last_time).await {
                    return;
                }
            }
        }
    }
}

async fn handle_command(out: &mut Outbox, hub: &Hub, text: &str, now_ns: u64) -> bool {
    let cmd: ControlCommand = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return out.send_error(now_ns, salvage_command_id(text), format!("bad command: {e}")).await,
    };
    let id = cmd.command_id;
    let (tx, rx) = oneshot::channel();
    if hub.commands.send((cmd, tx)).is_err() {
        return out.send_error(now_ns, Some(id), "simulation stopped".into()).await;
    }
    match tokio::time::timeout(REPLY_TIMEOUT, rx).await {
        Ok(Ok(Ok(at))) => out.send(FeedKind::Ack, at, to_value(AckPayload { command_id: id })).await,
        Ok(Ok(Err((at, reason)))) => out.send_error(at, Some(id), reason).await,
        _ => out.send_error(now_ns, Some(id), "simulation did not answer".into()).await,
    }
}
