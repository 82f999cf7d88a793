//! Deterministic discrete-event simulation of the two radio links and the
//! avatar system running over them.
//!
//! Everything is driven from one event queue on an integer-nanosecond clock.
//! Events at the same instant run in a fixed order: E-stop actions, other
//! scripted actions, packet arrivals, generator emissions, then the safety,
//! supervisor and sysmon ticks.

mod link;
mod report;
mod scenario;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use link::{bandwidth_cap_enforcement, CapResult, JitterBurst, LinkProfile, Outage, TokenBucket, BUCKET_DEPTH_S};
pub use report::{
    BandwidthReport, CommandGapEvent, ExpectationResult, FaultRecovery, LinkReport, MetricsReport, OutageRecovery,
    PathCounters, TopicReport, TransitionRecord,
};
pub use scenario::{
    default_checks, Action, CmpOp, Endpoint, Expectation, Scenario, ScenarioError, ScheduledAction, DEFAULT_PROCESSES,
};

use crate::config::{Direction, Link, LinkSet, TopicTable};
use crate::safety::{ArmId, ArmMode, SafetyController, Transition};
use crate::sources::{make_generator, Generator};
use crate::supervisor::{ProcState, ProcTransition, ProcessConfig, Supervisor, SystemWatchdog};
use crate::sysmon::builtin::{register_all, SystemView};
use crate::sysmon::{aggregate, AggregatePolicy, CheckRegistry, CheckResult, Decision, Runner};
use crate::telemetry::{LinkState, NetworkOverview, PacketDir, Telemetry};
use crate::transport::{Receiver, Sender};
use crate::wire::{decode_packet, PacketHeader};
use scenario::link_index;

pub const SAFETY_TICK_NS: u64 = 10_000_000;
pub const SUPERVISOR_TICK_NS: u64 = 100_000_000;
pub const SYSMON_TICK_NS: u64 = 1_000_000_000;
pub const ESTOP_HEARTBEAT_NS: u64 = 100_000_000;

/// One packet handed to a receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeliveryEvent {
    pub time_ns: u64,
    pub direction: Direction,
    pub link: Link,
    pub topic_id: u16,
    pub seq: u32,
    pub frag_index: u16,
    pub send_time_ns: u64,
    /// This packet completed a message that the receiver passed up.
    pub delivered_message: bool,
}

/// Arm states for display.
#[derive(Debug, Clone, Serialize)]
pub struct SafetyView {
    pub time_ns: u64,
    pub estop_engaged: bool,
    pub base_depowered: bool,
    pub arms: Vec<ArmView>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmView {
    pub arm: ArmId,
    pub mode: ArmMode,
    pub external_force: f64,
    pub fade_progress: f64,
}

enum Event {
    Action(Action),
    Deliver {
        direction: Direction,
        link: Link,
        raw: Vec<u8>,
    },
    Emit(usize),
    SafetyTick,
    SupervisorTick,
    SysmonTick,
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::Action(a) if a.is_estop() => 0,
            Event::Action(_) => 1,
            Event::Deliver { .. } => 2,
            Event::Emit(_) => 3,
            Event::SafetyTick => 4,
            Event::SupervisorTick => 5,
            Event::SysmonTick => 6,
        }
    }
}

struct Queued {
    time_ns: u64,
    priority: u8,
    order: u64,
    event: Event,
}

impl Queued {
    fn key(&self) -> (u64, u8, u64) {
        (self.time_ns, self.priority, self.order)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone, Default)]
struct TopicStats {
    sent_messages: u64,
    suppressed_emissions: u64,
    delivered_messages: u64,
    endpoint_discarded: u64,
    latency_sum_ns: u128,
    latency_max_ns: u64,
}

struct OutageWatch {
    links: LinkSet,
    start_ns: u64,
    end_ns: u64,
    first_delivery_ns: BTreeMap<u16, u64>,
}

struct FaultWatch {
    kind: &'static str,
    target: Option<String>,
    at_ns: u64,
    baseline: BTreeMap<String, u64>,
    recovered_ns: Option<u64>,
}

fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub struct Simulator {
    name: String,
    seed: u64,
    duration_ns: u64,
    now_ns: u64,
    table: Arc<TopicTable>,
    profiles: [LinkProfile; 2],
    buckets: [Option<TokenBucket>; 2],
    correlation: f64,
    rng: ChaCha8Rng,
    generators: Vec<Generator>,
    avatar_tx: Sender,
    operator_tx: Sender,
    avatar_rx: Receiver,
    operator_rx: Receiver,
    telemetry: Telemetry,
    safety: SafetyController,
    supervisor: Supervisor,
    sysmon: CheckRegistry<SystemView>,
    last_checks: Vec<CheckResult>,
    go_ticks: u64,
    nogo_ticks: u64,
    command_group: String,
    queue: BinaryHeap<Reverse<Queued>>,
    order: u64,
    paths: BTreeMap<(u16, Link), PathCounters>,
    topic_stats: BTreeMap<u16, TopicStats>,
    last_command_ns: BTreeMap<u16, u64>,
    gap_events: Vec<CommandGapEvent>,
    transitions: Vec<TransitionRecord>,
    estop_restart_violations: u64,
    system_resets: u64,
    outages: Vec<OutageWatch>,
    faults: Vec<FaultWatch>,
    forces: [f64; 2],
    radio_lost: bool,
    last_radio_hb_ns: u64,
    avatar_offline: bool,
    hasher: Sha256,
    collect: Option<Vec<DeliveryEvent>>,
    expects: Vec<Expectation>,
}

impl Simulator {
    pub fn new(sc: &Scenario) -> Result<Self, ScenarioError> {
        sc.validate()?;
        let table = Arc::new(sc.table.clone());
        let mut generators = Vec::new();
        for t in table.topics() {
            generators.push(make_generator(t, sc.seed).map_err(|e| ScenarioError::Invalid(e.to_string()))?);
        }
        let mut supervisor = Supervisor::new(SystemWatchdog::default());
        for p in &sc.processes {
            supervisor
                .register(p, ProcessConfig::default(), 0)
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        let mut sysmon = CheckRegistry::new(Runner::Inline);
        register_all(&mut sysmon, &sc.checks).map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let mut outages: Vec<OutageWatch> = Vec::new();
        for p in &sc.profiles {
            for o in &p.outages {
                match outages
                    .iter_mut()
                    .find(|w| w.start_ns == o.start_ns && w.end_ns == o.end_ns())
                {
                    Some(w) => w.links = w.links.with(p.link),
                    None => outages.push(OutageWatch {
                        links: LinkSet::only(p.link),
                        start_ns: o.start_ns,
                        end_ns: o.end_ns(),
                        first_delivery_ns: BTreeMap::new(),
                    }),
                }
            }
        }
        outages.sort_by_key(|w| (w.start_ns, w.end_ns));

        let mut sim = Simulator {
            name: sc.name.clone(),
            seed: sc.seed,
            duration_ns: sc.duration_ns,
            now_ns: 0,
            avatar_tx: Sender::new(Arc::clone(&table)),
            operator_tx: Sender::new(Arc::clone(&table)),
            avatar_rx: Receiver::new(Arc::clone(&table)),
            operator_rx: Receiver::new(Arc::clone(&table)),
            telemetry: Telemetry::new(Arc::clone(&table)),
            table,
            profiles: sc.profiles.clone(),
            buckets: [0, 1].map(|i| sc.profiles[i].bandwidth_cap_mbits.map(TokenBucket::new)),
            correlation: sc.loss_correlation,
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            generators,
            safety: SafetyController::new(sc.safety, 0),
            supervisor,
            sysmon,
            last_checks: Vec::new(),
            go_ticks: 0,
            nogo_ticks: 0,
            command_group: sc.command_group.clone(),
            queue: BinaryHeap::new(),
            order: 0,
            paths: BTreeMap::new(),
            topic_stats: BTreeMap::new(),
            last_command_ns: BTreeMap::new(),
            gap_events: Vec::new(),
            transitions: Vec::new(),
            estop_restart_violations: 0,
            system_resets: 0,
            outages,
            faults: Vec::new(),
            forces: [0.0; 2],
            radio_lost: false,
            last_radio_hb_ns: 0,
            avatar_offline: false,
            hasher: Sha256::new(),
            collect: None,
            expects: sc.expects.clone(),
        };
        for i in 0..sim.generators.len() {
            let t = sim.generators[i].peek_time();
            sim.push(t, Event::Emit(i));
        }
        for a in &sc.actions {
            sim.push(a.time_ns, Event::Action(a.action.clone()));
        }
        sim.push(SAFETY_TICK_NS, Event::SafetyTick);
        sim.push(SUPERVISOR_TICK_NS, Event::SupervisorTick);
        sim.push(SYSMON_TICK_NS, Event::SysmonTick);
        Ok(sim)
    }

    fn push(&mut self, time_ns: u64, event: Event) {
        self.order += 1;
        self.queue.push(Reverse(Queued {
            time_ns,
            priority: event.priority(),
            order: self.order,
            event,
        }));
    }

    fn log_record(&mut self, tag: u8, fields: &[u64]) {
        self.hasher.update([tag]);
        for f in fields {
            self.hasher.update(f.to_be_bytes());
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn duration_ns(&self) -> u64 {
        self.duration_ns
    }

    pub fn table(&self) -> &Arc<TopicTable> {
        &self.table
    }

    pub fn safety(&self) -> &SafetyController {
        &self.safety
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn path(&self, topic_id: u16, link: Link) -> PathCounters {
        self.paths.get(&(topic_id, link)).copied().unwrap_or_default()
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    /// Advances the clock by `dt_ns` and returns the packets handed to
    /// receivers during the step, in delivery order.
    pub fn step(&mut self, dt_ns: u64) -> Vec<DeliveryEvent> {
        self.collect = Some(Vec::new());
        self.run_until(self.now_ns + dt_ns.max(1));
        self.collect.take().unwrap_or_default()
    }

    /// Processes every event scheduled at or before `t_ns`.
    pub fn run_until(&mut self, t_ns: u64) {
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.time_ns > t_ns {
                break;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now_ns = q.time_ns;
            self.dispatch(q.event);
        }
        self.now_ns = self.now_ns.max(t_ns);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Action(a) => {
                // scripted actions are trusted to be valid after validation
                let _ = self.apply_action(a);
            }
            Event::Deliver { direction, link, raw } => self.deliver(direction, link, raw),
            Event::Emit(i) => self.emit(i),
            Event::SafetyTick => {
                self.safety_tick();
                self.push(self.now_ns + SAFETY_TICK_NS, Event::SafetyTick);
            }
            Event::SupervisorTick => {
                self.supervisor_tick();
                self.push(self.now_ns + SUPERVISOR_TICK_NS, Event::SupervisorTick);
            }
            Event::SysmonTick => {
                self.sysmon_tick();
                self.push(self.now_ns + SYSMON_TICK_NS, Event::SysmonTick);
            }
        }
    }

    fn emit(&mut self, i: usize) {
        let e = self.generators[i].next_emission();
        let next = self.generators[i].peek_time();
        self.push(next, Event::Emit(i));
        let Some(spec) = self.table.get(e.topic_id) else {
            return;
        };
        let direction = spec.direction;
        let stats = self.topic_stats.entry(e.topic_id).or_default();
        if direction == Direction::Downlink && self.avatar_offline {
            stats.suppressed_emissions += 1;
            return;
        }
        stats.sent_messages += 1;
        let sender = match direction {
            Direction::Downlink => &mut self.avatar_tx,
            Direction::Uplink => &mut self.operator_tx,
        };
        let Ok(packets) = sender.send(e.topic_id, e.payload, self.now_ns) else {
            return;
        };
        let now = self.now_ns;
        let mut shared_u = 0.0;
        let mut group_key = None;
        for (link, packet) in packets {
            let h = packet.header;
            let key = (h.seq, h.frag_index);
            if group_key != Some(key) {
                group_key = Some(key);
                shared_u = unit_f64(&mut self.rng);
            }
            let coin = unit_f64(&mut self.rng);
            let fresh = unit_f64(&mut self.rng);
            let u = if coin < self.correlation { shared_u } else { fresh };

            self.telemetry.record_packet(PacketDir::Sent, link, &h, now);
            let path = self.paths.entry((h.topic_id, link)).or_default();
            path.sent += 1;
            let li = link_index(link);
            let profile = &self.profiles[li];
            let raw = packet.encode().expect("sender produces valid packets");
            let fields = [now, li as u64, u64::from(h.topic_id), u64::from(h.seq), u64::from(h.frag_index)];
            if profile.in_outage(now) || u < profile.loss_at(now) {
                path.lost_loss += 1;
                self.log_record(b'L', &fields);
            } else if !self.buckets[li].as_mut().is_none_or(|b| b.try_consume(now, raw.len())) {
                path.lost_congestion += 1;
                self.log_record(b'C', &fields);
            } else {
                path.in_flight += 1;
                let at = now + profile.latency_at(now);
                self.push(at, Event::Deliver { direction, link, raw });
            }
        }
    }

    fn deliver(&mut self, direction: Direction, link: Link, raw: Vec<u8>) {
        let now = self.now_ns;
        let packet = decode_packet(&raw).expect("simulator only carries valid packets");
        let h: PacketHeader = packet.header;
        {
            let path = self.paths.entry((h.topic_id, link)).or_default();
            path.in_flight -= 1;
            path.delivered += 1;
            path.delivered_payload_bytes += u64::from(h.payload_len);
        }
        self.log_record(
            b'D',
            &[now, link_index(link) as u64, u64::from(h.topic_id), u64::from(h.seq), u64::from(h.frag_index)],
        );
        let mut event = DeliveryEvent {
            time_ns: now,
            direction,
            link,
            topic_id: h.topic_id,
            seq: h.seq,
            frag_index: h.frag_index,
            send_time_ns: h.send_time_ns,
            delivered_message: false,
        };
        if direction == Direction::Uplink && self.avatar_offline {
            self.topic_stats.entry(h.topic_id).or_default().endpoint_discarded += 1;
        } else {
            self.telemetry.record_packet(PacketDir::Received, link, &h, now);
            let rx = match direction {
                Direction::Downlink => &mut self.operator_rx,
                Direction::Uplink => &mut self.avatar_rx,
            };
            if let Some(msg) = rx.receive_packet(link, packet, now) {
                event.delivered_message = true;
                self.on_message(msg.topic_id, msg.send_time_ns);
            }
        }
        if let Some(c) = self.collect.as_mut() {
            c.push(event);
        }
    }

    fn is_command_topic(&self, topic_id: u16) -> bool {
        self.table
            .get(topic_id)
            .is_some_and(|t| t.direction == Direction::Uplink && t.group == self.command_group)
    }

    fn command_topics(&self) -> Vec<u16> {
        self.table
            .topics()
            .iter()
            .filter(|t| t.direction == Direction::Uplink && t.group == self.command_group)
            .map(|t| t.topic_id)
            .collect()
    }

    fn on_message(&mut self, topic_id: u16, send_time_ns: u64) {
        let now = self.now_ns;
        let stats = self.topic_stats.entry(topic_id).or_default();
        stats.delivered_messages += 1;
        let latency = now.saturating_sub(send_time_ns);
        stats.latency_sum_ns += u128::from(latency);
        stats.latency_max_ns = stats.latency_max_ns.max(latency);
        for w in &mut self.outages {
            if now >= w.end_ns {
                w.first_delivery_ns.entry(topic_id).or_insert(now);
            }
        }
        if self.is_command_topic(topic_id) {
            let threshold = self.safety.config.command_gap_threshold_s;
            if let Some(last) = self.last_command_ns.insert(topic_id, now) {
                let gap_s = (now - last) as f64 * 1e-9;
                if gap_s > threshold {
                    let topic = self.table.get(topic_id).map(|t| t.name.clone()).unwrap_or_default();
                    self.gap_events.push(CommandGapEvent {
                        topic,
                        start_ns: last,
                        end_ns: Some(now),
                        gap_ms: gap_s * 1e3,
                    });
                }
            }
        }
    }

    fn record_arm(&mut self, t: Transition) {
        if t.to == ArmMode::Restarting && self.safety.estop().engaged {
            self.estop_restart_violations += 1;
        }
        let rec = TransitionRecord {
            time_ns: t.time_ns,
            component: format!("arm.{}", t.arm.name()),
            from: format!("{:?}", t.from),
            to: format!("{:?}", t.to),
            cause: format!("{:?}", t.cause),
        };
        self.log_record(b'A', &[t.time_ns, t.arm as u64, t.from as u64, t.to as u64, t.cause as u64]);
        self.transitions.push(rec);
    }

    fn record_proc(&mut self, t: ProcTransition) {
        let rec = TransitionRecord {
            time_ns: t.time_ns,
            component: format!("proc.{}", t.process),
            from: format!("{:?}", t.from),
            to: format!("{:?}", t.to),
            cause: format!("{:?}", t.cause),
        };
        self.hasher.update(t.process.as_bytes());
        self.log_record(b'P', &[t.time_ns, t.from as u64, t.to as u64, t.cause as u64]);
        self.transitions.push(rec);
    }

    fn safety_tick(&mut self) {
        if self.avatar_offline {
            return;
        }
        let now = self.now_ns;
        if !self.radio_lost && now.saturating_sub(self.last_radio_hb_ns) >= ESTOP_HEARTBEAT_NS {
            self.safety.estop_heartbeat(now);
            self.last_radio_hb_ns = now;
        }
        let t = now as f64 * 1e-9;
        for (k, arm) in ArmId::BOTH.into_iter().enumerate() {
            let mut pose = [0.0; crate::safety::JOINTS];
            for (j, q) in pose.iter_mut().enumerate() {
                *q = 0.3 * (0.5 * t + j as f64 + k as f64).sin();
            }
            self.safety.set_operator_pose(arm, pose);
        }
        let gap = self
            .command_topics()
            .into_iter()
            .filter_map(|id| self.avatar_rx.command_gap_seconds(id, now).ok())
            .reduce(f64::min);
        for tr in self.safety.tick(now, gap) {
            self.record_arm(tr);
        }
    }

    fn restart_counts(&self) -> BTreeMap<String, u64> {
        self.supervisor
            .processes()
            .map(|p| (p.name.clone(), p.restart_count))
            .collect()
    }

    fn supervisor_tick(&mut self) {
        let now = self.now_ns;
        let (reset, trans) = self.supervisor.tick(now);
        if reset.is_some() {
            self.system_resets += 1;
            self.log_record(b'R', &[now]);
            self.transitions.push(TransitionRecord {
                time_ns: now,
                component: "system".into(),
                from: "Hung".into(),
                to: "Resetting".into(),
                cause: "WatchdogExpired".into(),
            });
        }
        for t in trans {
            self.record_proc(t);
        }
        let offline = self.supervisor.system_hung() || self.supervisor.watchdog().reset_in_progress;
        if self.avatar_offline && !offline {
            // the avatar software comes back with fresh transport state
            self.avatar_rx = Receiver::new(Arc::clone(&self.table));
        }
        self.avatar_offline = offline;
        if self.faults.iter().any(|f| f.recovered_ns.is_none()) && self.supervisor.all_running() {
            let counts = self.restart_counts();
            for f in self.faults.iter_mut().filter(|f| f.recovered_ns.is_none()) {
                let restarted = |name: &String| counts.get(name).copied().unwrap_or(0) > f.baseline.get(name).copied().unwrap_or(0);
                let done = match &f.target {
                    Some(name) => restarted(name),
                    None => f.baseline.keys().all(restarted),
                };
                if done {
                    f.recovered_ns = Some(now);
                }
            }
        }
    }

    fn system_view(&mut self) -> SystemView {
        let now = self.now_ns;
        let overview = self.overview();
        let mut command_gaps = BTreeMap::new();
        for t in self.table.topics() {
            let rx = match t.direction {
                Direction::Downlink => &self.operator_rx,
                Direction::Uplink => &self.avatar_rx,
            };
            if let Ok(g) = rx.command_gap_seconds(t.topic_id, now) {
                command_gaps.insert(t.name.clone(), g);
            }
        }
        SystemView {
            overview,
            command_gaps,
            not_running: self
                .supervisor
                .processes()
                .filter(|p| p.state != ProcState::Running)
                .map(|p| p.name.clone())
                .collect(),
            system_resetting: self.supervisor.watchdog().reset_in_progress,
            estop_engaged: self.safety.estop().engaged,
        }
    }

    fn sysmon_tick(&mut self) {
        let view = self.system_view();
        let results = self.sysmon.tick(Arc::new(view), self.now_ns);
        match aggregate(&results, AggregatePolicy::default()).decision {
            Decision::Go => self.go_ticks += 1,
            Decision::NoGo => self.nogo_ticks += 1,
        }
        self.last_checks = results;
    }

    /// Latest sysmon results (empty before the first 1 Hz tick).
    pub fn checks(&self) -> &[CheckResult] {
        &self.last_checks
    }

    pub fn overview(&mut self) -> NetworkOverview {
        let now = self.now_ns;
        for p in &self.profiles {
            self.telemetry.set_link_state(
                p.link,
                LinkState {
                    signal_strength: p.signal_at(now),
                    up: !p.in_outage(now),
                },
            );
        }
        self.telemetry.snapshot(now)
    }

    pub fn safety_view(&self) -> SafetyView {
        SafetyView {
            time_ns: self.now_ns,
            estop_engaged: self.safety.estop().engaged,
            base_depowered: self.safety.base_output(1.0) == 0.0,
            arms: self
                .safety
                .arms()
                .iter()
                .map(|a| ArmView {
                    arm: a.id,
                    mode: a.mode,
                    external_force: a.external_force,
                    fade_progress: a.fade_progress,
                })
                .collect(),
        }
    }

    /// Applies an action at the current simulated time.
    pub fn apply_action(&mut self, action: Action) -> Result<(), String> {
        let now = self.now_ns;
        match action {
            Action::Crash(name) => {
                let baseline = self.restart_counts();
                let t = self.supervisor.inject_crash(&name, now).map_err(|e| e.to_string())?;
                if let Some(t) = t {
                    self.record_proc(t);
                }
                self.faults.push(FaultWatch {
                    kind: "crash",
                    target: Some(name),
                    at_ns: now,
                    baseline,
                    recovered_ns: None,
                });
            }
            Action::Hang(name) => {
                let baseline = self.restart_counts();
                self.supervisor.inject_hang(&name).map_err(|e| e.to_string())?;
                self.faults.push(FaultWatch {
                    kind: "hang",
                    target: Some(name),
                    at_ns: now,
                    baseline,
                    recovered_ns: None,
                });
            }
            Action::SystemHang => {
                let baseline = self.restart_counts();
                self.supervisor.inject_system_hang();
                self.avatar_offline = true;
                self.faults.push(FaultWatch {
                    kind: "syshang",
                    target: None,
                    at_ns: now,
                    baseline,
                    recovered_ns: None,
                });
            }
            Action::EStopEngage => {
                for t in self.safety.estop_engage(now).transitions {
                    self.record_arm(t);
                }
            }
            Action::EStopRelease => {
                for t in self.safety.estop_release(now).transitions {
                    self.record_arm(t);
                }
                self.last_radio_hb_ns = now;
            }
            Action::EStopRadio { lost } => self.radio_lost = lost,
            Action::Collision { arm, force } => {
                if let Some(t) = self.safety.collision_event(arm, force, now) {
                    self.record_arm(t);
                }
                self.safety.set_external_force(arm, self.forces[arm as usize]);
            }
            Action::Force { arm, force } => {
                self.forces[arm as usize] = force;
                self.safety.set_external_force(arm, force);
            }
            Action::Route { group, links } => {
                let table = Arc::new(self.table.set_group_links(&group, links).map_err(|e| e.to_string())?);
                self.avatar_tx.set_table(Arc::clone(&table));
                self.operator_tx.set_table(Arc::clone(&table));
                self.avatar_rx.set_table(Arc::clone(&table));
                self.operator_rx.set_table(Arc::clone(&table));
                self.telemetry.set_table(Arc::clone(&table));
                self.table = table;
                self.hasher.update(group.as_bytes());
                self.log_record(b'T', &[now, links.iter().map(|l| 1u64 << link_index(l)).sum()]);
            }
            Action::RestartReceiver(ep) => {
                let fresh = Receiver::new(Arc::clone(&self.table));
                match ep {
                    Endpoint::Avatar => self.avatar_rx = fresh,
                    Endpoint::Operator => self.operator_rx = fresh,
                }
            }
        }
        Ok(())
    }

    /// Runs to the end of the scenario duration.
    pub fn run(&mut self) {
        self.run_until(self.duration_ns);
    }
}

/// Runs a scenario to completion and returns its report.
pub fn run_scenario(sc: &Scenario) -> Result<MetricsReport, ScenarioError> {
    let mut sim = Simulator::new(sc)?;
    sim.run();
    Ok(sim.report())
}
