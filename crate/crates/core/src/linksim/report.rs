//! Metrics report: JSON, CSV and the transition log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::Digest;

use super::scenario::{link_index, Expectation};
use super::Simulator;
use crate::config::{Direction, Link, LinkSet};
use crate::safety::ArmMode;
use crate::sysmon::{aggregate, AggregatePolicy, CheckResult, Decision};

pub const SCHEMA_VERSION: u32 = 1;

/// Packet accounting for one (topic, link) path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PathCounters {
    pub sent: u64,
    pub delivered: u64,
    pub lost_loss: u64,
    pub lost_congestion: u64,
    pub in_flight: u64,
    pub delivered_payload_bytes: u64,
}

impl PathCounters {
    pub fn conserved(&self) -> bool {
        self.sent == self.delivered + self.lost_loss + self.lost_congestion + self.in_flight
    }

    fn add(&mut self, o: &PathCounters) {
        self.sent += o.sent;
        self.delivered += o.delivered;
        self.lost_loss += o.lost_loss;
        self.lost_congestion += o.lost_congestion;
        self.in_flight += o.in_flight;
        self.delivered_payload_bytes += o.delivered_payload_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicLinkReport {
    pub link: Link,
    #[serde(flatten)]
    pub packets: PathCounters,
    /// Receiver-side estimate from sequence gaps.
    pub est_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicReport {
    pub topic_id: u16,
    pub name: String,
    pub direction: Direction,
    pub group: String,
    pub links: LinkSet,
    pub rate_hz: f64,
    pub sent_messages: u64,
    pub delivered_messages: u64,
    pub delivery_ratio: f64,
    pub messages_per_s: f64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub suppressed_emissions: u64,
    pub endpoint_discarded: u64,
    pub per_link: Vec<TopicLinkReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub link: Link,
    #[serde(flatten)]
    pub packets: PathCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub direction: Direction,
    pub link: Link,
    pub nominal_mbits: f64,
    pub measured_mbits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandGapEvent {
    pub topic: String,
    pub start_ns: u64,
    /// `None` when the gap was still open at the end of the run.
    pub end_ns: Option<u64>,
    pub gap_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionRecord {
    pub time_ns: u64,
    pub component: String,
    pub from: String,
    pub to: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutageRecovery {
    pub links: LinkSet,
    pub start_s: f64,
    pub end_s: f64,
    /// Seconds from the end of the outage to the first delivered message, by topic.
    pub first_delivery_after_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultRecovery {
    pub kind: String,
    pub target: Option<String>,
    pub at_s: f64,
    pub recovery_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationResult {
    pub expectation: String,
    pub actual: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub topics: Vec<TopicReport>,
    pub links: Vec<LinkReport>,
    pub bandwidth: Vec<BandwidthReport>,
    pub command_gap_events: Vec<CommandGapEvent>,
    pub transitions: Vec<TransitionRecord>,
    pub outages: Vec<OutageRecovery>,
    pub faults: Vec<FaultRecovery>,
    pub checks: Vec<CheckResult>,
    pub go_ticks: u64,
    pub nogo_ticks: u64,
    pub final_decision: Option<Decision>,
    pub summary: BTreeMap<String, f64>,
    pub expectations: Vec<ExpectationResult>,
    pub event_log_sha256: String,
}

fn s(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

fn dir_key(d: Direction) -> &'static str {
    match d {
        Direction::Downlink => "down",
        Direction::Uplink => "up",
    }
}

impl Simulator {
    pub fn report(&self) -> MetricsReport {
        let elapsed_s = s(self.now_ns).max(f64::MIN_POSITIVE);
        let mut topics = Vec::new();
        let mut per_link: BTreeMap<usize, PathCounters> = BTreeMap::new();
        let mut measured: BTreeMap<(Direction, Link), u64> = BTreeMap::new();
        for (i, t) in self.table.topics().iter().enumerate() {
            let st = self.topic_stats.get(&t.topic_id).cloned().unwrap_or_default();
            let mut links = Vec::new();
            for link in Link::ALL {
                let Some(p) = self.paths.get(&(t.topic_id, link)) else {
                    continue;
                };
                per_link.entry(link_index(link)).or_default().add(p);
                *measured.entry((t.direction, link)).or_default() += p.delivered_payload_bytes;
                links.push(TopicLinkReport {
                    link,
                    packets: *p,
                    est_dropped: self.telemetry.flow(t.topic_id, link).map_or(0, |f| f.gaps.est_dropped),
                });
            }
            topics.push(TopicReport {
                topic_id: t.topic_id,
                name: t.name.clone(),
                direction: t.direction,
                group: t.group.clone(),
                links: t.links,
                rate_hz: self.generators[i].rate_hz(),
                sent_messages: st.sent_messages,
                delivered_messages: st.delivered_messages,
                delivery_ratio: if st.sent_messages == 0 {
                    0.0
                } else {
                    st.delivered_messages as f64 / st.sent_messages as f64
                },
                messages_per_s: st.delivered_messages as f64 / elapsed_s,
                mean_latency_ms: if st.delivered_messages == 0 {
                    0.0
                } else {
                    st.latency_sum_ns as f64 / st.delivered_messages as f64 * 1e-6
                },
                max_latency_ms: st.latency_max_ns as f64 * 1e-6,
                suppressed_emissions: st.suppressed_emissions,
                endpoint_discarded: st.endpoint_discarded,
                per_link: links,
            });
        }

        let links: Vec<LinkReport> = Link::ALL
            .into_iter()
            .map(|link| LinkReport {
                link,
                packets: per_link.get(&link_index(link)).copied().unwrap_or_default(),
            })
            .collect();

        let nominal = self.table.aggregate_bandwidth();
        let mut bandwidth = Vec::new();
        for direction in [Direction::Downlink, Direction::Uplink] {
            for link in Link::ALL {
                let bytes = measured.get(&(direction, link)).copied().unwrap_or(0);
                bandwidth.push(BandwidthReport {
                    direction,
                    link,
                    nominal_mbits: nominal.get(&(direction, link)).map_or(0.0, |m| m.as_f64()),
                    measured_mbits: bytes as f64 * 8.0 / elapsed_s / 1e6,
                });
            }
        }

        let mut gaps = self.gap_events.clone();
        let threshold = self.safety.config.command_gap_threshold_s;
        for (&topic_id, &last) in &self.last_command_ns {
            let gap_s = s(self.now_ns.saturating_sub(last));
            if gap_s > threshold {
                gaps.push(CommandGapEvent {
                    topic: self.table.get(topic_id).map(|t| t.name.clone()).unwrap_or_default(),
                    start_ns: last,
                    end_ns: None,
                    gap_ms: gap_s * 1e3,
                });
            }
        }
        gaps.sort_by(|a, b| (a.start_ns, &a.topic).cmp(&(b.start_ns, &b.topic)));

        let outages = self
            .outages
            .iter()
            .map(|w| OutageRecovery {
                links: w.links,
                start_s: s(w.start_ns),
                end_s: s(w.end_ns),
                first_delivery_after_s: w
                    .first_delivery_ns
                    .iter()
                    .filter_map(|(id, t)| Some((self.table.get(*id)?.name.clone(), s(t - w.end_ns))))
                    .collect(),
            })
            .collect::<Vec<_>>();

        let faults = self
            .faults
            .iter()
            .map(|f| FaultRecovery {
                kind: f.kind.to_string(),
                target: f.target.clone(),
                at_s: s(f.at_ns),
                recovery_s: f.recovered_ns.map(|r| s(r - f.at_ns)),
            })
            .collect::<Vec<_>>();

        let mut summary = BTreeMap::new();
        let arm = |r: &&TransitionRecord| r.component.starts_with("arm.");
        let stopped = |r: &&TransitionRecord| {
            r.to == format!("{:?}", ArmMode::SoftStop) || r.to == format!("{:?}", ArmMode::HardStop)
        };
        let count = |f: &dyn Fn(&&TransitionRecord) -> bool| self.transitions.iter().filter(|r| f(r)).count() as f64;
        summary.insert("arm_disables".into(), count(&|r| arm(r) && stopped(r) && r.cause != "EStop"));
        summary.insert("arm_gap_disables".into(), count(&|r| arm(r) && stopped(r) && r.cause == "CommandGap"));
        summary.insert("arm_collision_disables".into(), count(&|r| arm(r) && stopped(r) && r.cause == "Collision"));
        summary.insert("command_gap_events".into(), gaps.len() as f64);
        summary.insert("estop_restart_violations".into(), self.estop_restart_violations as f64);
        summary.insert("system_resets".into(), self.system_resets as f64);
        summary.insert(
            "process_restarts".into(),
            self.supervisor.processes().map(|p| p.restart_count).sum::<u64>() as f64,
        );
        summary.insert("all_running".into(), f64::from(u8::from(self.supervisor.all_running())));
        summary.insert("go_ticks".into(), self.go_ticks as f64);
        summary.insert("nogo_ticks".into(), self.nogo_ticks as f64);
        for b in &bandwidth {
            let key = format!("{}_{}", dir_key(b.direction), b.link.name());
            summary.insert(format!("{key}_mbits"), b.measured_mbits);
            summary.insert(format!("nominal_{key}_mbits"), b.nominal_mbits);
        }
        for l in &links {
            let name = l.link.name();
            summary.insert(format!("loss_drops_{name}"), l.packets.lost_loss as f64);
            summary.insert(format!("congestion_drops_{name}"), l.packets.lost_congestion as f64);
        }
        for t in &topics {
            summary.insert(format!("delivery_ratio.{}", t.name), t.delivery_ratio);
            summary.insert(format!("messages_per_s.{}", t.name), t.messages_per_s);
        }
        if let Some(worst) = outages
            .iter()
            .flat_map(|o| o.first_delivery_after_s.values().copied())
            .reduce(f64::max)
        {
            summary.insert("max_outage_recovery_s".into(), worst);
        }
        for kind in ["crash", "hang", "syshang"] {
            let of_kind: Vec<_> = faults.iter().filter(|f| f.kind == kind).collect();
            if of_kind.is_empty() {
                continue;
            }
            let worst = if of_kind.iter().all(|f| f.recovery_s.is_some()) {
                of_kind.iter().filter_map(|f| f.recovery_s).fold(0.0, f64::max)
            } else {
                f64::INFINITY
            };
            summary.insert(format!("max_{kind}_recovery_s"), worst);
        }
        let rx = [&self.avatar_rx, &self.operator_rx].map(|r| r.counters().snapshot());
        summary.insert(
            "duplicates_suppressed".into(),
            rx.iter().map(|c| c.duplicates_suppressed).sum::<u64>() as f64,
        );
        summary.insert("stale_dropped".into(), rx.iter().map(|c| c.stale_dropped).sum::<u64>() as f64);

        let expectations = self
            .expects
            .iter()
            .map(|e| evaluate(e, &summary))
            .collect();

        MetricsReport {
            schema_version: SCHEMA_VERSION,
            scenario: self.name.clone(),
            seed: self.seed,
            duration_s: s(self.now_ns),
            topics,
            links,
            bandwidth,
            command_gap_events: gaps,
            transitions: self.transitions.clone(),
            outages,
            faults,
            checks: self.last_checks.clone(),
            go_ticks: self.go_ticks,
            nogo_ticks: self.nogo_ticks,
            final_decision: (!self.last_checks.is_empty())
                .then(|| aggregate(&self.last_checks, AggregatePolicy::default()).decision),
            summary,
            expectations,
            event_log_sha256: hex::encode(self.hasher.clone().finalize()),
        }
    }
}

fn evaluate(e: &Expectation, summary: &BTreeMap<String, f64>) -> ExpectationResult {
    let actual = summary.get(&e.metric).copied();
    ExpectationResult {
        expectation: e.to_string(),
        actual,
        pass: actual.is_some_and(|a| e.holds(a)),
    }
}

impl MetricsReport {
    pub fn expectations_hold(&self) -> bool {
        self.expectations.iter().all(|e| e.pass)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.summary.get(name).copied()
    }

    pub fn topic(&self, name: &str) -> Option<&TopicReport> {
        self.topics.iter().find(|t| t.name == name)
    }

    pub fn bandwidth(&self, direction: Direction, link: Link) -> Option<&BandwidthReport> {
        self.bandwidth.iter().find(|b| b.direction == direction && b.link == link)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    /// One row per (topic, link) path.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "topic_id,topic,direction,link,sent,delivered,lost_loss,lost_congestion,in_flight,est_dropped,delivered_payload_bytes,topic_delivery_ratio,topic_mean_latency_ms\n",
        );
        for t in &self.topics {
            for l in &t.per_link {
                let p = &l.packets;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.3}",
                    t.topic_id,
                    t.name,
                    dir_key(t.direction),
                    l.link,
                    p.sent,
                    p.delivered,
                    p.lost_loss,
                    p.lost_congestion,
                    p.in_flight,
                    l.est_dropped,
                    p.delivered_payload_bytes,
                    t.delivery_ratio,
                    t.mean_latency_ms
                );
            }
        }
        out
    }

    pub fn transitions_log(&self) -> String {
        let mut out = String::new();
        for t in &self.transitions {
            let _ = writeln!(
                out,
                "{:>12.3} {} {} -> {} ({})",
                s(t.time_ns),
                t.component,
                t.from,
                t.to,
                t.cause
            );
        }
        out
    }

    /// Writes `metrics.json`, `metrics.csv` and `transitions.log` into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        std::fs::write(dir.join("transitions.log"), self.transitions_log())?;
        Ok(())
    }
}
