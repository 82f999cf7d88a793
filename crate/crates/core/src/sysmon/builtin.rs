//! Stock checks: link up per band, per-group packet rate, command gap,
//! supervisor health and E-stop state, plus static fixtures.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{CheckOutcome, CheckRegistry, Side, SysmonError};
use crate::config::{ConfigError, Directive, Link};
use crate::telemetry::NetworkOverview;

/// What the stock checks look at.
#[derive(Debug, Clone, Serialize)]
pub struct SystemView {
    pub overview: NetworkOverview,
    /// Seconds since the last delivery, by topic name.
    pub command_gaps: BTreeMap<String, f64>,
    pub not_running: Vec<String>,
    pub system_resetting: bool,
    pub estop_engaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckKind {
    LinkUp { link: Link, min_signal: f64 },
    GroupRate { group: String, min_pps: f64 },
    CommandGap { topic: String, max_s: f64 },
    SupervisorAllRunning,
    EStopDisengaged,
    Fixture { outcome: CheckOutcome },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSpec {
    pub name: String,
    pub side: Side,
    pub kind: CheckKind,
}

impl CheckKind {
    pub fn evaluate(&self, v: &SystemView) -> CheckOutcome {
        match self {
            CheckKind::LinkUp { link, min_signal } => match v.overview.link(*link) {
                Some(l) if !l.up => CheckOutcome::error(format!("{link} link down")),
                Some(l) if l.signal_strength < *min_signal => CheckOutcome::warn(format!(
                    "{link} signal {:.2} below {min_signal:.2}",
                    l.signal_strength
                )),
                Some(l) => CheckOutcome::ok(format!("{link} up, signal {:.2}", l.signal_strength)),
                None => CheckOutcome::error(format!("{link} not monitored")),
            },
            CheckKind::GroupRate { group, min_pps } => {
                let pps: f64 = v
                    .overview
                    .flows
                    .iter()
                    .filter(|f| &f.group == group)
                    .map(|f| f.packets_per_s)
                    .sum();
                if pps >= *min_pps {
                    CheckOutcome::ok(format!("{group}: {pps:.1} packets/s"))
                } else {
                    CheckOutcome::error(format!("{group}: {pps:.1} packets/s, expected >= {min_pps}"))
                }
            }
            CheckKind::CommandGap { topic, max_s } => match v.command_gaps.get(topic) {
                Some(gap) if gap.is_finite() && gap <= max_s => {
                    CheckOutcome::ok(format!("{topic}: last message {:.0} ms ago", gap * 1e3))
                }
                Some(gap) if gap.is_finite() => {
                    CheckOutcome::error(format!("{topic}: no message for {:.0} ms", gap * 1e3))
                }
                _ => CheckOutcome::error(format!("{topic}: no data received")),
            },
            CheckKind::SupervisorAllRunning => {
                if v.system_resetting {
                    CheckOutcome::error("system reset in progress")
                } else if v.not_running.is_empty() {
                    CheckOutcome::ok("all processes running")
                } else {
                    CheckOutcome::error(format!("not running: {}", v.not_running.join(", ")))
                }
            }
            CheckKind::EStopDisengaged => {
                if v.estop_engaged {
                    CheckOutcome::error("E-stop engaged")
                } else {
                    CheckOutcome::ok("E-stop released")
                }
            }
            CheckKind::Fixture { outcome } => outcome.clone(),
        }
    }
}

impl CheckSpec {
    /// Parses `check <name> side=<operator|avatar> kind=<...> [options]`.
    pub(crate) fn from_directive(d: &Directive) -> Result<Self, ConfigError> {
        let name = d.arg(0)?.to_string();
        let side: Side = d.opt_parse("side")?;
        let kind = match d.opt("kind")? {
            "link_up" => CheckKind::LinkUp {
                link: d.opt_parse("link")?,
                min_signal: d.opt_parse_or("min_signal", 0.0)?,
            },
            "group_rate" => CheckKind::GroupRate {
                group: d.opt("group")?.to_string(),
                min_pps: d.opt_parse("min_pps")?,
            },
            "command_gap" => CheckKind::CommandGap {
                topic: d.opt("topic")?.to_string(),
                max_s: d.opt_parse::<f64>("max_ms")? / 1e3,
            },
            "supervisor" => CheckKind::SupervisorAllRunning,
            "estop" => CheckKind::EStopDisengaged,
            "fixture" => {
                let message = d.opts.get("message").cloned().unwrap_or_default();
                let outcome = match d.opt("status")? {
                    "ok" => CheckOutcome::ok(message),
                    "warn" => CheckOutcome::warn(message),
                    "error" => CheckOutcome::error(message),
                    other => return Err(ConfigError::syntax(d.line, format!("bad fixture status {other:?}"))),
                };
                CheckKind::Fixture { outcome }
            }
            other => return Err(ConfigError::syntax(d.line, format!("unknown check kind {other:?}"))),
        };
        Ok(CheckSpec { name, side, kind })
    }
}

pub fn register_all(reg: &mut CheckRegistry<SystemView>, specs: &[CheckSpec]) -> Result<(), SysmonError> {
    for spec in specs {
        let kind = spec.kind.clone();
        reg.register_check(&spec.name, spec.side, move |v: &SystemView| kind.evaluate(v))?;
    }
    Ok(())
}
