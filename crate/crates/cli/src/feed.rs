//! Messages on the `/feed` WebSocket. See docs/feed-schema.md.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use telelink::config::LinkSet;
use telelink::linksim::{Action, SafetyView};
use telelink::sysmon::{CheckResult, Verdict};
use telelink::telemetry::NetworkOverview;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeedKind {
    Overview,
    Checks,
    Safety,
    Ack,
    Error,
}

#[derive(Debug, Serialize)]
pub struct FeedMessage {
    pub schema_version: u32,
    pub kind: FeedKind,
    pub seq: u64,
    pub server_time_ns: u64,
    pub payload: Value,
}

#[derive(Debug, Serialize)]
pub struct ChecksPayload<'a> {
    pub results: &'a [CheckResult],
    pub verdict: &'a Verdict,
}

/// One full-state publication: everything a fresh client needs.
#[derive(Debug)]
pub struct Snapshot {
    pub time_ns: u64,
    pub overview: Value,
    pub checks: Value,
    pub safety: Value,
}

impl Snapshot {
    pub fn new(overview: &NetworkOverview, checks: &[CheckResult], verdict: &Verdict, safety: &SafetyView) -> Self {
        let json = |v: Result<Value, serde_json::Error>| v.expect("feed payloads serialize");
        Snapshot {
            time_ns: overview.time_ns,
            overview: json(serde_json::to_value(overview)),
            checks: json(serde_json::to_value(ChecksPayload {
                results: checks,
                verdict,
            })),
            safety: json(serde_json::to_value(safety)),
        }
    }

    pub fn parts(&self) -> [(FeedKind, &Value); 3] {
        [
            (FeedKind::Overview, &self.overview),
            (FeedKind::Checks, &self.checks),
            (FeedKind::Safety, &self.safety),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Crash,
    Hang,
    Syshang,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind")]
pub enum CommandKind {
    SetGroupLinks { group: String, links: LinkSet },
    EStopEngage,
    EStopRelease,
    InjectFault { fault: FaultKind, target: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ControlCommand {
    pub command_id: u64,
    #[serde(flatten)]
    pub kind: CommandKind,
}

impl CommandKind {
    pub fn to_action(&self) -> Result<Action, String> {
        let target = |t: &Option<String>| t.clone().ok_or_else(|| "this fault needs a target process".to_string());
        Ok(match self {
            CommandKind::SetGroupLinks { group, links } => {
                if links.is_empty() {
                    return Err("a group needs at least one link".into());
                }
                Action::Route {
                    group: group.clone(),
                    links: *links,
                }
            }
            CommandKind::EStopEngage => Action::EStopEngage,
            CommandKind::EStopRelease => Action::EStopRelease,
            CommandKind::InjectFault { fault, target: t } => match fault {
                FaultKind::Crash => Action::Crash(target(t)?),
                FaultKind::Hang => Action::Hang(target(t)?),
                FaultKind::Syshang => Action::SystemHang,
            },
        })
    }
}

#[derive(Debug, Serialize)]
pub struct AckPayload {
    pub command_id: u64,
}

#[derive(Debug, Serialize)]
pub struct ErrorPayload {
    pub command_id: Option<u64>,
    pub message: String,
}

/// Best-effort command id from a message that failed to parse.
pub fn salvage_command_id(text: &str) -> Option<u64> {
    serde_json::from_str::<Value>(text).ok()?.get("command_id")?.as_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use telelink::config::Link;

    #[test]
    fn parses_commands() {
        let c: ControlCommand =
            serde_json::from_str(r#"{"kind":"SetGroupLinks","command_id":4,"group":"hand_camera","links":["5g"]}"#).unwrap();
        assert_eq!(c.command_id, 4);
        assert_eq!(
            c.kind.to_action().unwrap(),
            Action::Route {
                group: "hand_camera".into(),
                links: LinkSet::only(Link::Link5GHz)
            }
        );
        let c: ControlCommand = serde_json::from_str(r#"{"kind":"EStopEngage","command_id":1}"#).unwrap();
        assert_eq!(c.kind, CommandKind::EStopEngage);
        let c: ControlCommand =
            serde_json::from_str(r#"{"kind":"InjectFault","command_id":2,"fault":"crash","target":"cameras"}"#).unwrap();
        assert_eq!(c.kind.to_action().unwrap(), Action::Crash("cameras".into()));
    }

    #[test]
    fn rejects_bad_commands() {
        assert!(serde_json::from_str::<ControlCommand>(r#"{"kind":"Reboot","command_id":1}"#).is_err());
        let empty: ControlCommand =
            serde_json::from_str(r#"{"kind":"SetGroupLinks","command_id":3,"group":"audio","links":[]}"#).unwrap();
        assert!(empty.kind.to_action().is_err());
        let untargeted: ControlCommand =
            serde_json::from_str(r#"{"kind":"InjectFault","command_id":5,"fault":"hang"}"#).unwrap();
        assert!(untargeted.kind.to_action().is_err());
        assert_eq!(salvage_command_id(r#"{"command_id":9,"kind":"?"}"#), Some(9));
        assert_eq!(salvage_command_id("not json"), None);
    }
}
