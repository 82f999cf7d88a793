//! Scenario files.
//!
//! Same line grammar as the topic table; `#` starts a comment and times are
//! in seconds unless the option name says otherwise.
//!
//! ```text
//! scenario <name> duration=<s> seed=<u64>
//! table <path>                      # topic table, relative to the scenario file
//! topic ...                         # or inline topic lines
//! route <group> links=<5g[,2g4]> [at=<s>]
//! link <5g|2g4> [latency=<ms>] [loss=<p>] [cap=<mbit/s|none>] [signal=<v>]
//! signal <5g|2g4> at=<s> value=<v>
//! burst <5g|2g4> at=<s> dur=<s> [latency=<ms>] [loss=<p>]
//! outage <5g|2g4|all> at=<s> dur=<s>
//! correlation <rho>
//! command_group <group>
//! process <name>
//! fault crash <process> at=<s>
//! fault hang <process> at=<s>
//! fault syshang at=<s>
//! estop at=<s>
//! estop release at=<s>
//! estop_radio lost at=<s> | estop_radio ok at=<s>
//! collision <left|right> force=<f> at=<s>
//! force <left|right> <f> at=<s>
//! restart_receiver <avatar|operator> at=<s>
//! check <name> side=<...> kind=<...> ...   # replaces the stock checks
//! checks none                       # no checks at all
//! expect <metric> <op> <value> [tol=<relative>]
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::link::{ms_to_ns, secs_to_ns, JitterBurst, LinkProfile, Outage};
use crate::config::{parse_topic_directive, parse_topic_table, tokenize, ConfigError, Directive, Link, LinkSet, TopicTable};
use crate::safety::{ArmId, SafetyConfig};
use crate::sysmon::builtin::{CheckKind, CheckSpec};
use crate::sysmon::Side;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(d: &Directive, msg: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Invalid(format!("line {}: {msg}", d.line))
}

/// Which endpoint of the transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Endpoint {
    Avatar,
    Operator,
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avatar" => Ok(Endpoint::Avatar),
            "operator" => Ok(Endpoint::Operator),
            _ => Err(format!("unknown endpoint {s:?}")),
        }
    }
}

/// Something that happens to the running system at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Action {
    Crash(String),
    Hang(String),
    SystemHang,
    EStopEngage,
    EStopRelease,
    EStopRadio { lost: bool },
    Collision { arm: ArmId, force: f64 },
    Force { arm: ArmId, force: f64 },
    Route { group: String, links: LinkSet },
    RestartReceiver(Endpoint),
}

impl Action {
    pub(crate) fn is_estop(&self) -> bool {
        matches!(self, Action::EStopEngage | Action::EStopRelease)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledAction {
    pub time_ns: u64,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Approx,
}

impl FromStr for CmpOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            "~=" => CmpOp::Approx,
            _ => return Err(format!("unknown comparison {s:?}")),
        })
    }
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Approx => "~=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Expectation {
    pub metric: String,
    pub op: CmpOp,
    pub value: f64,
    /// Relative tolerance for `~=`.
    pub tol: f64,
}

impl Expectation {
    pub fn holds(&self, actual: f64) -> bool {
        match self.op {
            CmpOp::Eq => actual == self.value,
            CmpOp::Ne => actual != self.value,
            CmpOp::Lt => actual < self.value,
            CmpOp::Le => actual <= self.value,
            CmpOp::Gt => actual > self.value,
            CmpOp::Ge => actual >= self.value,
            CmpOp::Approx => (actual - self.value).abs() <= self.tol * self.value.abs(),
        }
    }
}

impl std::fmt::Display for Expectation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {}", self.metric, self.op.symbol(), self.value)?;
        if self.op == CmpOp::Approx {
            write!(f, " tol={}", self.tol)?;
        }
        Ok(())
    }
}

pub const DEFAULT_PROCESSES: [&str; 6] = ["transport", "arm_left", "arm_right", "cameras", "audio", "sysmon"];

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub duration_ns: u64,
    pub seed: u64,
    pub table: TopicTable,
    /// Indexed like `Link::ALL`.
    pub profiles: [LinkProfile; 2],
    pub loss_correlation: f64,
    pub command_group: String,
    pub processes: Vec<String>,
    pub checks: Vec<CheckSpec>,
    pub actions: Vec<ScheduledAction>,
    pub expects: Vec<Expectation>,
    pub safety: SafetyConfig,
}

pub(crate) fn link_index(link: Link) -> usize {
    match link {
        Link::Link5GHz => 0,
        Link::Link2GHz4 => 1,
    }
}

impl Scenario {
    /// Scenario with no topics, ideal links and the default process set.
    pub fn new(name: &str, duration_s: f64, seed: u64, table: TopicTable) -> Self {
        Scenario {
            name: name.to_string(),
            duration_ns: secs_to_ns(duration_s),
            seed,
            table,
            profiles: [LinkProfile::ideal(Link::Link5GHz), LinkProfile::ideal(Link::Link2GHz4)],
            loss_correlation: 0.0,
            command_group: "arm_control".to_string(),
            processes: DEFAULT_PROCESSES.iter().map(|s| s.to_string()).collect(),
            checks: Vec::new(),
            actions: Vec::new(),
            expects: Vec::new(),
            safety: SafetyConfig::default(),
        }
    }

    pub fn profile(&self, link: Link) -> &LinkProfile {
        &self.profiles[link_index(link)]
    }

    pub fn profile_mut(&mut self, link: Link) -> &mut LinkProfile {
        &mut self.profiles[link_index(link)]
    }

    pub fn schedule(&mut self, time_s: f64, action: Action) {
        self.actions.push(ScheduledAction {
            time_ns: secs_to_ns(time_s),
            action,
        });
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::parse(&text, path.parent())
    }

    /// Parses a scenario. `base_dir` resolves `table` paths; without it only
    /// inline topics are allowed.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let directives = tokenize(text)?;
        let mut sc = Scenario::new("unnamed", 10.0, 0, TopicTable::default());
        let mut topics = Vec::new();
        let mut table_file: Option<TopicTable> = None;
        let mut routes = Vec::new();
        let mut custom_processes = Vec::new();
        let mut signal_points: [Vec<(u64, f64)>; 2] = [Vec::new(), Vec::new()];
        let mut no_checks = false;

        for d in &directives {
            let at = || -> Result<f64, ScenarioError> {
                let t: f64 = d.opt_parse("at")?;
                if !(t.is_finite() && t >= 0.0) {
                    return Err(invalid(d, "at= must be a nonnegative time"));
                }
                Ok(t)
            };
            match d.keyword.as_str() {
                "scenario" => {
                    sc.name = d.arg(0)?.to_string();
                    sc.duration_ns = secs_to_ns(nonneg(d, "duration", d.opt_parse("duration")?)?);
                    sc.seed = d.opt_parse_or("seed", 0)?;
                }
                "table" => {
                    let Some(dir) = base_dir else {
                        return Err(invalid(d, "table files need a scenario path"));
                    };
                    let path = dir.join(d.arg(0)?);
                    let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })?;
                    table_file = Some(parse_topic_table(&text)?);
                }
                "topic" => topics.push((parse_topic_directive(d)?, d.line)),
                "route" => {
                    let group = d.arg(0)?.to_string();
                    let links = LinkSet::parse(d.opt("links")?).map_err(|n| invalid(d, format!("unknown link {n:?}")))?;
                    if links.is_empty() {
                        return Err(invalid(d, "empty link set"));
                    }
                    if d.opts.contains_key("at") {
                        sc.schedule(at()?, Action::Route { group, links });
                    } else {
                        routes.push((group, links, d.line));
                    }
                }
                "link" => {
                    let link: Link = parse_arg(d, 0)?;
                    let p = sc.profile_mut(link);
                    p.base_latency_ns = ms_to_ns(nonneg(d, "latency", d.opt_parse_or("latency", 0.0)?)?);
                    p.loss_prob = d.opt_parse_or("loss", 0.0)?;
                    p.bandwidth_cap_mbits = match d.opts.get("cap").map(String::as_str) {
                        None | Some("none") => None,
                        Some(_) => Some(d.opt_parse("cap")?),
                    };
                    if d.opts.contains_key("signal") {
                        p.signal = vec![(0, d.opt_parse("signal")?)];
                    }
                }
                "signal" => {
                    let link: Link = parse_arg(d, 0)?;
                    signal_points[link_index(link)].push((secs_to_ns(at()?), d.opt_parse("value")?));
                }
                "burst" => {
                    let link: Link = parse_arg(d, 0)?;
                    let burst = JitterBurst {
                        start_ns: secs_to_ns(at()?),
                        duration_ns: secs_to_ns(nonneg(d, "dur", d.opt_parse("dur")?)?),
                        added_latency_ns: ms_to_ns(nonneg(d, "latency", d.opt_parse_or("latency", 0.0)?)?),
                        loss_prob: d.opt_parse_or("loss", 0.0)?,
                    };
                    sc.profile_mut(link).jitter_bursts.push(burst);
                }
                "outage" => {
                    let outage = Outage {
                        start_ns: secs_to_ns(at()?),
                        duration_ns: secs_to_ns(nonneg(d, "dur", d.opt_parse("dur")?)?),
                    };
                    let links = match d.arg(0)? {
                        "all" => LinkSet::BOTH,
                        other => LinkSet::only(other.parse().map_err(|e| invalid(d, e))?),
                    };
                    for link in links.iter() {
                        sc.profile_mut(link).outages.push(outage);
                    }
                }
                "correlation" => {
                    let rho: f64 = parse_arg(d, 0)?;
                    if !(0.0..=1.0).contains(&rho) {
                        return Err(invalid(d, "correlation must lie in [0, 1]"));
                    }
                    sc.loss_correlation = rho;
                }
                "command_group" => sc.command_group = d.arg(0)?.to_string(),
                "process" => custom_processes.push(d.arg(0)?.to_string()),
                "fault" => {
                    let action = match d.arg(0)? {
                        "crash" => Action::Crash(d.arg(1)?.to_string()),
                        "hang" => Action::Hang(d.arg(1)?.to_string()),
                        "syshang" => Action::SystemHang,
                        other => return Err(invalid(d, format!("unknown fault {other:?}"))),
                    };
                    sc.schedule(at()?, action);
                }
                "estop" => {
                    let action = match d.args.first().map(String::as_str) {
                        None | Some("engage") => Action::EStopEngage,
                        Some("release") => Action::EStopRelease,
                        Some(other) => return Err(invalid(d, format!("unknown estop action {other:?}"))),
                    };
                    sc.schedule(at()?, action);
                }
                "estop_radio" => {
                    let lost = match d.arg(0)? {
                        "lost" => true,
                        "ok" => false,
                        other => return Err(invalid(d, format!("unknown radio state {other:?}"))),
                    };
                    sc.schedule(at()?, Action::EStopRadio { lost });
                }
                "collision" => {
                    let arm: ArmId = parse_arg(d, 0)?;
                    let force = nonneg(d, "force", d.opt_parse("force")?)?;
                    sc.schedule(at()?, Action::Collision { arm, force });
                }
                "force" => {
                    let arm: ArmId = parse_arg(d, 0)?;
                    let force = nonneg(d, "force", parse_arg(d, 1)?)?;
                    sc.schedule(at()?, Action::Force { arm, force });
                }
                "restart_receiver" => {
                    let ep: Endpoint = parse_arg(d, 0)?;
                    sc.schedule(at()?, Action::RestartReceiver(ep));
                }
                "check" => sc.checks.push(CheckSpec::from_directive(d)?),
                "checks" => match d.arg(0)? {
                    "none" => no_checks = true,
                    other => return Err(invalid(d, format!("expected `checks none`, got {other:?}"))),
                },
                "expect" => {
                    if d.args.len() != 3 {
                        return Err(invalid(d, "expected `expect <metric> <op> <value>`"));
                    }
                    sc.expects.push(Expectation {
                        metric: d.args[0].clone(),
                        op: parse_arg(d, 1)?,
                        value: parse_arg(d, 2)?,
                        tol: d.opt_parse_or("tol", 0.0)?,
                    });
                }
                other => return Err(invalid(d, format!("unknown directive {other:?}"))),
            }
        }

        if table_file.is_some() && !topics.is_empty() {
            return Err(ScenarioError::Invalid("use either a table file or inline topics, not both".into()));
        }
        let mut table = match table_file {
            Some(t) => t,
            None => {
                let lines: Vec<usize> = topics.iter().map(|(_, l)| *l).collect();
                TopicTable::from_topics(topics.into_iter().map(|(t, _)| t).collect()).map_err(|e| {
                    // from_topics numbers topics from 1; map back to file lines
                    ScenarioError::Invalid(remap_line(&e, &lines))
                })?
            }
        };
        for (group, links, line) in routes {
            table = table
                .set_group_links(&group, links)
                .map_err(|e| ScenarioError::Invalid(format!("line {line}: {e}")))?;
        }
        sc.table = table;
        for (i, pts) in signal_points.into_iter().enumerate() {
            if !pts.is_empty() {
                let p = &mut sc.profiles[i];
                p.signal.retain(|(t, _)| !pts.iter().any(|(pt, _)| pt == t));
                p.signal.extend(pts);
                p.signal.sort_by_key(|(t, _)| *t);
            }
        }
        if !custom_processes.is_empty() {
            sc.processes = custom_processes;
        }
        if no_checks && !sc.checks.is_empty() {
            return Err(ScenarioError::Invalid("`checks none` conflicts with check lines".into()));
        }
        if sc.checks.is_empty() && !no_checks {
            sc.checks = default_checks(&sc.table, &sc.command_group);
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration_ns == 0 {
            return Err(ScenarioError::Invalid("duration must be positive".into()));
        }
        for p in &self.profiles {
            p.validate().map_err(ScenarioError::Invalid)?;
        }
        let mut procs = self.processes.clone();
        procs.sort();
        procs.dedup();
        if procs.len() != self.processes.len() {
            return Err(ScenarioError::Invalid("duplicate process name".into()));
        }
        for a in &self.actions {
            match &a.action {
                Action::Crash(p) | Action::Hang(p) if !self.processes.contains(p) => {
                    return Err(ScenarioError::Invalid(format!("fault names unknown process {p:?}")));
                }
                Action::Route { group, .. } if self.table.group_links(group).is_none() => {
                    return Err(ScenarioError::Invalid(format!("route names unknown group {group:?}")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn remap_line(e: &ConfigError, lines: &[usize]) -> String {
    let fix = |i: usize| lines.get(i.wrapping_sub(1)).copied().unwrap_or(i);
    match e.clone() {
        ConfigError::DuplicateTopicId { line, id } => ConfigError::DuplicateTopicId { line: fix(line), id },
        ConfigError::GroupLinkMismatch {
            line,
            group,
            existing,
            requested,
        } => ConfigError::GroupLinkMismatch {
            line: fix(line),
            group,
            existing,
            requested,
        },
        other => other,
    }
    .to_string()
}

fn nonneg(d: &Directive, key: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(d, format!("{key} must be a nonnegative number")))
    }
}

fn parse_arg<T: FromStr>(d: &Directive, i: usize) -> Result<T, ScenarioError> {
    let raw = d.arg(i)?;
    raw.parse().map_err(|_| invalid(d, format!("bad argument {raw:?}")))
}

/// Stock checks used when a scenario declares none.
pub fn default_checks(table: &TopicTable, command_group: &str) -> Vec<CheckSpec> {
    let mut out = vec![
        CheckSpec {
            name: "wifi_5g".into(),
            side: Side::Avatar,
            kind: CheckKind::LinkUp {
                link: Link::Link5GHz,
                min_signal: 0.3,
            },
        },
        CheckSpec {
            name: "wifi_2g4".into(),
            side: Side::Avatar,
            kind: CheckKind::LinkUp {
                link: Link::Link2GHz4,
                min_signal: 0.3,
            },
        },
    ];
    let commands = table
        .topics()
        .iter()
        .filter(|t| t.group == command_group && t.direction == crate::config::Direction::Uplink);
    for t in commands {
        out.push(CheckSpec {
            name: format!("{}_gap", t.name),
            side: Side::Avatar,
            kind: CheckKind::CommandGap {
                topic: t.name.clone(),
                max_s: 0.1,
            },
        });
    }
    out.push(CheckSpec {
        name: "processes".into(),
        side: Side::Avatar,
        kind: CheckKind::SupervisorAllRunning,
    });
    out.push(CheckSpec {
        name: "estop".into(),
        side: Side::OperatorStation,
        kind: CheckKind::EStopDisengaged,
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const INLINE: &str = "\
scenario demo duration=2.5 seed=9
topic 1 cmd dir=up mbits=4.9 group=arm_control links=5g,2g4 mode=latest rate=1000
topic 2 cam dir=down mbits=5.5 group=hand_camera links=2g4 mode=dedup rate=30
route hand_camera links=5g
route arm_control links=5g at=1.0
link 5g latency=2 loss=0.01 cap=100
link 2g4 latency=3 signal=0.8
signal 2g4 at=2 value=0.2
burst 5g at=0.5 dur=0.3 latency=40 loss=1.0
outage all at=1 dur=0.5
fault crash cameras at=0.2
estop at=1.5
estop release at=2
collision left force=1.0 at=0.7
expect arm_disables >= 1
expect down_5g_mbits ~= 5.5 tol=0.02
";

    #[test]
    fn parses_inline_scenario() {
        let sc = Scenario::parse(INLINE, None).unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.duration_ns, 2_500_000_000);
        assert_eq!(sc.seed, 9);
        assert_eq!(sc.table.group_links("hand_camera"), Some(LinkSet::only(Link::Link5GHz)));
        assert_eq!(sc.table.group_links("arm_control"), Some(LinkSet::BOTH));
        let p5 = sc.profile(Link::Link5GHz);
        assert_eq!(p5.base_latency_ns, 2_000_000);
        assert_eq!(p5.bandwidth_cap_mbits, Some(100.0));
        assert_eq!(p5.jitter_bursts.len(), 1);
        assert_eq!(p5.outages.len(), 1);
        assert_eq!(sc.profile(Link::Link2GHz4).signal, vec![(0, 0.8), (2_000_000_000, 0.2)]);
        assert_eq!(sc.actions.len(), 5);
        assert_eq!(sc.expects.len(), 2);
        assert!(sc.expects[1].holds(5.6) && !sc.expects[1].holds(5.7));
        assert!(!sc.checks.is_empty());
    }

    #[test]
    fn rejects_bad_scenarios() {
        for bad in [
            "scenario x duration=0",
            "scenario x duration=1\nwarp 5g",
            "scenario x duration=1\nlink 7g",
            "scenario x duration=1\nlink 5g loss=2",
            "scenario x duration=1\nfault crash nobody at=1",
            "scenario x duration=1\nroute nothing links=5g at=1",
            "scenario x duration=1\nburst 5g at=-1 dur=1",
            "scenario x duration=1\nexpect a ?? 1",
            "scenario x duration=1\ntable finals.cfg",
            "scenario x duration=1\ncorrelation 3",
        ] {
            assert!(Scenario::parse(bad, None).is_err(), "{bad}");
        }
    }

    #[test]
    fn topic_errors_cite_file_lines() {
        let text = "scenario x duration=1\n\
                    topic 1 a dir=up mbits=1 group=g links=5g mode=dedup rate=10\n\
                    \n\
                    topic 1 b dir=up mbits=1 group=h links=5g mode=dedup rate=10\n";
        let err = Scenario::parse(text, None).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }
}
