//! Topic and routing table.
//!
//! Line grammar (UTF-8, `#` starts a comment):
//!
//! ```text
//! topic <id> <name> dir=<down|up> mbits=<D.D> group=<name> links=<5g[,2g4]> mode=<latest|dedup> rate=<Hz|audio:<sr>/<buf>>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::sources::AudioConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate topic id {id}")]
    DuplicateTopicId { line: usize, id: u16 },
    #[error("line {line}: empty link set")]
    EmptyLinkSet { line: usize },
    #[error("line {line}: unknown link name {name:?}")]
    UnknownLinkName { line: usize, name: String },
    #[error("line {line}: group {group:?} already routed over {existing}, topic asks for {requested}")]
    GroupLinkMismatch {
        line: usize,
        group: String,
        existing: LinkSet,
        requested: LinkSet,
    },
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("link set must not be empty")]
    EmptyLinks,
}

impl ConfigError {
    pub fn syntax(line: usize, msg: impl Into<String>) -> Self {
        ConfigError::Syntax {
            line,
            msg: msg.into(),
        }
    }
}

/// One of the two radio links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Link {
    #[serde(rename = "5g")]
    Link5GHz,
    #[serde(rename = "2g4")]
    Link2GHz4,
}

impl Link {
    pub const ALL: [Link; 2] = [Link::Link5GHz, Link::Link2GHz4];

    pub fn name(self) -> &'static str {
        match self {
            Link::Link5GHz => "5g",
            Link::Link2GHz4 => "2g4",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Link::Link5GHz => 1,
            Link::Link2GHz4 => 2,
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "5g" => Ok(Link::Link5GHz),
            "2g4" => Ok(Link::Link2GHz4),
            other => Err(other.to_string()),
        }
    }
}

/// Set over the two links, iterated 5 GHz first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LinkSet(u8);

impl LinkSet {
    pub const EMPTY: LinkSet = LinkSet(0);
    pub const BOTH: LinkSet = LinkSet(3);

    pub fn only(link: Link) -> Self {
        LinkSet(link.bit())
    }

    pub fn with(self, link: Link) -> Self {
        LinkSet(self.0 | link.bit())
    }

    pub fn contains(self, link: Link) -> bool {
        self.0 & link.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Link> {
        Link::ALL.into_iter().filter(move |l| self.contains(*l))
    }

    /// Parses `5g`, `2g4`, `5g,2g4`. An empty string gives the empty set.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut set = LinkSet::EMPTY;
        for part in s.split(',').filter(|p| !p.is_empty()) {
            set = set.with(part.parse()?);
        }
        Ok(set)
    }
}

impl FromIterator<Link> for LinkSet {
    fn from_iter<I: IntoIterator<Item = Link>>(iter: I) -> Self {
        iter.into_iter().fold(LinkSet::EMPTY, LinkSet::with)
    }
}

impl fmt::Display for LinkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Link::name).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for LinkSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LinkSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let links = Vec::<Link>::deserialize(d)?;
        Ok(links.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Avatar to operator station.
    Downlink,
    /// Operator station to avatar.
    Uplink,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Downlink => "down",
            Direction::Uplink => "up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    /// Drop anything not newer than the last delivered message.
    LatestOnly,
    /// Deliver every distinct sequence once, in arrival order.
    DedupAnyOrder,
}

/// Bitrate in tenths of a Mbit/s, so table sums are exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mbits(u64);

impl Mbits {
    pub const ZERO: Mbits = Mbits(0);

    pub fn from_tenths(tenths: u64) -> Self {
        Mbits(tenths)
    }

    pub fn tenths(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub fn bits_per_second(self) -> f64 {
        self.0 as f64 * 100_000.0
    }
}

impl std::ops::Add for Mbits {
    type Output = Mbits;
    fn add(self, rhs: Mbits) -> Mbits {
        Mbits(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Mbits {
    fn add_assign(&mut self, rhs: Mbits) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Mbits {
    fn sum<I: Iterator<Item = Mbits>>(iter: I) -> Mbits {
        iter.fold(Mbits::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Mbits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl FromStr for Mbits {
    type Err = String;

    /// Accepts `D` or `D.D` (at most one decimal place).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (whole, frac) = s.split_once('.').unwrap_or((s, "0"));
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(whole) || !digits(frac) || frac.len() != 1 {
            return Err(format!("expected a bitrate like 8.5, got {s:?}"));
        }
        let whole: u64 = whole.parse().map_err(|_| format!("bitrate {s:?} out of range"))?;
        Ok(Mbits(whole * 10 + u64::from(frac.as_bytes()[0] - b'0')))
    }
}

impl Serialize for Mbits {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

/// Message rate of a topic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rate {
    Hz(f64),
    Audio(AudioConfig),
}

impl Rate {
    pub fn hz(&self) -> f64 {
        match self {
            Rate::Hz(hz) => *hz,
            Rate::Audio(cfg) => crate::sources::audio_packet_rate(cfg),
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Hz(hz) => write!(f, "{hz}"),
            Rate::Audio(cfg) => write!(f, "audio:{}/{}", cfg.sample_rate_hz, cfg.buffer_samples),
        }
    }
}

impl FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("audio:") {
            let (sr, buf) = rest
                .split_once('/')
                .ok_or_else(|| format!("expected audio:<rate>/<buffer>, got {s:?}"))?;
            let sample_rate_hz: u32 = sr.parse().map_err(|_| format!("bad sample rate {sr:?}"))?;
            let buffer_samples: u32 = buf.parse().map_err(|_| format!("bad buffer size {buf:?}"))?;
            if sample_rate_hz == 0 || buffer_samples == 0 {
                return Err(format!("audio rate parameters must be positive in {s:?}"));
            }
            return Ok(Rate::Audio(AudioConfig {
                sample_rate_hz,
                buffer_samples,
                ..AudioConfig::default()
            }));
        }
        let hz: f64 = s.parse().map_err(|_| format!("bad rate {s:?}"))?;
        if !(hz.is_finite() && hz > 0.0) {
            return Err(format!("rate must be positive, got {s:?}"));
        }
        Ok(Rate::Hz(hz))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicSpec {
    pub topic_id: u16,
    pub name: String,
    pub direction: Direction,
    pub nominal_mbits: Mbits,
    pub group: String,
    pub links: LinkSet,
    pub delivery_mode: DeliveryMode,
    pub rate: Rate,
}

impl fmt::Display for TopicSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.delivery_mode {
            DeliveryMode::LatestOnly => "latest",
            DeliveryMode::DedupAnyOrder => "dedup",
        };
        write!(
            f,
            "topic {} {} dir={} mbits={} group={} links={} mode={} rate={}",
            self.topic_id,
            self.name,
            self.direction.name(),
            self.nominal_mbits,
            self.group,
            self.links,
            mode,
            self.rate
        )
    }
}

/// Validated topic table. Immutable; edits return a new table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TopicTable {
    topics: Vec<TopicSpec>,
    groups: BTreeMap<String, BTreeSet<u16>>,
}

impl TopicTable {
    /// Builds a table, enforcing unique ids, nonempty link sets and uniform
    /// links within each group. `line` numbers in errors are 1-based indices
    /// into `topics`.
    pub fn from_topics(topics: Vec<TopicSpec>) -> Result<Self, ConfigError> {
        let mut table = TopicTable::default();
        for (i, t) in topics.into_iter().enumerate() {
            table.push(t, i + 1)?;
        }
        Ok(table)
    }

    fn push(&mut self, topic: TopicSpec, line: usize) -> Result<(), ConfigError> {
        if topic.links.is_empty() {
            return Err(ConfigError::EmptyLinkSet { line });
        }
        if self.get(topic.topic_id).is_some() {
            return Err(ConfigError::DuplicateTopicId {
                line,
                id: topic.topic_id,
            });
        }
        if let Some(existing) = self.group_links(&topic.group) {
            if existing != topic.links {
                return Err(ConfigError::GroupLinkMismatch {
                    line,
                    group: topic.group.clone(),
                    existing,
                    requested: topic.links,
                });
            }
        }
        self.groups
            .entry(topic.group.clone())
            .or_default()
            .insert(topic.topic_id);
        self.topics.push(topic);
        Ok(())
    }

    pub fn topics(&self) -> &[TopicSpec] {
        &self.topics
    }

    pub fn groups(&self) -> &BTreeMap<String, BTreeSet<u16>> {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn get(&self, topic_id: u16) -> Option<&TopicSpec> {
        self.topics.iter().find(|t| t.topic_id == topic_id)
    }

    pub fn by_name(&self, name: &str) -> Option<&TopicSpec> {
        self.topics.iter().find(|t| t.name == name)
    }

    pub fn group_links(&self, group: &str) -> Option<LinkSet> {
        let id = self.groups.get(group)?.iter().next()?;
        self.get(*id).map(|t| t.links)
    }

    /// Returns a copy with every topic of `group` routed over `links`.
    pub fn set_group_links(&self, group: &str, links: LinkSet) -> Result<TopicTable, ConfigError> {
        if !self.groups.contains_key(group) {
            return Err(ConfigError::UnknownGroup(group.to_string()));
        }
        if links.is_empty() {
            return Err(ConfigError::EmptyLinks);
        }
        let mut next = self.clone();
        for t in next.topics.iter_mut().filter(|t| t.group == group) {
            t.links = links;
        }
        Ok(next)
    }

    /// Per (direction, link) sum of the nominal bitrate of every topic routed
    /// over that link. A topic on both links counts on each.
    pub fn aggregate_bandwidth(&self) -> BTreeMap<(Direction, Link), Mbits> {
        let mut totals = BTreeMap::new();
        for dir in [Direction::Downlink, Direction::Uplink] {
            for link in Link::ALL {
                totals.insert((dir, link), Mbits::ZERO);
            }
        }
        for t in &self.topics {
            for link in t.links.iter() {
                *totals.get_mut(&(t.direction, link)).expect("all keys seeded") += t.nominal_mbits;
            }
        }
        totals
    }
}

impl fmt::Display for TopicTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.topics {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}

/// A tokenized directive line: keyword, positional words and `key=value`
/// options. Values may be double-quoted to include spaces.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Directive {
    pub line: usize,
    pub keyword: String,
    pub args: Vec<String>,
    pub opts: BTreeMap<String, String>,
}

impl Directive {
    pub fn opt(&self, key: &str) -> Result<&str, ConfigError> {
        self.opts
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::syntax(self.line, format!("missing {key}=")))
    }

    pub fn opt_parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.opt(key)?;
        raw.parse()
            .map_err(|_| ConfigError::syntax(self.line, format!("bad value for {key}: {raw:?}")))
    }

    pub fn opt_parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        if self.opts.contains_key(key) {
            self.opt_parse(key)
        } else {
            Ok(default)
        }
    }

    pub fn arg(&self, i: usize) -> Result<&str, ConfigError> {
        self.args
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::syntax(self.line, format!("{} needs more arguments", self.keyword)))
    }
}

fn split_words(line: &str, line_no: usize) -> Result<Vec<String>, ConfigError> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut has_word = false;
    for c in line.chars() {
        match c {
            '"' => {
                in_quotes = !in_quotes;
                has_word = true;
            }
            '#' if !in_quotes => break,
            c if c.is_whitespace() && !in_quotes => {
                if has_word {
                    words.push(std::mem::take(&mut cur));
                    has_word = false;
                }
            }
            c => {
                cur.push(c);
                has_word = true;
            }
        }
    }
    if in_quotes {
        return Err(ConfigError::syntax(line_no, "unterminated quote"));
    }
    if has_word {
        words.push(cur);
    }
    Ok(words)
}

fn is_option_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub(crate) fn tokenize(text: &str) -> Result<Vec<Directive>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let words = split_words(raw, line)?;
        let Some((keyword, rest)) = words.split_first() else {
            continue;
        };
        let mut args = Vec::new();
        let mut opts = BTreeMap::new();
        for w in rest {
            match w.split_once('=').filter(|(k, _)| is_option_key(k)) {
                Some((k, v)) => {
                    if opts.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(ConfigError::syntax(line, format!("repeated option {k}")));
                    }
                }
                None => args.push(w.clone()),
            }
        }
        out.push(Directive {
            line,
            keyword: keyword.clone(),
            args,
            opts,
        });
    }
    Ok(out)
}

pub(crate) fn parse_topic_directive(d: &Directive) -> Result<TopicSpec, ConfigError> {
    let line = d.line;
    if d.args.len() != 2 {
        return Err(ConfigError::syntax(line, "expected `topic <id> <name> ...`"));
    }
    let topic_id: u16 = d.args[0]
        .parse()
        .map_err(|_| ConfigError::syntax(line, format!("bad topic id {:?}", d.args[0])))?;
    let direction = match d.opt("dir")? {
        "down" => Direction::Downlink,
        "up" => Direction::Uplink,
        other => return Err(ConfigError::syntax(line, format!("bad dir {other:?}"))),
    };
    let nominal_mbits: Mbits = d.opt("mbits")?.parse().map_err(|e: String| ConfigError::syntax(line, e))?;
    let links = LinkSet::parse(d.opt("links")?)
        .map_err(|name| ConfigError::UnknownLinkName { line, name })?;
    if links.is_empty() {
        return Err(ConfigError::EmptyLinkSet { line });
    }
    let delivery_mode = match d.opt("mode")? {
        "latest" => DeliveryMode::LatestOnly,
        "dedup" => DeliveryMode::DedupAnyOrder,
        other => return Err(ConfigError::syntax(line, format!("bad mode {other:?}"))),
    };
    let rate: Rate = d.opt("rate")?.parse().map_err(|e: String| ConfigError::syntax(line, e))?;
    let known = ["dir", "mbits", "group", "links", "mode", "rate"];
    if let Some(k) = d.opts.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(ConfigError::syntax(line, format!("unknown option {k}")));
    }
    Ok(TopicSpec {
        topic_id,
        name: d.args[1].clone(),
        direction,
        nominal_mbits,
        group: d.opt("group")?.to_string(),
        links,
        delivery_mode,
        rate,
    })
}

/// Parses and validates a topic table. An empty text is a valid empty table.
pub fn parse_topic_table(text: &str) -> Result<TopicTable, ConfigError> {
    let mut table = TopicTable::default();
    for d in tokenize(text)? {
        if d.keyword != "topic" {
            return Err(ConfigError::syntax(d.line, format!("unknown directive {:?}", d.keyword)));
        }
        let topic = parse_topic_directive(&d)?;
        table.push(topic, d.line)?;
    }
    Ok(table)
}
