//! Browser bindings for three calculations: the per-band bandwidth budget
//! under a chosen routing, the simulated redundancy gain, and audio packet
//! pacing. The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers return JSON strings to JavaScript.

use std::collections::BTreeMap;

use serde::Serialize;
use telelink::config::{parse_topic_table, Direction, Link, LinkSet, TopicTable};
use telelink::linksim::{run_scenario, Scenario};
use telelink::sources::{audio_packet_rate, AudioConfig};
use wasm_bindgen::prelude::*;

pub const FINALS_TABLE: &str = include_str!("../../../configs/finals.cfg");

/// Largest redundancy experiment the page may request.
pub const MAX_MESSAGES: u32 = 200_000;

#[derive(Debug, Serialize)]
pub struct GroupRoute {
    pub group: String,
    pub links: LinkSet,
}

#[derive(Debug, Serialize)]
pub struct BandTotal {
    pub direction: Direction,
    pub link: Link,
    pub mbits: f64,
}

#[derive(Debug, Serialize)]
pub struct Budget {
    pub groups: Vec<GroupRoute>,
    pub totals: Vec<BandTotal>,
}

/// Nominal per-band totals of `table` after applying `routes`.
pub fn budget(table: &str, routes: &BTreeMap<String, LinkSet>) -> Result<Budget, String> {
    let mut table: TopicTable = parse_topic_table(table).map_err(|e| e.to_string())?;
    for (group, links) in routes {
        table = table.set_group_links(group, *links).map_err(|e| e.to_string())?;
    }
    let groups = table
        .groups()
        .keys()
        .map(|g| GroupRoute {
            group: g.clone(),
            links: table.group_links(g).unwrap_or_default(),
        })
        .collect();
    let totals = table
        .aggregate_bandwidth()
        .into_iter()
        .map(|((direction, link), m)| BandTotal {
            direction,
            link,
            mbits: m.as_f64(),
        })
        .collect();
    Ok(Budget { groups, totals })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Gain {
    pub messages: u32,
    /// Delivery ratio with every message on both links.
    pub redundant: f64,
    /// Delivery ratio on the 5 GHz link alone.
    pub single: f64,
    /// `1 - p1 * p2`, valid for independent losses.
    pub analytic_redundant: f64,
    pub analytic_single: f64,
}

/// Sends `messages` small messages at 1 kHz through the simulator twice
/// over: once on both links and once on 5 GHz only.
pub fn redundancy(p5: f64, p24: f64, correlation: f64, messages: u32, seed: u64) -> Result<Gain, String> {
    for (name, p) in [("loss 5g", p5), ("loss 2g4", p24), ("correlation", correlation)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("{name} must be within [0, 1]"));
        }
    }
    if messages == 0 || messages > MAX_MESSAGES {
        return Err(format!("messages must be between 1 and {MAX_MESSAGES}"));
    }
    let table = parse_topic_table(
        "topic 1 redundant dir=down mbits=0.8 group=redundant links=5g,2g4 mode=dedup rate=1000\n\
         topic 2 single dir=down mbits=0.8 group=single links=5g mode=dedup rate=1000\n",
    )
    .map_err(|e| e.to_string())?;
    let mut sc = Scenario::new("redundancy", f64::from(messages) / 1000.0, seed, table);
    sc.profile_mut(Link::Link5GHz).loss_prob = p5;
    sc.profile_mut(Link::Link2GHz4).loss_prob = p24;
    sc.loss_correlation = correlation;
    let report = run_scenario(&sc).map_err(|e| e.to_string())?;
    let ratio = |name: &str| report.topic(name).map_or(0.0, |t| t.delivery_ratio);
    Ok(Gain {
        messages: report.topic("redundant").map_or(0, |t| t.sent_messages as u32),
        redundant: ratio("redundant"),
        single: ratio("single"),
        analytic_redundant: 1.0 - p5 * p24,
        analytic_single: 1.0 - p5,
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct AudioPacing {
    pub packets_per_s: f64,
    pub interval_ms: f64,
    pub packet_bytes: u64,
}

pub fn audio(sample_rate_hz: u32, buffer_samples: u32) -> Result<AudioPacing, String> {
    if sample_rate_hz == 0 || buffer_samples == 0 {
        return Err("sample rate and buffer size must be positive".into());
    }
    let cfg = AudioConfig {
        sample_rate_hz,
        buffer_samples,
        ..AudioConfig::default()
    };
    Ok(AudioPacing {
        packets_per_s: audio_packet_rate(&cfg),
        interval_ms: cfg.packet_interval_s() * 1e3,
        packet_bytes: cfg.raw_packet_bytes(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn finals_table() -> String {
    FINALS_TABLE.to_string()
}

/// `routes` is a JSON object mapping group names to link lists,
/// e.g. `{"hand_camera": ["5g"]}`.
#[wasm_bindgen]
pub fn bandwidth_budget(table: &str, routes: &str) -> Result<String, JsValue> {
    let routes: Result<BTreeMap<String, LinkSet>, String> =
        serde_json::from_str(routes).map_err(|e| format!("bad routes: {e}"));
    to_js(routes.and_then(|r| budget(table, &r)))
}

#[wasm_bindgen]
pub fn redundancy_gain(p5: f64, p24: f64, correlation: f64, messages: u32, seed: u32) -> Result<String, JsValue> {
    to_js(redundancy(p5, p24, correlation, messages, u64::from(seed)))
}

#[wasm_bindgen]
pub fn audio_pacing(sample_rate_hz: u32, buffer_samples: u32) -> Result<String, JsValue> {
    to_js(audio(sample_rate_hz, buffer_samples))
}
