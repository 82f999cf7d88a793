//! Live per-flow and per-link statistics.
//!
//! Rates use a 1 s sliding window of ten 100 ms buckets. Drops are estimated
//! on the receiving side from sequence gaps only, so no control channel is
//! needed.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::config::{Direction, Link, LinkSet, TopicTable};
use crate::transport::seq_newer;
use crate::wire::PacketHeader;

pub const BUCKET_NS: u64 = 100_000_000;
pub const WINDOW_BUCKETS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketDir {
    Sent,
    Received,
}

/// Sliding packet/byte counter over the last `WINDOW_BUCKETS` complete
/// buckets. The bucket in progress is kept but not reported.
#[derive(Debug, Clone, Default)]
pub struct RateWindow {
    // bucket number of buckets[newest]
    head: u64,
    newest: usize,
    packets: [u64; SLOTS],
    bytes: [u64; SLOTS],
}

const SLOTS: usize = WINDOW_BUCKETS + 1;

impl RateWindow {
    fn advance(&mut self, now_ns: u64) {
        let bucket = now_ns / BUCKET_NS;
        if bucket <= self.head {
            return;
        }
        let steps = (bucket - self.head).min(SLOTS as u64);
        for _ in 0..steps {
            self.newest = (self.newest + 1) % SLOTS;
            self.packets[self.newest] = 0;
            self.bytes[self.newest] = 0;
        }
        self.head = bucket;
    }

    pub fn record(&mut self, now_ns: u64, bytes: u64) {
        self.advance(now_ns);
        self.packets[self.newest] += 1;
        self.bytes[self.newest] += bytes;
    }

    /// Packets/s and Mbit/s over the complete buckets before the current one.
    pub fn rates(&mut self, now_ns: u64) -> (f64, f64) {
        self.advance(now_ns);
        let window_s = (WINDOW_BUCKETS as u64 * BUCKET_NS) as f64 * 1e-9;
        let done = |a: &[u64; SLOTS]| a.iter().sum::<u64>() - a[self.newest];
        let packets = done(&self.packets);
        let bytes = done(&self.bytes);
        (packets as f64 / window_s, bytes as f64 * 8.0 / window_s / 1e6)
    }
}

/// Receiver-side loss estimate from (seq, fragment) positions.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GapTracker {
    last: Option<(u32, u16, u16)>,
    pub est_dropped: u64,
    pub duplicates: u64,
    pub reordered: u64,
}

impl GapTracker {
    pub fn observe(&mut self, h: &PacketHeader) {
        let Some((seq, idx, count)) = self.last else {
            self.last = Some((h.seq, h.frag_index, h.frag_count));
            return;
        };
        let newer = if h.seq == seq {
            h.frag_index > idx
        } else {
            seq_newer(h.seq, seq)
        };
        if newer {
            if h.seq == seq {
                self.est_dropped += u64::from(h.frag_index - idx - 1);
            } else {
                // tail of the previous message, whole skipped messages
                // (assumed the same size as this one), head of this one
                let skipped = u64::from(h.seq.wrapping_sub(seq).wrapping_sub(1));
                self.est_dropped += u64::from(count.saturating_sub(idx + 1))
                    + skipped * u64::from(h.frag_count)
                    + u64::from(h.frag_index);
            }
            self.last = Some((h.seq, h.frag_index, h.frag_count));
        } else if (h.seq, h.frag_index) == (seq, idx) || h.flags.is_duplicate() {
            self.duplicates += 1;
        } else {
            self.reordered += 1;
        }
    }

    pub fn last_seq(&self) -> Option<u32> {
        self.last.map(|(s, _, _)| s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowStats {
    pub sent_window: RateWindow,
    pub recv_window: RateWindow,
    pub sent: u64,
    pub received: u64,
    pub gaps: GapTracker,
}

#[derive(Debug, Clone, Copy)]
pub struct LinkState {
    pub signal_strength: f64,
    pub up: bool,
}

impl Default for LinkState {
    fn default() -> Self {
        LinkState {
            signal_strength: 1.0,
            up: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowView {
    pub topic_id: u16,
    pub name: String,
    pub group: String,
    pub direction: Direction,
    pub link: Link,
    pub packets_per_s: f64,
    pub mbits: f64,
    pub sent_packets_per_s: f64,
    pub sent_mbits: f64,
    pub sent: u64,
    pub received: u64,
    pub est_dropped: u64,
    pub duplicates: u64,
    pub last_seq: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkView {
    pub link: Link,
    pub signal_strength: f64,
    pub up: bool,
    pub downlink_mbits: f64,
    pub uplink_mbits: f64,
    pub total_mbits: f64,
    pub packets_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteView {
    pub group: String,
    pub links: LinkSet,
}

/// Point-in-time copy of all flows, links and the routing table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkOverview {
    pub time_ns: u64,
    pub flows: Vec<FlowView>,
    pub links: Vec<LinkView>,
    pub routes: Vec<RouteView>,
}

impl NetworkOverview {
    pub fn link(&self, link: Link) -> Option<&LinkView> {
        self.links.iter().find(|l| l.link == link)
    }
}

pub struct Telemetry {
    table: Arc<TopicTable>,
    flows: BTreeMap<(u16, Link), FlowStats>,
    links: BTreeMap<Link, LinkState>,
}

impl Telemetry {
    pub fn new(table: Arc<TopicTable>) -> Self {
        Telemetry {
            table,
            flows: BTreeMap::new(),
            links: Link::ALL.into_iter().map(|l| (l, LinkState::default())).collect(),
        }
    }

    pub fn set_table(&mut self, table: Arc<TopicTable>) {
        self.table = table;
    }

    pub fn set_link_state(&mut self, link: Link, state: LinkState) {
        self.links.insert(
            link,
            LinkState {
                signal_strength: state.signal_strength.clamp(0.0, 1.0),
                up: state.up,
            },
        );
    }

    pub fn record_packet(&mut self, dir: PacketDir, link: Link, header: &PacketHeader, now_ns: u64) {
        let flow = self.flows.entry((header.topic_id, link)).or_default();
        let bytes = u64::from(header.payload_len);
        match dir {
            PacketDir::Sent => {
                flow.sent += 1;
                flow.sent_window.record(now_ns, bytes);
            }
            PacketDir::Received => {
                flow.received += 1;
                flow.recv_window.record(now_ns, bytes);
                flow.gaps.observe(header);
            }
        }
    }

    pub fn flow(&self, topic_id: u16, link: Link) -> Option<&FlowStats> {
        self.flows.get(&(topic_id, link))
    }

    pub fn snapshot(&mut self, now_ns: u64) -> NetworkOverview {
        let mut flows = Vec::new();
        for t in self.table.topics() {
            for link in Link::ALL {
                let Some(f) = self.flows.get_mut(&(t.topic_id, link)) else {
                    continue;
                };
                let (pps, mbits) = f.recv_window.rates(now_ns);
                let (sent_pps, sent_mbits) = f.sent_window.rates(now_ns);
                flows.push(FlowView {
                    topic_id: t.topic_id,
                    name: t.name.clone(),
                    group: t.group.clone(),
                    direction: t.direction,
                    link,
                    packets_per_s: pps,
                    mbits,
                    sent_packets_per_s: sent_pps,
                    sent_mbits,
                    sent: f.sent,
                    received: f.received,
                    est_dropped: f.gaps.est_dropped,
                    duplicates: f.gaps.duplicates,
                    last_seq: f.gaps.last_seq(),
                });
            }
        }
        let links = Link::ALL
            .into_iter()
            .map(|link| {
                let state = self.links[&link];
                let on_link = flows.iter().filter(|f| f.link == link);
                let sum_dir = |d| {
                    flows
                        .iter()
                        .filter(|f| f.link == link && f.direction == d)
                        .map(|f| f.mbits)
                        .sum::<f64>()
                };
                let downlink_mbits = sum_dir(Direction::Downlink);
                let uplink_mbits = sum_dir(Direction::Uplink);
                LinkView {
                    link,
                    signal_strength: state.signal_strength,
                    up: state.up,
                    downlink_mbits,
                    uplink_mbits,
                    total_mbits: downlink_mbits + uplink_mbits,
                    packets_per_s: on_link.map(|f| f.packets_per_s).sum(),
                }
            })
            .collect();
        let routes = self
            .table
            .groups()
            .keys()
            .map(|g| RouteView {
                group: g.clone(),
                links: self.table.group_links(g).unwrap_or_default(),
            })
            .collect();
        NetworkOverview {
            time_ns: now_ns,
            flows,
            links,
            routes,
        }
    }
}
