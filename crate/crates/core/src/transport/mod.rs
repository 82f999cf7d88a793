//! Connectionless sender/receiver pair.
//!
//! The sender fragments each message once and emits every fragment on every
//! link in the topic's link set. The receiver delivers each (topic, seq) at
//! most once, whichever copy arrives first. Neither side keeps any session
//! state, so a freshly created receiver accepts the first packet it sees.

mod udp;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::config::{DeliveryMode, Link, TopicTable};
use crate::wire::{self, FragmentStore, Flags, Message, Packet, WireError, MTU_PAYLOAD};

pub use udp::UdpTransport;

pub const DEFAULT_DEDUP_WINDOW: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("unknown topic {0}")]
    UnknownTopic(u16),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// `a` is newer than `b` iff `(a - b) mod 2^32` lies in `(0, 2^31)`.
pub fn seq_newer(a: u32, b: u32) -> bool {
    let d = a.wrapping_sub(b);
    d != 0 && d < 1 << 31
}

pub struct Sender {
    table: Arc<TopicTable>,
    next_seq: BTreeMap<u16, u32>,
    initial_seq: u32,
    mtu_payload: usize,
}

impl Sender {
    pub fn new(table: Arc<TopicTable>) -> Self {
        Sender {
            table,
            next_seq: BTreeMap::new(),
            initial_seq: 0,
            mtu_payload: MTU_PAYLOAD,
        }
    }

    /// First sequence number used on every topic.
    pub fn with_initial_seq(mut self, seq: u32) -> Self {
        self.initial_seq = seq;
        self
    }

    pub fn with_mtu(mut self, mtu_payload: usize) -> Self {
        self.mtu_payload = mtu_payload;
        self
    }

    /// Replaces the routing table; sequence counters carry over.
    pub fn set_table(&mut self, table: Arc<TopicTable>) {
        self.table = table;
    }

    pub fn table(&self) -> &Arc<TopicTable> {
        &self.table
    }

    /// Fragments `payload` and returns each fragment once per routed link,
    /// copies adjacent. Copies after the first carry the duplicate flag.
    pub fn send(&mut self, topic_id: u16, payload: Vec<u8>, now_ns: u64) -> Result<Vec<(Link, Packet)>, TransportError> {
        let spec = self.table.get(topic_id).ok_or(TransportError::UnknownTopic(topic_id))?;
        let links = spec.links;
        let seq_slot = self.next_seq.entry(topic_id).or_insert(self.initial_seq);
        let seq = *seq_slot;
        let msg = Message {
            topic_id,
            seq,
            send_time_ns: now_ns,
            payload,
        };
        let fragments = wire::fragment_message(&msg, self.mtu_payload)?;
        *seq_slot = seq.wrapping_add(1);
        let mut out = Vec::with_capacity(fragments.len() * links.len());
        for frag in fragments {
            for (copy, link) in links.iter().enumerate() {
                let mut p = frag.clone();
                if copy > 0 {
                    p.header.flags = p.header.flags.with(Flags::DUPLICATE);
                }
                out.push((link, p));
            }
        }
        Ok(out)
    }
}

/// Receiver-side counters. Monotonic, readable from any thread.
#[derive(Debug, Default)]
pub struct TransportCounters {
    pub delivered: AtomicU64,
    pub duplicates_suppressed: AtomicU64,
    pub stale_dropped: AtomicU64,
    pub decode_errors: AtomicU64,
    pub unknown_topic: AtomicU64,
    pub reassembly_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub delivered: u64,
    pub duplicates_suppressed: u64,
    pub stale_dropped: u64,
    pub decode_errors: u64,
    pub unknown_topic: u64,
    pub reassembly_errors: u64,
}

impl TransportCounters {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CounterSnapshot {
            delivered: get(&self.delivered),
            duplicates_suppressed: get(&self.duplicates_suppressed),
            stale_dropped: get(&self.stale_dropped),
            decode_errors: get(&self.decode_errors),
            unknown_topic: get(&self.unknown_topic),
            reassembly_errors: get(&self.reassembly_errors),
        }
    }
}

/// Recently delivered sequence numbers, bounded in size. Sequences evicted
/// from the window can be delivered again.
#[derive(Debug, Clone)]
struct SeqWindow {
    cap: usize,
    seen: HashSet<u32>,
    order: VecDeque<u32>,
}

impl SeqWindow {
    fn new(cap: usize) -> Self {
        SeqWindow {
            cap,
            seen: HashSet::new(),
            order: VecDeque::new(),
        }
    }

    fn contains(&self, seq: u32) -> bool {
        self.seen.contains(&seq)
    }

    fn insert(&mut self, seq: u32) {
        if self.seen.insert(seq) {
            self.order.push_back(seq);
            if self.order.len() > self.cap {
                if let Some(old) = self.order.pop_front() {
                    self.seen.remove(&old);
                }
            }
        }
    }
}

#[derive(Debug)]
struct TopicRx {
    mode: DeliveryMode,
    last_delivered: Option<u32>,
    window: SeqWindow,
    last_delivery_ns: Option<u64>,
}

impl TopicRx {
    fn already_delivered(&self, seq: u32) -> bool {
        match self.mode {
            DeliveryMode::LatestOnly => self.last_delivered.is_some_and(|last| !seq_newer(seq, last)),
            DeliveryMode::DedupAnyOrder => self.window.contains(seq),
        }
    }
}

pub struct Receiver {
    table: Arc<TopicTable>,
    topics: BTreeMap<u16, TopicRx>,
    store: FragmentStore,
    window: usize,
    counters: Arc<TransportCounters>,
}

impl Receiver {
    pub fn new(table: Arc<TopicTable>) -> Self {
        Self::with_window(table, DEFAULT_DEDUP_WINDOW)
    }

    pub fn with_window(table: Arc<TopicTable>, window: usize) -> Self {
        Receiver {
            table,
            topics: BTreeMap::new(),
            store: FragmentStore::default(),
            window,
            counters: Arc::new(TransportCounters::default()),
        }
    }

    pub fn counters(&self) -> Arc<TransportCounters> {
        Arc::clone(&self.counters)
    }

    pub fn set_table(&mut self, table: Arc<TopicTable>) {
        self.table = table;
    }

    pub fn pending_fragments(&self) -> usize {
        self.store.len()
    }

    /// Decodes and processes one datagram. Malformed input is counted, never
    /// returned as an error.
    pub fn receive(&mut self, link: Link, raw: &[u8], now_ns: u64) -> Option<Message> {
        match wire::decode_packet(raw) {
            Ok(packet) => self.receive_packet(link, packet, now_ns),
            Err(_) => {
                TransportCounters::bump(&self.counters.decode_errors);
                None
            }
        }
    }

    pub fn receive_packet(&mut self, _link: Link, packet: Packet, now_ns: u64) -> Option<Message> {
        let topic_id = packet.header.topic_id;
        let seq = packet.header.seq;
        let Some(spec) = self.table.get(topic_id) else {
            TransportCounters::bump(&self.counters.unknown_topic);
            return None;
        };
        let window = self.window;
        let rx = self.topics.entry(topic_id).or_insert_with(|| TopicRx {
            mode: spec.delivery_mode,
            last_delivered: None,
            window: SeqWindow::new(window),
            last_delivery_ns: None,
        });
        if rx.already_delivered(seq) {
            let counter = match rx.mode {
                DeliveryMode::LatestOnly if rx.last_delivered != Some(seq) => &self.counters.stale_dropped,
                _ => &self.counters.duplicates_suppressed,
            };
            TransportCounters::bump(counter);
            return None;
        }
        let msg = match self.store.reassemble(packet, now_ns) {
            Ok(Some(msg)) => msg,
            Ok(None) => return None,
            Err(_) => {
                TransportCounters::bump(&self.counters.reassembly_errors);
                return None;
            }
        };
        // a newer message may have completed while this one was assembling
        if rx.already_delivered(seq) {
            TransportCounters::bump(&self.counters.stale_dropped);
            return None;
        }
        rx.last_delivered = Some(seq);
        rx.window.insert(seq);
        rx.last_delivery_ns = Some(now_ns);
        TransportCounters::bump(&self.counters.delivered);
        Some(msg)
    }

    /// Seconds since the last delivery on `topic_id`, infinite if none yet.
    pub fn command_gap_seconds(&self, topic_id: u16, now_ns: u64) -> Result<f64, TransportError> {
        if self.table.get(topic_id).is_none() {
            return Err(TransportError::UnknownTopic(topic_id));
        }
        Ok(match self.topics.get(&topic_id).and_then(|rx| rx.last_delivery_ns) {
            Some(t) => now_ns.saturating_sub(t) as f64 * 1e-9,
            None => f64::INFINITY,
        })
    }

    pub fn last_delivery_ns(&self, topic_id: u16) -> Option<u64> {
        self.topics.get(&topic_id).and_then(|rx| rx.last_delivery_ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_topic_table, LinkSet};

    fn table() -> Arc<TopicTable> {
        Arc::new(
            parse_topic_table(
                "topic 1 single dir=up mbits=1.0 group=a links=5g mode=latest rate=10\n\
                 topic 2 both dir=up mbits=1.0 group=b links=5g,2g4 mode=latest rate=10\n\
                 topic 3 bulk dir=down mbits=1.0 group=c links=5g,2g4 mode=dedup rate=10\n",
            )
            .unwrap(),
        )
    }

    fn raw(p: &Packet) -> Vec<u8> {
        p.encode().unwrap()
    }

    #[test]
    fn wrap_aware_comparison() {
        assert!(seq_newer(5, 4));
        assert!(!seq_newer(4, 5));
        assert!(!seq_newer(7, 7));
        assert!(seq_newer(0, u32::MAX));
        assert!(seq_newer(10, u32::MAX - 10));
        assert!(!seq_newer(1 << 31, 0));
    }

    #[test]
    fn single_link_passthrough() {
        let mut tx = Sender::new(table());
        let out = tx.send(1, vec![0; 100], 0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, Link::Link5GHz);
        assert!(!out[0].1.header.flags.is_duplicate());
    }

    #[test]
    fn redundant_copies_share_seq() {
        let mut tx = Sender::new(table());
        let out = tx.send(2, vec![1; 100], 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, Link::Link5GHz);
        assert_eq!(out[1].0, Link::Link2GHz4);
        assert_eq!(out[0].1.header.seq, out[1].1.header.seq);
        assert!(out[1].1.header.flags.is_duplicate());
        assert_eq!(out[0].1.payload, out[1].1.payload);
        let next = tx.send(2, vec![], 0).unwrap();
        assert_eq!(next[0].1.header.seq, out[0].1.header.seq + 1);
    }

    #[test]
    fn fragments_times_links() {
        let mut tx = Sender::new(table());
        let out = tx.send(3, vec![0; 3500], 0).unwrap();
        assert_eq!(out.len(), 6);
        let per_link = |l| out.iter().filter(|(link, _)| *link == l).count();
        assert_eq!(per_link(Link::Link5GHz), 3);
        assert_eq!(per_link(Link::Link2GHz4), 3);
    }

    #[test]
    fn unknown_topic() {
        let mut tx = Sender::new(table());
        assert_eq!(tx.send(99, vec![], 0).unwrap_err(), TransportError::UnknownTopic(99));
        let rx = Receiver::new(table());
        assert_eq!(rx.command_gap_seconds(99, 0).unwrap_err(), TransportError::UnknownTopic(99));
    }

    #[test]
    fn both_copies_deliver_once() {
        let mut tx = Sender::new(table());
        let mut rx = Receiver::new(table());
        let out = tx.send(2, vec![9; 10], 0).unwrap();
        assert!(rx.receive(out[0].0, &raw(&out[0].1), 1).is_some());
        assert!(rx.receive(out[1].0, &raw(&out[1].1), 2).is_none());
        assert_eq!(rx.counters().snapshot().duplicates_suppressed, 1);
        assert_eq!(rx.counters().snapshot().delivered, 1);
    }

    #[test]
    fn multi_fragment_duplicates_deliver_once() {
        let mut tx = Sender::new(table());
        let mut rx = Receiver::new(table());
        let out = tx.send(3, vec![7; 3500], 0).unwrap();
        let delivered: Vec<_> = out
            .iter()
            .filter_map(|(l, p)| rx.receive(*l, &raw(p), 0))
            .collect();
        assert_eq!(delivered.len(), 1);
        assert_eq!(delivered[0].payload.len(), 3500);
        assert_eq!(rx.pending_fragments(), 0);
    }

    #[test]
    fn latest_only_drops_stale() {
        let t = table();
        let mut rx = Receiver::new(Arc::clone(&t));
        let mk = |seq| raw(&Packet {
            header: wire::PacketHeader::single(1, seq, 0, 0),
            payload: vec![],
        });
        assert!(rx.receive(Link::Link5GHz, &mk(5), 0).is_some());
        assert!(rx.receive(Link::Link5GHz, &mk(4), 0).is_none());
        assert_eq!(rx.counters().snapshot().stale_dropped, 1);
        assert!(rx.receive(Link::Link5GHz, &mk(6), 0).is_some());
    }

    #[test]
    fn fresh_receiver_accepts_any_seq() {
        let mut tx = Sender::new(table()).with_initial_seq(1_000_000);
        let mut rx = Receiver::new(table());
        let out = tx.send(1, vec![1, 2, 3], 0).unwrap();
        let msg = rx.receive(Link::Link5GHz, &raw(&out[0].1), 0).unwrap();
        assert_eq!(msg.seq, 1_000_000);
    }

    #[test]
    fn dedup_any_order_accepts_older() {
        let mut tx = Sender::new(table());
        let mut rx = Receiver::new(table());
        let a = tx.send(3, vec![1], 0).unwrap();
        let b = tx.send(3, vec![2], 0).unwrap();
        assert!(rx.receive(Link::Link2GHz4, &raw(&b[1].1), 0).is_some());
        assert!(rx.receive(Link::Link5GHz, &raw(&a[0].1), 0).is_some());
        assert!(rx.receive(Link::Link2GHz4, &raw(&a[1].1), 0).is_none());
    }

    #[test]
    fn dedup_window_is_bounded() {
        let mut tx = Sender::new(table());
        let mut rx = Receiver::with_window(table(), 4);
        let first = tx.send(3, vec![], 0).unwrap();
        assert!(rx.receive(Link::Link5GHz, &raw(&first[0].1), 0).is_some());
        for _ in 0..4 {
            let p = tx.send(3, vec![], 0).unwrap();
            rx.receive(Link::Link5GHz, &raw(&p[0].1), 0).unwrap();
        }
        // evicted from the window, so the late copy is delivered again
        assert!(rx.receive(Link::Link2GHz4, &raw(&first[1].1), 0).is_some());
    }

    #[test]
    fn garbage_is_counted() {
        let mut rx = Receiver::new(table());
        assert!(rx.receive(Link::Link5GHz, b"hello", 0).is_none());
        assert_eq!(rx.counters().snapshot().decode_errors, 1);
        let unknown = raw(&Packet {
            header: wire::PacketHeader::single(42, 0, 0, 0),
            payload: vec![],
        });
        assert!(rx.receive(Link::Link5GHz, &unknown, 0).is_none());
        assert_eq!(rx.counters().snapshot().unknown_topic, 1);
    }

    #[test]
    fn command_gap() {
        let mut tx = Sender::new(table());
        let mut rx = Receiver::new(table());
        assert_eq!(rx.command_gap_seconds(1, 0).unwrap(), f64::INFINITY);
        let out = tx.send(1, vec![], 0).unwrap();
        rx.receive(Link::Link5GHz, &raw(&out[0].1), 1_000_000_000).unwrap();
        assert_eq!(rx.command_gap_seconds(1, 1_000_000_000).unwrap(), 0.0);
        let gap = rx.command_gap_seconds(1, 1_300_000_000).unwrap();
        assert!((gap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn table_swap_changes_routing() {
        let t = table();
        let mut tx = Sender::new(Arc::clone(&t));
        assert_eq!(tx.send(1, vec![], 0).unwrap().len(), 1);
        tx.set_table(Arc::new(t.set_group_links("a", LinkSet::BOTH).unwrap()));
        let out = tx.send(1, vec![], 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].1.header.seq, 1);
    }
}
