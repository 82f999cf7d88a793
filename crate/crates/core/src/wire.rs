//! On-wire packet format, fragmentation and reassembly.
//!
//! Every datagram carries a fixed 24-byte big-endian header followed by the
//! payload bytes:
//!
//! ```text
//! offset size field
//!      0    2 magic          0x4E41 ("NA")
//!      2    1 version        1
//!      3    1 flags          bit0 duplicate copy, bit1 last fragment
//!      4    2 topic_id
//!      6    2 frag_index
//!      8    2 frag_count     >= 1
//!     10    4 seq            wrapping message sequence
//!     14    8 send_time_ns
//!     22    2 payload_len    <= MTU_PAYLOAD
//! ```
//!
//! There is no retransmission and no FEC. Loss tolerance comes from sending
//! the same packet over several links (see [`crate::transport`]).

use std::collections::BTreeMap;

use thiserror::Error;

pub const MAGIC: u16 = 0x4E41;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
/// Largest payload a single datagram may carry.
pub const MTU_PAYLOAD: usize = 1400;
/// Upper bound on a reassembled message.
pub const MAX_MESSAGE_LEN: usize = 1 << 22;
pub const MAX_FRAGMENTS: usize = u16::MAX as usize;
/// Incomplete fragment sets older than this are discarded.
pub const DEFAULT_FRAGMENT_EXPIRY_NS: u64 = 500_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds the {max}-byte datagram limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("payload length {actual} does not match header payload_len {declared}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated datagram: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("invalid fragment info {index}/{count}")]
    BadFragmentInfo { index: u16, count: u16 },
    #[error("message needs {0} fragments, more than the 65535 allowed")]
    TooManyFragments(usize),
    #[error("fragment payload size must be between 1 and 65535, got {0}")]
    InvalidMtu(usize),
    #[error("fragments of topic {topic_id} seq {seq} disagree on frag_count ({first} vs {other})")]
    InconsistentFragCount {
        topic_id: u16,
        seq: u32,
        first: u16,
        other: u16,
    },
}

/// Header flag bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags(pub u8);

impl Flags {
    pub const DUPLICATE: u8 = 0x01;
    pub const LAST_FRAGMENT: u8 = 0x02;

    pub fn is_duplicate(self) -> bool {
        self.0 & Self::DUPLICATE != 0
    }

    pub fn is_last_fragment(self) -> bool {
        self.0 & Self::LAST_FRAGMENT != 0
    }

    pub fn with(self, bit: u8) -> Self {
        Flags(self.0 | bit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub flags: Flags,
    pub topic_id: u16,
    pub frag_index: u16,
    pub frag_count: u16,
    pub seq: u32,
    pub send_time_ns: u64,
    pub payload_len: u16,
}

impl PacketHeader {
    /// Header for an unfragmented message with the given payload length.
    pub fn single(topic_id: u16, seq: u32, send_time_ns: u64, payload_len: u16) -> Self {
        PacketHeader {
            flags: Flags(Flags::LAST_FRAGMENT),
            topic_id,
            frag_index: 0,
            frag_count: 1,
            seq,
            send_time_ns,
            payload_len,
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC.to_be_bytes());
        out.push(VERSION);
        out.push(self.flags.0);
        out.extend_from_slice(&self.topic_id.to_be_bytes());
        out.extend_from_slice(&self.frag_index.to_be_bytes());
        out.extend_from_slice(&self.frag_count.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.send_time_ns.to_be_bytes());
        out.extend_from_slice(&self.payload_len.to_be_bytes());
    }
}

/// A decoded datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: PacketHeader,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_packet(&self.header, &self.payload)
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// An application-level message, before fragmentation or after reassembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic_id: u16,
    pub seq: u32,
    pub send_time_ns: u64,
    pub payload: Vec<u8>,
}

pub fn encode_packet(header: &PacketHeader, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MTU_PAYLOAD {
        return Err(WireError::PayloadTooLarge {
            len: payload.len(),
            max: MTU_PAYLOAD,
        });
    }
    if payload.len() != header.payload_len as usize {
        return Err(WireError::LengthMismatch {
            declared: header.payload_len as usize,
            actual: payload.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    header.write_to(&mut out);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes one datagram. Total over arbitrary input: every failure is a
/// typed error. Bytes past `24 + payload_len` are ignored.
pub fn decode_packet(raw: &[u8]) -> Result<Packet, WireError> {
    if raw.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            got: raw.len(),
        });
    }
    let be16 = |at: usize| u16::from_be_bytes([raw[at], raw[at + 1]]);
    let magic = be16(0);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if raw[2] != VERSION {
        return Err(WireError::BadVersion(raw[2]));
    }
    let mut seq = [0u8; 4];
    seq.copy_from_slice(&raw[10..14]);
    let mut time = [0u8; 8];
    time.copy_from_slice(&raw[14..22]);
    let header = PacketHeader {
        flags: Flags(raw[3]),
        topic_id: be16(4),
        frag_index: be16(6),
        frag_count: be16(8),
        seq: u32::from_be_bytes(seq),
        send_time_ns: u64::from_be_bytes(time),
        payload_len: be16(22),
    };
    if header.frag_count == 0 || header.frag_index >= header.frag_count {
        return Err(WireError::BadFragmentInfo {
            index: header.frag_index,
            count: header.frag_count,
        });
    }
    let len = header.payload_len as usize;
    if len > MTU_PAYLOAD {
        return Err(WireError::PayloadTooLarge {
            len,
            max: MTU_PAYLOAD,
        });
    }
    let needed = HEADER_LEN + len;
    if raw.len() < needed {
        return Err(WireError::Truncated {
            needed,
            got: raw.len(),
        });
    }
    Ok(Packet {
        header,
        payload: raw[HEADER_LEN..needed].to_vec(),
    })
}

/// Splits a message into `ceil(len / mtu_payload)` packets (at least one).
pub fn fragment_message(msg: &Message, mtu_payload: usize) -> Result<Vec<Packet>, WireError> {
    if mtu_payload == 0 || mtu_payload > u16::MAX as usize {
        return Err(WireError::InvalidMtu(mtu_payload));
    }
    let count = msg.payload.len().div_ceil(mtu_payload).max(1);
    if count > MAX_FRAGMENTS {
        return Err(WireError::TooManyFragments(count));
    }
    let mut packets = Vec::with_capacity(count);
    for index in 0..count {
        let start = index * mtu_payload;
        let end = (start + mtu_payload).min(msg.payload.len());
        let chunk = msg.payload[start.min(end)..end].to_vec();
        let mut flags = Flags::default();
        if index + 1 == count {
            flags = flags.with(Flags::LAST_FRAGMENT);
        }
        packets.push(Packet {
            header: PacketHeader {
                flags,
                topic_id: msg.topic_id,
                frag_index: index as u16,
                frag_count: count as u16,
                seq: msg.seq,
                send_time_ns: msg.send_time_ns,
                payload_len: chunk.len() as u16,
            },
            payload: chunk,
        });
    }
    Ok(packets)
}

struct Partial {
    frag_count: u16,
    received: usize,
    fragments: Vec<Option<Vec<u8>>>,
    send_time_ns: u64,
    first_seen_ns: u64,
}

/// Pending fragment sets keyed by (topic, seq).
pub struct FragmentStore {
    expiry_ns: u64,
    pending: BTreeMap<(u16, u32), Partial>,
}

impl Default for FragmentStore {
    fn default() -> Self {
        Self::new(DEFAULT_FRAGMENT_EXPIRY_NS)
    }
}

impl FragmentStore {
    pub fn new(expiry_ns: u64) -> Self {
        FragmentStore {
            expiry_ns,
            pending: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Drops incomplete sets first seen more than the expiry ago.
    pub fn purge_expired(&mut self, now_ns: u64) -> usize {
        let expiry = self.expiry_ns;
        let before = self.pending.len();
        self.pending
            .retain(|_, p| now_ns.saturating_sub(p.first_seen_ns) <= expiry);
        before - self.pending.len()
    }

    pub fn forget(&mut self, topic_id: u16, seq: u32) {
        self.pending.remove(&(topic_id, seq));
    }

    /// Feeds one packet; returns the message once its final missing fragment
    /// arrives. Repeated fragments are ignored.
    pub fn reassemble(&mut self, packet: Packet, now_ns: u64) -> Result<Option<Message>, WireError> {
        self.purge_expired(now_ns);
        let h = packet.header;
        if h.frag_count == 1 {
            return Ok(Some(Message {
                topic_id: h.topic_id,
                seq: h.seq,
                send_time_ns: h.send_time_ns,
                payload: packet.payload,
            }));
        }
        if h.frag_index >= h.frag_count {
            return Err(WireError::BadFragmentInfo {
                index: h.frag_index,
                count: h.frag_count,
            });
        }
        let key = (h.topic_id, h.seq);
        let partial = self.pending.entry(key).or_insert_with(|| Partial {
            frag_count: h.frag_count,
            received: 0,
            fragments: vec![None; h.frag_count as usize],
            send_time_ns: h.send_time_ns,
            first_seen_ns: now_ns,
        });
        if partial.frag_count != h.frag_count {
            return Err(WireError::InconsistentFragCount {
                topic_id: h.topic_id,
                seq: h.seq,
                first: partial.frag_count,
                other: h.frag_count,
            });
        }
        let slot = &mut partial.fragments[h.frag_index as usize];
        if slot.is_some() {
            return Ok(None);
        }
        *slot = Some(packet.payload);
        partial.received += 1;
        if partial.received < partial.fragments.len() {
            return Ok(None);
        }
        let done = self.pending.remove(&key).expect("entry present");
        let payload = done.fragments.into_iter().flatten().flatten().collect();
        Ok(Some(Message {
            topic_id: h.topic_id,
            seq: h.seq,
            send_time_ns: done.send_time_ns,
            payload,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(len: usize) -> Message {
        Message {
            topic_id: 3,
            seq: 42,
            send_time_ns: 1_000,
            payload: (0..len).map(|i| (i % 251) as u8).collect(),
        }
    }

    #[test]
    fn empty_packet_layout() {
        let h = PacketHeader {
            flags: Flags::default(),
            topic_id: 0,
            frag_index: 0,
            frag_count: 1,
            seq: 0,
            send_time_ns: 0,
            payload_len: 0,
        };
        let raw = encode_packet(&h, &[]).unwrap();
        assert_eq!(raw.len(), HEADER_LEN);
        assert_eq!(&raw[..3], &[0x4E, 0x41, 0x01]);
    }

    #[test]
    fn oversize_payload_rejected() {
        let h = PacketHeader::single(1, 1, 0, 1401);
        assert_eq!(
            encode_packet(&h, &[0u8; 1401]),
            Err(WireError::PayloadTooLarge { len: 1401, max: 1400 })
        );
        let h = PacketHeader::single(1, 1, 0, 1400);
        assert_eq!(encode_packet(&h, &[0u8; 1400]).unwrap().len(), 1424);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert!(matches!(decode_packet(&[0u8; 23]), Err(WireError::Truncated { .. })));
        let good = encode_packet(&PacketHeader::single(9, 7, 5, 4), &[1, 2, 3, 4]).unwrap();
        let mut bad = good.clone();
        bad[0] ^= 0xFF;
        bad[1] ^= 0xFF;
        assert!(matches!(decode_packet(&bad), Err(WireError::BadMagic(_))));
        let mut bad = good.clone();
        bad[2] = 2;
        assert_eq!(decode_packet(&bad), Err(WireError::BadVersion(2)));
        assert!(matches!(
            decode_packet(&good[..26]),
            Err(WireError::Truncated { needed: 28, got: 26 })
        ));
        let mut bad = good;
        bad[8..10].copy_from_slice(&0u16.to_be_bytes());
        assert!(matches!(decode_packet(&bad), Err(WireError::BadFragmentInfo { .. })));
    }

    #[test]
    fn fragment_counts() {
        let frags = fragment_message(&msg(0), 1400).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].header.frag_count, 1);
        assert!(frags[0].header.flags.is_last_fragment());

        let frags = fragment_message(&msg(3500), 1400).unwrap();
        let sizes: Vec<_> = frags.iter().map(|p| p.payload.len()).collect();
        assert_eq!(sizes, vec![1400, 1400, 700]);
        assert!(frags.iter().all(|p| p.header.seq == 42 && p.header.frag_count == 3));
        assert!(frags[2].header.flags.is_last_fragment());
        assert!(!frags[0].header.flags.is_last_fragment());
    }

    #[test]
    fn too_many_fragments() {
        let m = msg(70_000);
        assert_eq!(fragment_message(&m, 1), Err(WireError::TooManyFragments(70_000)));
        assert_eq!(fragment_message(&m, 0), Err(WireError::InvalidMtu(0)));
    }

    #[test]
    fn single_fragment_is_immediate() {
        let mut store = FragmentStore::default();
        let p = fragment_message(&msg(10), 1400).unwrap().remove(0);
        assert_eq!(store.reassemble(p, 0).unwrap(), Some(msg(10)));
        assert!(store.is_empty());
    }

    #[test]
    fn every_arrival_order_of_up_to_four_fragments() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for at in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(at, n - 1);
                    out.push(q);
                }
            }
            out
        }
        for n in 1..=4 {
            let m = msg(100 * n - 37);
            let frags = fragment_message(&m, 100).unwrap();
            assert_eq!(frags.len(), n);
            for order in permutations(n) {
                let mut store = FragmentStore::default();
                for (k, &i) in order.iter().enumerate() {
                    let out = store.reassemble(frags[i].clone(), 0).unwrap();
                    if k + 1 == n {
                        assert_eq!(out.as_ref(), Some(&m), "order {order:?}");
                    } else {
                        assert_eq!(out, None);
                    }
                }
                assert!(store.is_empty());
            }
        }
    }

    #[test]
    fn duplicate_fragment_is_idempotent() {
        let m = msg(3500);
        let frags = fragment_message(&m, 1400).unwrap();
        let mut store = FragmentStore::default();
        assert_eq!(store.reassemble(frags[2].clone(), 0).unwrap(), None);
        assert_eq!(store.reassemble(frags[2].clone(), 0).unwrap(), None);
        assert_eq!(store.reassemble(frags[0].clone(), 0).unwrap(), None);
        assert_eq!(store.reassemble(frags[1].clone(), 0).unwrap(), Some(m));
    }

    #[test]
    fn incomplete_set_expires() {
        let frags = fragment_message(&msg(3500), 1400).unwrap();
        let mut store = FragmentStore::default();
        store.reassemble(frags[0].clone(), 0).unwrap();
        store.reassemble(frags[2].clone(), 100_000_000).unwrap();
        assert_eq!(store.len(), 1);
        store.purge_expired(DEFAULT_FRAGMENT_EXPIRY_NS + 1);
        assert!(store.is_empty());
        // the late fragment starts a fresh set rather than completing the old one
        assert_eq!(
            store.reassemble(frags[1].clone(), DEFAULT_FRAGMENT_EXPIRY_NS + 2).unwrap(),
            None
        );
    }

    #[test]
    fn inconsistent_frag_count() {
        let frags = fragment_message(&msg(3500), 1400).unwrap();
        let mut store = FragmentStore::default();
        store.reassemble(frags[0].clone(), 0).unwrap();
        let mut odd = frags[1].clone();
        odd.header.frag_count = 4;
        assert!(matches!(
            store.reassemble(odd, 0),
            Err(WireError::InconsistentFragCount { first: 3, other: 4, .. })
        ));
    }
}
