use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use telelink::config::{parse_topic_table, Link, TopicTable};
use telelink::transport::{Receiver, Sender};
use telelink::wire::{decode_packet, encode_packet, Flags, PacketHeader, WireError};

const TABLE: &str = "topic 1 video dir=down mbits=8 group=video links=5g,2g4 mode=dedup rate=30\n\
                     topic 2 cmd dir=up mbits=1 group=cmd links=5g,2g4 mode=latest rate=1000\n";

fn table() -> Arc<TopicTable> {
    Arc::new(parse_topic_table(TABLE).unwrap())
}

/// Hand-assembled bytes; see docs/wire.md.
#[test]
fn golden_vector() {
    let header = PacketHeader::single(3, 0x0102_0304, 1 << 32, 3);
    let raw = encode_packet(&header, &[0xAA, 0xBB, 0xCC]).unwrap();
    let expected = "4e41 01 02 0003 0000 0001 01020304 0000000100000000 0003 aabbcc".replace(' ', "");
    assert_eq!(hex::encode(&raw), expected);
    let back = decode_packet(&raw).unwrap();
    assert_eq!(back.header, header);

    let mut dup = header;
    dup.flags = dup.flags.with(Flags::DUPLICATE);
    let raw = encode_packet(&dup, &[0xAA, 0xBB, 0xCC]).unwrap();
    assert_eq!(raw[3], 0x03);
}

#[test]
fn malformed_headers_are_rejected() {
    let good = encode_packet(&PacketHeader::single(1, 0, 0, 0), &[]).unwrap();
    assert_eq!(good.len(), 24);
    let mut bad = good.clone();
    bad[0] = 0;
    assert!(matches!(decode_packet(&bad), Err(WireError::BadMagic(_))));
    let mut bad = good.clone();
    bad[2] = 2;
    assert_eq!(decode_packet(&bad), Err(WireError::BadVersion(2)));
    assert!(matches!(decode_packet(&good[..23]), Err(WireError::Truncated { .. })));
}

/// One delivery schedule: for each packet copy, whether it arrives and where
/// in the arrival order it lands.
fn arrival_plan() -> impl Strategy<Value = (Vec<usize>, u64, f64)> {
    (
        prop::collection::vec(0usize..4000, 1..12),
        any::<u64>(),
        0.0f64..0.6,
    )
}

fn shuffle_and_drop<T>(items: Vec<T>, seed: u64, loss: f64) -> Vec<T> {
    use rand::{Rng, SeedableRng};
    use rand::seq::SliceRandom;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut kept: Vec<T> = items.into_iter().filter(|_| rng.gen::<f64>() >= loss).collect();
    kept.shuffle(&mut rng);
    kept
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    /// Dedup topics: every message is delivered at most once with its exact
    /// payload, and exactly once whenever each fragment survived on some link.
    #[test]
    fn dedup_delivers_complete_messages_once((sizes, seed, loss) in arrival_plan()) {
        let mut tx = Sender::new(table()).with_initial_seq(u32::MAX - 3);
        let mut rx = Receiver::new(table());
        let mut sent = Vec::new();
        let mut wire = Vec::new();
        for (i, len) in sizes.iter().enumerate() {
            let payload: Vec<u8> = (0..*len).map(|b| (b + i) as u8).collect();
            let packets = tx.send(1, payload.clone(), i as u64).unwrap();
            let seq = packets[0].1.header.seq;
            sent.push((seq, payload));
            for (link, p) in packets {
                wire.push((link, p.encode().unwrap(), seq, p.header.frag_index, p.header.frag_count));
            }
        }
        let arrived = shuffle_and_drop(wire, seed, loss);
        let mut complete = BTreeSet::new();
        for (seq, _) in &sent {
            let frags: BTreeSet<u16> = arrived.iter().filter(|a| a.2 == *seq).map(|a| a.3).collect();
            let count = arrived.iter().find(|a| a.2 == *seq).map(|a| a.4);
            if count.is_some_and(|c| frags.len() == c as usize) {
                complete.insert(*seq);
            }
        }
        let mut delivered = Vec::new();
        for (link, raw, ..) in &arrived {
            if let Some(m) = rx.receive(*link, raw, 100) {
                delivered.push(m);
            }
        }
        let seqs: BTreeSet<u32> = delivered.iter().map(|m| m.seq).collect();
        prop_assert_eq!(seqs.len(), delivered.len());
        prop_assert_eq!(&seqs, &complete);
        for m in &delivered {
            let (_, payload) = sent.iter().find(|(s, _)| *s == m.seq).unwrap();
            prop_assert_eq!(&m.payload, payload);
        }
    }

    /// Latest-only topics never deliver a message older than one already
    /// delivered, across the sequence wrap.
    #[test]
    fn latest_only_is_monotonic(n in 1usize..200, seed in any::<u64>(), loss in 0.0f64..0.5) {
        let mut tx = Sender::new(table()).with_initial_seq(u32::MAX - 50);
        let mut rx = Receiver::new(table());
        let mut wire = Vec::new();
        for i in 0..n {
            for (link, p) in tx.send(2, vec![i as u8; 16], i as u64).unwrap() {
                wire.push((link, p.encode().unwrap()));
            }
        }
        let mut last: Option<u32> = None;
        for (link, raw) in shuffle_and_drop(wire, seed, loss) {
            if let Some(m) = rx.receive(link, &raw, 0) {
                if let Some(prev) = last {
                    prop_assert!(telelink::transport::seq_newer(m.seq, prev));
                }
                last = Some(m.seq);
            }
        }
    }
}

#[test]
fn receiver_restart_resumes_without_handshake() {
    let mut tx = Sender::new(table());
    let mut rx = Receiver::new(table());
    for i in 0..10 {
        for (link, p) in tx.send(2, vec![1], i).unwrap() {
            rx.receive(link, &p.encode().unwrap(), i);
        }
    }
    // the receiving process restarts; the sender keeps counting
    let mut rx = Receiver::new(table());
    let first = tx.send(2, vec![2], 20).unwrap();
    let m = rx.receive(Link::Link2GHz4, &first[1].1.encode().unwrap(), 21).unwrap();
    assert_eq!(m.seq, 10);
    assert_eq!(rx.receive(Link::Link5GHz, &first[0].1.encode().unwrap(), 22), None);
}
