//! Synthetic traffic sources.
//!
//! Media streams are modeled as constant bitrate: each emission carries
//! `nominal bitrate / rate` bytes (rounded) of a counter pattern.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::config::TopicSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    #[error("topic {0} has a zero or invalid message rate")]
    ZeroRate(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AudioConfig {
    pub sample_rate_hz: u32,
    pub buffer_samples: u32,
    /// Stereo 16-bit by default. Only affects [`AudioConfig::raw_packet_bytes`].
    pub bytes_per_sample_frame: u32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate_hz: 48_000,
            buffer_samples: 512,
            bytes_per_sample_frame: 4,
        }
    }
}

impl AudioConfig {
    pub fn packet_interval_s(&self) -> f64 {
        f64::from(self.buffer_samples) / f64::from(self.sample_rate_hz)
    }

    /// Size of one uncompressed buffer.
    pub fn raw_packet_bytes(&self) -> u64 {
        u64::from(self.buffer_samples) * u64::from(self.bytes_per_sample_frame)
    }
}

/// Packets per second produced by an audio pipeline with the given buffer.
pub fn audio_packet_rate(cfg: &AudioConfig) -> f64 {
    f64::from(cfg.sample_rate_hz) / f64::from(cfg.buffer_samples)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub time_ns: u64,
    pub topic_id: u16,
    pub payload: Vec<u8>,
}

/// Fixed-rate, fixed-size message source for one topic.
#[derive(Debug, Clone)]
pub struct Generator {
    topic_id: u16,
    rate_hz: f64,
    payload_len: usize,
    phase_ns: u64,
    index: u64,
}

impl Generator {
    pub fn topic_id(&self) -> u16 {
        self.topic_id
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    pub fn interval_ns(&self) -> f64 {
        1e9 / self.rate_hz
    }

    /// Time of the next emission.
    pub fn peek_time(&self) -> u64 {
        self.time_of(self.index)
    }

    fn time_of(&self, index: u64) -> u64 {
        // index * interval computed from the product so rounding never accumulates
        self.phase_ns + (index as f64 * 1e9 / self.rate_hz).round() as u64
    }

    /// Emits everything scheduled at or before `until_ns`.
    pub fn drain_until(&mut self, until_ns: u64) -> Vec<Emission> {
        let mut out = Vec::new();
        while self.peek_time() <= until_ns {
            out.push(self.next_emission());
        }
        out
    }

    pub fn next_emission(&mut self) -> Emission {
        let time_ns = self.peek_time();
        let payload = counter_payload(self.index, self.payload_len);
        self.index += 1;
        Emission {
            time_ns,
            topic_id: self.topic_id,
            payload,
        }
    }
}

impl Iterator for Generator {
    type Item = Emission;

    fn next(&mut self) -> Option<Emission> {
        Some(self.next_emission())
    }
}

/// Payload byte `i` of emission `k` is `(k + i) mod 256`.
pub fn counter_payload(index: u64, len: usize) -> Vec<u8> {
    (0..len).map(|i| (index as usize).wrapping_add(i) as u8).collect()
}

pub fn is_counter_payload(payload: &[u8]) -> bool {
    payload
        .windows(2)
        .all(|w| w[1] == w[0].wrapping_add(1))
}

/// Builds the source for a topic. The seed picks a start phase within the
/// first interval so streams do not all fire at t = 0.
pub fn make_generator(spec: &TopicSpec, seed: u64) -> Result<Generator, SourceError> {
    let rate_hz = spec.rate.hz();
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(SourceError::ZeroRate(spec.topic_id));
    }
    let bytes_per_s = spec.nominal_mbits.bits_per_second() / 8.0;
    let payload_len = (bytes_per_s / rate_hz).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(spec.topic_id) << 32));
    let interval = (1e9 / rate_hz) as u64;
    let phase_ns = if interval == 0 { 0 } else { rng.next_u64() % interval };
    Ok(Generator {
        topic_id: spec.topic_id,
        rate_hz,
        payload_len,
        phase_ns,
        index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_topic_table, Rate};

    fn spec(line: &str) -> TopicSpec {
        parse_topic_table(line).unwrap().topics()[0].clone()
    }

    #[test]
    fn audio_rates() {
        let stock = AudioConfig::default();
        assert_eq!(audio_packet_rate(&stock), 93.75);
        let semifinal = AudioConfig {
            buffer_samples: 64,
            ..stock
        };
        assert_eq!(audio_packet_rate(&semifinal), 750.0);
        let one = AudioConfig {
            buffer_samples: 48_000,
            ..stock
        };
        assert_eq!(audio_packet_rate(&one), 1.0);
        assert_eq!(stock.raw_packet_bytes(), 2048);
    }

    #[test]
    fn main_camera_payload() {
        let g = make_generator(
            &spec("topic 3 cams dir=down mbits=14.7 group=main_cameras links=5g mode=dedup rate=46"),
            0,
        )
        .unwrap();
        // 14.7e6 / 8 / 46 = 39945.65
        assert_eq!(g.payload_len(), 39_946);
    }

    #[test]
    fn audio_payload() {
        let s = spec("topic 6 audio dir=down mbits=0.4 group=audio links=5g,2g4 mode=dedup rate=audio:48000/512");
        assert!(matches!(s.rate, Rate::Audio(_)));
        let g = make_generator(&s, 1).unwrap();
        assert_eq!(g.rate_hz(), 93.75);
        // 0.4e6 / 8 / 93.75 = 533.33
        assert_eq!(g.payload_len(), 533);
    }

    #[test]
    fn zero_bitrate_heartbeat() {
        let mut g = make_generator(
            &spec("topic 9 hb dir=down mbits=0.0 group=hb links=5g mode=latest rate=10"),
            5,
        )
        .unwrap();
        let start = g.peek_time();
        let events = g.drain_until(start + 999_999_999);
        assert_eq!(events.len(), 10);
        assert!(events.iter().all(|e| e.payload.is_empty()));
    }

    #[test]
    fn zero_rate_rejected() {
        let mut s = spec("topic 9 hb dir=down mbits=0.0 group=hb links=5g mode=latest rate=10");
        s.rate = Rate::Hz(0.0);
        assert_eq!(make_generator(&s, 0).unwrap_err(), SourceError::ZeroRate(9));
    }

    #[test]
    fn deterministic_and_counter_pattern() {
        let s = spec("topic 2 t dir=down mbits=4.1 group=t links=5g mode=dedup rate=100");
        let a: Vec<_> = make_generator(&s, 3).unwrap().take(50).collect();
        let b: Vec<_> = make_generator(&s, 3).unwrap().take(50).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| is_counter_payload(&e.payload)));
        assert!(a.windows(2).all(|w| w[1].time_ns > w[0].time_ns));
    }
}
