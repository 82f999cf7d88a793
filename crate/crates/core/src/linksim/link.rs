//! Impairment model of one radio link.

use serde::Serialize;

use crate::config::Link;

const NS_PER_S: f64 = 1e9;

pub(crate) fn secs_to_ns(s: f64) -> u64 {
    (s * NS_PER_S).round().max(0.0) as u64
}

pub(crate) fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round().max(0.0) as u64
}

/// Interval of extra latency and loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JitterBurst {
    pub start_ns: u64,
    pub duration_ns: u64,
    pub added_latency_ns: u64,
    pub loss_prob: f64,
}

impl JitterBurst {
    fn covers(&self, t: u64) -> bool {
        t >= self.start_ns && t < self.start_ns + self.duration_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Outage {
    pub start_ns: u64,
    pub duration_ns: u64,
}

impl Outage {
    pub fn covers(&self, t: u64) -> bool {
        t >= self.start_ns && t < self.end_ns()
    }

    pub fn end_ns(&self) -> u64 {
        self.start_ns + self.duration_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkProfile {
    pub link: Link,
    pub base_latency_ns: u64,
    pub loss_prob: f64,
    pub bandwidth_cap_mbits: Option<f64>,
    pub jitter_bursts: Vec<JitterBurst>,
    pub outages: Vec<Outage>,
    /// Piecewise-linear signal strength: (time, value) points sorted by time.
    pub signal: Vec<(u64, f64)>,
}

impl LinkProfile {
    /// Lossless, zero-latency, uncapped link with full signal.
    pub fn ideal(link: Link) -> Self {
        LinkProfile {
            link,
            base_latency_ns: 0,
            loss_prob: 0.0,
            bandwidth_cap_mbits: None,
            jitter_bursts: Vec::new(),
            outages: Vec::new(),
            signal: vec![(0, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.loss_prob) {
            return Err(format!("{}: loss probability {} outside [0, 1]", self.link, self.loss_prob));
        }
        if let Some(cap) = self.bandwidth_cap_mbits {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(format!("{}: bandwidth cap must be positive", self.link));
            }
        }
        if let Some(b) = self.jitter_bursts.iter().find(|b| !prob(b.loss_prob)) {
            return Err(format!("{}: burst loss probability {} outside [0, 1]", self.link, b.loss_prob));
        }
        if self.signal.iter().any(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(format!("{}: signal strength outside [0, 1]", self.link));
        }
        Ok(())
    }

    pub fn in_outage(&self, t: u64) -> bool {
        self.outages.iter().any(|o| o.covers(t))
    }

    /// Loss probability at `t`: base loss combined with any active bursts.
    pub fn loss_at(&self, t: u64) -> f64 {
        let survive = self
            .jitter_bursts
            .iter()
            .filter(|b| b.covers(t))
            .fold(1.0 - self.loss_prob, |acc, b| acc * (1.0 - b.loss_prob));
        1.0 - survive
    }

    pub fn latency_at(&self, t: u64) -> u64 {
        self.base_latency_ns
            + self
                .jitter_bursts
                .iter()
                .filter(|b| b.covers(t))
                .map(|b| b.added_latency_ns)
                .sum::<u64>()
    }

    pub fn signal_at(&self, t: u64) -> f64 {
        if self.in_outage(t) {
            return 0.0;
        }
        let pts = &self.signal;
        match pts.iter().position(|(pt, _)| *pt > t) {
            None => pts.last().map_or(1.0, |p| p.1),
            Some(0) => pts[0].1,
            Some(i) => {
                let (t0, v0) = pts[i - 1];
                let (t1, v1) = pts[i];
                v0 + (v1 - v0) * (t - t0) as f64 / (t1 - t0) as f64
            }
        }
    }
}

/// Token bucket sized in bytes. Depth is 100 ms worth of the rate.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_bytes_per_s: f64,
    depth_bytes: f64,
    tokens: f64,
    last_ns: u64,
}

pub const BUCKET_DEPTH_S: f64 = 0.1;

impl TokenBucket {
    pub fn new(cap_mbits: f64) -> Self {
        let rate = cap_mbits * 1e6 / 8.0;
        let depth = rate * BUCKET_DEPTH_S;
        TokenBucket {
            rate_bytes_per_s: rate,
            depth_bytes: depth,
            tokens: depth,
            last_ns: 0,
        }
    }

    /// Admits a packet of `bytes` at `now_ns` if enough tokens are available.
    pub fn try_consume(&mut self, now_ns: u64, bytes: usize) -> bool {
        if now_ns > self.last_ns {
            let dt = (now_ns - self.last_ns) as f64 / NS_PER_S;
            self.tokens = (self.tokens + dt * self.rate_bytes_per_s).min(self.depth_bytes);
            self.last_ns = now_ns;
        }
        let need = bytes as f64;
        if self.tokens >= need {
            self.tokens -= need;
            true
        } else {
            false
        }
    }
}

/// Result of pushing a constant offered load through a capped link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapResult {
    pub offered_mbits: f64,
    pub carried_mbits: f64,
    pub offered_packets: u64,
    pub congestion_drops: u64,
}

impl CapResult {
    pub fn drop_fraction(&self) -> f64 {
        if self.offered_packets == 0 {
            0.0
        } else {
            self.congestion_drops as f64 / self.offered_packets as f64
        }
    }
}

/// Offers `offered_mbits` of evenly spaced 1400-byte packets to a link with
/// the given cap for `duration_s` and reports what got through.
pub fn bandwidth_cap_enforcement(cap_mbits: Option<f64>, offered_mbits: f64, duration_s: f64) -> CapResult {
    const PACKET: usize = 1400;
    let mut bucket = cap_mbits.map(TokenBucket::new);
    let bytes_per_s = offered_mbits * 1e6 / 8.0;
    let packets = (bytes_per_s * duration_s / PACKET as f64).round() as u64;
    let mut carried = 0u64;
    let mut drops = 0u64;
    for k in 0..packets {
        let t = (k as f64 * PACKET as f64 / bytes_per_s * NS_PER_S) as u64;
        let ok = bucket.as_mut().is_none_or(|b| b.try_consume(t, PACKET));
        if ok {
            carried += PACKET as u64;
        } else {
            drops += 1;
        }
    }
    CapResult {
        offered_mbits,
        carried_mbits: if duration_s > 0.0 {
            carried as f64 * 8.0 / duration_s / 1e6
        } else {
            0.0
        },
        offered_packets: packets,
        congestion_drops: drops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generous_cap_carries_everything() {
        let r = bandwidth_cap_enforcement(Some(100.0), 28.1, 10.0);
        assert_eq!(r.congestion_drops, 0);
        assert!((r.carried_mbits - 28.1).abs() / 28.1 < 0.001);
    }

    #[test]
    fn tight_cap_halves_throughput() {
        let r = bandwidth_cap_enforcement(Some(14.0), 28.1, 10.0);
        assert!((r.carried_mbits - 14.0).abs() / 14.0 <= 0.02, "{r:?}");
        // 1 - 14.0 / 28.1 of the packets cannot fit
        assert!((r.drop_fraction() - (1.0 - 14.0 / 28.1)).abs() < 0.01, "{r:?}");
    }

    #[test]
    fn nothing_offered() {
        let r = bandwidth_cap_enforcement(Some(14.0), 0.0, 10.0);
        assert_eq!(r.carried_mbits, 0.0);
        assert_eq!(r.offered_packets, 0);
    }

    #[test]
    fn burst_and_outage_windows() {
        let mut p = LinkProfile::ideal(Link::Link5GHz);
        p.loss_prob = 0.1;
        p.base_latency_ns = 2_000_000;
        p.jitter_bursts.push(JitterBurst {
            start_ns: 1_000,
            duration_ns: 1_000,
            added_latency_ns: 5_000_000,
            loss_prob: 0.5,
        });
        p.outages.push(Outage {
            start_ns: 10_000,
            duration_ns: 10,
        });
        assert!((p.loss_at(0) - 0.1).abs() < 1e-12);
        assert!((p.loss_at(1_500) - 0.55).abs() < 1e-12);
        assert!((p.loss_at(2_000) - 0.1).abs() < 1e-12);
        assert_eq!(p.latency_at(1_999), 7_000_000);
        assert!(p.in_outage(10_000) && p.in_outage(10_009) && !p.in_outage(10_010));
        assert_eq!(p.signal_at(10_005), 0.0);
    }

    #[test]
    fn signal_interpolates() {
        let mut p = LinkProfile::ideal(Link::Link2GHz4);
        p.signal = vec![(0, 1.0), (10, 0.0)];
        assert_eq!(p.signal_at(5), 0.5);
        assert_eq!(p.signal_at(20), 0.0);
        p.signal = vec![(10, 0.4)];
        assert_eq!(p.signal_at(0), 0.4);
    }

    #[test]
    fn validation() {
        let mut p = LinkProfile::ideal(Link::Link5GHz);
        assert!(p.validate().is_ok());
        p.loss_prob = 1.5;
        assert!(p.validate().is_err());
    }
}
