//! Simulated QKD link layer: a rate-limited source of identical key bytes at
//! both ends of a link.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qkdnet::ids::{LinkId, SiteId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub at_s: f64,
    #[serde(default)]
    pub restore_at_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumLinkConfig {
    pub endpoints: [SiteId; 2],
    pub max_rate_bps: f64,
    /// Defaults to the maximum.
    #[serde(default)]
    pub current_rate_bps: Option<f64>,
    /// `[start, end)` intervals; empty means always available.
    #[serde(default)]
    pub availability_windows: Vec<[f64; 2]>,
    #[serde(default)]
    pub failures: Vec<Failure>,
}

impl QuantumLinkConfig {
    pub fn new(a: SiteId, b: SiteId, max_rate_bps: f64) -> Self {
        QuantumLinkConfig {
            endpoints: [a, b],
            max_rate_bps,
            current_rate_bps: None,
            availability_windows: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn link(&self) -> LinkId {
        LinkId::new(self.endpoints[0], self.endpoints[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QllError {
    #[error("link {0} is down")]
    LinkDown(LinkId),
}

/// Reported to the QNL at both endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkIndication {
    Down { link: LinkId },
    Up { link: LinkId, rate_bps: f64 },
    Rate { link: LinkId, rate_bps: f64 },
}

/// Bytes produced by one tick; `offset` is their position in the link stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub offset: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct QuantumLink {
    config: QuantumLinkConfig,
    rate_bps: f64,
    up: bool,
    carry_bits: f64,
    offset: u64,
    rng: ChaCha8Rng,
}

/// Length of `[t0, t1)` covered by the windows, which must not overlap.
pub fn window_overlap(windows: &[[f64; 2]], t0: f64, t1: f64) -> f64 {
    if windows.is_empty() {
        return (t1 - t0).max(0.0);
    }
    windows
        .iter()
        .map(|[s, e]| (t1.min(*e) - t0.max(*s)).max(0.0))
        .sum()
}

impl QuantumLink {
    pub fn new(config: QuantumLinkConfig, seed: u64) -> Self {
        let l = config.link();
        let stream = seed ^ (u64::from(l.a.0) << 32) ^ (u64::from(l.b.0) << 16) ^ 0x716c6c;
        let rate_bps = config
            .current_rate_bps
            .unwrap_or(config.max_rate_bps)
            .min(config.max_rate_bps);
        QuantumLink {
            config,
            rate_bps,
            up: true,
            carry_bits: 0.0,
            offset: 0,
            rng: ChaCha8Rng::seed_from_u64(stream),
        }
    }

    pub fn id(&self) -> LinkId {
        self.config.link()
    }

    pub fn config(&self) -> &QuantumLinkConfig {
        &self.config
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    pub fn max_rate_bps(&self) -> f64 {
        self.config.max_rate_bps
    }

    /// Stream position of the next byte.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Produces the key for `[now, now + dt)`, prorated over availability
    /// windows. The fractional byte is carried to the next tick.
    pub fn tick(&mut self, now: f64, dt: f64) -> Result<Generated, QllError> {
        if !self.up {
            return Err(QllError::LinkDown(self.id()));
        }
        let active = window_overlap(&self.config.availability_windows, now, now + dt);
        let bits = self.rate_bps * active + self.carry_bits;
        // the epsilon absorbs float error so exact rates do not lose a byte
        let n = (bits / 8.0 + 1e-9).floor();
        self.carry_bits = (bits - n * 8.0).max(0.0);
        let mut bytes = vec![0u8; n as usize];
        self.rng.fill_bytes(&mut bytes);
        let offset = self.offset;
        self.offset += bytes.len() as u64;
        Ok(Generated { offset, bytes })
    }

    /// Returns the achieved rate, `min(requested, max)`.
    pub fn set_qos(&mut self, requested_bps: f64) -> (f64, LinkIndication) {
        self.rate_bps = requested_bps.clamp(0.0, self.config.max_rate_bps);
        let ind = LinkIndication::Rate {
            link: self.id(),
            rate_bps: self.rate_bps,
        };
        (self.rate_bps, ind)
    }

    pub fn fail_link(&mut self) -> LinkIndication {
        self.up = false;
        self.carry_bits = 0.0;
        LinkIndication::Down { link: self.id() }
    }

    pub fn restore_link(&mut self) -> LinkIndication {
        self.up = true;
        LinkIndication::Up {
            link: self.id(),
            rate_bps: self.rate_bps,
        }
    }

    /// Capacity the QNL should plan with right now.
    pub fn advertised_bps(&self) -> f64 {
        if self.up {
            self.rate_bps
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(rate: f64) -> QuantumLink {
        QuantumLink::new(QuantumLinkConfig::new(SiteId(1), SiteId(2), rate), 9)
    }

    #[test]
    fn rate_arithmetic_with_carry() {
        let mut l = link(8000.0);
        assert_eq!(l.tick(0.0, 1.0).unwrap().bytes.len(), 1000);
        let mut l = link(100.0);
        let total: usize = (0..100)
            .map(|i| l.tick(f64::from(i) * 0.1, 0.1).unwrap().bytes.len())
            .sum();
        assert_eq!(total, 125);
    }

    #[test]
    fn qos_clamps_and_pauses() {
        let mut l = link(10_000.0);
        assert_eq!(l.set_qos(5000.0).0, 5000.0);
        assert_eq!(l.set_qos(20_000.0).0, 10_000.0);
        assert_eq!(l.set_qos(0.0).0, 0.0);
        assert!(l.tick(0.0, 1.0).unwrap().bytes.is_empty());
    }

    #[test]
    fn failed_link_yields_nothing() {
        let mut l = link(8000.0);
        l.fail_link();
        assert_eq!(l.tick(0.0, 1.0), Err(QllError::LinkDown(l.id())));
        l.restore_link();
        assert_eq!(l.tick(1.0, 1.0).unwrap().offset, 0);
    }
}
