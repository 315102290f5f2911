//! Simulated message transport for the conventional and data-plane channels.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qkdnet::ids::{LinkId, SiteId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelClass {
    Conventional,
    DataPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Site pair this entry applies to; `None` is the default for the class.
    #[serde(default)]
    pub between: Option<[SiteId; 2]>,
    pub latency_s: f64,
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub drop: f64,
}

impl ChannelSpec {
    pub fn new(latency_s: f64) -> Self {
        ChannelSpec {
            between: None,
            latency_s,
            jitter_s: 0.0,
            drop: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("no {class:?} channel between {from} and {to}")]
    UnknownChannel {
        class: ChannelClass,
        from: SiteId,
        to: SiteId,
    },
}

#[derive(Debug, Clone)]
pub struct Transport {
    specs: BTreeMap<(ChannelClass, Option<LinkId>), ChannelSpec>,
    /// Last delivery time per directed pair, to keep each pair FIFO.
    last: BTreeMap<(ChannelClass, SiteId, SiteId), f64>,
    rng: ChaCha8Rng,
    sent: u64,
    dropped: u64,
}

impl Transport {
    pub fn new(seed: u64) -> Self {
        Transport {
            specs: BTreeMap::new(),
            last: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7472616e73),
            sent: 0,
            dropped: 0,
        }
    }

    pub fn add(&mut self, class: ChannelClass, spec: ChannelSpec) {
        let key = spec.between.map(|[a, b]| LinkId::new(a, b));
        self.specs.insert((class, key), spec);
    }

    pub fn spec(&self, class: ChannelClass, from: SiteId, to: SiteId) -> Option<&ChannelSpec> {
        self.specs
            .get(&(class, Some(LinkId::new(from, to))))
            .or_else(|| self.specs.get(&(class, None)))
    }

    pub fn stats(&self) -> (u64, u64) {
        (self.sent, self.dropped)
    }

    /// Delivery time of a message sent now, or `None` if the channel drops it.
    pub fn send(
        &mut self,
        now: f64,
        class: ChannelClass,
        from: SiteId,
        to: SiteId,
    ) -> Result<Option<f64>, TransportError> {
        let spec = *self
            .spec(class, from, to)
            .ok_or(TransportError::UnknownChannel { class, from, to })?;
        self.sent += 1;
        // draw both numbers unconditionally so drops do not shift later jitter
        let jitter = self.rng.gen::<f64>() * spec.jitter_s;
        let roll = self.rng.gen::<f64>();
        if roll < spec.drop {
            self.dropped += 1;
            return Ok(None);
        }
        let last = self
            .last
            .entry((class, from, to))
            .or_insert(f64::NEG_INFINITY);
        let at = (now + spec.latency_s + jitter).max(*last);
        *last = at;
        Ok(Some(at))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_and_fifo_under_jitter() {
        let mut t = Transport::new(1);
        t.add(
            ChannelClass::Conventional,
            ChannelSpec {
                jitter_s: 0.01,
                ..ChannelSpec::new(0.005)
            },
        );
        let (a, b) = (SiteId(1), SiteId(2));
        let mut prev = 0.0;
        for i in 0..100 {
            let at = t
                .send(f64::from(i) * 1e-4, ChannelClass::Conventional, a, b)
                .unwrap()
                .unwrap();
            assert!(at >= prev && at >= f64::from(i) * 1e-4 + 0.005);
            prev = at;
        }
        assert!(t.send(0.0, ChannelClass::DataPlane, a, b).is_err());
    }

    #[test]
    fn certain_drop() {
        let mut t = Transport::new(1);
        t.add(
            ChannelClass::DataPlane,
            ChannelSpec {
                drop: 1.0,
                ..ChannelSpec::new(0.005)
            },
        );
        assert_eq!(
            t.send(0.0, ChannelClass::DataPlane, SiteId(1), SiteId(2)),
            Ok(None)
        );
    }
}
