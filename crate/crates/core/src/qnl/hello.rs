//! Neighbour liveness from periodic hello messages.

use std::collections::BTreeMap;

use crate::ids::NodeId;

pub const HELLO_INTERVAL_S: f64 = 1.0;
pub const DEAD_AFTER_MISSES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkChange {
    Up { neighbor: NodeId },
    Down { neighbor: NodeId },
    Capacity { neighbor: NodeId, capacity_bps: f64 },
}

#[derive(Debug, Clone)]
pub struct HelloMonitor {
    interval_s: f64,
    dead_after: u32,
    /// Last hello time and whether the neighbour is considered up.
    peers: BTreeMap<NodeId, (f64, bool)>,
}

impl HelloMonitor {
    pub fn new(interval_s: f64, dead_after: u32) -> Self {
        HelloMonitor {
            interval_s,
            dead_after,
            peers: BTreeMap::new(),
        }
    }

    pub fn interval_s(&self) -> f64 {
        self.interval_s
    }

    /// Starts watching a neighbour assumed alive at `now`.
    pub fn watch(&mut self, neighbor: NodeId, now: f64) {
        self.peers.insert(neighbor, (now, true));
    }

    pub fn forget(&mut self, neighbor: NodeId) {
        self.peers.remove(&neighbor);
    }

    pub fn is_up(&self, neighbor: NodeId) -> bool {
        self.peers.get(&neighbor).is_some_and(|p| p.1)
    }

    pub fn on_hello(&mut self, from: NodeId, now: f64) -> Option<LinkChange> {
        let entry = self.peers.entry(from).or_insert((now, false));
        let was_up = entry.1;
        *entry = (now, true);
        (!was_up).then_some(LinkChange::Up { neighbor: from })
    }

    /// Declares neighbours dead after the configured number of missed
    /// intervals; shorter gaps are tolerated.
    pub fn check(&mut self, now: f64) -> Vec<LinkChange> {
        let limit = self.interval_s * f64::from(self.dead_after);
        let mut out = Vec::new();
        for (n, (last, up)) in self.peers.iter_mut() {
            if *up && now - *last > limit + 1e-9 {
                *up = false;
                out.push(LinkChange::Down { neighbor: *n });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SiteId;

    #[test]
    fn transient_loss_is_tolerated() {
        let mut h = HelloMonitor::new(1.0, 3);
        h.watch(SiteId(2), 0.0);
        assert!(h.check(2.5).is_empty());
        assert_eq!(h.on_hello(SiteId(2), 2.6), None);
        assert!(h.check(5.5).is_empty());
        assert_eq!(
            h.check(5.7),
            vec![LinkChange::Down {
                neighbor: SiteId(2)
            }]
        );
        assert!(h.check(9.0).is_empty());
        assert_eq!(
            h.on_hello(SiteId(2), 9.5),
            Some(LinkChange::Up {
                neighbor: SiteId(2)
            })
        );
    }
}
