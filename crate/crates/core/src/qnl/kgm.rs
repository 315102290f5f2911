//! Key generation messages and the flooded global demand matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mcfp::CommodityDemand;
use crate::ids::{Commodity, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KgmMode {
    Continuous { rate_bps: f64 },
    OneTime { amount_bits: u64 },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyGenerationMessage {
    pub src_site: NodeId,
    pub dst_site: NodeId,
    pub mode: KgmMode,
    /// Per-origin counter; the origin is always `src_site`.
    pub msg_seq: u32,
    #[serde(default)]
    pub max_hops: Option<u32>,
    #[serde(default = "one")]
    pub path_count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub rate_bps: f64,
    pub max_hops: Option<u32>,
    pub path_count: u32,
    /// Sequence number of the message that set this entry.
    pub seq: u32,
    /// A stop leaves a tombstone so an older, late-arriving rate cannot
    /// resurrect the pair.
    pub stopped: bool,
}

/// Continuous demands per ordered site pair. Entries are last-writer-wins
/// by origin sequence number, so every node converges to the same matrix
/// whatever order the flood delivers messages in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemandMatrix {
    entries: BTreeMap<Commodity, DemandEntry>,
}

impl DemandMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the matrix changed.
    pub fn apply(&mut self, msg: &KeyGenerationMessage) -> bool {
        let c = Commodity::new(msg.src_site, msg.dst_site);
        if self.entries.get(&c).is_some_and(|e| e.seq >= msg.msg_seq) {
            return false;
        }
        let entry = match msg.mode {
            KgmMode::Continuous { rate_bps } => DemandEntry {
                rate_bps,
                max_hops: msg.max_hops,
                path_count: msg.path_count.max(1),
                seq: msg.msg_seq,
                stopped: false,
            },
            KgmMode::Stop => DemandEntry {
                rate_bps: 0.0,
                max_hops: None,
                path_count: 1,
                seq: msg.msg_seq,
                stopped: true,
            },
            KgmMode::OneTime { .. } => return false,
        };
        self.entries.insert(c, entry);
        true
    }

    pub fn rate(&self, c: Commodity) -> f64 {
        self.entries
            .get(&c)
            .filter(|e| !e.stopped)
            .map_or(0.0, |e| e.rate_bps)
    }

    pub fn active(&self) -> impl Iterator<Item = (Commodity, &DemandEntry)> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.stopped && e.rate_bps > 0.0)
            .map(|(c, e)| (*c, e))
    }

    pub fn demands(&self) -> Vec<CommodityDemand> {
        self.active()
            .map(|(c, e)| CommodityDemand {
                commodity: c,
                rate_bps: e.rate_bps,
                max_hops: e.max_hops,
                path_count: e.path_count,
            })
            .collect()
    }

    /// Canonical encoding, for cross-node equality checks.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.entries.iter().collect::<Vec<_>>()).expect("serializable")
    }
}

/// Flooding with duplicate suppression on (origin, msg_seq).
#[derive(Debug, Clone)]
pub struct KgmAgent {
    node: NodeId,
    next_seq: u32,
    seen: BTreeSet<(NodeId, u32)>,
    matrix: DemandMatrix,
}

impl KgmAgent {
    pub fn new(node: NodeId) -> Self {
        KgmAgent {
            node,
            next_seq: 1,
            seen: BTreeSet::new(),
            matrix: DemandMatrix::new(),
        }
    }

    pub fn matrix(&self) -> &DemandMatrix {
        &self.matrix
    }

    /// Builds a message from this node and applies it locally; the caller
    /// sends it to every neighbour.
    pub fn originate(
        &mut self,
        dst: NodeId,
        mode: KgmMode,
        max_hops: Option<u32>,
        path_count: u32,
    ) -> KeyGenerationMessage {
        let msg = KeyGenerationMessage {
            src_site: self.node,
            dst_site: dst,
            mode,
            msg_seq: self.next_seq,
            max_hops,
            path_count,
        };
        self.next_seq += 1;
        self.seen.insert((self.node, msg.msg_seq));
        self.matrix.apply(&msg);
        msg
    }

    /// Returns `(is_new, matrix_changed)`; only new messages are forwarded.
    pub fn handle(&mut self, msg: &KeyGenerationMessage) -> (bool, bool) {
        if !self.seen.insert((msg.src_site, msg.msg_seq)) {
            return (false, false);
        }
        (true, self.matrix.apply(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SiteId;

    #[test]
    fn out_of_order_delivery_converges() {
        let mut origin = KgmAgent::new(SiteId(1));
        let m1 = origin.originate(SiteId(3), KgmMode::Continuous { rate_bps: 100.0 }, None, 1);
        let m2 = origin.originate(SiteId(3), KgmMode::Stop, None, 1);
        let mut x = KgmAgent::new(SiteId(2));
        let mut y = KgmAgent::new(SiteId(4));
        x.handle(&m1);
        x.handle(&m2);
        y.handle(&m2);
        y.handle(&m1);
        assert_eq!(x.matrix(), y.matrix());
        assert_eq!(x.matrix(), origin.matrix());
        assert_eq!(x.matrix().rate(Commodity::new(SiteId(1), SiteId(3))), 0.0);
        assert_eq!(x.handle(&m1), (false, false));
    }
}
