//! Link-state advertisements and the topology graph built from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{LinkId, NodeId};

/// Undirected graph of quantum links weighted by key-generation capacity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub nodes: BTreeSet<NodeId>,
    pub links: BTreeMap<LinkId, f64>,
}

impl TopologyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_link(&mut self, x: NodeId, y: NodeId, capacity_bps: f64) {
        self.nodes.insert(x);
        self.nodes.insert(y);
        self.links.insert(LinkId::new(x, y), capacity_bps);
    }

    pub fn capacity(&self, link: LinkId) -> Option<f64> {
        self.links.get(&link).copied()
    }

    /// Neighbours in ascending id order.
    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .links
            .keys()
            .filter(|l| l.touches(node))
            .map(|l| l.other(node))
            .collect();
        out.sort();
        out
    }

    pub fn has_link(&self, x: NodeId, y: NodeId) -> bool {
        self.links.contains_key(&LinkId::new(x, y))
    }

    /// Links of a node path, in path order.
    pub fn path_links(path: &[NodeId]) -> Vec<LinkId> {
        path.windows(2).map(|w| LinkId::new(w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkStateAdvertisement {
    pub origin: NodeId,
    pub seq_no: u32,
    pub neighbors: Vec<(NodeId, f64)>,
}

/// Latest advertisement per origin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LsaDb {
    entries: BTreeMap<NodeId, LinkStateAdvertisement>,
}

impl LsaDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `lsa` if it is newer than what we hold for its origin; the
    /// caller floods it onwards only in that case.
    pub fn accept(&mut self, lsa: &LinkStateAdvertisement) -> bool {
        match self.entries.get(&lsa.origin) {
            Some(old) if old.seq_no >= lsa.seq_no => false,
            _ => {
                self.entries.insert(lsa.origin, lsa.clone());
                true
            }
        }
    }

    pub fn get(&self, origin: NodeId) -> Option<&LinkStateAdvertisement> {
        self.entries.get(&origin)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkStateAdvertisement> {
        self.entries.values()
    }
}

/// A link enters the graph only when both ends advertise it; its capacity
/// is the smaller of the two advertised values.
pub fn build_topology(db: &LsaDb) -> TopologyGraph {
    let mut g = TopologyGraph::new();
    for lsa in db.iter() {
        g.nodes.insert(lsa.origin);
        for &(peer, cap) in &lsa.neighbors {
            let Some(back) = db.get(peer) else {
                continue;
            };
            let Some(&(_, back_cap)) = back.neighbors.iter().find(|(n, _)| *n == lsa.origin) else {
                continue;
            };
            g.add_link(lsa.origin, peer, cap.min(back_cap));
        }
    }
    g
}
