//! Per-node QNL control plane: adjacency, link-state flooding, demand
//! flooding and the resulting flow assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::hello::{HelloMonitor, LinkChange, DEAD_AFTER_MISSES, HELLO_INTERVAL_S};
use super::kgm::{KeyGenerationMessage, KgmAgent, KgmMode};
use super::mcfp::{solve_mcfp, CommodityDemand, FlowAssignment, McfpConfig, McfpError};
use super::routing::{shortest_path, RoutingError};
use super::topology::{build_topology, LinkStateAdvertisement, LsaDb, TopologyGraph};
use crate::ids::{Commodity, FlowKey, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMsg {
    Hello { from: NodeId },
    Lsa(LinkStateAdvertisement),
    Kgm(KeyGenerationMessage),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlOutput {
    Send {
        to: NodeId,
        msg: ControlMsg,
    },
    /// New flow assignment for the data plane.
    Assignment(FlowAssignment),
    Link(LinkChange),
}

#[derive(Debug, Clone)]
pub struct QnlControl {
    node: NodeId,
    mcfp: McfpConfig,
    /// Configured neighbours and their current link capacity.
    adjacency: BTreeMap<NodeId, f64>,
    hello: HelloMonitor,
    lsdb: LsaDb,
    lsa_seq: u32,
    kgm: KgmAgent,
    graph: TopologyGraph,
    assignment: FlowAssignment,
    dirty: bool,
    solves: u64,
    outputs: Vec<ControlOutput>,
}

impl QnlControl {
    pub fn new(node: NodeId, neighbors: &[(NodeId, f64)], mcfp: McfpConfig) -> Self {
        let mut hello = HelloMonitor::new(HELLO_INTERVAL_S, DEAD_AFTER_MISSES);
        for (n, _) in neighbors {
            hello.watch(*n, 0.0);
        }
        QnlControl {
            node,
            mcfp,
            adjacency: neighbors.iter().copied().collect(),
            hello,
            lsdb: LsaDb::new(),
            lsa_seq: 0,
            kgm: KgmAgent::new(node),
            graph: TopologyGraph::new(),
            assignment: FlowAssignment::default(),
            dirty: true,
            solves: 0,
            outputs: Vec::new(),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn graph(&self) -> &TopologyGraph {
        &self.graph
    }

    pub fn assignment(&self) -> &FlowAssignment {
        &self.assignment
    }

    pub fn demand_matrix(&self) -> &super::kgm::DemandMatrix {
        self.kgm.matrix()
    }

    pub fn solves(&self) -> u64 {
        self.solves
    }

    pub fn take_outputs(&mut self) -> Vec<ControlOutput> {
        std::mem::take(&mut self.outputs)
    }

    fn flood<F: Fn(NodeId) -> bool>(&mut self, msg: ControlMsg, skip: F) {
        let to: Vec<NodeId> = self
            .adjacency
            .keys()
            .copied()
            .filter(|n| !skip(*n))
            .collect();
        for n in to {
            self.outputs.push(ControlOutput::Send {
                to: n,
                msg: msg.clone(),
            });
        }
    }

    /// Advertises the neighbours that are alive and have capacity.
    fn originate_lsa(&mut self) {
        self.lsa_seq += 1;
        let neighbors = self
            .adjacency
            .iter()
            .filter(|(n, c)| **c > 0.0 && self.hello.is_up(**n))
            .map(|(n, c)| (*n, *c))
            .collect();
        let lsa = LinkStateAdvertisement {
            origin: self.node,
            seq_no: self.lsa_seq,
            neighbors,
        };
        self.lsdb.accept(&lsa);
        self.dirty = true;
        self.flood(ControlMsg::Lsa(lsa), |_| false);
    }

    pub fn start(&mut self, now: f64) {
        for n in self.adjacency.keys().copied().collect::<Vec<_>>() {
            self.hello.watch(n, now);
        }
        self.originate_lsa();
    }

    /// Sends hellos and declares silent neighbours dead; call once per
    /// hello interval.
    pub fn on_hello_timer(&mut self, now: f64) {
        let from = self.node;
        self.flood(ControlMsg::Hello { from }, |_| false);
        let changes = self.hello.check(now);
        if !changes.is_empty() {
            for c in changes {
                self.outputs.push(ControlOutput::Link(c));
            }
            self.originate_lsa();
        }
    }

    /// A capacity change reported by the link layer; zero means down.
    pub fn set_link_capacity(&mut self, neighbor: NodeId, capacity_bps: f64) {
        let Some(c) = self.adjacency.get_mut(&neighbor) else {
            return;
        };
        if (*c - capacity_bps).abs() > 1e-9 {
            *c = capacity_bps;
            self.outputs.push(ControlOutput::Link(LinkChange::Capacity {
                neighbor,
                capacity_bps,
            }));
            self.originate_lsa();
        }
    }

    pub fn request_continuous(
        &mut self,
        dst: NodeId,
        rate_bps: f64,
        max_hops: Option<u32>,
        path_count: u32,
    ) {
        let mode = if rate_bps > 0.0 {
            KgmMode::Continuous { rate_bps }
        } else {
            KgmMode::Stop
        };
        let msg = self.kgm.originate(dst, mode, max_hops, path_count);
        self.dirty = true;
        self.flood(ControlMsg::Kgm(msg), |_| false);
    }

    pub fn stop(&mut self, dst: NodeId) {
        self.request_continuous(dst, 0.0, None, 1);
    }

    /// Route for an on-demand generation towards `dst`.
    pub fn one_time_flow(&self, dst: NodeId) -> Result<FlowKey, RoutingError> {
        let path = shortest_path(&self.graph, self.node, dst)?;
        Ok(FlowKey::new(Commodity::new(self.node, dst), path))
    }

    pub fn on_message(&mut self, now: f64, from: NodeId, msg: ControlMsg) {
        match msg {
            ControlMsg::Hello { from } => {
                if let Some(change) = self.hello.on_hello(from, now) {
                    self.outputs.push(ControlOutput::Link(change));
                    self.originate_lsa();
                }
            }
            ControlMsg::Lsa(lsa) => {
                if self.lsdb.accept(&lsa) {
                    self.dirty = true;
                    self.flood(ControlMsg::Lsa(lsa), |n| n == from);
                }
            }
            ControlMsg::Kgm(kgm) => {
                let (new, changed) = self.kgm.handle(&kgm);
                if new {
                    self.dirty |= changed;
                    self.flood(ControlMsg::Kgm(kgm), |n| n == from);
                }
            }
        }
    }

    /// Rebuilds the topology and re-solves the MCFP if anything changed
    /// since the last call. Commodities without a route are left out.
    pub fn recompute(&mut self) -> bool {
        if !self.dirty {
            return false;
        }
        self.dirty = false;
        self.graph = build_topology(&self.lsdb);
        let mut demands: Vec<CommodityDemand> = self.kgm.matrix().demands();
        let assignment = loop {
            if demands.is_empty() {
                break FlowAssignment::default();
            }
            match solve_mcfp(&self.graph, &demands, &self.mcfp) {
                Ok(a) => break a,
                Err(McfpError::UnreachableCommodity(c)) => demands.retain(|d| d.commodity != c),
                Err(e) => {
                    log::warn!("{}: flow assignment failed: {e}", self.node);
                    break FlowAssignment::default();
                }
            }
        };
        self.solves += 1;
        if assignment != self.assignment {
            self.assignment = assignment.clone();
            self.outputs.push(ControlOutput::Assignment(assignment));
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SiteId;

    fn pump(nodes: &mut BTreeMap<NodeId, QnlControl>, now: f64) {
        loop {
            let mut moved = false;
            for id in nodes.keys().copied().collect::<Vec<_>>() {
                for o in nodes.get_mut(&id).unwrap().take_outputs() {
                    if let ControlOutput::Send { to, msg } = o {
                        moved = true;
                        nodes.get_mut(&to).unwrap().on_message(now, id, msg);
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }

    #[test]
    fn converges_and_reroutes_on_failure() {
        let caps = [(1, 2), (2, 3), (1, 3)];
        let mut nodes = BTreeMap::new();
        for n in 1..=3u16 {
            let nbrs: Vec<(NodeId, f64)> = caps
                .iter()
                .filter(|(a, b)| *a == n || *b == n)
                .map(|(a, b)| (SiteId(if *a == n { *b } else { *a }), 1000.0))
                .collect();
            nodes.insert(
                SiteId(n),
                QnlControl::new(SiteId(n), &nbrs, McfpConfig::default()),
            );
        }
        for c in nodes.values_mut() {
            c.start(0.0);
        }
        nodes
            .get_mut(&SiteId(1))
            .unwrap()
            .request_continuous(SiteId(3), 1500.0, None, 1);
        pump(&mut nodes, 0.0);
        for c in nodes.values_mut() {
            c.recompute();
        }
        let first = nodes[&SiteId(1)].assignment().clone();
        assert!((first.lambda - 4.0 / 3.0).abs() < 1e-6, "{}", first.lambda);
        for c in nodes.values() {
            assert_eq!(c.assignment(), &first);
            assert_eq!(
                c.demand_matrix().canonical_bytes(),
                nodes[&SiteId(1)].demand_matrix().canonical_bytes()
            );
        }
        nodes
            .get_mut(&SiteId(1))
            .unwrap()
            .set_link_capacity(SiteId(3), 0.0);
        nodes
            .get_mut(&SiteId(3))
            .unwrap()
            .set_link_capacity(SiteId(1), 0.0);
        pump(&mut nodes, 0.5);
        for c in nodes.values_mut() {
            c.recompute();
        }
        let second = nodes[&SiteId(2)].assignment().clone();
        assert!((second.lambda - 1000.0 / 1500.0).abs() < 1e-6);
        assert_eq!(second.path_flows.len(), 1);
        nodes.get_mut(&SiteId(1)).unwrap().stop(SiteId(3));
        pump(&mut nodes, 1.0);
        for c in nodes.values_mut() {
            c.recompute();
            assert!(c.assignment().path_flows.is_empty());
        }
    }
}
