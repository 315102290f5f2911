//! Path computation over the topology graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::topology::TopologyGraph;
use crate::ids::{LinkId, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("{dst} is unreachable from {src}")]
    Unreachable { src: NodeId, dst: NodeId },
}

/// Hop distances to `dst` from every node that can reach it.
fn hops_to(graph: &TopologyGraph, dst: NodeId, banned: &BTreeSet<NodeId>) -> BTreeMap<NodeId, u32> {
    let mut dist = BTreeMap::new();
    if !graph.nodes.contains(&dst) {
        return dist;
    }
    dist.insert(dst, 0);
    let mut queue = VecDeque::from([dst]);
    while let Some(n) = queue.pop_front() {
        let d = dist[&n];
        for m in graph.neighbors(n) {
            if !banned.contains(&m) && !dist.contains_key(&m) {
                dist.insert(m, d + 1);
                queue.push_back(m);
            }
        }
    }
    dist
}

/// Minimum-hop path; among equals, the lexicographically smallest node
/// sequence. Walking forward from `src` and always taking the smallest
/// neighbour one hop closer to `dst` yields exactly that path.
pub fn shortest_path(
    graph: &TopologyGraph,
    src: NodeId,
    dst: NodeId,
) -> Result<Vec<NodeId>, RoutingError> {
    shortest_path_avoiding(graph, src, dst, &BTreeSet::new())
}

fn shortest_path_avoiding(
    graph: &TopologyGraph,
    src: NodeId,
    dst: NodeId,
    banned: &BTreeSet<NodeId>,
) -> Result<Vec<NodeId>, RoutingError> {
    let dist = hops_to(graph, dst, banned);
    let Some(&d) = dist.get(&src) else {
        return Err(RoutingError::Unreachable { src, dst });
    };
    let mut path = vec![src];
    let mut at = src;
    for step in (0..d).rev() {
        at = graph
            .neighbors(at)
            .into_iter()
            .find(|n| dist.get(n) == Some(&step))
            .expect("a closer neighbour exists");
        path.push(at);
    }
    Ok(path)
}

/// Next hop and full path to every reachable destination.
pub fn routing_table(graph: &TopologyGraph, node: NodeId) -> BTreeMap<NodeId, Vec<NodeId>> {
    graph
        .nodes
        .iter()
        .filter(|d| **d != node)
        .filter_map(|d| shortest_path(graph, node, *d).ok().map(|p| (*d, p)))
        .collect()
}

/// Up to `k` node-disjoint paths, found greedily: each path is the shortest
/// one avoiding the interior nodes of those already chosen. A direct link can
/// be used by at most one path.
pub fn disjoint_paths(
    graph: &TopologyGraph,
    src: NodeId,
    dst: NodeId,
    k: usize,
) -> Vec<Vec<NodeId>> {
    let mut banned = BTreeSet::new();
    let mut g = graph.clone();
    let mut out = Vec::new();
    while out.len() < k {
        let Ok(p) = shortest_path_avoiding(&g, src, dst, &banned) else {
            break;
        };
        banned.extend(p[1..p.len() - 1].iter().copied());
        if p.len() == 2 {
            g.links.remove(&LinkId::new(src, dst));
        }
        out.push(p);
    }
    out
}

/// Cheapest path under non-negative per-link `lengths` using at most
/// `max_hops` links (hop-bounded Bellman-Ford). Ties keep the earlier-found,
/// so results are deterministic for a given graph.
pub fn cheapest_path(
    graph: &TopologyGraph,
    lengths: &BTreeMap<LinkId, f64>,
    src: NodeId,
    dst: NodeId,
    max_hops: usize,
) -> Option<(f64, Vec<NodeId>)> {
    if src == dst {
        return None;
    }
    let nodes: Vec<NodeId> = graph.nodes.iter().copied().collect();
    let index = |n: NodeId| nodes.binary_search(&n).ok();
    let (s, t) = (index(src)?, index(dst)?);
    let adj: Vec<Vec<(usize, f64)>> = nodes
        .iter()
        .map(|&n| {
            graph
                .neighbors(n)
                .into_iter()
                .filter_map(|m| {
                    let len = lengths
                        .get(&LinkId::new(n, m))
                        .copied()
                        .unwrap_or(f64::INFINITY);
                    Some((index(m)?, len))
                })
                .collect()
        })
        .collect();
    // cost[n] after layer h uses at most h hops; pred[h][n] is the node
    // relaxed into n at layer h, if any.
    let mut cost = vec![f64::INFINITY; nodes.len()];
    cost[s] = 0.0;
    let mut pred: Vec<Vec<Option<usize>>> = Vec::new();
    for _ in 0..max_hops {
        let mut next = cost.clone();
        let mut layer = vec![None; nodes.len()];
        for n in 0..nodes.len() {
            if !cost[n].is_finite() {
                continue;
            }
            for &(m, len) in &adj[n] {
                let c = cost[n] + len;
                if c < next[m] && c.is_finite() {
                    next[m] = c;
                    layer[m] = Some(n);
                }
            }
        }
        if layer.iter().all(Option::is_none) {
            break;
        }
        cost = next;
        pred.push(layer);
    }
    if !cost[t].is_finite() {
        return None;
    }
    let mut walk = vec![nodes[t]];
    let mut at = t;
    for layer in pred.iter().rev() {
        if let Some(p) = layer[at] {
            at = p;
            walk.push(nodes[at]);
        }
    }
    walk.reverse();
    Some((cost[t], remove_cycles(walk)))
}

/// Zero-length cycles can appear in a cheapest walk; cutting them never
/// raises the cost or the hop count.
fn remove_cycles(walk: Vec<NodeId>) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::with_capacity(walk.len());
    for n in walk {
        if let Some(i) = out.iter().position(|m| *m == n) {
            out.truncate(i);
        }
        out.push(n);
    }
    out
}
