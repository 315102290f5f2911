//! Key-generation flow allocation: maximum concurrent multi-commodity flow
//! (or maximum total flow) over the quantum link graph.
//!
//! A multiplicative-weights pass (Garg-Könemann with Fleischer's phases)
//! finds a near-optimal routing. Its paths then seed a path-based LP that is
//! solved exactly with column generation, so the returned lambda is optimal
//! up to floating-point tolerance whenever polishing is enabled.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lp;
use super::routing::{cheapest_path, disjoint_paths};
use super::topology::TopologyGraph;
use crate::ids::{Commodity, FlowKey, LinkId, NodeId};

pub const DEFAULT_EPSILON: f64 = 0.05;
const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Maximise the fraction lambda of every demand served simultaneously.
    #[default]
    MaxConcurrent,
    /// Maximise total served rate, each commodity capped at its demand.
    MaxTotal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McfpConfig {
    pub epsilon: f64,
    pub objective: Objective,
    pub polish: bool,
}

impl Default for McfpConfig {
    fn default() -> Self {
        McfpConfig {
            epsilon: DEFAULT_EPSILON,
            objective: Objective::MaxConcurrent,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommodityDemand {
    pub commodity: Commodity,
    pub rate_bps: f64,
    #[serde(default)]
    pub max_hops: Option<u32>,
    /// More than one means every key is split over this many node-disjoint
    /// paths, each carrying the full rate.
    #[serde(default = "one")]
    pub path_count: u32,
}

fn one() -> u32 {
    1
}

impl CommodityDemand {
    pub fn new(src: NodeId, dst: NodeId, rate_bps: f64) -> Self {
        CommodityDemand {
            commodity: Commodity::new(src, dst),
            rate_bps,
            max_hops: None,
            path_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McfpError {
    #[error("no demands")]
    EmptyDemand,
    #[error("commodity {0} has no usable route")]
    UnreachableCommodity(Commodity),
    #[error("commodity {0} has a non-positive rate")]
    InvalidRate(Commodity),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("link {link} reserves {reserved} bps of {capacity}")]
pub struct OverReserved {
    pub link: LinkId,
    pub reserved: f64,
    pub capacity: f64,
}

/// Solver output. `lambda` is uncapped; the flows are what the scheduler
/// allocates, i.e. `min(lambda, 1) * demand` per commodity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub lambda: f64,
    pub demands: BTreeMap<Commodity, f64>,
    pub path_flows: BTreeMap<FlowKey, f64>,
    /// Commodities carried as a split key over a fixed disjoint bundle.
    #[serde(default)]
    pub bundled: BTreeSet<Commodity>,
}

impl FlowAssignment {
    pub fn link_flows(&self) -> BTreeMap<(LinkId, Commodity), f64> {
        let mut out = BTreeMap::new();
        for (key, rate) in &self.path_flows {
            for l in TopologyGraph::path_links(&key.path) {
                *out.entry((l, key.commodity)).or_insert(0.0) += rate;
            }
        }
        out
    }

    pub fn link_load(&self, link: LinkId) -> f64 {
        self.path_flows
            .iter()
            .filter(|(k, _)| TopologyGraph::path_links(&k.path).contains(&link))
            .map(|(_, r)| r)
            .sum()
    }

    /// Flows crossing `link`, in key order.
    pub fn flows_on(&self, link: LinkId) -> Vec<(FlowKey, f64)> {
        self.path_flows
            .iter()
            .filter(|(k, r)| **r > 0.0 && TopologyGraph::path_links(&k.path).contains(&link))
            .map(|(k, r)| (k.clone(), *r))
            .collect()
    }

    /// Rate that reaches the commodity's endpoints as usable key; a split
    /// key needs all its parts, so that is the rate of one part.
    pub fn delivered(&self, commodity: Commodity) -> f64 {
        let parts: Vec<f64> = self
            .path_flows
            .iter()
            .filter(|(k, _)| k.commodity == commodity)
            .map(|(_, r)| *r)
            .collect();
        let sum: f64 = parts.iter().sum();
        if self.bundled.contains(&commodity) {
            sum / parts.len().max(1) as f64
        } else {
            sum
        }
    }

    /// Capacity and endpoint checks; conservation holds by construction
    /// for path flows, and is re-derived from link flows here.
    pub fn check(&self, graph: &TopologyGraph) -> Result<(), String> {
        let mut load: BTreeMap<LinkId, f64> = BTreeMap::new();
        for (key, rate) in &self.path_flows {
            if *rate < 0.0 {
                return Err(format!("negative flow on {key:?}"));
            }
            if key.path.first() != Some(&key.commodity.src)
                || key.path.last() != Some(&key.commodity.dst)
            {
                return Err(format!("path of {key:?} does not join its endpoints"));
            }
            for l in TopologyGraph::path_links(&key.path) {
                if !graph.links.contains_key(&l) {
                    return Err(format!("flow uses missing link {l}"));
                }
                *load.entry(l).or_insert(0.0) += rate;
            }
        }
        for (l, used) in &load {
            let cap = graph.links[l];
            if *used > cap * (1.0 + 1e-7) + 1e-9 {
                return Err(format!("link {l} carries {used} > {cap}"));
            }
        }
        // conservation per commodity at every non-endpoint node
        let mut net: BTreeMap<(Commodity, NodeId), f64> = BTreeMap::new();
        for (key, rate) in &self.path_flows {
            for w in key.path.windows(2) {
                *net.entry((key.commodity, w[0])).or_insert(0.0) -= rate;
                *net.entry((key.commodity, w[1])).or_insert(0.0) += rate;
            }
        }
        for ((c, n), v) in net {
            if n != c.src && n != c.dst && v.abs() > 1e-6 {
                return Err(format!("commodity {c} not conserved at {n}"));
            }
        }
        Ok(())
    }
}

pub fn subtract_priority_reservations(
    graph: &TopologyGraph,
    reservations: &[(LinkId, f64)],
) -> Result<TopologyGraph, OverReserved> {
    let mut out = graph.clone();
    for &(link, amount) in reservations {
        let Some(cap) = out.links.get_mut(&link) else {
            return Err(OverReserved {
                link,
                reserved: amount,
                capacity: 0.0,
            });
        };
        if amount > *cap + FEASIBILITY_SLACK {
            return Err(OverReserved {
                link,
                reserved: amount,
                capacity: *cap,
            });
        }
        *cap = (*cap - amount).max(0.0);
    }
    Ok(out)
}

/// One way of carrying a commodity: a single path, or a bundle of disjoint
/// paths that all carry the same rate.
type Route = Vec<Vec<NodeId>>;

fn route_links(route: &Route) -> Vec<LinkId> {
    route
        .iter()
        .flat_map(|p| TopologyGraph::path_links(p))
        .collect()
}

struct Problem<'a> {
    graph: TopologyGraph,
    demands: &'a [CommodityDemand],
    /// Fixed bundle for split commodities.
    bundles: Vec<Option<Route>>,
}

impl Problem<'_> {
    fn hops(&self, j: usize) -> usize {
        self.demands[j]
            .max_hops
            .map_or(self.graph.nodes.len(), |h| h as usize)
            .max(1)
    }

    fn cheapest(&self, j: usize, lengths: &BTreeMap<LinkId, f64>) -> Option<(f64, Route)> {
        if let Some(b) = &self.bundles[j] {
            let cost = route_links(b).iter().map(|l| lengths[l]).sum();
            return Some((cost, b.clone()));
        }
        let c = self.demands[j].commodity;
        cheapest_path(&self.graph, lengths, c.src, c.dst, self.hops(j))
            .map(|(cost, p)| (cost, vec![p]))
    }
}

const POLISH_WARM_START_EPSILON: f64 = 0.25;

pub fn solve_mcfp(
    graph: &TopologyGraph,
    demands: &[CommodityDemand],
    config: &McfpConfig,
) -> Result<FlowAssignment, McfpError> {
    if demands.is_empty() {
        return Err(McfpError::EmptyDemand);
    }
    let mut usable = graph.clone();
    usable.links.retain(|_, c| *c > 0.0);
    let mut bundles = Vec::new();
    for d in demands {
        if d.rate_bps.is_nan() || d.rate_bps <= 0.0 {
            return Err(McfpError::InvalidRate(d.commodity));
        }
        if d.path_count > 1 {
            let limit = d.max_hops.map_or(usize::MAX, |h| h as usize);
            let paths: Route = disjoint_paths(
                &usable,
                d.commodity.src,
                d.commodity.dst,
                d.path_count as usize,
            )
            .into_iter()
            .filter(|p| p.len() - 1 <= limit)
            .collect();
            if paths.is_empty() {
                return Err(McfpError::UnreachableCommodity(d.commodity));
            }
            bundles.push(Some(paths));
        } else {
            bundles.push(None);
        }
    }
    let problem = Problem {
        graph: usable,
        demands,
        bundles,
    };
    let unit: BTreeMap<LinkId, f64> = problem.graph.links.keys().map(|l| (*l, 1.0)).collect();
    for (j, d) in demands.iter().enumerate() {
        if problem.cheapest(j, &unit).is_none() {
            return Err(McfpError::UnreachableCommodity(d.commodity));
        }
    }

    // Column generation makes the polished answer exact, so multiplicative
    // weights only has to supply a warm start there.
    let epsilon = if config.polish {
        config.epsilon.max(POLISH_WARM_START_EPSILON)
    } else {
        config.epsilon
    };
    let (mut routes, _) = garg_konemann(&problem, epsilon);
    let flows = if config.polish {
        polish(&problem, &mut routes, config.objective)
    } else {
        let mut flows = routes.clone();
        scale_gk(&problem, &mut flows, config.objective);
        flows
    };
    Ok(assemble(&problem, flows, config.objective))
}

/// Multiplicative-weights routing. Returns per-commodity route flows, not yet
/// scaled to feasibility, and the number of phases run.
fn garg_konemann(p: &Problem<'_>, epsilon: f64) -> (Vec<BTreeMap<Route, f64>>, usize) {
    let eps = epsilon.clamp(1e-3, 0.5);
    let m = p.graph.links.len().max(1) as f64;
    let delta = (1.0 + eps) * ((1.0 + eps) * m).powf(-1.0 / eps);
    let caps = &p.graph.links;
    let mut length: BTreeMap<LinkId, f64> = caps.iter().map(|(l, c)| (*l, delta / c)).collect();
    let mut dual: f64 = caps.iter().map(|(l, c)| c * length[l]).sum();

    // Pre-scale so one phase routes roughly a 1/k share of the bottleneck.
    let k = p.demands.len() as f64;
    let bound = p
        .demands
        .iter()
        .map(|d| {
            let out: f64 = caps
                .iter()
                .filter(|(l, _)| l.touches(d.commodity.src))
                .map(|(_, c)| c)
                .sum();
            let inn: f64 = caps
                .iter()
                .filter(|(l, _)| l.touches(d.commodity.dst))
                .map(|(_, c)| c)
                .sum();
            out.min(inn) / (d.rate_bps * f64::from(d.path_count.max(1)))
        })
        .fold(f64::INFINITY, f64::min);
    let scale = (bound / k).max(1e-12);

    let mut routes: Vec<BTreeMap<Route, f64>> = vec![BTreeMap::new(); p.demands.len()];
    let mut phases = 0;
    while dual < 1.0 && phases < 100_000 {
        for (j, d) in p.demands.iter().enumerate() {
            let mut rem = d.rate_bps * scale;
            while rem > 1e-15 && dual < 1.0 {
                let (_, route) = p.cheapest(j, &length).expect("reachable");
                let links = route_links(&route);
                let bottleneck = links.iter().map(|l| caps[l]).fold(f64::INFINITY, f64::min);
                let f = rem.min(bottleneck);
                rem -= f;
                for l in &links {
                    let old = length[l];
                    let new = old * (1.0 + eps * f / caps[l]);
                    dual += caps[l] * (new - old);
                    length.insert(*l, new);
                }
                *routes[j].entry(route).or_insert(0.0) += f;
            }
        }
        phases += 1;
    }
    (routes, phases)
}

fn link_loads(routes: &[BTreeMap<Route, f64>]) -> BTreeMap<LinkId, f64> {
    let mut load = BTreeMap::new();
    for r in routes {
        for (route, f) in r {
            for l in route_links(route) {
                *load.entry(l).or_insert(0.0) += f;
            }
        }
    }
    load
}

/// Makes raw multiplicative-weights flows feasible and, for the concurrent
/// objective, trims every commodity to the common fraction.
fn scale_gk(p: &Problem<'_>, routes: &mut [BTreeMap<Route, f64>], objective: Objective) {
    let load = link_loads(routes);
    let congestion = load
        .iter()
        .map(|(l, v)| v / p.graph.links[l])
        .fold(0.0_f64, f64::max);
    if congestion > 0.0 {
        for r in routes.iter_mut() {
            for f in r.values_mut() {
                *f /= congestion;
            }
        }
    }
    let served: Vec<f64> = routes.iter().map(|r| r.values().sum()).collect();
    match objective {
        Objective::MaxConcurrent => {
            let lambda = p
                .demands
                .iter()
                .zip(&served)
                .map(|(d, s)| s / d.rate_bps)
                .fold(f64::INFINITY, f64::min);
            for ((r, d), s) in routes.iter_mut().zip(p.demands).zip(&served) {
                if *s > 0.0 {
                    let keep = lambda * d.rate_bps / s;
                    r.values_mut().for_each(|f| *f *= keep);
                }
            }
        }
        Objective::MaxTotal => {
            for ((r, d), s) in routes.iter_mut().zip(p.demands).zip(&served) {
                if *s > d.rate_bps {
                    let keep = d.rate_bps / s;
                    r.values_mut().for_each(|f| *f *= keep);
                }
            }
        }
    }
}

/// Exact path LP over the known routes, extended by column generation until
/// no route has positive reduced cost.
fn polish(
    p: &Problem<'_>,
    seed: &mut [BTreeMap<Route, f64>],
    objective: Objective,
) -> Vec<BTreeMap<Route, f64>> {
    let links: Vec<LinkId> = p.graph.links.keys().copied().collect();
    let row_of: BTreeMap<LinkId, usize> = links.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut columns: Vec<(usize, Route)> = Vec::new();
    let mut known: BTreeSet<(usize, Route)> = BTreeSet::new();
    let unit: BTreeMap<LinkId, f64> = links.iter().map(|l| (*l, 1.0)).collect();
    for (j, seeded) in seed.iter().enumerate() {
        let mut candidates: Vec<Route> = seeded.keys().cloned().collect();
        candidates.push(p.cheapest(j, &unit).expect("reachable").1);
        for r in candidates {
            if known.insert((j, r.clone())) {
                columns.push((j, r));
            }
        }
    }
    let k = p.demands.len();
    let m = links.len();
    loop {
        // columns: route flows, then lambda for the concurrent objective
        let n = columns.len() + usize::from(objective == Objective::MaxConcurrent);
        let mut a = vec![vec![0.0; n]; m + k];
        let mut b = vec![0.0; m + k];
        let mut c = vec![0.0; n];
        for (i, l) in links.iter().enumerate() {
            b[i] = p.graph.links[l];
        }
        for (col, (j, route)) in columns.iter().enumerate() {
            for l in route_links(route) {
                a[row_of[&l]][col] += 1.0;
            }
            match objective {
                Objective::MaxConcurrent => a[m + j][col] = -1.0,
                Objective::MaxTotal => {
                    a[m + j][col] = 1.0;
                    c[col] = 1.0;
                }
            }
        }
        match objective {
            Objective::MaxConcurrent => {
                let lam = columns.len();
                c[lam] = 1.0;
                for (j, d) in p.demands.iter().enumerate() {
                    a[m + j][lam] = d.rate_bps;
                }
            }
            Objective::MaxTotal => {
                for (j, d) in p.demands.iter().enumerate() {
                    b[m + j] = d.rate_bps;
                }
            }
        }
        let sol = lp::maximize(&c, &a, &b).expect("bounded path LP");
        let y: BTreeMap<LinkId, f64> = links
            .iter()
            .enumerate()
            .map(|(i, l)| (*l, sol.duals[i].max(0.0)))
            .collect();
        let mut added = false;
        for j in 0..k {
            if p.bundles[j].is_some() {
                continue;
            }
            let z = sol.duals[m + j];
            // shift lengths so zero-priced links still prefer fewer hops
            let priced: BTreeMap<LinkId, f64> = y.iter().map(|(l, v)| (*l, v + 1e-12)).collect();
            let Some((cost, route)) = p.cheapest(j, &priced) else {
                continue;
            };
            let cost = cost - 1e-12 * (route[0].len() - 1) as f64;
            let improving = match objective {
                Objective::MaxConcurrent => cost < z - 1e-9,
                Objective::MaxTotal => 1.0 - cost - z > 1e-9,
            };
            if improving && known.insert((j, route.clone())) {
                columns.push((j, route));
                added = true;
            }
        }
        if !added || columns.len() > 4096 {
            let mut out = vec![BTreeMap::new(); k];
            for (col, (j, route)) in columns.iter().enumerate() {
                if sol.x[col] > 0.0 {
                    *out[*j].entry(route.clone()).or_insert(0.0) += sol.x[col];
                }
            }
            if objective == Objective::MaxConcurrent {
                // serve every commodity at exactly lambda
                let lambda = sol.x[columns.len()];
                for (r, d) in out.iter_mut().zip(p.demands) {
                    let s: f64 = r.values().sum();
                    if s > lambda * d.rate_bps && s > 0.0 {
                        let keep = lambda * d.rate_bps / s;
                        r.values_mut().for_each(|f| *f *= keep);
                    }
                }
            }
            return out;
        }
    }
}

fn assemble(
    p: &Problem<'_>,
    routes: Vec<BTreeMap<Route, f64>>,
    objective: Objective,
) -> FlowAssignment {
    let served: Vec<f64> = routes.iter().map(|r| r.values().sum()).collect();
    let lambda = p
        .demands
        .iter()
        .zip(&served)
        .map(|(d, s)| s / d.rate_bps)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let mut out = FlowAssignment {
        lambda,
        ..FlowAssignment::default()
    };
    for (j, (d, r)) in p.demands.iter().zip(routes).enumerate() {
        if p.bundles[j].is_some() {
            out.bundled.insert(d.commodity);
        }
        *out.demands.entry(d.commodity).or_insert(0.0) += d.rate_bps;
        let cap = match objective {
            Objective::MaxConcurrent if lambda > 1.0 => 1.0 / lambda,
            _ => 1.0,
        };
        for (route, f) in r {
            for path in route {
                *out.path_flows
                    .entry(FlowKey::new(d.commodity, path))
                    .or_insert(0.0) += f * cap;
            }
        }
    }
    out
}
