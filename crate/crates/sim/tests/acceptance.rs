//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; any failure makes the
//! process exit non-zero.
//!
//! Reference values come from oracles written here, independently of the
//! code under test: a path-enumeration LP for the flow problem, a textbook
//! round-based DWRR, and a direct SHA-256/AES-CTR key expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qkdnet::ids::{Commodity, FlowKey, LinkId, NodeId, PoolId, SessionId, SiteId};
use qkdnet::keypool::{KeyReference, PoolConfig};
use qkdnet::kms::selection::NONCE_LEN;
use qkdnet::kms::service::bootstrap_key;
use qkdnet::kms::sync::PoolReplica;
use qkdnet::kms::{
    Frame, GrantRole, InterSiteKey, KeySelectionInfo, KeySource, KmsConfig, KmsError, MaterialId,
    NegotiationMode, PolicyDb, RequestedParams, SealedSelectionPacket, SecurityPolicy,
};
use qkdnet::qnl::mcfp::{solve_mcfp, CommodityDemand, McfpConfig};
use qkdnet::qnl::schedule::{DwrrScheduler, ScheduleError, DEFAULT_QUANTUM_BITS};
use qkdnet::qnl::topology::TopologyGraph;
use qkdnet_sim::harness::{KmsPair, RelayNet, SyncPair};
use qkdnet_sim::metrics::to_csv_string;
use qkdnet_sim::{run, RunOptions, Scenario};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || {
        format!("{what} took {took:?}, limit {limit:?}")
    })
}

fn site(n: u16) -> SiteId {
    SiteId(n)
}

// ---- random topologies -------------------------------------------------------

/// A connected graph on `n` nodes that contains the walk `path` (node ids
/// 1..=n), with extra random links.
fn graph_with_path(
    rng: &mut ChaCha8Rng,
    n: u16,
    path: &[NodeId],
    extra: f64,
    cap: (f64, f64),
) -> TopologyGraph {
    let mut g = TopologyGraph::new();
    for w in path.windows(2) {
        g.add_link(w[0], w[1], rng.gen_range(cap.0..=cap.1));
    }
    let mut placed: Vec<NodeId> = path.to_vec();
    for i in 1..=n {
        let v = site(i);
        if !placed.contains(&v) {
            let u = *placed.choose(rng).expect("non-empty");
            g.add_link(u, v, rng.gen_range(cap.0..=cap.1));
            placed.push(v);
        }
    }
    for a in 1..=n {
        for b in a + 1..=n {
            if !g.has_link(site(a), site(b)) && rng.gen_bool(extra) {
                g.add_link(site(a), site(b), rng.gen_range(cap.0..=cap.1));
            }
        }
    }
    g
}

// ---- 1. relay correctness ----------------------------------------------------

/// Requests `units` relay units over `path` and returns how many relayed keys
/// arrived identical at both ends.
fn relay_once(
    g: &TopologyGraph,
    path: Vec<NodeId>,
    unit: usize,
    units: u64,
    seed: u64,
) -> Result<usize, String> {
    let c = Commodity::new(path[0], *path.last().expect("path"));
    let flow = FlowKey::new(c, path.clone());
    let mut net = RelayNet::new(g, unit, seed);
    net.request(flow, units * unit as u64 * 8);
    for t in 0..40 {
        net.feed(unit * 2, f64::from(t), 1.0);
        let delivered: usize = net.pairs(c).iter().map(|p| p.1.len()).sum();
        if delivered >= units as usize * unit {
            break;
        }
    }
    let pairs = net.pairs(c);
    let delivered: usize = pairs.iter().map(|p| p.1.len()).sum();
    ensure(delivered == units as usize * unit, || {
        format!(
            "path {path:?}: {delivered} of {} bytes delivered",
            units as usize * unit
        )
    })?;
    for (m, a, b) in &pairs {
        ensure(a == b, || {
            format!("path {path:?}: material {m:?} differs between the ends")
        })?;
    }
    ensure(net.unpaired() == 0, || {
        format!("path {path:?}: material reached only one end")
    })?;
    for n in net.nodes() {
        ensure(n.pools().audit().reuses() == 0, || {
            format!("path {path:?}: link key reused at {}", n.node())
        })?;
    }
    Ok(pairs.len())
}

fn relay_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1a7);
    let mut relays = 0;
    let mut by_hops = [0usize; 6];
    // The five-site chain A..E end to end.
    let chain: Vec<NodeId> = (1..=5).map(site).collect();
    let mut g = TopologyGraph::new();
    for w in chain.windows(2) {
        g.add_link(w[0], w[1], 1000.0);
    }
    for k in 0..20 {
        let n = relay_once(&g, chain.clone(), 32, 3, k)?;
        relays += n;
        by_hops[4] += n;
    }
    let mut trials = 0;
    while relays < 1000 || trials < 300 {
        trials += 1;
        let hops = rng.gen_range(1..=5usize);
        let n = rng.gen_range((hops as u16 + 1).max(2)..=8);
        let mut ids: Vec<NodeId> = (1..=n).map(site).collect();
        ids.shuffle(&mut rng);
        let path: Vec<NodeId> = ids[..=hops].to_vec();
        let g = graph_with_path(&mut rng, n, &path, 0.3, (100.0, 5000.0));
        let unit = [16, 32, 64][rng.gen_range(0..3)];
        let units = rng.gen_range(1..=4);
        let got = relay_once(&g, path, unit, units, rng.next_u64())?;
        relays += got;
        by_hops[hops] += got;
    }
    within(start, Duration::from_secs(10), "relay checks")?;
    ensure(by_hops[1..].iter().all(|n| *n > 0), || {
        format!("hop counts not all covered: {by_hops:?}")
    })?;
    Ok(format!(
        "{relays} relays over {trials} random topologies, per hop count {:?}, all byte-identical",
        &by_hops[1..]
    ))
}

// ---- 2. one-time-pad no-reuse --------------------------------------------------

fn demo() -> Scenario {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/demo.json");
    Scenario::load(path.as_ref()).expect("demo scenario loads")
}

fn otp_no_reuse() -> Outcome {
    let mut checked = 0;
    let mut consumed = 0;
    for scale in [1.0, 4.0] {
        let mut sc = demo();
        sc.scale_capacity(scale);
        let mut sim = qkdnet_sim::sim::Simulation::new(&sc, &RunOptions::default())
            .map_err(|e| e.to_string())?;
        sim.advance_to(sc.duration_s).map_err(|e| e.to_string())?;
        for s in sc.site_ids() {
            let audit = sim.data_plane(s).pools().audit();
            ensure(audit.reuses() == 0, || {
                format!("{s}: {} link-key ranges used twice", audit.reuses())
            })?;
            consumed += audit.consumed_bytes();
        }
        let out = sim.finish().map_err(|e| e.to_string())?;
        ensure(
            out.summary.stream_reuses == 0 && out.summary.pool_overlaps == 0,
            || {
                format!(
                    "summary reports reuse: {:?}",
                    (out.summary.stream_reuses, out.summary.pool_overlaps)
                )
            },
        )?;
        checked += out.summary.invariant_checks;
    }
    ensure(consumed > 10_000, || {
        format!("only {consumed} link-key bytes consumed; audit saw too little")
    })?;
    Ok(format!("0 duplicate (stream, offset) uses over {consumed} consumed bytes, {checked} pool grants and material checks clean"))
}

// ---- 3. pool synchronisation ---------------------------------------------------

fn sync_stress(seed: u64) -> Result<(u64, u64, u64), String> {
    let (a, b) = (site(1), site(2));
    let cfg = PoolConfig {
        capacity_bytes: 16384,
        working_set_bytes: 2048,
        ..PoolConfig::default()
    };
    let key = bootstrap_key(seed, PoolId::for_pair(a, b));
    let mut p = SyncPair::new(
        PoolReplica::new(a, b, cfg.clone(), key.clone()),
        PoolReplica::new(b, a, cfg, key),
        seed,
    );
    p.drop_rate = 0.05;
    p.latency = 0.005;
    p.jitter = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut held: Vec<(bool, KeyReference)> = Vec::new();
    let mut next_session = 0u64;
    let mut material = 0u64;
    for _ in 0..10_000 {
        match rng.gen_range(0..10) {
            0 => {
                material += 1;
                let mut bytes = vec![0u8; rng.gen_range(32..512)];
                rng.fill_bytes(&mut bytes);
                p.leader.stage(MaterialId(material), bytes.clone());
                p.follower.stage(MaterialId(material), bytes);
            }
            1..=4 => {
                next_session += 1;
                let leader = rng.gen_bool(0.5);
                let len = rng.gen_range(1..64);
                if let Ok(al) = p.side(leader).allocate(len, SessionId(next_session)) {
                    held.push((leader, al.reference()));
                }
            }
            5..=7 if !held.is_empty() => {
                let (leader, r) = held.swap_remove(rng.gen_range(0..held.len()));
                let confirm = rng.gen_bool(0.7);
                let side = p.side(leader);
                if side.holds(&r) {
                    if confirm {
                        side.confirm(&r);
                    } else {
                        side.abort(&r);
                    }
                }
            }
            _ => {}
        }
        p.pump();
        let t = p.now() + rng.gen_range(0.0..0.01);
        p.run_until(t);
    }
    for (leader, r) in held.drain(..) {
        let side = p.side(leader);
        if side.holds(&r) {
            side.confirm(&r);
        }
    }
    ensure(p.settle(200), || {
        format!("seed {seed}: replicas did not converge")
    })?;
    ensure(
        p.leader.pool().digest() == p.follower.pool().digest(),
        || format!("seed {seed}: digests differ"),
    )?;
    ensure(p.dropped > 0, || {
        format!("seed {seed}: the channel dropped nothing")
    })?;
    ensure(p.leader.pool().generation() == 0, || {
        format!("seed {seed}: purge without corruption")
    })?;
    let events = p.leader.stats().events_applied + p.follower.stats().events_applied;

    // Corrupt one replica; the digest exchange must end in a purge on both.
    let lo = p.leader.pool().base_offset();
    let hi = p.leader.pool().end_offset();
    ensure(hi > lo, || format!("seed {seed}: pool empty before tamper"))?;
    let off = rng.gen_range(lo..hi);
    let victim_leader = rng.gen_bool(0.5);
    ensure(p.side(victim_leader).pool_mut().tamper_byte(off), || {
        "tamper failed".into()
    })?;
    p.purges.clear();
    ensure(p.settle(200), || {
        format!("seed {seed}: no convergence after tamper")
    })?;
    let g = (p.leader.pool().generation(), p.follower.pool().generation());
    ensure(g == (1, 1), || {
        format!("seed {seed}: generations after tamper {g:?}")
    })?;
    let purged: BTreeSet<bool> = p.purges.iter().map(|(l, _)| *l).collect();
    ensure(purged.len() == 2, || {
        format!("seed {seed}: purge seen on {:?} only", purged)
    })?;
    ensure(
        p.leader.pool().available_bytes() == 0 && p.follower.pool().available_bytes() == 0,
        || format!("seed {seed}: material survived the purge"),
    )?;
    Ok((events, p.dropped, p.voided))
}

fn pool_sync() -> Outcome {
    let mut total = (0, 0, 0);
    for seed in 1..=3 {
        let (e, d, v) = sync_stress(seed)?;
        total = (total.0 + e, total.1 + d, total.2 + v);
    }
    Ok(format!(
        "3 pairs x 10000 ops: {} events applied, {} frames dropped, {} races voided; digests equal, corruption purged both sides to generation 1",
        total.0, total.1, total.2
    ))
}

// ---- 4. negotiation races -------------------------------------------------------

fn race_config(mode: NegotiationMode) -> KmsConfig {
    KmsConfig {
        mode,
        pool: PoolConfig::with_capacity(1 << 16),
        policies: PolicyDb {
            rules: vec![SecurityPolicy {
                class: 3,
                ..SecurityPolicy::default()
            }],
        },
        blocked_timeout_s: 10.0,
        ..KmsConfig::default()
    }
}

fn race_script(mode: NegotiationMode) -> Result<(usize, u64, usize), String> {
    let mut p = KmsPair::new(race_config(mode), 11);
    // Barely more material than the first wave needs, so both ends reach for
    // the same tail.
    p.inject(1, 32 * 5 + 16);
    p.run_until(0.5);
    let params = RequestedParams {
        key_length_bytes: 32,
        ..RequestedParams::default()
    };
    let mut asked = 0;
    for _ in 0..6 {
        p.request(KmsPair::A, params, 1.0)
            .map_err(|e| e.to_string())?;
        p.request(KmsPair::B, params, 1.0)
            .map_err(|e| e.to_string())?;
        asked += 2;
    }
    p.run_until(2.0);
    p.inject(2, 4096);
    p.run_until(40.0);
    let grants = p.grants(GrantRole::Originator);
    let responders: BTreeMap<SessionId, Vec<u8>> = p
        .grants(GrantRole::Responder)
        .into_iter()
        .map(|g| (g.1, g.2))
        .collect();
    for g in &grants {
        ensure(responders.get(&g.1) == Some(&g.2), || {
            format!("{mode:?}: session {} keys differ", g.1)
        })?;
    }
    // No two granted sessions may hold overlapping pool bytes.
    let mut spans: Vec<(u32, u64, u64, SessionId)> = grants
        .iter()
        .filter(|g| g.3 == KeySource::Pool)
        .filter_map(|g| {
            g.4.map(|r| (r.generation, r.offset, r.offset + r.length, g.1))
        })
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        ensure(w[0].0 != w[1].0 || w[0].2 <= w[1].1, || {
            format!("{mode:?}: sessions {} and {} overlap", w[0].3, w[1].3)
        })?;
    }
    ensure(spans.len() == grants.len(), || {
        format!("{mode:?}: some grants lack pool references")
    })?;
    ensure(p.pools_match(), || {
        format!("{mode:?}: pool replicas diverged")
    })?;
    let conflicts =
        p.kms(KmsPair::A).stats().race_conflicts + p.kms(KmsPair::B).stats().race_conflicts;
    ensure(grants.len() == asked, || {
        format!("{mode:?}: {} of {asked} requests granted", grants.len())
    })?;
    Ok((grants.len(), conflicts, spans.len()))
}

fn races() -> Outcome {
    let (direct, direct_conflicts, _) = race_script(NegotiationMode::Direct)?;
    ensure(direct_conflicts > 0, || {
        "direct mode saw no race conflict".into()
    })?;
    let (token, token_conflicts, _) = race_script(NegotiationMode::Token)?;
    ensure(token_conflicts == 0, || {
        format!("token mode saw {token_conflicts} conflicts")
    })?;
    Ok(format!(
        "direct: {direct_conflicts} RaceConflict then all {direct} granted on retry; token: 0 conflicts, {token} granted; no overlapping bytes"
    ))
}

// ---- 5. flow optimisation against an exact LP -------------------------------------

fn simple_paths(g: &TopologyGraph, src: NodeId, dst: NodeId) -> Vec<Vec<NodeId>> {
    fn walk(
        g: &TopologyGraph,
        at: NodeId,
        dst: NodeId,
        path: &mut Vec<NodeId>,
        out: &mut Vec<Vec<NodeId>>,
    ) {
        if at == dst {
            out.push(path.clone());
            return;
        }
        for n in g.neighbors(at) {
            if !path.contains(&n) {
                path.push(n);
                walk(g, n, dst, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(g, src, dst, &mut vec![src], &mut out);
    out
}

/// Maximum concurrent flow by enumerating every simple path.
fn lp_lambda(g: &TopologyGraph, demands: &[CommodityDemand]) -> f64 {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let lambda = lp.add_var(1.0, (0.0, f64::INFINITY));
    let mut on_link: BTreeMap<LinkId, Vec<microlp::Variable>> = BTreeMap::new();
    for d in demands {
        let mut row = vec![(lambda, -d.rate_bps)];
        for p in simple_paths(g, d.commodity.src, d.commodity.dst) {
            let v = lp.add_var(0.0, (0.0, f64::INFINITY));
            row.push((v, 1.0));
            for w in p.windows(2) {
                on_link.entry(LinkId::new(w[0], w[1])).or_default().push(v);
            }
        }
        lp.add_constraint(row.as_slice(), ComparisonOp::Ge, 0.0);
    }
    for (l, vars) in on_link {
        let row: Vec<(microlp::Variable, f64)> = vars.into_iter().map(|v| (v, 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Le, g.links[&l]);
    }
    lp.solve().expect("LP solves").objective()
}

fn mcfp_quality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3cf9);
    let mut worst = f64::INFINITY;
    let mut graphs = 0;
    while graphs < 24 {
        let n = rng.gen_range(3..=8u16);
        let hops = rng.gen_range(1..n as usize);
        let mut ids: Vec<NodeId> = (1..=n).map(site).collect();
        ids.shuffle(&mut rng);
        let g = graph_with_path(&mut rng, n, &ids[..=hops], 0.35, (500.0, 8000.0));
        let k = rng.gen_range(1..=5);
        let mut seen = BTreeSet::new();
        let mut demands = Vec::new();
        while demands.len() < k {
            let (a, b) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
            if a != b && seen.insert((a, b)) {
                demands.push(CommodityDemand::new(
                    site(a),
                    site(b),
                    rng.gen_range(100.0..4000.0),
                ));
            }
        }
        let got = solve_mcfp(&g, &demands, &McfpConfig::default()).map_err(|e| e.to_string())?;
        got.check(&g)
            .map_err(|e| format!("graph {graphs}: infeasible assignment: {e}"))?;
        let best = lp_lambda(&g, &demands);
        let ratio = got.lambda / best;
        ensure(ratio >= 0.95, || {
            format!("graph {graphs}: lambda {} vs optimum {best}", got.lambda)
        })?;
        ensure(ratio <= 1.0 + 1e-6, || {
            format!("graph {graphs}: lambda {} above optimum {best}", got.lambda)
        })?;
        worst = worst.min(ratio);
        graphs += 1;
    }

    // Single link: lambda is exactly capacity over demand.
    let mut g = TopologyGraph::new();
    g.add_link(site(1), site(2), 3000.0);
    let one = solve_mcfp(
        &g,
        &[CommodityDemand::new(site(1), site(2), 1200.0)],
        &McfpConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure((one.lambda - 2.5).abs() < 1e-9, || {
        format!("single link lambda {}", one.lambda)
    })?;
    // Disjoint commodities: the bottleneck ratio, exactly.
    let mut g = TopologyGraph::new();
    g.add_link(site(1), site(2), 3000.0);
    g.add_link(site(3), site(4), 1000.0);
    let d = [
        CommodityDemand::new(site(1), site(2), 1000.0),
        CommodityDemand::new(site(4), site(3), 800.0),
    ];
    let two = solve_mcfp(&g, &d, &McfpConfig::default()).map_err(|e| e.to_string())?;
    ensure((two.lambda - 1.25).abs() < 1e-9, || {
        format!("disjoint lambda {}", two.lambda)
    })?;
    within(start, Duration::from_secs(30), "flow optimisation checks")?;
    Ok(format!(
        "{graphs} random graphs, worst lambda/optimum {worst:.6}; single-link 2.5 and disjoint 1.25 exact"
    ))
}

// ---- 6. DWRR fairness -----------------------------------------------------------

/// Textbook deficit round robin over always-backlogged flows: each round
/// every flow gains `quantum * w / w_max` and sends whole-byte chunks of at
/// most one quantum while its deficit allows.
fn reference_dwrr(weights: &[f64], quantum: u64, steps: usize) -> Vec<(usize, u64)> {
    let w_max = weights.iter().copied().fold(0.0, f64::max);
    let mut deficit = vec![0.0f64; weights.len()];
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        for (i, w) in weights.iter().enumerate() {
            deficit[i] += quantum as f64 * w / w_max;
            while deficit[i] >= 8.0 && out.len() < steps {
                let amount = (((deficit[i] / 8.0).floor() as u64) * 8).min(quantum);
                deficit[i] -= amount as f64;
                out.push((i, amount));
            }
        }
    }
    out
}

fn dwrr_case(weights: &[f64]) -> Result<String, String> {
    let q = DEFAULT_QUANTUM_BITS;
    let link = LinkId::new(site(1), site(2));
    let keys: Vec<FlowKey> = (0..weights.len())
        .map(|i| {
            let dst = site(10 + i as u16);
            FlowKey::new(Commodity::new(site(1), dst), vec![site(1), site(2), dst])
        })
        .collect();
    let mut s = DwrrScheduler::new(link, q);
    s.set_weights(
        &keys
            .iter()
            .cloned()
            .zip(weights.iter().copied())
            .collect::<Vec<_>>(),
    );
    for k in &keys {
        s.add_backlog(k, 1 << 40);
    }
    let mut trace = Vec::new();
    let mut served = vec![0u64; weights.len()];
    let mut total = 0u64;
    while total < 2_000_000 {
        let t = s.next_ticket().map_err(|e| e.to_string())?;
        let i = keys.iter().position(|k| *k == t.flow).expect("known flow");
        ensure(
            t.link == link && t.amount_bits % 8 == 0 && t.amount_bits <= q,
            || format!("bad ticket {t:?}"),
        )?;
        served[i] += t.amount_bits;
        total += t.amount_bits;
        trace.push((i, t.amount_bits));
        // Shares hold at every point along the way, not only at the end.
        let w_sum: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            let share = total as f64 * w / w_sum;
            ensure((served[j] as f64 - share).abs() <= 8192.0, || {
                format!("weights {weights:?}: flow {j} served {} vs share {share:.0} after {total} bits", served[j])
            })?;
        }
    }
    let reference = reference_dwrr(weights, q, trace.len());
    if let Some(k) = trace.iter().zip(&reference).position(|(a, b)| a != b) {
        return Err(format!(
            "weights {weights:?}: step {k} is {:?}, reference {:?}",
            trace[k], reference[k]
        ));
    }
    let mut empty = DwrrScheduler::new(link, q);
    empty.set_weights(&[(keys[0].clone(), 1.0)]);
    ensure(
        empty.next_ticket() == Err(ScheduleError::NoActiveCommodities),
        || "idle scheduler issued work".into(),
    )?;
    Ok(format!(
        "{weights:?} over {total} bits matches reference for {} steps",
        trace.len()
    ))
}

fn dwrr() -> Outcome {
    let a = dwrr_case(&[2.0, 1.0])?;
    let b = dwrr_case(&[5.0, 3.0, 1.0])?;
    Ok(format!(
        "{a}; {b}; every prefix within 8192 bits of its share"
    ))
}

// ---- 7. class accounting ---------------------------------------------------------

fn class_config(class: u8, refresh: Option<f64>) -> KmsConfig {
    KmsConfig {
        pool: PoolConfig::with_capacity(1 << 16),
        policies: PolicyDb {
            rules: vec![SecurityPolicy {
                class,
                min_key_length_bytes: if class == 5 { 1 } else { 32 },
                max_lifetime_s: 3600.0,
                refresh_interval_s: refresh,
                ..SecurityPolicy::default()
            }],
        },
        blocked_timeout_s: 5.0,
        bootstrap_secret: 99,
        ..KmsConfig::default()
    }
}

/// SHA-256 of a domain label, the seed length and the seed, used as an
/// AES-256-CTR key over zeros with a zero counter block.
fn expansion_oracle(seed: &[u8], len: usize) -> Vec<u8> {
    use aes::cipher::{KeyIvInit, StreamCipher};
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(b"qkdnet-expand-v1");
    h.update((seed.len() as u64).to_be_bytes());
    h.update(seed);
    let key: [u8; 32] = h.finalize().into();
    let mut out = vec![0u8; len];
    ctr::Ctr128BE::<aes::Aes256>::new(&key.into(), &[0u8; 16].into()).apply_keystream(&mut out);
    out
}

fn class_accounting() -> Outcome {
    let a = KmsPair::A;
    // Class 5: pool bytes equal the payload, for several payload sizes.
    let mut otp_total = 0;
    for (i, payload) in [1u64, 77, 200, 1000].into_iter().enumerate() {
        let mut p = KmsPair::new(class_config(5, None), i as u64);
        p.inject(1, 4096);
        p.run_until(0.5);
        let params = RequestedParams {
            key_length_bytes: 32,
            lifetime_s: None,
            payload_bytes: Some(payload),
        };
        p.request(a, params, 20.0).map_err(|e| e.to_string())?;
        p.run_until(30.0);
        let used = p.kms(a).stats().pool_bytes_by_class[5];
        ensure(used == payload, || {
            format!("class 5 payload {payload} used {used} pool bytes")
        })?;
        let g = p.grants(GrantRole::Originator);
        ensure(g.len() == 1 && g[0].2.len() as u64 == payload, || {
            format!("class 5 grant shape {:?}", g.len())
        })?;
        otp_total += used;
    }

    // Class 4: ceil(T/L) - 1 refreshes.
    let mut refresh_cases = Vec::new();
    for (t, l) in [
        (35.0_f64, 10.0),
        (30.0, 10.0),
        (10.0, 10.0),
        (5.0, 10.0),
        (41.0, 8.0),
        (60.0, 7.5),
    ] {
        let expected = (t / l).ceil() as u64 - 1;
        let mut p = KmsPair::new(class_config(4, Some(l)), 4);
        p.inject(1, 8192);
        p.run_until(0.5);
        let params = RequestedParams {
            key_length_bytes: 32,
            ..RequestedParams::default()
        };
        p.request(a, params, t).map_err(|e| e.to_string())?;
        p.run_until(t + 30.0);
        let got = p.kms(a).stats().key_refreshes;
        ensure(got == expected, || {
            format!("class 4 T={t} L={l}: {got} refreshes, expected {expected}")
        })?;
        ensure(
            p.grants(GrantRole::Originator).len() as u64 == expected + 1,
            || "class 4 grant count".into(),
        )?;
        refresh_cases.push(format!("T={t}/L={l}:{got}"));
    }

    // Class 2: no material at all, key still issued by deterministic expansion.
    let mut keys = Vec::new();
    for _ in 0..2 {
        let mut p = KmsPair::new(class_config(2, None), 2);
        let params = RequestedParams {
            key_length_bytes: 48,
            ..RequestedParams::default()
        };
        let session = p.request(a, params, 1.0).map_err(|e| e.to_string())?;
        p.run_until(5.0);
        let g = p.grants(GrantRole::Originator);
        ensure(g.len() == 1 && g[0].3 == KeySource::Expanded, || {
            format!("class 2 grants {:?}", g.len())
        })?;
        let r = p.grants(GrantRole::Responder);
        ensure(r.len() == 1 && r[0].2 == g[0].2, || {
            "class 2 responder key differs".into()
        })?;
        ensure(
            p.kms(a)
                .replica(KmsPair::B)
                .expect("pool")
                .pool()
                .available_bytes()
                == 0,
            || "pool not empty".into(),
        )?;
        ensure(p.kms(a).stats().pool_bytes_by_class[2] == 0, || {
            "class 2 used pool bytes".into()
        })?;
        let isk = bootstrap_key(99, PoolId::for_pair(KmsPair::A, KmsPair::B));
        let mut seed = isk.bytes().to_vec();
        seed.extend_from_slice(b"expanded");
        seed.extend_from_slice(&g[0].1 .0.to_be_bytes());
        ensure(g[0].2 == expansion_oracle(&seed, 48), || {
            "class 2 key is not the expansion of (K_ab, session)".into()
        })?;
        keys.push((session, g[0].2.clone()));
    }
    ensure(keys[0] == keys[1], || {
        "class 2 expansion differs across identical runs".into()
    })?;

    // Class 0: never touches the pool.
    let mut p = KmsPair::new(class_config(0, None), 0);
    p.inject(1, 4096);
    p.run_until(0.5);
    let before = p
        .kms(a)
        .replica(KmsPair::B)
        .expect("pool")
        .pool()
        .available_bytes();
    for _ in 0..5 {
        let params = RequestedParams {
            key_length_bytes: 32,
            ..RequestedParams::default()
        };
        p.request(a, params, 1.0).map_err(|e| e.to_string())?;
    }
    p.run_until(5.0);
    let after = p
        .kms(a)
        .replica(KmsPair::B)
        .expect("pool")
        .pool()
        .available_bytes();
    let g = p.grants(GrantRole::Originator);
    ensure(
        g.len() == 5 && g.iter().all(|x| matches!(x.3, KeySource::Classical { .. })),
        || "class 0 grants".into(),
    )?;
    ensure(
        before == after && p.kms(a).stats().pool_bytes_by_class[0] == 0,
        || "class 0 used pool bytes".into(),
    )?;

    Ok(format!(
        "class 5 pool bytes = payload ({otp_total} total); class 4 refreshes {}; class 2 expanded with empty pool, deterministic; class 0 used 0 pool bytes",
        refresh_cases.join(" ")
    ))
}

// ---- 8. end to end -----------------------------------------------------------------

fn end_to_end() -> Outcome {
    let base = demo();
    ensure(base.sites.len() == 5 && base.hosts.len() == 100, || {
        "demo is not 5 sites / 100 hosts".into()
    })?;
    let rate: f64 = base
        .workloads
        .iter()
        .map(|w| match w.arrival {
            qkdnet_sim::scenario::Arrival::Poisson { rate_per_s } => rate_per_s,
            _ => 0.0,
        })
        .sum();
    ensure(
        (rate - 10.0).abs() < 1e-9 && base.duration_s == 60.0,
        || format!("demo rate {rate}/s"),
    )?;
    let start = Instant::now();
    let first = run(&base, &RunOptions::default()).map_err(|e| e.to_string())?;
    let again = run(&base, &RunOptions::default()).map_err(|e| e.to_string())?;
    let (csv_a, csv_b) = (to_csv_string(&first.rows), to_csv_string(&again.rows));
    ensure(csv_a == csv_b, || {
        "metrics.csv differs between identical runs".into()
    })?;
    ensure(first.summary == again.summary, || {
        "summary differs between identical runs".into()
    })?;
    let other = run(
        &base,
        &RunOptions {
            seed: Some(base.seed + 1),
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(to_csv_string(&other.rows) != csv_a, || {
        "a different seed gave identical metrics".into()
    })?;

    let mut levels = vec![(1.0, first.summary)];
    for scale in [2.0, 4.0, 8.0] {
        let mut sc = base.clone();
        sc.scale_capacity(scale);
        levels.push((
            scale,
            run(&sc, &RunOptions::default())
                .map_err(|e| e.to_string())?
                .summary,
        ));
    }
    for w in levels.windows(2) {
        let (a, b) = (&w[0].1, &w[1].1);
        ensure(b.satisfied_ratio >= a.satisfied_ratio, || {
            format!(
                "satisfied ratio fell from {} to {} at x{}",
                a.satisfied_ratio, b.satisfied_ratio, w[1].0
            )
        })?;
        ensure(
            b.lambda_final >= a.lambda_final && b.lambda_mean >= a.lambda_mean,
            || {
                format!(
                    "lambda fell at x{}: {} -> {}",
                    w[1].0, a.lambda_final, b.lambda_final
                )
            },
        )?;
    }
    let per_run = start.elapsed() / 6;
    ensure(per_run <= Duration::from_secs(60), || {
        format!("a 60 s run took {per_run:?}")
    })?;
    let ratios: Vec<String> = levels
        .iter()
        .map(|(s, x)| format!("x{s}:{:.3}/{:.2}", x.satisfied_ratio, x.lambda_final))
        .collect();
    Ok(format!(
        "reruns bit-identical ({} rows); satisfied/lambda {}; {:?} per run",
        first.rows.len(),
        ratios.join(" "),
        per_run
    ))
}

// ---- 9. packet integrity ---------------------------------------------------------

fn packet_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ac);
    let mut flips = 0;
    let mut rejected = 0;
    while flips < 10_000 {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        let key = InterSiteKey::new(rng.gen_range(0..4), k);
        let info = KeySelectionInfo {
            reference: KeyReference {
                pool_id: PoolId::for_pair(site(1), site(2)),
                generation: rng.gen_range(0..3),
                offset: rng.gen_range(0..1 << 20),
                length: rng.gen_range(1..512),
                session_id: SessionId(rng.next_u64()),
            },
            issued_at: rng.gen_range(0.0..1e4),
            source: KeySource::Pool,
        };
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let sealed = key.seal(&info, nonce);
        if key.open(&sealed).map_err(|e| e.to_string())? != info {
            return Err("clean packet did not round-trip".into());
        }
        let bytes = sealed.to_bytes();
        for _ in 0..500 {
            let bit = rng.gen_range(0..bytes.len() * 8);
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            let verdict = SealedSelectionPacket::from_bytes(&bad).and_then(|p| key.open(&p));
            if verdict == Err(KmsError::MacInvalid) {
                rejected += 1;
            }
        }
    }
    ensure(rejected == flips, || {
        format!("{rejected} of {flips} flipped packets rejected")
    })?;

    // Through the service: a bit flipped in flight is refused as MAC_INVALID
    // and the originator's retry under a fresh session still succeeds.
    let mut p = KmsPair::new(race_config(NegotiationMode::KmsToKms), 5);
    p.inject(1, 16384);
    p.run_until(0.5);
    let in_flight = 50;
    for i in 0..in_flight {
        let bit = rng.gen_range(0..2000usize);
        let mut armed = true;
        p.tamper = Some(Box::new(move |f: &mut Frame| {
            if let (true, Frame::KeyNeg(neg)) = (armed, f) {
                let mut bytes = neg.packet.to_bytes();
                let bit = bit % (bytes.len() * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
                if let Ok(pk) = SealedSelectionPacket::from_bytes(&bytes) {
                    neg.packet = pk;
                }
                armed = false;
            }
        }));
        let params = RequestedParams {
            key_length_bytes: 32,
            ..RequestedParams::default()
        };
        p.request(KmsPair::A, params, 1.0)
            .map_err(|e| e.to_string())?;
        let t = p.now() + 5.0;
        p.run_until(t);
        let seen = p.kms(KmsPair::B).stats().mac_invalid;
        ensure(seen == i + 1, || {
            format!("in-flight flip {i}: responder counted {seen} MAC failures")
        })?;
    }
    let granted = p.grants(GrantRole::Originator).len() as u64;
    ensure(granted == in_flight, || {
        format!("{granted} of {in_flight} tampered requests recovered")
    })?;
    Ok(format!(
        "{rejected}/{flips} single-bit flips rejected with MacInvalid; {in_flight} in-flight flips refused by the peer KMS and retried"
    ))
}

// ---- driver ------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [Criterion; 9] = [
        ("relay", relay_correctness),
        ("otp-no-reuse", otp_no_reuse),
        ("pool-sync", pool_sync),
        ("races", races),
        ("mcfp", mcfp_quality),
        ("dwrr", dwrr),
        ("class-accounting", class_accounting),
        ("end-to-end", end_to_end),
        ("packet-integrity", packet_integrity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({took:.2?}) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({took:.2?}) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
