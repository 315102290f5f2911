//! The simulation driver: wires KMS, QNL control and data planes and the
//! simulated link layer together over a virtual clock.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use qkdnet::ids::{HostId, LinkId, PoolId, SessionId, SiteId};
use qkdnet::keypool::PoolConfig;
use qkdnet::kms::{
    Frame, GrantRole, KeyRequest, KeySource, Kms, KmsConfig, KmsEvent, KmsOutput, KmsTimer,
    MaterialId, PolicyDb, RequestedParams,
};
use qkdnet::qnl::control::{ControlMsg, ControlOutput, QnlControl};
use qkdnet::qnl::dataplane::{DataMsg, DataOutput, DataPlane, DataPlaneConfig};
use qkdnet::qnl::hello::LinkChange;
use qkdnet::qnl::mcfp::McfpConfig;

use crate::event::EventQueue;
use crate::metrics::{MetricsRow, SiteSummary, Summary, METRICS_SCHEMA_VERSION};
use crate::qll::{QllError, QuantumLink};
use crate::scenario::{Arrival, Scenario, ScenarioError};
use crate::transport::{ChannelClass, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invariant violated at t={time:.6}: {message}")]
    InvariantViolation { time: f64, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub record_events: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub events: Vec<String>,
}

#[derive(Debug, Clone)]
enum Ev {
    Tick,
    Hello,
    Demand,
    Sample,
    Arrival(usize),
    LinkFail(usize),
    LinkRestore(usize),
    Ctrl {
        to: SiteId,
        from: SiteId,
        msg: ControlMsg,
    },
    Data {
        to: SiteId,
        from: SiteId,
        msg: DataMsg,
    },
    Frame {
        to: SiteId,
        from: SiteId,
        frame: Frame,
    },
    Timer {
        site: SiteId,
        timer: KmsTimer,
    },
}

struct SiteNode {
    kms: Kms,
    control: QnlControl,
    data: DataPlane,
    requested: BTreeMap<SiteId, f64>,
}

struct Workload {
    hosts: Vec<HostId>,
    rng: ChaCha8Rng,
}

/// Network-wide counters reset at every sample.
#[derive(Default)]
struct Interval {
    requests: u64,
    grants: u64,
    refresh_grants: u64,
    conflicts: u64,
    fallbacks: u64,
    blocked: u64,
    failed: u64,
    material_bytes: u64,
    latencies: Vec<f64>,
}

/// Originator and responder copies of one session key.
type KeyCopies = (Option<Vec<u8>>, Option<Vec<u8>>);

/// Cross-module assertions evaluated while the run progresses.
#[derive(Default)]
struct Checker {
    enabled: bool,
    checks: u64,
    /// Originator pool grants per (pool, generation).
    granted: BTreeMap<(PoolId, u32), Vec<(u64, u64)>>,
    overlaps: u64,
    /// First copy of relayed material, until the other end reports it.
    material: BTreeMap<(SiteId, SiteId, MaterialId), Vec<u8>>,
    /// Both sides' copies of a session key, compared at the end.
    keys: BTreeMap<SessionId, KeyCopies>,
    revoked: BTreeSet<SessionId>,
    violation: Option<String>,
}

impl Checker {
    fn fail(&mut self, msg: String) {
        if self.enabled && self.violation.is_none() {
            self.violation = Some(msg);
        }
    }

    fn pool_grant(&mut self, pool: PoolId, generation: u32, offset: u64, length: u64) {
        self.checks += 1;
        let v = self.granted.entry((pool, generation)).or_default();
        let overlap = v
            .iter()
            .any(|(o, l)| offset < o + l && *o < offset + length);
        v.push((offset, length));
        if overlap {
            self.overlaps += 1;
            let msg = format!(
                "pool {pool} generation {generation} bytes [{offset}, {}) granted twice",
                offset + length
            );
            self.fail(msg);
        }
    }

    fn material(&mut self, site: SiteId, peer: SiteId, id: MaterialId, bytes: &[u8]) {
        self.checks += 1;
        if let Some(other) = self.material.remove(&(peer, site, id)) {
            if other != bytes {
                self.fail(format!(
                    "relayed material {id:?} differs between {site} and {peer}"
                ));
            }
        } else {
            self.material.insert((site, peer, id), bytes.to_vec());
        }
    }

    fn session_key(&mut self, session: SessionId, role: GrantRole, key: &[u8]) {
        let e = self.keys.entry(session).or_default();
        match role {
            GrantRole::Originator => e.0 = Some(key.to_vec()),
            GrantRole::Responder => e.1 = Some(key.to_vec()),
        }
    }

    fn finish_keys(&mut self) {
        let mut bad = None;
        for (s, (a, b)) in &self.keys {
            if let (Some(a), Some(b)) = (a, b) {
                self.checks += 1;
                if a != b && !self.revoked.contains(s) {
                    bad = Some(format!(
                        "session {s} keys differ between originator and responder"
                    ));
                }
            }
        }
        if let Some(m) = bad {
            self.fail(m);
        }
    }
}

pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    duration: f64,
    q: EventQueue<Ev>,
    transport: Transport,
    links: Vec<QuantumLink>,
    nodes: BTreeMap<SiteId, SiteNode>,
    host_site: BTreeMap<HostId, SiteId>,
    workloads: Vec<Workload>,
    /// Root session -> satisfied.
    roots: BTreeMap<SessionId, bool>,
    requests: u64,
    relay_sent: BTreeMap<u64, f64>,
    relay_latency_sum: f64,
    relays_delivered: u64,
    interval: Interval,
    sites: BTreeMap<SiteId, SiteSummary>,
    rows: Vec<MetricsRow>,
    lambdas: Vec<f64>,
    assigned_seen: BTreeMap<LinkId, u64>,
    checker: Checker,
    events: Option<Vec<String>>,
    processed: u64,
}

impl Simulation {
    pub fn new(scenario: &Scenario, options: &RunOptions) -> Result<Self, RunError> {
        let problems = scenario.validate();
        if !problems.is_empty() {
            return Err(ScenarioError::Invalid(problems).into());
        }
        let seed = options.seed.unwrap_or(scenario.seed);
        let duration = options.duration_s.unwrap_or(scenario.duration_s);
        let mut transport = Transport::new(seed);
        for c in &scenario.conventional_channels {
            transport.add(ChannelClass::Conventional, *c);
        }
        for c in &scenario.data_channels {
            transport.add(ChannelClass::DataPlane, *c);
        }
        let links: Vec<QuantumLink> = scenario
            .quantum_links
            .iter()
            .map(|l| QuantumLink::new(l.clone(), seed))
            .collect();
        let sites = scenario.site_ids();
        let kms_config = KmsConfig {
            mode: scenario.negotiation_mode,
            negotiation_timeout_s: scenario.kms.negotiation_timeout_s,
            max_attempts: scenario.kms.max_attempts,
            blocked_timeout_s: scenario.kms.blocked_timeout_s,
            token_ttl_s: scenario.kms.token_ttl_s,
            intersite_refresh_s: scenario.kms.intersite_refresh_s,
            pool: PoolConfig::with_capacity(scenario.kms.pool_capacity_bytes),
            policies: PolicyDb {
                rules: scenario.policies.clone(),
            },
            bootstrap_secret: scenario.kms.bootstrap_secret,
            demand_prior_bps: scenario.kms.demand_prior_bps,
        };
        let mcfp = McfpConfig {
            epsilon: scenario.qnl.epsilon,
            objective: scenario.qnl.objective,
            polish: true,
        };
        let data_config = DataPlaneConfig {
            relay_unit_bytes: scenario.qnl.relay_unit_bytes,
            quantum_bits: scenario.qnl.quantum_bits,
            fifo_first: scenario.qnl.fifo_first,
            multipath_timeout_s: scenario.qnl.multipath_timeout_s,
            ..DataPlaneConfig::default()
        };
        let mut nodes = BTreeMap::new();
        for &s in &sites {
            let neighbors: Vec<(SiteId, f64)> = links
                .iter()
                .filter(|l| l.id().touches(s))
                .map(|l| (l.id().other(s), l.advertised_bps()))
                .collect();
            let mut kms = Kms::new(s, &sites, kms_config.clone(), seed);
            let mut data = DataPlane::new(s, data_config.clone());
            for (n, cap) in &neighbors {
                kms.set_direct_link(*n, true);
                data.add_link(*n, *cap);
            }
            nodes.insert(
                s,
                SiteNode {
                    kms,
                    control: QnlControl::new(s, &neighbors, mcfp),
                    data,
                    requested: BTreeMap::new(),
                },
            );
        }
        let all_hosts: Vec<HostId> = scenario.hosts.iter().map(|h| h.id).collect();
        let workloads = scenario
            .workloads
            .iter()
            .enumerate()
            .map(|(i, w)| Workload {
                hosts: if w.hosts.is_empty() {
                    all_hosts.clone()
                } else {
                    w.hosts.clone()
                },
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x776f726b ^ ((i as u64 + 1) << 40)),
            })
            .collect();
        let mut sim = Simulation {
            seed,
            duration,
            q: EventQueue::new(),
            transport,
            links,
            nodes,
            host_site: scenario.hosts.iter().map(|h| (h.id, h.site)).collect(),
            workloads,
            roots: BTreeMap::new(),
            requests: 0,
            relay_sent: BTreeMap::new(),
            relay_latency_sum: 0.0,
            relays_delivered: 0,
            interval: Interval::default(),
            sites: BTreeMap::new(),
            rows: Vec::new(),
            lambdas: Vec::new(),
            assigned_seen: BTreeMap::new(),
            checker: Checker {
                enabled: scenario.checks,
                ..Checker::default()
            },
            events: options.record_events.then(Vec::new),
            processed: 0,
            scenario: scenario.clone(),
        };
        sim.start()?;
        Ok(sim)
    }

    fn log(&mut self, now: f64, line: impl FnOnce() -> String) {
        if let Some(ev) = &mut self.events {
            let l = line();
            log::debug!("t={now:.6} {l}");
            ev.push(format!("{now:.6} {l}"));
        }
    }

    fn node(&mut self, s: SiteId) -> &mut SiteNode {
        self.nodes.get_mut(&s).expect("known site")
    }

    /// Read access to one site's components, for tests and tooling.
    pub fn kms(&self, site: SiteId) -> &Kms {
        &self.nodes[&site].kms
    }

    pub fn control(&self, site: SiteId) -> &QnlControl {
        &self.nodes[&site].control
    }

    pub fn data_plane(&self, site: SiteId) -> &DataPlane {
        &self.nodes[&site].data
    }

    pub fn now(&self) -> f64 {
        self.q.now()
    }

    /// Seeds the queue with the periodic and scripted events.
    fn start(&mut self) -> Result<(), RunError> {
        let sc = &self.scenario;
        let (tick, hello, sample) = (sc.tick_s, sc.qnl.hello_interval_s, sc.sample_interval_s);
        let mut arrivals = Vec::new();
        for (i, w) in sc.workloads.iter().enumerate() {
            match &w.arrival {
                Arrival::Schedule { times_s } => {
                    for t in times_s {
                        arrivals.push((*t, i));
                    }
                }
                Arrival::Poisson { rate_per_s } => {
                    let gap = Exp::new(*rate_per_s)
                        .expect("validated rate")
                        .sample(&mut self.workloads[i].rng);
                    arrivals.push((w.start_s + gap, i));
                }
            }
        }
        let mut failures = Vec::new();
        for (i, l) in sc.quantum_links.iter().enumerate() {
            for f in &l.failures {
                failures.push((f.at_s, Ev::LinkFail(i)));
                if let Some(r) = f.restore_at_s {
                    failures.push((r, Ev::LinkRestore(i)));
                }
            }
        }
        let statics = sc.static_demands.clone();
        for node in self.nodes.values_mut() {
            node.control.start(0.0);
            node.kms.start(0.0);
        }
        for d in statics {
            self.node(d.src).control.request_continuous(
                d.dst,
                d.rate_bps,
                d.max_hops,
                d.path_count,
            );
        }
        self.q.push(0.0, Ev::Demand);
        self.q.push(tick, Ev::Tick);
        self.q.push(hello, Ev::Hello);
        self.q.push(sample, Ev::Sample);
        for (t, i) in arrivals {
            self.q.push(t, Ev::Arrival(i));
        }
        for (t, e) in failures {
            self.q.push(t, e);
        }
        self.drain(0.0)
    }

    /// Processes every event due at or before `until` (capped at the run
    /// duration).
    pub fn advance_to(&mut self, until: f64) -> Result<(), RunError> {
        let until = until.min(self.duration);
        while let Some(t) = self.q.peek_time() {
            if t > until + 1e-9 {
                break;
            }
            let (now, ev) = self.q.pop().expect("peeked");
            self.processed += 1;
            self.handle(now, ev)?;
            self.drain(now)?;
            if let Some(m) = self.checker.violation.take() {
                return Err(RunError::InvariantViolation {
                    time: now,
                    message: m,
                });
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunOutput, RunError> {
        self.advance_to(self.duration)?;
        self.finish()
    }

    fn handle(&mut self, now: f64, ev: Ev) -> Result<(), RunError> {
        let sc = &self.scenario;
        match ev {
            Ev::Tick => {
                let dt = sc.tick_s;
                for i in 0..self.links.len() {
                    match self.links[i].tick(now - dt, dt) {
                        Ok(g) => {
                            let l = self.links[i].id();
                            for (me, peer) in [(l.a, l.b), (l.b, l.a)] {
                                self.node(me)
                                    .data
                                    .on_link_bytes(now, peer, g.offset, &g.bytes);
                            }
                        }
                        Err(QllError::LinkDown(_)) => {}
                    }
                }
                for n in self.nodes.values_mut() {
                    n.kms.tick(now);
                    n.data.tick(now, dt);
                    n.control.recompute();
                }
                self.q.push(now + dt, Ev::Tick);
            }
            Ev::Hello => {
                for n in self.nodes.values_mut() {
                    n.control.on_hello_timer(now);
                }
                self.q.push(now + sc.qnl.hello_interval_s, Ev::Hello);
            }
            Ev::Demand => {
                if sc.qnl.estimated_demands {
                    let headroom = sc.qnl.demand_headroom;
                    for n in self.nodes.values_mut() {
                        for e in n.kms.estimate_demand(now) {
                            let rate = e.rate_bps * headroom;
                            let last = n.requested.get(&e.remote_site).copied().unwrap_or(0.0);
                            let changed = if last == 0.0 {
                                rate > 0.0
                            } else {
                                (rate - last).abs() > 0.1 * last
                            };
                            if changed {
                                n.requested.insert(e.remote_site, rate);
                                n.control.request_continuous(e.remote_site, rate, None, 1);
                            }
                        }
                    }
                }
                self.q.push(now + sc.qnl.demand_interval_s, Ev::Demand);
            }
            Ev::Sample => {
                self.sample(now);
                self.q
                    .push(now + self.scenario.sample_interval_s, Ev::Sample);
            }
            Ev::Arrival(i) => self.arrival(now, i),
            Ev::LinkFail(i) => {
                let ind = self.links[i].fail_link();
                let l = self.links[i].id();
                self.log(now, || format!("qll {ind:?}"));
                for (me, peer) in [(l.a, l.b), (l.b, l.a)] {
                    let n = self.node(me);
                    n.control.set_link_capacity(peer, 0.0);
                    n.kms.set_direct_link(peer, false);
                }
            }
            Ev::LinkRestore(i) => {
                let ind = self.links[i].restore_link();
                let l = self.links[i].id();
                let cap = self.links[i].advertised_bps();
                self.log(now, || format!("qll {ind:?}"));
                for (me, peer) in [(l.a, l.b), (l.b, l.a)] {
                    let n = self.node(me);
                    n.control.set_link_capacity(peer, cap);
                    n.kms.set_direct_link(peer, true);
                }
            }
            Ev::Ctrl { to, from, msg } => self.node(to).control.on_message(now, from, msg),
            Ev::Data { to, from, msg } => {
                if let DataMsg::Relay(env) = &msg {
                    if env.hop + 1 == env.flow.path.len() {
                        if let Some(t0) = self.relay_sent.remove(&env.relay_id) {
                            self.relay_latency_sum += now - t0;
                            self.relays_delivered += 1;
                            self.interval.latencies.push(now - t0);
                        }
                    }
                }
                self.node(to).data.on_message(now, from, msg);
            }
            Ev::Frame { to, from, frame } => self.node(to).kms.on_frame(now, from, frame),
            Ev::Timer { site, timer } => self.node(site).kms.on_timer(now, timer),
        }
        Ok(())
    }

    fn arrival(&mut self, now: f64, i: usize) {
        let spec = self.scenario.workloads[i].clone();
        let w = &mut self.workloads[i];
        let src = w.hosts[w.rng.gen_range(0..w.hosts.len())];
        let src_site = self.host_site[&src];
        let candidates: Vec<HostId> = if spec.remote_hosts.is_empty() {
            self.host_site
                .iter()
                .filter(|(_, s)| **s != src_site)
                .map(|(h, _)| *h)
                .collect()
        } else {
            spec.remote_hosts
                .iter()
                .copied()
                .filter(|h| self.host_site[h] != src_site)
                .collect()
        };
        let pick = w.rng.gen_range(0..candidates.len().max(1));
        let payload = spec.payload_bytes.map(|[lo, hi]| w.rng.gen_range(lo..=hi));
        if let Arrival::Poisson { rate_per_s } = spec.arrival {
            let next = now
                + Exp::new(rate_per_s)
                    .expect("validated rate")
                    .sample(&mut w.rng);
            if spec.stop_s.is_none_or(|s| next < s) {
                self.q.push(next, Ev::Arrival(i));
            }
        }
        let Some(&dst) = candidates.get(pick) else {
            return;
        };
        let request = KeyRequest {
            src_host: src,
            dst_host: dst,
            remote_site: self.host_site[&dst],
            params: RequestedParams {
                key_length_bytes: payload.unwrap_or(spec.key_length_bytes),
                lifetime_s: spec.lifetime_s,
                payload_bytes: payload,
            },
            session_duration_s: spec.session_duration_s,
        };
        self.requests += 1;
        self.interval.requests += 1;
        self.sites.entry(src_site).or_default().requests += 1;
        match self.node(src_site).kms.request_key(now, request) {
            Ok(id) => {
                self.roots.insert(id, false);
                self.log(now, || format!("{src_site} request {id} {src}->{dst}"));
            }
            Err(e) => self.log(now, || {
                format!("{src_site} request {src}->{dst} rejected: {e}")
            }),
        }
    }

    /// Routes everything the nodes produced until they are quiet.
    fn drain(&mut self, now: f64) -> Result<(), RunError> {
        loop {
            let mut moved = false;
            let sites: Vec<SiteId> = self.nodes.keys().copied().collect();
            for s in sites {
                let ctrl = self.node(s).control.take_outputs();
                moved |= !ctrl.is_empty();
                for o in ctrl {
                    self.on_control_output(now, s, o)?;
                }
                let data = self.node(s).data.take_outputs();
                moved |= !data.is_empty();
                for o in data {
                    self.on_data_output(now, s, o)?;
                }
                let kms = self.node(s).kms.take_outputs();
                moved |= !kms.is_empty();
                for o in kms {
                    self.on_kms_output(now, s, o)?;
                }
            }
            if !moved {
                return Ok(());
            }
        }
    }

    fn send(
        &mut self,
        now: f64,
        class: ChannelClass,
        from: SiteId,
        to: SiteId,
        ev: Ev,
        extra: f64,
    ) -> Result<(), RunError> {
        if let Some(at) = self.transport.send(now, class, from, to)? {
            self.q.push(at + extra, ev);
        }
        Ok(())
    }

    fn on_control_output(&mut self, now: f64, s: SiteId, o: ControlOutput) -> Result<(), RunError> {
        match o {
            ControlOutput::Send { to, msg } => self.send(
                now,
                ChannelClass::Conventional,
                s,
                to,
                Ev::Ctrl { to, from: s, msg },
                0.0,
            )?,
            ControlOutput::Assignment(a) => {
                self.checker.checks += 1;
                if let Err(e) = a.check(self.nodes[&s].control.graph()) {
                    self.checker
                        .fail(format!("{s}: infeasible flow assignment: {e}"));
                }
                self.log(now, || {
                    format!(
                        "{s} assignment lambda={:.6} flows={}",
                        a.lambda,
                        a.path_flows.len()
                    )
                });
                self.node(s).data.set_assignment(&a);
            }
            ControlOutput::Link(change) => {
                self.log(now, || format!("{s} link {change:?}"));
                if let LinkChange::Down { neighbor } = change {
                    self.node(s).kms.set_direct_link(neighbor, false);
                }
            }
        }
        Ok(())
    }

    fn on_data_output(&mut self, now: f64, s: SiteId, o: DataOutput) -> Result<(), RunError> {
        match o {
            DataOutput::Send { to, msg } => {
                if let DataMsg::Relay(env) = &msg {
                    if env.hop == 2 {
                        self.relay_sent.insert(env.relay_id, now);
                    }
                }
                self.send(
                    now,
                    ChannelClass::DataPlane,
                    s,
                    to,
                    Ev::Data { to, from: s, msg },
                    0.0,
                )?;
            }
            DataOutput::Material {
                peer,
                material,
                bytes,
            } => {
                if self.checker.enabled {
                    self.checker.material(s, peer, material, &bytes);
                }
                self.interval.material_bytes += bytes.len() as u64;
                self.node(s).kms.stage_material(now, peer, material, bytes);
            }
        }
        Ok(())
    }

    fn on_kms_output(&mut self, now: f64, s: SiteId, o: KmsOutput) -> Result<(), RunError> {
        match o {
            KmsOutput::Send {
                to,
                frame,
                via_hosts,
            } => {
                let extra = if via_hosts {
                    2.0 * self.scenario.kms.host_delay_s
                } else {
                    0.0
                };
                self.send(
                    now,
                    ChannelClass::Conventional,
                    s,
                    to,
                    Ev::Frame { to, from: s, frame },
                    extra,
                )?;
            }
            KmsOutput::Timer { at, timer } => {
                self.q.push(at, Ev::Timer { site: s, timer });
            }
            KmsOutput::Event(e) => self.on_kms_event(now, s, e),
        }
        Ok(())
    }

    fn on_kms_event(&mut self, now: f64, s: SiteId, e: KmsEvent) {
        match e {
            KmsEvent::Granted {
                session,
                root,
                role,
                class,
                source,
                key,
                reference,
                refresh,
                ..
            } => {
                if self.checker.enabled {
                    self.checker.session_key(session, role, &key);
                }
                if role == GrantRole::Originator {
                    if refresh {
                        self.interval.refresh_grants += 1;
                    } else {
                        self.interval.grants += 1;
                        self.sites.entry(s).or_default().grants += 1;
                    }
                    if let Some(sat) = self.roots.get_mut(&root) {
                        *sat = true;
                    }
                    if let (KeySource::Pool, Some(r)) = (source, reference) {
                        self.checker
                            .pool_grant(r.pool_id, r.generation, r.offset, r.length);
                    }
                }
                self.log(now, || format!("{s} granted {session} root={root} class={class} role={role:?} refresh={refresh}"));
            }
            KmsEvent::Revoked { session } => {
                self.checker.revoked.insert(session);
                self.log(now, || format!("{s} revoked {session}"));
            }
            KmsEvent::RaceConflict { session } => {
                self.interval.conflicts += 1;
                self.sites.entry(s).or_default().race_conflicts += 1;
                self.log(now, || format!("{s} race conflict {session}"));
            }
            KmsEvent::Fallback { session, class } => {
                self.interval.fallbacks += 1;
                self.sites.entry(s).or_default().fallbacks += 1;
                self.log(now, || format!("{s} fallback {session} to class {class}"));
            }
            KmsEvent::Blocked {
                session,
                peer,
                bytes,
            } => {
                self.interval.blocked += 1;
                self.sites.entry(s).or_default().blocked += 1;
                self.log(now, || {
                    format!("{s} blocked {session} short {bytes} bytes with {peer}")
                });
                if self.scenario.kms.on_demand {
                    let n = self.node(s);
                    if let Ok(flow) = n.control.one_time_flow(peer) {
                        n.data.request_one_time(flow, bytes * 8);
                    }
                }
            }
            KmsEvent::Failed { session, reason } => {
                self.interval.failed += 1;
                self.log(now, || format!("{s} failed {session}: {reason}"));
            }
            KmsEvent::MacRejected { peer } => {
                self.log(now, || format!("{s} MAC rejected from {peer}"))
            }
        }
    }

    fn lambda(&self) -> f64 {
        self.nodes
            .values()
            .next()
            .map_or(0.0, |n| n.control.assignment().lambda)
    }

    fn sample(&mut self, now: f64) {
        let dt = self.scenario.sample_interval_s;
        let iv = std::mem::take(&mut self.interval);
        let mut utilization = Vec::with_capacity(self.links.len());
        for l in &self.links {
            let id = l.id();
            let total = self.nodes[&id.owner()]
                .data
                .stats()
                .assigned_by_peer
                .get(&id.other(id.owner()))
                .copied()
                .unwrap_or(0);
            let prev = self.assigned_seen.insert(id, total).unwrap_or(0);
            let max_bits = l.max_rate_bps() * dt;
            utilization.push(if max_bits > 0.0 {
                (total - prev) as f64 / max_bits
            } else {
                0.0
            });
        }
        let lambda = self.lambda();
        self.lambdas.push(lambda);
        // Every site floods the same demand matrix, so one copy suffices.
        let demand_bps = self.nodes.values().next().map_or(0.0, |n| {
            n.control
                .demand_matrix()
                .active()
                .map(|(_, e)| e.rate_bps)
                .sum()
        });
        let satisfied = self.roots.values().filter(|v| **v).count() as f64;
        self.rows.push(MetricsRow {
            time_s: now,
            requests: iv.requests,
            grants: iv.grants,
            refresh_grants: iv.refresh_grants,
            race_conflicts: iv.conflicts,
            fallbacks: iv.fallbacks,
            blocked: iv.blocked,
            failed: iv.failed,
            satisfied_ratio: if self.requests == 0 {
                1.0
            } else {
                satisfied / self.requests as f64
            },
            demand_bps,
            delivered_bps: iv.material_bytes as f64 * 8.0 / 2.0 / dt,
            pool_fill_bytes: self.pool_fill() / 2,
            link_utilization_mean: if utilization.is_empty() {
                0.0
            } else {
                utilization.iter().sum::<f64>() / utilization.len() as f64
            },
            link_utilization_max: utilization.iter().copied().fold(0.0, f64::max),
            lambda,
            relay_latency_ms: (!iv.latencies.is_empty())
                .then(|| iv.latencies.iter().sum::<f64>() / iv.latencies.len() as f64 * 1000.0),
        });
        for n in self.nodes.values() {
            self.checker.checks += 1;
            if n.data.pools().audit().reuses() > 0 {
                let m = format!("{}: link key consumed twice", n.data.node());
                self.checker.fail(m);
            }
        }
    }

    /// Available bytes over every replica at every site.
    fn pool_fill(&self) -> u64 {
        self.nodes
            .values()
            .flat_map(|n| n.kms.replicas())
            .map(|p| p.pool().available_bytes())
            .sum()
    }

    /// Runs the end-of-run checks and builds the output.
    pub fn finish(mut self) -> Result<RunOutput, RunError> {
        self.checker.finish_keys();
        if let Some(m) = self.checker.violation.take() {
            return Err(RunError::InvariantViolation {
                time: self.duration,
                message: m,
            });
        }
        let mut s = Summary {
            schema_version: METRICS_SCHEMA_VERSION,
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            duration_s: self.duration,
            events_processed: self.processed,
            requests: self.requests,
            satisfied: self.roots.values().filter(|v| **v).count() as u64,
            ..Summary::default()
        };
        s.satisfied_ratio = if s.requests == 0 {
            1.0
        } else {
            s.satisfied as f64 / s.requests as f64
        };
        for n in self.nodes.values() {
            let k = n.kms.stats();
            for c in 0..6 {
                s.grants_by_class[c] += k.grants_by_class[c];
                s.pool_bytes_by_class[c] += k.pool_bytes_by_class[c];
                s.fallbacks += k.fallbacks_by_class[c];
            }
            s.refresh_grants += k.key_refreshes;
            s.race_conflicts += k.race_conflicts;
            s.blocked += k.blocked;
            s.failed += k.failed;
            s.mac_invalid += k.mac_invalid;
            s.mcfp_solves += n.control.solves();
            s.key_material_bytes += n.data.stats().material_bytes.values().sum::<u64>();
            s.stream_reuses += n.data.pools().audit().reuses();
        }
        s.key_material_bytes /= 2;
        s.lambda_final = self.lambda();
        s.lambda_mean = if self.lambdas.is_empty() {
            s.lambda_final
        } else {
            self.lambdas.iter().sum::<f64>() / self.lambdas.len() as f64
        };
        s.relays_delivered = self.relays_delivered;
        s.mean_relay_latency_ms = if self.relays_delivered == 0 {
            0.0
        } else {
            self.relay_latency_sum / self.relays_delivered as f64 * 1000.0
        };
        for (id, n) in &self.nodes {
            let mut site = self.sites.remove(id).unwrap_or_default();
            site.pool_fill_bytes = n.kms.replicas().map(|p| p.pool().available_bytes()).sum();
            s.sites.insert(id.to_string(), site);
        }
        s.pool_overlaps = self.checker.overlaps;
        s.invariant_checks = self.checker.checks;
        (s.messages_sent, s.messages_dropped) = self.transport.stats();
        Ok(RunOutput {
            rows: self.rows,
            summary: s,
            events: self.events.unwrap_or_default(),
        })
    }
}

/// Runs `scenario` to completion.
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput, RunError> {
    Simulation::new(scenario, options)?.run()
}
