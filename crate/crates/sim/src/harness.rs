//! Small deterministic rigs that drive one subsystem in isolation: a
//! data-plane relay network, a pair of KMSs, and a pair of pool replicas
//! behind a lossy, reordering channel.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qkdnet::ids::{Commodity, FlowKey, HostId, NodeId, SessionId, SiteId};
use qkdnet::keypool::KeyReference;
use qkdnet::kms::sync::{PoolReplica, SyncNotice};
use qkdnet::kms::{
    Frame, GrantRole, KeyRequest, KeySource, Kms, KmsConfig, KmsError, KmsEvent, KmsOutput,
    KmsTimer, MaterialId, RequestedParams,
};
use qkdnet::qnl::dataplane::{DataMsg, DataOutput, DataPlane, DataPlaneConfig};
use qkdnet::qnl::topology::TopologyGraph;

use crate::event::EventQueue;

/// Data planes on every node of a graph, with instant in-order delivery and
/// random link key bytes shared by both ends of each link.
pub struct RelayNet {
    nodes: BTreeMap<NodeId, DataPlane>,
    links: Vec<(NodeId, NodeId, u64)>,
    rng: ChaCha8Rng,
    /// (receiver, peer, material, bytes) in delivery order.
    pub material: Vec<(NodeId, NodeId, MaterialId, Vec<u8>)>,
    /// When set, every message routed by `pump` is appended here.
    pub trace: Option<Vec<DataMsg>>,
}

impl RelayNet {
    pub fn new(graph: &TopologyGraph, relay_unit_bytes: usize, seed: u64) -> Self {
        let config = DataPlaneConfig {
            relay_unit_bytes,
            ..DataPlaneConfig::default()
        };
        let mut nodes: BTreeMap<NodeId, DataPlane> = graph
            .nodes
            .iter()
            .map(|n| (*n, DataPlane::new(*n, config.clone())))
            .collect();
        let mut links = Vec::new();
        for (l, cap) in &graph.links {
            nodes.get_mut(&l.a).expect("endpoint").add_link(l.b, *cap);
            nodes.get_mut(&l.b).expect("endpoint").add_link(l.a, *cap);
            links.push((l.a, l.b, 0));
        }
        RelayNet {
            nodes,
            links,
            rng: ChaCha8Rng::seed_from_u64(seed),
            material: Vec::new(),
            trace: None,
        }
    }

    pub fn node(&self, n: NodeId) -> &DataPlane {
        &self.nodes[&n]
    }

    pub fn node_mut(&mut self, n: NodeId) -> &mut DataPlane {
        self.nodes.get_mut(&n).expect("known node")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &DataPlane> {
        self.nodes.values()
    }

    /// Routes messages until every node is idle.
    pub fn pump(&mut self) {
        loop {
            let mut moved = false;
            let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
            for id in ids {
                for o in self.node_mut(id).take_outputs() {
                    moved = true;
                    match o {
                        DataOutput::Send { to, msg } => {
                            if let Some(t) = &mut self.trace {
                                t.push(msg.clone());
                            }
                            self.node_mut(to).on_message(0.0, id, msg)
                        }
                        DataOutput::Material {
                            peer,
                            material,
                            bytes,
                        } => self.material.push((id, peer, material, bytes)),
                    }
                }
            }
            if !moved {
                return;
            }
        }
    }

    /// Gives every link `bytes` fresh random key bytes, then advances all
    /// nodes by `dt`.
    pub fn feed(&mut self, bytes: usize, now: f64, dt: f64) {
        for i in 0..self.links.len() {
            let (a, b, off) = self.links[i];
            let mut data = vec![0u8; bytes];
            self.rng.fill_bytes(&mut data);
            self.node_mut(a).on_link_bytes(now, b, off, &data);
            self.node_mut(b).on_link_bytes(now, a, off, &data);
            self.links[i].2 += bytes as u64;
        }
        for n in self.nodes.values_mut() {
            n.tick(now, dt);
        }
        self.pump();
    }

    /// Asks `flow`'s source for a one-time batch of `bits`.
    pub fn request(&mut self, flow: FlowKey, bits: u64) {
        let src = flow.path[0];
        self.node_mut(src).request_one_time(flow, bits);
        self.pump();
    }

    /// Material delivered to both ends of `commodity`, paired by id:
    /// (source copy, destination copy).
    pub fn pairs(&self, commodity: Commodity) -> Vec<(MaterialId, Vec<u8>, Vec<u8>)> {
        let at = |me: NodeId, peer: NodeId| -> BTreeMap<MaterialId, &Vec<u8>> {
            self.material
                .iter()
                .filter(|(x, y, _, _)| *x == me && *y == peer)
                .map(|(_, _, m, b)| (*m, b))
                .collect()
        };
        let src = at(commodity.src, commodity.dst);
        let dst = at(commodity.dst, commodity.src);
        src.iter()
            .filter_map(|(m, a)| dst.get(m).map(|b| (*m, (*a).clone(), (*b).clone())))
            .collect()
    }

    /// Material ids that reached only one end of their pair.
    pub fn unpaired(&self) -> usize {
        self.material
            .iter()
            .filter(|(x, y, m, _)| {
                !self
                    .material
                    .iter()
                    .any(|(x2, y2, m2, _)| x2 == y && y2 == x && m2 == m)
            })
            .count()
    }
}

#[derive(Debug)]
enum PairItem {
    Frame(SiteId, Frame),
    Timer(KmsTimer),
}

pub type Tamper = Box<dyn FnMut(&mut Frame)>;

/// (site, session, key, source, reference) of one grant.
pub type GrantRecord = (SiteId, SessionId, Vec<u8>, KeySource, Option<KeyReference>);

/// Two KMSs joined by a lossless in-order channel. Frames routed through
/// hosts take `host_delay` instead of `kms_delay`.
pub struct KmsPair {
    pub kms: BTreeMap<SiteId, Kms>,
    pub events: Vec<(SiteId, f64, KmsEvent)>,
    pub kms_delay: f64,
    pub host_delay: f64,
    /// Applied to every frame as it is sent, e.g. to corrupt it in flight.
    pub tamper: Option<Tamper>,
    now: f64,
    queue: EventQueue<(SiteId, PairItem)>,
}

impl KmsPair {
    pub const A: SiteId = SiteId(1);
    pub const B: SiteId = SiteId(2);

    pub fn new(config: KmsConfig, seed: u64) -> Self {
        let mut kms = BTreeMap::new();
        for (site, peer) in [(Self::A, Self::B), (Self::B, Self::A)] {
            let mut k = Kms::new(site, &[Self::A, Self::B], config.clone(), seed);
            k.set_direct_link(peer, true);
            kms.insert(site, k);
        }
        KmsPair {
            kms,
            events: Vec::new(),
            kms_delay: 0.01,
            host_delay: 0.02,
            tamper: None,
            now: 0.0,
            queue: EventQueue::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn kms(&self, site: SiteId) -> &Kms {
        &self.kms[&site]
    }

    fn peer(site: SiteId) -> SiteId {
        if site == Self::A {
            Self::B
        } else {
            Self::A
        }
    }

    fn collect(&mut self, site: SiteId) {
        let outs = self.kms.get_mut(&site).expect("site").take_outputs();
        for out in outs {
            match out {
                KmsOutput::Send {
                    to,
                    mut frame,
                    via_hosts,
                } => {
                    if let Some(t) = &mut self.tamper {
                        t(&mut frame);
                    }
                    let d = if via_hosts {
                        self.host_delay
                    } else {
                        self.kms_delay
                    };
                    self.queue
                        .push(self.now + d, (to, PairItem::Frame(site, frame)));
                }
                KmsOutput::Timer { at, timer } => {
                    self.queue.push(at, (site, PairItem::Timer(timer)));
                }
                KmsOutput::Event(e) => self.events.push((site, self.now, e)),
            }
        }
    }

    /// Stages the same random material at both ends.
    pub fn inject(&mut self, material: u64, len: usize) {
        let mut bytes = vec![0u8; len];
        ChaCha8Rng::seed_from_u64(material).fill_bytes(&mut bytes);
        for site in [Self::A, Self::B] {
            let now = self.now;
            self.kms.get_mut(&site).expect("site").stage_material(
                now,
                Self::peer(site),
                MaterialId(material),
                bytes.clone(),
            );
            self.collect(site);
        }
    }

    /// A key request from host `10·site` to host `10·peer`.
    pub fn request(
        &mut self,
        site: SiteId,
        params: RequestedParams,
        duration_s: f64,
    ) -> Result<SessionId, KmsError> {
        let now = self.now;
        let remote = Self::peer(site);
        let r = self.kms.get_mut(&site).expect("site").request_key(
            now,
            KeyRequest {
                src_host: HostId(u32::from(site.0) * 10),
                dst_host: HostId(u32::from(remote.0) * 10),
                remote_site: remote,
                params,
                session_duration_s: duration_s,
            },
        );
        self.collect(site);
        r
    }

    pub fn run_until(&mut self, until: f64) {
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            let (at, (site, item)) = self.queue.pop().expect("peeked");
            self.now = at;
            let k = self.kms.get_mut(&site).expect("site");
            match item {
                PairItem::Frame(from, frame) => k.on_frame(at, from, frame),
                PairItem::Timer(t) => k.on_timer(at, t),
            }
            k.tick(at);
            self.collect(site);
        }
        self.now = until;
    }

    /// (site, session, key, source, reference) for every grant in `role`.
    pub fn grants(&self, role: GrantRole) -> Vec<GrantRecord> {
        self.events
            .iter()
            .filter_map(|(site, _, e)| match e {
                KmsEvent::Granted {
                    session,
                    role: r,
                    key,
                    source,
                    reference,
                    ..
                } if *r == role => Some((*site, *session, key.clone(), *source, *reference)),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, f: impl Fn(&KmsEvent) -> bool) -> usize {
        self.events.iter().filter(|(_, _, e)| f(e)).count()
    }

    pub fn pools_match(&self) -> bool {
        let a = self.kms[&Self::A]
            .replica(Self::B)
            .expect("pool")
            .pool()
            .digest();
        let b = self.kms[&Self::B]
            .replica(Self::A)
            .expect("pool")
            .pool()
            .digest();
        a == b
    }
}

/// Two pool replicas behind a channel that delays each frame by a random
/// jitter (so frames reorder) and drops a fraction of them.
pub struct SyncPair {
    pub leader: PoolReplica,
    pub follower: PoolReplica,
    pub drop_rate: f64,
    pub latency: f64,
    pub jitter: f64,
    pub sent: u64,
    pub dropped: u64,
    pub voided: u64,
    /// (on leader, new generation) for every purge seen.
    pub purges: Vec<(bool, u32)>,
    now: f64,
    queue: EventQueue<(bool, Frame)>,
    rng: ChaCha8Rng,
}

impl SyncPair {
    pub fn new(leader: PoolReplica, follower: PoolReplica, seed: u64) -> Self {
        SyncPair {
            leader,
            follower,
            drop_rate: 0.0,
            latency: 0.005,
            jitter: 0.0,
            sent: 0,
            dropped: 0,
            voided: 0,
            purges: Vec::new(),
            now: 0.0,
            queue: EventQueue::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn side(&mut self, leader: bool) -> &mut PoolReplica {
        if leader {
            &mut self.leader
        } else {
            &mut self.follower
        }
    }

    /// Moves both outboxes onto the channel.
    pub fn pump(&mut self) {
        for from_leader in [true, false] {
            let frames = self.side(from_leader).take_outbox();
            for f in frames {
                self.sent += 1;
                let lost = self.rng.gen_bool(self.drop_rate);
                let delay = self.latency + self.rng.gen_range(0.0..=self.jitter);
                if lost {
                    self.dropped += 1;
                } else {
                    self.queue.push(self.now + delay, (!from_leader, f));
                }
            }
        }
    }

    /// Delivers every frame due by `until`, ticking both replicas on the way.
    pub fn run_until(&mut self, until: f64) {
        self.pump();
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            let (at, (to_leader, frame)) = self.queue.pop().expect("peeked");
            self.now = at;
            self.side(to_leader).on_frame(frame);
            self.leader.tick(at);
            self.follower.tick(at);
            self.count_notices();
            self.pump();
        }
        self.now = until;
        self.leader.tick(until);
        self.follower.tick(until);
        self.count_notices();
        self.pump();
    }

    fn count_notices(&mut self) {
        for leader in [true, false] {
            for n in self.side(leader).take_notices() {
                match n {
                    SyncNotice::Voided(_) => self.voided += 1,
                    SyncNotice::Purged { generation } => self.purges.push((leader, generation)),
                    _ => {}
                }
            }
        }
    }

    /// Turns loss off and exchanges digests until both replicas are
    /// quiescent and agree, or `rounds` digest rounds pass.
    pub fn settle(&mut self, rounds: usize) -> bool {
        let saved = (self.drop_rate, self.jitter);
        self.drop_rate = 0.0;
        self.jitter = 0.0;
        let mut ok = false;
        for _ in 0..rounds {
            self.leader.send_digest();
            self.follower.send_digest();
            let t = self.now + 1.0;
            self.run_until(t);
            if self.leader.quiescent()
                && self.follower.quiescent()
                && self.leader.pool().digest() == self.follower.pool().digest()
            {
                ok = true;
                break;
            }
        }
        (self.drop_rate, self.jitter) = saved;
        ok
    }
}
