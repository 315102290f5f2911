//! Per-node QNL data plane: turns link key into end-to-end key material.
//!
//! The lower-id end of each link owns its scheduler. A ticket assigns the
//! next bytes of the link stream to a flow and the owner tells the other
//! end with an `Assign`. For each hop the upstream node picks the pad; on
//! the first hop the node after the source picks the relayed key itself and
//! tells the source which bytes it chose.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mcfp::FlowAssignment;
use super::relay::{
    category_at, combine_multipath, relay_forward, relay_originate, relay_receive, Category,
    PairwiseKeyStream, RelayEnvelope, RelayError, StreamRange, TempKeyPools,
};
use super::schedule::{DwrrScheduler, FifoScheduler, WorkTicket, DEFAULT_QUANTUM_BITS};
use crate::ids::{Commodity, FlowKey, LinkId, NodeId};
use crate::kms::MaterialId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPlaneConfig {
    pub relay_unit_bytes: usize,
    pub quantum_bits: u64,
    /// Serve on-demand tickets before the round robin.
    pub fifo_first: bool,
    /// Continuous backlog is capped at this many seconds of assigned rate.
    pub backlog_cap_s: f64,
    /// Unassigned stream bytes the owner keeps, in seconds of link output.
    pub stream_hold_s: f64,
    pub multipath_timeout_s: f64,
}

impl Default for DataPlaneConfig {
    fn default() -> Self {
        DataPlaneConfig {
            relay_unit_bytes: 64,
            quantum_bits: DEFAULT_QUANTUM_BITS,
            fifo_first: true,
            backlog_cap_s: 2.0,
            stream_hold_s: 2.0,
            multipath_timeout_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataMsg {
    Assign {
        link: LinkId,
        offset: u64,
        len: u32,
        flow: FlowKey,
        id: u64,
    },
    Relay(RelayEnvelope),
    KeySelect {
        relay_id: u64,
        flow: FlowKey,
        set: u64,
        part: u16,
        parts: u16,
        ranges: Vec<StreamRange>,
    },
    /// On-demand generation, forwarded along `flow.path`.
    OneTime {
        flow: FlowKey,
        amount_bits: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataOutput {
    Send {
        to: NodeId,
        msg: DataMsg,
    },
    /// End-to-end key shared with `peer`, for the KMS pool.
    Material {
        peer: NodeId,
        material: MaterialId,
        bytes: Vec<u8>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub tickets: u64,
    pub bits_ticketed: u64,
    pub bits_assigned: u64,
    /// Bits assigned on each owned link, by neighbour.
    pub assigned_by_peer: BTreeMap<NodeId, u64>,
    pub partial_tickets: u64,
    pub relays_originated: u64,
    pub relays_forwarded: u64,
    pub material_bytes: BTreeMap<NodeId, u64>,
    pub multipath_timeouts: u64,
    pub lost_assignments: u64,
    pub pending_underflows: u64,
}

#[derive(Debug, Clone)]
struct Owned {
    dwrr: DwrrScheduler,
    fifo: FifoScheduler,
    /// Assigned continuous rate and fractional backlog carry per flow.
    rates: BTreeMap<FlowKey, (f64, f64)>,
    capacity_bps: f64,
}

#[derive(Debug, Clone)]
struct Partial {
    parts: Vec<Option<Vec<u8>>>,
    since: f64,
}

#[derive(Debug, Clone)]
pub struct DataPlane {
    node: NodeId,
    config: DataPlaneConfig,
    streams: BTreeMap<NodeId, PairwiseKeyStream>,
    owned: BTreeMap<NodeId, Owned>,
    pending_assign: BTreeMap<NodeId, VecDeque<DataMsg>>,
    pools: TempKeyPools,
    /// Multipath position of each assigned flow, `(part, parts)`.
    parts: BTreeMap<FlowKey, (u16, u16)>,
    /// Relays this node originated per flow; the set number of the next one.
    sets: BTreeMap<FlowKey, u64>,
    /// Decrypted keys waiting for pad on the next hop.
    in_transit: VecDeque<(RelayEnvelope, Vec<u8>)>,
    /// Envelopes and key selections whose link bytes have not been assigned here yet.
    waiting: VecDeque<(NodeId, DataMsg)>,
    combiner: BTreeMap<(Commodity, u64, u64), Partial>,
    next_id: u64,
    outputs: Vec<DataOutput>,
    stats: DataStats,
    now: f64,
}

/// Both ends of a multipath bundle name its combined material the same way.
fn set_material(commodity: Commodity, bundle: u64, set: u64) -> MaterialId {
    let mut h = Sha256::new();
    h.update(b"qkdnet-multipath");
    h.update(commodity.src.0.to_be_bytes());
    h.update(commodity.dst.0.to_be_bytes());
    h.update(bundle.to_be_bytes());
    h.update(set.to_be_bytes());
    let d = h.finalize();
    MaterialId(u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) & !(1 << 63))
}

fn bundle_tag(flow: &FlowKey, parts: u16) -> u64 {
    // every path of a bundle shares source, destination and part count
    let c = flow.commodity;
    (u64::from(c.src.0) << 32) | (u64::from(c.dst.0) << 16) | u64::from(parts)
}

impl DataPlane {
    pub fn new(node: NodeId, config: DataPlaneConfig) -> Self {
        DataPlane {
            node,
            config,
            streams: BTreeMap::new(),
            owned: BTreeMap::new(),
            pending_assign: BTreeMap::new(),
            pools: TempKeyPools::new(node),
            parts: BTreeMap::new(),
            sets: BTreeMap::new(),
            in_transit: VecDeque::new(),
            waiting: VecDeque::new(),
            combiner: BTreeMap::new(),
            next_id: 0,
            outputs: Vec::new(),
            stats: DataStats::default(),
            now: 0.0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn stats(&self) -> &DataStats {
        &self.stats
    }

    pub fn pools(&self) -> &TempKeyPools {
        &self.pools
    }

    pub fn stream(&self, peer: NodeId) -> Option<&PairwiseKeyStream> {
        self.streams.get(&peer)
    }

    pub fn take_outputs(&mut self) -> Vec<DataOutput> {
        std::mem::take(&mut self.outputs)
    }

    pub fn in_transit_len(&self) -> usize {
        self.in_transit.len()
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        (1 << 63) | (u64::from(self.node.0) << 40) | self.next_id
    }

    /// Registers a link to `peer`; the owning end schedules it.
    pub fn add_link(&mut self, peer: NodeId, capacity_bps: f64) {
        self.streams.entry(peer).or_default();
        let link = LinkId::new(self.node, peer);
        if link.owner() == self.node {
            let quantum = self.config.quantum_bits;
            self.owned
                .entry(peer)
                .or_insert_with(|| Owned {
                    dwrr: DwrrScheduler::new(link, quantum),
                    fifo: FifoScheduler::new(),
                    rates: BTreeMap::new(),
                    capacity_bps,
                })
                .capacity_bps = capacity_bps;
        }
    }

    /// Installs the continuous flow rates of a new MCFP solution.
    pub fn set_assignment(&mut self, assignment: &FlowAssignment) {
        let mut by_commodity: BTreeMap<Commodity, Vec<&FlowKey>> = BTreeMap::new();
        for f in assignment.path_flows.keys() {
            by_commodity.entry(f.commodity).or_default().push(f);
        }
        for c in &assignment.bundled {
            if let Some(fs) = by_commodity.get(c) {
                for (i, f) in fs.iter().enumerate() {
                    self.parts.insert((*f).clone(), (i as u16, fs.len() as u16));
                }
            }
        }
        for (peer, o) in self.owned.iter_mut() {
            let link = LinkId::new(self.node, *peer);
            let flows = assignment.flows_on(link);
            let weights: Vec<(FlowKey, f64)> =
                flows.iter().filter(|(_, r)| *r > 0.0).cloned().collect();
            o.dwrr.set_weights(&weights);
            let old = std::mem::take(&mut o.rates);
            for (f, r) in weights {
                let carry = old.get(&f).map_or(0.0, |x| x.1);
                o.rates.insert(f, (r, carry));
            }
        }
    }

    /// Starts an on-demand generation of `amount_bits` along `flow`.
    pub fn request_one_time(&mut self, flow: FlowKey, amount_bits: u64) {
        self.on_one_time(flow, amount_bits);
    }

    fn on_one_time(&mut self, flow: FlowKey, amount_bits: u64) {
        let Some(pos) = flow.position(self.node) else {
            return;
        };
        let unit_bits = self.config.relay_unit_bytes as u64 * 8;
        let amount = amount_bits.div_ceil(unit_bits) * unit_bits;
        for peer in [
            pos.checked_sub(1).map(|i| flow.path[i]),
            flow.path.get(pos + 1).copied(),
        ]
        .into_iter()
        .flatten()
        {
            if let Some(o) = self.owned.get_mut(&peer) {
                o.fifo.push(WorkTicket {
                    link: LinkId::new(self.node, peer),
                    flow: flow.clone(),
                    amount_bits: amount,
                    deadline: None,
                });
            }
        }
        if let Some(next) = flow.path.get(pos + 1) {
            self.send(*next, DataMsg::OneTime { flow, amount_bits });
        }
        self.service_all();
    }

    fn send(&mut self, to: NodeId, msg: DataMsg) {
        self.outputs.push(DataOutput::Send { to, msg });
    }

    fn material(&mut self, peer: NodeId, material: MaterialId, bytes: Vec<u8>) {
        *self.stats.material_bytes.entry(peer).or_default() += bytes.len() as u64;
        self.outputs.push(DataOutput::Material {
            peer,
            material,
            bytes,
        });
    }

    /// QLL output for the link to `peer`.
    pub fn on_link_bytes(&mut self, now: f64, peer: NodeId, offset: u64, bytes: &[u8]) {
        self.now = self.now.max(now);
        let Some(stream) = self.streams.get_mut(&peer) else {
            return;
        };
        stream.push(offset, bytes);
        if let Some(o) = self.owned.get(&peer) {
            let hold = (o.capacity_bps * self.config.stream_hold_s / 8.0).ceil() as u64;
            self.service(peer);
            self.streams
                .get_mut(&peer)
                .expect("exists")
                .cap(hold.max(1));
        } else {
            self.retry_assigns(peer);
        }
    }

    /// Accrues continuous backlog, expires stale multipath sets and serves
    /// every owned link.
    pub fn tick(&mut self, now: f64, dt: f64) {
        self.now = self.now.max(now);
        let cap_s = self.config.backlog_cap_s;
        let quantum = self.config.quantum_bits;
        for o in self.owned.values_mut() {
            for (f, (rate, carry)) in o.rates.iter_mut() {
                *carry += *rate * dt;
                let whole = carry.floor();
                *carry -= whole;
                o.dwrr.add_backlog(f, whole as u64);
                o.dwrr.clamp_backlog(f, (*rate * cap_s) as u64 + quantum);
            }
        }
        let timeout = self.config.multipath_timeout_s;
        let before = self.combiner.len();
        self.combiner.retain(|_, p| now - p.since < timeout);
        self.stats.multipath_timeouts += (before - self.combiner.len()) as u64;
        self.service_all();
    }

    fn service_all(&mut self) {
        let peers: Vec<NodeId> = self.owned.keys().copied().collect();
        for p in peers {
            self.service(p);
        }
    }

    fn next_ticket(&mut self, peer: NodeId) -> Option<(WorkTicket, bool)> {
        let fifo_first = self.config.fifo_first;
        let o = self.owned.get_mut(&peer)?;
        let fifo = |o: &mut Owned| o.fifo.next_ticket().ok().map(|t| (t, true));
        let dwrr = |o: &mut Owned| o.dwrr.next_ticket().ok().map(|t| (t, false));
        if fifo_first {
            fifo(o).or_else(|| dwrr(o))
        } else {
            dwrr(o).or_else(|| fifo(o))
        }
    }

    /// Executes tickets on the link to `peer` until the stream or the work
    /// runs out. A ticket the stream cannot cover is served in part and the
    /// rest re-queued.
    fn service(&mut self, peer: NodeId) {
        loop {
            let avail = self.streams.get(&peer).map_or(0, |s| s.available());
            if avail == 0 {
                break;
            }
            let Some((ticket, on_demand)) = self.next_ticket(peer) else {
                break;
            };
            let served = self.execute_ticket(peer, &ticket, avail);
            self.stats.tickets += 1;
            self.stats.bits_ticketed += ticket.amount_bits;
            if served < ticket.amount_bits {
                self.stats.partial_tickets += 1;
                let o = self.owned.get_mut(&peer).expect("owned link");
                let rest = ticket.amount_bits - served;
                if on_demand {
                    o.fifo.requeue(ticket, rest);
                } else {
                    o.dwrr.requeue(&ticket, rest);
                }
                break;
            }
        }
    }

    /// Assigns up to `ticket.amount_bits` of unassigned stream to the flow;
    /// returns the bits served.
    pub fn execute_ticket(&mut self, peer: NodeId, ticket: &WorkTicket, avail_bytes: u64) -> u64 {
        let bytes = (ticket.amount_bits / 8).min(avail_bytes);
        if bytes == 0 {
            return 0;
        }
        let stream = self.streams.get_mut(&peer).expect("link registered");
        let (offset, data) = stream.take(bytes as usize);
        let id = self.fresh_id();
        let link = LinkId::new(self.node, peer);
        self.send(
            peer,
            DataMsg::Assign {
                link,
                offset,
                len: data.len() as u32,
                flow: ticket.flow.clone(),
                id,
            },
        );
        self.stats.bits_assigned += bytes * 8;
        *self.stats.assigned_by_peer.entry(peer).or_default() += bytes * 8;
        self.file(peer, &ticket.flow, offset, data, id);
        bytes * 8
    }

    fn file(&mut self, peer: NodeId, flow: &FlowKey, offset: u64, data: Vec<u8>, id: u64) {
        if category_at(self.node, flow) == Category::Direct {
            let len = data.len() as u32;
            self.pools.consume_direct(peer, (offset, len));
            self.material(peer, MaterialId(id), data);
            return;
        }
        self.pools.file(flow, peer, offset, data);
        self.progress(flow);
    }

    /// Originates, forwards and retries whatever the new bytes allow.
    fn progress(&mut self, flow: &FlowKey) {
        if flow.path.len() >= 3 && flow.path[1] == self.node {
            self.originate(flow);
        }
        self.retry_waiting();
        self.retry_transit();
    }

    fn originate(&mut self, flow: &FlowKey) {
        let unit = self.config.relay_unit_bytes;
        let (part, parts) = self.parts.get(flow).copied().unwrap_or((0, 1));
        loop {
            let set = self.sets.get(flow).copied().unwrap_or(0);
            let id = self.fresh_id();
            match relay_originate(
                &mut self.pools,
                self.node,
                flow,
                unit,
                id,
                (set, part, parts),
            ) {
                Ok(o) => {
                    self.sets.insert(flow.clone(), set + 1);
                    self.stats.relays_originated += 1;
                    self.send(
                        flow.path[0],
                        DataMsg::KeySelect {
                            relay_id: id,
                            flow: flow.clone(),
                            set,
                            part,
                            parts,
                            ranges: o.source_ranges,
                        },
                    );
                    self.send(flow.path[2], DataMsg::Relay(o.envelope));
                }
                Err(_) => {
                    self.next_id -= 1;
                    break;
                }
            }
        }
    }

    pub fn on_message(&mut self, now: f64, from: NodeId, msg: DataMsg) {
        self.now = self.now.max(now);
        match msg {
            DataMsg::Assign { .. } => {
                self.pending_assign.entry(from).or_default().push_back(msg);
                self.retry_assigns(from);
            }
            DataMsg::OneTime { flow, amount_bits } => self.on_one_time(flow, amount_bits),
            other => {
                if !self.try_deliver(from, &other) {
                    self.stats.pending_underflows += 1;
                    self.waiting.push_back((from, other));
                }
            }
        }
    }

    fn retry_assigns(&mut self, peer: NodeId) {
        while let Some(DataMsg::Assign {
            link,
            offset,
            len,
            flow,
            id,
        }) = self
            .pending_assign
            .get(&peer)
            .and_then(|q| q.front())
            .cloned()
        {
            let Some(stream) = self.streams.get_mut(&peer) else {
                return;
            };
            match stream.take_at(link, offset, len) {
                Ok(data) => {
                    self.pending_assign
                        .get_mut(&peer)
                        .expect("non-empty")
                        .pop_front();
                    self.file(peer, &flow, offset, data, id);
                }
                Err(_) if offset + u64::from(len) > stream.head() => return,
                Err(_) => {
                    // already discarded here; the owner's copy is orphaned
                    self.stats.lost_assignments += 1;
                    self.pending_assign
                        .get_mut(&peer)
                        .expect("non-empty")
                        .pop_front();
                }
            }
        }
    }

    /// Returns false when the link bytes a message refers to are not here yet.
    fn try_deliver(&mut self, from: NodeId, msg: &DataMsg) -> bool {
        match msg {
            DataMsg::Relay(env) => match relay_receive(&mut self.pools, self.node, env) {
                Ok(key) => {
                    if env.hop + 1 == env.flow.path.len() {
                        self.deliver(
                            env.flow.clone(),
                            env.relay_id,
                            (env.set, env.part, env.parts),
                            key,
                        );
                    } else {
                        self.in_transit.push_back((env.clone(), key));
                        self.retry_transit();
                    }
                    true
                }
                Err(RelayError::StreamUnderflow { .. }) => false,
                Err(e) => {
                    log::warn!("{}: dropping relay from {from}: {e}", self.node);
                    true
                }
            },
            DataMsg::KeySelect {
                relay_id,
                flow,
                set,
                part,
                parts,
                ranges,
            } => match self.pools.draw_ranges(flow, from, ranges) {
                Ok(key) => {
                    self.deliver(flow.clone(), *relay_id, (*set, *part, *parts), key);
                    true
                }
                Err(_) => false,
            },
            _ => true,
        }
    }

    fn retry_waiting(&mut self) {
        let mut i = 0;
        while i < self.waiting.len() {
            let (from, msg) = self.waiting[i].clone();
            if self.try_deliver(from, &msg) {
                self.waiting.remove(i);
            } else {
                i += 1;
            }
        }
    }

    fn retry_transit(&mut self) {
        let mut i = 0;
        while i < self.in_transit.len() {
            let (env, key) = &self.in_transit[i];
            match relay_forward(&mut self.pools, env, key) {
                Ok(next) => {
                    let to = next.flow.path[next.hop];
                    self.in_transit.remove(i);
                    self.stats.relays_forwarded += 1;
                    self.send(to, DataMsg::Relay(next));
                }
                Err(_) => i += 1,
            }
        }
    }

    /// A relayed key reached an endpoint; single-path keys go to the KMS
    /// directly, multipath parts once their set is complete.
    fn deliver(
        &mut self,
        flow: FlowKey,
        relay_id: u64,
        (set, part, parts): (u64, u16, u16),
        key: Vec<u8>,
    ) {
        let c = flow.commodity;
        let peer = if self.node == c.src { c.dst } else { c.src };
        if parts <= 1 {
            self.material(peer, MaterialId(relay_id), key);
            return;
        }
        let bundle = bundle_tag(&flow, parts);
        let now = self.now;
        let entry = self
            .combiner
            .entry((c, bundle, set))
            .or_insert_with(|| Partial {
                parts: vec![None; parts as usize],
                since: now,
            });
        if let Some(slot) = entry.parts.get_mut(part as usize) {
            *slot = Some(key);
        }
        if entry.parts.iter().all(Option::is_some) {
            let p = self.combiner.remove(&(c, bundle, set)).expect("present");
            match combine_multipath(&p.parts) {
                Ok(k) => self.material(peer, set_material(c, bundle, set), k),
                Err(e) => log::warn!("{}: multipath set {set} of {c}: {e}", self.node),
            }
        }
    }
}
