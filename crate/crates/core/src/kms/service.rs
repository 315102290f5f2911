//! The per-site KMS: session key issuance, remote negotiation, token grants
//! and the security-class strategies, on top of one `PoolReplica` per peer.
//!
//! The service is sans-IO. Inputs are host requests, peer frames, QNL
//! material and timers; outputs are queued as `KmsOutput` and drained by
//! the caller.
//!
//! A key is usable by its originator only after the remote side confirmed
//! retrieving it. Every retry uses a fresh session id, so late messages for
//! an abandoned attempt are recognisably stale.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::demand::{DemandEstimate, DemandEstimator};
use super::expand::derive_expanded_key;
use super::policy::{enforce_policy, EffectiveParams, PolicyDb, RequestedParams};
use super::selection::{InterSiteKey, KeySelectionInfo, KeySource, SealedSelectionPacket};
use super::sync::{PoolReplica, Role, SyncNotice};
use super::wire::{
    ErrorCode, ErrorFrame, Frame, KeyConfirm, KeyNeg, MaterialId, NegotiationMode, TokenConfirm,
};
use super::KmsError;
use crate::ids::{HostId, PoolId, SessionId, SiteId};
use crate::keypool::{KeyReference, PoolConfig, PoolError};

pub const NEGOTIATION_TIMEOUT_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmsConfig {
    pub mode: NegotiationMode,
    pub negotiation_timeout_s: f64,
    pub max_attempts: u32,
    /// How long a request may wait for pool material before failing.
    pub blocked_timeout_s: f64,
    pub token_ttl_s: f64,
    /// Leader-initiated inter-site key refresh period; 0 disables it.
    pub intersite_refresh_s: f64,
    pub pool: PoolConfig,
    pub policies: PolicyDb,
    /// Shared secret all inter-site keys are bootstrapped from.
    pub bootstrap_secret: u64,
    pub demand_prior_bps: f64,
}

impl Default for KmsConfig {
    fn default() -> Self {
        KmsConfig {
            mode: NegotiationMode::Direct,
            negotiation_timeout_s: NEGOTIATION_TIMEOUT_S,
            max_attempts: 6,
            blocked_timeout_s: 30.0,
            token_ttl_s: 10.0,
            intersite_refresh_s: 0.0,
            pool: PoolConfig::default(),
            policies: PolicyDb::default(),
            bootstrap_secret: 0,
            demand_prior_bps: 0.0,
        }
    }
}

/// The pre-shared key both sites of a pair start from.
pub fn bootstrap_key(secret: u64, pool_id: PoolId) -> InterSiteKey {
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"qkdnet-bootstrap")
        .chain_update(secret.to_be_bytes())
        .chain_update(pool_id.0.to_be_bytes())
        .finalize()
        .into();
    InterSiteKey::new(0, key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRequest {
    pub src_host: HostId,
    pub dst_host: HostId,
    pub remote_site: SiteId,
    pub params: RequestedParams,
    /// How long the host keeps the session open; drives refreshes.
    pub session_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyGrant {
    pub session_id: SessionId,
    pub session_key: Vec<u8>,
    pub packet: SealedSelectionPacket,
    pub expiry: f64,
    pub refresh_interval_s: Option<f64>,
    pub class: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrantToken {
    pub token_id: u64,
    pub session_id: SessionId,
    pub reference: KeyReference,
    pub expiry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantRole {
    Originator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KmsTimer {
    Negotiation(SessionId),
    Blocked(SessionId),
    Refresh { root: SessionId, index: u32 },
    IntersiteRefresh(SiteId),
}

/// Observable outcomes, for hosts and for run-time audits.
#[derive(Debug, Clone, PartialEq)]
pub enum KmsEvent {
    Granted {
        session: SessionId,
        root: SessionId,
        role: GrantRole,
        host: HostId,
        peer_host: HostId,
        peer_site: SiteId,
        class: u8,
        source: KeySource,
        key: Vec<u8>,
        reference: Option<KeyReference>,
        refresh: bool,
    },
    /// A responder-side key whose bytes were later lost to a conflict.
    Revoked {
        session: SessionId,
    },
    RaceConflict {
        session: SessionId,
    },
    Fallback {
        session: SessionId,
        class: u8,
    },
    /// The pool shared with `peer` is `bytes` short of serving the session.
    Blocked {
        session: SessionId,
        peer: SiteId,
        bytes: u64,
    },
    Failed {
        session: SessionId,
        reason: KmsError,
    },
    MacRejected {
        peer: SiteId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum KmsOutput {
    /// `via_hosts` marks a selection packet that travels host to host
    /// before reaching the remote KMS.
    Send {
        to: SiteId,
        frame: Frame,
        via_hosts: bool,
    },
    Timer {
        at: f64,
        timer: KmsTimer,
    },
    Event(KmsEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KmsStats {
    pub requests: u64,
    pub grants_by_class: [u64; 6],
    pub responder_grants: u64,
    pub race_conflicts: u64,
    pub fallbacks_by_class: [u64; 6],
    pub blocked: u64,
    pub failed: u64,
    pub mac_invalid: u64,
    pub key_refreshes: u64,
    pub intersite_refreshes: u64,
    /// Pool bytes behind confirmed originator grants, by class.
    pub pool_bytes_by_class: [u64; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Blocked,
    /// Waiting for KEY_CONFIRM / TOKEN_CONFIRM or an error.
    Negotiating,
    Done,
}

#[derive(Debug, Clone)]
struct Session {
    id: SessionId,
    root: SessionId,
    request: KeyRequest,
    params: EffectiveParams,
    pool_id: PoolId,
    attempt: u32,
    phase: Phase,
    source: KeySource,
    reference: Option<KeyReference>,
    key: Option<Vec<u8>>,
    packet: Option<SealedSelectionPacket>,
    blocked_since: Option<f64>,
    refresh: bool,
}

#[derive(Debug, Clone)]
struct HeldKey {
    reference: KeyReference,
}

#[derive(Debug, Clone)]
struct RefreshPlan {
    request: KeyRequest,
    params: EffectiveParams,
    started: f64,
    end: f64,
}

#[derive(Debug, Clone)]
pub struct Kms {
    site: SiteId,
    config: KmsConfig,
    rng: ChaCha8Rng,
    classical_rng: ChaCha8Rng,
    replicas: BTreeMap<SiteId, PoolReplica>,
    direct_links: BTreeSet<SiteId>,
    sessions: BTreeMap<SessionId, Session>,
    blocked: BTreeMap<SiteId, VecDeque<SessionId>>,
    /// Responder-side reservations waiting for the originator's Confirm.
    held: BTreeMap<SessionId, HeldKey>,
    /// KEY_NEG frames that reference material this replica has not seen yet.
    deferred: Vec<(SiteId, KeyNeg, f64)>,
    deferred_tokens: Vec<(SiteId, TokenConfirm, f64)>,
    host_keys: BTreeMap<(HostId, SiteId), (SessionId, Vec<u8>)>,
    host_key_cache: BTreeMap<SessionId, Vec<u8>>,
    tokens: BTreeMap<SessionId, (GrantToken, Option<KeyGrant>)>,
    refresh_plans: BTreeMap<SessionId, RefreshPlan>,
    demand: BTreeMap<SiteId, DemandEstimator>,
    outputs: Vec<KmsOutput>,
    stats: KmsStats,
    /// Time of the input being processed.
    now: f64,
}

impl Kms {
    pub fn new(site: SiteId, peers: &[SiteId], config: KmsConfig, seed: u64) -> Self {
        let mut replicas = BTreeMap::new();
        let mut demand = BTreeMap::new();
        for &peer in peers.iter().filter(|p| **p != site) {
            let key = bootstrap_key(config.bootstrap_secret, PoolId::for_pair(site, peer));
            replicas.insert(peer, PoolReplica::new(site, peer, config.pool.clone(), key));
            demand.insert(peer, DemandEstimator::new(peer, config.demand_prior_bps));
        }
        let stream =
            |label: u64| ChaCha8Rng::seed_from_u64(seed ^ (u64::from(site.0) << 48) ^ label);
        Kms {
            site,
            rng: stream(0x6b6d73),
            classical_rng: stream(0x636c6173736963),
            config,
            replicas,
            direct_links: BTreeSet::new(),
            sessions: BTreeMap::new(),
            blocked: BTreeMap::new(),
            held: BTreeMap::new(),
            deferred: Vec::new(),
            deferred_tokens: Vec::new(),
            host_keys: BTreeMap::new(),
            host_key_cache: BTreeMap::new(),
            tokens: BTreeMap::new(),
            refresh_plans: BTreeMap::new(),
            demand,
            outputs: Vec::new(),
            stats: KmsStats::default(),
            now: 0.0,
        }
    }

    pub fn site(&self) -> SiteId {
        self.site
    }

    pub fn config(&self) -> &KmsConfig {
        &self.config
    }

    pub fn stats(&self) -> &KmsStats {
        &self.stats
    }

    pub fn replica(&self, peer: SiteId) -> Option<&PoolReplica> {
        self.replicas.get(&peer)
    }

    pub fn replica_mut(&mut self, peer: SiteId) -> Option<&mut PoolReplica> {
        self.replicas.get_mut(&peer)
    }

    pub fn replicas(&self) -> impl Iterator<Item = &PoolReplica> {
        self.replicas.values()
    }

    pub fn set_direct_link(&mut self, peer: SiteId, up: bool) {
        if up {
            self.direct_links.insert(peer);
        } else {
            self.direct_links.remove(&peer);
        }
    }

    pub fn take_outputs(&mut self) -> Vec<KmsOutput> {
        self.flush_all();
        std::mem::take(&mut self.outputs)
    }

    pub fn pending_sessions(&self) -> usize {
        self.sessions
            .values()
            .filter(|s| s.phase != Phase::Done)
            .count()
    }

    fn new_session_id(&mut self) -> SessionId {
        loop {
            let id = SessionId(self.rng.gen());
            if id.0 != 0 && !self.sessions.contains_key(&id) {
                return id;
            }
        }
    }

    fn event(&mut self, event: KmsEvent) {
        self.outputs.push(KmsOutput::Event(event));
    }

    fn timer(&mut self, at: f64, timer: KmsTimer) {
        self.outputs.push(KmsOutput::Timer { at, timer });
    }

    /// Pool events queued so far go out first, so a peer never sees a
    /// negotiation frame before the events it depends on.
    fn send(&mut self, to: SiteId, frame: Frame) {
        self.flush_replica(to);
        let via_hosts =
            self.config.mode == NegotiationMode::Direct && matches!(frame, Frame::KeyNeg(_));
        self.outputs.push(KmsOutput::Send {
            to,
            frame,
            via_hosts,
        });
    }

    fn flush_replica(&mut self, peer: SiteId) {
        let Some(replica) = self.replicas.get_mut(&peer) else {
            return;
        };
        let frames = replica.take_outbox();
        let notices = replica.take_notices();
        for frame in frames {
            self.outputs.push(KmsOutput::Send {
                to: peer,
                frame,
                via_hosts: false,
            });
        }
        for notice in notices {
            self.on_notice(peer, notice);
        }
    }

    fn flush_all(&mut self) {
        let peers: Vec<SiteId> = self.replicas.keys().copied().collect();
        for peer in peers {
            self.flush_replica(peer);
        }
    }

    // ---- inputs -----------------------------------------------------------

    /// Starts a key request; the grant arrives later as a `Granted` event.
    pub fn request_key(&mut self, now: f64, request: KeyRequest) -> Result<SessionId, KmsError> {
        self.now = self.now.max(now);
        self.stats.requests += 1;
        if !self.replicas.contains_key(&request.remote_site) {
            return Err(KmsError::UnknownPool(PoolId::for_pair(
                self.site,
                request.remote_site,
            )));
        }
        let params = enforce_policy(
            &self.config.policies,
            request.src_host,
            request.dst_host,
            &request.params,
        )?;
        if let Err(e) = params
            .tactics
            .check(self.direct_links.contains(&request.remote_site))
        {
            self.stats.failed += 1;
            return Err(e);
        }
        let id = self.new_session_id();
        let estimator = self
            .demand
            .get_mut(&request.remote_site)
            .expect("peer has estimator");
        if params.class == 5 {
            estimator.record_otp(now, params.key_length_bytes);
        } else {
            let keys = match (params.class, params.refresh_interval_s) {
                (4, Some(l)) if l > 0.0 => (request.session_duration_s / l).ceil().max(1.0),
                _ => 1.0,
            };
            estimator.record_session(now, params.key_length_bytes, keys);
        }
        if params.class == 4 {
            if let Some(l) = params.refresh_interval_s.filter(|l| *l > 0.0) {
                self.refresh_plans.insert(
                    id,
                    RefreshPlan {
                        request: request.clone(),
                        params,
                        started: now,
                        end: now + request.session_duration_s,
                    },
                );
                if l < request.session_duration_s {
                    self.timer(now + l, KmsTimer::Refresh { root: id, index: 1 });
                }
            }
        }
        self.open_session(now, id, id, request, params, false);
        Ok(id)
    }

    fn open_session(
        &mut self,
        now: f64,
        id: SessionId,
        root: SessionId,
        request: KeyRequest,
        params: EffectiveParams,
        refresh: bool,
    ) {
        let pool_id = PoolId::for_pair(self.site, request.remote_site);
        self.sessions.insert(
            id,
            Session {
                id,
                root,
                request,
                params,
                pool_id,
                attempt: 1,
                phase: Phase::Negotiating,
                source: KeySource::Pool,
                reference: None,
                key: None,
                packet: None,
                blocked_since: None,
                refresh,
            },
        );
        self.start_attempt(now, id);
    }

    /// Token-mode API: the token names the session; `redeem_token` yields
    /// the key only after the remote side confirmed.
    pub fn request_token(&mut self, now: f64, request: KeyRequest) -> Result<GrantToken, KmsError> {
        let id = self.request_key(now, request)?;
        let session = &self.sessions[&id];
        let token = GrantToken {
            token_id: id.0,
            session_id: id,
            reference: session.reference.unwrap_or(KeyReference {
                pool_id: session.pool_id,
                generation: 0,
                offset: 0,
                length: session.params.key_length_bytes,
                session_id: id,
            }),
            expiry: now + self.config.token_ttl_s,
        };
        self.tokens.insert(id, (token, None));
        Ok(token)
    }

    pub fn redeem_token(&mut self, now: f64, token: &GrantToken) -> Result<KeyGrant, KmsError> {
        let Some((stored, grant)) = self.tokens.get(&token.session_id) else {
            return Err(KmsError::UnknownSession(token.session_id));
        };
        if now > stored.expiry {
            self.tokens.remove(&token.session_id);
            return Err(KmsError::TokenExpired);
        }
        match grant {
            Some(g) => {
                let g = g.clone();
                self.tokens.remove(&token.session_id);
                Ok(g)
            }
            None => Err(KmsError::RemoteUnconfirmed),
        }
    }

    /// Material the QNL delivered for the pool shared with `peer`.
    pub fn stage_material(&mut self, now: f64, peer: SiteId, material: MaterialId, bytes: Vec<u8>) {
        self.now = self.now.max(now);
        if let Some(r) = self.replicas.get_mut(&peer) {
            r.stage(material, bytes);
        }
        self.flush_replica(peer);
    }

    pub fn tick(&mut self, now: f64) {
        self.now = self.now.max(now);
        for r in self.replicas.values_mut() {
            r.tick(now);
        }
        self.deferred.retain(|(_, _, until)| *until > now);
        self.deferred_tokens.retain(|(_, _, until)| *until > now);
        self.flush_all();
    }

    /// Starts the periodic inter-site key refresh timers.
    pub fn start(&mut self, now: f64) {
        if self.config.intersite_refresh_s > 0.0 {
            let leaders: Vec<SiteId> = self
                .replicas
                .iter()
                .filter(|(_, r)| r.role() == Role::Leader)
                .map(|(p, _)| *p)
                .collect();
            for peer in leaders {
                self.timer(
                    now + self.config.intersite_refresh_s,
                    KmsTimer::IntersiteRefresh(peer),
                );
            }
        }
    }

    pub fn on_timer(&mut self, now: f64, timer: KmsTimer) {
        self.now = self.now.max(now);
        match timer {
            KmsTimer::Negotiation(id) => {
                if self
                    .sessions
                    .get(&id)
                    .is_some_and(|s| s.phase == Phase::Negotiating)
                {
                    self.retry(now, id, false);
                }
            }
            KmsTimer::Blocked(id) => {
                let expired = self.sessions.get(&id).is_some_and(|s| {
                    s.phase == Phase::Blocked
                        && s.blocked_since
                            .is_some_and(|t| now - t >= self.config.blocked_timeout_s - 1e-9)
                });
                if expired {
                    self.fail(id, KmsError::InsufficientMaterial);
                }
            }
            KmsTimer::Refresh { root, index } => self.on_refresh_timer(now, root, index),
            KmsTimer::IntersiteRefresh(peer) => {
                if let Some(r) = self.replicas.get_mut(&peer) {
                    if r.start_refresh().is_ok() {
                        self.stats.intersite_refreshes += 1;
                    }
                }
                self.timer(
                    now + self.config.intersite_refresh_s,
                    KmsTimer::IntersiteRefresh(peer),
                );
            }
        }
        self.flush_all();
    }

    /// Leader-side inter-site key refresh, outside the periodic timer.
    pub fn refresh_intersite_key(&mut self, peer: SiteId) -> Result<u32, KmsError> {
        let r = self
            .replicas
            .get_mut(&peer)
            .ok_or(KmsError::UnknownPool(PoolId::for_pair(self.site, peer)))?;
        let epoch = r
            .start_refresh()
            .map_err(|_| KmsError::InsufficientMaterial)?;
        self.stats.intersite_refreshes += 1;
        self.flush_replica(peer);
        Ok(epoch)
    }

    fn on_refresh_timer(&mut self, now: f64, root: SessionId, index: u32) {
        let Some(plan) = self.refresh_plans.get(&root).cloned() else {
            return;
        };
        let l = plan.params.refresh_interval_s.unwrap_or(f64::INFINITY);
        let at = plan.started + f64::from(index) * l;
        if at >= plan.end - 1e-9 {
            self.refresh_plans.remove(&root);
            return;
        }
        self.stats.key_refreshes += 1;
        let id = self.new_session_id();
        self.open_session(now, id, root, plan.request.clone(), plan.params, true);
        let next = plan.started + f64::from(index + 1) * l;
        if next < plan.end - 1e-9 {
            self.timer(
                next,
                KmsTimer::Refresh {
                    root,
                    index: index + 1,
                },
            );
        } else {
            self.refresh_plans.remove(&root);
        }
    }

    pub fn on_frame(&mut self, now: f64, from: SiteId, frame: Frame) {
        self.now = self.now.max(now);
        match frame {
            Frame::PoolEvent(_) | Frame::Digest(_) => {
                if let Some(r) = self.replicas.get_mut(&from) {
                    r.on_frame(frame);
                }
                self.flush_replica(from);
                self.retry_deferred(now, from);
            }
            Frame::Error(e) if e.code == ErrorCode::SequenceGap => {
                if let Some(r) = self.replicas.get_mut(&from) {
                    r.on_frame(Frame::Error(e));
                }
                self.flush_replica(from);
            }
            Frame::Error(e) => self.on_error(now, from, e),
            Frame::KeyNeg(neg) => {
                if !self.on_key_neg(now, from, &neg) {
                    self.deferred
                        .push((from, neg, now + self.config.negotiation_timeout_s));
                }
            }
            Frame::KeyConfirm(c) => self.on_key_confirm(now, c.session_id),
            Frame::TokenConfirm(t) => {
                if !self.on_token_confirm(now, from, &t) {
                    self.deferred_tokens
                        .push((from, t, now + self.config.negotiation_timeout_s));
                }
            }
        }
        self.flush_all();
    }

    fn retry_deferred(&mut self, now: f64, from: SiteId) {
        let pending: Vec<_> = std::mem::take(&mut self.deferred);
        for (peer, neg, until) in pending {
            if (peer != from || until <= now || !self.on_key_neg(now, peer, &neg)) && until > now {
                self.deferred.push((peer, neg, until));
            }
        }
        let pending: Vec<_> = std::mem::take(&mut self.deferred_tokens);
        for (peer, t, until) in pending {
            if (peer != from || until <= now || !self.on_token_confirm(now, peer, &t))
                && until > now
            {
                self.deferred_tokens.push((peer, t, until));
            }
        }
    }

    // ---- originator side --------------------------------------------------

    fn start_attempt(&mut self, now: f64, id: SessionId) {
        let Some(session) = self.sessions.get(&id).cloned() else {
            return;
        };
        let peer = session.request.remote_site;
        let class = session.params.class;
        let length = session.params.key_length_bytes;
        let generation = self.replicas[&peer].pool().generation();
        let mut reference = KeyReference {
            pool_id: session.pool_id,
            generation,
            offset: 0,
            length,
            session_id: id,
        };
        let source = match class {
            0 => {
                self.stats.fallbacks_by_class[0] += 1;
                self.event(KmsEvent::Fallback {
                    session: id,
                    class: 0,
                });
                KeySource::Classical {
                    nonce: self.classical_rng.gen(),
                }
            }
            1 if self
                .host_keys
                .contains_key(&(session.request.src_host, peer)) =>
            {
                KeySource::HostKey {
                    origin: self.host_keys[&(session.request.src_host, peer)].0,
                }
            }
            _ => {
                let token = self.config.mode == NegotiationMode::Token;
                let follower = self.replicas[&peer].role() == Role::Follower;
                if token && follower {
                    KeySource::Deferred
                } else {
                    let replica = self.replicas.get_mut(&peer).expect("replica");
                    match replica.allocate(length, id) {
                        Ok(a) => {
                            reference = a.reference();
                            KeySource::Pool
                        }
                        Err(PoolError::InsufficientMaterial { .. }) if class == 2 => {
                            self.stats.fallbacks_by_class[2] += 1;
                            self.event(KmsEvent::Fallback {
                                session: id,
                                class: 2,
                            });
                            KeySource::Expanded
                        }
                        Err(PoolError::InsufficientMaterial { .. }) => {
                            self.block(now, id);
                            return;
                        }
                        Err(e) => {
                            self.fail(id, e.into());
                            return;
                        }
                    }
                }
            }
        };
        let info = KeySelectionInfo {
            reference,
            issued_at: now,
            source,
        };
        let nonce = self.rng.gen();
        let replica = &self.replicas[&peer];
        let packet = replica.keyring().seal(&info, nonce);
        let key = match source {
            KeySource::Pool => replica.read(&reference),
            KeySource::Deferred => None,
            _ => Some(
                self.derive_key(peer, &info, packet.key_epoch)
                    .expect("derivable"),
            ),
        };
        let s = self.sessions.get_mut(&id).expect("session");
        s.phase = Phase::Negotiating;
        s.source = source;
        s.reference = Some(reference);
        s.key = key;
        s.packet = Some(packet.clone());
        let neg = KeyNeg {
            pool_id: s.pool_id,
            session_id: id,
            mode: self.config.mode,
            src_host: s.request.src_host,
            dst_host: s.request.dst_host,
            class,
            lifetime_s: s.params.lifetime_s,
            packet,
        };
        self.send(peer, Frame::KeyNeg(neg));
        self.timer(
            now + self.config.negotiation_timeout_s,
            KmsTimer::Negotiation(id),
        );
    }

    /// Key bytes for non-pool sources, derived identically on both sites.
    fn derive_key(&self, peer: SiteId, info: &KeySelectionInfo, epoch: u32) -> Option<Vec<u8>> {
        let ring = self.replicas.get(&peer)?.keyring();
        let isk = [Some(ring.active()), ring.pending()]
            .into_iter()
            .flatten()
            .find(|k| k.epoch == epoch)?;
        let length = info.reference.length as usize;
        let mut seed = isk.bytes().to_vec();
        match info.source {
            KeySource::Expanded => {
                seed.extend_from_slice(b"expanded");
                seed.extend_from_slice(&info.reference.session_id.0.to_be_bytes());
            }
            KeySource::Classical { nonce } => {
                seed.extend_from_slice(b"classical");
                seed.extend_from_slice(&nonce.to_be_bytes());
            }
            KeySource::HostKey { origin } => {
                return self
                    .host_keys
                    .values()
                    .find(|(o, _)| *o == origin)
                    .map(|(_, k)| k.clone())
                    .or_else(|| self.host_key_cache.get(&origin).cloned());
            }
            KeySource::Pool | KeySource::Deferred => return None,
        }
        derive_expanded_key(&seed, length).ok()
    }

    fn block(&mut self, now: f64, id: SessionId) {
        let Some(s) = self.sessions.get_mut(&id) else {
            return;
        };
        s.phase = Phase::Blocked;
        let peer = s.request.remote_site;
        let bytes = s.params.key_length_bytes;
        if s.blocked_since.is_none() {
            s.blocked_since = Some(now);
            self.stats.blocked += 1;
            self.event(KmsEvent::Blocked {
                session: id,
                peer,
                bytes,
            });
            self.timer(now + self.config.blocked_timeout_s, KmsTimer::Blocked(id));
        }
        self.blocked.entry(peer).or_default().push_back(id);
    }

    /// Restarts blocked requests in arrival order until one is still short.
    fn unblock(&mut self, now: f64, peer: SiteId) {
        while let Some(id) = self.blocked.get_mut(&peer).and_then(|q| q.pop_front()) {
            if !self
                .sessions
                .get(&id)
                .is_some_and(|s| s.phase == Phase::Blocked)
            {
                continue;
            }
            self.start_attempt(now, id);
            if self
                .sessions
                .get(&id)
                .is_some_and(|s| s.phase == Phase::Blocked)
            {
                // block() re-queued it at the back; keep FIFO order
                let queue = self.blocked.get_mut(&peer).expect("queue");
                queue.pop_back();
                queue.push_front(id);
                return;
            }
        }
    }

    fn fail(&mut self, id: SessionId, reason: KmsError) {
        if let Some(s) = self.sessions.get_mut(&id) {
            if s.phase == Phase::Done {
                return;
            }
            s.phase = Phase::Done;
            self.stats.failed += 1;
            self.event(KmsEvent::Failed {
                session: id,
                reason,
            });
        }
    }

    /// Abandons the current attempt and, budget permitting, restarts the
    /// request under a fresh session id.
    fn retry(&mut self, now: f64, id: SessionId, conflict: bool) {
        let Some(s) = self.sessions.get_mut(&id) else {
            return;
        };
        if s.phase == Phase::Done {
            return;
        }
        s.phase = Phase::Done;
        let s = s.clone();
        if let (KeySource::Pool, Some(r)) = (s.source, s.reference) {
            let replica = self
                .replicas
                .get_mut(&s.request.remote_site)
                .expect("replica");
            if replica.holds(&r) {
                replica.abort(&r);
            }
        }
        if conflict {
            self.stats.race_conflicts += 1;
            self.event(KmsEvent::RaceConflict { session: id });
        }
        if s.attempt >= self.config.max_attempts {
            self.stats.failed += 1;
            self.event(KmsEvent::Failed {
                session: id,
                reason: KmsError::RaceConflict(id),
            });
            return;
        }
        let next = self.new_session_id();
        let mut fresh = s.clone();
        fresh.id = next;
        fresh.attempt = s.attempt + 1;
        fresh.reference = None;
        fresh.key = None;
        fresh.packet = None;
        fresh.blocked_since = None;
        fresh.phase = Phase::Negotiating;
        if self.tokens.contains_key(&id) {
            let (mut token, _) = self.tokens.remove(&id).expect("token");
            token.session_id = next;
            self.tokens.insert(next, (token, None));
        }
        self.sessions.insert(next, fresh);
        self.start_attempt(now, next);
    }

    fn complete(&mut self, now: f64, id: SessionId, key: Vec<u8>) {
        let Some(s) = self.sessions.get_mut(&id) else {
            return;
        };
        s.phase = Phase::Done;
        s.key = Some(key.clone());
        let s = s.clone();
        let peer = s.request.remote_site;
        let class = s.params.class;
        self.stats.grants_by_class[class as usize] += 1;
        if let (KeySource::Pool, Some(r)) = (s.source, s.reference) {
            self.stats.pool_bytes_by_class[class as usize] += r.length;
            if class == 1 {
                self.host_keys
                    .insert((s.request.src_host, peer), (id, key.clone()));
            }
        }
        let grant = KeyGrant {
            session_id: id,
            session_key: key.clone(),
            packet: s.packet.clone().expect("sealed"),
            expiry: now + s.params.lifetime_s,
            refresh_interval_s: s.params.refresh_interval_s,
            class,
        };
        if let Some((_, slot)) = self.tokens.get_mut(&id) {
            *slot = Some(grant);
        }
        self.event(KmsEvent::Granted {
            session: id,
            root: s.root,
            role: GrantRole::Originator,
            host: s.request.src_host,
            peer_host: s.request.dst_host,
            peer_site: peer,
            class,
            source: s.source,
            key,
            reference: (s.source == KeySource::Pool)
                .then_some(s.reference)
                .flatten(),
            refresh: s.refresh,
        });
    }

    fn on_key_confirm(&mut self, now: f64, id: SessionId) {
        let Some(s) = self.sessions.get(&id).cloned() else {
            return;
        };
        if s.phase != Phase::Negotiating {
            return;
        }
        let peer = s.request.remote_site;
        match (s.source, s.reference) {
            (KeySource::Pool, Some(r)) => {
                let replica = self.replicas.get_mut(&peer).expect("replica");
                if !replica.holds(&r) {
                    self.retry(now, id, true);
                    return;
                }
                replica.confirm(&r);
                let key = s.key.clone().expect("pool key read at allocation");
                self.complete(now, id, key);
            }
            _ => {
                let Some(key) = s.key.clone() else {
                    return;
                };
                self.complete(now, id, key);
            }
        }
    }

    fn on_token_confirm(&mut self, now: f64, from: SiteId, t: &TokenConfirm) -> bool {
        let Some(s) = self.sessions.get(&t.session_id).cloned() else {
            return true;
        };
        if s.phase != Phase::Negotiating {
            return true;
        }
        if s.source != KeySource::Deferred {
            // Leader-originated token: the follower resolved our selection.
            self.on_key_confirm(now, t.session_id);
            return true;
        }
        let replica = self.replicas.get_mut(&from).expect("replica");
        let info = match replica.keyring().open(&t.packet) {
            Ok(info) if info.reference.session_id == t.session_id => info,
            _ => {
                self.stats.mac_invalid += 1;
                self.event(KmsEvent::MacRejected { peer: from });
                self.retry(now, t.session_id, false);
                return true;
            }
        };
        let key = match info.source {
            KeySource::Pool => {
                let r = info.reference;
                if r.generation > replica.pool().generation()
                    || r.offset + r.length > replica.pool().end_offset()
                {
                    return false;
                }
                match replica.resolve(&r) {
                    Ok(_) => {
                        let key = replica.read(&r).expect("just resolved");
                        replica.confirm(&r);
                        key
                    }
                    Err(_) => {
                        self.retry(now, t.session_id, true);
                        return true;
                    }
                }
            }
            other => match self.derive_key(from, &info, t.packet.key_epoch) {
                Some(k) => {
                    if other == KeySource::Expanded {
                        self.stats.fallbacks_by_class[2] += 1;
                        self.event(KmsEvent::Fallback {
                            session: t.session_id,
                            class: 2,
                        });
                    }
                    k
                }
                None => {
                    self.retry(now, t.session_id, false);
                    return true;
                }
            },
        };
        let s = self.sessions.get_mut(&t.session_id).expect("session");
        s.source = info.source;
        s.reference = Some(info.reference);
        s.packet = Some(t.packet.clone());
        self.complete(now, t.session_id, key);
        true
    }

    fn on_error(&mut self, now: f64, from: SiteId, e: ErrorFrame) {
        let Some(id) = e.session_id else {
            return;
        };
        let Some(s) = self.sessions.get(&id) else {
            return;
        };
        if s.phase != Phase::Negotiating || s.request.remote_site != from {
            return;
        }
        match e.code {
            ErrorCode::RaceConflict => self.retry(now, id, true),
            ErrorCode::PolicyDenied => self.fail(id, KmsError::PolicyDenied),
            ErrorCode::InsufficientMaterial => {
                if let KeySource::HostKey { .. } = s.source {
                    let key = (s.request.src_host, from);
                    self.host_keys.remove(&key);
                    self.retry(now, id, false);
                } else {
                    // Token request the leader could not serve yet.
                    self.block(now, id);
                }
            }
            _ => self.retry(now, id, false),
        }
    }

    // ---- responder side ---------------------------------------------------

    fn reply_error(&mut self, to: SiteId, pool_id: PoolId, session: SessionId, code: ErrorCode) {
        self.send(
            to,
            Frame::Error(ErrorFrame {
                pool_id,
                code,
                session_id: Some(session),
                expected_seq: None,
            }),
        );
    }

    /// Returns false when the selection references pool state this replica
    /// has not caught up with yet; the caller retries later.
    fn on_key_neg(&mut self, now: f64, from: SiteId, neg: &KeyNeg) -> bool {
        let Some(replica) = self.replicas.get_mut(&from) else {
            return true;
        };
        let info = match replica.keyring().open(&neg.packet) {
            Ok(info)
                if info.reference.session_id == neg.session_id
                    && info.reference.pool_id == neg.pool_id =>
            {
                info
            }
            _ => {
                self.stats.mac_invalid += 1;
                self.event(KmsEvent::MacRejected { peer: from });
                self.reply_error(from, neg.pool_id, neg.session_id, ErrorCode::MacInvalid);
                return true;
            }
        };
        let req = RequestedParams {
            key_length_bytes: info.reference.length,
            lifetime_s: Some(neg.lifetime_s),
            payload_bytes: Some(info.reference.length),
        };
        if enforce_policy(&self.config.policies, neg.src_host, neg.dst_host, &req).is_err() {
            self.reply_error(from, neg.pool_id, neg.session_id, ErrorCode::PolicyDenied);
            return true;
        }
        let r = info.reference;
        let (key, reference, source, packet) = match info.source {
            KeySource::Pool => {
                let replica = self.replicas.get_mut(&from).expect("replica");
                if r.generation > replica.pool().generation()
                    || r.offset + r.length > replica.pool().end_offset()
                {
                    return false;
                }
                match replica.resolve(&r) {
                    Ok(_) => {}
                    Err(PoolError::StaleGeneration { .. }) => {
                        self.reply_error(
                            from,
                            neg.pool_id,
                            neg.session_id,
                            ErrorCode::StaleGeneration,
                        );
                        return true;
                    }
                    Err(_) => {
                        self.reply_error(
                            from,
                            neg.pool_id,
                            neg.session_id,
                            ErrorCode::RaceConflict,
                        );
                        return true;
                    }
                }
                let key = replica.read(&r).expect("just resolved");
                self.held.insert(r.session_id, HeldKey { reference: r });
                (key, Some(r), KeySource::Pool, neg.packet.clone())
            }
            KeySource::Deferred => {
                let replica = self.replicas.get_mut(&from).expect("replica");
                match replica.allocate(r.length, r.session_id) {
                    Ok(a) => {
                        let reference = a.reference();
                        let key = replica.read(&reference).expect("just allocated");
                        let sealed = KeySelectionInfo {
                            reference,
                            issued_at: now,
                            source: KeySource::Pool,
                        };
                        let nonce = self.rng.gen();
                        let packet = self.replicas[&from].keyring().seal(&sealed, nonce);
                        self.held.insert(r.session_id, HeldKey { reference });
                        (key, Some(reference), KeySource::Pool, packet)
                    }
                    Err(PoolError::InsufficientMaterial { .. }) if neg.class == 2 => {
                        let sealed = KeySelectionInfo {
                            reference: r,
                            issued_at: now,
                            source: KeySource::Expanded,
                        };
                        let nonce = self.rng.gen();
                        let packet = self.replicas[&from].keyring().seal(&sealed, nonce);
                        let key = self
                            .derive_key(from, &sealed, packet.key_epoch)
                            .expect("expandable");
                        (key, None, KeySource::Expanded, packet)
                    }
                    Err(_) => {
                        self.reply_error(
                            from,
                            neg.pool_id,
                            neg.session_id,
                            ErrorCode::InsufficientMaterial,
                        );
                        return true;
                    }
                }
            }
            source => match self.derive_key(from, &info, neg.packet.key_epoch) {
                Some(key) => (key, None, source, neg.packet.clone()),
                None => {
                    self.reply_error(
                        from,
                        neg.pool_id,
                        neg.session_id,
                        ErrorCode::InsufficientMaterial,
                    );
                    return true;
                }
            },
        };
        if neg.class == 1 && source == KeySource::Pool {
            self.host_key_cache.insert(neg.session_id, key.clone());
        }
        self.stats.responder_grants += 1;
        self.event(KmsEvent::Granted {
            session: neg.session_id,
            root: neg.session_id,
            role: GrantRole::Responder,
            host: neg.dst_host,
            peer_host: neg.src_host,
            peer_site: from,
            class: neg.class,
            source,
            key,
            reference,
            refresh: false,
        });
        let token_reply = neg.mode == NegotiationMode::Token;
        if token_reply {
            self.send(
                from,
                Frame::TokenConfirm(TokenConfirm {
                    pool_id: neg.pool_id,
                    session_id: neg.session_id,
                    packet,
                }),
            );
        } else {
            self.send(
                from,
                Frame::KeyConfirm(KeyConfirm {
                    pool_id: neg.pool_id,
                    session_id: neg.session_id,
                }),
            );
        }
        true
    }

    // ---- pool notices -----------------------------------------------------

    fn on_notice(&mut self, peer: SiteId, notice: SyncNotice) {
        match notice {
            SyncNotice::Voided(id) => {
                if self.held.remove(&id).is_some() {
                    self.event(KmsEvent::Revoked { session: id });
                }
                let negotiating = self.sessions.get(&id).is_some_and(|s| {
                    s.phase == Phase::Negotiating
                        && s.source == KeySource::Pool
                        && s.request.remote_site == peer
                });
                if negotiating {
                    self.retry(self.now, id, true);
                }
            }
            SyncNotice::Injected { .. } => self.unblock(self.now, peer),
            SyncNotice::Purged { .. } => {
                let lost: Vec<SessionId> = self
                    .held
                    .iter()
                    .filter(|(_, h)| h.reference.pool_id == PoolId::for_pair(self.site, peer))
                    .map(|(id, _)| *id)
                    .collect();
                for id in lost {
                    self.held.remove(&id);
                    self.event(KmsEvent::Revoked { session: id });
                }
            }
            SyncNotice::KeySwitched { .. } | SyncNotice::RefreshFailed { .. } => {}
        }
    }

    /// Drops a responder-held reservation once the originator's Confirm or
    /// Abort has consumed it.
    pub fn gc(&mut self) {
        let site = self.site;
        let replicas = &self.replicas;
        self.held.retain(|_, h| {
            let (a, b) = h.reference.pool_id.sites();
            let peer = if a == site { b } else { a };
            replicas.get(&peer).is_some_and(|r| r.holds(&h.reference))
        });
        self.sessions.retain(|_, s| s.phase != Phase::Done);
    }

    pub fn estimate_demand(&mut self, now: f64) -> Vec<DemandEstimate> {
        self.demand.values_mut().map(|d| d.estimate(now)).collect()
    }
}
