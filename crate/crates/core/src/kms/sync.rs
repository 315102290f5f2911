//! One site's replica of a mirrored pool and the peer synchronization
//! protocol that keeps it equal to the other site's.
//!
//! Every pool mutation is an event with a per-direction sequence number.
//! Events are applied in order; a gap buffers later events and asks the peer
//! to retransmit. Digests are only compared when both sides have applied
//! exactly the same event set, and a mismatch purges both replicas.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use sha2::{Digest, Sha256};

use super::selection::{InterSiteKey, KeyRing};
use super::wire::{
    DigestFrame, ErrorCode, ErrorFrame, Frame, MaterialId, PoolEvent, PoolEventKind,
};
use crate::ids::{PoolId, SessionId, SiteId};
use crate::keypool::{
    KeyAllocation, KeyReference, PoolConfig, PoolEnd, PoolError, QuantumKeyPool,
    ReservationOutcome, SegmentState, Window,
};

pub const DIGEST_EVERY_EVENTS: u64 = 16;
pub const DIGEST_PERIOD_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leader,
    Follower,
}

/// Things the owning KMS has to react to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncNotice {
    /// The session's reservation lost a race and its bytes are gone.
    Voided(SessionId),
    Injected {
        bytes: u64,
    },
    Purged {
        generation: u32,
    },
    KeySwitched {
        epoch: u32,
    },
    RefreshFailed {
        epoch: u32,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncStats {
    pub events_sent: u64,
    pub events_applied: u64,
    pub retransmitted: u64,
    pub gaps_reported: u64,
    pub digests_matched: u64,
    pub digest_mismatches: u64,
    pub purges: u64,
    pub missing_material: u64,
}

#[derive(Debug, Clone)]
pub struct PoolReplica {
    local: SiteId,
    peer: SiteId,
    role: Role,
    pool: QuantumKeyPool,
    keyring: KeyRing,
    out_seq: u64,
    out_log: VecDeque<PoolEvent>,
    in_applied: u64,
    in_buffer: BTreeMap<u64, PoolEvent>,
    since_digest: u64,
    next_digest_at: f64,
    staged: BTreeMap<MaterialId, Vec<u8>>,
    peer_ready: BTreeSet<MaterialId>,
    ready: VecDeque<MaterialId>,
    outbox: Vec<Frame>,
    notices: Vec<SyncNotice>,
    stats: SyncStats,
}

/// Key derived from drained reserved-region bytes.
pub fn intersite_key_from_region(epoch: u32, region_bytes: &[u8]) -> InterSiteKey {
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"qkdnet-isk-v1")
        .chain_update(region_bytes)
        .finalize()
        .into();
    InterSiteKey::new(epoch, key)
}

fn key_check(key: &InterSiteKey) -> u64 {
    let h: [u8; 32] = Sha256::new()
        .chain_update(b"qkdnet-kcv")
        .chain_update(key.epoch.to_be_bytes())
        .chain_update(key.bytes())
        .finalize()
        .into();
    u64::from_be_bytes(h[..8].try_into().expect("8 bytes"))
}

impl PoolReplica {
    pub fn new(local: SiteId, peer: SiteId, config: PoolConfig, initial_key: InterSiteKey) -> Self {
        let pool_id = PoolId::for_pair(local, peer);
        let role = if pool_id.leader() == local {
            Role::Leader
        } else {
            Role::Follower
        };
        PoolReplica {
            local,
            peer,
            role,
            pool: QuantumKeyPool::new(pool_id, config),
            keyring: KeyRing::new(initial_key),
            out_seq: 0,
            out_log: VecDeque::new(),
            in_applied: 0,
            in_buffer: BTreeMap::new(),
            since_digest: 0,
            next_digest_at: DIGEST_PERIOD_S,
            staged: BTreeMap::new(),
            peer_ready: BTreeSet::new(),
            ready: VecDeque::new(),
            outbox: Vec::new(),
            notices: Vec::new(),
            stats: SyncStats::default(),
        }
    }

    pub fn pool_id(&self) -> PoolId {
        self.pool.id()
    }

    pub fn local(&self) -> SiteId {
        self.local
    }

    pub fn peer(&self) -> SiteId {
        self.peer
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn pool(&self) -> &QuantumKeyPool {
        &self.pool
    }

    /// Direct access for fault injection in tests; bypasses the protocol.
    pub fn pool_mut(&mut self) -> &mut QuantumKeyPool {
        &mut self.pool
    }

    pub fn keyring(&self) -> &KeyRing {
        &self.keyring
    }

    pub fn stats(&self) -> &SyncStats {
        &self.stats
    }

    pub fn staged_bytes(&self) -> u64 {
        self.staged.values().map(|v| v.len() as u64).sum()
    }

    pub fn take_outbox(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_notices(&mut self) -> Vec<SyncNotice> {
        std::mem::take(&mut self.notices)
    }

    /// True when nothing is outstanding in either direction as far as this
    /// side can tell.
    pub fn quiescent(&self) -> bool {
        self.in_buffer.is_empty()
    }

    pub fn out_seq(&self) -> u64 {
        self.out_seq
    }

    pub fn in_applied(&self) -> u64 {
        self.in_applied
    }

    fn emit(&mut self, kind: PoolEventKind) {
        self.out_seq += 1;
        let event = PoolEvent {
            pool_id: self.pool.id(),
            seq: self.out_seq,
            generation: self.pool.generation(),
            kind,
        };
        self.out_log.push_back(event.clone());
        self.outbox.push(Frame::PoolEvent(event));
        self.stats.events_sent += 1;
        self.since_digest += 1;
        if self.since_digest >= DIGEST_EVERY_EVENTS {
            self.send_digest();
        }
    }

    pub fn digest_frame(&self) -> DigestFrame {
        DigestFrame {
            pool_id: self.pool.id(),
            sent: self.out_seq,
            applied: self.in_applied,
            digest: self.pool.digest(),
        }
    }

    pub fn send_digest(&mut self) {
        self.since_digest = 0;
        let frame = self.digest_frame();
        self.outbox.push(Frame::Digest(frame));
    }

    /// Periodic work: the digest timer.
    pub fn tick(&mut self, now: f64) {
        if now >= self.next_digest_at {
            self.send_digest();
            while self.next_digest_at <= now {
                self.next_digest_at += DIGEST_PERIOD_S;
            }
        }
    }

    // ---- local operations -------------------------------------------------

    pub fn allocate(
        &mut self,
        length: u64,
        session: SessionId,
    ) -> Result<KeyAllocation, PoolError> {
        let end = match self.role {
            Role::Leader => PoolEnd::Begin,
            Role::Follower => PoolEnd::End,
        };
        let allocation = self.pool.allocate(length, end, session)?;
        self.emit(PoolEventKind::Reserve {
            reference: allocation.reference(),
        });
        self.after_mutation();
        Ok(allocation)
    }

    /// Reserves the bytes of a remote selection. The originator's own
    /// Reserve event covers the peer, so nothing is emitted.
    pub fn resolve(&mut self, reference: &KeyReference) -> Result<KeyAllocation, PoolError> {
        self.pool.resolve(reference)
    }

    pub fn read(&self, reference: &KeyReference) -> Option<Vec<u8>> {
        if !self.holds(reference) {
            return None;
        }
        self.pool.read(reference.offset, reference.length)
    }

    /// Whether `reference` is still reserved for its session on this replica.
    pub fn holds(&self, reference: &KeyReference) -> bool {
        reference.generation == self.pool.generation()
            && self.pool.segments().iter().any(|s| {
                s.state == SegmentState::Reserved
                    && s.session == Some(reference.session_id)
                    && s.offset == reference.offset
                    && s.length == reference.length
            })
    }

    pub fn confirm(&mut self, reference: &KeyReference) {
        self.finish(reference, true);
    }

    pub fn abort(&mut self, reference: &KeyReference) {
        self.finish(reference, false);
    }

    fn finish(&mut self, reference: &KeyReference, confirm: bool) {
        if reference.generation != self.pool.generation() {
            return;
        }
        let voided = self.pool.consume_for(
            Some(reference.session_id),
            reference.offset,
            reference.length,
        );
        self.notices
            .extend(voided.into_iter().map(SyncNotice::Voided));
        let reference = *reference;
        self.emit(if confirm {
            PoolEventKind::Confirm { reference }
        } else {
            PoolEventKind::Abort { reference }
        });
        self.after_mutation();
    }

    /// Leader only: drains the reserved region into the next inter-site key.
    /// The key becomes active once the follower acknowledges it.
    pub fn start_refresh(&mut self) -> Result<u32, PoolError> {
        if self.role != Role::Leader {
            return Err(PoolError::InsufficientMaterial {
                requested: self.pool.config().reserved_region_bytes,
                available: 0,
            });
        }
        let (region, bytes) = self.pool.take_reserved_region()?;
        let epoch = self.keyring.next_epoch();
        let key = intersite_key_from_region(epoch, &bytes);
        let check = key_check(&key);
        self.keyring.propose(key);
        self.emit(PoolEventKind::RefreshKey {
            epoch,
            region,
            check,
        });
        self.after_mutation();
        Ok(epoch)
    }

    /// Hands QNL-delivered material to the replica. The follower announces
    /// it; the leader injects once both ends hold it.
    pub fn stage(&mut self, material: MaterialId, bytes: Vec<u8>) {
        let length = bytes.len() as u64;
        if length == 0 {
            return;
        }
        self.staged.insert(material, bytes);
        match self.role {
            Role::Follower => self.emit(PoolEventKind::Delivered { material, length }),
            Role::Leader => {
                if self.peer_ready.remove(&material) {
                    self.ready.push_back(material);
                    self.try_inject();
                }
            }
        }
    }

    /// Drops staged material that will never be injected.
    pub fn discard(&mut self, material: MaterialId) {
        if self.staged.remove(&material).is_some() {
            self.emit(PoolEventKind::Discard { material });
        }
    }

    pub fn purge(&mut self) {
        self.pool.purge_all();
        self.reset_after_purge();
        let generation = self.pool.generation();
        self.emit(PoolEventKind::Purge { generation });
        self.stats.purges += 1;
        self.notices.push(SyncNotice::Purged { generation });
    }

    fn reset_after_purge(&mut self) {
        self.staged.clear();
        self.peer_ready.clear();
        self.ready.clear();
    }

    fn try_inject(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let mut injected = false;
        while let Some(material) = self.ready.front().copied() {
            let Some(bytes) = self.staged.get(&material) else {
                self.ready.pop_front();
                continue;
            };
            match self.pool.inject(bytes) {
                Ok(_) => {
                    let length = bytes.len() as u64;
                    self.staged.remove(&material);
                    self.ready.pop_front();
                    self.emit(PoolEventKind::Inject { material, length });
                    self.notices.push(SyncNotice::Injected { bytes: length });
                    injected = true;
                }
                Err(_) => break,
            }
        }
        if injected {
            self.plan_layout();
        }
    }

    fn plan_layout(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        if let Some(layout) = self.pool.plan_layout() {
            self.pool.set_layout(layout);
            self.emit(PoolEventKind::SetLayout { layout });
        }
    }

    fn after_mutation(&mut self) {
        self.plan_layout();
        self.try_inject();
    }

    // ---- peer input -------------------------------------------------------

    pub fn on_frame(&mut self, frame: Frame) {
        match frame {
            Frame::PoolEvent(event) => self.on_event(event),
            Frame::Digest(digest) => self.on_digest(&digest),
            Frame::Error(ErrorFrame {
                code: ErrorCode::SequenceGap,
                expected_seq: Some(from),
                ..
            }) => self.retransmit_from(from),
            _ => {}
        }
    }

    pub fn on_event(&mut self, event: PoolEvent) {
        if event.seq <= self.in_applied {
            return;
        }
        if event.seq > self.in_applied + 1 {
            let first_gap = !self.in_buffer.contains_key(&event.seq) && self.in_buffer.is_empty();
            self.in_buffer.insert(event.seq, event);
            if first_gap {
                self.request_gap();
            }
            return;
        }
        self.apply(event);
        while let Some(next) = self.in_buffer.remove(&(self.in_applied + 1)) {
            self.apply(next);
        }
        let applied = self.in_applied;
        self.in_buffer.retain(|seq, _| *seq > applied);
        if !self.in_buffer.is_empty() {
            self.request_gap();
        }
        self.after_mutation();
    }

    fn request_gap(&mut self) {
        self.stats.gaps_reported += 1;
        self.outbox.push(Frame::Error(ErrorFrame {
            pool_id: self.pool.id(),
            code: ErrorCode::SequenceGap,
            session_id: None,
            expected_seq: Some(self.in_applied + 1),
        }));
    }

    fn retransmit_from(&mut self, from: u64) {
        for event in self.out_log.iter().filter(|e| e.seq >= from) {
            self.outbox.push(Frame::PoolEvent(event.clone()));
            self.stats.retransmitted += 1;
        }
    }

    pub fn on_digest(&mut self, frame: &DigestFrame) {
        while self.out_log.front().is_some_and(|e| e.seq <= frame.applied) {
            self.out_log.pop_front();
        }
        if frame.sent > self.in_applied {
            self.request_gap();
            return;
        }
        let comparable = frame.sent == self.in_applied
            && frame.applied == self.out_seq
            && frame.digest.generation == self.pool.generation();
        if !comparable {
            return;
        }
        if frame.digest == self.pool.digest() {
            self.stats.digests_matched += 1;
        } else {
            self.stats.digest_mismatches += 1;
            self.purge();
        }
    }

    fn apply(&mut self, event: PoolEvent) {
        self.in_applied = event.seq;
        self.stats.events_applied += 1;
        let current = self.pool.generation();
        let stale = event.generation < current;
        match event.kind {
            PoolEventKind::Purge { generation } => {
                if self.pool.purge_to(generation) {
                    self.reset_after_purge();
                    self.stats.purges += 1;
                    self.notices.push(SyncNotice::Purged { generation });
                }
            }
            PoolEventKind::RefreshAck { epoch, ok } => {
                if ok && self.keyring.promote(epoch) {
                    self.notices.push(SyncNotice::KeySwitched { epoch });
                } else if !ok {
                    self.keyring.drop_pending(epoch);
                    self.notices.push(SyncNotice::RefreshFailed { epoch });
                }
            }
            PoolEventKind::RefreshKey {
                epoch,
                region,
                check,
            } => {
                let ok = !stale && self.apply_refresh(epoch, region, check);
                self.emit(PoolEventKind::RefreshAck { epoch, ok });
            }
            _ if stale => {}
            PoolEventKind::Inject { material, length } => {
                if self.role == Role::Follower {
                    let mut bytes = self.staged.remove(&material).unwrap_or_else(|| {
                        self.stats.missing_material += 1;
                        Vec::new()
                    });
                    bytes.resize(length as usize, 0);
                    let _ = self.pool.inject_mirror(&bytes);
                    self.notices.push(SyncNotice::Injected { bytes: length });
                }
            }
            PoolEventKind::Reserve { reference } => {
                if let Ok(ReservationOutcome::Conflict(losers)) =
                    self.pool.apply_reservation(&reference)
                {
                    self.notices
                        .extend(losers.into_iter().map(SyncNotice::Voided));
                }
            }
            PoolEventKind::Confirm { reference } | PoolEventKind::Abort { reference } => {
                let voided = self.pool.consume_for(
                    Some(reference.session_id),
                    reference.offset,
                    reference.length,
                );
                self.notices
                    .extend(voided.into_iter().map(SyncNotice::Voided));
            }
            PoolEventKind::SetLayout { layout } => self.pool.set_layout(layout),
            PoolEventKind::Delivered { material, .. } => {
                if self.role == Role::Leader {
                    if self.staged.contains_key(&material) {
                        self.ready.push_back(material);
                    } else {
                        self.peer_ready.insert(material);
                    }
                }
            }
            PoolEventKind::Discard { material } => {
                self.peer_ready.remove(&material);
                self.ready.retain(|m| *m != material);
                self.staged.remove(&material);
            }
        }
    }

    fn apply_refresh(&mut self, epoch: u32, region: Window, check: u64) -> bool {
        let bytes = self.pool.read(region.offset, region.length);
        let usable = (region.offset..region.end())
            .all(|o| matches!(self.pool.state_at(o), Some((SegmentState::Available, _))));
        let voided = self.pool.consume_for(None, region.offset, region.length);
        self.notices
            .extend(voided.into_iter().map(SyncNotice::Voided));
        let Some(bytes) = bytes.filter(|_| usable) else {
            return false;
        };
        let key = intersite_key_from_region(epoch, &bytes);
        if key_check(&key) != check {
            return false;
        }
        self.keyring.switch_to(key);
        self.notices.push(SyncNotice::KeySwitched { epoch });
        true
    }
}
