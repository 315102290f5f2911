//! The quantum key pool: a pairwise-mirrored store of QKD key bytes.
//!
//! Every byte moves through `Available -> Reserved -> Consumed` (or straight
//! to `Consumed` on purge or abort) and never back. Both sites of a pair hold
//! a replica; replicas converge because every mutation is either performed
//! by one designated side (injection, layout) or is commutative (reservation,
//! consumption). Consumed bytes are zeroized and the consumed prefix is
//! dropped, so offsets are logical and monotone within a generation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{PoolId, SessionId};

pub const DEFAULT_WORKING_SET_BYTES: u64 = 4096;
pub const DEFAULT_RESERVED_REGION_BYTES: u64 = 32;
pub const DEFAULT_ADVANCE_THRESHOLD: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("pool full: {requested} bytes requested, {free} free")]
    PoolFull { requested: u64, free: u64 },
    #[error("insufficient material: {requested} bytes requested, {available} available")]
    InsufficientMaterial { requested: u64, available: u64 },
    #[error("race conflict over [{offset}, {}) held by {holder:?}", offset + length)]
    RaceConflict {
        offset: u64,
        length: u64,
        holder: Option<SessionId>,
    },
    #[error("stale generation: pool is at {current}, selection carries {found}")]
    StaleGeneration { current: u32, found: u32 },
    #[error("unknown allocation for session {0}")]
    UnknownAllocation(SessionId),
    #[error("selection for pool {found} presented to pool {expected}")]
    PoolMismatch { expected: PoolId, found: PoolId },
    #[error("range [{offset}, {}) is beyond injected material", offset + length)]
    OutOfRange { offset: u64, length: u64 },
    #[error("zero-length request")]
    InvalidLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentState {
    Available,
    Reserved,
    Consumed,
}

impl SegmentState {
    fn tag(self) -> u8 {
        match self {
            SegmentState::Available => 0,
            SegmentState::Reserved => 1,
            SegmentState::Consumed => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: u64,
    pub length: u64,
    pub state: SegmentState,
    pub session: Option<SessionId>,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// Offset of the segment created by an injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolEnd {
    Begin,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub offset: u64,
    pub length: u64,
}

impl Window {
    pub fn new(offset: u64, length: u64) -> Self {
        Window { offset, length }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    pub fn overlaps(&self, offset: u64, length: u64) -> bool {
        offset < self.end() && self.offset < offset + length
    }
}

/// A compact pointer to key bytes in a pool, as carried in key selection info.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyReference {
    pub pool_id: PoolId,
    pub generation: u32,
    pub offset: u64,
    pub length: u64,
    pub session_id: SessionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyAllocation {
    pub pool_id: PoolId,
    pub generation: u32,
    pub offset: u64,
    pub length: u64,
    pub session_id: SessionId,
    /// End the bytes were taken from; `None` when the allocation mirrors a
    /// remote selection.
    pub end: Option<PoolEnd>,
}

impl KeyAllocation {
    pub fn reference(&self) -> KeyReference {
        KeyReference {
            pool_id: self.pool_id,
            generation: self.generation,
            offset: self.offset,
            length: self.length,
            session_id: self.session_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolDigest {
    pub generation: u32,
    #[serde(with = "hex_bytes")]
    pub digest: [u8; 32],
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(text).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
    }
}

/// Working set and reserved region, changed only by the pool leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLayout {
    pub working_set: Window,
    pub reserved_region: Option<Window>,
}

/// Result of applying a reservation that may have been made concurrently on
/// the other side of the pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReservationOutcome {
    Reserved(KeyAllocation),
    /// The reservation collided; every listed session lost its bytes.
    Conflict(Vec<SessionId>),
    /// The reservation belongs to an earlier generation and was ignored.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub capacity_bytes: u64,
    pub working_set_bytes: u64,
    pub reserved_region_bytes: u64,
    pub advance_threshold: f64,
    /// Continuous-mode overwrite of the oldest Available bytes when full.
    pub overwrite: bool,
}

impl PoolConfig {
    pub fn with_capacity(capacity_bytes: u64) -> Self {
        PoolConfig {
            capacity_bytes,
            ..PoolConfig::default()
        }
    }
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            capacity_bytes: 1 << 20,
            working_set_bytes: DEFAULT_WORKING_SET_BYTES,
            reserved_region_bytes: DEFAULT_RESERVED_REGION_BYTES,
            advance_threshold: DEFAULT_ADVANCE_THRESHOLD,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantumKeyPool {
    id: PoolId,
    config: PoolConfig,
    generation: u32,
    base: u64,
    material: VecDeque<u8>,
    segments: Vec<Segment>,
    working_set: Window,
    reserved_region: Option<Window>,
}

impl QuantumKeyPool {
    pub fn new(id: PoolId, config: PoolConfig) -> Self {
        let working_set = Window::new(0, config.working_set_bytes);
        QuantumKeyPool {
            id,
            config,
            generation: 0,
            base: 0,
            material: VecDeque::new(),
            segments: Vec::new(),
            working_set,
            reserved_region: None,
        }
    }

    pub fn id(&self) -> PoolId {
        self.id
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn base_offset(&self) -> u64 {
        self.base
    }

    pub fn end_offset(&self) -> u64 {
        self.base + self.material.len() as u64
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn layout(&self) -> PoolLayout {
        PoolLayout {
            working_set: self.working_set,
            reserved_region: self.reserved_region,
        }
    }

    pub fn working_set(&self) -> Window {
        self.working_set
    }

    pub fn reserved_region(&self) -> Option<Window> {
        self.reserved_region
    }

    fn bytes_in(&self, state: SegmentState) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.state == state)
            .map(|s| s.length)
            .sum()
    }

    pub fn available_bytes(&self) -> u64 {
        self.bytes_in(SegmentState::Available)
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.bytes_in(SegmentState::Reserved)
    }

    /// Bytes that still occupy capacity (Available or Reserved).
    pub fn live_bytes(&self) -> u64 {
        self.available_bytes() + self.reserved_bytes()
    }

    pub fn free_bytes(&self) -> u64 {
        self.config.capacity_bytes.saturating_sub(self.live_bytes())
    }

    /// Lifecycle state of a single byte; bytes below the compacted base are
    /// Consumed.
    pub fn state_at(&self, offset: u64) -> Option<(SegmentState, Option<SessionId>)> {
        if offset < self.base {
            return Some((SegmentState::Consumed, None));
        }
        self.segments
            .iter()
            .find(|s| s.offset <= offset && offset < s.end())
            .map(|s| (s.state, s.session))
    }

    pub fn read(&self, offset: u64, length: u64) -> Option<Vec<u8>> {
        if offset < self.base || offset + length > self.end_offset() {
            return None;
        }
        let start = (offset - self.base) as usize;
        Some(
            self.material
                .range(start..start + length as usize)
                .copied()
                .collect(),
        )
    }

    /// Appends a new Available segment.
    pub fn inject(&mut self, bytes: &[u8]) -> Result<SegmentId, PoolError> {
        let len = bytes.len() as u64;
        if len == 0 {
            return Err(PoolError::InvalidLength);
        }
        if len > self.config.capacity_bytes {
            return Err(PoolError::PoolFull {
                requested: len,
                free: self.free_bytes(),
            });
        }
        if self.free_bytes() < len {
            if !self.config.overwrite {
                return Err(PoolError::PoolFull {
                    requested: len,
                    free: self.free_bytes(),
                });
            }
            self.overwrite_oldest(len - self.free_bytes())?;
        }
        let offset = self.end_offset();
        self.material.extend(bytes.iter().copied());
        self.segments.push(Segment {
            offset,
            length: len,
            state: SegmentState::Available,
            session: None,
        });
        Ok(SegmentId(offset))
    }

    /// Replays an injection the leader already admitted. Capacity is the
    /// leader's decision, so it is not rechecked here.
    pub fn inject_mirror(&mut self, bytes: &[u8]) -> Result<SegmentId, PoolError> {
        if bytes.is_empty() {
            return Err(PoolError::InvalidLength);
        }
        let offset = self.end_offset();
        self.material.extend(bytes.iter().copied());
        self.segments.push(Segment {
            offset,
            length: bytes.len() as u64,
            state: SegmentState::Available,
            session: None,
        });
        Ok(SegmentId(offset))
    }

    /// Fault injection: flips one stored bit without any state change.
    pub fn tamper_byte(&mut self, offset: u64) -> bool {
        if offset < self.base || offset >= self.end_offset() {
            return false;
        }
        self.material[(offset - self.base) as usize] ^= 0x01;
        true
    }

    /// Consumes the oldest Available bytes outside the reserved region.
    fn overwrite_oldest(&mut self, mut needed: u64) -> Result<(), PoolError> {
        let region = self.reserved_region;
        let mut victims = Vec::new();
        for seg in &self.segments {
            if needed == 0 {
                break;
            }
            if seg.state != SegmentState::Available {
                continue;
            }
            let mut cursor = seg.offset;
            while cursor < seg.end() && needed > 0 {
                let (run_start, run_end) = clip_out(cursor, seg.end(), region);
                if run_start >= run_end {
                    break;
                }
                let take = needed.min(run_end - run_start);
                victims.push((run_start, take));
                needed -= take;
                cursor = run_start + take;
            }
        }
        if needed > 0 {
            return Err(PoolError::PoolFull {
                requested: needed,
                free: self.free_bytes(),
            });
        }
        for (offset, len) in victims {
            self.set_range(offset, len, SegmentState::Consumed, None);
        }
        self.compact();
        Ok(())
    }

    /// Reserves `length` contiguous Available bytes from one end of the
    /// working set.
    pub fn allocate(
        &mut self,
        length: u64,
        end: PoolEnd,
        session_id: SessionId,
    ) -> Result<KeyAllocation, PoolError> {
        if length == 0 {
            return Err(PoolError::InvalidLength);
        }
        let lo = self.working_set.offset.max(self.base);
        let hi =
            (self.working_set.offset + self.working_set.length.max(length)).min(self.end_offset());
        let runs = self.available_runs(lo, hi);
        let found = match end {
            PoolEnd::Begin => runs.iter().find(|(s, e)| e - s >= length).map(|(s, _)| *s),
            PoolEnd::End => runs
                .iter()
                .rev()
                .find(|(s, e)| e - s >= length)
                .map(|(_, e)| e - length),
        };
        let Some(offset) = found else {
            return Err(PoolError::InsufficientMaterial {
                requested: length,
                available: runs.iter().map(|(s, e)| e - s).sum(),
            });
        };
        self.set_range(offset, length, SegmentState::Reserved, Some(session_id));
        Ok(KeyAllocation {
            pool_id: self.id,
            generation: self.generation,
            offset,
            length,
            session_id,
            end: Some(end),
        })
    }

    /// Maximal runs of allocatable bytes in `[lo, hi)`, in offset order.
    fn available_runs(&self, lo: u64, hi: u64) -> Vec<(u64, u64)> {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for seg in &self.segments {
            if seg.end() <= lo || seg.offset >= hi || seg.state != SegmentState::Available {
                continue;
            }
            let mut start = seg.offset.max(lo);
            let stop = seg.end().min(hi);
            while start < stop {
                let (s, e) = clip_out(start, stop, self.reserved_region);
                if s >= e {
                    break;
                }
                match runs.last_mut() {
                    Some(last) if last.1 == s => last.1 = e,
                    _ => runs.push((s, e)),
                }
                start = e;
            }
        }
        runs
    }

    fn check_reference(&self, reference: &KeyReference) -> Result<(), PoolError> {
        if reference.pool_id != self.id {
            return Err(PoolError::PoolMismatch {
                expected: self.id,
                found: reference.pool_id,
            });
        }
        if reference.generation != self.generation {
            return Err(PoolError::StaleGeneration {
                current: self.generation,
                found: reference.generation,
            });
        }
        if reference.length == 0 {
            return Err(PoolError::InvalidLength);
        }
        if reference.offset + reference.length > self.end_offset() {
            return Err(PoolError::OutOfRange {
                offset: reference.offset,
                length: reference.length,
            });
        }
        Ok(())
    }

    /// Reserves the bytes a remote selection points at, or returns the
    /// existing reservation if the same session already holds exactly them.
    pub fn resolve(&mut self, reference: &KeyReference) -> Result<KeyAllocation, PoolError> {
        self.check_reference(reference)?;
        let allocation = KeyAllocation {
            pool_id: self.id,
            generation: self.generation,
            offset: reference.offset,
            length: reference.length,
            session_id: reference.session_id,
            end: None,
        };
        let conflict = |holder| PoolError::RaceConflict {
            offset: reference.offset,
            length: reference.length,
            holder,
        };
        if reference.offset < self.base {
            return Err(conflict(None));
        }
        if let Some(seg) = self.reserved_segment(reference.session_id) {
            if seg.offset == reference.offset && seg.length == reference.length {
                return Ok(allocation);
            }
        }
        let overlapping = self.overlapping(reference.offset, reference.length);
        if let Some(seg) = overlapping
            .iter()
            .find(|s| s.state != SegmentState::Available)
        {
            return Err(conflict(seg.session));
        }
        self.set_range(
            reference.offset,
            reference.length,
            SegmentState::Reserved,
            Some(reference.session_id),
        );
        Ok(allocation)
    }

    /// Applies a reservation that either side may have made. Conflicting
    /// reservations consume every byte involved, so both replicas converge to
    /// the same state regardless of the order the two reservations arrive in.
    pub fn apply_reservation(
        &mut self,
        reference: &KeyReference,
    ) -> Result<ReservationOutcome, PoolError> {
        if reference.pool_id != self.id {
            return Err(PoolError::PoolMismatch {
                expected: self.id,
                found: reference.pool_id,
            });
        }
        if reference.generation != self.generation {
            return Ok(ReservationOutcome::Stale);
        }
        if reference.length == 0 {
            return Err(PoolError::InvalidLength);
        }
        if reference.offset + reference.length > self.end_offset() {
            return Err(PoolError::OutOfRange {
                offset: reference.offset,
                length: reference.length,
            });
        }
        let session = reference.session_id;
        let clean = reference.offset >= self.base
            && self
                .overlapping(reference.offset, reference.length)
                .iter()
                .all(|s| {
                    s.state == SegmentState::Available
                        || (s.state == SegmentState::Reserved && s.session == Some(session))
                });
        if clean {
            self.set_range(
                reference.offset,
                reference.length,
                SegmentState::Reserved,
                Some(session),
            );
            return Ok(ReservationOutcome::Reserved(KeyAllocation {
                pool_id: self.id,
                generation: self.generation,
                offset: reference.offset,
                length: reference.length,
                session_id: session,
                end: None,
            }));
        }
        let mut losers = self.consume_for(Some(session), reference.offset, reference.length);
        // Any other bytes this session held are void too.
        if let Some(seg) = self.reserved_segment(session) {
            let (o, l) = (seg.offset, seg.length);
            self.set_range(o, l, SegmentState::Consumed, None);
            self.compact();
        }
        losers.push(session);
        losers.sort();
        losers.dedup();
        Ok(ReservationOutcome::Conflict(losers))
    }

    /// Consumes a range regardless of its current state. Reservations held by
    /// sessions other than `owner` that touch the range are voided entirely
    /// and returned.
    pub fn consume_for(
        &mut self,
        owner: Option<SessionId>,
        offset: u64,
        length: u64,
    ) -> Vec<SessionId> {
        let start = offset.max(self.base);
        let stop = (offset + length).min(self.end_offset());
        if start >= stop {
            return Vec::new();
        }
        let mut foreign: Vec<(SessionId, u64, u64)> = self
            .overlapping(start, stop - start)
            .iter()
            .filter(|s| s.state == SegmentState::Reserved && s.session != owner)
            .filter_map(|s| s.session.map(|id| (id, s.offset, s.length)))
            .collect();
        foreign.sort();
        foreign.dedup();
        self.set_range(start, stop - start, SegmentState::Consumed, None);
        for (_, o, l) in &foreign {
            self.set_range(*o, *l, SegmentState::Consumed, None);
        }
        self.compact();
        foreign.into_iter().map(|(id, _, _)| id).collect()
    }

    fn take_reservation(&mut self, allocation: &KeyAllocation) -> Result<(), PoolError> {
        let matches = allocation.pool_id == self.id
            && allocation.generation == self.generation
            && self
                .reserved_segment(allocation.session_id)
                .is_some_and(|s| s.offset == allocation.offset && s.length == allocation.length);
        if !matches {
            return Err(PoolError::UnknownAllocation(allocation.session_id));
        }
        self.set_range(
            allocation.offset,
            allocation.length,
            SegmentState::Consumed,
            None,
        );
        self.compact();
        Ok(())
    }

    /// Final step of a grant: the bytes are purged for good.
    pub fn confirm(&mut self, allocation: &KeyAllocation) -> Result<(), PoolError> {
        self.take_reservation(allocation)
    }

    /// Aborted bytes may have been exposed in a half-finished negotiation and
    /// are never returned to Available.
    pub fn abort(&mut self, allocation: &KeyAllocation) -> Result<(), PoolError> {
        self.take_reservation(allocation)
    }

    pub fn purge_all(&mut self) -> u32 {
        self.reset_to(self.generation + 1);
        self.generation
    }

    /// Moves to `generation` if it is newer; returns whether anything changed.
    pub fn purge_to(&mut self, generation: u32) -> bool {
        if generation <= self.generation {
            return false;
        }
        self.reset_to(generation);
        true
    }

    fn reset_to(&mut self, generation: u32) {
        for byte in self.material.iter_mut() {
            *byte = 0;
        }
        self.material.clear();
        self.segments.clear();
        self.base = 0;
        self.generation = generation;
        self.working_set = Window::new(0, self.config.working_set_bytes);
        self.reserved_region = None;
    }

    /// The layout the leader would move to now, if it differs from the
    /// current one: the working set advances once the consumed share reaches
    /// the threshold, and an empty reserved region is carved from the head of
    /// the working set.
    pub fn plan_layout(&self) -> Option<PoolLayout> {
        let ws = self.working_set;
        let mut start = ws.offset;
        let consumed = self.consumed_in(ws.offset, ws.end());
        if consumed as f64 >= self.config.advance_threshold * ws.length as f64 {
            start = self.next_window_start(ws);
        }
        let mut region = self.reserved_region;
        let r = self.config.reserved_region_bytes;
        if region.is_none() && r > 0 && self.range_available(start, r) {
            region = Some(Window::new(start, r));
            start += r;
        }
        let next = PoolLayout {
            working_set: Window::new(start, ws.length),
            reserved_region: region,
        };
        (next != self.layout()).then_some(next)
    }

    /// The lowest segment boundary past the consumed prefix at which a window
    /// of the same length is consumed below the advance threshold. Small Available
    /// fragments left behind are stranded rather than pinning the window.
    fn next_window_start(&self, ws: Window) -> u64 {
        let limit = self.config.advance_threshold * ws.length as f64;
        let first = self.segments.partition_point(|s| s.end() <= ws.offset);
        let tail = &self.segments[first..];
        // below[i] = consumed bytes of tail[..i]
        let mut below = Vec::with_capacity(tail.len() + 1);
        below.push(0u64);
        for seg in tail {
            let c = if seg.state == SegmentState::Consumed {
                seg.length
            } else {
                0
            };
            below.push(below.last().copied().unwrap_or(0) + c);
        }
        // Consumed bytes from the start of `tail` up to `x`.
        let consumed_to = |x: u64| {
            let i = tail.partition_point(|s| s.end() <= x);
            let partial = tail
                .get(i)
                .filter(|s| s.state == SegmentState::Consumed && s.offset < x)
                .map_or(0, |s| x - s.offset);
            below[i] + partial
        };
        let past_prefix = tail
            .iter()
            .find(|s| s.state != SegmentState::Consumed)
            .map_or(self.end_offset(), |s| s.offset)
            .max(ws.offset);
        let candidates = std::iter::once(past_prefix).chain(
            tail.iter()
                .filter(|s| s.state == SegmentState::Consumed && s.end() > past_prefix)
                .map(|s| s.end()),
        );
        for c in candidates {
            let hi = c + ws.length;
            let consumed = consumed_to(hi) - consumed_to(c);
            if (consumed as f64) < limit {
                return c;
            }
        }
        self.end_offset().max(ws.offset)
    }

    fn consumed_in(&self, lo: u64, hi: u64) -> u64 {
        let below_base = self.base.clamp(lo, hi) - lo;
        below_base
            + self
                .segments
                .iter()
                .filter(|s| s.state == SegmentState::Consumed)
                .map(|s| s.end().min(hi).saturating_sub(s.offset.max(lo)))
                .sum::<u64>()
    }

    fn range_available(&self, offset: u64, length: u64) -> bool {
        offset >= self.base
            && offset + length <= self.end_offset()
            && self
                .overlapping(offset, length)
                .iter()
                .all(|s| s.state == SegmentState::Available)
    }

    /// Installs a leader-chosen layout. A region whose bytes are no longer
    /// all Available on this replica is dropped.
    pub fn set_layout(&mut self, layout: PoolLayout) {
        self.working_set = layout.working_set;
        self.reserved_region = layout
            .reserved_region
            .filter(|r| self.range_available(r.offset, r.length));
    }

    /// Drains the reserved region for use as the next inter-site key.
    pub fn take_reserved_region(&mut self) -> Result<(Window, Vec<u8>), PoolError> {
        let requested = self.config.reserved_region_bytes;
        let Some(region) = self.reserved_region else {
            return Err(PoolError::InsufficientMaterial {
                requested,
                available: 0,
            });
        };
        if !self.range_available(region.offset, region.length) {
            self.reserved_region = None;
            return Err(PoolError::InsufficientMaterial {
                requested,
                available: 0,
            });
        }
        let bytes = self
            .read(region.offset, region.length)
            .expect("region lies inside material");
        self.reserved_region = None;
        self.set_range(region.offset, region.length, SegmentState::Consumed, None);
        self.compact();
        Ok((region, bytes))
    }

    pub fn digest(&self) -> PoolDigest {
        let mut h = Sha256::new();
        h.update(b"qkdnet-pool-digest-v1");
        h.update(self.id.0.to_be_bytes());
        h.update(self.generation.to_be_bytes());
        h.update(self.base.to_be_bytes());
        h.update(self.end_offset().to_be_bytes());
        h.update(self.working_set.offset.to_be_bytes());
        h.update(self.working_set.length.to_be_bytes());
        match self.reserved_region {
            Some(r) => {
                h.update([1]);
                h.update(r.offset.to_be_bytes());
                h.update(r.length.to_be_bytes());
            }
            None => h.update([0]),
        }
        // Adjacent segments with equal (state, session) hash as one run, so
        // the digest depends on per-byte state and not on split history.
        let mut runs: Vec<(u64, u64, SegmentState, Option<SessionId>)> = Vec::new();
        for s in &self.segments {
            match runs.last_mut() {
                Some(r) if r.2 == s.state && r.3 == s.session && r.0 + r.1 == s.offset => {
                    r.1 += s.length
                }
                _ => runs.push((s.offset, s.length, s.state, s.session)),
            }
        }
        h.update((runs.len() as u64).to_be_bytes());
        for (offset, length, state, session) in runs {
            h.update(offset.to_be_bytes());
            h.update(length.to_be_bytes());
            h.update([state.tag()]);
            h.update(session.map_or(0, |s| s.0).to_be_bytes());
        }
        let (a, b) = self.material.as_slices();
        h.update(a);
        h.update(b);
        PoolDigest {
            generation: self.generation,
            digest: h.finalize().into(),
        }
    }

    fn reserved_segment(&self, session: SessionId) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.state == SegmentState::Reserved && s.session == Some(session))
    }

    fn overlapping(&self, offset: u64, length: u64) -> Vec<Segment> {
        let end = offset + length;
        self.segments
            .iter()
            .filter(|s| s.offset < end && offset < s.end())
            .cloned()
            .collect()
    }

    /// Index of the segment starting exactly at `offset`, splitting if needed.
    fn split_at(&mut self, offset: u64) -> usize {
        let idx = self.segments.partition_point(|s| s.end() <= offset);
        if idx == self.segments.len() {
            return idx;
        }
        let seg = &self.segments[idx];
        if seg.offset == offset {
            return idx;
        }
        let tail = Segment {
            offset,
            length: seg.end() - offset,
            state: seg.state,
            session: seg.session,
        };
        self.segments[idx].length = offset - self.segments[idx].offset;
        self.segments.insert(idx + 1, tail);
        idx + 1
    }

    /// Sets `[offset, offset+length)` to one segment in `state`. Consumed
    /// bytes are zeroized and the region drops if one of its bytes changes.
    fn set_range(
        &mut self,
        offset: u64,
        length: u64,
        state: SegmentState,
        session: Option<SessionId>,
    ) {
        let from = self.split_at(offset);
        let to = self.split_at(offset + length);
        self.segments.splice(
            from..to,
            std::iter::once(Segment {
                offset,
                length,
                state,
                session,
            }),
        );
        if state == SegmentState::Consumed {
            let start = (offset - self.base) as usize;
            for byte in self.material.range_mut(start..start + length as usize) {
                *byte = 0;
            }
            // merge with consumed neighbours
            let i = from;
            if i + 1 < self.segments.len() && self.segments[i + 1].state == SegmentState::Consumed {
                self.segments[i].length += self.segments[i + 1].length;
                self.segments.remove(i + 1);
            }
            if i > 0 && self.segments[i - 1].state == SegmentState::Consumed {
                self.segments[i - 1].length += self.segments[i].length;
                self.segments.remove(i);
            }
        }
        if let Some(region) = self.reserved_region {
            if region.overlaps(offset, length) {
                self.reserved_region = None;
            }
        }
    }

    /// Drops the leading consumed prefix.
    fn compact(&mut self) {
        let lead = self
            .segments
            .iter()
            .take_while(|s| s.state == SegmentState::Consumed)
            .count();
        if lead == 0 {
            return;
        }
        let new_base = self.segments[lead - 1].end();
        self.segments.drain(..lead);
        self.material.drain(..(new_base - self.base) as usize);
        self.base = new_base;
    }
}

/// First sub-interval of `[start, stop)` that lies outside `region`.
fn clip_out(start: u64, stop: u64, region: Option<Window>) -> (u64, u64) {
    match region {
        Some(r) if r.overlaps(start, stop - start) => {
            if start < r.offset {
                (start, r.offset)
            } else {
                (r.end().min(stop), stop)
            }
        }
        _ => (start, stop),
    }
}
