//! Key relay primitives: link key streams, per-flow temporary buffers, the
//! hop-by-hop one-time-pad envelope and multipath recombination.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FlowKey, LinkId, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("envelope for {expected} delivered to {actual}")]
    WrongNode { expected: NodeId, actual: NodeId },
    #[error("link {link} stream is short: need {needed} bytes, have {available}")]
    StreamUnderflow {
        link: LinkId,
        needed: u64,
        available: u64,
    },
    #[error("multipath parts differ in length")]
    LengthMismatch,
    #[error("multipath part {part} missing")]
    MissingPart { part: usize },
    #[error("flow {flow} needs {needed} bytes towards {peer}, has {available}")]
    InsufficientPairwiseKey {
        flow: String,
        peer: NodeId,
        needed: usize,
        available: usize,
    },
    #[error("node is not on the flow path")]
    NotOnPath,
}

/// A contiguous range of one link stream, `(offset, length)`.
pub type StreamRange = (u64, u32);

/// Raw QLL output of one link as seen from one end. Offsets count bytes since
/// the link first came up and are identical at both ends.
#[derive(Debug, Clone, Default)]
pub struct PairwiseKeyStream {
    /// Offset of `buf[0]`.
    base: u64,
    buf: VecDeque<u8>,
}

impl PairwiseKeyStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Offset one past the last byte received.
    pub fn head(&self) -> u64 {
        self.base + self.buf.len() as u64
    }

    /// Offset of the oldest byte still held; everything below was assigned
    /// or discarded.
    pub fn watermark(&self) -> u64 {
        self.base
    }

    pub fn available(&self) -> u64 {
        self.buf.len() as u64
    }

    /// Appends QLL output. A gap (bytes the link produced while this end
    /// was not listening) skips the watermark forward.
    pub fn push(&mut self, offset: u64, bytes: &[u8]) {
        if offset > self.head() {
            self.buf.clear();
            self.base = offset;
        }
        let skip = (self.head() - offset) as usize;
        if skip < bytes.len() {
            self.buf.extend(&bytes[skip..]);
        }
    }

    /// Takes the oldest `len` bytes; used by the link owner.
    pub fn take(&mut self, len: usize) -> (u64, Vec<u8>) {
        let len = len.min(self.buf.len());
        let offset = self.base;
        let out: Vec<u8> = self.buf.drain(..len).collect();
        self.base += len as u64;
        (offset, out)
    }

    /// Takes exactly `[offset, offset + len)`, dropping older bytes, which
    /// the owner skipped. Used by the non-owning end.
    pub fn take_at(&mut self, link: LinkId, offset: u64, len: u32) -> Result<Vec<u8>, RelayError> {
        let end = offset + u64::from(len);
        if offset < self.base || end > self.head() {
            return Err(RelayError::StreamUnderflow {
                link,
                needed: u64::from(len),
                available: self.head().saturating_sub(offset.max(self.base)),
            });
        }
        self.discard_before(offset);
        Ok(self.take(len as usize).1)
    }

    pub fn discard_before(&mut self, offset: u64) {
        let n = offset.saturating_sub(self.base).min(self.buf.len() as u64);
        self.buf.drain(..n as usize);
        self.base += n;
    }

    /// Keeps at most `max` unassigned bytes, dropping the oldest.
    pub fn cap(&mut self, max: u64) {
        if self.available() > max {
            let to = self.head() - max;
            self.discard_before(to);
        }
    }
}

/// Disjoint set of consumed offsets per link end. Inserting a range that
/// overlaps an earlier one counts as a reuse.
#[derive(Debug, Clone, Default)]
pub struct RangeAudit {
    ranges: BTreeMap<(LinkId, u64), u64>,
    reuses: u64,
    bytes: u64,
}

impl RangeAudit {
    pub fn record(&mut self, link: LinkId, (start, len): StreamRange) -> bool {
        let end = start + u64::from(len);
        if len == 0 {
            return true;
        }
        let before = self
            .ranges
            .range(..=(link, start))
            .next_back()
            .filter(|((l, _), _)| *l == link);
        let after = self.ranges.range((link, start)..(link, end)).next();
        if before.is_some_and(|(_, e)| *e > start) || after.is_some() {
            self.reuses += 1;
            return false;
        }
        self.bytes += u64::from(len);
        // merge with an adjacent predecessor to keep the map small
        let mut lo = start;
        if let Some((&(_, s), &e)) = before {
            if e == start {
                self.ranges.remove(&(link, s));
                lo = s;
            }
        }
        let mut hi = end;
        if let Some(e2) = self.ranges.remove(&(link, end)) {
            hi = e2;
        }
        self.ranges.insert((link, lo), hi);
        true
    }

    pub fn reuses(&self) -> u64 {
        self.reuses
    }

    pub fn consumed_bytes(&self) -> u64 {
        self.bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Direct-link commodity; handed to the KMS whole.
    Direct = 1,
    /// This node is a flow endpoint.
    Endpoint = 2,
    /// This node relays for others.
    Transit = 3,
}

pub fn category_at(node: NodeId, flow: &FlowKey) -> Category {
    if flow.is_direct() {
        Category::Direct
    } else if node == flow.commodity.src || node == flow.commodity.dst {
        Category::Endpoint
    } else {
        Category::Transit
    }
}

#[derive(Debug, Clone, Default)]
struct FlowBuffer {
    segs: VecDeque<(u64, Vec<u8>)>,
    len: usize,
}

impl FlowBuffer {
    fn remove_range(&mut self, (start, len): StreamRange) -> Option<Vec<u8>> {
        let end = start + u64::from(len);
        let i = self
            .segs
            .iter()
            .position(|(o, b)| *o <= start && end <= *o + b.len() as u64)?;
        let (o, bytes) = self.segs.remove(i).expect("index valid");
        let a = (start - o) as usize;
        let b = a + len as usize;
        let out = bytes[a..b].to_vec();
        if b < bytes.len() {
            self.segs.insert(i, (end, bytes[b..].to_vec()));
        }
        if a > 0 {
            self.segs.insert(i, (o, bytes[..a].to_vec()));
        }
        self.len -= len as usize;
        Some(out)
    }
}

/// Link key assigned to flows but not yet used, per (flow, neighbour).
#[derive(Debug, Clone, Default)]
pub struct TempKeyPools {
    node: Option<NodeId>,
    buffers: BTreeMap<(FlowKey, NodeId), FlowBuffer>,
    audit: RangeAudit,
}

impl TempKeyPools {
    pub fn new(node: NodeId) -> Self {
        TempKeyPools {
            node: Some(node),
            ..Self::default()
        }
    }

    fn link(&self, peer: NodeId) -> LinkId {
        LinkId::new(self.node.expect("pools bound to a node"), peer)
    }

    pub fn file(&mut self, flow: &FlowKey, peer: NodeId, offset: u64, bytes: Vec<u8>) {
        let b = self.buffers.entry((flow.clone(), peer)).or_default();
        b.len += bytes.len();
        b.segs.push_back((offset, bytes));
    }

    /// Records consumption that bypasses the buffers, such as direct-link
    /// material handed straight to the KMS.
    pub fn consume_direct(&mut self, peer: NodeId, range: StreamRange) -> bool {
        let link = self.link(peer);
        self.audit.record(link, range)
    }

    pub fn available(&self, flow: &FlowKey, peer: NodeId) -> usize {
        self.buffers.get(&(flow.clone(), peer)).map_or(0, |b| b.len)
    }

    pub fn category_bytes(&self, cat: Category) -> usize {
        let node = self.node.expect("pools bound to a node");
        self.buffers
            .iter()
            .filter(|((f, _), _)| category_at(node, f) == cat)
            .map(|(_, b)| b.len)
            .sum()
    }

    /// Draws the oldest `len` bytes of the flow's buffer towards `peer`.
    pub fn draw(
        &mut self,
        flow: &FlowKey,
        peer: NodeId,
        len: usize,
    ) -> Result<(Vec<u8>, Vec<StreamRange>), RelayError> {
        let available = self.available(flow, peer);
        if available < len {
            return Err(RelayError::InsufficientPairwiseKey {
                flow: flow.to_string(),
                peer,
                needed: len,
                available,
            });
        }
        let link = self.link(peer);
        let b = self
            .buffers
            .get_mut(&(flow.clone(), peer))
            .expect("checked above");
        let mut out = Vec::with_capacity(len);
        let mut ranges = Vec::new();
        while out.len() < len {
            let (o, seg) = b.segs.front_mut().expect("length tracked");
            let n = (len - out.len()).min(seg.len());
            out.extend_from_slice(&seg[..n]);
            ranges.push((*o, n as u32));
            if n == seg.len() {
                b.segs.pop_front();
            } else {
                seg.drain(..n);
                *o += n as u64;
            }
        }
        b.len -= len;
        for r in &ranges {
            self.audit.record(link, *r);
        }
        Ok((out, ranges))
    }

    /// Draws exactly the ranges the other end of the link chose. Nothing is
    /// consumed unless every range is present.
    pub fn draw_ranges(
        &mut self,
        flow: &FlowKey,
        peer: NodeId,
        ranges: &[StreamRange],
    ) -> Result<Vec<u8>, RelayError> {
        let link = self.link(peer);
        let needed: u64 = ranges.iter().map(|r| u64::from(r.1)).sum();
        let underflow = |available| RelayError::StreamUnderflow {
            link,
            needed,
            available,
        };
        let Some(b) = self.buffers.get_mut(&(flow.clone(), peer)) else {
            return Err(underflow(0));
        };
        let present = ranges.iter().all(|&(s, l)| {
            b.segs
                .iter()
                .any(|(o, seg)| *o <= s && s + u64::from(l) <= *o + seg.len() as u64)
        });
        if !present {
            return Err(underflow(b.len as u64));
        }
        let mut out = Vec::with_capacity(needed as usize);
        for r in ranges {
            out.extend(b.remove_range(*r).expect("presence checked"));
        }
        for r in ranges {
            self.audit.record(link, *r);
        }
        Ok(out)
    }

    pub fn audit(&self) -> &RangeAudit {
        &self.audit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayEnvelope {
    pub relay_id: u64,
    pub flow: FlowKey,
    /// Index in `flow.path` of the receiving node.
    pub hop: usize,
    /// Multipath set and part; a single-path relay has `parts == 1`.
    pub set: u64,
    pub part: u16,
    pub parts: u16,
    /// Where the pad lies in the stream of the link just crossed.
    pub pad: Vec<StreamRange>,
    #[serde(with = "hex")]
    pub ciphertext: Vec<u8>,
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// What the first node after the source produces for one relay: the key,
/// the ranges the source must draw to learn it, and the first envelope.
#[derive(Debug, Clone)]
pub struct Originated {
    pub key: Vec<u8>,
    pub source_ranges: Vec<StreamRange>,
    pub envelope: RelayEnvelope,
}

/// Runs at `flow.path[1]` of a flow with at least two hops. The relayed key
/// is link key shared with the source, so the source never transmits.
pub fn relay_originate(
    pools: &mut TempKeyPools,
    me: NodeId,
    flow: &FlowKey,
    len: usize,
    relay_id: u64,
    (set, part, parts): (u64, u16, u16),
) -> Result<Originated, RelayError> {
    if flow.path.len() < 3 || flow.path[1] != me {
        return Err(RelayError::NotOnPath);
    }
    let (src, next) = (flow.path[0], flow.path[2]);
    for peer in [src, next] {
        let available = pools.available(flow, peer);
        if available < len {
            return Err(RelayError::InsufficientPairwiseKey {
                flow: flow.to_string(),
                peer,
                needed: len,
                available,
            });
        }
    }
    let (key, source_ranges) = pools.draw(flow, src, len)?;
    let (pad, pad_ranges) = pools.draw(flow, next, len)?;
    Ok(Originated {
        envelope: RelayEnvelope {
            relay_id,
            flow: flow.clone(),
            hop: 2,
            set,
            part,
            parts,
            pad: pad_ranges,
            ciphertext: xor(&key, &pad),
        },
        key,
        source_ranges,
    })
}

/// Strips the pad of the link the envelope just crossed and returns the
/// plaintext key. The caller forwards with [`relay_forward`] or delivers.
pub fn relay_receive(
    pools: &mut TempKeyPools,
    me: NodeId,
    env: &RelayEnvelope,
) -> Result<Vec<u8>, RelayError> {
    let expected = *env.flow.path.get(env.hop).ok_or(RelayError::NotOnPath)?;
    if expected != me {
        return Err(RelayError::WrongNode {
            expected,
            actual: me,
        });
    }
    let prev = env.flow.path[env.hop - 1];
    let pad = pools.draw_ranges(&env.flow, prev, &env.pad)?;
    Ok(xor(&env.ciphertext, &pad))
}

/// Re-encrypts `key` for the next hop of a received envelope.
pub fn relay_forward(
    pools: &mut TempKeyPools,
    env: &RelayEnvelope,
    key: &[u8],
) -> Result<RelayEnvelope, RelayError> {
    let next = *env
        .flow
        .path
        .get(env.hop + 1)
        .ok_or(RelayError::NotOnPath)?;
    let (pad, ranges) = pools.draw(&env.flow, next, key.len())?;
    Ok(RelayEnvelope {
        hop: env.hop + 1,
        pad: ranges,
        ciphertext: xor(key, &pad),
        ..env.clone()
    })
}

/// XOR of every part. All parts must be present and equally long.
pub fn combine_multipath(parts: &[Option<Vec<u8>>]) -> Result<Vec<u8>, RelayError> {
    let mut out: Option<Vec<u8>> = None;
    for (i, p) in parts.iter().enumerate() {
        let p = p.as_ref().ok_or(RelayError::MissingPart { part: i })?;
        out = Some(match out {
            None => p.clone(),
            Some(acc) if acc.len() == p.len() => xor(&acc, p),
            Some(_) => return Err(RelayError::LengthMismatch),
        });
    }
    out.ok_or(RelayError::MissingPart { part: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{Commodity, SiteId};

    fn s(n: u16) -> SiteId {
        SiteId(n)
    }

    #[test]
    fn audit_flags_overlap_only() {
        let l = LinkId::new(s(1), s(2));
        let mut a = RangeAudit::default();
        assert!(a.record(l, (0, 10)));
        assert!(a.record(l, (10, 5)));
        assert!(a.record(l, (20, 5)));
        assert!(a.record(LinkId::new(s(1), s(3)), (0, 10)));
        assert!(!a.record(l, (14, 2)));
        assert!(!a.record(l, (0, 1)));
        assert!(!a.record(l, (18, 3)));
        assert!(a.record(l, (15, 5)));
        assert_eq!(a.reuses(), 3);
        assert_eq!(a.consumed_bytes(), 35);
    }

    #[test]
    fn stream_take_at_skips_unassigned() {
        let l = LinkId::new(s(1), s(2));
        let mut st = PairwiseKeyStream::new();
        st.push(0, &[0, 1, 2, 3, 4, 5]);
        st.push(4, &[4, 5, 6, 7]);
        assert_eq!(st.head(), 8);
        assert_eq!(st.take_at(l, 3, 2).unwrap(), vec![3, 4]);
        assert!(st.take_at(l, 2, 1).is_err());
        assert!(st.take_at(l, 6, 3).is_err());
        assert_eq!(st.watermark(), 5);
    }

    #[test]
    fn two_hop_relay_round_trip() {
        let flow = FlowKey::new(Commodity::new(s(1), s(3)), vec![s(1), s(2), s(3)]);
        let mut src = TempKeyPools::new(s(1));
        let mut mid = TempKeyPools::new(s(2));
        let mut dst = TempKeyPools::new(s(3));
        let k12: Vec<u8> = (0..32).collect();
        let k23: Vec<u8> = (100..132).collect();
        src.file(&flow, s(2), 0, k12.clone());
        mid.file(&flow, s(1), 0, k12);
        mid.file(&flow, s(3), 0, k23.clone());
        dst.file(&flow, s(2), 0, k23);
        let o = relay_originate(&mut mid, s(2), &flow, 16, 7, (0, 0, 1)).unwrap();
        let at_src = src.draw_ranges(&flow, s(2), &o.source_ranges).unwrap();
        assert_eq!(
            relay_receive(&mut mid, s(2), &o.envelope),
            Err(RelayError::WrongNode {
                expected: s(3),
                actual: s(2)
            })
        );
        let at_dst = relay_receive(&mut dst, s(3), &o.envelope).unwrap();
        assert_eq!(at_src, o.key);
        assert_eq!(at_dst, o.key);
        assert!(
            relay_receive(&mut dst, s(3), &o.envelope).is_err(),
            "pad is gone"
        );
    }

    #[test]
    fn combine_checks_parts() {
        assert_eq!(
            combine_multipath(&[Some(vec![1, 2]), Some(vec![3, 4])]).unwrap(),
            vec![2, 6]
        );
        assert_eq!(
            combine_multipath(&[Some(vec![1]), Some(vec![3, 4])]),
            Err(RelayError::LengthMismatch)
        );
        assert_eq!(
            combine_multipath(&[Some(vec![1]), None]),
            Err(RelayError::MissingPart { part: 1 })
        );
    }
}
