//! Identifiers shared by every layer of the stack.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A site. Each site runs one trusted node, so node and site share the id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub u16);

pub type NodeId = SiteId;

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u32);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}", self.0)
    }
}

/// Globally unique session identifier, drawn from a seeded RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Identifier of the mirrored pool shared by a pair of sites.
///
/// Encoded as `lo * 100 + hi` so it fits the four-digit PSK hint field for
/// networks of up to 100 sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoolId(pub u32);

impl PoolId {
    pub fn for_pair(a: SiteId, b: SiteId) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        PoolId(u32::from(lo.0) * 100 + u32::from(hi.0))
    }

    pub fn sites(self) -> (SiteId, SiteId) {
        (SiteId((self.0 / 100) as u16), SiteId((self.0 % 100) as u16))
    }

    /// The lower site id of the pair drives injection and layout changes.
    pub fn leader(self) -> SiteId {
        self.sites().0
    }
}

impl fmt::Display for PoolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.sites();
        write!(f, "{a}-{b}")
    }
}

/// An ordered (source, destination) key-generation demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Commodity {
    pub src: SiteId,
    pub dst: SiteId,
}

impl Commodity {
    pub fn new(src: SiteId, dst: SiteId) -> Self {
        Commodity { src, dst }
    }

    pub fn pool_id(self) -> PoolId {
        PoolId::for_pair(self.src, self.dst)
    }
}

impl fmt::Display for Commodity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

/// An undirected quantum link, stored with the lower endpoint first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId {
    pub a: SiteId,
    pub b: SiteId,
}

impl LinkId {
    pub fn new(x: SiteId, y: SiteId) -> Self {
        if x <= y {
            LinkId { a: x, b: y }
        } else {
            LinkId { a: y, b: x }
        }
    }

    /// The endpoint that runs the link's scheduler.
    pub fn owner(self) -> SiteId {
        self.a
    }

    pub fn other(self, end: SiteId) -> SiteId {
        if end == self.a {
            self.b
        } else {
            self.a
        }
    }

    pub fn touches(self, node: SiteId) -> bool {
        self.a == node || self.b == node
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

/// One routed key-generation flow: a commodity pinned to a concrete path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub commodity: Commodity,
    pub path: Vec<SiteId>,
}

impl FlowKey {
    pub fn new(commodity: Commodity, path: Vec<SiteId>) -> Self {
        debug_assert_eq!(path.first(), Some(&commodity.src));
        debug_assert_eq!(path.last(), Some(&commodity.dst));
        FlowKey { commodity, path }
    }

    pub fn is_direct(&self) -> bool {
        self.path.len() == 2
    }

    pub fn links(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.path.windows(2).map(|w| LinkId::new(w[0], w[1]))
    }

    pub fn position(&self, node: SiteId) -> Option<usize> {
        self.path.iter().position(|n| *n == node)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hops: Vec<String> = self.path.iter().map(|n| n.to_string()).collect();
        write!(f, "{}", hops.join(">"))
    }
}
