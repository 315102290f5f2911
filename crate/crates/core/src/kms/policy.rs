//! Security policies and their enforcement.

use serde::{Deserialize, Serialize};

use super::KmsError;
use crate::ids::HostId;

pub const DEFAULT_CLASS: u8 = 4;
pub const DEFAULT_MIN_KEY_BYTES: u64 = 32;
pub const DEFAULT_MAX_LIFETIME_S: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelayTactics {
    DirectOnly,
    SinglePath { max_hops: u32 },
    MultiPath { path_count: u32, max_hops: u32 },
}

impl RelayTactics {
    pub fn max_hops(&self) -> Option<u32> {
        match self {
            RelayTactics::DirectOnly => Some(1),
            RelayTactics::SinglePath { max_hops } | RelayTactics::MultiPath { max_hops, .. } => {
                Some(*max_hops)
            }
        }
    }

    pub fn path_count(&self) -> u32 {
        match self {
            RelayTactics::MultiPath { path_count, .. } => *path_count,
            _ => 1,
        }
    }

    /// Rejects a generation request the topology cannot serve under this
    /// tactic: `direct_link` says whether the two sites share a quantum link.
    pub fn check(&self, direct_link: bool) -> Result<(), KmsError> {
        match self {
            RelayTactics::DirectOnly if !direct_link => Err(KmsError::PolicyDenied),
            _ => Ok(()),
        }
    }
}

impl Default for RelayTactics {
    fn default() -> Self {
        RelayTactics::SinglePath { max_hops: 8 }
    }
}

/// Host-pair predicate. `None` matches any host.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRule {
    #[serde(default)]
    pub src_hosts: Option<Vec<HostId>>,
    #[serde(default)]
    pub dst_hosts: Option<Vec<HostId>>,
    #[serde(default)]
    pub deny: bool,
}

impl PeerRule {
    pub fn matches(&self, src: HostId, dst: HostId) -> bool {
        let hit =
            |set: &Option<Vec<HostId>>, h: HostId| set.as_ref().is_none_or(|s| s.contains(&h));
        hit(&self.src_hosts, src) && hit(&self.dst_hosts, dst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityPolicy {
    pub class: u8,
    pub min_key_length_bytes: u64,
    pub max_lifetime_s: f64,
    /// Classes 4 and 5 only; defaults to the lifetime.
    #[serde(default)]
    pub refresh_interval_s: Option<f64>,
    #[serde(default)]
    pub relay_tactics: RelayTactics,
    #[serde(default)]
    pub allowed_peers: PeerRule,
}

impl Default for SecurityPolicy {
    fn default() -> Self {
        SecurityPolicy {
            class: DEFAULT_CLASS,
            min_key_length_bytes: DEFAULT_MIN_KEY_BYTES,
            max_lifetime_s: DEFAULT_MAX_LIFETIME_S,
            refresh_interval_s: None,
            relay_tactics: RelayTactics::default(),
            allowed_peers: PeerRule::default(),
        }
    }
}

/// Ordered rules; the first whose peer predicate matches wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyDb {
    pub rules: Vec<SecurityPolicy>,
}

impl PolicyDb {
    pub fn lookup(&self, src: HostId, dst: HostId) -> Option<&SecurityPolicy> {
        self.rules
            .iter()
            .find(|r| r.allowed_peers.matches(src, dst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RequestedParams {
    pub key_length_bytes: u64,
    #[serde(default)]
    pub lifetime_s: Option<f64>,
    /// Message size for one-time-pad use.
    #[serde(default)]
    pub payload_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub class: u8,
    pub key_length_bytes: u64,
    pub lifetime_s: f64,
    pub refresh_interval_s: Option<f64>,
    pub tactics: RelayTactics,
}

pub fn enforce_policy(
    db: &PolicyDb,
    src: HostId,
    dst: HostId,
    requested: &RequestedParams,
) -> Result<EffectiveParams, KmsError> {
    let default = SecurityPolicy::default();
    let policy = db.lookup(src, dst).unwrap_or(&default);
    if policy.allowed_peers.deny || policy.class > 5 {
        return Err(KmsError::PolicyDenied);
    }
    let lifetime_s = requested
        .lifetime_s
        .map_or(policy.max_lifetime_s, |l| l.min(policy.max_lifetime_s));
    let key_length_bytes = if policy.class == 5 {
        requested
            .payload_bytes
            .unwrap_or(requested.key_length_bytes)
            .max(1)
    } else {
        requested.key_length_bytes.max(policy.min_key_length_bytes)
    };
    let refresh_interval_s = match policy.class {
        4 | 5 => Some(policy.refresh_interval_s.unwrap_or(lifetime_s)),
        _ => None,
    };
    Ok(EffectiveParams {
        class: policy.class,
        key_length_bytes,
        lifetime_s,
        refresh_interval_s,
        tactics: policy.relay_tactics,
    })
}
