//! Key management service.

pub mod demand;
pub mod expand;
pub mod policy;
pub mod selection;
pub mod service;
pub mod sync;
pub mod wire;

use thiserror::Error;

use crate::ids::{PoolId, SessionId};
use crate::keypool::PoolError;

pub use demand::{DemandEstimate, DemandEstimator, GenerationMode};
pub use expand::{combine_hybrid, derive_expanded_key};
pub use policy::{
    enforce_policy, EffectiveParams, PolicyDb, RelayTactics, RequestedParams, SecurityPolicy,
};
pub use selection::{
    decode_psk_hint, encode_psk_hint, InterSiteKey, KeyRing, KeySelectionInfo, KeySource,
    SealedSelectionPacket,
};
pub use service::{
    bootstrap_key, GrantRole, GrantToken, KeyGrant, KeyRequest, Kms, KmsConfig, KmsEvent,
    KmsOutput, KmsStats, KmsTimer,
};
pub use wire::{Frame, MaterialId, NegotiationMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KmsError {
    #[error("policy denies the request")]
    PolicyDenied,
    #[error("insufficient key material")]
    InsufficientMaterial,
    #[error("selection packet failed authentication")]
    MacInvalid,
    #[error("race conflict for session {0}")]
    RaceConflict(SessionId),
    #[error("stale pool generation")]
    StaleGeneration,
    #[error("token expired")]
    TokenExpired,
    #[error("remote side has not confirmed")]
    RemoteUnconfirmed,
    #[error("empty seed")]
    EmptySeed,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed psk hint")]
    MalformedHint,
    #[error("field does not fit the psk hint layout")]
    HintOverflow,
    #[error("no pool {0}")]
    UnknownPool(PoolId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}
