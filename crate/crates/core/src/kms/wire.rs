//! KMS peer frames: tagged JSON behind a 4-byte big-endian length prefix.

use serde::{Deserialize, Serialize};

use super::selection::SealedSelectionPacket;
use super::KmsError;
use crate::ids::{HostId, PoolId, SessionId};
use crate::keypool::{KeyReference, PoolDigest, PoolLayout, Window};

/// Names a batch of QNL key material that both ends of a pool receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationMode {
    Direct,
    Token,
    KmsToKms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PoolEventKind {
    /// Leader only: append the staged material named `material`.
    Inject {
        material: MaterialId,
        length: u64,
    },
    Reserve {
        reference: KeyReference,
    },
    Confirm {
        reference: KeyReference,
    },
    Abort {
        reference: KeyReference,
    },
    /// Carries the generation the sender moved to.
    Purge {
        generation: u32,
    },
    SetLayout {
        layout: PoolLayout,
    },
    /// Leader only: the region becomes inter-site key `epoch`; `check` lets
    /// the follower detect divergent region bytes.
    RefreshKey {
        epoch: u32,
        region: Window,
        check: u64,
    },
    RefreshAck {
        epoch: u32,
        ok: bool,
    },
    /// Follower only: it holds `material` and is ready for injection.
    Delivered {
        material: MaterialId,
        length: u64,
    },
    Discard {
        material: MaterialId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEvent {
    pub pool_id: PoolId,
    pub seq: u64,
    pub generation: u32,
    pub kind: PoolEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestFrame {
    pub pool_id: PoolId,
    /// Highest event sequence number the sender has emitted.
    pub sent: u64,
    /// Highest peer sequence number the sender has applied.
    pub applied: u64,
    pub digest: PoolDigest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyNeg {
    pub pool_id: PoolId,
    pub session_id: SessionId,
    pub mode: NegotiationMode,
    pub src_host: HostId,
    pub dst_host: HostId,
    pub class: u8,
    pub lifetime_s: f64,
    pub packet: SealedSelectionPacket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyConfirm {
    pub pool_id: PoolId,
    pub session_id: SessionId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenConfirm {
    pub pool_id: PoolId,
    pub session_id: SessionId,
    pub packet: SealedSelectionPacket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    SequenceGap,
    MacInvalid,
    RaceConflict,
    StaleGeneration,
    InsufficientMaterial,
    PolicyDenied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub pool_id: PoolId,
    pub code: ErrorCode,
    #[serde(default)]
    pub session_id: Option<SessionId>,
    /// For SEQUENCE_GAP: the first sequence number the sender is missing.
    #[serde(default)]
    pub expected_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Frame {
    KeyNeg(KeyNeg),
    KeyConfirm(KeyConfirm),
    PoolEvent(PoolEvent),
    Digest(DigestFrame),
    TokenConfirm(TokenConfirm),
    Error(ErrorFrame),
}

impl Frame {
    pub fn type_name(&self) -> &'static str {
        match self {
            Frame::KeyNeg(_) => "KEY_NEG",
            Frame::KeyConfirm(_) => "KEY_CONFIRM",
            Frame::PoolEvent(_) => "POOL_EVENT",
            Frame::Digest(_) => "DIGEST",
            Frame::TokenConfirm(_) => "TOKEN_CONFIRM",
            Frame::Error(_) => "ERROR",
        }
    }

    pub fn pool_id(&self) -> PoolId {
        match self {
            Frame::KeyNeg(f) => f.pool_id,
            Frame::KeyConfirm(f) => f.pool_id,
            Frame::PoolEvent(f) => f.pool_id,
            Frame::Digest(f) => f.pool_id,
            Frame::TokenConfirm(f) => f.pool_id,
            Frame::Error(f) => f.pool_id,
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let body = serde_json::to_vec(frame).expect("frames serialize");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame from the front of `buf`, returning it and the number of
/// bytes used, or `None` if `buf` holds only part of a frame.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Frame, usize)>, KmsError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let frame =
        serde_json::from_slice(&buf[4..4 + len]).map_err(|e| KmsError::Malformed(e.to_string()))?;
    Ok(Some((frame, 4 + len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip_through_stream() {
        let frames = vec![
            Frame::KeyConfirm(KeyConfirm {
                pool_id: PoolId(102),
                session_id: SessionId(5),
            }),
            Frame::Error(ErrorFrame {
                pool_id: PoolId(102),
                code: ErrorCode::SequenceGap,
                session_id: None,
                expected_seq: Some(7),
            }),
            Frame::PoolEvent(PoolEvent {
                pool_id: PoolId(102),
                seq: 1,
                generation: 0,
                kind: PoolEventKind::Purge { generation: 1 },
            }),
        ];
        let mut stream: Vec<u8> = frames.iter().flat_map(encode_frame).collect();
        let mut back = Vec::new();
        while let Some((f, used)) = decode_frame(&stream).unwrap() {
            back.push(f);
            stream.drain(..used);
        }
        assert_eq!(back, frames);
    }

    #[test]
    fn frame_tags_are_wire_names() {
        let f = Frame::KeyConfirm(KeyConfirm {
            pool_id: PoolId(1),
            session_id: SessionId(2),
        });
        let v: serde_json::Value = serde_json::from_slice(&encode_frame(&f)[4..]).unwrap();
        assert_eq!(v["type"], f.type_name());
    }

    #[test]
    fn partial_frame_waits() {
        let bytes = encode_frame(&Frame::KeyConfirm(KeyConfirm {
            pool_id: PoolId(1),
            session_id: SessionId(2),
        }));
        assert!(decode_frame(&bytes[..bytes.len() - 1]).unwrap().is_none());
    }
}
