//! Key selection info, its sealed wire form, and the PSK identity hint.
//!
//! Packets are encrypt-then-MAC: AES-256-CTR under one subkey of the
//! inter-site key, then HMAC-SHA256 under another over
//! `epoch || nonce || ciphertext`. The tag is checked before anything is
//! decrypted.

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::KmsError;
use crate::ids::{PoolId, SessionId};
use crate::keypool::KeyReference;

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

/// Where the key bytes for a selection come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeySource {
    Pool,
    /// Class 2 fallback: expansion of the inter-site key and session id.
    Expanded,
    /// Class 0 fallback; the nonce is public, the key is derived.
    Classical {
        nonce: u64,
    },
    /// Class 1: the host key first issued under `origin`.
    HostKey {
        origin: SessionId,
    },
    /// Token request from a pool follower; the leader picks the bytes.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeySelectionInfo {
    pub reference: KeyReference,
    pub issued_at: f64,
    pub source: KeySource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedSelectionPacket {
    pub key_epoch: u32,
    #[serde(with = "hex::serde")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hex::serde")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub mac: [u8; TAG_LEN],
}

impl SealedSelectionPacket {
    /// Flat byte image covering every authenticated field and the tag.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.key_epoch.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KmsError> {
        if bytes.len() < 4 + NONCE_LEN + TAG_LEN {
            return Err(KmsError::MacInvalid);
        }
        let (epoch, rest) = bytes.split_at(4);
        let (nonce, rest) = rest.split_at(NONCE_LEN);
        let (ciphertext, mac) = rest.split_at(rest.len() - TAG_LEN);
        Ok(SealedSelectionPacket {
            key_epoch: u32::from_be_bytes(epoch.try_into().expect("4 bytes")),
            nonce: nonce.try_into().expect("nonce length"),
            ciphertext: ciphertext.to_vec(),
            mac: mac.try_into().expect("tag length"),
        })
    }
}

/// A symmetric key shared by the KMSs of one site pair.
#[derive(Clone, PartialEq, Eq)]
pub struct InterSiteKey {
    pub epoch: u32,
    key: [u8; 32],
}

impl std::fmt::Debug for InterSiteKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InterSiteKey")
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

impl InterSiteKey {
    pub fn new(epoch: u32, key: [u8; 32]) -> Self {
        InterSiteKey { epoch, key }
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.key
    }

    fn subkey(&self, label: &[u8]) -> [u8; 32] {
        let mut mac = HmacSha256::new_from_slice(&self.key).expect("any key length");
        mac.update(label);
        mac.finalize().into_bytes().into()
    }

    fn tag(&self, epoch: u32, nonce: &[u8], ciphertext: &[u8]) -> HmacSha256 {
        let mut mac =
            HmacSha256::new_from_slice(&self.subkey(b"qkdnet-sel-mac")).expect("any key length");
        mac.update(&epoch.to_be_bytes());
        mac.update(nonce);
        mac.update(ciphertext);
        mac
    }

    pub fn seal(&self, info: &KeySelectionInfo, nonce: [u8; NONCE_LEN]) -> SealedSelectionPacket {
        let mut ciphertext = serde_json::to_vec(info).expect("selection serializes");
        let mut cipher = Aes256Ctr::new(&self.subkey(b"qkdnet-sel-enc").into(), &nonce.into());
        cipher.apply_keystream(&mut ciphertext);
        let mac = self
            .tag(self.epoch, &nonce, &ciphertext)
            .finalize()
            .into_bytes()
            .into();
        SealedSelectionPacket {
            key_epoch: self.epoch,
            nonce,
            ciphertext,
            mac,
        }
    }

    pub fn open(&self, packet: &SealedSelectionPacket) -> Result<KeySelectionInfo, KmsError> {
        if packet.key_epoch != self.epoch {
            return Err(KmsError::MacInvalid);
        }
        self.tag(packet.key_epoch, &packet.nonce, &packet.ciphertext)
            .verify_slice(&packet.mac)
            .map_err(|_| KmsError::MacInvalid)?;
        let mut plain = packet.ciphertext.clone();
        let mut cipher =
            Aes256Ctr::new(&self.subkey(b"qkdnet-sel-enc").into(), &packet.nonce.into());
        cipher.apply_keystream(&mut plain);
        serde_json::from_slice(&plain).map_err(|e| KmsError::Malformed(e.to_string()))
    }
}

/// Active key plus, on the refresh initiator, the key it has proposed but
/// not yet seen acknowledged. Both are accepted inbound; older epochs are
/// retired and fail authentication.
#[derive(Debug, Clone)]
pub struct KeyRing {
    active: InterSiteKey,
    pending: Option<InterSiteKey>,
}

impl KeyRing {
    pub fn new(initial: InterSiteKey) -> Self {
        KeyRing {
            active: initial,
            pending: None,
        }
    }

    pub fn active(&self) -> &InterSiteKey {
        &self.active
    }

    pub fn pending(&self) -> Option<&InterSiteKey> {
        self.pending.as_ref()
    }

    pub fn next_epoch(&self) -> u32 {
        self.pending.as_ref().map_or(self.active.epoch, |k| k.epoch) + 1
    }

    pub fn propose(&mut self, key: InterSiteKey) {
        self.pending = Some(key);
    }

    /// Makes the pending key active if it carries `epoch`.
    pub fn promote(&mut self, epoch: u32) -> bool {
        match self.pending.take() {
            Some(k) if k.epoch == epoch => {
                self.active = k;
                true
            }
            other => {
                self.pending = other;
                false
            }
        }
    }

    pub fn drop_pending(&mut self, epoch: u32) {
        if self.pending.as_ref().is_some_and(|k| k.epoch == epoch) {
            self.pending = None;
        }
    }

    /// Installs `key` as active immediately and retires everything older.
    pub fn switch_to(&mut self, key: InterSiteKey) {
        self.active = key;
        self.pending = None;
    }

    pub fn seal(&self, info: &KeySelectionInfo, nonce: [u8; NONCE_LEN]) -> SealedSelectionPacket {
        self.active.seal(info, nonce)
    }

    pub fn open(&self, packet: &SealedSelectionPacket) -> Result<KeySelectionInfo, KmsError> {
        match &self.pending {
            Some(p) if p.epoch == packet.key_epoch => p.open(packet),
            _ => self.active.open(packet),
        }
    }
}

const HINT_WIDTHS: [usize; 5] = [4, 6, 10, 8, 20];
pub const HINT_LEN: usize = 48;

/// Fixed-width decimal rendering of a key reference, usable as a TLS PSK
/// identity hint.
pub fn encode_psk_hint(reference: &KeyReference) -> Result<String, KmsError> {
    let fields: [u128; 5] = [
        reference.pool_id.0.into(),
        reference.generation.into(),
        reference.offset.into(),
        reference.length.into(),
        reference.session_id.0.into(),
    ];
    let mut out = String::with_capacity(HINT_LEN);
    for (value, width) in fields.into_iter().zip(HINT_WIDTHS) {
        if value >= 10u128.pow(width as u32) {
            return Err(KmsError::HintOverflow);
        }
        out.push_str(&format!("{value:0width$}"));
    }
    Ok(out)
}

pub fn decode_psk_hint(hint: &str) -> Result<KeyReference, KmsError> {
    if hint.len() != HINT_LEN || !hint.bytes().all(|b| b.is_ascii_digit()) {
        return Err(KmsError::MalformedHint);
    }
    let mut fields = [0u128; 5];
    let mut at = 0;
    for (slot, width) in fields.iter_mut().zip(HINT_WIDTHS) {
        *slot = hint[at..at + width]
            .parse()
            .map_err(|_| KmsError::MalformedHint)?;
        at += width;
    }
    let narrow = |v: u128| u64::try_from(v).map_err(|_| KmsError::MalformedHint);
    Ok(KeyReference {
        pool_id: PoolId(fields[0] as u32),
        generation: fields[1] as u32,
        offset: narrow(fields[2])?,
        length: narrow(fields[3])?,
        session_id: SessionId(narrow(fields[4])?),
    })
}
