//! Key expansion and hybrid combination.

use aes::cipher::{KeyIvInit, StreamCipher};
use sha2::{Digest, Sha256};

use super::KmsError;

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

/// Stretches `seed` into `out_length` bytes with an AES-256-CTR keystream
/// keyed by a hash of the seed. Deterministic, and never the identity.
pub fn derive_expanded_key(seed: &[u8], out_length: usize) -> Result<Vec<u8>, KmsError> {
    if seed.is_empty() {
        return Err(KmsError::EmptySeed);
    }
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"qkdnet-expand-v1")
        .chain_update((seed.len() as u64).to_be_bytes())
        .chain_update(seed)
        .finalize()
        .into();
    let mut out = vec![0u8; out_length];
    let mut cipher = Aes256Ctr::new(&key.into(), &[0u8; 16].into());
    cipher.apply_keystream(&mut out);
    Ok(out)
}

/// Bytewise XOR of a QKD key with an independently established key.
pub fn combine_hybrid(k_qkd: &[u8], k_pq: &[u8]) -> Result<Vec<u8>, KmsError> {
    if k_qkd.len() != k_pq.len() {
        return Err(KmsError::LengthMismatch(k_qkd.len(), k_pq.len()));
    }
    Ok(k_qkd.iter().zip(k_pq).map(|(a, b)| a ^ b).collect())
}
