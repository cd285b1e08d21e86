//! Deterministic toy primitive suite with 8-byte keys.
//!
//! NOT SECURE. Every primitive here is built from FNV-1a and an xorshift
//! keystream so that tamper tests can flip every bit of an envelope and
//! assert rejection deterministically. The public and private halves of a
//! keypair are the same bytes: possession of the "public" key is enough to
//! forge, which is exactly why this suite must never leave test and
//! simulation configurations.
//!
//! Detection is still exact, not probabilistic hand-waving: the FNV-1a state
//! update `x ← (x ⊕ byte) · p` with odd `p` is injective per byte, so two
//! equal-length inputs differing anywhere hash differently. Bit flips
//! preserve length, so every single-bit flip of a sealed envelope changes
//! some checked value.

use super::{
    CryptoSuite, EnvelopeRng, KeyPair, PrivateKey, PublicKey, SuiteError, VerifyFailure,
};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(chunks: &[&[u8]]) -> u64 {
    let mut state = FNV_OFFSET;
    for chunk in chunks {
        for &b in *chunk {
            state ^= b as u64;
            state = state.wrapping_mul(FNV_PRIME);
        }
    }
    state
}

/// xorshift64* keystream; seed is forced nonzero.
fn keystream(seed: u64, len: usize) -> Vec<u8> {
    let mut x = seed | 1;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        let word = x.wrapping_mul(0x2545_f491_4f6c_dd1d);
        for b in word.to_le_bytes() {
            if out.len() == len {
                break;
            }
            out.push(b);
        }
    }
    out
}

fn xor_with_stream(seed: u64, data: &[u8]) -> Vec<u8> {
    let ks = keystream(seed, data.len());
    data.iter().zip(ks).map(|(d, k)| d ^ k).collect()
}

pub const TOY_KEY_LEN: usize = 8;
pub const TOY_SECRET_LEN: usize = 8;
const TOY_HASH_LEN: usize = 16;
const TOY_SIG_LEN: usize = 8 + TOY_HASH_LEN;
const TOY_KEM_LEN: usize = TOY_SECRET_LEN + 8;

/// The deterministic toy suite. See the module docs: NOT SECURE.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySuite;

impl CryptoSuite for ToySuite {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn gen_keypair(&self, rng: &mut dyn EnvelopeRng) -> KeyPair {
        let mut key = [0u8; TOY_KEY_LEN];
        rng.fill_bytes(&mut key);
        KeyPair {
            public: PublicKey(key.to_vec()),
            private: PrivateKey(key.to_vec()),
        }
    }

    fn hash(&self, message: &[u8]) -> Vec<u8> {
        let h1 = fnv1a64(&[b"toy-h1", message]);
        let h2 = fnv1a64(&[b"toy-h2", message]);
        let mut out = Vec::with_capacity(TOY_HASH_LEN);
        out.extend_from_slice(&h1.to_le_bytes());
        out.extend_from_slice(&h2.to_le_bytes());
        out
    }

    fn sign(&self, msg_hash: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError> {
        if key.0.len() != TOY_KEY_LEN || msg_hash.len() != TOY_HASH_LEN {
            return Err(SuiteError::BadKey);
        }
        let mac = fnv1a64(&[b"toy-sig", &key.0, msg_hash]);
        let mut sig = Vec::with_capacity(TOY_SIG_LEN);
        sig.extend_from_slice(&mac.to_le_bytes());
        sig.extend_from_slice(msg_hash);
        Ok(sig)
    }

    fn verify(
        &self,
        msg_hash: &[u8],
        signature: &[u8],
        key: &PublicKey,
    ) -> Result<(), VerifyFailure> {
        if signature.len() != TOY_SIG_LEN || key.0.len() != TOY_KEY_LEN {
            return Err(VerifyFailure::Signature);
        }
        let (mac_bytes, signed_hash) = signature.split_at(8);
        let expected_mac = fnv1a64(&[b"toy-sig", &key.0, signed_hash]);
        if mac_bytes != expected_mac.to_le_bytes() {
            // Not produced by the holder of the matching private key.
            return Err(VerifyFailure::Signature);
        }
        if signed_hash != msg_hash {
            // Authentic signature over a different message.
            return Err(VerifyFailure::Integrity);
        }
        Ok(())
    }

    fn kem_wrap(
        &self,
        secret: &[u8],
        key: &PublicKey,
        _rng: &mut dyn EnvelopeRng,
    ) -> Result<Vec<u8>, SuiteError> {
        if secret.len() != TOY_SECRET_LEN || key.0.len() != TOY_KEY_LEN {
            return Err(SuiteError::BadKey);
        }
        let masked = xor_with_stream(fnv1a64(&[b"toy-kem", &key.0]), secret);
        let tag = fnv1a64(&[b"toy-kem-tag", &key.0, secret]);
        let mut out = masked;
        out.extend_from_slice(&tag.to_le_bytes());
        Ok(out)
    }

    fn kem_unwrap(&self, wrapped: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError> {
        if wrapped.len() != TOY_KEM_LEN || key.0.len() != TOY_KEY_LEN {
            return Err(SuiteError::UnwrapFailed);
        }
        let (masked, tag) = wrapped.split_at(TOY_SECRET_LEN);
        let secret = xor_with_stream(fnv1a64(&[b"toy-kem", &key.0]), masked);
        let expected_tag = fnv1a64(&[b"toy-kem-tag", &key.0, &secret]);
        if tag != expected_tag.to_le_bytes() {
            return Err(SuiteError::UnwrapFailed);
        }
        Ok(secret)
    }

    fn sym_apply(&self, secret: &[u8], data: &[u8]) -> Vec<u8> {
        xor_with_stream(fnv1a64(&[b"toy-sym", secret]), data)
    }

    fn secret_len(&self) -> usize {
        TOY_SECRET_LEN
    }
}
