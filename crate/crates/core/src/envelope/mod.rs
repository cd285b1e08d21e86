//! Hybrid sign-then-encrypt message envelope.
//!
//! Sender side: hash the message, sign the hash with the sender's private
//! key, concatenate signature and message, encrypt that under a fresh
//! symmetric secret, and wrap the secret under the receiver's public key.
//! Receiver side runs the steps in reverse and accepts the message only if
//! the recovered hash matches a recomputed one. Confidentiality comes from
//! the symmetric layer, integrity and non-repudiation from the signature.
//!
//! Wire layout: `u32 LE length ‖ wrapped_key ‖ u32 LE length ‖ body`, with
//! the signature length-prefixed ahead of the plaintext inside the body.
//! The fresh secret is caller-supplied so tests can be deterministic.
//!
//! Two suites implement the primitives: [`reference::ReferenceSuite`]
//! (SHA-256, RSA-2048 PKCS#1 v1.5 signatures, RSA-OAEP key wrap, AES-256-CTR)
//! and [`toy::ToySuite`], a deterministic 8-byte-key suite that is NOT SECURE
//! and exists so tamper tests can be exhaustive.

pub mod reference;
pub mod toy;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::wire::{Reader, Writer};

/// Randomness source acceptable to the cryptographic primitives.
pub trait EnvelopeRng: RngCore + CryptoRng {}
impl<T: RngCore + CryptoRng> EnvelopeRng for T {}

/// Opaque encoded public key (suite-specific encoding).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub Vec<u8>);

/// Opaque encoded private key. Never serialized into any wire message.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey(pub Vec<u8>);

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrivateKey(..)")
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// Why a signature check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyFailure {
    /// The signature is malformed or was not produced by the matching
    /// private key.
    Signature,
    /// The signature is authentic but covers a different message hash.
    Integrity,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SuiteError {
    #[error("key material malformed for this suite")]
    BadKey,
    #[error("input malformed for this suite")]
    BadInput,
    #[error("secret key unwrap failed")]
    UnwrapFailed,
}

/// The pluggable primitive set used by [`seal`] and [`open`].
pub trait CryptoSuite {
    fn name(&self) -> &'static str;

    /// Generates an asymmetric keypair for both signing and key wrap.
    fn gen_keypair(&self, rng: &mut dyn EnvelopeRng) -> KeyPair;

    /// Cryptographic hash of a message.
    fn hash(&self, message: &[u8]) -> Vec<u8>;

    /// Signs a message hash with the sender's private key.
    fn sign(&self, msg_hash: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError>;

    /// Checks a signature over `msg_hash` against the sender's public key.
    fn verify(
        &self,
        msg_hash: &[u8],
        signature: &[u8],
        key: &PublicKey,
    ) -> Result<(), VerifyFailure>;

    /// Encrypts a short secret under the receiver's public key.
    fn kem_wrap(
        &self,
        secret: &[u8],
        key: &PublicKey,
        rng: &mut dyn EnvelopeRng,
    ) -> Result<Vec<u8>, SuiteError>;

    /// Recovers the secret with the receiver's private key.
    fn kem_unwrap(&self, wrapped: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError>;

    /// Symmetric stream transform keyed by a single-use secret; applying it
    /// twice is the identity, so the same call encrypts and decrypts.
    fn sym_apply(&self, secret: &[u8], data: &[u8]) -> Vec<u8>;

    /// Required byte length of the per-message secret.
    fn secret_len(&self) -> usize;

    /// Samples a fresh per-message secret.
    fn gen_secret(&self, rng: &mut dyn EnvelopeRng) -> Vec<u8> {
        let mut secret = vec![0u8; self.secret_len()];
        rng.fill_bytes(&mut secret);
        secret
    }
}

/// Sealed message: wrapped per-message secret plus ciphertext of
/// signature ‖ plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub wrapped_key: Vec<u8>,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(&self.wrapped_key);
        w.put_bytes(&self.body);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
        let mut r = Reader::new(bytes);
        let wrapped_key = r
            .get_bytes()
            .map_err(|_| EnvelopeError::MalformedEnvelope)?
            .to_vec();
        let body = r
            .get_bytes()
            .map_err(|_| EnvelopeError::MalformedEnvelope)?
            .to_vec();
        r.finish().map_err(|_| EnvelopeError::MalformedEnvelope)?;
        Ok(Envelope { wrapped_key, body })
    }
}

/// Largest plaintext the framing accepts.
pub const MAX_PLAINTEXT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("key material unusable")]
    KeyMismatch,
    #[error("plaintext exceeds framing limit")]
    PlaintextTooLarge,
    #[error("secret key unwrap failed")]
    KeyUnwrapFailure,
    #[error("envelope malformed")]
    MalformedEnvelope,
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("message integrity check failed")]
    IntegrityFailure,
}

/// Seals `plaintext` from the holder of `sender_private` to the holder of
/// the key matching `receiver_public`, using the caller-supplied single-use
/// `fresh_secret`.
pub fn seal(
    suite: &dyn CryptoSuite,
    plaintext: &[u8],
    sender_private: &PrivateKey,
    receiver_public: &PublicKey,
    fresh_secret: &[u8],
    rng: &mut dyn EnvelopeRng,
) -> Result<Envelope, EnvelopeError> {
    if plaintext.len() > MAX_PLAINTEXT {
        return Err(EnvelopeError::PlaintextTooLarge);
    }
    if fresh_secret.len() != suite.secret_len() {
        return Err(EnvelopeError::KeyMismatch);
    }
    let msg_hash = suite.hash(plaintext);
    let signature = suite
        .sign(&msg_hash, sender_private)
        .map_err(|_| EnvelopeError::KeyMismatch)?;

    let mut inner = Writer::new();
    inner.put_bytes(&signature);
    inner.put_raw(plaintext);
    let body = suite.sym_apply(fresh_secret, &inner.into_bytes());

    let wrapped_key = suite
        .kem_wrap(fresh_secret, receiver_public, rng)
        .map_err(|_| EnvelopeError::KeyMismatch)?;

    Ok(Envelope { wrapped_key, body })
}

/// Opens an envelope, returning the plaintext only if the secret unwraps,
/// the framing parses, and the signature over the message hash verifies
/// against `sender_public`.
pub fn open(
    suite: &dyn CryptoSuite,
    envelope: &Envelope,
    receiver_private: &PrivateKey,
    sender_public: &PublicKey,
) -> Result<Vec<u8>, EnvelopeError> {
    let secret = suite
        .kem_unwrap(&envelope.wrapped_key, receiver_private)
        .map_err(|_| EnvelopeError::KeyUnwrapFailure)?;
    if secret.len() != suite.secret_len() {
        return Err(EnvelopeError::KeyUnwrapFailure);
    }
    let inner = suite.sym_apply(&secret, &envelope.body);

    let mut r = Reader::new(&inner);
    let signature = r
        .get_bytes()
        .map_err(|_| EnvelopeError::MalformedEnvelope)?
        .to_vec();
    let plaintext = r.get_raw(r.remaining()).unwrap().to_vec();

    let msg_hash = suite.hash(&plaintext);
    match suite.verify(&msg_hash, &signature, sender_public) {
        Ok(()) => Ok(plaintext),
        Err(VerifyFailure::Signature) => Err(EnvelopeError::SignatureInvalid),
        Err(VerifyFailure::Integrity) => Err(EnvelopeError::IntegrityFailure),
    }
}

#[cfg(test)]
mod tests {
    use super::toy::ToySuite;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn roundtrip_identity_including_empty_plaintext() {
        let suite = ToySuite;
        let mut rng = rng();
        let alice = suite.gen_keypair(&mut rng);
        let bob = suite.gen_keypair(&mut rng);

        for msg in [&b""[..], b"x", b"hello world", &[0u8; 1024][..]] {
            let secret = suite.gen_secret(&mut rng);
            let env = seal(&suite, msg, &alice.private, &bob.public, &secret, &mut rng).unwrap();
            let out = open(&suite, &env, &bob.private, &alice.public).unwrap();
            assert_eq!(out, msg);
        }
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let suite = ToySuite;
        let mut rng = rng();
        let alice = suite.gen_keypair(&mut rng);
        let bob = suite.gen_keypair(&mut rng);
        let msg = b"tamper detection coverage msg!!!";
        let secret = suite.gen_secret(&mut rng);
        let env = seal(&suite, msg, &alice.private, &bob.public, &secret, &mut rng).unwrap();
        let bytes = env.to_bytes();

        for byte in 0..bytes.len() {
            for bit in 0..8 {
                let mut tampered = bytes.clone();
                tampered[byte] ^= 1 << bit;
                let result = Envelope::from_bytes(&tampered)
                    .and_then(|env| open(&suite, &env, &bob.private, &alice.public));
                assert!(
                    result.is_err(),
                    "bit flip at byte {byte} bit {bit} was accepted"
                );
            }
        }
    }

    #[test]
    fn truncation_sweep_is_malformed() {
        let suite = ToySuite;
        let mut rng = rng();
        let alice = suite.gen_keypair(&mut rng);
        let bob = suite.gen_keypair(&mut rng);
        let secret = suite.gen_secret(&mut rng);
        let env = seal(&suite, b"shorten me", &alice.private, &bob.public, &secret, &mut rng)
            .unwrap();
        let bytes = env.to_bytes();
        for cut in 0..bytes.len() {
            let result = Envelope::from_bytes(&bytes[..cut]);
            assert_eq!(result.unwrap_err(), EnvelopeError::MalformedEnvelope, "cut {cut}");
        }
    }

    #[test]
    fn wrong_key_matrix_over_three_identities() {
        let suite = ToySuite;
        let mut rng = rng();
        let ids: Vec<KeyPair> = (0..3).map(|_| suite.gen_keypair(&mut rng)).collect();

        for sender in 0..3 {
            for receiver in 0..3 {
                if sender == receiver {
                    continue;
                }
                let secret = suite.gen_secret(&mut rng);
                let env = seal(
                    &suite,
                    b"matrix",
                    &ids[sender].private,
                    &ids[receiver].public,
                    &secret,
                    &mut rng,
                )
                .unwrap();

                // Correct keys succeed.
                assert!(open(&suite, &env, &ids[receiver].private, &ids[sender].public).is_ok());

                // Verifying against any other sender's key is a signature
                // failure.
                for other in 0..3 {
                    if other == sender {
                        continue;
                    }
                    assert_eq!(
                        open(&suite, &env, &ids[receiver].private, &ids[other].public)
                            .unwrap_err(),
                        EnvelopeError::SignatureInvalid
                    );
                }

                // Unwrapping with any other receiver's key fails.
                for other in 0..3 {
                    if other == receiver {
                        continue;
                    }
                    assert_eq!(
                        open(&suite, &env, &ids[other].private, &ids[sender].public)
                            .unwrap_err(),
                        EnvelopeError::KeyUnwrapFailure
                    );
                }
            }
        }
    }

    #[test]
    fn fresh_secret_changes_body_bytes() {
        let suite = ToySuite;
        let mut rng = rng();
        let alice = suite.gen_keypair(&mut rng);
        let bob = suite.gen_keypair(&mut rng);
        let s1 = suite.gen_secret(&mut rng);
        let s2 = suite.gen_secret(&mut rng);
        assert_ne!(s1, s2);
        let e1 = seal(&suite, b"same msg", &alice.private, &bob.public, &s1, &mut rng).unwrap();
        let e2 = seal(&suite, b"same msg", &alice.private, &bob.public, &s2, &mut rng).unwrap();
        assert_ne!(e1.body, e2.body);
    }

    #[test]
    fn oversized_plaintext_rejected() {
        let suite = ToySuite;
        let mut rng = rng();
        let kp = suite.gen_keypair(&mut rng);
        let secret = suite.gen_secret(&mut rng);
        let huge = vec![0u8; MAX_PLAINTEXT + 1];
        assert_eq!(
            seal(&suite, &huge, &kp.private, &kp.public, &secret, &mut rng).unwrap_err(),
            EnvelopeError::PlaintextTooLarge
        );
    }

    #[test]
    fn wrong_secret_length_rejected_at_seal() {
        let suite = ToySuite;
        let mut rng = rng();
        let kp = suite.gen_keypair(&mut rng);
        assert_eq!(
            seal(&suite, b"m", &kp.private, &kp.public, &[0u8; 3], &mut rng).unwrap_err(),
            EnvelopeError::KeyMismatch
        );
    }
}
