//! Reference primitive suite: SHA-256, RSA-2048 PKCS#1 v1.5 signatures,
//! RSA-OAEP key wrap, AES-256-CTR symmetric layer.
//!
//! The symmetric layer runs CTR with a zero IV; that is sound here because
//! every secret key is single-use by construction (the envelope wraps a
//! fresh secret per message). Integrity comes from the signed hash, not the
//! cipher.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes256;
use rsa::pkcs1::{
    DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey,
};
use rsa::{Oaep, Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};

use super::{
    CryptoSuite, EnvelopeRng, KeyPair, PrivateKey, PublicKey, SuiteError, VerifyFailure,
};

type Aes256Ctr = ctr::Ctr128LE<Aes256>;

pub const RSA_BITS: usize = 2048;
pub const REFERENCE_SECRET_LEN: usize = 32;

/// Production-shaped suite. Keys are PKCS#1 DER blobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceSuite;

fn decode_private(key: &PrivateKey) -> Result<RsaPrivateKey, SuiteError> {
    RsaPrivateKey::from_pkcs1_der(&key.0).map_err(|_| SuiteError::BadKey)
}

fn decode_public(key: &PublicKey) -> Result<RsaPublicKey, SuiteError> {
    RsaPublicKey::from_pkcs1_der(&key.0).map_err(|_| SuiteError::BadKey)
}

impl CryptoSuite for ReferenceSuite {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn gen_keypair(&self, mut rng: &mut dyn EnvelopeRng) -> KeyPair {
        let private = RsaPrivateKey::new(&mut rng, RSA_BITS).expect("RSA keygen");
        let public = RsaPublicKey::from(&private);
        KeyPair {
            public: PublicKey(public.to_pkcs1_der().expect("encode").into_vec()),
            private: PrivateKey(private.to_pkcs1_der().expect("encode").as_bytes().to_vec()),
        }
    }

    fn hash(&self, message: &[u8]) -> Vec<u8> {
        Sha256::digest(message).to_vec()
    }

    fn sign(&self, msg_hash: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError> {
        let key = decode_private(key)?;
        key.sign(Pkcs1v15Sign::new::<Sha256>(), msg_hash)
            .map_err(|_| SuiteError::BadInput)
    }

    fn verify(
        &self,
        msg_hash: &[u8],
        signature: &[u8],
        key: &PublicKey,
    ) -> Result<(), VerifyFailure> {
        let key = decode_public(key).map_err(|_| VerifyFailure::Signature)?;
        // PKCS#1 v1.5 verification cannot tell a forged signature from an
        // authentic one over a different hash, so every failure is reported
        // as a signature failure.
        key.verify(Pkcs1v15Sign::new::<Sha256>(), msg_hash, signature)
            .map_err(|_| VerifyFailure::Signature)
    }

    fn kem_wrap(
        &self,
        secret: &[u8],
        key: &PublicKey,
        mut rng: &mut dyn EnvelopeRng,
    ) -> Result<Vec<u8>, SuiteError> {
        let key = decode_public(key)?;
        key.encrypt(&mut rng, Oaep::new::<Sha256>(), secret)
            .map_err(|_| SuiteError::BadInput)
    }

    fn kem_unwrap(&self, wrapped: &[u8], key: &PrivateKey) -> Result<Vec<u8>, SuiteError> {
        let key = decode_private(key)?;
        key.decrypt(Oaep::new::<Sha256>(), wrapped)
            .map_err(|_| SuiteError::UnwrapFailed)
    }

    fn sym_apply(&self, secret: &[u8], data: &[u8]) -> Vec<u8> {
        let mut buf = data.to_vec();
        let iv = [0u8; 16];
        let mut cipher =
            Aes256Ctr::new(secret.into(), &iv.into());
        cipher.apply_keystream(&mut buf);
        buf
    }

    fn secret_len(&self) -> usize {
        REFERENCE_SECRET_LEN
    }
}
