//! Wallet state, the charging office, and balance mutation primitives.
//!
//! Money is a balance counter in minor units. A reservation holds part of
//! the balance against an accepted quote: `reserved ≤ balance` always, and
//! the spendable amount is `balance − reserved`. The commit engine moves
//! money exclusively through [`WalletState::reserve`],
//! [`WalletState::release`], [`WalletState::debit_reserved`] and
//! [`WalletState::credit`], all checked.
//!
//! The office provisions identities and keys, and converts real money into
//! wallet balance by signing charge vouchers. A wallet accepts a voucher
//! once: each serial is remembered forever.
//!
//! Wallet persistence file: magic "PWLT", u16 version, then the fields in
//! declaration order, integers little-endian, byte strings u32
//! length-prefixed. The private key is never part of it; it lives in a
//! separate "PKEY" file so the platform can apply restrictive permissions.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::envelope::{CryptoSuite, EnvelopeRng, PrivateKey, PublicKey, VerifyFailure};
use crate::ids::{NodeId, TransactionId};
use crate::money::{MoneyAmount, MoneyError};
use crate::wire::{Reader, WireError, Writer};

pub const WALLET_MAGIC: [u8; 4] = *b"PWLT";
pub const WALLET_VERSION: u16 = 1;
pub const KEYFILE_MAGIC: [u8; 4] = *b"PKEY";
pub const KEYFILE_VERSION: u16 = 1;
pub const OFFICE_MAGIC: [u8; 4] = *b"POFC";
pub const OFFICE_VERSION: u16 = 1;
pub const VOUCHER_MAGIC: [u8; 4] = *b"PVCH";
pub const VOUCHER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WalletError {
    #[error("node already provisioned")]
    DuplicateNode,
    #[error("node not provisioned by this office")]
    UnknownNode,
    #[error("amount must be positive")]
    ZeroAmount,
    #[error("signature check failed")]
    BadSignature,
    #[error("voucher addressed to a different wallet")]
    WrongBeneficiary,
    #[error("voucher serial already redeemed")]
    ReplayedVoucher,
    #[error("balance arithmetic overflow")]
    Overflow,
    #[error("insufficient spendable funds")]
    InsufficientFunds,
    #[error("insufficient reservation")]
    InsufficientReservation,
    #[error("operation requires a different wallet mode")]
    WrongMode,
    #[error("duplicate outcome for transaction")]
    DuplicateOutcome,
    #[error("malformed wallet data: {0}")]
    Malformed(#[from] WireError),
}

impl From<MoneyError> for WalletError {
    fn from(_: MoneyError) -> Self {
        WalletError::Overflow
    }
}

/// What a node is currently willing to do, set by runtime command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Idle,
    Seller,
    Buyer,
}

impl Mode {
    fn tag(self) -> u8 {
        match self {
            Mode::Idle => 0,
            Mode::Seller => 1,
            Mode::Buyer => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Mode, WireError> {
        match tag {
            0 => Ok(Mode::Idle),
            1 => Ok(Mode::Seller),
            2 => Ok(Mode::Buyer),
            other => Err(WireError::UnknownTag(other)),
        }
    }
}

/// Key material held by a wallet. The private key is kept here in memory but
/// excluded from the wallet persistence record.
#[derive(Debug, Clone)]
pub struct KeyMaterial {
    pub own_public: PublicKey,
    pub own_private: PrivateKey,
    /// Verification key of the charging office.
    pub office_public: PublicKey,
    /// Office signature binding this node's id to its public key; carried in
    /// discovery responses so peers can authenticate each other without a
    /// PKI.
    pub attestation: Vec<u8>,
    /// Peer public keys, preinstalled by the office or learned from
    /// attested discovery packets.
    pub peer_directory: BTreeMap<NodeId, PublicKey>,
}

/// Terminal result of a transaction as recorded in wallet history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnOutcome {
    Committed,
    Aborted,
}

impl TxnOutcome {
    fn tag(self) -> u8 {
        match self {
            TxnOutcome::Committed => 1,
            TxnOutcome::Aborted => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, WireError> {
        match tag {
            1 => Ok(TxnOutcome::Committed),
            2 => Ok(TxnOutcome::Aborted),
            other => Err(WireError::UnknownTag(other)),
        }
    }
}

/// A finalized transaction outcome, signed by this wallet's own key for
/// post-hoc audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedOutcome {
    pub outcome: TxnOutcome,
    pub peer: NodeId,
    pub amount: MoneyAmount,
    pub signature: Vec<u8>,
}

fn outcome_digest(
    suite: &dyn CryptoSuite,
    node: &NodeId,
    txn: &TransactionId,
    outcome: TxnOutcome,
    peer: &NodeId,
    amount: MoneyAmount,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_raw(b"p2pwallet-outcome");
    w.put_raw(node.as_bytes());
    w.put_raw(txn.as_bytes());
    w.put_u8(outcome.tag());
    w.put_raw(peer.as_bytes());
    w.put_u64(amount.minor_units());
    suite.hash(&w.into_bytes())
}

/// A node's wallet: balance, identity, key material, reservation, and
/// finalized history. All mutation primitives are pure state transitions;
/// the hosting runtime serializes access.
#[derive(Debug, Clone)]
pub struct WalletState {
    pub node: NodeId,
    pub balance: MoneyAmount,
    pub reserved: MoneyAmount,
    pub keys: KeyMaterial,
    pub mode: Mode,
    pub history: BTreeMap<TransactionId, SignedOutcome>,
    /// Redeemed voucher serials; persisted with the balance so replay
    /// protection survives crashes atomically.
    pub seen_serials: BTreeSet<u64>,
}

impl WalletState {
    pub fn spendable(&self) -> MoneyAmount {
        self.balance
            .checked_sub(self.reserved)
            .expect("invariant: reserved <= balance")
    }

    /// Moves `amount` from spendable to reserved.
    pub fn reserve(&mut self, amount: MoneyAmount) -> Result<(), WalletError> {
        if amount > self.spendable() {
            return Err(WalletError::InsufficientFunds);
        }
        self.reserved = self.reserved.checked_add(amount)?;
        Ok(())
    }

    /// Returns `amount` from reserved to spendable.
    pub fn release(&mut self, amount: MoneyAmount) -> Result<(), WalletError> {
        if amount > self.reserved {
            return Err(WalletError::InsufficientReservation);
        }
        self.reserved = self.reserved.checked_sub(amount)?;
        Ok(())
    }

    /// Destroys `amount` out of the reservation (the buyer's side of a
    /// committed transfer).
    pub fn debit_reserved(&mut self, amount: MoneyAmount) -> Result<(), WalletError> {
        if amount > self.reserved {
            return Err(WalletError::InsufficientReservation);
        }
        self.reserved = self.reserved.checked_sub(amount)?;
        self.balance = self.balance.checked_sub(amount)?;
        Ok(())
    }

    /// Adds `amount` to the balance (the seller's side of a committed
    /// transfer, and voucher redemption).
    pub fn credit(&mut self, amount: MoneyAmount) -> Result<(), WalletError> {
        self.balance = self.balance.checked_add(amount)?;
        Ok(())
    }

    /// Credits a signed office voucher exactly once.
    pub fn redeem_charge(
        &mut self,
        suite: &dyn CryptoSuite,
        voucher: &ChargeVoucher,
    ) -> Result<(), WalletError> {
        if voucher.beneficiary != self.node {
            return Err(WalletError::WrongBeneficiary);
        }
        let digest = voucher.digest(suite);
        if suite
            .verify(&digest, &voucher.office_signature, &self.keys.office_public)
            .is_err()
        {
            return Err(WalletError::BadSignature);
        }
        if self.seen_serials.contains(&voucher.serial) {
            return Err(WalletError::ReplayedVoucher);
        }
        // Checked add first so a failed credit leaves no trace of the serial.
        self.balance = self.balance.checked_add(voucher.amount)?;
        self.seen_serials.insert(voucher.serial);
        Ok(())
    }

    pub fn has_outcome(&self, txn: &TransactionId) -> bool {
        self.history.contains_key(txn)
    }

    /// Records the signed terminal outcome for a transaction. At most one
    /// outcome may ever exist per transaction.
    pub fn record_outcome(
        &mut self,
        suite: &dyn CryptoSuite,
        txn: TransactionId,
        outcome: TxnOutcome,
        peer: NodeId,
        amount: MoneyAmount,
    ) -> Result<(), WalletError> {
        if self.history.contains_key(&txn) {
            return Err(WalletError::DuplicateOutcome);
        }
        let digest = outcome_digest(suite, &self.node, &txn, outcome, &peer, amount);
        let signature = suite
            .sign(&digest, &self.keys.own_private)
            .map_err(|_| WalletError::BadSignature)?;
        self.history.insert(
            txn,
            SignedOutcome {
                outcome,
                peer,
                amount,
                signature,
            },
        );
        Ok(())
    }

    /// Checks one history entry's signature, for audit tooling.
    pub fn verify_outcome(
        &self,
        suite: &dyn CryptoSuite,
        txn: &TransactionId,
    ) -> Result<(), WalletError> {
        let entry = self.history.get(txn).ok_or(WalletError::UnknownNode)?;
        let digest = outcome_digest(
            suite,
            &self.node,
            txn,
            entry.outcome,
            &entry.peer,
            entry.amount,
        );
        match suite.verify(&digest, &entry.signature, &self.keys.own_public) {
            Ok(()) => Ok(()),
            Err(VerifyFailure::Signature) | Err(VerifyFailure::Integrity) => {
                Err(WalletError::BadSignature)
            }
        }
    }

    /// Serializes everything except the private key.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(&WALLET_MAGIC);
        w.put_u16(WALLET_VERSION);
        w.put_raw(self.node.as_bytes());
        w.put_u64(self.balance.minor_units());
        w.put_u64(self.reserved.minor_units());
        // keys (public half)
        w.put_bytes(&self.keys.own_public.0);
        w.put_bytes(&self.keys.office_public.0);
        w.put_bytes(&self.keys.attestation);
        w.put_u32(self.keys.peer_directory.len() as u32);
        for (peer, key) in &self.keys.peer_directory {
            w.put_raw(peer.as_bytes());
            w.put_bytes(&key.0);
        }
        w.put_u8(self.mode.tag());
        w.put_u32(self.history.len() as u32);
        for (txn, outcome) in &self.history {
            w.put_raw(txn.as_bytes());
            w.put_u8(outcome.outcome.tag());
            w.put_raw(outcome.peer.as_bytes());
            w.put_u64(outcome.amount.minor_units());
            w.put_bytes(&outcome.signature);
        }
        w.put_u32(self.seen_serials.len() as u32);
        for serial in &self.seen_serials {
            w.put_u64(*serial);
        }
        w.into_bytes()
    }

    /// Rebuilds a wallet from its persistence record plus the separately
    /// stored private key.
    pub fn from_bytes(bytes: &[u8], own_private: PrivateKey) -> Result<WalletState, WalletError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&WALLET_MAGIC)?;
        let version = r.get_u16()?;
        if version != WALLET_VERSION {
            return Err(WalletError::Malformed(WireError::BadVersion(version)));
        }
        let node = NodeId(r.get_array::<16>()?);
        let balance = MoneyAmount::new(r.get_u64()?);
        let reserved = MoneyAmount::new(r.get_u64()?);
        let own_public = PublicKey(r.get_bytes()?.to_vec());
        let office_public = PublicKey(r.get_bytes()?.to_vec());
        let attestation = r.get_bytes()?.to_vec();
        let n_peers = r.get_u32()?;
        let mut peer_directory = BTreeMap::new();
        for _ in 0..n_peers {
            let peer = NodeId(r.get_array::<16>()?);
            let key = PublicKey(r.get_bytes()?.to_vec());
            peer_directory.insert(peer, key);
        }
        let mode = Mode::from_tag(r.get_u8()?)?;
        let n_history = r.get_u32()?;
        let mut history = BTreeMap::new();
        for _ in 0..n_history {
            let txn = TransactionId::from_bytes(r.get_array::<16>()?);
            let outcome = TxnOutcome::from_tag(r.get_u8()?)?;
            let peer = NodeId(r.get_array::<16>()?);
            let amount = MoneyAmount::new(r.get_u64()?);
            let signature = r.get_bytes()?.to_vec();
            history.insert(
                txn,
                SignedOutcome {
                    outcome,
                    peer,
                    amount,
                    signature,
                },
            );
        }
        let n_serials = r.get_u32()?;
        let mut seen_serials = BTreeSet::new();
        for _ in 0..n_serials {
            seen_serials.insert(r.get_u64()?);
        }
        r.finish()?;
        Ok(WalletState {
            node,
            balance,
            reserved,
            keys: KeyMaterial {
                own_public,
                own_private,
                office_public,
                attestation,
                peer_directory,
            },
            mode,
            history,
            seen_serials,
        })
    }

    /// Serializes the private key for the mode-restricted key file.
    pub fn keys_to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(&KEYFILE_MAGIC);
        w.put_u16(KEYFILE_VERSION);
        w.put_bytes(&self.keys.own_private.0);
        w.into_bytes()
    }

    pub fn keys_from_bytes(bytes: &[u8]) -> Result<PrivateKey, WalletError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&KEYFILE_MAGIC)?;
        let version = r.get_u16()?;
        if version != KEYFILE_VERSION {
            return Err(WalletError::Malformed(WireError::BadVersion(version)));
        }
        let key = PrivateKey(r.get_bytes()?.to_vec());
        r.finish()?;
        Ok(key)
    }
}

/// A signed conversion of real money into wallet balance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChargeVoucher {
    pub beneficiary: NodeId,
    pub amount: MoneyAmount,
    pub serial: u64,
    pub office_signature: Vec<u8>,
}

impl ChargeVoucher {
    fn digest(&self, suite: &dyn CryptoSuite) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(b"p2pwallet-voucher");
        w.put_raw(self.beneficiary.as_bytes());
        w.put_u64(self.amount.minor_units());
        w.put_u64(self.serial);
        suite.hash(&w.into_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(&VOUCHER_MAGIC);
        w.put_u16(VOUCHER_VERSION);
        w.put_raw(self.beneficiary.as_bytes());
        w.put_u64(self.amount.minor_units());
        w.put_u64(self.serial);
        w.put_bytes(&self.office_signature);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ChargeVoucher, WalletError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&VOUCHER_MAGIC)?;
        let version = r.get_u16()?;
        if version != VOUCHER_VERSION {
            return Err(WalletError::Malformed(WireError::BadVersion(version)));
        }
        let beneficiary = NodeId(r.get_array::<16>()?);
        let amount = MoneyAmount::new(r.get_u64()?);
        let serial = r.get_u64()?;
        let office_signature = r.get_bytes()?.to_vec();
        r.finish()?;
        Ok(ChargeVoucher {
            beneficiary,
            amount,
            serial,
            office_signature,
        })
    }
}

fn attestation_digest(suite: &dyn CryptoSuite, node: &NodeId, key: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_raw(b"p2pwallet-attest");
    w.put_raw(node.as_bytes());
    w.put_bytes(&key.0);
    suite.hash(&w.into_bytes())
}

/// Checks an office-issued binding of a node id to a public key.
pub fn verify_attestation(
    suite: &dyn CryptoSuite,
    office_public: &PublicKey,
    node: &NodeId,
    key: &PublicKey,
    attestation: &[u8],
) -> bool {
    let digest = attestation_digest(suite, node, key);
    suite.verify(&digest, attestation, office_public).is_ok()
}

/// The charging office: provisions wallets and issues charge vouchers.
#[derive(Debug, Clone)]
pub struct Office {
    pub public: PublicKey,
    private: PrivateKey,
    pub directory: BTreeMap<NodeId, PublicKey>,
    next_serial: u64,
}

impl Office {
    pub fn create(suite: &dyn CryptoSuite, rng: &mut dyn EnvelopeRng) -> Office {
        let keys = suite.gen_keypair(rng);
        Office {
            public: keys.public,
            private: keys.private,
            directory: BTreeMap::new(),
            next_serial: 1,
        }
    }

    /// Provisions a fresh wallet: zero balance, new keypair, office key and
    /// attestation installed. The office records the node's public key.
    pub fn provision(
        &mut self,
        suite: &dyn CryptoSuite,
        rng: &mut dyn EnvelopeRng,
        node: NodeId,
    ) -> Result<WalletState, WalletError> {
        if self.directory.contains_key(&node) {
            return Err(WalletError::DuplicateNode);
        }
        let keys = suite.gen_keypair(rng);
        let digest = attestation_digest(suite, &node, &keys.public);
        let attestation = suite
            .sign(&digest, &self.private)
            .map_err(|_| WalletError::BadSignature)?;
        self.directory.insert(node, keys.public.clone());
        Ok(WalletState {
            node,
            balance: MoneyAmount::ZERO,
            reserved: MoneyAmount::ZERO,
            keys: KeyMaterial {
                own_public: keys.public,
                own_private: keys.private,
                office_public: self.public.clone(),
                attestation,
                peer_directory: BTreeMap::new(),
            },
            mode: Mode::Idle,
            history: BTreeMap::new(),
            seen_serials: BTreeSet::new(),
        })
    }

    /// Issues a signed voucher for a provisioned node.
    pub fn issue_charge(
        &mut self,
        suite: &dyn CryptoSuite,
        node: NodeId,
        amount: MoneyAmount,
    ) -> Result<ChargeVoucher, WalletError> {
        if !self.directory.contains_key(&node) {
            return Err(WalletError::UnknownNode);
        }
        if amount.is_zero() {
            return Err(WalletError::ZeroAmount);
        }
        let serial = self.next_serial;
        self.next_serial += 1;
        let mut voucher = ChargeVoucher {
            beneficiary: node,
            amount,
            serial,
            office_signature: Vec::new(),
        };
        voucher.office_signature = suite
            .sign(&voucher.digest(suite), &self.private)
            .map_err(|_| WalletError::BadSignature)?;
        Ok(voucher)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(&OFFICE_MAGIC);
        w.put_u16(OFFICE_VERSION);
        w.put_bytes(&self.public.0);
        w.put_bytes(&self.private.0);
        w.put_u64(self.next_serial);
        w.put_u32(self.directory.len() as u32);
        for (node, key) in &self.directory {
            w.put_raw(node.as_bytes());
            w.put_bytes(&key.0);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Office, WalletError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&OFFICE_MAGIC)?;
        let version = r.get_u16()?;
        if version != OFFICE_VERSION {
            return Err(WalletError::Malformed(WireError::BadVersion(version)));
        }
        let public = PublicKey(r.get_bytes()?.to_vec());
        let private = PrivateKey(r.get_bytes()?.to_vec());
        let next_serial = r.get_u64()?;
        let n = r.get_u32()?;
        let mut directory = BTreeMap::new();
        for _ in 0..n {
            let node = NodeId(r.get_array::<16>()?);
            let key = PublicKey(r.get_bytes()?.to_vec());
            directory.insert(node, key);
        }
        r.finish()?;
        Ok(Office {
            public,
            private,
            directory,
            next_serial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::toy::ToySuite;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (Office, WalletState, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut office = Office::create(&ToySuite, &mut rng);
        let wallet = office
            .provision(&ToySuite, &mut rng, NodeId::from_name("N1").unwrap())
            .unwrap();
        (office, wallet, rng)
    }

    #[test]
    fn provision_gives_fresh_zero_wallet_and_records_key() {
        let (office, wallet, _) = setup();
        assert_eq!(wallet.balance, MoneyAmount::ZERO);
        assert_eq!(wallet.reserved, MoneyAmount::ZERO);
        assert_eq!(
            office.directory.get(&wallet.node),
            Some(&wallet.keys.own_public)
        );
        assert!(verify_attestation(
            &ToySuite,
            &office.public,
            &wallet.node,
            &wallet.keys.own_public,
            &wallet.keys.attestation
        ));
    }

    #[test]
    fn provision_twice_is_duplicate() {
        let (mut office, _, mut rng) = setup();
        assert_eq!(
            office
                .provision(&ToySuite, &mut rng, NodeId::from_name("N1").unwrap())
                .unwrap_err(),
            WalletError::DuplicateNode
        );
    }

    #[test]
    fn charge_requires_provisioned_node_and_positive_amount() {
        let (mut office, _, _) = setup();
        assert_eq!(
            office
                .issue_charge(
                    &ToySuite,
                    NodeId::from_name("N9").unwrap(),
                    MoneyAmount::new(100)
                )
                .unwrap_err(),
            WalletError::UnknownNode
        );
        assert_eq!(
            office
                .issue_charge(
                    &ToySuite,
                    NodeId::from_name("N1").unwrap(),
                    MoneyAmount::ZERO
                )
                .unwrap_err(),
            WalletError::ZeroAmount
        );
    }

    #[test]
    fn redeem_credits_once_and_rejects_replay() {
        let (mut office, mut wallet, _) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(100))
            .unwrap();
        wallet.redeem_charge(&ToySuite, &voucher).unwrap();
        assert_eq!(wallet.balance, MoneyAmount::new(100));

        let before = wallet.clone();
        assert_eq!(
            wallet.redeem_charge(&ToySuite, &voucher).unwrap_err(),
            WalletError::ReplayedVoucher
        );
        assert_eq!(wallet.balance, before.balance);
        assert_eq!(wallet.seen_serials, before.seen_serials);
    }

    #[test]
    fn redeem_rejects_every_single_byte_tamper_of_the_signature() {
        let (mut office, mut wallet, _) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(5))
            .unwrap();
        for i in 0..voucher.office_signature.len() {
            let mut bad = voucher.clone();
            bad.office_signature[i] ^= 0xFF;
            assert_eq!(
                wallet.redeem_charge(&ToySuite, &bad).unwrap_err(),
                WalletError::BadSignature,
                "flipped signature byte {i}"
            );
        }
        assert_eq!(wallet.balance, MoneyAmount::ZERO);
    }

    #[test]
    fn redeem_rejects_wrong_beneficiary() {
        let (mut office, _, mut rng) = setup();
        let mut other = office
            .provision(&ToySuite, &mut rng, NodeId::from_name("N2").unwrap())
            .unwrap();
        let voucher = office
            .issue_charge(&ToySuite, NodeId::from_name("N1").unwrap(), MoneyAmount::new(7))
            .unwrap();
        assert_eq!(
            other.redeem_charge(&ToySuite, &voucher).unwrap_err(),
            WalletError::WrongBeneficiary
        );
    }

    #[test]
    fn reserve_release_debit_credit() {
        let (mut office, mut wallet, _) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(100))
            .unwrap();
        wallet.redeem_charge(&ToySuite, &voucher).unwrap();

        wallet.reserve(MoneyAmount::new(40)).unwrap();
        assert_eq!(wallet.balance, MoneyAmount::new(100));
        assert_eq!(wallet.reserved, MoneyAmount::new(40));
        assert_eq!(wallet.spendable(), MoneyAmount::new(60));

        assert_eq!(
            wallet.reserve(MoneyAmount::new(61)).unwrap_err(),
            WalletError::InsufficientFunds
        );

        wallet.release(MoneyAmount::new(10)).unwrap();
        assert_eq!(wallet.reserved, MoneyAmount::new(30));

        wallet.debit_reserved(MoneyAmount::new(30)).unwrap();
        assert_eq!(wallet.balance, MoneyAmount::new(70));
        assert_eq!(wallet.reserved, MoneyAmount::ZERO);

        assert_eq!(
            wallet.debit_reserved(MoneyAmount::new(1)).unwrap_err(),
            WalletError::InsufficientReservation
        );

        wallet.credit(MoneyAmount::new(30)).unwrap();
        assert_eq!(wallet.balance, MoneyAmount::new(100));
    }

    #[test]
    fn reserve_more_than_balance_fails() {
        let (mut office, mut wallet, _) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(100))
            .unwrap();
        wallet.redeem_charge(&ToySuite, &voucher).unwrap();
        assert_eq!(
            wallet.reserve(MoneyAmount::new(101)).unwrap_err(),
            WalletError::InsufficientFunds
        );
    }

    #[test]
    fn history_takes_one_outcome_per_txn_and_verifies() {
        let (_, mut wallet, mut rng) = setup();
        let txn = TransactionId::generate(&wallet.node, &mut rng);
        let peer = NodeId::from_name("peer").unwrap();
        wallet
            .record_outcome(&ToySuite, txn, TxnOutcome::Committed, peer, MoneyAmount::new(4))
            .unwrap();
        wallet.verify_outcome(&ToySuite, &txn).unwrap();
        assert_eq!(
            wallet
                .record_outcome(&ToySuite, txn, TxnOutcome::Aborted, peer, MoneyAmount::new(4))
                .unwrap_err(),
            WalletError::DuplicateOutcome
        );
    }

    #[test]
    fn wallet_roundtrips_through_persistence_bytes() {
        let (mut office, mut wallet, mut rng) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(250))
            .unwrap();
        wallet.redeem_charge(&ToySuite, &voucher).unwrap();
        wallet.mode = Mode::Buyer;
        wallet.keys.peer_directory.insert(
            NodeId::from_name("peer").unwrap(),
            PublicKey(vec![9; 8]),
        );
        let txn = TransactionId::generate(&wallet.node, &mut rng);
        wallet
            .record_outcome(
                &ToySuite,
                txn,
                TxnOutcome::Committed,
                NodeId::from_name("peer").unwrap(),
                MoneyAmount::new(3),
            )
            .unwrap();

        let state_bytes = wallet.to_bytes();
        let key_bytes = wallet.keys_to_bytes();
        let private = WalletState::keys_from_bytes(&key_bytes).unwrap();
        let restored = WalletState::from_bytes(&state_bytes, private).unwrap();

        assert_eq!(restored.node, wallet.node);
        assert_eq!(restored.balance, wallet.balance);
        assert_eq!(restored.mode, wallet.mode);
        assert_eq!(restored.history, wallet.history);
        assert_eq!(restored.seen_serials, wallet.seen_serials);
        assert_eq!(restored.keys.peer_directory, wallet.keys.peer_directory);
        assert_eq!(restored.keys.own_private, wallet.keys.own_private);
    }

    #[test]
    fn office_roundtrips_and_keeps_issuing_fresh_serials() {
        let (office, wallet, _) = setup();
        let bytes = office.to_bytes();
        let mut restored = Office::from_bytes(&bytes).unwrap();
        let v1 = restored
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(1))
            .unwrap();
        let v2 = restored
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(1))
            .unwrap();
        assert_ne!(v1.serial, v2.serial);
    }

    #[test]
    fn voucher_file_roundtrip() {
        let (mut office, wallet, _) = setup();
        let voucher = office
            .issue_charge(&ToySuite, wallet.node, MoneyAmount::new(77))
            .unwrap();
        let restored = ChargeVoucher::from_bytes(&voucher.to_bytes()).unwrap();
        assert_eq!(restored, voucher);
    }
}
