//! Buyer discovery and the price quote exchange.
//!
//! A seller broadcasts a one-hop LOOKUP; only nodes currently in buyer mode
//! answer (silence saves everyone else's power). The seller picks the buyer
//! it is standing in front of by unique id, sends the price quote, and the
//! buyer accepts by reserving the amount.
//!
//! Key exchange rides on discovery: both the lookup and the response carry
//! the sender's public key together with the office's signature binding that
//! key to the node id. A packet with an invalid attestation is ignored, so
//! no peer key ever enters the directory unauthenticated.

use std::collections::BTreeMap;

use rand::RngCore;
use thiserror::Error;

use crate::envelope::{CryptoSuite, PublicKey};
use crate::ids::{NodeId, TransactionId};
use crate::money::MoneyAmount;
use crate::wallet::{verify_attestation, Mode, WalletState};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("operation requires a different wallet mode")]
    WrongMode,
    #[error("target buyer not among lookup responses")]
    BuyerNotFound,
    #[error("quote malformed")]
    BadQuote,
    #[error("malformed discovery payload: {0}")]
    Malformed(#[from] WireError),
}

/// One-hop broadcast probe for buyers in range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupPacket {
    pub seller: NodeId,
    /// Freshness value, unique per broadcast.
    pub nonce: u64,
    /// Seller's public key plus office attestation, so responders can later
    /// verify the seller's enveloped quote.
    pub seller_public: PublicKey,
    pub attestation: Vec<u8>,
}

/// A buyer-mode node's answer to a lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupResponse {
    pub buyer: NodeId,
    /// Echo of the lookup nonce.
    pub nonce: u64,
    pub buyer_public: PublicKey,
    pub attestation: Vec<u8>,
}

/// The price of the goods, sent by the seller to the selected buyer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub txn: TransactionId,
    pub seller: NodeId,
    pub amount: MoneyAmount,
    pub description: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    InsufficientFunds,
    BadQuote,
    /// Another transaction is already pending on this wallet.
    Busy,
    WrongMode,
}

impl RejectReason {
    fn tag(self) -> u8 {
        match self {
            RejectReason::InsufficientFunds => 1,
            RejectReason::BadQuote => 2,
            RejectReason::Busy => 3,
            RejectReason::WrongMode => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, WireError> {
        match tag {
            1 => Ok(RejectReason::InsufficientFunds),
            2 => Ok(RejectReason::BadQuote),
            3 => Ok(RejectReason::Busy),
            4 => Ok(RejectReason::WrongMode),
            other => Err(WireError::UnknownTag(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject(RejectReason),
}

/// The buyer's answer to a quote. Accept implies the amount is reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuoteDecision {
    pub txn: TransactionId,
    pub decision: Decision,
}

/// Buyer-side in-memory registry of quotes. Deliberately not persisted: a
/// crash forgets pending quotes, and the commit engine's unknown-transaction
/// ABORT reply cleans up the seller's side.
#[derive(Debug, Clone, Default)]
pub struct QuoteBook {
    /// Accepted quotes whose commit exchange has not started: txn → (seller,
    /// reserved amount).
    pending: BTreeMap<TransactionId, (NodeId, MoneyAmount)>,
    /// Every decision already made, for idempotent re-delivery.
    decided: BTreeMap<TransactionId, Decision>,
}

impl QuoteBook {
    pub fn pending(&self, txn: &TransactionId) -> Option<(NodeId, MoneyAmount)> {
        self.pending.get(txn).copied()
    }

    /// Deterministic encoding of the book for state hashing.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.pending.len() as u32);
        for (txn, (seller, amount)) in &self.pending {
            w.put_raw(txn.as_bytes());
            w.put_raw(seller.as_bytes());
            w.put_u64(amount.minor_units());
        }
        w.put_u32(self.decided.len() as u32);
        for (txn, decision) in &self.decided {
            w.put_raw(txn.as_bytes());
            match decision {
                Decision::Accept => w.put_u8(0),
                Decision::Reject(r) => {
                    w.put_u8(1);
                    w.put_u8(r.tag());
                }
            }
        }
        w.into_bytes()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn take_pending(&mut self, txn: &TransactionId) -> Option<(NodeId, MoneyAmount)> {
        self.pending.remove(txn)
    }

    pub fn pending_txns(&self) -> Vec<TransactionId> {
        self.pending.keys().copied().collect()
    }
}

/// Builds a lookup packet. Seller mode only.
pub fn broadcast_lookup(
    wallet: &WalletState,
    rng: &mut dyn RngCore,
) -> Result<LookupPacket, DiscoveryError> {
    if wallet.mode != Mode::Seller {
        return Err(DiscoveryError::WrongMode);
    }
    Ok(LookupPacket {
        seller: wallet.node,
        nonce: rng.next_u64(),
        seller_public: wallet.keys.own_public.clone(),
        attestation: wallet.keys.attestation.clone(),
    })
}

/// A node's reaction to a lookup: buyer-mode nodes answer, everyone else
/// stays silent. An invalid seller attestation is also answered with
/// silence — untrusted input never changes state.
///
/// On response, the seller's key is installed into the wallet's peer
/// directory so the upcoming enveloped quote can be verified.
pub fn on_lookup(
    suite: &dyn CryptoSuite,
    wallet: &mut WalletState,
    packet: &LookupPacket,
) -> Option<LookupResponse> {
    if wallet.mode != Mode::Buyer {
        return None;
    }
    if !verify_attestation(
        suite,
        &wallet.keys.office_public,
        &packet.seller,
        &packet.seller_public,
        &packet.attestation,
    ) {
        return None;
    }
    wallet
        .keys
        .peer_directory
        .insert(packet.seller, packet.seller_public.clone());
    Some(LookupResponse {
        buyer: wallet.node,
        nonce: packet.nonce,
        buyer_public: wallet.keys.own_public.clone(),
        attestation: wallet.keys.attestation.clone(),
    })
}

/// Validates a lookup response and installs the buyer's key. Returns false
/// (and changes nothing) when the attestation does not verify or the nonce
/// is not the one broadcast.
pub fn accept_response(
    suite: &dyn CryptoSuite,
    wallet: &mut WalletState,
    expected_nonce: u64,
    response: &LookupResponse,
) -> bool {
    if response.nonce != expected_nonce {
        return false;
    }
    if !verify_attestation(
        suite,
        &wallet.keys.office_public,
        &response.buyer,
        &response.buyer_public,
        &response.attestation,
    ) {
        return false;
    }
    wallet
        .keys
        .peer_directory
        .insert(response.buyer, response.buyer_public.clone());
    true
}

/// Picks the target buyer out of the collected responses. Duplicate
/// responses collapse to one candidate.
pub fn select_buyer(
    responses: &[LookupResponse],
    target: NodeId,
) -> Result<NodeId, DiscoveryError> {
    if responses.iter().any(|r| r.buyer == target) {
        Ok(target)
    } else {
        Err(DiscoveryError::BuyerNotFound)
    }
}

/// Builds the quote for the selected buyer. "Cost is correct" means a
/// positive amount and a non-empty description; the human agreement about
/// the price happens outside the protocol.
pub fn make_quote(
    wallet: &WalletState,
    txn: TransactionId,
    amount: MoneyAmount,
    description: &[u8],
) -> Result<Quote, DiscoveryError> {
    if wallet.mode != Mode::Seller {
        return Err(DiscoveryError::WrongMode);
    }
    if amount.is_zero() || description.is_empty() {
        return Err(DiscoveryError::BadQuote);
    }
    Ok(Quote {
        txn,
        seller: wallet.node,
        amount,
        description: description.to_vec(),
    })
}

/// The buyer's decision on a quote. Accepting reserves the amount; a
/// re-delivered quote gets the same decision back without touching the
/// reservation again. One pending transaction at a time: balances are
/// snapshot-recovered per transaction, which is only sound when transactions
/// on one wallet do not overlap.
pub fn on_quote(
    wallet: &mut WalletState,
    book: &mut QuoteBook,
    quote: &Quote,
) -> QuoteDecision {
    if let Some(decision) = book.decided.get(&quote.txn) {
        return QuoteDecision {
            txn: quote.txn,
            decision: *decision,
        };
    }
    let decision = if wallet.mode != Mode::Buyer {
        Decision::Reject(RejectReason::WrongMode)
    } else if quote.amount.is_zero() || quote.description.is_empty() {
        Decision::Reject(RejectReason::BadQuote)
    } else if book.has_pending() {
        Decision::Reject(RejectReason::Busy)
    } else if wallet.reserve(quote.amount).is_err() {
        Decision::Reject(RejectReason::InsufficientFunds)
    } else {
        book.pending.insert(quote.txn, (quote.seller, quote.amount));
        Decision::Accept
    };
    book.decided.insert(quote.txn, decision);
    QuoteDecision {
        txn: quote.txn,
        decision,
    }
}

// ── wire encodings ──

impl LookupPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(self.seller.as_bytes());
        w.put_u64(self.nonce);
        w.put_bytes(&self.seller_public.0);
        w.put_bytes(&self.attestation);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiscoveryError> {
        let mut r = Reader::new(bytes);
        let seller = NodeId(r.get_array::<16>()?);
        let nonce = r.get_u64()?;
        let seller_public = PublicKey(r.get_bytes()?.to_vec());
        let attestation = r.get_bytes()?.to_vec();
        r.finish()?;
        Ok(LookupPacket {
            seller,
            nonce,
            seller_public,
            attestation,
        })
    }
}

impl LookupResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(self.buyer.as_bytes());
        w.put_u64(self.nonce);
        w.put_bytes(&self.buyer_public.0);
        w.put_bytes(&self.attestation);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiscoveryError> {
        let mut r = Reader::new(bytes);
        let buyer = NodeId(r.get_array::<16>()?);
        let nonce = r.get_u64()?;
        let buyer_public = PublicKey(r.get_bytes()?.to_vec());
        let attestation = r.get_bytes()?.to_vec();
        r.finish()?;
        Ok(LookupResponse {
            buyer,
            nonce,
            buyer_public,
            attestation,
        })
    }
}

impl Quote {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(self.txn.as_bytes());
        w.put_raw(self.seller.as_bytes());
        w.put_u64(self.amount.minor_units());
        w.put_bytes(&self.description);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiscoveryError> {
        let mut r = Reader::new(bytes);
        let txn = TransactionId::from_bytes(r.get_array::<16>()?);
        let seller = NodeId(r.get_array::<16>()?);
        let amount = MoneyAmount::new(r.get_u64()?);
        let description = r.get_bytes()?.to_vec();
        r.finish()?;
        Ok(Quote {
            txn,
            seller,
            amount,
            description,
        })
    }
}

impl QuoteDecision {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(self.txn.as_bytes());
        match self.decision {
            Decision::Accept => w.put_u8(0),
            Decision::Reject(reason) => {
                w.put_u8(1);
                w.put_u8(reason.tag());
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiscoveryError> {
        let mut r = Reader::new(bytes);
        let txn = TransactionId::from_bytes(r.get_array::<16>()?);
        let decision = match r.get_u8()? {
            0 => Decision::Accept,
            1 => Decision::Reject(RejectReason::from_tag(r.get_u8()?)?),
            other => return Err(DiscoveryError::Malformed(WireError::UnknownTag(other))),
        };
        r.finish()?;
        Ok(QuoteDecision { txn, decision })
    }
}
