//! One protocol node: wallet + stable log + state machines + the effect
//! interpreter that binds them.
//!
//! Everything protocol-shaped lives here or below; the simulator and the
//! datagram CLI runtime both drive this same type, so there is no protocol
//! logic that only one of the two paths executes. A host owns the
//! transport, the clock, and durable storage; the node consumes decoded
//! frames and timer expiries and produces frames and timer commands.
//!
//! Crash injection: every executed effect bumps a per-node counter, and a
//! [`FaultHook`] may declare a crash after any effect. Durable writes made
//! before the crash point stay; queued frames made before the crash point
//! are handed back so the network can still deliver them; everything else
//! is lost, exactly like a process kill.
//!
//! Wire framing: `"PPAY"` magic, u16 version, u8 frame type (LOOKUP=1,
//! LOOKUP_RESPONSE=2, ENVELOPED=3), u32 LE payload length, payload. Lookup
//! traffic is clear; everything after it travels enveloped with the sender
//! id prefixed so the receiver can pick the right verification key. Frames
//! that fail any validation are dropped with a trace note and no state
//! change.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::commit::{
    buyer_on_message, buyer_on_timeout, recover_txn, seller_on_message, seller_on_timeout,
    seller_start, BuyerContext, BuyerPhase, Effect, EngineError, ProtocolConfig, ProtocolMessage,
    RecoveredTxn, SellerOutcome, SellerPhase, WalletOp,
};
use crate::discovery::{
    accept_response, broadcast_lookup, make_quote, on_lookup, on_quote, select_buyer, Decision,
    LookupPacket, LookupResponse, Quote, QuoteBook, QuoteDecision, RejectReason,
};
use crate::envelope::{open, seal, CryptoSuite, Envelope, PrivateKey};
use crate::ids::{NodeId, TransactionId};
use crate::money::MoneyAmount;
use crate::stable_log::{
    LogRecord, LogStorage, RecordBody, StableLog, StorageFailure, TxnRecovery,
};
use crate::wallet::{Mode, TxnOutcome, WalletError, WalletState};
use crate::wire::{Reader, WireError, Writer};

pub const FRAME_MAGIC: [u8; 4] = *b"PPAY";
pub const FRAME_VERSION: u16 = 1;

const FRAME_LOOKUP: u8 = 1;
const FRAME_LOOKUP_RESPONSE: u8 = 2;
const FRAME_ENVELOPED: u8 = 3;

/// Payload carried inside an envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerPayload {
    Quote(Quote),
    Decision(QuoteDecision),
    Protocol(ProtocolMessage),
}

impl PeerPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            PeerPayload::Quote(q) => {
                w.put_u8(0x10);
                w.put_raw(&q.to_bytes());
            }
            PeerPayload::Decision(d) => {
                w.put_u8(0x11);
                w.put_raw(&d.to_bytes());
            }
            PeerPayload::Protocol(m) => {
                w.put_raw(&m.to_bytes());
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let Some(&tag) = bytes.first() else {
            return Err(WireError::Truncated { needed: 1 });
        };
        match tag {
            0x10 => Quote::from_bytes(&bytes[1..])
                .map(PeerPayload::Quote)
                .map_err(|_| WireError::UnknownTag(tag)),
            0x11 => QuoteDecision::from_bytes(&bytes[1..])
                .map(PeerPayload::Decision)
                .map_err(|_| WireError::UnknownTag(tag)),
            0x20..=0x24 => ProtocolMessage::from_bytes(bytes).map(PeerPayload::Protocol),
            other => Err(WireError::UnknownTag(other)),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PeerPayload::Quote(_) => "QUOTE",
            PeerPayload::Decision(_) => "QUOTE-DECISION",
            PeerPayload::Protocol(m) => m.kind_name(),
        }
    }
}

/// Decoded datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FramePayload {
    Lookup(LookupPacket),
    LookupResponse(LookupResponse),
    Enveloped { sender: NodeId, envelope: Envelope },
}

impl FramePayload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FramePayload::Lookup(_) => "LOOKUP",
            FramePayload::LookupResponse(_) => "LOOKUP-RESPONSE",
            FramePayload::Enveloped { .. } => "ENVELOPED",
        }
    }
}

pub fn encode_frame(payload: &FramePayload) -> Vec<u8> {
    let (frame_type, body) = match payload {
        FramePayload::Lookup(p) => (FRAME_LOOKUP, p.to_bytes()),
        FramePayload::LookupResponse(r) => (FRAME_LOOKUP_RESPONSE, r.to_bytes()),
        FramePayload::Enveloped { sender, envelope } => {
            let mut w = Writer::new();
            w.put_raw(sender.as_bytes());
            w.put_raw(&envelope.to_bytes());
            (FRAME_ENVELOPED, w.into_bytes())
        }
    };
    let mut w = Writer::new();
    w.put_raw(&FRAME_MAGIC);
    w.put_u16(FRAME_VERSION);
    w.put_u8(frame_type);
    w.put_bytes(&body);
    w.into_bytes()
}

pub fn decode_frame(bytes: &[u8]) -> Result<FramePayload, WireError> {
    let mut r = Reader::new(bytes);
    r.expect_magic(&FRAME_MAGIC)?;
    let version = r.get_u16()?;
    if version != FRAME_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let frame_type = r.get_u8()?;
    let body = r.get_bytes()?;
    r.finish()?;
    match frame_type {
        FRAME_LOOKUP => Ok(FramePayload::Lookup(
            LookupPacket::from_bytes(body).map_err(|_| WireError::UnknownTag(frame_type))?,
        )),
        FRAME_LOOKUP_RESPONSE => Ok(FramePayload::LookupResponse(
            LookupResponse::from_bytes(body).map_err(|_| WireError::UnknownTag(frame_type))?,
        )),
        FRAME_ENVELOPED => {
            let mut br = Reader::new(body);
            let sender = NodeId(br.get_array::<16>()?);
            let envelope = Envelope::from_bytes(br.get_raw(br.remaining())?)
                .map_err(|_| WireError::UnknownTag(frame_type))?;
            Ok(FramePayload::Enveloped { sender, envelope })
        }
        other => Err(WireError::UnknownTag(other)),
    }
}

/// Where an outgoing frame should go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    /// One-hop broadcast to every neighbour.
    Broadcast,
    Node(NodeId),
}

#[derive(Debug, Clone)]
pub struct OutFrame {
    pub dest: Dest,
    pub bytes: Vec<u8>,
}

/// Timers a node can ask its host for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerKind {
    /// Commit-engine timer for one transaction.
    Txn(TransactionId),
    /// End of the lookup collection window (tagged with the nonce).
    LookupWindow(u64),
    /// Waiting for the buyer's decision on a quote.
    QuoteDecision(TransactionId),
    /// Reservation expiry for an accepted quote whose commit exchange never
    /// started.
    QuoteExpiry(TransactionId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerCmd {
    Start { kind: TimerKind, units: u32 },
    Cancel { kind: TimerKind },
}

/// Seller-side terminal report for one attempted sale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaleOutcome {
    Committed,
    Aborted,
    /// Commit decided and durable, acknowledgement still outstanding.
    CommittedUnacked,
    BuyerNotFound,
    Rejected(RejectReason),
    /// The buyer never answered the quote.
    NoDecision,
}

/// Things a host may want to surface or trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    SellerTransition {
        txn: TransactionId,
        from: &'static str,
        to: &'static str,
        input: String,
    },
    BuyerTransition {
        txn: TransactionId,
        from: &'static str,
        to: &'static str,
        input: String,
    },
    WalletApplied {
        txn: TransactionId,
        op: String,
        balance: MoneyAmount,
        reserved: MoneyAmount,
    },
    SaleConcluded {
        txn: Option<TransactionId>,
        outcome: SaleOutcome,
    },
    PurchaseConcluded {
        txn: TransactionId,
        outcome: TxnOutcome,
    },
    Dropped {
        reason: String,
    },
    Note {
        text: String,
    },
}

/// Everything a processing step produced for the host.
#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub frames: Vec<OutFrame>,
    pub timers: Vec<TimerCmd>,
    pub events: Vec<NodeEvent>,
}

/// The node stopped mid-step, as a crashed process would. Frames queued
/// before the crash point are preserved: they left the process before it
/// died.
#[derive(Debug)]
pub struct Crashed {
    pub partial: StepOutput,
}

/// Decides whether the node dies after executing a given effect.
/// `effect_index` counts every effect the node has ever executed, from 1.
pub trait FaultHook {
    fn crash_after_effect(&mut self, effect_index: u64) -> bool;
}

/// Never crashes.
pub struct NoFaults;

impl FaultHook for NoFaults {
    fn crash_after_effect(&mut self, _effect_index: u64) -> bool {
        false
    }
}

/// Crash exactly after the node's n-th executed effect.
#[derive(Debug, Clone, Copy)]
pub struct CrashAtEffect(pub u64);

impl FaultHook for CrashAtEffect {
    fn crash_after_effect(&mut self, effect_index: u64) -> bool {
        effect_index == self.0
    }
}

/// How per-message secrets are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecretMode {
    /// Sample from the node RNG (normal operation).
    Rng,
    /// Derive deterministically from the payload, so identical messages
    /// seal identically. Only the exhaustive explorer uses this: its state
    /// memoization needs byte-stable frames across interleavings.
    Derived,
}

/// Durable storage slots for a node's wallet record and key file.
pub trait NodeStore {
    fn save_wallet(&mut self, bytes: &[u8]) -> Result<(), StorageFailure>;
    fn load_wallet(&self) -> Result<Option<Vec<u8>>, StorageFailure>;
    fn save_keys(&mut self, bytes: &[u8]) -> Result<(), StorageFailure>;
    fn load_keys(&self) -> Result<Option<Vec<u8>>, StorageFailure>;
}

/// In-memory store for tests and the simulator.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    wallet: Option<Vec<u8>>,
    keys: Option<Vec<u8>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl NodeStore for MemStore {
    fn save_wallet(&mut self, bytes: &[u8]) -> Result<(), StorageFailure> {
        self.wallet = Some(bytes.to_vec());
        Ok(())
    }

    fn load_wallet(&self) -> Result<Option<Vec<u8>>, StorageFailure> {
        Ok(self.wallet.clone())
    }

    fn save_keys(&mut self, bytes: &[u8]) -> Result<(), StorageFailure> {
        self.keys = Some(bytes.to_vec());
        Ok(())
    }

    fn load_keys(&self) -> Result<Option<Vec<u8>>, StorageFailure> {
        Ok(self.keys.clone())
    }
}

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error("no wallet record in store")]
    NoWallet,
    #[error(transparent)]
    Wallet(#[from] WalletError),
    #[error(transparent)]
    Storage(#[from] StorageFailure),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn encode_seller_phase(w: &mut Writer, phase: &SellerPhase) {
    match *phase {
        SellerPhase::Idle => w.put_u8(0),
        SellerPhase::Preparing {
            amount,
            buyer,
            retries,
            ..
        } => {
            w.put_u8(1);
            w.put_u64(amount.minor_units());
            w.put_raw(buyer.as_bytes());
            w.put_u32(retries);
        }
        SellerPhase::Committing {
            amount,
            buyer,
            retries,
            ..
        } => {
            w.put_u8(2);
            w.put_u64(amount.minor_units());
            w.put_raw(buyer.as_bytes());
            w.put_u32(retries);
        }
        SellerPhase::Aborting { buyer, retries, .. } => {
            w.put_u8(3);
            w.put_raw(buyer.as_bytes());
            w.put_u32(retries);
        }
        SellerPhase::Done { outcome, .. } => {
            w.put_u8(4);
            match outcome {
                SellerOutcome::Committed => w.put_u8(0),
                SellerOutcome::Aborted => w.put_u8(1),
                SellerOutcome::CommittedUnacked { buyer, amount } => {
                    w.put_u8(2);
                    w.put_raw(buyer.as_bytes());
                    w.put_u64(amount.minor_units());
                }
            }
        }
    }
}

fn encode_buyer_phase(w: &mut Writer, phase: &BuyerPhase) {
    match *phase {
        BuyerPhase::Idle => w.put_u8(0),
        BuyerPhase::Prepared {
            amount,
            seller,
            nudges,
            ..
        } => {
            w.put_u8(1);
            w.put_u64(amount.minor_units());
            match seller {
                None => w.put_u8(0),
                Some(id) => {
                    w.put_u8(1);
                    w.put_raw(id.as_bytes());
                }
            }
            w.put_u32(nudges);
        }
        BuyerPhase::Committed { .. } => w.put_u8(2),
        BuyerPhase::Aborted { .. } => w.put_u8(3),
    }
}

/// An in-flight sale on the seller side, from lookup to quote decision.
#[derive(Debug, Clone)]
struct SaleIntent {
    target: NodeId,
    amount: MoneyAmount,
    description: Vec<u8>,
    nonce: u64,
    responses: Vec<LookupResponse>,
    quoted_txn: Option<TransactionId>,
}

/// A protocol node. Generic over log storage and the wallet store so the
/// simulator can keep everything in memory and clone whole nodes, while the
/// CLI backs them with files.
#[derive(Clone)]
pub struct Node<L: LogStorage, S: NodeStore> {
    pub wallet: WalletState,
    log: StableLog<L>,
    store: S,
    cfg: ProtocolConfig,
    suite: Arc<dyn CryptoSuite + Send + Sync>,
    rng: ChaCha20Rng,
    secret_mode: SecretMode,
    sellers: BTreeMap<TransactionId, SellerPhase>,
    buyers: BTreeMap<TransactionId, BuyerPhase>,
    quotes: QuoteBook,
    seen_lookups: BTreeSet<(NodeId, u64)>,
    sale: Option<SaleIntent>,
    effect_counter: u64,
    /// Checker-validation mutation: drop the UNDO/REDO appends from the
    /// participant's prepare transition. Exists so the verification suite
    /// can prove its own checkers notice the resulting atomicity break;
    /// never set outside tests and simulations.
    pub mutation_skip_prepare_logging: bool,
}

impl<L: LogStorage, S: NodeStore> Node<L, S> {
    /// Builds a freshly provisioned node and persists its initial state.
    pub fn create(
        wallet: WalletState,
        log_storage: L,
        mut store: S,
        cfg: ProtocolConfig,
        suite: Arc<dyn CryptoSuite + Send + Sync>,
        rng: ChaCha20Rng,
        secret_mode: SecretMode,
    ) -> Result<Self, RecoverError> {
        let log = StableLog::open(log_storage)?;
        store.save_wallet(&wallet.to_bytes())?;
        store.save_keys(&wallet.keys_to_bytes())?;
        Ok(Node {
            wallet,
            log,
            store,
            cfg,
            suite,
            rng,
            secret_mode,
            sellers: BTreeMap::new(),
            buyers: BTreeMap::new(),
            quotes: QuoteBook::default(),
            seen_lookups: BTreeSet::new(),
            sale: None,
            effect_counter: 0,
            mutation_skip_prepare_logging: false,
        })
    }

    /// Rebuilds a node from durable state after a restart: loads the wallet
    /// record, scans the log, restores balances from snapshots for
    /// unsettled transactions, reinstates state machines, and emits the
    /// resume effects (retransmissions, tidy-up erases).
    pub fn recover(
        log_storage: L,
        store: S,
        cfg: ProtocolConfig,
        suite: Arc<dyn CryptoSuite + Send + Sync>,
        rng: ChaCha20Rng,
        secret_mode: SecretMode,
        hook: &mut dyn FaultHook,
    ) -> Result<(Self, StepOutput), (RecoverError, Option<Crashed>)> {
        let fail = |e: RecoverError| (e, None);

        let wallet_bytes = store
            .load_wallet()
            .map_err(|e| fail(e.into()))?
            .ok_or_else(|| fail(RecoverError::NoWallet))?;
        let key_bytes = store
            .load_keys()
            .map_err(|e| fail(e.into()))?
            .ok_or_else(|| fail(RecoverError::NoWallet))?;
        let private = WalletState::keys_from_bytes(&key_bytes).map_err(|e| fail(e.into()))?;
        let wallet = WalletState::from_bytes(&wallet_bytes, private).map_err(|e| fail(e.into()))?;

        let log = StableLog::open(log_storage).map_err(|e| fail(e.into()))?;
        let summary = log.summary();
        let mut node = Node {
            wallet,
            log,
            store,
            cfg,
            suite,
            rng,
            secret_mode,
            sellers: BTreeMap::new(),
            buyers: BTreeMap::new(),
            quotes: QuoteBook::default(),
            seen_lookups: BTreeSet::new(),
            sale: None,
            effect_counter: 0,
            mutation_skip_prepare_logging: false,
        };

        let mut out = StepOutput::default();
        let mut pending_effects: Vec<(TransactionId, Vec<Effect>)> = Vec::new();
        for (txn, class) in summary {
            let records: Vec<LogRecord> =
                node.log.records_for(&txn).into_iter().cloned().collect();
            let entry = RecoveredTxn {
                txn,
                class,
                records,
            };
            let mut role = recover_txn(&entry, &node.cfg).map_err(|e| fail(e.into()))?;
            if let Some(phase) = role.seller {
                node.sellers.insert(txn, phase);
            }
            if let Some(mut phase) = role.buyer {
                // The durable records do not carry the coordinator's id, but
                // transaction ids start with the initiator's 8-byte prefix.
                // When exactly one known peer matches, the recovered
                // participant can resume repeating its vote instead of
                // waiting passively.
                if let BuyerPhase::Prepared {
                    txn,
                    amount,
                    seller: None,
                    nudges,
                } = phase
                {
                    if let Some(peer) = node.resolve_peer_by_prefix(&txn) {
                        phase = BuyerPhase::Prepared {
                            txn,
                            amount,
                            seller: Some(peer),
                            nudges,
                        };
                        role.effects.push(Effect::StartTimer {
                            txn,
                            units: node.cfg.timeout_units,
                        });
                    }
                }
                // A committed participant's acknowledgement may have been
                // the very thing the crash (or the network) ate. Saying it
                // again is free and un-parks a coordinator that ran out of
                // retransmissions.
                if matches!(phase, BuyerPhase::Committed { .. }) {
                    if let Some(peer) = node.resolve_peer_by_prefix(&txn) {
                        role.effects.insert(
                            0,
                            Effect::Send {
                                to: peer,
                                msg: ProtocolMessage::Committed { txn },
                            },
                        );
                    }
                }
                node.buyers.insert(txn, phase);
            }
            if let Some(restore) = role.restore {
                node.wallet.balance = restore.snapshot.balance;
                node.wallet.reserved = restore.snapshot.reserved;
                out.events.push(NodeEvent::Note {
                    text: format!(
                        "recovery restored balances for {txn}: balance={} reserved={}",
                        restore.snapshot.balance, restore.snapshot.reserved
                    ),
                });
            }
            // A transaction rolled back to in-doubt has no outcome yet: a
            // crash between the applied wallet op and its COMPLETE record
            // leaves a recorded outcome whose money movement was just
            // reversed. Expunge it, or the guarded re-apply would skip the
            // movement when the decision arrives again.
            if matches!(role.buyer, Some(BuyerPhase::Prepared { .. })) {
                node.wallet.history.remove(&txn);
            }
            if !role.effects.is_empty() {
                pending_effects.push((txn, role.effects));
            }
            out.events.push(NodeEvent::Note {
                text: format!("recovered {txn}: {class:?}"),
            });
        }
        node.persist_wallet().map_err(|e| fail(e.into()))?;

        for (txn, effects) in pending_effects {
            if let Err(crashed) = node.execute(txn, effects, hook, &mut out) {
                return Err((RecoverError::NoWallet, Some(crashed)));
            }
        }
        Ok((node, out))
    }

    pub fn node_id(&self) -> NodeId {
        self.wallet.node
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn log_records(&self) -> &[LogRecord] {
        self.log.records()
    }

    pub fn log_summary(&self) -> BTreeMap<TransactionId, TxnRecovery> {
        self.log.summary()
    }

    pub fn seller_phases(&self) -> &BTreeMap<TransactionId, SellerPhase> {
        &self.sellers
    }

    pub fn buyer_phases(&self) -> &BTreeMap<TransactionId, BuyerPhase> {
        &self.buyers
    }

    pub fn effect_count(&self) -> u64 {
        self.effect_counter
    }

    /// Amount reserved against quotes that have not entered the commit
    /// exchange yet.
    pub fn pending_quote_total(&self) -> MoneyAmount {
        let mut total = MoneyAmount::ZERO;
        for txn in self.quotes.pending_txns() {
            if let Some((_, amount)) = self.quotes.pending(&txn) {
                total = total.checked_add(amount).unwrap_or(total);
            }
        }
        total
    }

    /// True when no transaction, sale, or quote is unsettled on this node.
    pub fn is_quiescent(&self) -> bool {
        self.sale.is_none()
            && !self.quotes.has_pending()
            && self.sellers.values().all(|p| {
                matches!(
                    p,
                    SellerPhase::Idle | SellerPhase::Done { .. }
                )
            })
            && self
                .buyers
                .values()
                .all(|p| !matches!(p, BuyerPhase::Prepared { .. }))
    }

    /// Transactions parked as committed-but-unacknowledged.
    pub fn unacked_txns(&self) -> Vec<TransactionId> {
        self.sellers
            .iter()
            .filter_map(|(txn, p)| match p {
                SellerPhase::Done {
                    outcome: SellerOutcome::CommittedUnacked { .. },
                    ..
                } => Some(*txn),
                _ => None,
            })
            .collect()
    }

    /// Consumes the node (after a crash) and hands back the durable pieces.
    pub fn into_durable(self) -> (L, S) {
        (self.log.into_storage(), self.store)
    }

    /// Transaction ids start with the initiating node's 8-byte prefix; when
    /// exactly one known peer matches, that is the coordinator.
    fn resolve_peer_by_prefix(&self, txn: &TransactionId) -> Option<NodeId> {
        let mut matches = self
            .wallet
            .keys
            .peer_directory
            .keys()
            .filter(|id| id.0[..8] == txn.0[..8]);
        match (matches.next().copied(), matches.next()) {
            (Some(peer), None) => Some(peer),
            _ => None,
        }
    }

    /// Deterministic encoding of all protocol-relevant state, durable and
    /// in-memory, for the exhaustive explorer's memoization. Excludes the
    /// effect counter and RNG: neither influences behavior from a given
    /// state under the explorer's deterministic secret derivation.
    pub fn canonical_state(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(&self.wallet.to_bytes());
        let log_bytes = self
            .log
            .storage()
            .read_all()
            .unwrap_or_else(|_| b"unreadable".to_vec());
        w.put_bytes(&log_bytes);
        w.put_u32(self.sellers.len() as u32);
        for (txn, phase) in &self.sellers {
            w.put_raw(txn.as_bytes());
            encode_seller_phase(&mut w, phase);
        }
        w.put_u32(self.buyers.len() as u32);
        for (txn, phase) in &self.buyers {
            w.put_raw(txn.as_bytes());
            encode_buyer_phase(&mut w, phase);
        }
        w.put_bytes(&self.quotes.canonical_bytes());
        w.put_u32(self.seen_lookups.len() as u32);
        for (node, nonce) in &self.seen_lookups {
            w.put_raw(node.as_bytes());
            w.put_u64(*nonce);
        }
        match &self.sale {
            None => w.put_u8(0),
            Some(sale) => {
                w.put_u8(1);
                w.put_raw(sale.target.as_bytes());
                w.put_u64(sale.amount.minor_units());
                w.put_u64(sale.nonce);
                w.put_u32(sale.responses.len() as u32);
                for r in &sale.responses {
                    w.put_raw(r.buyer.as_bytes());
                }
                match sale.quoted_txn {
                    None => w.put_u8(0),
                    Some(txn) => {
                        w.put_u8(1);
                        w.put_raw(txn.as_bytes());
                    }
                }
            }
        }
        w.put_u8(self.mutation_skip_prepare_logging as u8);
        w.into_bytes()
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<(), RecoverError> {
        self.wallet.mode = mode;
        self.persist_wallet()?;
        Ok(())
    }

    fn persist_wallet(&mut self) -> Result<(), StorageFailure> {
        self.store.save_wallet(&self.wallet.to_bytes())
    }

    // ── outbound plumbing ──

    fn fresh_secret(&mut self, payload_bytes: &[u8], to: &NodeId) -> Vec<u8> {
        match self.secret_mode {
            SecretMode::Rng => self.suite.gen_secret(&mut self.rng),
            SecretMode::Derived => {
                let mut w = Writer::new();
                w.put_raw(b"derived-secret");
                w.put_raw(self.wallet.node.as_bytes());
                w.put_raw(to.as_bytes());
                w.put_raw(payload_bytes);
                let digest = self.suite.hash(&w.into_bytes());
                let mut secret = digest;
                while secret.len() < self.suite.secret_len() {
                    let extended = self.suite.hash(&secret);
                    secret.extend_from_slice(&extended);
                }
                secret.truncate(self.suite.secret_len());
                secret
            }
        }
    }

    /// Seals a payload for a peer whose key must already be in the
    /// directory. Returns None (with a trace note) when it is not.
    fn seal_to(
        &mut self,
        to: NodeId,
        payload: &PeerPayload,
        out: &mut StepOutput,
    ) -> Option<OutFrame> {
        let Some(peer_key) = self.wallet.keys.peer_directory.get(&to).cloned() else {
            out.events.push(NodeEvent::Dropped {
                reason: format!("no key for peer {to}, cannot send {}", payload.kind_name()),
            });
            return None;
        };
        let bytes = payload.to_bytes();
        let secret = self.fresh_secret(&bytes, &to);
        let own_private = self.wallet.keys.own_private.clone();
        let envelope = match seal(
            self.suite.as_ref(),
            &bytes,
            &own_private,
            &peer_key,
            &secret,
            &mut self.rng,
        ) {
            Ok(env) => env,
            Err(e) => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("seal to {to} failed: {e}"),
                });
                return None;
            }
        };
        Some(OutFrame {
            dest: Dest::Node(to),
            bytes: encode_frame(&FramePayload::Enveloped {
                sender: self.wallet.node,
                envelope,
            }),
        })
    }

    // ── effect execution ──

    fn execute(
        &mut self,
        _txn: TransactionId,
        effects: Vec<Effect>,
        hook: &mut dyn FaultHook,
        out: &mut StepOutput,
    ) -> Result<(), Crashed> {
        for effect in effects {
            let crashed = match self.run_effect(effect, out) {
                Ok(()) => {
                    self.effect_counter += 1;
                    hook.crash_after_effect(self.effect_counter)
                }
                Err(_storage) => true, // storage failure: node treated as crashed
            };
            if crashed {
                return Err(Crashed {
                    partial: std::mem::take(out),
                });
            }
        }
        Ok(())
    }

    fn run_effect(&mut self, effect: Effect, out: &mut StepOutput) -> Result<(), StorageFailure> {
        match effect {
            Effect::Send { to, msg } => {
                if let Some(frame) = self.seal_to(to, &PeerPayload::Protocol(msg), out) {
                    out.frames.push(frame);
                }
                Ok(())
            }
            Effect::AppendLog(record) => self.log.append(record),
            Effect::StartTimer { txn, units } => {
                out.timers.push(TimerCmd::Start {
                    kind: TimerKind::Txn(txn),
                    units,
                });
                Ok(())
            }
            Effect::CancelTimer { txn } => {
                out.timers.push(TimerCmd::Cancel {
                    kind: TimerKind::Txn(txn),
                });
                Ok(())
            }
            Effect::Apply { txn, peer, op } => {
                if self.wallet.has_outcome(&txn) {
                    out.events.push(NodeEvent::Note {
                        text: format!("apply for {txn} skipped: outcome already recorded"),
                    });
                    return Ok(());
                }
                let (result, op_name, outcome) = match op {
                    WalletOp::Credit(a) => (self.wallet.credit(a), "credit", TxnOutcome::Committed),
                    WalletOp::DebitReserved(a) => (
                        self.wallet.debit_reserved(a),
                        "debit_reserved",
                        TxnOutcome::Committed,
                    ),
                    WalletOp::Release(a) => {
                        (self.wallet.release(a), "release", TxnOutcome::Aborted)
                    }
                };
                if let Err(e) = result {
                    // A wallet op out of step with the state machines is a
                    // bug; surface it loudly in debug and trace it in
                    // release rather than corrupting balances.
                    debug_assert!(false, "wallet op {op_name} failed: {e}");
                    out.events.push(NodeEvent::Dropped {
                        reason: format!("wallet op {op_name} for {txn} failed: {e}"),
                    });
                    return Ok(());
                }
                let amount = match op {
                    WalletOp::Credit(a) | WalletOp::DebitReserved(a) | WalletOp::Release(a) => a,
                };
                if let Err(e) = self
                    .wallet
                    .record_outcome(self.suite.as_ref(), txn, outcome, peer, amount)
                {
                    debug_assert!(false, "outcome record failed: {e}");
                }
                self.persist_wallet()?;
                out.events.push(NodeEvent::WalletApplied {
                    txn,
                    op: op_name.to_string(),
                    balance: self.wallet.balance,
                    reserved: self.wallet.reserved,
                });
                Ok(())
            }
            Effect::EraseTxn { txn } => {
                self.log.append(LogRecord::new(txn, RecordBody::DoneErase))
                // State-machine tombstones stay in memory so duplicate
                // messages keep getting the terminal answer.
            }
        }
    }

    // ── seller entry point ──

    /// Starts a sale: broadcast a lookup for `target` and quote `amount`
    /// when it answers. One sale at a time.
    pub fn start_sale(
        &mut self,
        target: NodeId,
        amount: MoneyAmount,
        description: &[u8],
        hook: &mut dyn FaultHook,
    ) -> Result<StepOutput, Crashed> {
        let mut out = StepOutput::default();
        if self.sale.is_some() {
            out.events.push(NodeEvent::Dropped {
                reason: "sale already in progress".into(),
            });
            return Ok(out);
        }
        if amount.is_zero() {
            out.events.push(NodeEvent::SaleConcluded {
                txn: None,
                outcome: SaleOutcome::Rejected(RejectReason::BadQuote),
            });
            return Ok(out);
        }
        let packet = match broadcast_lookup(&self.wallet, &mut self.rng) {
            Ok(p) => p,
            Err(e) => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("lookup refused: {e}"),
                });
                return Ok(out);
            }
        };
        self.sale = Some(SaleIntent {
            target,
            amount,
            description: description.to_vec(),
            nonce: packet.nonce,
            responses: Vec::new(),
            quoted_txn: None,
        });
        out.frames.push(OutFrame {
            dest: Dest::Broadcast,
            bytes: encode_frame(&FramePayload::Lookup(packet.clone())),
        });
        out.timers.push(TimerCmd::Start {
            kind: TimerKind::LookupWindow(packet.nonce),
            units: self.cfg.timeout_units,
        });
        let _ = hook;
        Ok(out)
    }

    // ── inbound dispatch ──

    /// Processes one decoded frame. Malformed or unverifiable input drops
    /// with a trace note and no state change.
    pub fn handle_frame(
        &mut self,
        bytes: &[u8],
        hook: &mut dyn FaultHook,
    ) -> Result<StepOutput, Crashed> {
        let mut out = StepOutput::default();
        let payload = match decode_frame(bytes) {
            Ok(p) => p,
            Err(e) => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("bad frame: {e}"),
                });
                return Ok(out);
            }
        };
        match payload {
            FramePayload::Lookup(packet) => {
                if self.on_lookup_frame(packet, &mut out).is_err() {
                    return Err(Crashed { partial: out });
                }
                Ok(out)
            }
            FramePayload::LookupResponse(response) => {
                if self.on_lookup_response(response, &mut out).is_err() {
                    return Err(Crashed { partial: out });
                }
                Ok(out)
            }
            FramePayload::Enveloped { sender, envelope } => {
                self.on_enveloped(sender, envelope, hook, out)
            }
        }
    }

    /// Processes a timer expiry.
    pub fn handle_timer(
        &mut self,
        kind: TimerKind,
        hook: &mut dyn FaultHook,
    ) -> Result<StepOutput, Crashed> {
        let mut out = StepOutput::default();
        match kind {
            TimerKind::Txn(txn) => {
                if let Some(phase) = self.sellers.get(&txn).copied() {
                    let (next, effects) = seller_on_timeout(&phase, &self.cfg);
                    self.note_seller_transition(&phase, &next, "timeout", &mut out);
                    self.sellers.insert(txn, next);
                    self.execute(txn, effects, hook, &mut out)?;
                    self.emit_seller_terminal(txn, &mut out);
                } else if let Some(phase) = self.buyers.get(&txn).copied() {
                    let (next, effects) = buyer_on_timeout(&phase, &self.cfg);
                    self.note_buyer_transition(&phase, &next, "timeout", &mut out);
                    self.buyers.insert(txn, next);
                    self.execute(txn, effects, hook, &mut out)?;
                }
                Ok(out)
            }
            TimerKind::LookupWindow(nonce) => {
                self.on_lookup_window(nonce, hook, out)
            }
            TimerKind::QuoteDecision(txn) => {
                if let Some(sale) = &self.sale {
                    if sale.quoted_txn == Some(txn) {
                        self.sale = None;
                        out.events.push(NodeEvent::SaleConcluded {
                            txn: Some(txn),
                            outcome: SaleOutcome::NoDecision,
                        });
                    }
                }
                Ok(out)
            }
            TimerKind::QuoteExpiry(txn) => {
                if let Some((_, amount)) = self.quotes.take_pending(&txn) {
                    if let Err(e) = self.wallet.release(amount) {
                        debug_assert!(false, "expiry release failed: {e}");
                    }
                    out.events.push(NodeEvent::Note {
                        text: format!("quote {txn} expired, reservation released"),
                    });
                }
                Ok(out)
            }
        }
    }

    fn on_lookup_frame(
        &mut self,
        packet: LookupPacket,
        out: &mut StepOutput,
    ) -> Result<(), StorageFailure> {
        if !self.seen_lookups.insert((packet.seller, packet.nonce)) {
            out.events.push(NodeEvent::Dropped {
                reason: "duplicate lookup".into(),
            });
            return Ok(());
        }
        match on_lookup(self.suite.as_ref(), &mut self.wallet, &packet) {
            Some(response) => {
                // The seller's key just entered the directory; make it
                // durable so a restart mid-exchange can still verify the
                // coordinator's envelopes.
                self.persist_wallet()?;
                out.frames.push(OutFrame {
                    dest: Dest::Node(packet.seller),
                    bytes: encode_frame(&FramePayload::LookupResponse(response)),
                });
            }
            None => {
                // Silence: not in buyer mode, or the attestation failed.
            }
        }
        Ok(())
    }

    fn on_lookup_response(
        &mut self,
        response: LookupResponse,
        out: &mut StepOutput,
    ) -> Result<(), StorageFailure> {
        let Some(sale) = self.sale.as_ref() else {
            out.events.push(NodeEvent::Dropped {
                reason: "lookup response with no sale in progress".into(),
            });
            return Ok(());
        };
        let nonce = sale.nonce;
        if sale.quoted_txn.is_some() {
            out.events.push(NodeEvent::Dropped {
                reason: "lookup response after window closed".into(),
            });
            return Ok(());
        }
        if !accept_response(self.suite.as_ref(), &mut self.wallet, nonce, &response) {
            out.events.push(NodeEvent::Dropped {
                reason: "lookup response failed validation".into(),
            });
            return Ok(());
        }
        self.persist_wallet()?;
        let sale = self.sale.as_mut().unwrap();
        if !sale.responses.iter().any(|r| r.buyer == response.buyer) {
            sale.responses.push(response);
        }
        Ok(())
    }

    fn on_lookup_window(
        &mut self,
        nonce: u64,
        _hook: &mut dyn FaultHook,
        mut out: StepOutput,
    ) -> Result<StepOutput, Crashed> {
        let Some(sale) = self.sale.as_ref() else {
            return Ok(out);
        };
        if sale.nonce != nonce || sale.quoted_txn.is_some() {
            return Ok(out); // stale window timer
        }
        match select_buyer(&sale.responses, sale.target) {
            Ok(buyer) => {
                let txn = TransactionId::generate(&self.wallet.node, &mut self.rng);
                let quote = match make_quote(
                    &self.wallet,
                    txn,
                    sale.amount,
                    &sale.description.clone(),
                ) {
                    Ok(q) => q,
                    Err(e) => {
                        self.sale = None;
                        out.events.push(NodeEvent::SaleConcluded {
                            txn: None,
                            outcome: SaleOutcome::Rejected(RejectReason::BadQuote),
                        });
                        out.events.push(NodeEvent::Dropped {
                            reason: format!("quote refused: {e}"),
                        });
                        return Ok(out);
                    }
                };
                if let Some(frame) = self.seal_to(buyer, &PeerPayload::Quote(quote), &mut out) {
                    out.frames.push(frame);
                    out.timers.push(TimerCmd::Start {
                        kind: TimerKind::QuoteDecision(txn),
                        units: self.cfg.timeout_units,
                    });
                    self.sale.as_mut().unwrap().quoted_txn = Some(txn);
                } else {
                    self.sale = None;
                    out.events.push(NodeEvent::SaleConcluded {
                        txn: None,
                        outcome: SaleOutcome::BuyerNotFound,
                    });
                }
            }
            Err(_) => {
                self.sale = None;
                out.events.push(NodeEvent::SaleConcluded {
                    txn: None,
                    outcome: SaleOutcome::BuyerNotFound,
                });
            }
        }
        Ok(out)
    }

    fn on_enveloped(
        &mut self,
        sender: NodeId,
        envelope: Envelope,
        hook: &mut dyn FaultHook,
        mut out: StepOutput,
    ) -> Result<StepOutput, Crashed> {
        let Some(sender_key) = self.wallet.keys.peer_directory.get(&sender).cloned() else {
            out.events.push(NodeEvent::Dropped {
                reason: format!("enveloped frame from unknown peer {sender}"),
            });
            return Ok(out);
        };
        let own_private: PrivateKey = self.wallet.keys.own_private.clone();
        let plaintext = match open(self.suite.as_ref(), &envelope, &own_private, &sender_key) {
            Ok(p) => p,
            Err(e) => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("envelope from {sender} rejected: {e}"),
                });
                return Ok(out);
            }
        };
        let payload = match PeerPayload::from_bytes(&plaintext) {
            Ok(p) => p,
            Err(e) => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("payload from {sender} malformed: {e}"),
                });
                return Ok(out);
            }
        };
        match payload {
            PeerPayload::Quote(quote) => {
                self.on_quote_payload(sender, quote, &mut out);
                Ok(out)
            }
            PeerPayload::Decision(decision) => self.on_decision_payload(sender, decision, hook, out),
            PeerPayload::Protocol(msg) => self.on_protocol_message(sender, msg, hook, out),
        }
    }

    fn on_quote_payload(&mut self, sender: NodeId, quote: Quote, out: &mut StepOutput) {
        if quote.seller != sender {
            out.events.push(NodeEvent::Dropped {
                reason: "quote seller does not match envelope sender".into(),
            });
            return;
        }
        let had_decision_already = self.quotes.pending(&quote.txn).is_some();
        let decision = on_quote(&mut self.wallet, &mut self.quotes, &quote);
        if decision.decision == Decision::Accept && !had_decision_already {
            out.timers.push(TimerCmd::Start {
                kind: TimerKind::QuoteExpiry(quote.txn),
                units: self
                    .cfg
                    .timeout_units
                    .saturating_mul(self.cfg.max_prepare_retries + 4),
            });
        }
        if let Some(frame) = self.seal_to(sender, &PeerPayload::Decision(decision), out) {
            out.frames.push(frame);
        }
    }

    fn on_decision_payload(
        &mut self,
        sender: NodeId,
        decision: QuoteDecision,
        hook: &mut dyn FaultHook,
        mut out: StepOutput,
    ) -> Result<StepOutput, Crashed> {
        let txn = decision.txn;
        let Some(sale) = self.sale.as_ref() else {
            out.events.push(NodeEvent::Dropped {
                reason: format!("decision for {txn} with no sale in progress"),
            });
            return Ok(out);
        };
        if sale.quoted_txn != Some(txn) || sale.target != sender {
            out.events.push(NodeEvent::Dropped {
                reason: format!("decision for {txn} does not match the open sale"),
            });
            return Ok(out);
        }
        let (target, amount) = (sale.target, sale.amount);
        self.sale = None;
        out.timers.push(TimerCmd::Cancel {
            kind: TimerKind::QuoteDecision(txn),
        });
        match decision.decision {
            Decision::Accept => {
                match seller_start(&SellerPhase::Idle, txn, amount, target, &self.cfg) {
                    Ok((phase, effects)) => {
                        self.note_seller_transition(&SellerPhase::Idle, &phase, "accept", &mut out);
                        self.sellers.insert(txn, phase);
                        self.execute(txn, effects, hook, &mut out)?;
                    }
                    Err(e) => {
                        out.events.push(NodeEvent::Dropped {
                            reason: format!("could not start commit exchange: {e}"),
                        });
                    }
                }
            }
            Decision::Reject(reason) => {
                out.events.push(NodeEvent::SaleConcluded {
                    txn: Some(txn),
                    outcome: SaleOutcome::Rejected(reason),
                });
            }
        }
        Ok(out)
    }

    fn on_protocol_message(
        &mut self,
        sender: NodeId,
        msg: ProtocolMessage,
        hook: &mut dyn FaultHook,
        mut out: StepOutput,
    ) -> Result<StepOutput, Crashed> {
        let txn = msg.txn();
        if let Some(phase) = self.sellers.get(&txn).copied() {
            let (next, effects) = seller_on_message(&phase, sender, &msg, &self.cfg);
            self.note_seller_transition(&phase, &next, msg.kind_name(), &mut out);
            self.sellers.insert(txn, next);
            self.execute(txn, effects, hook, &mut out)?;
            self.emit_seller_terminal(txn, &mut out);
            return Ok(out);
        }
        if let Some(phase) = self.buyers.get(&txn).copied() {
            return self.drive_buyer(phase, sender, msg, hook, out);
        }

        // No live state for this transaction.
        match msg {
            ProtocolMessage::CommitRequest { .. } | ProtocolMessage::Commit { .. } => {
                // Participant-side messages: run the machine from Idle; the
                // quote book decides whether the transaction is known.
                self.drive_buyer(BuyerPhase::Idle, sender, msg, hook, out)
            }
            ProtocolMessage::Agreed { .. } => {
                // A vote for a transaction this coordinator has no trace of:
                // it can never have committed (the COMMIT record would
                // exist), so the definite answer is ABORT.
                out.events.push(NodeEvent::Note {
                    text: format!("vote for unknown {txn}: replying ABORT"),
                });
                if let Some(frame) = self.seal_to(
                    sender,
                    &PeerPayload::Protocol(ProtocolMessage::AbortMsg { txn }),
                    &mut out,
                ) {
                    out.frames.push(frame);
                }
                Ok(out)
            }
            ProtocolMessage::AbortMsg { .. } | ProtocolMessage::Committed { .. } => {
                out.events.push(NodeEvent::Dropped {
                    reason: format!("{} for unknown {txn}", msg.kind_name()),
                });
                Ok(out)
            }
        }
    }

    fn drive_buyer(
        &mut self,
        phase: BuyerPhase,
        sender: NodeId,
        msg: ProtocolMessage,
        hook: &mut dyn FaultHook,
        mut out: StepOutput,
    ) -> Result<StepOutput, Crashed> {
        let txn = msg.txn();
        let ctx = BuyerContext {
            pending_quote: self.quotes.pending(&txn),
            balance: self.wallet.balance,
            reserved: self.wallet.reserved,
        };
        let (next, mut effects) = buyer_on_message(&phase, sender, &msg, &ctx, &self.cfg);
        if self.mutation_skip_prepare_logging {
            effects.retain(|e| {
                !matches!(
                    e,
                    Effect::AppendLog(LogRecord {
                        body: RecordBody::Undo(_) | RecordBody::Redo(_),
                        ..
                    })
                )
            });
        }
        self.note_buyer_transition(&phase, &next, msg.kind_name(), &mut out);
        let entered_prepared = matches!(next, BuyerPhase::Prepared { .. })
            && !matches!(phase, BuyerPhase::Prepared { .. });
        if entered_prepared {
            self.quotes.take_pending(&txn);
            out.timers.push(TimerCmd::Cancel {
                kind: TimerKind::QuoteExpiry(txn),
            });
        }
        if !matches!(next, BuyerPhase::Idle) {
            self.buyers.insert(txn, next);
        }
        self.execute(txn, effects, hook, &mut out)?;
        match (phase, next) {
            (BuyerPhase::Prepared { .. }, BuyerPhase::Committed { .. }) => {
                out.events.push(NodeEvent::PurchaseConcluded {
                    txn,
                    outcome: TxnOutcome::Committed,
                });
            }
            (BuyerPhase::Prepared { .. }, BuyerPhase::Aborted { .. }) => {
                out.events.push(NodeEvent::PurchaseConcluded {
                    txn,
                    outcome: TxnOutcome::Aborted,
                });
            }
            _ => {}
        }
        Ok(out)
    }

    fn note_seller_transition(
        &self,
        from: &SellerPhase,
        to: &SellerPhase,
        input: &str,
        out: &mut StepOutput,
    ) {
        if let Some(txn) = to.txn().or_else(|| from.txn()) {
            out.events.push(NodeEvent::SellerTransition {
                txn,
                from: from.name(),
                to: to.name(),
                input: input.to_string(),
            });
        }
    }

    fn note_buyer_transition(
        &self,
        from: &BuyerPhase,
        to: &BuyerPhase,
        input: &str,
        out: &mut StepOutput,
    ) {
        if let Some(txn) = to.txn().or_else(|| from.txn()) {
            out.events.push(NodeEvent::BuyerTransition {
                txn,
                from: from.name(),
                to: to.name(),
                input: input.to_string(),
            });
        }
    }

    fn emit_seller_terminal(&self, txn: TransactionId, out: &mut StepOutput) {
        if let Some(phase) = self.sellers.get(&txn) {
            let outcome = match phase {
                SellerPhase::Done {
                    outcome: SellerOutcome::Committed,
                    ..
                } => Some(SaleOutcome::Committed),
                SellerPhase::Done {
                    outcome: SellerOutcome::Aborted,
                    ..
                } => Some(SaleOutcome::Aborted),
                SellerPhase::Done {
                    outcome: SellerOutcome::CommittedUnacked { .. },
                    ..
                } => Some(SaleOutcome::CommittedUnacked),
                _ => None,
            };
            if let Some(outcome) = outcome {
                // Emit once: only when the latest event list does not already
                // carry a conclusion for this transaction.
                let already = out.events.iter().any(|e| {
                    matches!(e, NodeEvent::SaleConcluded { txn: Some(t), .. } if *t == txn)
                });
                if !already {
                    out.events.push(NodeEvent::SaleConcluded {
                        txn: Some(txn),
                        outcome,
                    });
                }
            }
        }
    }
}
