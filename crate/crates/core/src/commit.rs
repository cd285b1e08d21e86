//! Two-party atomic commit: pure, effect-emitting state machines.
//!
//! The seller coordinates; the buyer is the sole participant. Both machines
//! are pure functions from (state, input) to (state, effects) — sends, log
//! appends, timer commands, and wallet operations come out as data and are
//! executed by the hosting runtime strictly in order. That is what lets the
//! exhaustive explorer interleave crashes between any two effects.
//!
//! Logging discipline: a state-changing record is always appended before the
//! message it justifies is sent. The buyer appends UNDO and REDO before
//! AGREED; the seller appends COMMIT before COMMIT is sent and COMPLETE only
//! after the buyer's acknowledgement.
//!
//! Timeout handling is configurable because the underlying rule is
//! nondeterministic ("either retransmit or abort"): the default retransmits
//! COMMIT-REQUEST up to a bound and then aborts; the alternative aborts on
//! the first expiry. Commit-phase retransmission is capped as well, with a
//! flagged `CommittedUnacked` terminal instead of an unbounded loop; the
//! obligation to reach the buyer survives restarts because the COMMIT record
//! stays in the log until the acknowledgement arrives.

use thiserror::Error;

use crate::ids::{NodeId, TransactionId};
use crate::money::MoneyAmount;
use crate::stable_log::{BalanceSnapshot, LogRecord, RecordBody, TxnRecovery};
use crate::wire::{Reader, WireError, Writer};

/// The closed set of commit-phase wire messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProtocolMessage {
    CommitRequest {
        txn: TransactionId,
        amount: MoneyAmount,
    },
    Agreed {
        txn: TransactionId,
    },
    AbortMsg {
        txn: TransactionId,
    },
    Commit {
        txn: TransactionId,
    },
    Committed {
        txn: TransactionId,
    },
}

impl ProtocolMessage {
    pub fn txn(&self) -> TransactionId {
        match *self {
            ProtocolMessage::CommitRequest { txn, .. }
            | ProtocolMessage::Agreed { txn }
            | ProtocolMessage::AbortMsg { txn }
            | ProtocolMessage::Commit { txn }
            | ProtocolMessage::Committed { txn } => txn,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ProtocolMessage::CommitRequest { .. } => "COMMIT-REQUEST",
            ProtocolMessage::Agreed { .. } => "AGREED",
            ProtocolMessage::AbortMsg { .. } => "ABORT",
            ProtocolMessage::Commit { .. } => "COMMIT",
            ProtocolMessage::Committed { .. } => "COMMITTED",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match *self {
            ProtocolMessage::CommitRequest { txn, amount } => {
                w.put_u8(0x20);
                w.put_raw(txn.as_bytes());
                w.put_u64(amount.minor_units());
            }
            ProtocolMessage::Agreed { txn } => {
                w.put_u8(0x21);
                w.put_raw(txn.as_bytes());
            }
            ProtocolMessage::AbortMsg { txn } => {
                w.put_u8(0x22);
                w.put_raw(txn.as_bytes());
            }
            ProtocolMessage::Commit { txn } => {
                w.put_u8(0x23);
                w.put_raw(txn.as_bytes());
            }
            ProtocolMessage::Committed { txn } => {
                w.put_u8(0x24);
                w.put_raw(txn.as_bytes());
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.get_u8()?;
        let txn = TransactionId::from_bytes(r.get_array::<16>()?);
        let msg = match tag {
            0x20 => ProtocolMessage::CommitRequest {
                txn,
                amount: MoneyAmount::new(r.get_u64()?),
            },
            0x21 => ProtocolMessage::Agreed { txn },
            0x22 => ProtocolMessage::AbortMsg { txn },
            0x23 => ProtocolMessage::Commit { txn },
            0x24 => ProtocolMessage::Committed { txn },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// How the seller reacts when the prepare-phase timer expires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutPolicy {
    /// Retransmit COMMIT-REQUEST up to the retry bound, then abort.
    RetryThenAbort,
    /// Abort on the first expiry.
    AbortImmediately,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    /// Prepare-phase retransmissions before giving up (R).
    pub max_prepare_retries: u32,
    /// Commit/abort-phase retransmissions before parking the transaction.
    pub max_commit_retries: u32,
    /// Timer duration in simulator time units.
    pub timeout_units: u32,
    pub timeout_policy: TimeoutPolicy,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            max_prepare_retries: 3,
            max_commit_retries: 16,
            timeout_units: 2,
            timeout_policy: TimeoutPolicy::RetryThenAbort,
        }
    }
}

/// Wallet mutation requested by a state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalletOp {
    Credit(MoneyAmount),
    DebitReserved(MoneyAmount),
    Release(MoneyAmount),
}

/// One runtime action. Executed strictly in list order; log appends precede
/// the sends they justify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send {
        to: NodeId,
        msg: ProtocolMessage,
    },
    AppendLog(LogRecord),
    StartTimer {
        txn: TransactionId,
        units: u32,
    },
    CancelTimer {
        txn: TransactionId,
    },
    /// Apply a wallet operation and record the transaction outcome when it
    /// finalizes money movement. The executor skips it if the wallet history
    /// already holds this transaction, which makes replays after recovery
    /// harmless.
    Apply {
        txn: TransactionId,
        peer: NodeId,
        op: WalletOp,
    },
    /// Append DONE-ERASE and forget the transaction's durable trace.
    EraseTxn {
        txn: TransactionId,
    },
}

pub type EffectList = Vec<Effect>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("invalid transition for current state")]
    InvalidTransition,
    #[error("amount must be positive")]
    ZeroAmount,
    #[error("log records inconsistent: {0}")]
    CorruptLog(String),
}

/// Terminal result on the coordinator side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SellerOutcome {
    Committed,
    Aborted,
    /// Commit is durable but the buyer never acknowledged within the retry
    /// budget. Flagged for reconciliation; the peer and amount stay attached
    /// so a late acknowledgement (or a repeated vote) can still finish the
    /// transaction, and retransmission resumes on restart.
    CommittedUnacked {
        buyer: NodeId,
        amount: MoneyAmount,
    },
}

/// Coordinator state for one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SellerPhase {
    Idle,
    Preparing {
        txn: TransactionId,
        amount: MoneyAmount,
        buyer: NodeId,
        retries: u32,
    },
    Committing {
        txn: TransactionId,
        amount: MoneyAmount,
        buyer: NodeId,
        retries: u32,
    },
    Aborting {
        txn: TransactionId,
        buyer: NodeId,
        retries: u32,
    },
    Done {
        txn: TransactionId,
        outcome: SellerOutcome,
    },
}

impl SellerPhase {
    pub fn txn(&self) -> Option<TransactionId> {
        match *self {
            SellerPhase::Idle => None,
            SellerPhase::Preparing { txn, .. }
            | SellerPhase::Committing { txn, .. }
            | SellerPhase::Aborting { txn, .. }
            | SellerPhase::Done { txn, .. } => Some(txn),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SellerPhase::Idle => "Idle",
            SellerPhase::Preparing { .. } => "Preparing",
            SellerPhase::Committing { .. } => "Committing",
            SellerPhase::Aborting { .. } => "Aborting",
            SellerPhase::Done {
                outcome: SellerOutcome::Committed,
                ..
            } => "Done(Committed)",
            SellerPhase::Done {
                outcome: SellerOutcome::Aborted,
                ..
            } => "Done(Aborted)",
            SellerPhase::Done {
                outcome: SellerOutcome::CommittedUnacked { .. },
                ..
            } => "Done(CommittedUnacked)",
        }
    }
}

/// Participant state for one transaction.
///
/// `seller` is `None` when the state was rebuilt from the log after a crash:
/// the durable records do not identify the peer, so the recovered
/// participant waits for the coordinator's retransmission and replies to the
/// message's sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuyerPhase {
    Idle,
    Prepared {
        txn: TransactionId,
        amount: MoneyAmount,
        seller: Option<NodeId>,
        nudges: u32,
    },
    Committed {
        txn: TransactionId,
    },
    Aborted {
        txn: TransactionId,
    },
}

impl BuyerPhase {
    pub fn txn(&self) -> Option<TransactionId> {
        match *self {
            BuyerPhase::Idle => None,
            BuyerPhase::Prepared { txn, .. }
            | BuyerPhase::Committed { txn }
            | BuyerPhase::Aborted { txn } => Some(txn),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuyerPhase::Idle => "Idle",
            BuyerPhase::Prepared { .. } => "Prepared",
            BuyerPhase::Committed { .. } => "Committed",
            BuyerPhase::Aborted { .. } => "Aborted",
        }
    }
}

// ── seller transitions ──

/// Starts the commit exchange for an accepted quote.
pub fn seller_start(
    phase: &SellerPhase,
    txn: TransactionId,
    amount: MoneyAmount,
    buyer: NodeId,
    cfg: &ProtocolConfig,
) -> Result<(SellerPhase, EffectList), EngineError> {
    if !matches!(phase, SellerPhase::Idle) {
        return Err(EngineError::InvalidTransition);
    }
    if amount.is_zero() {
        return Err(EngineError::ZeroAmount);
    }
    Ok((
        SellerPhase::Preparing {
            txn,
            amount,
            buyer,
            retries: 0,
        },
        vec![
            Effect::Send {
                to: buyer,
                msg: ProtocolMessage::CommitRequest { txn, amount },
            },
            Effect::StartTimer {
                txn,
                units: cfg.timeout_units,
            },
        ],
    ))
}

/// Seller's reaction to an incoming message. `from` is the authenticated
/// sender; replies from settled states go back to it. Total: mismatched
/// transactions and unexpected kinds leave the state unchanged with no
/// effects.
pub fn seller_on_message(
    phase: &SellerPhase,
    from: NodeId,
    msg: &ProtocolMessage,
    cfg: &ProtocolConfig,
) -> (SellerPhase, EffectList) {
    let unchanged = (*phase, Vec::new());
    if phase.txn() != Some(msg.txn()) {
        return unchanged;
    }
    match (*phase, *msg) {
        (
            SellerPhase::Preparing {
                txn,
                amount,
                buyer,
                ..
            },
            ProtocolMessage::Agreed { .. },
        ) => (
            SellerPhase::Committing {
                txn,
                amount,
                buyer,
                retries: 0,
            },
            vec![
                Effect::AppendLog(LogRecord::new(
                    txn,
                    RecordBody::Commit {
                        peer: buyer,
                        amount,
                    },
                )),
                Effect::Send {
                    to: buyer,
                    msg: ProtocolMessage::Commit { txn },
                },
                Effect::StartTimer {
                    txn,
                    units: cfg.timeout_units,
                },
            ],
        ),
        (SellerPhase::Preparing { txn, buyer, .. }, ProtocolMessage::AbortMsg { .. }) => (
            SellerPhase::Aborting {
                txn,
                buyer,
                retries: 0,
            },
            vec![
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Abort { peer: Some(buyer) })),
                Effect::Send {
                    to: buyer,
                    msg: ProtocolMessage::AbortMsg { txn },
                },
                Effect::StartTimer {
                    txn,
                    units: cfg.timeout_units,
                },
            ],
        ),
        (
            SellerPhase::Committing {
                txn, amount, buyer, ..
            },
            ProtocolMessage::Committed { .. },
        ) => (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Committed,
            },
            vec![
                Effect::CancelTimer { txn },
                Effect::Apply {
                    txn,
                    peer: buyer,
                    op: WalletOp::Credit(amount),
                },
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Complete)),
                Effect::EraseTxn { txn },
            ],
        ),
        // The buyer evidently never saw our COMMIT; answer the repeated vote
        // immediately instead of waiting for the timer.
        (SellerPhase::Committing { txn, buyer, .. }, ProtocolMessage::Agreed { .. }) => (
            *phase,
            vec![Effect::Send {
                to: buyer,
                msg: ProtocolMessage::Commit { txn },
            }],
        ),
        // A parked commit obligation: a repeated vote means the buyer never
        // saw COMMIT, so say it once more.
        (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::CommittedUnacked { buyer, .. },
            },
            ProtocolMessage::Agreed { .. },
        ) => (
            *phase,
            vec![Effect::Send {
                to: buyer,
                msg: ProtocolMessage::Commit { txn },
            }],
        ),
        // The overdue acknowledgement finally arrived: finish normally.
        (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::CommittedUnacked { buyer, amount },
            },
            ProtocolMessage::Committed { .. },
        ) => (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Committed,
            },
            vec![
                Effect::Apply {
                    txn,
                    peer: buyer,
                    op: WalletOp::Credit(amount),
                },
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Complete)),
                Effect::EraseTxn { txn },
            ],
        ),
        // A repeated vote reaching a settled coordinator means the
        // participant still does not know the outcome; repeat the decision.
        (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Aborted,
            },
            ProtocolMessage::Agreed { .. },
        ) => (
            *phase,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::AbortMsg { txn },
            }],
        ),
        (
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Committed,
            },
            ProtocolMessage::Agreed { .. },
        ) => (
            *phase,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::Commit { txn },
            }],
        ),
        // Aborting ignores stale votes and acks; its own timer drives the
        // abort retransmissions.
        _ => unchanged,
    }
}

/// Seller timer expiry. Total: terminal and idle states produce no effects.
pub fn seller_on_timeout(phase: &SellerPhase, cfg: &ProtocolConfig) -> (SellerPhase, EffectList) {
    match *phase {
        SellerPhase::Preparing {
            txn,
            amount,
            buyer,
            retries,
        } => {
            let retry_allowed = cfg.timeout_policy == TimeoutPolicy::RetryThenAbort
                && retries < cfg.max_prepare_retries;
            if retry_allowed {
                (
                    SellerPhase::Preparing {
                        txn,
                        amount,
                        buyer,
                        retries: retries + 1,
                    },
                    vec![
                        Effect::Send {
                            to: buyer,
                            msg: ProtocolMessage::CommitRequest { txn, amount },
                        },
                        Effect::StartTimer {
                            txn,
                            units: cfg.timeout_units,
                        },
                    ],
                )
            } else {
                (
                    SellerPhase::Aborting {
                        txn,
                        buyer,
                        retries: 0,
                    },
                    vec![
                        Effect::AppendLog(LogRecord::new(
                            txn,
                            RecordBody::Abort { peer: Some(buyer) },
                        )),
                        Effect::Send {
                            to: buyer,
                            msg: ProtocolMessage::AbortMsg { txn },
                        },
                        Effect::StartTimer {
                            txn,
                            units: cfg.timeout_units,
                        },
                    ],
                )
            }
        }
        SellerPhase::Committing {
            txn,
            amount,
            buyer,
            retries,
        } => {
            if retries < cfg.max_commit_retries {
                (
                    SellerPhase::Committing {
                        txn,
                        amount,
                        buyer,
                        retries: retries + 1,
                    },
                    vec![
                        Effect::Send {
                            to: buyer,
                            msg: ProtocolMessage::Commit { txn },
                        },
                        Effect::StartTimer {
                            txn,
                            units: cfg.timeout_units,
                        },
                    ],
                )
            } else {
                (
                    SellerPhase::Done {
                        txn,
                        outcome: SellerOutcome::CommittedUnacked { buyer, amount },
                    },
                    vec![Effect::CancelTimer { txn }],
                )
            }
        }
        SellerPhase::Aborting {
            txn,
            buyer,
            retries,
        } => {
            if retries < cfg.max_commit_retries {
                (
                    SellerPhase::Aborting {
                        txn,
                        buyer,
                        retries: retries + 1,
                    },
                    vec![
                        Effect::Send {
                            to: buyer,
                            msg: ProtocolMessage::AbortMsg { txn },
                        },
                        Effect::StartTimer {
                            txn,
                            units: cfg.timeout_units,
                        },
                    ],
                )
            } else {
                (
                    SellerPhase::Done {
                        txn,
                        outcome: SellerOutcome::Aborted,
                    },
                    vec![Effect::CancelTimer { txn }, Effect::EraseTxn { txn }],
                )
            }
        }
        SellerPhase::Idle | SellerPhase::Done { .. } => (*phase, Vec::new()),
    }
}

// ── buyer transitions ──

/// What the pure buyer machine needs to know about the wallet when a
/// COMMIT-REQUEST arrives for a transaction it has no state for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuyerContext {
    /// The accepted-quote reservation for this transaction, if any.
    pub pending_quote: Option<(NodeId, MoneyAmount)>,
    pub balance: MoneyAmount,
    pub reserved: MoneyAmount,
}

/// Buyer's reaction to an incoming message. `from` is the authenticated
/// sender; replies go back to it.
pub fn buyer_on_message(
    phase: &BuyerPhase,
    from: NodeId,
    msg: &ProtocolMessage,
    ctx: &BuyerContext,
    cfg: &ProtocolConfig,
) -> (BuyerPhase, EffectList) {
    let unchanged = (*phase, Vec::new());
    match (*phase, *msg) {
        (BuyerPhase::Idle, ProtocolMessage::CommitRequest { txn, amount }) => {
            let known = ctx
                .pending_quote
                .is_some_and(|(seller, reserved_amount)| {
                    seller == from && reserved_amount == amount
                });
            if !known {
                // Unknown at this node (never ran, eliminated by crash,
                // expired quote): refuse.
                return (
                    BuyerPhase::Idle,
                    vec![Effect::Send {
                        to: from,
                        msg: ProtocolMessage::AbortMsg { txn },
                    }],
                );
            }
            // Snapshots bracket the whole transaction including the quote
            // reservation: rolling back restores the un-reserved balance,
            // rolling forward lands on the post-debit balance.
            let Some((pre, post)) = prepare_snapshots(ctx, amount) else {
                return (
                    BuyerPhase::Idle,
                    vec![Effect::Send {
                        to: from,
                        msg: ProtocolMessage::AbortMsg { txn },
                    }],
                );
            };
            (
                BuyerPhase::Prepared {
                    txn,
                    amount,
                    seller: Some(from),
                    nudges: 0,
                },
                vec![
                    Effect::AppendLog(LogRecord::new(txn, RecordBody::Undo(pre))),
                    Effect::AppendLog(LogRecord::new(txn, RecordBody::Redo(post))),
                    Effect::Send {
                        to: from,
                        msg: ProtocolMessage::Agreed { txn },
                    },
                    Effect::StartTimer {
                        txn,
                        units: cfg.timeout_units,
                    },
                ],
            )
        }
        // Repeated COMMIT-REQUEST while prepared: the vote was lost, say it
        // again. The records are already durable.
        (BuyerPhase::Prepared { txn, .. }, ProtocolMessage::CommitRequest { .. }) => (
            *phase,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::Agreed { txn },
            }],
        ),
        (
            BuyerPhase::Prepared { txn, amount, .. },
            ProtocolMessage::Commit { .. },
        ) => (
            BuyerPhase::Committed { txn },
            vec![
                Effect::CancelTimer { txn },
                Effect::Apply {
                    txn,
                    peer: from,
                    op: WalletOp::DebitReserved(amount),
                },
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Complete)),
                Effect::Send {
                    to: from,
                    msg: ProtocolMessage::Committed { txn },
                },
                Effect::EraseTxn { txn },
            ],
        ),
        (
            BuyerPhase::Prepared { txn, amount, .. },
            ProtocolMessage::AbortMsg { .. },
        ) => (
            BuyerPhase::Aborted { txn },
            vec![
                Effect::CancelTimer { txn },
                Effect::Apply {
                    txn,
                    peer: from,
                    op: WalletOp::Release(amount),
                },
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Abort { peer: None })),
                Effect::EraseTxn { txn },
            ],
        ),
        // Already committed: no further action is required, acknowledge
        // again.
        (BuyerPhase::Committed { txn }, ProtocolMessage::Commit { .. }) => (
            *phase,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::Committed { txn },
            }],
        ),
        // Aborted and remembered: stale COMMIT-REQUEST retransmissions get
        // the refusal again.
        (BuyerPhase::Aborted { txn }, ProtocolMessage::CommitRequest { .. }) => (
            *phase,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::AbortMsg { txn },
            }],
        ),
        // COMMIT for a transaction with no trace at all: the coordinator
        // only ever sends COMMIT after our vote, so this transaction is
        // prepared or already committed — and with no trace left, it can
        // only be committed and fully erased. Acknowledge.
        (BuyerPhase::Idle, ProtocolMessage::Commit { txn }) => (
            BuyerPhase::Idle,
            vec![Effect::Send {
                to: from,
                msg: ProtocolMessage::Committed { txn },
            }],
        ),
        _ => unchanged,
    }
}

fn prepare_snapshots(
    ctx: &BuyerContext,
    amount: MoneyAmount,
) -> Option<(BalanceSnapshot, BalanceSnapshot)> {
    let reserved_before = ctx.reserved.checked_sub(amount).ok()?;
    let balance_after = ctx.balance.checked_sub(amount).ok()?;
    Some((
        BalanceSnapshot {
            balance: ctx.balance,
            reserved: reserved_before,
        },
        BalanceSnapshot {
            balance: balance_after,
            reserved: reserved_before,
        },
    ))
}

/// Buyer timer expiry: while prepared and in doubt, repeat the vote so a
/// coordinator that lost it (or restarted) can answer, up to a bound.
pub fn buyer_on_timeout(phase: &BuyerPhase, cfg: &ProtocolConfig) -> (BuyerPhase, EffectList) {
    match *phase {
        BuyerPhase::Prepared {
            txn,
            amount,
            seller: Some(seller),
            nudges,
        } => {
            if nudges < cfg.max_commit_retries {
                (
                    BuyerPhase::Prepared {
                        txn,
                        amount,
                        seller: Some(seller),
                        nudges: nudges + 1,
                    },
                    vec![
                        Effect::Send {
                            to: seller,
                            msg: ProtocolMessage::Agreed { txn },
                        },
                        Effect::StartTimer {
                            txn,
                            units: cfg.timeout_units,
                        },
                    ],
                )
            } else {
                (*phase, vec![Effect::CancelTimer { txn }])
            }
        }
        _ => (*phase, Vec::new()),
    }
}

// ── crash recovery ──

/// One transaction's durable evidence, as grouped from a log scan.
#[derive(Debug, Clone)]
pub struct RecoveredTxn {
    pub txn: TransactionId,
    pub class: TxnRecovery,
    pub records: Vec<LogRecord>,
}

/// Directive to overwrite wallet balances from a durable snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceRestore {
    pub snapshot: BalanceSnapshot,
}

/// What recovery rebuilt for one transaction.
#[derive(Debug, Clone)]
pub struct RecoveredRole {
    pub txn: TransactionId,
    pub seller: Option<SellerPhase>,
    pub buyer: Option<BuyerPhase>,
    pub restore: Option<BalanceRestore>,
    pub effects: EffectList,
}

fn find_commit(records: &[LogRecord]) -> Option<(NodeId, MoneyAmount)> {
    records.iter().find_map(|r| match r.body {
        RecordBody::Commit { peer, amount } => Some((peer, amount)),
        _ => None,
    })
}

fn find_abort_peer(records: &[LogRecord]) -> Option<Option<NodeId>> {
    records.iter().find_map(|r| match r.body {
        RecordBody::Abort { peer } => Some(peer),
        _ => None,
    })
}

fn find_snapshots(records: &[LogRecord]) -> (Option<BalanceSnapshot>, Option<BalanceSnapshot>) {
    let undo = records.iter().find_map(|r| match r.body {
        RecordBody::Undo(s) => Some(s),
        _ => None,
    });
    let redo = records.iter().find_map(|r| match r.body {
        RecordBody::Redo(s) => Some(s),
        _ => None,
    });
    (undo, redo)
}

/// Rebuilds the state for one logged transaction after a restart.
///
/// Coordinator-side records (COMMIT, ABORT-with-peer) resume
/// retransmission; participant-side records rebuild the prepared state with
/// the reservation re-applied from the UNDO snapshot, or settle balances
/// from the appropriate snapshot for decided transactions. A transaction
/// with no outcome on the coordinator side does not appear in the log at
/// all — such a transaction was never started as far as recovery is
/// concerned, and the participant's repeated vote will be answered with
/// ABORT by the runtime.
pub fn recover_txn(entry: &RecoveredTxn, cfg: &ProtocolConfig) -> Result<RecoveredRole, EngineError> {
    let txn = entry.txn;
    let commit = find_commit(&entry.records);
    let abort = find_abort_peer(&entry.records);
    let (undo, redo) = find_snapshots(&entry.records);

    if commit.is_some() && abort.is_some() {
        return Err(EngineError::CorruptLog(format!(
            "transaction {txn} has both COMMIT and ABORT decisions"
        )));
    }
    if commit.is_some() && undo.is_some() {
        return Err(EngineError::CorruptLog(format!(
            "transaction {txn} mixes coordinator and participant records"
        )));
    }

    let coordinator = commit.is_some() || matches!(abort, Some(Some(_)));
    let mut role = RecoveredRole {
        txn,
        seller: None,
        buyer: None,
        restore: None,
        effects: Vec::new(),
    };

    match entry.class {
        TxnRecovery::Committed => {
            // COMMIT durable, COMPLETE missing: resume retransmitting COMMIT.
            let (peer, amount) = commit.ok_or_else(|| {
                EngineError::CorruptLog(format!("transaction {txn} committed without a record"))
            })?;
            role.seller = Some(SellerPhase::Committing {
                txn,
                amount,
                buyer: peer,
                retries: 0,
            });
            role.effects = vec![
                Effect::Send {
                    to: peer,
                    msg: ProtocolMessage::Commit { txn },
                },
                Effect::StartTimer {
                    txn,
                    units: cfg.timeout_units,
                },
            ];
        }
        TxnRecovery::Aborted => {
            if coordinator {
                let peer = abort.flatten().unwrap();
                role.seller = Some(SellerPhase::Aborting {
                    txn,
                    buyer: peer,
                    retries: 0,
                });
                role.effects = vec![
                    Effect::Send {
                        to: peer,
                        msg: ProtocolMessage::AbortMsg { txn },
                    },
                    Effect::StartTimer {
                        txn,
                        units: cfg.timeout_units,
                    },
                ];
            } else {
                // Participant aborted: roll back to the pre-transaction
                // snapshot (idempotent with the release that may or may not
                // have been persisted) and finish the erase.
                role.buyer = Some(BuyerPhase::Aborted { txn });
                if let Some(undo) = undo {
                    role.restore = Some(BalanceRestore { snapshot: undo });
                }
                role.effects = vec![Effect::EraseTxn { txn }];
            }
        }
        TxnRecovery::Completed => {
            if coordinator {
                role.seller = Some(SellerPhase::Done {
                    txn,
                    outcome: SellerOutcome::Committed,
                });
                role.effects = vec![Effect::EraseTxn { txn }];
            } else {
                // The wallet record was persisted before COMPLETE went
                // durable, so rolling forward to the REDO snapshot is
                // idempotent; a log without a snapshot (nothing to restore
                // from) keeps the persisted balances.
                role.buyer = Some(BuyerPhase::Committed { txn });
                role.restore = redo.map(|snapshot| BalanceRestore { snapshot });
                role.effects = vec![Effect::EraseTxn { txn }];
            }
        }
        TxnRecovery::InDoubtPrepared => {
            let (undo, redo) = match (undo, redo) {
                (Some(u), Some(r)) => (u, r),
                _ => {
                    return Err(EngineError::CorruptLog(format!(
                        "transaction {txn} prepared without both snapshots"
                    )))
                }
            };
            let amount = undo
                .balance
                .checked_sub(redo.balance)
                .map_err(|_| EngineError::CorruptLog(format!("transaction {txn} snapshot order")))?;
            let reserved = undo
                .reserved
                .checked_add(amount)
                .map_err(|_| EngineError::CorruptLog(format!("transaction {txn} reservation")))?;
            role.buyer = Some(BuyerPhase::Prepared {
                txn,
                amount,
                seller: None,
                nudges: 0,
            });
            role.restore = Some(BalanceRestore {
                snapshot: BalanceSnapshot {
                    balance: undo.balance,
                    reserved,
                },
            });
            // In doubt: hold the reservation and await the coordinator's
            // retransmission.
        }
        TxnRecovery::IncompletePrepare => {
            // The prepare was torn mid-append; nothing was applied and no
            // vote was sent. Record the abort so retransmissions get a
            // definite refusal.
            role.buyer = Some(BuyerPhase::Aborted { txn });
            role.effects = vec![
                Effect::AppendLog(LogRecord::new(txn, RecordBody::Abort { peer: None })),
                Effect::EraseTxn { txn },
            ];
        }
        TxnRecovery::Erased => {
            // Fully settled. Keep a tombstone so stale duplicates get the
            // right answer.
            let committed = entry
                .records
                .iter()
                .any(|r| matches!(r.body, RecordBody::Complete));
            if coordinator {
                role.seller = Some(SellerPhase::Done {
                    txn,
                    outcome: if committed {
                        SellerOutcome::Committed
                    } else {
                        SellerOutcome::Aborted
                    },
                });
            } else if committed {
                role.buyer = Some(BuyerPhase::Committed { txn });
            } else {
                role.buyer = Some(BuyerPhase::Aborted { txn });
            }
        }
    }
    Ok(role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stable_log::recover_summary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ids() -> (TransactionId, NodeId, NodeId) {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let seller = NodeId::from_name("S").unwrap();
        let buyer = NodeId::from_name("B").unwrap();
        (TransactionId::generate(&seller, &mut rng), seller, buyer)
    }

    fn cfg() -> ProtocolConfig {
        ProtocolConfig::default()
    }

    fn money(n: u64) -> MoneyAmount {
        MoneyAmount::new(n)
    }

    fn ctx_with_quote(seller: NodeId, amount: u64) -> BuyerContext {
        BuyerContext {
            pending_quote: Some((seller, money(amount))),
            balance: money(100),
            reserved: money(amount),
        }
    }

    /// Position of the first matching effect.
    fn pos(effects: &[Effect], pred: impl Fn(&Effect) -> bool) -> Option<usize> {
        effects.iter().position(pred)
    }

    #[test]
    fn seller_start_prepares_and_sends_commit_request() {
        let (txn, _, buyer) = ids();
        let (phase, effects) =
            seller_start(&SellerPhase::Idle, txn, money(40), buyer, &cfg()).unwrap();
        assert!(matches!(phase, SellerPhase::Preparing { retries: 0, .. }));
        assert!(matches!(
            effects[0],
            Effect::Send {
                msg: ProtocolMessage::CommitRequest { .. },
                ..
            }
        ));
        assert!(matches!(effects[1], Effect::StartTimer { .. }));
    }

    #[test]
    fn seller_start_rejects_busy_state_and_zero_amount() {
        let (txn, _, buyer) = ids();
        let (preparing, _) =
            seller_start(&SellerPhase::Idle, txn, money(40), buyer, &cfg()).unwrap();
        assert_eq!(
            seller_start(&preparing, txn, money(40), buyer, &cfg()).unwrap_err(),
            EngineError::InvalidTransition
        );
        assert_eq!(
            seller_start(&SellerPhase::Idle, txn, money(0), buyer, &cfg()).unwrap_err(),
            EngineError::ZeroAmount
        );
    }

    #[test]
    fn agreed_logs_commit_before_sending_commit() {
        let (txn, _, buyer) = ids();
        let (preparing, _) =
            seller_start(&SellerPhase::Idle, txn, money(40), buyer, &cfg()).unwrap();
        let (phase, effects) =
            seller_on_message(&preparing, buyer, &ProtocolMessage::Agreed { txn }, &cfg());
        assert!(matches!(phase, SellerPhase::Committing { .. }));

        let log_pos = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Commit { .. },
                    ..
                })
            )
        })
        .expect("commit record");
        let send_pos = pos(&effects, |e| {
            matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::Commit { .. },
                    ..
                }
            )
        })
        .expect("commit send");
        assert!(log_pos < send_pos, "log must precede send");
    }

    #[test]
    fn commit_record_carries_peer_and_amount_for_recovery() {
        let (txn, _, buyer) = ids();
        let (preparing, _) =
            seller_start(&SellerPhase::Idle, txn, money(40), buyer, &cfg()).unwrap();
        let (_, effects) = seller_on_message(&preparing, buyer, &ProtocolMessage::Agreed { txn }, &cfg());
        let record = effects
            .iter()
            .find_map(|e| match e {
                Effect::AppendLog(r) => Some(r.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(
            record.body,
            RecordBody::Commit {
                peer: buyer,
                amount: money(40)
            }
        );
    }

    #[test]
    fn committed_ack_credits_completes_and_erases() {
        let (txn, _, buyer) = ids();
        let committing = SellerPhase::Committing {
            txn,
            amount: money(40),
            buyer,
            retries: 2,
        };
        let (phase, effects) =
            seller_on_message(&committing, buyer, &ProtocolMessage::Committed { txn }, &cfg());
        assert_eq!(
            phase,
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Committed
            }
        );
        let credit = pos(&effects, |e| {
            matches!(
                e,
                Effect::Apply {
                    op: WalletOp::Credit(a),
                    ..
                } if *a == money(40)
            )
        })
        .unwrap();
        let complete = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Complete,
                    ..
                })
            )
        })
        .unwrap();
        let erase = pos(&effects, |e| matches!(e, Effect::EraseTxn { .. })).unwrap();
        assert!(credit < complete && complete < erase);
    }

    #[test]
    fn mismatched_txn_is_ignored_without_effects() {
        let (txn, seller, buyer) = ids();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let other = TransactionId::generate(&seller, &mut rng);
        let (preparing, _) =
            seller_start(&SellerPhase::Idle, txn, money(40), buyer, &cfg()).unwrap();
        let (phase, effects) =
            seller_on_message(&preparing, buyer, &ProtocolMessage::Agreed { txn: other }, &cfg());
        assert_eq!(phase, preparing);
        assert!(effects.is_empty());
    }

    #[test]
    fn prepare_timeouts_retry_then_abort() {
        let (txn, _, buyer) = ids();
        let config = cfg();
        let mut phase = SellerPhase::Preparing {
            txn,
            amount: money(40),
            buyer,
            retries: 0,
        };
        for expected_retries in 1..=config.max_prepare_retries {
            let (next, effects) = seller_on_timeout(&phase, &config);
            assert!(matches!(
                next,
                SellerPhase::Preparing { retries, .. } if retries == expected_retries
            ));
            assert!(effects.iter().any(|e| matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::CommitRequest { .. },
                    ..
                }
            )));
            phase = next;
        }
        // Budget exhausted: abort, logging before sending.
        let (next, effects) = seller_on_timeout(&phase, &config);
        assert!(matches!(next, SellerPhase::Aborting { .. }));
        let log_pos = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Abort { .. },
                    ..
                })
            )
        })
        .unwrap();
        let send_pos = pos(&effects, |e| {
            matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::AbortMsg { .. },
                    ..
                }
            )
        })
        .unwrap();
        assert!(log_pos < send_pos);
    }

    #[test]
    fn abort_immediately_policy_aborts_on_first_expiry() {
        let (txn, _, buyer) = ids();
        let config = ProtocolConfig {
            timeout_policy: TimeoutPolicy::AbortImmediately,
            ..cfg()
        };
        let preparing = SellerPhase::Preparing {
            txn,
            amount: money(40),
            buyer,
            retries: 0,
        };
        let (next, _) = seller_on_timeout(&preparing, &config);
        assert!(matches!(next, SellerPhase::Aborting { .. }));
    }

    #[test]
    fn commit_phase_retransmits_then_parks_flagged() {
        let (txn, _, buyer) = ids();
        let config = ProtocolConfig {
            max_commit_retries: 2,
            ..cfg()
        };
        let mut phase = SellerPhase::Committing {
            txn,
            amount: money(40),
            buyer,
            retries: 0,
        };
        for _ in 0..2 {
            let (next, effects) = seller_on_timeout(&phase, &config);
            assert!(matches!(next, SellerPhase::Committing { .. }));
            assert!(effects.iter().any(|e| matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::Commit { .. },
                    ..
                }
            )));
            phase = next;
        }
        let (next, _) = seller_on_timeout(&phase, &config);
        assert_eq!(
            next,
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::CommittedUnacked {
                    buyer,
                    amount: money(40)
                }
            }
        );

        // A repeated vote reaching the parked seller restarts the handshake,
        // and the overdue ack still completes with the credit applied.
        let (same, effects) = seller_on_message(&next, buyer, &ProtocolMessage::Agreed { txn }, &config);
        assert_eq!(same, next);
        assert!(matches!(
            effects[0],
            Effect::Send {
                msg: ProtocolMessage::Commit { .. },
                ..
            }
        ));
        let (done, effects) =
            seller_on_message(&next, buyer, &ProtocolMessage::Committed { txn }, &config);
        assert_eq!(
            done,
            SellerPhase::Done {
                txn,
                outcome: SellerOutcome::Committed
            }
        );
        assert!(effects.iter().any(|e| matches!(
            e,
            Effect::Apply {
                op: WalletOp::Credit(a),
                ..
            } if *a == money(40)
        )));
    }

    #[test]
    fn buyer_prepare_logs_undo_redo_before_agreed() {
        let (txn, seller, _) = ids();
        let ctx = ctx_with_quote(seller, 40);
        let (phase, effects) = buyer_on_message(
            &BuyerPhase::Idle,
            seller,
            &ProtocolMessage::CommitRequest {
                txn,
                amount: money(40),
            },
            &ctx,
            &cfg(),
        );
        assert!(matches!(phase, BuyerPhase::Prepared { .. }));
        let undo = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Undo(s),
                    ..
                }) if s.balance == money(100) && s.reserved == money(0)
            )
        })
        .unwrap();
        let redo = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Redo(s),
                    ..
                }) if s.balance == money(60) && s.reserved == money(0)
            )
        })
        .unwrap();
        let agreed = pos(&effects, |e| {
            matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::Agreed { .. },
                    ..
                }
            )
        })
        .unwrap();
        assert!(undo < redo && redo < agreed);
    }

    #[test]
    fn buyer_refuses_unknown_transaction() {
        let (txn, seller, _) = ids();
        let ctx = BuyerContext {
            pending_quote: None,
            balance: money(100),
            reserved: money(0),
        };
        let (phase, effects) = buyer_on_message(
            &BuyerPhase::Idle,
            seller,
            &ProtocolMessage::CommitRequest {
                txn,
                amount: money(40),
            },
            &ctx,
            &cfg(),
        );
        assert_eq!(phase, BuyerPhase::Idle);
        assert_eq!(
            effects,
            vec![Effect::Send {
                to: seller,
                msg: ProtocolMessage::AbortMsg { txn }
            }]
        );
    }

    #[test]
    fn buyer_commit_debits_completes_acks_erases_in_order() {
        let (txn, seller, _) = ids();
        let prepared = BuyerPhase::Prepared {
            txn,
            amount: money(40),
            seller: Some(seller),
            nudges: 0,
        };
        let ctx = ctx_with_quote(seller, 40);
        let (phase, effects) = buyer_on_message(
            &prepared,
            seller,
            &ProtocolMessage::Commit { txn },
            &ctx,
            &cfg(),
        );
        assert_eq!(phase, BuyerPhase::Committed { txn });
        let debit = pos(&effects, |e| {
            matches!(
                e,
                Effect::Apply {
                    op: WalletOp::DebitReserved(a),
                    ..
                } if *a == money(40)
            )
        })
        .unwrap();
        let complete = pos(&effects, |e| {
            matches!(
                e,
                Effect::AppendLog(LogRecord {
                    body: RecordBody::Complete,
                    ..
                })
            )
        })
        .unwrap();
        let ack = pos(&effects, |e| {
            matches!(
                e,
                Effect::Send {
                    msg: ProtocolMessage::Committed { .. },
                    ..
                }
            )
        })
        .unwrap();
        let erase = pos(&effects, |e| matches!(e, Effect::EraseTxn { .. })).unwrap();
        assert!(debit < complete && complete < ack && ack < erase);
    }

    #[test]
    fn buyer_abort_releases_and_logs() {
        let (txn, seller, _) = ids();
        let prepared = BuyerPhase::Prepared {
            txn,
            amount: money(40),
            seller: Some(seller),
            nudges: 0,
        };
        let ctx = ctx_with_quote(seller, 40);
        let (phase, effects) = buyer_on_message(
            &prepared,
            seller,
            &ProtocolMessage::AbortMsg { txn },
            &ctx,
            &cfg(),
        );
        assert_eq!(phase, BuyerPhase::Aborted { txn });
        assert!(effects.iter().any(|e| matches!(
            e,
            Effect::Apply {
                op: WalletOp::Release(a),
                ..
            } if *a == money(40)
        )));
        assert!(effects.iter().any(|e| matches!(
            e,
            Effect::AppendLog(LogRecord {
                body: RecordBody::Abort { peer: None },
                ..
            })
        )));
    }

    #[test]
    fn duplicate_commit_gets_ack_without_wallet_change() {
        let (txn, seller, _) = ids();
        let committed = BuyerPhase::Committed { txn };
        let ctx = BuyerContext {
            pending_quote: None,
            balance: money(60),
            reserved: money(0),
        };
        let (phase, effects) = buyer_on_message(
            &committed,
            seller,
            &ProtocolMessage::Commit { txn },
            &ctx,
            &cfg(),
        );
        assert_eq!(phase, committed);
        assert_eq!(
            effects,
            vec![Effect::Send {
                to: seller,
                msg: ProtocolMessage::Committed { txn }
            }]
        );
    }

    #[test]
    fn duplicate_commit_request_while_prepared_revotes_without_new_records() {
        let (txn, seller, _) = ids();
        let prepared = BuyerPhase::Prepared {
            txn,
            amount: money(40),
            seller: Some(seller),
            nudges: 0,
        };
        let ctx = ctx_with_quote(seller, 40);
        let (phase, effects) = buyer_on_message(
            &prepared,
            seller,
            &ProtocolMessage::CommitRequest {
                txn,
                amount: money(40),
            },
            &ctx,
            &cfg(),
        );
        assert_eq!(phase, prepared);
        assert_eq!(effects.len(), 1);
        assert!(matches!(
            effects[0],
            Effect::Send {
                msg: ProtocolMessage::Agreed { .. },
                ..
            }
        ));
    }

    #[test]
    fn transitions_are_deterministic() {
        let (txn, seller, buyer) = ids();
        let prepared = BuyerPhase::Prepared {
            txn,
            amount: money(40),
            seller: Some(seller),
            nudges: 0,
        };
        let ctx = ctx_with_quote(seller, 40);
        let a = buyer_on_message(&prepared, seller, &ProtocolMessage::Commit { txn }, &ctx, &cfg());
        let b = buyer_on_message(&prepared, seller, &ProtocolMessage::Commit { txn }, &ctx, &cfg());
        assert_eq!(a, b);

        let committing = SellerPhase::Committing {
            txn,
            amount: money(40),
            buyer,
            retries: 0,
        };
        let x = seller_on_timeout(&committing, &cfg());
        let y = seller_on_timeout(&committing, &cfg());
        assert_eq!(x, y);
    }

    // ── recovery ──

    fn recovered(records: Vec<LogRecord>) -> RecoveredTxn {
        let txn = records[0].txn;
        let class = recover_summary(&records)[&txn];
        RecoveredTxn {
            txn,
            class,
            records,
        }
    }

    #[test]
    fn buyer_recovers_prepared_with_reservation_restored() {
        let (txn, _, _) = ids();
        let entry = recovered(vec![
            LogRecord::new(
                txn,
                RecordBody::Undo(BalanceSnapshot {
                    balance: money(100),
                    reserved: money(0),
                }),
            ),
            LogRecord::new(
                txn,
                RecordBody::Redo(BalanceSnapshot {
                    balance: money(60),
                    reserved: money(0),
                }),
            ),
        ]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(
            role.buyer,
            Some(BuyerPhase::Prepared {
                txn,
                amount: money(40),
                seller: None,
                nudges: 0
            })
        );
        let restore = role.restore.unwrap();
        assert_eq!(restore.snapshot.balance, money(100));
        assert_eq!(restore.snapshot.reserved, money(40));
        assert!(role.effects.is_empty(), "in doubt: hold and await");
    }

    #[test]
    fn seller_recovers_committing_and_resends_commit() {
        let (txn, _, buyer) = ids();
        let entry = recovered(vec![LogRecord::new(
            txn,
            RecordBody::Commit {
                peer: buyer,
                amount: money(40),
            },
        )]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(
            role.seller,
            Some(SellerPhase::Committing {
                txn,
                amount: money(40),
                buyer,
                retries: 0
            })
        );
        assert!(matches!(
            role.effects[0],
            Effect::Send {
                msg: ProtocolMessage::Commit { .. },
                ..
            }
        ));
    }

    #[test]
    fn seller_recovers_aborting_and_resends_abort() {
        let (txn, _, buyer) = ids();
        let entry = recovered(vec![LogRecord::new(
            txn,
            RecordBody::Abort { peer: Some(buyer) },
        )]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(
            role.seller,
            Some(SellerPhase::Aborting {
                txn,
                buyer,
                retries: 0
            })
        );
        assert!(matches!(
            role.effects[0],
            Effect::Send {
                msg: ProtocolMessage::AbortMsg { .. },
                ..
            }
        ));
    }

    #[test]
    fn buyer_recovers_completed_to_redo_snapshot() {
        let (txn, _, _) = ids();
        let entry = recovered(vec![
            LogRecord::new(
                txn,
                RecordBody::Undo(BalanceSnapshot {
                    balance: money(100),
                    reserved: money(0),
                }),
            ),
            LogRecord::new(
                txn,
                RecordBody::Redo(BalanceSnapshot {
                    balance: money(60),
                    reserved: money(0),
                }),
            ),
            LogRecord::new(txn, RecordBody::Complete),
        ]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(role.buyer, Some(BuyerPhase::Committed { txn }));
        assert_eq!(role.restore.unwrap().snapshot.balance, money(60));
    }

    #[test]
    fn incomplete_prepare_recovers_to_recorded_abort() {
        let (txn, _, _) = ids();
        let entry = recovered(vec![LogRecord::new(
            txn,
            RecordBody::Undo(BalanceSnapshot {
                balance: money(100),
                reserved: money(0),
            }),
        )]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(role.buyer, Some(BuyerPhase::Aborted { txn }));
        assert!(role.restore.is_none());
        assert!(matches!(
            role.effects[0],
            Effect::AppendLog(LogRecord {
                body: RecordBody::Abort { peer: None },
                ..
            })
        ));
    }

    #[test]
    fn conflicting_decisions_are_corrupt() {
        let (txn, _, buyer) = ids();
        let entry = recovered(vec![
            LogRecord::new(
                txn,
                RecordBody::Commit {
                    peer: buyer,
                    amount: money(40),
                },
            ),
            LogRecord::new(txn, RecordBody::Abort { peer: Some(buyer) }),
        ]);
        assert!(matches!(
            recover_txn(&entry, &cfg()).unwrap_err(),
            EngineError::CorruptLog(_)
        ));
    }

    #[test]
    fn erased_transactions_recover_terminal_tombstones() {
        let (txn, _, _) = ids();
        let entry = recovered(vec![
            LogRecord::new(
                txn,
                RecordBody::Undo(BalanceSnapshot {
                    balance: money(100),
                    reserved: money(0),
                }),
            ),
            LogRecord::new(
                txn,
                RecordBody::Redo(BalanceSnapshot {
                    balance: money(60),
                    reserved: money(0),
                }),
            ),
            LogRecord::new(txn, RecordBody::Complete),
            LogRecord::new(txn, RecordBody::DoneErase),
        ]);
        let role = recover_txn(&entry, &cfg()).unwrap();
        assert_eq!(role.buyer, Some(BuyerPhase::Committed { txn }));
        assert!(role.restore.is_none(), "erased means settled");
    }

    #[test]
    fn message_wire_roundtrip() {
        let (txn, _, _) = ids();
        let msgs = [
            ProtocolMessage::CommitRequest {
                txn,
                amount: money(40),
            },
            ProtocolMessage::Agreed { txn },
            ProtocolMessage::AbortMsg { txn },
            ProtocolMessage::Commit { txn },
            ProtocolMessage::Committed { txn },
        ];
        for msg in msgs {
            assert_eq!(ProtocolMessage::from_bytes(&msg.to_bytes()).unwrap(), msg);
        }
        assert!(ProtocolMessage::from_bytes(&[0x99]).is_err());
    }
}
