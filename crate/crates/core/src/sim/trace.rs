//! Simulation trace: an ordered, replayable record of everything that
//! happened, serializable to a stable line-oriented text format for
//! golden-file diffing.
//!
//! One event per line:
//!
//! ```text
//! <time> <node> <kind> <details>
//! ```
//!
//! followed by `final` lines holding terminal wallet snapshots and one
//! `verdict` line. Identical configurations produce byte-identical files;
//! every field comes from deterministic state, and map iteration is over
//! ordered containers only.

use std::fmt::Write as FmtWrite;

use crate::money::MoneyAmount;

/// What one trace line records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceKind {
    /// Script directive executed.
    Script,
    /// Frame handed to the network.
    Send,
    /// Frame dropped by fault injection.
    Drop,
    /// Frame duplicated by fault injection.
    Dup,
    /// Frame delivered to a node.
    Deliver,
    /// Frame arrived at a crashed node and vanished.
    DeliverToCrashed,
    /// Timer fired.
    Timer,
    /// Node crashed (fault injection).
    CrashNode,
    /// Node restarted and ran recovery.
    Restart,
    /// State machine transition (carries before/after).
    State,
    /// Wallet balances changed.
    Wallet,
    /// Seller-side sale conclusion.
    Sale,
    /// Buyer-side purchase conclusion.
    Purchase,
    /// Anything else worth seeing.
    Note,
}

impl TraceKind {
    fn name(&self) -> &'static str {
        match self {
            TraceKind::Script => "script",
            TraceKind::Send => "send",
            TraceKind::Drop => "drop",
            TraceKind::Dup => "dup",
            TraceKind::Deliver => "deliver",
            TraceKind::DeliverToCrashed => "deliver-to-crashed",
            TraceKind::Timer => "timer",
            TraceKind::CrashNode => "crash",
            TraceKind::Restart => "restart",
            TraceKind::State => "state",
            TraceKind::Wallet => "wallet",
            TraceKind::Sale => "sale",
            TraceKind::Purchase => "purchase",
            TraceKind::Note => "note",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: u64,
    pub node: String,
    pub kind: TraceKind,
    pub details: String,
}

/// Terminal wallet snapshot for one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalWallet {
    pub node: String,
    pub balance: MoneyAmount,
    pub reserved: MoneyAmount,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub finals: Vec<FinalWallet>,
    pub header: Vec<String>,
}

impl Trace {
    pub fn push(&mut self, time: u64, node: &str, kind: TraceKind, details: String) {
        self.events.push(TraceEvent {
            time,
            node: node.to_string(),
            kind,
            details,
        });
    }

    /// Serializes to the stable text format. `verdict_line` is appended
    /// verbatim as the last line.
    pub fn to_text(&self, verdict_line: &str) -> String {
        let mut out = String::new();
        out.push_str("# p2pwallet trace v1\n");
        for line in &self.header {
            let _ = writeln!(out, "# {line}");
        }
        for ev in &self.events {
            let _ = writeln!(
                out,
                "{:>6} {} {} {}",
                ev.time,
                ev.node,
                ev.kind.name(),
                ev.details
            );
        }
        for fw in &self.finals {
            let _ = writeln!(
                out,
                "final {} balance={} reserved={}",
                fw.node, fw.balance, fw.reserved
            );
        }
        out.push_str(verdict_line);
        out.push('\n');
        out
    }
}
