//! Exhaustive schedule exploration over a two-node exchange.
//!
//! Enumerates every schedule within fault bounds — at most L losses, D
//! duplications, C crashes (crashes can split any transition between two
//! effects) — by depth-first search over the event-interleaving tree with
//! memoized states, and checks every terminal for outcome agreement and
//! exact conservation. This is the brute-force oracle the acceptance
//! criteria lean on.
//!
//! Two modeling choices keep the space finite and honest:
//!
//! - Retransmission and vote-repeat counters are bounded by the protocol
//!   config, so every path terminates.
//! - A timer may fire only when no frame is in flight: the retransmission
//!   timeout exceeds any network delay. Premature-timeout schedules are
//!   covered separately by the duplication budget, which is what they are
//!   indistinguishable from on the wire.
//!
//! Nodes run with derived (deterministic) per-message secrets so identical
//! messages seal identically and memoization can work on frame bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{log_outcome, LogOutcome, SimError};
use crate::commit::{ProtocolConfig, SellerPhase, TimeoutPolicy};
use crate::envelope::toy::ToySuite;
use crate::envelope::{open, CryptoSuite, PrivateKey, PublicKey};
use crate::ids::NodeId;
use crate::money::MoneyAmount;
use crate::node::{
    decode_frame, CrashAtEffect, Dest, FramePayload, MemStore, NoFaults, Node, NodeStore,
    PeerPayload, SecretMode, StepOutput, TimerCmd, TimerKind,
};
use crate::stable_log::MemStorage;
use crate::wallet::{Mode, Office, TxnOutcome};
use crate::wire::Writer;

/// Fault budgets and world parameters for one exploration.
#[derive(Debug, Clone)]
pub struct ExploreBounds {
    pub max_losses: u32,
    pub max_dups: u32,
    pub max_crashes: u32,
    pub protocol: ProtocolConfig,
    pub balance: u64,
    pub amount: u64,
    /// Skip the deterministic discovery prefix and start exploring at the
    /// commit exchange (COMMIT-REQUEST already in flight).
    pub start_at_commit: bool,
    /// Checker-validation mutation; see the simulator config.
    pub skip_prepare_logging: bool,
    /// Abort with `BoundsTooLarge` past this many distinct states.
    pub max_states: usize,
}

impl Default for ExploreBounds {
    fn default() -> Self {
        ExploreBounds {
            max_losses: 2,
            max_dups: 1,
            max_crashes: 1,
            protocol: ProtocolConfig {
                max_prepare_retries: 2,
                max_commit_retries: 3,
                timeout_units: 2,
                timeout_policy: TimeoutPolicy::RetryThenAbort,
            },
            balance: 100,
            amount: 40,
            start_at_commit: false,
            skip_prepare_logging: false,
            max_states: 4_000_000,
        }
    }
}

/// One distinct terminal state class.
#[derive(Debug, Clone)]
pub struct TerminalClass {
    /// One reaching schedule, as ordered event labels.
    pub example: Vec<String>,
    pub atomic: bool,
    pub conserved: bool,
    /// Coordinator parked with a durable commit obligation outstanding.
    pub unacked: bool,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub description: String,
    pub schedule: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExploreReport {
    pub states_visited: usize,
    pub schedules_total: u128,
    /// Terminal description → class details.
    pub terminals: BTreeMap<String, TerminalClass>,
    pub violations: Vec<Violation>,
}

impl ExploreReport {
    pub fn all_terminals_atomic_and_conserved(&self) -> bool {
        self.violations.is_empty()
            && self.terminals.values().all(|t| t.atomic && t.conserved)
    }

    /// The message sequence of the sole schedule, when exploration was
    /// deterministic (no faults budgeted).
    pub fn sole_message_sequence(&self) -> Option<Vec<String>> {
        if self.terminals.len() != 1 || self.schedules_total != 1 {
            return None;
        }
        let example = &self.terminals.values().next().unwrap().example;
        Some(
            example
                .iter()
                .filter_map(|label| label.strip_prefix("deliver "))
                .map(|s| s.split(' ').next().unwrap_or(s).to_string())
                .collect(),
        )
    }
}

type ExpNodeInner = Node<MemStorage, MemStore>;

#[derive(Clone)]
struct ExpNode {
    id: NodeId,
    alive: Option<ExpNodeInner>,
    durable: Option<(MemStorage, MemStore)>,
    timers: std::collections::BTreeSet<TimerKind>,
    restarts: u32,
}

/// A frame in flight. `Ord` gives the deterministic enumeration order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Flight {
    to: u8,
    from: u8,
    bytes: Vec<u8>,
}

#[derive(Clone)]
struct World {
    nodes: [ExpNode; 2],
    flight: BTreeMap<Flight, u32>,
    losses_left: u32,
    dups_left: u32,
    crashes_left: u32,
}

impl World {
    fn digest(&self) -> [u8; 32] {
        let mut w = Writer::new();
        for node in &self.nodes {
            match &node.alive {
                Some(n) => {
                    w.put_u8(1);
                    w.put_bytes(&n.canonical_state());
                }
                None => {
                    w.put_u8(0);
                    let (log, store) = node.durable.as_ref().expect("crashed state");
                    w.put_bytes(log.bytes());
                    let wallet = store.load_wallet().ok().flatten().unwrap_or_default();
                    w.put_bytes(&wallet);
                }
            }
            w.put_u32(node.timers.len() as u32);
            for kind in &node.timers {
                w.put_bytes(format!("{kind:?}").as_bytes());
            }
        }
        w.put_u32(self.flight.len() as u32);
        for (f, count) in &self.flight {
            w.put_u8(f.to);
            w.put_u8(f.from);
            w.put_bytes(&f.bytes);
            w.put_u32(*count);
        }
        w.put_u32(self.losses_left);
        w.put_u32(self.dups_left);
        w.put_u32(self.crashes_left);
        let digest = Sha256::digest(w.into_bytes());
        digest.into()
    }
}

#[derive(Clone)]
enum Event {
    Deliver { flight: Flight, crash_after: Option<u64> },
    Drop { flight: Flight },
    Dup { flight: Flight },
    Fire { node: usize, kind: TimerKind, crash_after: Option<u64> },
    Crash { node: usize },
    Restart { node: usize },
}

struct Explorer {
    bounds: ExploreBounds,
    suite: Arc<dyn CryptoSuite + Send + Sync>,
    /// Keys saved at provisioning so frames can be labeled for schedules.
    privates: [PrivateKey; 2],
    publics: [PublicKey; 2],
    names: [&'static str; 2],
    initial_total: u128,
    memo: HashMap<[u8; 32], u128>,
    in_progress: HashSet<[u8; 32]>,
    terminals: BTreeMap<String, TerminalClass>,
    violations: Vec<Violation>,
    path: Vec<String>,
}

/// Enumerates every schedule within the bounds and reports all reachable
/// terminals with checker results.
pub fn explore_exhaustive(bounds: &ExploreBounds) -> Result<ExploreReport, SimError> {
    if bounds.amount == 0 || bounds.balance < bounds.amount {
        return Err(SimError::ConfigInvalid(
            "exploration needs 0 < amount <= balance".into(),
        ));
    }
    let suite: Arc<dyn CryptoSuite + Send + Sync> = Arc::new(ToySuite);
    let mut rng = ChaCha20Rng::seed_from_u64(0xE0);
    let mut office = Office::create(suite.as_ref(), &mut rng);

    let seller_id = NodeId::from_name("S1").unwrap();
    let buyer_id = NodeId::from_name("B1").unwrap();
    let seller_wallet = office
        .provision(suite.as_ref(), &mut rng, seller_id)
        .expect("fresh office");
    let mut buyer_wallet = office
        .provision(suite.as_ref(), &mut rng, buyer_id)
        .expect("fresh office");
    let voucher = office
        .issue_charge(suite.as_ref(), buyer_id, MoneyAmount::new(bounds.balance))
        .expect("charge");
    buyer_wallet
        .redeem_charge(suite.as_ref(), &voucher)
        .expect("redeem");

    let privates = [
        seller_wallet.keys.own_private.clone(),
        buyer_wallet.keys.own_private.clone(),
    ];
    let publics = [
        seller_wallet.keys.own_public.clone(),
        buyer_wallet.keys.own_public.clone(),
    ];

    let mut seller_wallet = seller_wallet;
    seller_wallet.mode = Mode::Seller;
    buyer_wallet.mode = Mode::Buyer;

    let make_node = |wallet, seed| {
        let mut node = Node::create(
            wallet,
            MemStorage::new(),
            MemStore::new(),
            bounds.protocol,
            suite.clone(),
            ChaCha20Rng::seed_from_u64(seed),
            SecretMode::Derived,
        )
        .expect("node");
        node.mutation_skip_prepare_logging = bounds.skip_prepare_logging;
        node
    };
    let mut seller = make_node(seller_wallet, 1);
    let buyer = make_node(buyer_wallet, 2);

    let sale_out = seller
        .start_sale(
            buyer_id,
            MoneyAmount::new(bounds.amount),
            b"goods",
            &mut NoFaults,
        )
        .expect("sale start cannot crash without a hook");

    let mut world = World {
        nodes: [
            ExpNode {
                id: seller_id,
                alive: Some(seller),
                durable: None,
                timers: Default::default(),
                restarts: 0,
            },
            ExpNode {
                id: buyer_id,
                alive: Some(buyer),
                durable: None,
                timers: Default::default(),
                restarts: 0,
            },
        ],
        flight: BTreeMap::new(),
        losses_left: bounds.max_losses,
        dups_left: bounds.max_dups,
        crashes_left: bounds.max_crashes,
    };

    let mut explorer = Explorer {
        bounds: bounds.clone(),
        suite,
        privates,
        publics,
        names: ["S1", "B1"],
        initial_total: bounds.balance as u128,
        memo: HashMap::new(),
        in_progress: HashSet::new(),
        terminals: BTreeMap::new(),
        violations: Vec::new(),
        path: Vec::new(),
    };
    explorer.apply_output(&mut world, 0, sale_out);

    if bounds.start_at_commit {
        explorer.run_deterministic_prefix(&mut world)?;
    }

    let schedules_total = explorer.dfs(world)?;
    Ok(ExploreReport {
        states_visited: explorer.memo.len(),
        schedules_total,
        terminals: explorer.terminals,
        violations: explorer.violations,
    })
}

impl Explorer {
    /// Applies one step output to the world: frames into flight, timer
    /// commands onto the armed set.
    fn apply_output(&self, world: &mut World, node_idx: usize, out: StepOutput) {
        for cmd in out.timers {
            match cmd {
                TimerCmd::Start { kind, .. } => {
                    world.nodes[node_idx].timers.insert(kind);
                }
                TimerCmd::Cancel { kind } => {
                    world.nodes[node_idx].timers.remove(&kind);
                }
            }
        }
        for frame in out.frames {
            let recipients: Vec<usize> = match frame.dest {
                Dest::Broadcast => (0..2).filter(|i| *i != node_idx).collect(),
                Dest::Node(id) => (0..2).filter(|i| world.nodes[*i].id == id).collect(),
            };
            for to in recipients {
                *world
                    .flight
                    .entry(Flight {
                        to: to as u8,
                        from: node_idx as u8,
                        bytes: frame.bytes.clone(),
                    })
                    .or_insert(0) += 1;
            }
        }
        // events are used only for labels in traces; the explorer ignores
        // them.
    }

    /// Runs the fault-free prefix up to (and excluding) the delivery of the
    /// first COMMIT-REQUEST, leaving it in flight.
    fn run_deterministic_prefix(&mut self, world: &mut World) -> Result<(), SimError> {
        for _ in 0..64 {
            if world
                .flight
                .keys()
                .any(|f| self.label_frame(f) == "COMMIT-REQUEST")
            {
                return Ok(());
            }
            // Enumerate as if no fault budgets existed: the prefix is the
            // canonical fault-free sequence.
            let mut probe = world.clone();
            probe.losses_left = 0;
            probe.dups_left = 0;
            probe.crashes_left = 0;
            let events = self.enumerate(&probe);
            let [event] = events.as_slice() else {
                return Err(SimError::ConfigInvalid(
                    "discovery prefix is not deterministic".into(),
                ));
            };
            let (_, event) = event.clone();
            self.apply(world, &event);
        }
        Err(SimError::ConfigInvalid(
            "discovery prefix did not reach the commit exchange".into(),
        ))
    }

    /// Human-readable message kind for schedule labels, opening envelopes
    /// with the receiver's stored key.
    fn label_frame(&self, flight: &Flight) -> String {
        match decode_frame(&flight.bytes) {
            Ok(FramePayload::Lookup(_)) => "LOOKUP".into(),
            Ok(FramePayload::LookupResponse(_)) => "LOOKUP-RESPONSE".into(),
            Ok(FramePayload::Enveloped { sender, envelope }) => {
                let receiver = flight.to as usize;
                let sender_idx = if self.publics.is_empty() { 0 } else { flight.from as usize };
                debug_assert_eq!(
                    sender,
                    [NodeId::from_name("S1").unwrap(), NodeId::from_name("B1").unwrap()]
                        [sender_idx]
                );
                match open(
                    self.suite.as_ref(),
                    &envelope,
                    &self.privates[receiver],
                    &self.publics[sender_idx],
                ) {
                    Ok(plain) => match PeerPayload::from_bytes(&plain) {
                        Ok(p) => p.kind_name().to_string(),
                        Err(_) => "OPAQUE".into(),
                    },
                    Err(_) => "UNOPENABLE".into(),
                }
            }
            Err(_) => "MALFORMED".into(),
        }
    }

    /// All enabled events in deterministic order.
    fn enumerate(&self, world: &World) -> Vec<(String, Event)> {
        let mut events = Vec::new();
        for (flight, _count) in &world.flight {
            let label = self.label_frame(flight);
            let to_name = self.names[flight.to as usize];
            events.push((
                format!("deliver {label} {}->{to_name}", self.names[flight.from as usize]),
                Event::Deliver {
                    flight: flight.clone(),
                    crash_after: None,
                },
            ));
            if world.crashes_left > 0 && world.nodes[flight.to as usize].alive.is_some() {
                // Mid-processing crash points are enumerated lazily inside
                // `apply` expansion: we need the transition's effect count.
                // Represent them with a probe below.
                let effects = self.probe_deliver(world, flight);
                for j in 1..effects {
                    events.push((
                        format!(
                            "deliver {label} {}->{to_name} crash@{j}",
                            self.names[flight.from as usize]
                        ),
                        Event::Deliver {
                            flight: flight.clone(),
                            crash_after: Some(j),
                        },
                    ));
                }
            }
        }
        if world.losses_left > 0 {
            for flight in world.flight.keys() {
                let label = self.label_frame(flight);
                events.push((
                    format!("drop {label} ->{}", self.names[flight.to as usize]),
                    Event::Drop {
                        flight: flight.clone(),
                    },
                ));
            }
        }
        if world.dups_left > 0 {
            for flight in world.flight.keys() {
                let label = self.label_frame(flight);
                events.push((
                    format!("dup {label} ->{}", self.names[flight.to as usize]),
                    Event::Dup {
                        flight: flight.clone(),
                    },
                ));
            }
        }
        // Timers only fire on an empty network: timeouts exceed delivery
        // delays.
        if world.flight.is_empty() {
            for (idx, node) in world.nodes.iter().enumerate() {
                if node.alive.is_none() {
                    continue;
                }
                for kind in &node.timers {
                    events.push((
                        format!("fire {} {kind:?}", self.names[idx]),
                        Event::Fire {
                            node: idx,
                            kind: *kind,
                            crash_after: None,
                        },
                    ));
                    if world.crashes_left > 0 {
                        let effects = self.probe_fire(world, idx, *kind);
                        for j in 1..effects {
                            events.push((
                                format!("fire {} {kind:?} crash@{j}", self.names[idx]),
                                Event::Fire {
                                    node: idx,
                                    kind: *kind,
                                    crash_after: Some(j),
                                },
                            ));
                        }
                    }
                }
            }
        }
        for (idx, node) in world.nodes.iter().enumerate() {
            if node.alive.is_some() {
                if world.crashes_left > 0 {
                    events.push((format!("crash {}", self.names[idx]), Event::Crash { node: idx }));
                }
            } else {
                events.push((
                    format!("restart {}", self.names[idx]),
                    Event::Restart { node: idx },
                ));
            }
        }
        events
    }

    /// Effect count of delivering this frame, probed on a clone.
    fn probe_deliver(&self, world: &World, flight: &Flight) -> u64 {
        let idx = flight.to as usize;
        let Some(node) = &world.nodes[idx].alive else {
            return 0;
        };
        let mut clone = node.clone();
        let before = clone.effect_count();
        let _ = clone.handle_frame(&flight.bytes, &mut NoFaults);
        clone.effect_count() - before
    }

    fn probe_fire(&self, world: &World, idx: usize, kind: TimerKind) -> u64 {
        let Some(node) = &world.nodes[idx].alive else {
            return 0;
        };
        let mut clone = node.clone();
        let before = clone.effect_count();
        let _ = clone.handle_timer(kind, &mut NoFaults);
        clone.effect_count() - before
    }

    fn remove_one(world: &mut World, flight: &Flight) {
        let count = world.flight.get_mut(flight).expect("in flight");
        *count -= 1;
        if *count == 0 {
            world.flight.remove(flight);
        }
    }

    fn crash_bookkeeping(world: &mut World, idx: usize) {
        let node = world.nodes[idx].alive.take().expect("was alive");
        world.nodes[idx].durable = Some(node.into_durable());
        world.nodes[idx].timers.clear();
        world.crashes_left -= 1;
    }

    fn apply(&self, world: &mut World, event: &Event) {
        match event {
            Event::Deliver {
                flight,
                crash_after,
            } => {
                Self::remove_one(world, flight);
                let idx = flight.to as usize;
                if world.nodes[idx].alive.is_none() {
                    return; // datagram to a dead process vanishes
                }
                let base = world.nodes[idx].alive.as_ref().unwrap().effect_count();
                let result = {
                    let node = world.nodes[idx].alive.as_mut().unwrap();
                    match crash_after {
                        None => node.handle_frame(&flight.bytes, &mut NoFaults),
                        Some(j) => node.handle_frame(&flight.bytes, &mut CrashAtEffect(base + j)),
                    }
                };
                match result {
                    Ok(out) => self.apply_output(world, idx, out),
                    Err(crashed) => {
                        self.apply_output(world, idx, crashed.partial);
                        Self::crash_bookkeeping(world, idx);
                    }
                }
            }
            Event::Drop { flight } => {
                Self::remove_one(world, flight);
                world.losses_left -= 1;
            }
            Event::Dup { flight } => {
                *world.flight.get_mut(flight).expect("in flight") += 1;
                world.dups_left -= 1;
            }
            Event::Fire {
                node: idx,
                kind,
                crash_after,
            } => {
                world.nodes[*idx].timers.remove(kind);
                let base = world.nodes[*idx].alive.as_ref().unwrap().effect_count();
                let result = {
                    let node = world.nodes[*idx].alive.as_mut().unwrap();
                    match crash_after {
                        None => node.handle_timer(*kind, &mut NoFaults),
                        Some(j) => node.handle_timer(*kind, &mut CrashAtEffect(base + j)),
                    }
                };
                match result {
                    Ok(out) => self.apply_output(world, *idx, out),
                    Err(crashed) => {
                        self.apply_output(world, *idx, crashed.partial);
                        Self::crash_bookkeeping(world, *idx);
                    }
                }
            }
            Event::Crash { node: idx } => {
                Self::crash_bookkeeping(world, *idx);
            }
            Event::Restart { node: idx } => {
                let (log, store) = world.nodes[*idx].durable.take().expect("crashed");
                world.nodes[*idx].restarts += 1;
                let rng =
                    ChaCha20Rng::seed_from_u64(0x9000 + *idx as u64 * 31 + world.nodes[*idx].restarts as u64);
                match Node::recover(
                    log,
                    store,
                    self.bounds.protocol,
                    self.suite.clone(),
                    rng,
                    SecretMode::Derived,
                    &mut NoFaults,
                ) {
                    Ok((mut node, out)) => {
                        node.mutation_skip_prepare_logging = self.bounds.skip_prepare_logging;
                        world.nodes[*idx].alive = Some(node);
                        self.apply_output(world, *idx, out);
                    }
                    Err((e, _)) => {
                        panic!("recovery must not fail in the explorer: {e}");
                    }
                }
            }
        }
    }

    fn dfs(&mut self, world: World) -> Result<u128, SimError> {
        let key = world.digest();
        if let Some(&count) = self.memo.get(&key) {
            return Ok(count);
        }
        if self.in_progress.contains(&key) {
            return Err(SimError::BoundsTooLarge(
                "cycle in the schedule graph".into(),
            ));
        }
        if self.memo.len() >= self.bounds.max_states {
            return Err(SimError::BoundsTooLarge(format!(
                "more than {} states",
                self.bounds.max_states
            )));
        }

        let events = self.enumerate(&world);
        if events.is_empty() {
            self.record_terminal(&world);
            self.memo.insert(key, 1);
            return Ok(1);
        }

        self.in_progress.insert(key);
        let mut total: u128 = 0;
        for (label, event) in events {
            let mut next = world.clone();
            self.apply(&mut next, &event);
            self.path.push(label);
            total = total.saturating_add(self.dfs(next)?);
            self.path.pop();
        }
        self.in_progress.remove(&key);
        self.memo.insert(key, total);
        Ok(total)
    }

    fn record_terminal(&mut self, world: &World) {
        // Terminals have no crashed nodes (restart is always enabled), so
        // wallets are directly measurable.
        let seller = world.nodes[0].alive.as_ref().expect("terminal is alive");
        let buyer = world.nodes[1].alive.as_ref().expect("terminal is alive");

        // Conservation: balances plus any credit still owed under a durable
        // commit obligation (participant debited, parked coordinator not yet
        // credited).
        let mut total =
            seller.wallet.balance.minor_units() as u128 + buyer.wallet.balance.minor_units() as u128;
        for (txn, entry) in &buyer.wallet.history {
            if entry.outcome == TxnOutcome::Committed && !seller.wallet.history.contains_key(txn) {
                total += entry.amount.minor_units() as u128;
            }
        }
        let conserved = total == self.initial_total
            && seller.wallet.reserved <= seller.wallet.balance
            && buyer.wallet.reserved <= buyer.wallet.balance;

        // Atomicity from the durable logs.
        let seller_summary = seller.log_summary();
        let buyer_summary = buyer.log_summary();
        let mut txns: std::collections::BTreeSet<_> = seller_summary.keys().copied().collect();
        txns.extend(buyer_summary.keys().copied());
        let mut atomic = true;
        let mut outcome_desc = String::from("no-transaction");
        for txn in &txns {
            let s = log_outcome(&seller_summary, seller.log_records(), txn);
            let b = log_outcome(&buyer_summary, buyer.log_records(), txn);
            let divergent = matches!(
                (s, b),
                (LogOutcome::CommittedApplied | LogOutcome::CommittedPending, LogOutcome::Aborted)
                    | (LogOutcome::Aborted, LogOutcome::CommittedApplied | LogOutcome::CommittedPending)
            ) || (s == LogOutcome::CommittedApplied && b == LogOutcome::None);
            if divergent {
                atomic = false;
            }
            outcome_desc = format!("s_log={s:?} b_log={b:?}");
        }

        let unacked = !seller.unacked_txns().is_empty();
        let seller_phase = seller
            .seller_phases()
            .values()
            .map(SellerPhase::name)
            .next()
            .unwrap_or("None");
        let buyer_phase = buyer
            .buyer_phases()
            .values()
            .map(|p| p.name())
            .next()
            .unwrap_or("None");

        let description = format!(
            "seller={} buyer={} s_bal={} b_bal={}/r{} {}",
            seller_phase,
            buyer_phase,
            seller.wallet.balance,
            buyer.wallet.balance,
            buyer.wallet.reserved,
            outcome_desc,
        );

        if !atomic || !conserved {
            self.violations.push(Violation {
                description: format!(
                    "{}{}{}",
                    description,
                    if atomic { "" } else { " NOT-ATOMIC" },
                    if conserved { "" } else { " NOT-CONSERVED" }
                ),
                schedule: self.path.clone(),
            });
        }
        self.terminals
            .entry(description)
            .or_insert_with(|| TerminalClass {
                example: self.path.clone(),
                atomic,
                conserved,
                unacked,
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_faults_yield_the_single_committed_terminal() {
        let bounds = ExploreBounds {
            max_losses: 0,
            max_dups: 0,
            max_crashes: 0,
            ..ExploreBounds::default()
        };
        let report = explore_exhaustive(&bounds).unwrap();
        assert_eq!(report.terminals.len(), 1, "{:#?}", report.terminals);
        assert_eq!(report.schedules_total, 1);
        let terminal = report.terminals.values().next().unwrap();
        assert!(terminal.atomic && terminal.conserved && !terminal.unacked);
        let desc = report.terminals.keys().next().unwrap();
        assert!(desc.contains("seller=Done(Committed)"), "{desc}");
        assert!(desc.contains("buyer=Committed"), "{desc}");
        assert!(desc.contains("s_bal=40 b_bal=60/r0"), "{desc}");

        // The sole schedule is the canonical message sequence.
        let sequence = report.sole_message_sequence().unwrap();
        assert_eq!(
            sequence,
            vec![
                "LOOKUP",
                "LOOKUP-RESPONSE",
                "QUOTE",
                "QUOTE-DECISION",
                "COMMIT-REQUEST",
                "AGREED",
                "COMMIT",
                "COMMITTED"
            ]
        );
    }

    #[test]
    fn single_loss_explores_multiple_schedules_all_clean() {
        let bounds = ExploreBounds {
            max_losses: 1,
            max_dups: 0,
            max_crashes: 0,
            ..ExploreBounds::default()
        };
        let report = explore_exhaustive(&bounds).unwrap();
        assert!(report.schedules_total > 1);
        assert!(
            report.all_terminals_atomic_and_conserved(),
            "{:#?}",
            report.violations
        );
    }

    #[test]
    fn mutation_that_skips_prepare_logging_is_caught() {
        let bounds = ExploreBounds {
            max_losses: 0,
            max_dups: 0,
            max_crashes: 1,
            skip_prepare_logging: true,
            ..ExploreBounds::default()
        };
        let report = explore_exhaustive(&bounds).unwrap();
        assert!(
            !report.violations.is_empty(),
            "the checker must notice the missing UNDO/REDO: {:#?}",
            report.terminals
        );
    }
}
