//! Deterministic discrete-event simulator with fault injection.
//!
//! Drives real [`Node`]s — the same type the datagram CLI runs — over a
//! simulated lossy network: probabilistic loss, duplication, bounded delay,
//! and crashes at chosen effect boundaries, all from one seed. The same
//! configuration produces a byte-identical trace.
//!
//! Time is integer units. Frames roll loss/duplication/delay at send time;
//! a crashed node loses whatever a killed process would lose (its memory
//! and timers) and keeps whatever a file system would keep (log and wallet
//! records). Restarts run the node's recovery and resume play.
//!
//! The checkers close the loop: atomicity and conservation are computed
//! from durable logs and wallet balances, not from what the protocol claims
//! happened.

pub mod explore;
pub mod script;
pub mod trace;

use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit::{ProtocolConfig, SellerPhase, TimeoutPolicy};
use crate::envelope::reference::ReferenceSuite;
use crate::envelope::toy::ToySuite;
use crate::envelope::CryptoSuite;
use crate::ids::{NodeId, TransactionId};
use crate::money::MoneyAmount;
use crate::node::{
    Dest, FaultHook, MemStore, Node, NodeEvent, OutFrame, SaleOutcome, SecretMode, StepOutput,
    TimerCmd, TimerKind,
};
use crate::stable_log::{MemStorage, RecordBody, TxnRecovery};
use crate::wallet::{Mode, Office, TxnOutcome};
use trace::{FinalWallet, Trace, TraceKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("state bound exceeded: {0}")]
    BoundsTooLarge(String),
}

/// Simulation parameters. Same config (plus scenario) → bit-identical trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    /// Frame delay in time units, sampled uniformly from this inclusive
    /// range.
    pub delay_min: u32,
    pub delay_max: u32,
    /// Simulated time bound; events past it are not processed.
    pub max_time: u64,
    pub timeout_units: u32,
    pub max_prepare_retries: u32,
    pub max_commit_retries: u32,
    /// Seller timeout policy: retransmit-then-abort (default) or abort on
    /// first expiry.
    pub abort_immediately: bool,
    /// "toy" (deterministic, NOT SECURE) or "reference".
    pub suite: String,
    /// Eventual-delivery fairness: after this many injected losses, frames
    /// always deliver. `None` is pure probabilistic loss.
    pub fairness_loss_cap: Option<u64>,
    /// Units a crashed node stays down before recovery.
    pub restart_delay: u32,
    /// Inject this many crashes at seeded-random effect boundaries.
    pub random_crashes: u32,
    /// Checker-validation mutation: participant skips its UNDO/REDO appends
    /// before voting. Must make the verdict red; never enable outside tests.
    pub skip_prepare_logging: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            loss_prob: 0.0,
            dup_prob: 0.0,
            delay_min: 1,
            delay_max: 1,
            max_time: 1000,
            timeout_units: 2,
            max_prepare_retries: 3,
            max_commit_retries: 16,
            abort_immediately: false,
            suite: "toy".to_string(),
            fairness_loss_cap: None,
            restart_delay: 2,
            random_crashes: 0,
            skip_prepare_logging: false,
        }
    }
}

impl SimConfig {
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            max_prepare_retries: self.max_prepare_retries,
            max_commit_retries: self.max_commit_retries,
            timeout_units: self.timeout_units,
            timeout_policy: if self.abort_immediately {
                TimeoutPolicy::AbortImmediately
            } else {
                TimeoutPolicy::RetryThenAbort
            },
        }
    }

    pub fn make_suite(&self) -> Result<Arc<dyn CryptoSuite + Send + Sync>, SimError> {
        match self.suite.as_str() {
            "toy" => Ok(Arc::new(ToySuite)),
            "reference" => Ok(Arc::new(ReferenceSuite)),
            other => Err(SimError::ConfigInvalid(format!("unknown suite {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.loss_prob) || !(0.0..=1.0).contains(&self.dup_prob) {
            return Err(SimError::ConfigInvalid(
                "probabilities must be within [0,1]".into(),
            ));
        }
        if self.delay_min > self.delay_max || self.delay_min == 0 {
            return Err(SimError::ConfigInvalid(
                "delay range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.timeout_units == 0 {
            return Err(SimError::ConfigInvalid(
                "timeout_units must be positive".into(),
            ));
        }
        self.make_suite().map(|_| ())
    }
}

/// One node in the simulated topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseSpec {
    pub seller: String,
    pub buyer: String,
    pub amount: u64,
    pub at: u64,
    pub description: String,
}

/// A parsed scenario: topology plus the script of charges, purchases and
/// crash directives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub charges: Vec<(String, u64)>,
    pub purchases: Vec<PurchaseSpec>,
    /// Per-node effect indices (within the current lifetime) to crash at.
    pub crash_plan: BTreeMap<String, Vec<u64>>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.nodes.len() < 2 {
            return Err(SimError::ConfigInvalid(
                "topology needs at least 2 nodes".into(),
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for spec in &self.nodes {
            if NodeId::from_name(&spec.name).is_none() {
                return Err(SimError::ConfigInvalid(format!(
                    "invalid node name {:?}",
                    spec.name
                )));
            }
            if !names.insert(spec.name.clone()) {
                return Err(SimError::ConfigInvalid(format!(
                    "duplicate node name {:?}",
                    spec.name
                )));
            }
        }
        let known = |n: &String| names.contains(n);
        for (name, amount) in &self.charges {
            if !known(name) {
                return Err(SimError::ConfigInvalid(format!(
                    "charge for unknown node {name}"
                )));
            }
            if *amount == 0 {
                return Err(SimError::ConfigInvalid(
                    "charge amount must be positive".into(),
                ));
            }
        }
        for p in &self.purchases {
            if !known(&p.seller) || !known(&p.buyer) {
                return Err(SimError::ConfigInvalid(format!(
                    "purchase references unknown node ({} -> {})",
                    p.seller, p.buyer
                )));
            }
        }
        for name in self.crash_plan.keys() {
            if !known(name) {
                return Err(SimError::ConfigInvalid(format!(
                    "crash for unknown node {name}"
                )));
            }
        }
        Ok(())
    }
}

/// The checkers' verdict over a finished run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub atomic: bool,
    pub atomic_counterexample: Option<String>,
    pub conserved: bool,
    /// Final total minus initial total, in minor units.
    pub conservation_delta: i128,
    pub live: bool,
    pub purchases_total: u32,
    pub purchases_terminal: u32,
    pub committed_unacked: u32,
    pub stuck_prepared: u32,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "verdict atomic={} conserved={} delta={} live={} terminal={}/{} unacked={} stuck={}",
            yn(self.atomic),
            yn(self.conserved),
            self.conservation_delta,
            yn(self.live),
            self.purchases_terminal,
            self.purchases_total,
            self.committed_unacked,
            self.stuck_prepared
        )
    }

    pub fn clean(&self) -> bool {
        self.atomic && self.conserved && self.live
    }
}

fn yn(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub struct SimResult {
    pub trace: Trace,
    pub verdict: Verdict,
    /// Effects executed per node (current lifetime), for crash-boundary
    /// enumeration: a fault-free run's counts bound the meaningful
    /// crash-at-effect indices.
    pub effect_counts: BTreeMap<String, u64>,
}

// ── engine internals ──

#[derive(Debug)]
enum Ev {
    Frame {
        from: String,
        to: String,
        bytes: Vec<u8>,
    },
    Timer {
        node: String,
        kind: TimerKind,
        gen: u64,
    },
    Restart {
        node: String,
    },
    Purchase {
        idx: usize,
    },
}

struct Scheduled {
    time: u64,
    seq: u64,
    ev: Ev,
}

impl Ev {
    /// Same-instant ordering: script actions, then frame deliveries, then
    /// restarts, then timers. A timeout never beats traffic due at the same
    /// tick — timeouts model the absence of traffic.
    fn class_rank(&self) -> u8 {
        match self {
            Ev::Purchase { .. } => 0,
            Ev::Frame { .. } => 1,
            Ev::Restart { .. } => 2,
            Ev::Timer { .. } => 3,
        }
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        (other.time, other.ev.class_rank(), other.seq).cmp(&(
            self.time,
            self.ev.class_rank(),
            self.seq,
        ))
    }
}

type SimNodeInner = Node<MemStorage, MemStore>;

struct SimNode {
    id: NodeId,
    alive: Option<SimNodeInner>,
    durable: Option<(MemStorage, MemStore)>,
    timer_gen: BTreeMap<TimerKind, u64>,
    crash_plan: Vec<u64>,
    restarts: u32,
}

/// Crash plan hook. Each planned boundary fires once: the matched entry is
/// consumed by the engine after the crash, so a restarted node does not die
/// at the same effect index of its next lifetime.
struct PlanHook<'a> {
    plan: &'a [u64],
    fired: Option<u64>,
}

impl FaultHook for PlanHook<'_> {
    fn crash_after_effect(&mut self, effect_index: u64) -> bool {
        if self.plan.contains(&effect_index) {
            self.fired = Some(effect_index);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
struct PurchaseTracker {
    spec: PurchaseSpec,
    started: bool,
    txn: Option<TransactionId>,
    seller_outcome: Option<SaleOutcome>,
    buyer_outcome: Option<TxnOutcome>,
}

/// Everything the event loop mutates, bundled so helpers stay borrow-checker
/// friendly.
struct Engine<'a> {
    config: &'a SimConfig,
    protocol: ProtocolConfig,
    suite: Arc<dyn CryptoSuite + Send + Sync>,
    nodes: BTreeMap<String, SimNode>,
    id_to_name: BTreeMap<NodeId, String>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    net_rng: ChaCha20Rng,
    losses_injected: u64,
    trace: Trace,
    purchases: Vec<PurchaseTracker>,
    now: u64,
}

impl<'a> Engine<'a> {
    fn schedule(&mut self, time: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            ev,
        });
    }

    fn process_output(&mut self, from: &str, out: StepOutput) {
        let now = self.now;
        for event in &out.events {
            self.record_node_event(from, event);
        }
        for cmd in out.timers {
            let sim_node = self.nodes.get_mut(from).expect("known node");
            match cmd {
                TimerCmd::Start { kind, units } => {
                    let gen = sim_node.timer_gen.entry(kind).or_insert(0);
                    *gen += 1;
                    let gen = *gen;
                    let time = now + units as u64;
                    self.schedule(
                        time,
                        Ev::Timer {
                            node: from.to_string(),
                            kind,
                            gen,
                        },
                    );
                }
                TimerCmd::Cancel { kind } => {
                    *sim_node.timer_gen.entry(kind).or_insert(0) += 1;
                }
            }
        }
        for OutFrame { dest, bytes } in out.frames {
            let recipients: Vec<String> = match dest {
                Dest::Broadcast => self
                    .nodes
                    .keys()
                    .filter(|n| n.as_str() != from)
                    .cloned()
                    .collect(),
                Dest::Node(id) => self.id_to_name.get(&id).cloned().into_iter().collect(),
            };
            for to in recipients {
                let kind = frame_kind_name(&bytes);
                self.trace
                    .push(now, from, TraceKind::Send, format!("{kind} -> {to}"));
                let lose = self.net_rng.gen_bool(self.config.loss_prob)
                    && self
                        .config
                        .fairness_loss_cap
                        .map_or(true, |cap| self.losses_injected < cap);
                if lose {
                    self.losses_injected += 1;
                    self.trace
                        .push(now, from, TraceKind::Drop, format!("{kind} -> {to}"));
                    continue;
                }
                let delay = self
                    .net_rng
                    .gen_range(self.config.delay_min..=self.config.delay_max)
                    as u64;
                self.schedule(
                    now + delay,
                    Ev::Frame {
                        from: from.to_string(),
                        to: to.clone(),
                        bytes: bytes.clone(),
                    },
                );
                if self.net_rng.gen_bool(self.config.dup_prob) {
                    let delay2 = self
                        .net_rng
                        .gen_range(self.config.delay_min..=self.config.delay_max)
                        as u64;
                    self.trace
                        .push(now, from, TraceKind::Dup, format!("{kind} -> {to}"));
                    self.schedule(
                        now + delay2,
                        Ev::Frame {
                            from: from.to_string(),
                            to: to.clone(),
                            bytes: bytes.clone(),
                        },
                    );
                }
            }
        }
    }

    fn record_node_event(&mut self, node: &str, event: &NodeEvent) {
        let now = self.now;
        match event {
            NodeEvent::SellerTransition {
                txn,
                from,
                to,
                input,
            } => {
                self.trace.push(
                    now,
                    node,
                    TraceKind::State,
                    format!("seller {txn} {from} -> {to} on {input}"),
                );
            }
            NodeEvent::BuyerTransition {
                txn,
                from,
                to,
                input,
            } => {
                self.trace.push(
                    now,
                    node,
                    TraceKind::State,
                    format!("buyer {txn} {from} -> {to} on {input}"),
                );
            }
            NodeEvent::WalletApplied {
                txn,
                op,
                balance,
                reserved,
            } => {
                self.trace.push(
                    now,
                    node,
                    TraceKind::Wallet,
                    format!("{op} for {txn}: balance={balance} reserved={reserved}"),
                );
            }
            NodeEvent::SaleConcluded { txn, outcome } => {
                let txn_str = txn.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
                self.trace
                    .push(now, node, TraceKind::Sale, format!("{txn_str} {outcome:?}"));
                for tracker in self.purchases.iter_mut() {
                    if tracker.spec.seller == node
                        && tracker.started
                        && tracker.seller_outcome.is_none()
                    {
                        tracker.txn = *txn;
                        tracker.seller_outcome = Some(*outcome);
                        break;
                    }
                }
            }
            NodeEvent::PurchaseConcluded { txn, outcome } => {
                self.trace
                    .push(now, node, TraceKind::Purchase, format!("{txn} {outcome:?}"));
                for tracker in self.purchases.iter_mut() {
                    if tracker.spec.buyer == node && tracker.buyer_outcome.is_none() {
                        let matches_txn = tracker.txn.map_or(true, |t| t == *txn);
                        if matches_txn {
                            tracker.buyer_outcome = Some(*outcome);
                            break;
                        }
                    }
                }
            }
            NodeEvent::Dropped { reason } => {
                self.trace
                    .push(now, node, TraceKind::Note, format!("dropped: {reason}"));
            }
            NodeEvent::Note { text } => {
                self.trace.push(now, node, TraceKind::Note, text.clone());
            }
        }
    }

    fn crash_node(&mut self, name: &str) {
        let restart_delay = self.config.restart_delay;
        let sim_node = self.nodes.get_mut(name).expect("known node");
        let node = sim_node.alive.take().expect("was alive");
        sim_node.durable = Some(node.into_durable());
        sim_node.timer_gen.clear();
        self.trace
            .push(self.now, name, TraceKind::CrashNode, "fault injection".into());
        let time = self.now + restart_delay as u64;
        self.schedule(
            time,
            Ev::Restart {
                node: name.to_string(),
            },
        );
    }

    /// Runs a closure against a live node with its crash plan armed,
    /// processes the output, and performs crash bookkeeping.
    fn drive_node<F>(&mut self, name: &str, f: F)
    where
        F: FnOnce(&mut SimNodeInner, &mut dyn FaultHook) -> Result<StepOutput, crate::node::Crashed>,
    {
        let sim_node = self.nodes.get_mut(name).expect("known node");
        let plan = sim_node.crash_plan.clone();
        let mut hook = PlanHook {
            plan: &plan,
            fired: None,
        };
        let node = sim_node.alive.as_mut().expect("alive");
        let (out, crashed) = match f(node, &mut hook) {
            Ok(out) => (out, false),
            Err(c) => (c.partial, true),
        };
        if let Some(fired) = hook.fired {
            let sim_node = self.nodes.get_mut(name).expect("known node");
            if let Some(pos) = sim_node.crash_plan.iter().position(|&i| i == fired) {
                sim_node.crash_plan.remove(pos);
            }
        }
        self.process_output(name, out);
        if crashed {
            self.crash_node(name);
        }
    }

    fn restart_node(&mut self, name: &str, schedule_outputs: bool) {
        let protocol = self.protocol;
        let suite = self.suite.clone();
        let config_seed = self.config.seed;
        let mutation = self.config.skip_prepare_logging;
        let sim_node = self.nodes.get_mut(name).expect("known node");
        if sim_node.alive.is_some() {
            return;
        }
        let Some((log_storage, store)) = sim_node.durable.take() else {
            return;
        };
        sim_node.restarts += 1;
        let node_rng = ChaCha20Rng::seed_from_u64(
            config_seed ^ (0x2000 + sim_node.restarts as u64) ^ (sim_node.id.0[0] as u64) << 8,
        );
        self.trace
            .push(self.now, name, TraceKind::Restart, "recovering".into());
        match Node::recover(
            log_storage,
            store,
            protocol,
            suite,
            node_rng,
            SecretMode::Rng,
            &mut crate::node::NoFaults,
        ) {
            Ok((mut node, out)) => {
                node.mutation_skip_prepare_logging = mutation;
                self.nodes.get_mut(name).unwrap().alive = Some(node);
                if schedule_outputs {
                    self.process_output(name, out);
                } else {
                    for ev in out.events {
                        self.record_node_event(name, &ev);
                    }
                }
            }
            Err((e, _)) => {
                self.trace.push(
                    self.now,
                    name,
                    TraceKind::Note,
                    format!("recovery failed: {e}; node stays down"),
                );
            }
        }
    }

    /// Sums balances over all nodes plus credits in flight (participant
    /// debited, coordinator not yet credited). Only measurable when every
    /// node is alive.
    fn measure_total(&self) -> Option<u128> {
        let mut total: u128 = 0;
        for sim_node in self.nodes.values() {
            let node = sim_node.alive.as_ref()?;
            total += node.wallet.balance.minor_units() as u128;
            assert!(
                node.wallet.reserved <= node.wallet.balance,
                "invariant: reserved <= balance"
            );
        }
        for sim_node in self.nodes.values() {
            let node = sim_node.alive.as_ref()?;
            for (txn, entry) in &node.wallet.history {
                if entry.outcome != TxnOutcome::Committed {
                    continue;
                }
                if sim_node.id.0[..8] == txn.0[..8] {
                    continue; // this is the coordinator's credit record
                }
                let seller_name = self
                    .id_to_name
                    .iter()
                    .find(|(id, _)| id.0[..8] == txn.0[..8])
                    .map(|(_, name)| name.clone());
                if let Some(seller_name) = seller_name {
                    let seller = self.nodes[&seller_name].alive.as_ref()?;
                    if !seller.wallet.history.contains_key(txn) {
                        total += entry.amount.minor_units() as u128;
                    }
                }
            }
        }
        Some(total)
    }
}

/// Runs one scenario to quiescence or `max_time`, returning the trace and
/// the checkers' verdict.
pub fn run_scenario(config: &SimConfig, scenario: &Scenario) -> Result<SimResult, SimError> {
    config.validate()?;
    scenario.validate()?;
    let suite = config.make_suite()?;
    let protocol = config.protocol();

    let mut trace = Trace::default();
    trace.header.push(format!(
        "config: seed={} loss={} dup={} delay={}..{} timeout={} R={} Rc={} policy={} suite={} crashes={} mutation={}",
        config.seed,
        config.loss_prob,
        config.dup_prob,
        config.delay_min,
        config.delay_max,
        config.timeout_units,
        config.max_prepare_retries,
        config.max_commit_retries,
        if config.abort_immediately {
            "abort-immediately"
        } else {
            "retry-then-abort"
        },
        config.suite,
        config.random_crashes,
        config.skip_prepare_logging,
    ));

    // Provision every node from one office, run the charges, build nodes.
    let mut office_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x0ff1ce);
    let mut office = Office::create(suite.as_ref(), &mut office_rng);
    let mut nodes: BTreeMap<String, SimNode> = BTreeMap::new();
    let mut id_to_name: BTreeMap<NodeId, String> = BTreeMap::new();
    let mut initial_total: u128 = 0;

    for (idx, spec) in scenario.nodes.iter().enumerate() {
        let id = NodeId::from_name(&spec.name)
            .ok_or_else(|| SimError::ConfigInvalid(format!("bad name {:?}", spec.name)))?;
        let mut wallet = office
            .provision(suite.as_ref(), &mut office_rng, id)
            .map_err(|e| SimError::ConfigInvalid(format!("provision {}: {e}", spec.name)))?;
        wallet.mode = spec.mode;
        for (name, amount) in &scenario.charges {
            if name == &spec.name {
                let voucher = office
                    .issue_charge(suite.as_ref(), id, MoneyAmount::new(*amount))
                    .map_err(|e| SimError::ConfigInvalid(format!("charge {name}: {e}")))?;
                wallet
                    .redeem_charge(suite.as_ref(), &voucher)
                    .map_err(|e| SimError::ConfigInvalid(format!("redeem {name}: {e}")))?;
                initial_total += *amount as u128;
                trace.push(0, name, TraceKind::Script, format!("charge {amount}"));
            }
        }
        let node_rng = ChaCha20Rng::seed_from_u64(config.seed ^ (0x1000 + idx as u64));
        let mut node = Node::create(
            wallet,
            MemStorage::new(),
            MemStore::new(),
            protocol,
            suite.clone(),
            node_rng,
            SecretMode::Rng,
        )
        .map_err(|e| SimError::ConfigInvalid(format!("node {}: {e}", spec.name)))?;
        node.mutation_skip_prepare_logging = config.skip_prepare_logging;
        nodes.insert(
            spec.name.clone(),
            SimNode {
                id,
                alive: Some(node),
                durable: None,
                timer_gen: BTreeMap::new(),
                crash_plan: scenario
                    .crash_plan
                    .get(&spec.name)
                    .cloned()
                    .unwrap_or_default(),
                restarts: 0,
            },
        );
        id_to_name.insert(id, spec.name.clone());
    }

    let mut net_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x7e7);
    for _ in 0..config.random_crashes {
        let names: Vec<String> = nodes.keys().cloned().collect();
        let victim = names[net_rng.gen_range(0..names.len())].clone();
        let effect = net_rng.gen_range(1..=24u64);
        nodes.get_mut(&victim).unwrap().crash_plan.push(effect);
        trace.push(
            0,
            &victim,
            TraceKind::Note,
            format!("random crash planned at effect {effect}"),
        );
    }

    let purchases: Vec<PurchaseTracker> = scenario
        .purchases
        .iter()
        .map(|spec| PurchaseTracker {
            spec: spec.clone(),
            started: false,
            txn: None,
            seller_outcome: None,
            buyer_outcome: None,
        })
        .collect();

    let mut engine = Engine {
        config,
        protocol,
        suite,
        nodes,
        id_to_name,
        heap: BinaryHeap::new(),
        seq: 0,
        net_rng,
        losses_injected: 0,
        trace,
        purchases,
        now: 0,
    };
    for (idx, p) in scenario.purchases.iter().enumerate() {
        engine.schedule(p.at, Ev::Purchase { idx });
    }

    let mut conserved = true;
    let mut conservation_delta: i128 = 0;

    while let Some(Scheduled { time, ev, .. }) = engine.heap.pop() {
        if time > config.max_time {
            engine.trace.push(
                config.max_time,
                "-",
                TraceKind::Note,
                "max_time reached, remaining events discarded".into(),
            );
            break;
        }
        engine.now = time;
        match ev {
            Ev::Purchase { idx } => {
                let spec = engine.purchases[idx].spec.clone();
                let seller_alive = engine
                    .nodes
                    .get(&spec.seller)
                    .map(|n| n.alive.is_some())
                    .unwrap_or(false);
                if !seller_alive {
                    engine.trace.push(
                        time,
                        &spec.seller,
                        TraceKind::Note,
                        "purchase deferred: seller down".into(),
                    );
                    engine.schedule(
                        time + config.restart_delay as u64 + 1,
                        Ev::Purchase { idx },
                    );
                    continue;
                }
                engine.purchases[idx].started = true;
                engine.trace.push(
                    time,
                    &spec.seller,
                    TraceKind::Script,
                    format!(
                        "purchase {} from {} amount {}",
                        spec.buyer, spec.seller, spec.amount
                    ),
                );
                let buyer_id = NodeId::from_name(&spec.buyer).unwrap();
                let amount = MoneyAmount::new(spec.amount);
                let description = spec.description.clone().into_bytes();
                engine.drive_node(&spec.seller, |node, hook| {
                    node.start_sale(buyer_id, amount, &description, hook)
                });
            }
            Ev::Frame { from, to, bytes } => {
                let Some(sim_node) = engine.nodes.get(&to) else {
                    continue;
                };
                if sim_node.alive.is_none() {
                    engine.trace.push(
                        time,
                        &to,
                        TraceKind::DeliverToCrashed,
                        format!("{} from {from}", frame_kind_name(&bytes)),
                    );
                    continue;
                }
                engine.trace.push(
                    time,
                    &to,
                    TraceKind::Deliver,
                    format!("{} from {from}", frame_kind_name(&bytes)),
                );
                engine.drive_node(&to, |node, hook| node.handle_frame(&bytes, hook));
            }
            Ev::Timer {
                node: name,
                kind,
                gen,
            } => {
                let Some(sim_node) = engine.nodes.get(&name) else {
                    continue;
                };
                if sim_node.alive.is_none() {
                    continue; // timers die with the process
                }
                if sim_node.timer_gen.get(&kind).copied() != Some(gen) {
                    continue; // stale: re-armed or cancelled since
                }
                engine
                    .trace
                    .push(time, &name, TraceKind::Timer, format!("{kind:?}"));
                engine.drive_node(&name, |node, hook| node.handle_timer(kind, hook));
            }
            Ev::Restart { node: name } => {
                engine.restart_node(&name, true);
            }
        }

        // Conservation is checked whenever every node is alive: a crashed
        // node's balances are in flux until recovery settles them.
        if let Some(total) = engine.measure_total() {
            let delta = total as i128 - initial_total as i128;
            if delta != 0 && conserved {
                conserved = false;
                conservation_delta = delta;
                let now = engine.now;
                engine.trace.push(
                    now,
                    "-",
                    TraceKind::Note,
                    format!("conservation violated: delta {delta}"),
                );
            }
        }
    }

    // Restart any node still down so final accounting sees settled balances.
    let down: Vec<String> = engine
        .nodes
        .iter()
        .filter(|(_, n)| n.alive.is_none())
        .map(|(k, _)| k.clone())
        .collect();
    for name in down {
        engine.restart_node(&name, false);
    }

    // ── final accounting and verdict ──

    if let Some(final_total) = engine.measure_total() {
        let delta = final_total as i128 - initial_total as i128;
        if delta != 0 {
            conserved = false;
            conservation_delta = delta;
        }
    }

    let atomicity = check_atomicity(&engine.nodes, &engine.id_to_name);

    let mut committed_unacked = 0u32;
    let mut stuck_prepared = 0u32;
    for sim_node in engine.nodes.values() {
        if let Some(node) = &sim_node.alive {
            committed_unacked += node.unacked_txns().len() as u32;
            stuck_prepared += node
                .buyer_phases()
                .values()
                .filter(|p| matches!(p, crate::commit::BuyerPhase::Prepared { .. }))
                .count() as u32;
        }
    }

    let mut terminal = 0u32;
    for tracker in &engine.purchases {
        if purchase_terminal(tracker, &engine.nodes) {
            terminal += 1;
        }
    }
    let live = terminal == engine.purchases.len() as u32;

    for (name, sim_node) in &engine.nodes {
        if let Some(node) = &sim_node.alive {
            engine.trace.finals.push(FinalWallet {
                node: name.clone(),
                balance: node.wallet.balance,
                reserved: node.wallet.reserved,
            });
        }
    }

    let verdict = Verdict {
        atomic: atomicity.is_none(),
        atomic_counterexample: atomicity,
        conserved,
        conservation_delta,
        live,
        purchases_total: engine.purchases.len() as u32,
        purchases_terminal: terminal,
        committed_unacked,
        stuck_prepared,
    };
    let effect_counts = engine
        .nodes
        .iter()
        .filter_map(|(name, n)| n.alive.as_ref().map(|node| (name.clone(), node.effect_count())))
        .collect();
    Ok(SimResult {
        trace: engine.trace,
        verdict,
        effect_counts,
    })
}

fn frame_kind_name(bytes: &[u8]) -> &'static str {
    match crate::node::decode_frame(bytes) {
        Ok(p) => p.kind_name(),
        Err(_) => "MALFORMED",
    }
}

/// Outcome classification for one transaction from one node's durable log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOutcome {
    /// COMPLETE recorded: decision applied to the wallet.
    CommittedApplied,
    /// COMMIT recorded, COMPLETE pending.
    CommittedPending,
    Aborted,
    InDoubt,
    None,
}

/// Classifies a transaction from a log summary plus raw records (needed to
/// look through DONE-ERASE).
pub fn log_outcome(
    summary: &BTreeMap<TransactionId, TxnRecovery>,
    records: &[crate::stable_log::LogRecord],
    txn: &TransactionId,
) -> LogOutcome {
    let Some(class) = summary.get(txn) else {
        return LogOutcome::None;
    };
    match class {
        TxnRecovery::Completed => LogOutcome::CommittedApplied,
        TxnRecovery::Committed => LogOutcome::CommittedPending,
        TxnRecovery::Aborted | TxnRecovery::IncompletePrepare => LogOutcome::Aborted,
        TxnRecovery::InDoubtPrepared => LogOutcome::InDoubt,
        TxnRecovery::Erased => {
            let committed = records
                .iter()
                .any(|r| r.txn == *txn && matches!(r.body, RecordBody::Complete));
            if committed {
                LogOutcome::CommittedApplied
            } else {
                LogOutcome::Aborted
            }
        }
    }
}

/// Atomicity over every transaction with durable traces: no transaction may
/// be committed on one side while aborted on the other, and an applied
/// credit must have a committed participant somewhere. Returns a
/// counterexample description, or None when atomic.
fn check_atomicity(
    nodes: &BTreeMap<String, SimNode>,
    id_to_name: &BTreeMap<NodeId, String>,
) -> Option<String> {
    struct View {
        id: NodeId,
        summary: BTreeMap<TransactionId, TxnRecovery>,
        records: Vec<crate::stable_log::LogRecord>,
    }
    let views: BTreeMap<String, View> = nodes
        .iter()
        .filter_map(|(name, sim_node)| {
            sim_node.alive.as_ref().map(|node| {
                (
                    name.clone(),
                    View {
                        id: sim_node.id,
                        summary: node.log_summary(),
                        records: node.log_records().to_vec(),
                    },
                )
            })
        })
        .collect();

    let mut txns: std::collections::BTreeSet<TransactionId> = std::collections::BTreeSet::new();
    for view in views.values() {
        txns.extend(view.summary.keys().copied());
    }
    for txn in txns {
        let Some(seller_name) = id_to_name
            .iter()
            .find(|(id, _)| id.0[..8] == txn.0[..8])
            .map(|(_, name)| name.clone())
        else {
            continue;
        };
        let Some(seller) = views.get(&seller_name) else {
            continue;
        };
        debug_assert_eq!(seller.id.0[..8], txn.0[..8]);
        let seller_outcome = log_outcome(&seller.summary, &seller.records, &txn);
        for (name, view) in &views {
            if name == &seller_name {
                continue;
            }
            let buyer_outcome = log_outcome(&view.summary, &view.records, &txn);
            let bad = matches!(
                (seller_outcome, buyer_outcome),
                (LogOutcome::CommittedApplied, LogOutcome::Aborted)
                    | (LogOutcome::Aborted, LogOutcome::CommittedApplied)
                    | (LogOutcome::CommittedPending, LogOutcome::Aborted)
                    | (LogOutcome::Aborted, LogOutcome::CommittedPending)
            );
            if bad {
                return Some(format!(
                    "txn {txn}: seller {seller_name} {seller_outcome:?} vs {name} {buyer_outcome:?}"
                ));
            }
        }
        if seller_outcome == LogOutcome::CommittedApplied {
            let any_committed = views.iter().any(|(name, view)| {
                name != &seller_name
                    && matches!(
                        log_outcome(&view.summary, &view.records, &txn),
                        LogOutcome::CommittedApplied | LogOutcome::CommittedPending
                    )
            });
            if !any_committed {
                return Some(format!(
                    "txn {txn}: seller {seller_name} completed with no committed participant"
                ));
            }
        }
    }
    None
}

/// A purchase is terminal when it started and both involved nodes are
/// quiescent with no outstanding obligations: no live sale, no pending
/// reservation, nothing prepared-in-doubt, and no parked unacknowledged
/// commit. A seller that crashed before deciding and forgot the attempt
/// counts as terminal once the participant's side is settled too.
fn purchase_terminal(tracker: &PurchaseTracker, nodes: &BTreeMap<String, SimNode>) -> bool {
    if !tracker.started {
        return false;
    }
    if matches!(tracker.seller_outcome, Some(SaleOutcome::CommittedUnacked)) {
        return false;
    }
    let settled = |name: &String| {
        nodes
            .get(name)
            .and_then(|n| n.alive.as_ref())
            .is_some_and(|n| n.is_quiescent() && n.unacked_txns().is_empty())
    };
    settled(&tracker.spec.seller) && settled(&tracker.spec.buyer)
}

/// Convenience used across the test suites: a minimal two-node scenario
/// with one purchase.
pub fn two_node_scenario(balance: u64, amount: u64) -> Scenario {
    Scenario {
        nodes: vec![
            NodeSpec {
                name: "S1".into(),
                mode: Mode::Seller,
            },
            NodeSpec {
                name: "B1".into(),
                mode: Mode::Buyer,
            },
        ],
        charges: vec![("B1".into(), balance)],
        purchases: vec![PurchaseSpec {
            seller: "S1".into(),
            buyer: "B1".into(),
            amount,
            at: 1,
            description: "tools".into(),
        }],
        crash_plan: BTreeMap::new(),
    }
}

/// Seller phases that count as settled, for quiescence checks in tests.
pub fn seller_done(phase: &SellerPhase) -> bool {
    matches!(phase, SellerPhase::Done { .. })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_free_run_is_clean_and_transfers() {
        let config = SimConfig::default();
        let scenario = two_node_scenario(100, 40);
        let result = run_scenario(&config, &scenario).unwrap();
        assert!(result.verdict.clean(), "{:?}", result.verdict);
        let finals: BTreeMap<&str, u64> = result
            .trace
            .finals
            .iter()
            .map(|f| (f.node.as_str(), f.balance.minor_units()))
            .collect();
        assert_eq!(finals["S1"], 40);
        assert_eq!(finals["B1"], 60);
    }

    #[test]
    fn total_loss_aborts_and_leaves_wallets_unchanged() {
        let config = SimConfig {
            loss_prob: 1.0,
            max_time: 400,
            ..SimConfig::default()
        };
        let scenario = two_node_scenario(100, 40);
        let result = run_scenario(&config, &scenario).unwrap();
        assert!(result.verdict.atomic, "{:?}", result.verdict);
        assert!(result.verdict.conserved);
        let finals: BTreeMap<&str, (u64, u64)> = result
            .trace
            .finals
            .iter()
            .map(|f| {
                (
                    f.node.as_str(),
                    (f.balance.minor_units(), f.reserved.minor_units()),
                )
            })
            .collect();
        assert_eq!(finals["S1"], (0, 0));
        assert_eq!(finals["B1"], (100, 0));
    }

    #[test]
    fn insufficient_funds_purchase_rejects() {
        let config = SimConfig::default();
        let scenario = two_node_scenario(100, 140);
        let result = run_scenario(&config, &scenario).unwrap();
        assert!(result.verdict.clean(), "{:?}", result.verdict);
        let finals: BTreeMap<&str, u64> = result
            .trace
            .finals
            .iter()
            .map(|f| (f.node.as_str(), f.balance.minor_units()))
            .collect();
        assert_eq!(finals["S1"], 0);
        assert_eq!(finals["B1"], 100);
    }

    #[test]
    fn identical_configs_produce_identical_traces() {
        let config = SimConfig {
            seed: 99,
            loss_prob: 0.25,
            dup_prob: 0.1,
            delay_max: 3,
            max_time: 600,
            ..SimConfig::default()
        };
        let scenario = two_node_scenario(100, 40);
        let a = run_scenario(&config, &scenario).unwrap();
        let b = run_scenario(&config, &scenario).unwrap();
        assert_eq!(
            a.trace.to_text(&a.verdict.line()),
            b.trace.to_text(&b.verdict.line())
        );
    }

    #[test]
    fn crash_at_buyer_redo_recovers_and_completes() {
        // Buyer effect 2 is the REDO append on the happy path.
        let mut scenario = two_node_scenario(100, 40);
        scenario.crash_plan.insert("B1".into(), vec![2]);
        let config = SimConfig {
            max_time: 400,
            ..SimConfig::default()
        };
        let result = run_scenario(&config, &scenario).unwrap();
        assert!(result.verdict.clean(), "{:?}", result.verdict);
        let finals: BTreeMap<&str, u64> = result
            .trace
            .finals
            .iter()
            .map(|f| (f.node.as_str(), f.balance.minor_units()))
            .collect();
        assert_eq!(finals["S1"], 40);
        assert_eq!(finals["B1"], 60);
        let text = result.trace.to_text(&result.verdict.line());
        assert!(text.contains(" crash "), "{text}");
        assert!(text.contains(" restart "), "{text}");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let config = SimConfig {
            loss_prob: 1.5,
            ..SimConfig::default()
        };
        assert!(matches!(
            run_scenario(&config, &two_node_scenario(1, 1)),
            Err(SimError::ConfigInvalid(_))
        ));

        let config = SimConfig {
            suite: "quantum".into(),
            ..SimConfig::default()
        };
        assert!(run_scenario(&config, &two_node_scenario(1, 1)).is_err());

        let mut scenario = two_node_scenario(1, 1);
        scenario.nodes.pop();
        assert!(run_scenario(&SimConfig::default(), &scenario).is_err());
    }

    #[test]
    fn five_node_topology_only_buyers_respond() {
        let scenario = Scenario {
            nodes: vec![
                NodeSpec {
                    name: "S1".into(),
                    mode: Mode::Seller,
                },
                NodeSpec {
                    name: "S2".into(),
                    mode: Mode::Seller,
                },
                NodeSpec {
                    name: "B1".into(),
                    mode: Mode::Buyer,
                },
                NodeSpec {
                    name: "B2".into(),
                    mode: Mode::Buyer,
                },
                NodeSpec {
                    name: "I1".into(),
                    mode: Mode::Idle,
                },
            ],
            charges: vec![("B1".into(), 100), ("B2".into(), 100)],
            purchases: vec![PurchaseSpec {
                seller: "S1".into(),
                buyer: "B1".into(),
                amount: 40,
                at: 1,
                description: "tools".into(),
            }],
            crash_plan: BTreeMap::new(),
        };
        let result = run_scenario(&SimConfig::default(), &scenario).unwrap();
        assert!(result.verdict.clean(), "{:?}", result.verdict);
        let responders: std::collections::BTreeSet<&str> = result
            .trace
            .events
            .iter()
            .filter(|e| e.kind == TraceKind::Send && e.details.starts_with("LOOKUP-RESPONSE"))
            .map(|e| e.node.as_str())
            .collect();
        assert_eq!(
            responders,
            ["B1", "B2"].iter().copied().collect(),
            "exactly the buyer-mode nodes answer"
        );
    }
}
