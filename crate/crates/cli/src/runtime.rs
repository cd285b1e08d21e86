//! The datagram event loop: one node driven by a real UDP socket and a
//! timer heap.
//!
//! The transport is deliberately unreliable even on loopback — no
//! app-level acks, no retries here. Retransmission is the protocol's job;
//! this loop only moves frames, fires timers, and applies the node's
//! outputs. Peer addresses are learned from incoming traffic (each frame
//! names its sender), with optional preconfigured peers and limited
//! broadcast for lookups.
//!
//! Crash testing hook: `P2PWALLET_CRASH_AFTER_EFFECT=<n>` makes the process
//! flush whatever left the node before its n-th effect boundary and abort,
//! which is how the scripted kill-and-restart integration test hits exact
//! boundaries.

use std::collections::{BinaryHeap, HashMap};
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use p2pwallet_core::node::{
    decode_frame, Dest, FaultHook, FramePayload, Node, NodeEvent, OutFrame, StepOutput, TimerCmd,
    TimerKind,
};
use p2pwallet_core::stable_log::FileStorage;
use p2pwallet_core::NodeId;

use crate::datadir::FileStore;

pub type CliNode = Node<FileStorage, FileStore>;

/// Crash-after-effect failpoint from the environment, for scripted crash
/// tests. Inactive unless the variable is set.
pub struct EnvFailpoint {
    crash_after: Option<u64>,
}

impl EnvFailpoint {
    pub fn from_env() -> Self {
        let crash_after = std::env::var("P2PWALLET_CRASH_AFTER_EFFECT")
            .ok()
            .and_then(|v| v.parse().ok());
        EnvFailpoint { crash_after }
    }
}

impl FaultHook for EnvFailpoint {
    fn crash_after_effect(&mut self, effect_index: u64) -> bool {
        self.crash_after == Some(effect_index)
    }
}

struct ArmedTimer {
    deadline: Instant,
    generation: u64,
    kind: TimerKind,
}

impl PartialEq for ArmedTimer {
    fn eq(&self, other: &Self) -> bool {
        self.deadline == other.deadline && self.generation == other.generation
    }
}
impl Eq for ArmedTimer {}
impl PartialOrd for ArmedTimer {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ArmedTimer {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.deadline.cmp(&self.deadline) // min-heap
    }
}

pub struct Runtime {
    pub node: CliNode,
    socket: UdpSocket,
    peers: Vec<SocketAddr>,
    broadcast: Option<SocketAddr>,
    addr_book: HashMap<NodeId, SocketAddr>,
    timers: BinaryHeap<ArmedTimer>,
    generations: HashMap<TimerKind, u64>,
    /// Real duration of one protocol time unit.
    unit: Duration,
    failpoint: EnvFailpoint,
    pub verbose: bool,
}

impl Runtime {
    pub fn new(
        node: CliNode,
        port: u16,
        peers: Vec<SocketAddr>,
        broadcast_port: Option<u16>,
        timeout_ms: u64,
    ) -> Result<Runtime> {
        let socket = UdpSocket::bind(("0.0.0.0", port))
            .with_context(|| format!("bind UDP port {port}"))?;
        // Timer wheel granularity: 10 ms.
        socket
            .set_read_timeout(Some(Duration::from_millis(10)))
            .context("socket read timeout")?;
        let broadcast = match broadcast_port {
            Some(p) => {
                socket.set_broadcast(true).context("enable broadcast")?;
                Some(SocketAddr::from(([255, 255, 255, 255], p)))
            }
            None => None,
        };
        let units = node.config().timeout_units.max(1) as u64;
        Ok(Runtime {
            node,
            socket,
            peers,
            broadcast,
            addr_book: HashMap::new(),
            timers: BinaryHeap::new(),
            generations: HashMap::new(),
            unit: Duration::from_millis((timeout_ms / units).max(10)),
            failpoint: EnvFailpoint::from_env(),
            verbose: false,
        })
    }

    pub fn local_port(&self) -> u16 {
        self.socket.local_addr().map(|a| a.port()).unwrap_or(0)
    }

    fn send_frame(&mut self, frame: &OutFrame) {
        let mut targets: Vec<SocketAddr> = Vec::new();
        match frame.dest {
            Dest::Broadcast => {
                targets.extend(self.peers.iter().copied());
                if let Some(b) = self.broadcast {
                    targets.push(b);
                }
            }
            Dest::Node(id) => {
                if let Some(addr) = self.addr_book.get(&id) {
                    targets.push(*addr);
                } else {
                    // Fall back to configured peers: the id may simply not
                    // have spoken yet.
                    targets.extend(self.peers.iter().copied());
                }
            }
        }
        for addr in targets {
            // Unreliable by design: send errors are dropped like lost
            // datagrams.
            let _ = self.socket.send_to(&frame.bytes, addr);
        }
    }

    fn apply_output(&mut self, out: StepOutput) -> Vec<NodeEvent> {
        for frame in &out.frames {
            self.send_frame(frame);
        }
        let now = Instant::now();
        for cmd in out.timers {
            match cmd {
                TimerCmd::Start { kind, units } => {
                    let generation = self.generations.entry(kind).or_insert(0);
                    *generation += 1;
                    self.timers.push(ArmedTimer {
                        deadline: now + self.unit * units.max(1),
                        generation: *generation,
                        kind,
                    });
                }
                TimerCmd::Cancel { kind } => {
                    *self.generations.entry(kind).or_insert(0) += 1;
                }
            }
        }
        for event in &out.events {
            if self.verbose {
                eprintln!("event: {event:?}");
            }
        }
        out.events
    }

    /// On a failpoint crash: whatever the node emitted before the boundary
    /// still leaves the process, then the process dies like a kill -9.
    fn crash_now(&mut self, partial: StepOutput) -> ! {
        for frame in &partial.frames {
            self.send_frame(frame);
        }
        eprintln!("failpoint: crashing after effect boundary");
        std::process::abort();
    }

    /// Learns the sender's address, hands the frame to the node, applies
    /// outputs, and returns the node events.
    fn handle_datagram(&mut self, bytes: &[u8], src: SocketAddr) -> Vec<NodeEvent> {
        if let Ok(payload) = decode_frame(bytes) {
            let sender = match &payload {
                FramePayload::Lookup(p) => Some(p.seller),
                FramePayload::LookupResponse(r) => Some(r.buyer),
                FramePayload::Enveloped { sender, .. } => Some(*sender),
            };
            if let Some(id) = sender {
                self.addr_book.insert(id, src);
            }
        }
        match self.node.handle_frame(bytes, &mut self.failpoint) {
            Ok(out) => self.apply_output(out),
            Err(crashed) => self.crash_now(crashed.partial),
        }
    }

    /// One scheduler turn: receive up to one datagram, fire due timers.
    /// Returns all node events produced this turn.
    pub fn turn(&mut self) -> Vec<NodeEvent> {
        let mut events = Vec::new();
        let mut buf = [0u8; 65_535];
        match self.socket.recv_from(&mut buf) {
            Ok((n, src)) => {
                events.extend(self.handle_datagram(&buf[..n], src));
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(_) => {}
        }
        let now = Instant::now();
        while let Some(timer) = self.timers.peek() {
            if timer.deadline > now {
                break;
            }
            let timer = self.timers.pop().unwrap();
            if self.generations.get(&timer.kind).copied() != Some(timer.generation) {
                continue; // stale
            }
            match self.node.handle_timer(timer.kind, &mut self.failpoint) {
                Ok(out) => events.extend(self.apply_output(out)),
                Err(crashed) => self.crash_now(crashed.partial),
            }
        }
        events
    }

    /// Kicks off outputs produced outside the loop (recovery, start_sale).
    pub fn inject(&mut self, out: StepOutput) -> Vec<NodeEvent> {
        self.apply_output(out)
    }
}
