//! Protocol kernel for a peer-to-peer offline payment system.
//!
//! Two phones settle a purchase directly over a lossy link, with no bank in
//! the path: a charging office provisions identities and converts real money
//! into wallet balance, discovery finds the buyer standing in front of the
//! seller, and a two-party atomic commit moves the money with durable
//! undo/redo logging on both sides so that crashes, losses, duplicates and
//! reordering can never split the outcome.
//!
//! The crate is organized so that everything protocol-shaped is pure and
//! host-independent:
//!
//! - [`money`], [`ids`]: checked amounts and identifiers.
//! - [`wallet`]: balances, reservations, the charging office, vouchers.
//! - [`stable_log`]: append-only durable log with torn-write detection.
//! - [`envelope`]: hybrid sign-then-encrypt message protection.
//! - [`discovery`]: one-hop lookup, quoting, reservation.
//! - [`commit`]: the coordinator/participant state machines, as pure
//!   functions emitting effect lists.
//! - [`node`]: one node assembled from the parts above, driven by frames
//!   and timers; shared verbatim by the simulator and the CLI runtime.
//! - [`sim`]: deterministic discrete-event simulator, fault injection,
//!   exhaustive schedule exploration, and the correctness checkers.

pub mod commit;
pub mod discovery;
pub mod envelope;
pub mod ids;
pub mod money;
pub mod node;
pub mod sim;
pub mod stable_log;
pub mod wallet;
pub mod wire;

pub use commit::{ProtocolConfig, TimeoutPolicy};
pub use ids::{NodeId, TransactionId};
pub use money::MoneyAmount;
