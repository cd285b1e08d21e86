//! Node and transaction identifiers.

use std::fmt;

use rand::RngCore;

/// 16-byte opaque node identifier. Equality is byte equality.
///
/// The CLI accepts either 32 hex digits or a short ASCII name of at most
/// 16 bytes, which is zero-padded.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub [u8; 16]);

impl NodeId {
    pub fn from_name(name: &str) -> Option<NodeId> {
        if name.len() == 32 {
            if let Ok(bytes) = hex::decode(name) {
                return Some(NodeId(bytes.try_into().unwrap()));
            }
        }
        if name.is_empty() || name.len() > 16 || !name.is_ascii() {
            return None;
        }
        let mut id = [0u8; 16];
        id[..name.len()].copy_from_slice(name.as_bytes());
        Some(NodeId(id))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Short printable form: the ASCII name if the id looks like one,
    /// otherwise hex.
    pub fn display_name(&self) -> String {
        let end = self.0.iter().position(|&b| b == 0).unwrap_or(16);
        let head = &self.0[..end];
        if !head.is_empty()
            && head.iter().all(|b| b.is_ascii_graphic())
            && self.0[end..].iter().all(|&b| b == 0)
        {
            String::from_utf8(head.to_vec()).unwrap()
        } else {
            hex::encode(self.0)
        }
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.display_name())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.display_name())
    }
}

/// 16-byte transaction identifier: the first 8 bytes of the initiating
/// node's id followed by a random 8-byte nonce, so ids are globally unique
/// without any persistent counter.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransactionId(pub [u8; 16]);

impl TransactionId {
    pub fn generate(initiator: &NodeId, rng: &mut dyn RngCore) -> TransactionId {
        let mut id = [0u8; 16];
        id[..8].copy_from_slice(&initiator.0[..8]);
        rng.fill_bytes(&mut id[8..]);
        TransactionId(id)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> TransactionId {
        TransactionId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Short printable form: initiator prefix plus nonce hex.
    pub fn short(&self) -> String {
        hex::encode(&self.0[8..])
    }
}

impl fmt::Debug for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Txn({})", self.short())
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.short())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn node_id_from_short_name_roundtrips() {
        let id = NodeId::from_name("N1").unwrap();
        assert_eq!(id.display_name(), "N1");
        assert_eq!(&id.0[..2], b"N1");
        assert!(id.0[2..].iter().all(|&b| b == 0));
    }

    #[test]
    fn node_id_from_hex() {
        let hex = "000102030405060708090a0b0c0d0e0f";
        let id = NodeId::from_name(hex).unwrap();
        assert_eq!(id.0[0], 0);
        assert_eq!(id.0[15], 0x0f);
        assert_eq!(id.display_name(), hex);
    }

    #[test]
    fn node_id_rejects_oversized_names() {
        assert!(NodeId::from_name("this-name-is-way-too-long").is_none());
        assert!(NodeId::from_name("").is_none());
    }

    #[test]
    fn txn_ids_carry_initiator_prefix_and_are_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let node = NodeId::from_name("seller").unwrap();
        let a = TransactionId::generate(&node, &mut rng);
        let b = TransactionId::generate(&node, &mut rng);
        assert_eq!(&a.0[..8], &node.0[..8]);
        assert_ne!(a, b);
    }
}
