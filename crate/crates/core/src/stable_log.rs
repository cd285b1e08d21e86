//! Append-only durable log with torn-write detection.
//!
//! Every node keeps one of these on stable storage. The commit engine writes
//! UNDO/REDO records before voting, COMMIT/ABORT records when the coordinator
//! decides, COMPLETE when a transaction's money movement has been applied,
//! and DONE-ERASE when all trace of a transaction may be forgotten.
//!
//! File format (bit-exact):
//!
//! ```text
//! header:  "PLOG" magic (4 bytes) | version u16 LE
//! record:  0xA5 marker | u32 LE payload length | payload | u32 LE CRC-32
//! payload: kind tag u8 (0x01..0x06) | 16-byte transaction id | kind payload
//! ```
//!
//! The CRC-32 (IEEE polynomial) covers marker through payload. A record that
//! fails its CRC — the torn tail of an interrupted append — is treated as
//! absent, and nothing after it is read. Erasure is a logical DONE-ERASE
//! marker; records are never rewritten in place.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write as IoWrite};
use std::path::Path;

use thiserror::Error;

use crate::ids::{NodeId, TransactionId};
use crate::money::MoneyAmount;
use crate::wire::{Reader, Writer};

pub const LOG_MAGIC: [u8; 4] = *b"PLOG";
pub const LOG_VERSION: u16 = 1;
pub const RECORD_MARKER: u8 = 0xA5;

/// Storage failed; the spec treats the node as crashed when this happens.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stable storage failure: {0}")]
pub struct StorageFailure(pub String);

impl From<std::io::Error> for StorageFailure {
    fn from(e: std::io::Error) -> Self {
        StorageFailure(e.to_string())
    }
}

/// A wallet's (balance, reserved) pair as snapshotted into UNDO/REDO records.
///
/// Balances are the only transaction-mutable wallet state, so this is the
/// whole before/after image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceSnapshot {
    pub balance: MoneyAmount,
    pub reserved: MoneyAmount,
}

/// Kind-specific content of a log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordBody {
    /// Pre-transaction balances; restoring these rolls the transaction back.
    Undo(BalanceSnapshot),
    /// Post-commit balances; restoring these rolls the transaction forward.
    Redo(BalanceSnapshot),
    /// Coordinator's commit decision. Carries the participant and amount so a
    /// restarted coordinator can resume retransmitting COMMIT and apply the
    /// credit at acknowledgement time.
    Commit { peer: NodeId, amount: MoneyAmount },
    /// Money movement applied; transaction finished locally.
    Complete,
    /// Abort decision. The coordinator's copy carries the participant so a
    /// restart can resume retransmitting ABORT; the participant's copy is
    /// bare.
    Abort { peer: Option<NodeId> },
    /// Logical erasure of everything recorded for this transaction.
    DoneErase,
}

impl RecordBody {
    pub fn kind_tag(&self) -> u8 {
        match self {
            RecordBody::Undo(_) => 0x01,
            RecordBody::Redo(_) => 0x02,
            RecordBody::Commit { .. } => 0x03,
            RecordBody::Complete => 0x04,
            RecordBody::Abort { .. } => 0x05,
            RecordBody::DoneErase => 0x06,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            RecordBody::Undo(_) => "UNDO",
            RecordBody::Redo(_) => "REDO",
            RecordBody::Commit { .. } => "COMMIT",
            RecordBody::Complete => "COMPLETE",
            RecordBody::Abort { .. } => "ABORT",
            RecordBody::DoneErase => "DONE-ERASE",
        }
    }
}

/// One durable log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub txn: TransactionId,
    pub body: RecordBody,
}

impl LogRecord {
    pub fn new(txn: TransactionId, body: RecordBody) -> Self {
        LogRecord { txn, body }
    }
}

// CRC-32, IEEE polynomial (reflected 0xEDB88320).
const CRC32_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0u32;
    while i < 256 {
        let mut crc = i;
        let mut j = 0;
        while j < 8 {
            if crc & 1 != 0 {
                crc = (crc >> 1) ^ 0xEDB8_8320;
            } else {
                crc >>= 1;
            }
            j += 1;
        }
        table[i as usize] = crc;
        i += 1;
    }
    table
};

pub fn crc32(data: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &byte in data {
        let idx = ((crc ^ byte as u32) & 0xFF) as usize;
        crc = (crc >> 8) ^ CRC32_TABLE[idx];
    }
    crc ^ 0xFFFF_FFFF
}

fn encode_payload(record: &LogRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(record.body.kind_tag());
    w.put_raw(record.txn.as_bytes());
    match &record.body {
        RecordBody::Undo(s) | RecordBody::Redo(s) => {
            w.put_u64(s.balance.minor_units());
            w.put_u64(s.reserved.minor_units());
        }
        RecordBody::Commit { peer, amount } => {
            w.put_raw(peer.as_bytes());
            w.put_u64(amount.minor_units());
        }
        RecordBody::Complete | RecordBody::DoneErase => {}
        RecordBody::Abort { peer } => {
            if let Some(peer) = peer {
                w.put_raw(peer.as_bytes());
            }
        }
    }
    w.into_bytes()
}

/// Serializes one record to its on-disk form: marker, length, payload, CRC.
pub fn encode_record(record: &LogRecord) -> Vec<u8> {
    let payload = encode_payload(record);
    let mut w = Writer::new();
    w.put_u8(RECORD_MARKER);
    w.put_u32(payload.len() as u32);
    w.put_raw(&payload);
    let mut bytes = w.into_bytes();
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

fn decode_payload(payload: &[u8]) -> Option<LogRecord> {
    let mut r = Reader::new(payload);
    let tag = r.get_u8().ok()?;
    let txn = TransactionId::from_bytes(r.get_array::<16>().ok()?);
    let body = match tag {
        0x01 | 0x02 => {
            let snapshot = BalanceSnapshot {
                balance: MoneyAmount::new(r.get_u64().ok()?),
                reserved: MoneyAmount::new(r.get_u64().ok()?),
            };
            if tag == 0x01 {
                RecordBody::Undo(snapshot)
            } else {
                RecordBody::Redo(snapshot)
            }
        }
        0x03 => RecordBody::Commit {
            peer: NodeId(r.get_array::<16>().ok()?),
            amount: MoneyAmount::new(r.get_u64().ok()?),
        },
        0x04 => RecordBody::Complete,
        0x05 => {
            if r.is_empty() {
                RecordBody::Abort { peer: None }
            } else {
                RecordBody::Abort {
                    peer: Some(NodeId(r.get_array::<16>().ok()?)),
                }
            }
        }
        0x06 => RecordBody::DoneErase,
        _ => return None,
    };
    r.finish().ok()?;
    Some(LogRecord { txn, body })
}

/// Outcome of scanning raw log bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanReport {
    pub records: Vec<LogRecord>,
    /// Bytes of valid content (header + whole valid records).
    pub valid_len: usize,
    /// True when trailing bytes after the valid prefix failed validation —
    /// the signature of a torn append.
    pub torn_tail: bool,
}

/// Decodes every valid record from raw log bytes, stopping at the first
/// invalid one. Deterministic and total: corruption never panics.
pub fn scan_bytes(bytes: &[u8]) -> Result<ScanReport, StorageFailure> {
    let mut r = Reader::new(bytes);
    if bytes.is_empty() {
        return Ok(ScanReport {
            records: Vec::new(),
            valid_len: 0,
            torn_tail: false,
        });
    }
    if r.expect_magic(&LOG_MAGIC).is_err() {
        return Err(StorageFailure("log header magic mismatch".into()));
    }
    let version = r
        .get_u16()
        .map_err(|_| StorageFailure("log header truncated".into()))?;
    if version != LOG_VERSION {
        return Err(StorageFailure(format!("unsupported log version {version}")));
    }

    let mut records = Vec::new();
    let mut valid_len = 6usize;
    loop {
        if r.is_empty() {
            return Ok(ScanReport {
                records,
                valid_len,
                torn_tail: false,
            });
        }
        let start = bytes.len() - r.remaining();
        let ok = (|| {
            let marker = r.get_u8().ok()?;
            if marker != RECORD_MARKER {
                return None;
            }
            let len = r.get_u32().ok()? as usize;
            let payload = r.get_raw(len).ok()?;
            let stored_crc = r.get_u32().ok()?;
            let end_of_payload = start + 1 + 4 + len;
            if crc32(&bytes[start..end_of_payload]) != stored_crc {
                return None;
            }
            decode_payload(payload)
        })();
        match ok {
            Some(record) => {
                valid_len = start + record_len_on_disk(&record);
                records.push(record);
            }
            None => {
                return Ok(ScanReport {
                    records,
                    valid_len,
                    torn_tail: true,
                });
            }
        }
    }
}

fn record_len_on_disk(record: &LogRecord) -> usize {
    encode_record(record).len()
}

/// Per-transaction classification computed from a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnRecovery {
    /// UNDO and REDO present with no outcome: prepared, outcome unknown.
    InDoubtPrepared,
    /// COMMIT decided but COMPLETE not yet recorded: finalization pending.
    Committed,
    /// ABORT recorded.
    Aborted,
    /// COMPLETE recorded: money movement applied.
    Completed,
    /// DONE-ERASE recorded: transaction fully finished and forgotten.
    Erased,
    /// UNDO without REDO: an append was interrupted before the prepare
    /// finished, so the transaction never reached the prepared state.
    IncompletePrepare,
}

/// Classifies every transaction named in the given records.
///
/// Pure function of scan output: later outcome records take precedence over
/// earlier phases.
pub fn recover_summary(records: &[LogRecord]) -> BTreeMap<TransactionId, TxnRecovery> {
    #[derive(Default)]
    struct Seen {
        undo: bool,
        redo: bool,
        commit: bool,
        complete: bool,
        abort: bool,
        erase: bool,
    }
    let mut per_txn: BTreeMap<TransactionId, Seen> = BTreeMap::new();
    for record in records {
        let seen = per_txn.entry(record.txn).or_default();
        match record.body {
            RecordBody::Undo(_) => seen.undo = true,
            RecordBody::Redo(_) => seen.redo = true,
            RecordBody::Commit { .. } => seen.commit = true,
            RecordBody::Complete => seen.complete = true,
            RecordBody::Abort { .. } => seen.abort = true,
            RecordBody::DoneErase => seen.erase = true,
        }
    }
    per_txn
        .into_iter()
        .map(|(txn, seen)| {
            let class = if seen.erase {
                TxnRecovery::Erased
            } else if seen.complete {
                TxnRecovery::Completed
            } else if seen.abort {
                TxnRecovery::Aborted
            } else if seen.commit {
                TxnRecovery::Committed
            } else if seen.undo && seen.redo {
                TxnRecovery::InDoubtPrepared
            } else {
                TxnRecovery::IncompletePrepare
            };
            (txn, class)
        })
        .collect()
}

/// Backing store for a stable log. Append must be durable before returning.
pub trait LogStorage {
    fn append(&mut self, bytes: &[u8]) -> Result<(), StorageFailure>;
    fn read_all(&self) -> Result<Vec<u8>, StorageFailure>;
}

/// In-memory storage for tests and the simulator. The simulator extracts the
/// bytes on a simulated crash and hands them to the restarted node.
#[derive(Debug, Clone, Default)]
pub struct MemStorage {
    bytes: Vec<u8>,
    pub fail_next_append: bool,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        MemStorage {
            bytes,
            fail_next_append: false,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl LogStorage for MemStorage {
    fn append(&mut self, bytes: &[u8]) -> Result<(), StorageFailure> {
        if self.fail_next_append {
            self.fail_next_append = false;
            return Err(StorageFailure("injected append failure".into()));
        }
        self.bytes.extend_from_slice(bytes);
        Ok(())
    }

    fn read_all(&self) -> Result<Vec<u8>, StorageFailure> {
        Ok(self.bytes.clone())
    }
}

/// File-backed storage. Every append is fsynced before returning.
#[derive(Debug)]
pub struct FileStorage {
    file: File,
    path: std::path::PathBuf,
}

impl FileStorage {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageFailure> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)?;
        Ok(FileStorage { file, path })
    }
}

impl LogStorage for FileStorage {
    fn append(&mut self, bytes: &[u8]) -> Result<(), StorageFailure> {
        self.file.write_all(bytes)?;
        self.file.sync_data()?;
        Ok(())
    }

    fn read_all(&self) -> Result<Vec<u8>, StorageFailure> {
        let mut f = File::open(&self.path)?;
        let mut out = Vec::new();
        f.read_to_end(&mut out)?;
        Ok(out)
    }
}

/// The durable log a node appends protocol records to.
///
/// Keeps an in-memory mirror of the valid records so hot-path reads do not
/// re-scan storage; the mirror is rebuilt from bytes on open and is checked
/// against a fresh scan in tests.
#[derive(Debug, Clone)]
pub struct StableLog<S: LogStorage> {
    storage: S,
    mirror: Vec<LogRecord>,
}

impl<S: LogStorage> StableLog<S> {
    /// Opens a log over existing storage, writing the file header if the
    /// storage is empty. A torn tail from a previous crash is tolerated:
    /// the valid prefix is kept and appends continue after it.
    ///
    /// A torn tail is not truncated; subsequent appends go after it, and the
    /// scan stops at the torn record. That matches append-only storage where
    /// rewriting is forbidden: the log is re-created per node lifetime in the
    /// simulator, while the CLI truncates to the valid prefix on open.
    pub fn open(mut storage: S) -> Result<Self, StorageFailure> {
        let bytes = storage.read_all()?;
        if bytes.is_empty() {
            let mut w = Writer::new();
            w.put_raw(&LOG_MAGIC);
            w.put_u16(LOG_VERSION);
            storage.append(&w.into_bytes())?;
            return Ok(StableLog {
                storage,
                mirror: Vec::new(),
            });
        }
        let report = scan_bytes(&bytes)?;
        Ok(StableLog {
            storage,
            mirror: report.records,
        })
    }

    /// Appends one record; durable when this returns.
    pub fn append(&mut self, record: LogRecord) -> Result<(), StorageFailure> {
        let bytes = encode_record(&record);
        self.storage.append(&bytes)?;
        self.mirror.push(record);
        Ok(())
    }

    /// Re-reads storage and returns all CRC-valid records up to the first
    /// invalid one.
    pub fn scan(&self) -> Result<Vec<LogRecord>, StorageFailure> {
        Ok(self.scan_report()?.records)
    }

    /// Like [`scan`](Self::scan) but with torn-tail detail, for inspection
    /// tooling.
    pub fn scan_report(&self) -> Result<ScanReport, StorageFailure> {
        scan_bytes(&self.storage.read_all()?)
    }

    /// The in-memory mirror of valid records (no storage round-trip).
    pub fn records(&self) -> &[LogRecord] {
        &self.mirror
    }

    /// Records belonging to one transaction.
    pub fn records_for(&self, txn: &TransactionId) -> Vec<&LogRecord> {
        self.mirror.iter().filter(|r| &r.txn == txn).collect()
    }

    /// Per-transaction recovery classification of the current contents.
    pub fn summary(&self) -> BTreeMap<TransactionId, TxnRecovery> {
        recover_summary(&self.mirror)
    }

    pub fn storage(&self) -> &S {
        &self.storage
    }

    pub fn into_storage(self) -> S {
        self.storage
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn txn(n: u8) -> TransactionId {
        let mut rng = ChaCha12Rng::seed_from_u64(n as u64);
        TransactionId::generate(&NodeId::from_name("T").unwrap(), &mut rng)
    }

    fn snap(balance: u64, reserved: u64) -> BalanceSnapshot {
        BalanceSnapshot {
            balance: MoneyAmount::new(balance),
            reserved: MoneyAmount::new(reserved),
        }
    }

    #[test]
    fn crc32_known_vector() {
        // Standard check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn append_then_scan_returns_records_in_order() {
        let mut log = StableLog::open(MemStorage::new()).unwrap();
        let records = vec![
            LogRecord::new(txn(1), RecordBody::Undo(snap(100, 0))),
            LogRecord::new(txn(1), RecordBody::Redo(snap(60, 0))),
            LogRecord::new(txn(1), RecordBody::Complete),
        ];
        for r in &records {
            log.append(r.clone()).unwrap();
        }
        assert_eq!(log.scan().unwrap(), records);
        assert_eq!(log.records(), &records[..]);
        // scan is idempotent
        assert_eq!(log.scan().unwrap(), log.scan().unwrap());
    }

    #[test]
    fn scan_of_empty_log_is_empty() {
        let log = StableLog::open(MemStorage::new()).unwrap();
        assert!(log.scan().unwrap().is_empty());
    }

    #[test]
    fn truncation_sweep_drops_only_the_torn_record() {
        let mut log = StableLog::open(MemStorage::new()).unwrap();
        log.append(LogRecord::new(txn(1), RecordBody::Undo(snap(100, 0))))
            .unwrap();
        log.append(LogRecord::new(txn(1), RecordBody::Redo(snap(60, 0))))
            .unwrap();
        let full = log.storage().bytes().to_vec();
        let report = scan_bytes(&full).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(!report.torn_tail);
        let second_start = report.valid_len - encode_record(&report.records[1]).len();

        // Truncate at every prefix length inside the second record: the first
        // record must survive, the second must vanish, nothing may panic.
        for cut in second_start..full.len() {
            let report = scan_bytes(&full[..cut]).unwrap();
            if cut == second_start {
                assert!(!report.torn_tail, "clean cut at record boundary");
            } else {
                assert!(report.torn_tail, "cut at {cut} must be flagged torn");
            }
            assert_eq!(report.records.len(), 1, "cut at {cut}");
            assert_eq!(report.records[0].body, RecordBody::Undo(snap(100, 0)));
        }
    }

    #[test]
    fn single_bit_corruption_is_always_detected() {
        let mut log = StableLog::open(MemStorage::new()).unwrap();
        log.append(LogRecord::new(txn(3), RecordBody::Commit {
            peer: NodeId::from_name("buyer").unwrap(),
            amount: MoneyAmount::new(40),
        }))
        .unwrap();
        let clean = log.storage().bytes().to_vec();
        let baseline = scan_bytes(&clean).unwrap().records;
        assert_eq!(baseline.len(), 1);

        let header = 6;
        for byte in header..clean.len() {
            for bit in 0..8 {
                let mut corrupt = clean.clone();
                corrupt[byte] ^= 1 << bit;
                let report = scan_bytes(&corrupt).unwrap();
                assert!(
                    report.records.is_empty(),
                    "flip at byte {byte} bit {bit} went undetected"
                );
            }
        }
    }

    #[test]
    fn recover_summary_classification_table() {
        let t = txn(7);
        let undo = LogRecord::new(t, RecordBody::Undo(snap(100, 0)));
        let redo = LogRecord::new(t, RecordBody::Redo(snap(60, 0)));
        let commit = LogRecord::new(t, RecordBody::Commit {
            peer: NodeId::from_name("B").unwrap(),
            amount: MoneyAmount::new(40),
        });
        let complete = LogRecord::new(t, RecordBody::Complete);
        let abort = LogRecord::new(t, RecordBody::Abort { peer: None });
        let erase = LogRecord::new(t, RecordBody::DoneErase);

        let class = |records: &[&LogRecord]| {
            let owned: Vec<LogRecord> = records.iter().map(|r| (*r).clone()).collect();
            recover_summary(&owned).get(&t).copied()
        };

        assert_eq!(class(&[]), None);
        assert_eq!(class(&[&undo, &redo]), Some(TxnRecovery::InDoubtPrepared));
        assert_eq!(class(&[&undo]), Some(TxnRecovery::IncompletePrepare));
        assert_eq!(class(&[&commit]), Some(TxnRecovery::Committed));
        assert_eq!(
            class(&[&undo, &redo, &commit, &complete]),
            Some(TxnRecovery::Completed)
        );
        assert_eq!(class(&[&undo, &redo, &abort]), Some(TxnRecovery::Aborted));
        assert_eq!(
            class(&[&undo, &redo, &complete, &erase]),
            Some(TxnRecovery::Erased)
        );
    }

    #[test]
    fn storage_failure_propagates_from_append() {
        let mut log = StableLog::open(MemStorage::new()).unwrap();
        log.storage_mut_for_test().fail_next_append = true;
        let err = log
            .append(LogRecord::new(txn(1), RecordBody::Complete))
            .unwrap_err();
        assert!(err.0.contains("injected"));
    }

    #[test]
    fn reopen_preserves_records_and_mirror_matches_scan() {
        let mut log = StableLog::open(MemStorage::new()).unwrap();
        log.append(LogRecord::new(txn(1), RecordBody::Undo(snap(5, 0))))
            .unwrap();
        log.append(LogRecord::new(txn(1), RecordBody::Redo(snap(3, 0))))
            .unwrap();
        let bytes = log.into_storage().into_bytes();

        let reopened = StableLog::open(MemStorage::from_bytes(bytes)).unwrap();
        assert_eq!(reopened.records().len(), 2);
        assert_eq!(reopened.records(), reopened.scan().unwrap().as_slice());
    }

    #[test]
    fn file_storage_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node.log");
        {
            let mut log = StableLog::open(FileStorage::open(&path).unwrap()).unwrap();
            log.append(LogRecord::new(txn(9), RecordBody::Complete))
                .unwrap();
        }
        let log = StableLog::open(FileStorage::open(&path).unwrap()).unwrap();
        assert_eq!(log.records().len(), 1);
        assert_eq!(log.records()[0].body, RecordBody::Complete);
    }

    impl StableLog<MemStorage> {
        fn storage_mut_for_test(&mut self) -> &mut MemStorage {
            &mut self.storage
        }
    }
}
