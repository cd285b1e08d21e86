//! On-disk layout for a node's data directory and the office directory.
//!
//! A node directory holds `wallet.pwlt` (state), `wallet.pkey` (private key,
//! created with owner-only permissions where the platform supports it), and
//! `node.plog` (the durable log). Wallet writes go through a temp file and
//! rename so a crash never leaves a half-written record. The office is a
//! single `office.pofc` file, treated as an offline tool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use p2pwallet_core::node::NodeStore;
use p2pwallet_core::stable_log::{FileStorage, StorageFailure};
use p2pwallet_core::wallet::Office;

pub const WALLET_FILE: &str = "wallet.pwlt";
pub const KEY_FILE: &str = "wallet.pkey";
pub const LOG_FILE: &str = "node.plog";
pub const OFFICE_FILE: &str = "office.pofc";

/// Atomic file write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8], restrict: bool) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    fs::write(&tmp, bytes)?;
    #[cfg(unix)]
    if restrict {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&tmp, fs::Permissions::from_mode(0o600))?;
    }
    #[cfg(not(unix))]
    let _ = restrict;
    fs::rename(&tmp, path)?;
    // Durability of the rename itself.
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// File-backed [`NodeStore`].
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileStore { dir: dir.into() }
    }
}

impl NodeStore for FileStore {
    fn save_wallet(&mut self, bytes: &[u8]) -> std::result::Result<(), StorageFailure> {
        write_atomic(&self.dir.join(WALLET_FILE), bytes, false)
            .map_err(|e| StorageFailure(e.to_string()))
    }

    fn load_wallet(&self) -> std::result::Result<Option<Vec<u8>>, StorageFailure> {
        match fs::read(self.dir.join(WALLET_FILE)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StorageFailure(e.to_string())),
        }
    }

    fn save_keys(&mut self, bytes: &[u8]) -> std::result::Result<(), StorageFailure> {
        write_atomic(&self.dir.join(KEY_FILE), bytes, true)
            .map_err(|e| StorageFailure(e.to_string()))
    }

    fn load_keys(&self) -> std::result::Result<Option<Vec<u8>>, StorageFailure> {
        match fs::read(self.dir.join(KEY_FILE)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StorageFailure(e.to_string())),
        }
    }
}

/// Opens the node's durable log inside the data directory.
pub fn open_log(dir: &Path) -> Result<FileStorage> {
    FileStorage::open(dir.join(LOG_FILE)).context("open node log")
}

pub fn has_wallet(dir: &Path) -> bool {
    dir.join(WALLET_FILE).exists()
}

pub fn load_office(dir: &Path) -> Result<Office> {
    let path = dir.join(OFFICE_FILE);
    if !path.exists() {
        bail!("no office at {}; run `office provision` to create one", dir.display());
    }
    let bytes = fs::read(&path).context("read office file")?;
    Office::from_bytes(&bytes).context("parse office file")
}

pub fn load_or_create_office(
    dir: &Path,
    suite: &dyn p2pwallet_core::envelope::CryptoSuite,
    rng: &mut dyn p2pwallet_core::envelope::EnvelopeRng,
) -> Result<Office> {
    let path = dir.join(OFFICE_FILE);
    if path.exists() {
        let bytes = fs::read(&path).context("read office file")?;
        return Office::from_bytes(&bytes).context("parse office file");
    }
    fs::create_dir_all(dir).context("create office directory")?;
    Ok(Office::create(suite, rng))
}

pub fn save_office(dir: &Path, office: &Office) -> Result<()> {
    write_atomic(&dir.join(OFFICE_FILE), &office.to_bytes(), true).context("write office file")
}
