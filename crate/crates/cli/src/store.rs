//! On-disk plumbing for the log files and a file-backed record sink.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use adcl_core::log::format::encode_record;
use adcl_core::log::{serialize_kstore, RecordSink};
use adcl_core::{KStoreState, LogRecord};

fn sibling_tmp(path: &Path) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(".tmp");
    PathBuf::from(name)
}

fn create(path: &Path, private: bool) -> io::Result<File> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    opts.open(path)
}

/// Replace `path` with `bytes` so readers see either the old or the new
/// contents, never a mix.
pub fn write_atomic(path: &Path, bytes: &[u8], private: bool) -> io::Result<()> {
    let tmp = sibling_tmp(path);
    let mut f = create(&tmp, private)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}

/// Take the advisory lock that marks this process as the log's owner.
pub fn lock_exclusive(file: &File, path: &Path) -> io::Result<()> {
    file.try_lock().map_err(|e| match e {
        fs::TryLockError::WouldBlock => {
            io::Error::new(io::ErrorKind::WouldBlock, format!("{} is locked by another process", path.display()))
        }
        fs::TryLockError::Error(e) => e,
    })
}

/// Appends flushed batches to the log store. The key store is replaced
/// before each batch is written, so a crash in between loses at most that
/// batch, which recovery treats as crash damage.
pub struct FileSink {
    lstore: File,
    kstore_path: PathBuf,
    count: u64,
    buf: Vec<u8>,
}

impl FileSink {
    /// `lstore` must be positioned at its end.
    pub fn new(lstore: File, kstore_path: PathBuf, already_persisted: u64) -> Self {
        FileSink { lstore, kstore_path, count: already_persisted, buf: Vec::new() }
    }
}

impl RecordSink for FileSink {
    fn persist(&mut self, kstore: &KStoreState, records: Vec<(u64, LogRecord)>) -> io::Result<()> {
        write_atomic(&self.kstore_path, &serialize_kstore(kstore), true)?;
        self.buf.clear();
        for (_, r) in &records {
            encode_record(&mut self.buf, r);
        }
        self.lstore.write_all(&self.buf)?;
        self.lstore.sync_data()?;
        self.count += records.len() as u64;
        Ok(())
    }

    fn persisted(&self) -> u64 {
        self.count
    }
}
