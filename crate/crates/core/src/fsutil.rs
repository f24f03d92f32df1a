//! Crash-safe file output: stage next to the destination, then rename.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to a sibling temp file and rename it over `path`, so readers
/// never observe a truncated file at the final location.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Replace directory `dst` with the fully populated directory `staged`.
pub fn replace_dir(staged: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        fs::remove_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    }
    fs::rename(staged, dst).map_err(|e| Error::io(dst, e))
}

/// Create a staging directory next to `dst` that can later be renamed onto it.
pub fn staging_dir(dst: &Path) -> Result<tempfile::TempDir> {
    let parent = match dst.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))
}
