use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{validate_hash, ClientError};

/// APK files keyed by sha256 under one directory (`<hash>.apk`).
#[derive(Debug, Clone)]
pub struct SampleStore {
    root: PathBuf,
}

impl SampleStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(format!("{hash}.apk"))
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.path_for(hash).is_file()
    }

    /// Verifies `bytes` against `hash`, then writes through a temporary file
    /// and renames it into place.
    pub fn put(&self, hash: &str, bytes: &[u8]) -> Result<PathBuf, ClientError> {
        validate_hash(hash)?;
        let actual = hex::encode(Sha256::digest(bytes));
        if actual != hash {
            return Err(ClientError::HashMismatch {
                expected: hash.to_string(),
                actual,
            });
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        let path = self.path_for(hash);
        tmp.persist(&path).map_err(|e| ClientError::Io(e.error))?;
        Ok(path)
    }
}
