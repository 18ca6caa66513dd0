//! APK container reading and binary manifest decoding.

mod axml;
mod zip;

use std::io::Read;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use axml::{decode_axml, parse_axml_tree, render, Element, ManifestDocument, Node, SourceKind};
pub use zip::{ApkArchive, CompressionMethod, ZipEntry, MANIFEST_ENTRY};

#[derive(Debug, Error)]
pub enum ApkError {
    #[error("truncated archive: {0}")]
    TruncatedArchive(String),
    #[error("bad central directory: {0}")]
    BadCentralDirectory(String),
    #[error("entry `{entry}` uses unsupported compression method {method}")]
    UnsupportedCompression { entry: String, method: u16 },
    #[error("archive has no AndroidManifest.xml")]
    ManifestMissing,
    #[error("failed to decompress `{entry}`: {reason}")]
    DecompressionFailure { entry: String, reason: String },
    #[error("corrupt string pool: {0}")]
    CorruptStringPool(String),
    #[error("not manifest data: {0}")]
    NotManifestData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opens an APK, extracts and decodes its manifest, and tags the result
/// with the SHA-256 of the whole APK.
pub fn manifest_from_apk<R: Read>(source: R) -> Result<ManifestDocument, ApkError> {
    let archive = ApkArchive::open(source)?;
    manifest_from_archive(&archive)
}

pub fn manifest_from_archive(archive: &ApkArchive) -> Result<ManifestDocument, ApkError> {
    let raw = archive.extract_manifest()?;
    let mut doc = decode_axml(&raw)?;
    doc.apk_hash = archive.sha256_hex();
    Ok(doc)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
