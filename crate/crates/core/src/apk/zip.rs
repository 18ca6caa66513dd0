//! Central-directory ZIP reader, enough for APK containers.
//!
//! The entry table is always taken from the central directory located via
//! the end-of-central-directory record; local headers are only consulted to
//! find where an entry's data begins. Only stored and deflate entries are
//! accepted.

use std::collections::HashMap;
use std::io::Read;

use flate2::read::DeflateDecoder;

use super::ApkError;

const EOCD_SIGNATURE: u32 = 0x0605_4b50;
const CENTRAL_HEADER_SIGNATURE: u32 = 0x0201_4b50;
const LOCAL_HEADER_SIGNATURE: u32 = 0x0403_4b50;
const EOCD_LEN: usize = 22;
const CENTRAL_HEADER_LEN: usize = 46;
const LOCAL_HEADER_LEN: usize = 30;

pub const MANIFEST_ENTRY: &str = "AndroidManifest.xml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressionMethod {
    Stored,
    Deflate,
}

impl CompressionMethod {
    fn from_raw(raw: u16) -> Option<Self> {
        match raw {
            0 => Some(Self::Stored),
            8 => Some(Self::Deflate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZipEntry {
    pub name: String,
    pub local_header_offset: u64,
    pub compressed_size: u64,
    pub uncompressed_size: u64,
    pub method: CompressionMethod,
    pub crc32: u32,
}

/// An opened APK (ZIP) container and its entry table.
#[derive(Debug, Clone)]
pub struct ApkArchive {
    source: Vec<u8>,
    entries: Vec<ZipEntry>,
    by_name: HashMap<String, usize>,
}

fn u16_at(b: &[u8], at: usize) -> Option<u16> {
    b.get(at..at + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

fn u32_at(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn find_eocd(b: &[u8]) -> Option<usize> {
    if b.len() < EOCD_LEN {
        return None;
    }
    let last = b.len() - EOCD_LEN;
    // The record may be followed by a comment of up to 65535 bytes.
    let first = last.saturating_sub(u16::MAX as usize);
    (first..=last).rev().find(|&pos| {
        u32_at(b, pos) == Some(EOCD_SIGNATURE)
            && u16_at(b, pos + 20).is_some_and(|c| pos + EOCD_LEN + c as usize <= b.len())
    })
}

impl ApkArchive {
    /// Reads `source` to the end and parses its central directory.
    pub fn open<R: Read>(mut source: R) -> Result<Self, ApkError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_bytes(buf)
    }

    pub fn from_bytes(source: Vec<u8>) -> Result<Self, ApkError> {
        let bad = |m: &str| ApkError::BadCentralDirectory(m.to_string());
        let eocd = find_eocd(&source).ok_or_else(|| bad("no end-of-central-directory record"))?;
        let total_entries = u16_at(&source, eocd + 10).unwrap() as usize;
        let cd_size = u32_at(&source, eocd + 12).unwrap() as usize;
        let cd_offset = u32_at(&source, eocd + 16).unwrap() as usize;
        if cd_offset == 0xFFFF_FFFF || total_entries == 0xFFFF {
            return Err(bad("zip64 archives are not supported"));
        }
        if cd_offset.checked_add(cd_size).is_none_or(|end| end > eocd) {
            return Err(ApkError::TruncatedArchive(format!(
                "central directory {cd_offset}+{cd_size} extends past offset {eocd}"
            )));
        }

        let mut entries = Vec::with_capacity(total_entries);
        let mut by_name = HashMap::with_capacity(total_entries);
        let mut pos = cd_offset;
        for i in 0..total_entries {
            let header = source
                .get(pos..pos + CENTRAL_HEADER_LEN)
                .ok_or_else(|| ApkError::TruncatedArchive(format!("central header {i}")))?;
            if u32_at(header, 0) != Some(CENTRAL_HEADER_SIGNATURE) {
                return Err(bad(&format!("bad signature for central header {i}")));
            }
            let raw_method = u16_at(header, 10).unwrap();
            let crc32 = u32_at(header, 16).unwrap();
            let compressed_size = u32_at(header, 20).unwrap() as u64;
            let uncompressed_size = u32_at(header, 24).unwrap() as u64;
            let name_len = u16_at(header, 28).unwrap() as usize;
            let extra_len = u16_at(header, 30).unwrap() as usize;
            let comment_len = u16_at(header, 32).unwrap() as usize;
            let local_header_offset = u32_at(header, 42).unwrap() as u64;

            let name_start = pos + CENTRAL_HEADER_LEN;
            let name_bytes = source
                .get(name_start..name_start + name_len)
                .ok_or_else(|| ApkError::TruncatedArchive(format!("name of entry {i}")))?;
            let name = String::from_utf8_lossy(name_bytes).into_owned();
            let method = CompressionMethod::from_raw(raw_method).ok_or_else(|| ApkError::UnsupportedCompression {
                entry: name.clone(),
                method: raw_method,
            })?;
            if local_header_offset + compressed_size > cd_offset as u64 {
                return Err(ApkError::TruncatedArchive(format!(
                    "entry `{name}` at {local_header_offset} overlaps the central directory"
                )));
            }
            if by_name.insert(name.clone(), entries.len()).is_some() {
                return Err(bad(&format!("duplicate entry `{name}`")));
            }
            entries.push(ZipEntry {
                name,
                local_header_offset,
                compressed_size,
                uncompressed_size,
                method,
                crc32,
            });
            pos = name_start + name_len + extra_len + comment_len;
        }
        if pos > cd_offset + cd_size {
            return Err(bad("entries overrun the declared central directory size"));
        }

        Ok(Self {
            source,
            entries,
            by_name,
        })
    }

    pub fn entries(&self) -> &[ZipEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ZipEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    /// Hex SHA-256 of the whole container.
    pub fn sha256_hex(&self) -> String {
        super::sha256_hex(&self.source)
    }

    /// Decompressed contents of `entry`, CRC-checked.
    pub fn read(&self, entry: &ZipEntry) -> Result<Vec<u8>, ApkError> {
        let fail = |m: String| ApkError::DecompressionFailure {
            entry: entry.name.clone(),
            reason: m,
        };
        let lh = entry.local_header_offset as usize;
        let local = self
            .source
            .get(lh..lh + LOCAL_HEADER_LEN)
            .ok_or_else(|| ApkError::TruncatedArchive(format!("local header of `{}`", entry.name)))?;
        if u32_at(local, 0) != Some(LOCAL_HEADER_SIGNATURE) {
            return Err(ApkError::BadCentralDirectory(format!(
                "entry `{}` does not point at a local header",
                entry.name
            )));
        }
        let data_start =
            lh + LOCAL_HEADER_LEN + u16_at(local, 26).unwrap() as usize + u16_at(local, 28).unwrap() as usize;
        let data = self
            .source
            .get(data_start..data_start + entry.compressed_size as usize)
            .ok_or_else(|| ApkError::TruncatedArchive(format!("data of `{}`", entry.name)))?;

        let out = match entry.method {
            CompressionMethod::Stored => data.to_vec(),
            CompressionMethod::Deflate => {
                let mut out = Vec::with_capacity(entry.uncompressed_size as usize);
                DeflateDecoder::new(data)
                    .read_to_end(&mut out)
                    .map_err(|e| fail(e.to_string()))?;
                out
            }
        };
        if out.len() as u64 != entry.uncompressed_size {
            return Err(fail(format!(
                "expected {} bytes, got {}",
                entry.uncompressed_size,
                out.len()
            )));
        }
        if crc32fast::hash(&out) != entry.crc32 {
            return Err(fail("CRC-32 mismatch".into()));
        }
        Ok(out)
    }

    /// Decompressed bytes of the root-level `AndroidManifest.xml`.
    pub fn extract_manifest(&self) -> Result<Vec<u8>, ApkError> {
        let entry = self.entry(MANIFEST_ENTRY).ok_or(ApkError::ManifestMissing)?;
        self.read(entry)
    }
}
