//! Comparisons against fixtures produced by independent tools (androguard
//! for AXML, Python's zipfile for archives).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use droidformer::apk::{parse_axml_tree, ApkArchive, CompressionMethod};

use super::fixtures;

/// Maps the two decoders' spellings of typed values onto one form.
pub fn canonical(value: &str) -> String {
    let hex_tail = |s: &str| u32::from_str_radix(s, 16).ok();
    for sigil in ['@', '?'] {
        if let Some(rest) = value.strip_prefix(sigil) {
            let rest = rest.strip_prefix("android:").unwrap_or(rest);
            let rest = rest.strip_prefix("0x").unwrap_or(rest);
            if rest.len() == 8 {
                if let Some(n) = hex_tail(rest) {
                    return format!("{sigil}{n}");
                }
            }
        }
    }
    if let Some(rest) = value.strip_prefix("0x").or_else(|| value.strip_prefix('#')) {
        if let Some(n) = hex_tail(rest) {
            return format!("{}{n}", &value[..1]);
        }
    }
    let split = value
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .unwrap_or(value.len());
    let (num, unit) = value.split_at(split);
    if num.contains('.') && !unit.is_empty() {
        if let Ok(x) = num.parse::<f64>() {
            return format!("{x}{unit}");
        }
    }
    value.to_string()
}

pub type Multiset = BTreeMap<(String, String, String), usize>;

pub fn multiset(triples: impl IntoIterator<Item = (String, String, String)>) -> Multiset {
    let mut m = Multiset::new();
    for (e, a, v) in triples {
        *m.entry((e, a, canonical(&v))).or_default() += 1;
    }
    m
}

pub fn reference_triples(path: &Path) -> Multiset {
    let text = fs::read_to_string(path).unwrap();
    multiset(text.lines().filter(|l| !l.is_empty()).map(|l| {
        let mut f = l.splitn(3, '\t');
        (
            f.next().unwrap().to_string(),
            f.next().unwrap().to_string(),
            f.next().unwrap_or("").to_string(),
        )
    }))
}

pub fn axml_fixtures() -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(fixtures().join("axml"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "axml"))
        .collect();
    v.sort();
    v
}

pub fn listing(name: &str) -> Vec<(String, u16, u64, u64, u32)> {
    fs::read_to_string(fixtures().join("apk").join(name))
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<_> = l.split('\t').collect();
            (
                f[0].to_string(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                u32::from_str_radix(f[4], 16).unwrap(),
            )
        })
        .collect()
}

/// Every AXML fixture's triples against the reference decoder; returns the
/// number of fixtures compared.
pub fn axml_triples_match() -> Result<usize, String> {
    let all = axml_fixtures();
    if all.len() < 3 {
        return Err(format!("only {} AXML fixtures", all.len()));
    }
    for path in &all {
        let raw = fs::read(path).map_err(|e| e.to_string())?;
        let (root, _) = parse_axml_tree(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        if multiset(root.triples()) != reference_triples(&path.with_extension("triples.tsv")) {
            return Err(format!("{}: triples differ", path.display()));
        }
    }
    Ok(all.len())
}

/// Entry tables equal the archiver listing and the manifest extracted from
/// stored and deflated archives equals the original payload.
pub fn zip_round_trip() -> Result<(), String> {
    for name in ["stored", "deflated", "no_manifest"] {
        let bytes = fs::read(fixtures().join(format!("apk/{name}.apk"))).map_err(|e| e.to_string())?;
        let archive = ApkArchive::from_bytes(bytes).map_err(|e| e.to_string())?;
        let ours: Vec<_> = archive
            .entries()
            .iter()
            .map(|e| {
                let method = match e.method {
                    CompressionMethod::Stored => 0,
                    CompressionMethod::Deflate => 8,
                };
                (e.name.clone(), method, e.compressed_size, e.uncompressed_size, e.crc32)
            })
            .collect();
        if ours != listing(&format!("{name}.listing.tsv")) {
            return Err(format!("{name}: entry table differs from listing"));
        }
    }
    let payload = fs::read(fixtures().join("apk/manifest_payload.bin")).map_err(|e| e.to_string())?;
    for name in ["stored", "deflated"] {
        let f = fs::File::open(fixtures().join(format!("apk/{name}.apk"))).map_err(|e| e.to_string())?;
        let archive = ApkArchive::open(f).map_err(|e| e.to_string())?;
        if archive.extract_manifest().map_err(|e| e.to_string())? != payload {
            return Err(format!("{name}: extracted manifest differs"));
        }
    }
    Ok(())
}
