mod common;

use std::fs;

use common::fidelity::{axml_fixtures, axml_triples_match, zip_round_trip};
use common::fixtures;
use droidformer::apk::{decode_axml, manifest_from_apk, parse_axml_tree, ApkArchive, ApkError, SourceKind};

#[test]
fn triples_match_reference_decoder() {
    axml_triples_match().unwrap();
}

#[test]
fn zip_entry_tables_and_round_trip() {
    zip_round_trip().unwrap();
}

#[test]
fn rendered_text_carries_every_triple() {
    for path in axml_fixtures() {
        let doc = decode_axml(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(doc.source_kind, SourceKind::BinaryAxml);
        for (e, a, _) in parse_axml_tree(&fs::read(&path).unwrap()).unwrap().0.triples() {
            assert!(doc.xml_text.contains(&format!("<{e}")), "{e}");
            assert!(doc.xml_text.contains(&format!(" {a}=\"")), "{a}");
        }
    }
}

#[test]
fn handmade_fixture_canonical_text() {
    let doc = decode_axml(&fs::read(fixtures().join("axml/typed_utf8.axml")).unwrap()).unwrap();
    let t = &doc.xml_text;
    for needle in [
        "android:label=\"@0x7f0a0001\"",
        "android:theme=\"@0x01030006\"",
        "android:debuggable=\"true\"",
        "android:configChanges=\"0x000004a0\"",
        "android:textColor=\"#ff00ff00\"",
        "android:layout_width=\"24dip\"",
        "android:windowSoftInputMode=\"-1\"",
        "kéy.ünicode",
        "inline text",
    ] {
        assert!(t.contains(needle), "missing {needle} in\n{t}");
    }
    assert_eq!(doc.warnings.len(), 1, "{:?}", doc.warnings);
}

#[test]
fn nested_manifest_is_not_the_root_manifest() {
    let bytes = fs::read(fixtures().join("apk/no_manifest.apk")).unwrap();
    let archive = ApkArchive::from_bytes(bytes).unwrap();
    assert!(matches!(archive.extract_manifest(), Err(ApkError::ManifestMissing)));
}

#[test]
fn corrupted_deflate_data_is_reported() {
    let mut bytes = fs::read(fixtures().join("apk/deflated.apk")).unwrap();
    let archive = ApkArchive::from_bytes(bytes.clone()).unwrap();
    let e = archive.entry("AndroidManifest.xml").unwrap();
    let data_at = e.local_header_offset as usize + 30 + "AndroidManifest.xml".len();
    for b in &mut bytes[data_at + 10..data_at + 40] {
        *b ^= 0x5a;
    }
    let archive = ApkArchive::from_bytes(bytes).unwrap();
    assert!(matches!(
        archive.extract_manifest(),
        Err(ApkError::DecompressionFailure { .. })
    ));
}

#[test]
fn manifest_from_apk_uses_container_hash() {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(fixtures().join("apk/stored.apk")).unwrap();
    let doc = manifest_from_apk(bytes.as_slice()).unwrap();
    assert_eq!(doc.apk_hash, hex::encode(Sha256::digest(&bytes)));
    assert!(doc.xml_text.contains("android.permission.INTERNET"));
}
