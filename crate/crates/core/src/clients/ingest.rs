use std::collections::HashMap;
use std::path::Path;

use log::warn;

use super::{ClientError, SampleDescriptor, Verdict};
use crate::apk::manifest_from_apk;
use crate::preprocess::{clean_text, CleaningConfig, DatasetRecord};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutcome {
    pub records: Vec<DatasetRecord>,
    /// `(file name, reason)` for every APK left out.
    pub skipped: Vec<(String, String)>,
}

/// Decodes and cleans every `*.apk` directly under `dir` (sorted by name)
/// and joins it with its verdict by content hash.
pub fn ingest_directory(
    dir: &Path,
    labels: &[SampleDescriptor],
    cleaning: &CleaningConfig,
) -> Result<IngestOutcome, ClientError> {
    let by_hash: HashMap<&str, &SampleDescriptor> = labels.iter().map(|d| (d.sha256.as_str(), d)).collect();
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("apk"))
        })
        .collect();
    files.sort();

    let mut out = IngestOutcome::default();
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut skip = |reason: String| {
            warn!("skipping {name}: {reason}");
            out.skipped.push((name.clone(), reason));
        };
        let doc = match std::fs::File::open(&path)
            .map_err(ClientError::from)
            .and_then(|f| manifest_from_apk(std::io::BufReader::new(f)).map_err(|e| ClientError::Ingest(e.to_string())))
        {
            Ok(doc) => doc,
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let Some(desc) = by_hash.get(doc.apk_hash.as_str()) else {
            skip("no label for this hash".into());
            continue;
        };
        let text = clean_text(&doc.xml_text, cleaning);
        let record = match desc.verdict {
            None => {
                skip("label has no verdict".into());
                continue;
            }
            Some(Verdict::Benign) => DatasetRecord::benign(doc.apk_hash, text),
            Some(Verdict::Malware) => DatasetRecord::malware(doc.apk_hash, text, desc.category),
        };
        out.records.push(record);
    }
    Ok(out)
}
