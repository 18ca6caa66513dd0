//! Decoder for Android's binary XML (AXML) manifest encoding.
//!
//! The document is a sequence of little-endian chunks, each starting with
//! `{type: u16, header_size: u16, size: u32}`. We read the string pool
//! (`0x0001`), the resource map (`0x0180`), namespace (`0x0100`/`0x0101`),
//! element (`0x0102`/`0x0103`) and CDATA (`0x0104`) chunks inside the file
//! chunk (`0x0003`). Anything else is skipped with a warning.
//!
//! Typed attribute values are rendered as follows:
//!
//! | type                | text                          |
//! |---------------------|-------------------------------|
//! | string              | the pooled string             |
//! | boolean             | `true` / `false`              |
//! | decimal integer     | signed base-10                |
//! | hex integer         | `0x%08x`                      |
//! | reference           | `@0x%08x`                     |
//! | attribute reference | `?0x%08x`                     |
//! | float               | shortest round-trip decimal   |
//! | dimension/fraction  | decoded value + unit suffix   |
//! | colour              | `#%08x`                       |
//! | null                | empty string                  |

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{sha256_hex, ApkError};
use log::warn;

const RES_STRING_POOL_TYPE: u16 = 0x0001;
const RES_XML_TYPE: u16 = 0x0003;
const RES_XML_START_NAMESPACE_TYPE: u16 = 0x0100;
const RES_XML_END_NAMESPACE_TYPE: u16 = 0x0101;
const RES_XML_START_ELEMENT_TYPE: u16 = 0x0102;
const RES_XML_END_ELEMENT_TYPE: u16 = 0x0103;
const RES_XML_CDATA_TYPE: u16 = 0x0104;
const RES_XML_RESOURCE_MAP_TYPE: u16 = 0x0180;

const UTF8_FLAG: u32 = 1 << 8;
const NO_INDEX: u32 = 0xFFFF_FFFF;

const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    BinaryAxml,
    PlainXml,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::BinaryAxml => "binary-axml",
            SourceKind::PlainXml => "plain-xml",
        }
    }
}

/// A decoded manifest and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestDocument {
    /// Hex SHA-256 identity. [`decode_axml`] fills in the hash of the
    /// manifest bytes; [`super::manifest_from_apk`] replaces it with the
    /// hash of the whole APK.
    pub apk_hash: String,
    pub xml_text: String,
    pub source_kind: SourceKind,
    /// Non-fatal problems met while decoding (e.g. skipped chunks).
    pub warnings: Vec<String>,
}

/// A parsed XML element tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Element {
    pub name: String,
    /// `(qualified name, value)` in document order, `xmlns:*` first.
    pub attributes: Vec<(String, String)>,
    pub children: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Element(Element),
    Text(String),
}

impl Element {
    /// Every `(element, attribute, value)` triple in document order,
    /// excluding namespace declarations.
    pub fn triples(&self) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        self.collect_triples(&mut out);
        out
    }

    fn collect_triples(&self, out: &mut Vec<(String, String, String)>) {
        for (k, v) in &self.attributes {
            if k != "xmlns" && !k.starts_with("xmlns:") {
                out.push((self.name.clone(), k.clone(), v.clone()));
            }
        }
        for c in &self.children {
            if let Node::Element(e) = c {
                e.collect_triples(out);
            }
        }
    }
}

/// Decodes a manifest, passing textual XML through unchanged.
pub fn decode_axml(raw: &[u8]) -> Result<ManifestDocument, ApkError> {
    if raw.is_empty() {
        return Err(ApkError::NotManifestData("empty input".into()));
    }
    if looks_like_text_xml(raw) {
        let text =
            std::str::from_utf8(raw).map_err(|_| ApkError::NotManifestData("textual XML is not valid UTF-8".into()))?;
        if !has_element_tag(text) {
            return Err(ApkError::NotManifestData("no element tag found".into()));
        }
        return Ok(ManifestDocument {
            apk_hash: sha256_hex(raw),
            xml_text: text.to_string(),
            source_kind: SourceKind::PlainXml,
            warnings: Vec::new(),
        });
    }
    let (root, warnings) = parse_binary(raw)?;
    Ok(ManifestDocument {
        apk_hash: sha256_hex(raw),
        xml_text: render(&root),
        source_kind: SourceKind::BinaryAxml,
        warnings,
    })
}

fn looks_like_text_xml(raw: &[u8]) -> bool {
    let body = raw.strip_prefix(&[0xEF, 0xBB, 0xBF]).unwrap_or(raw);
    body.iter()
        .find(|b| !b.is_ascii_whitespace())
        .is_some_and(|&b| b == b'<')
}

fn has_element_tag(text: &str) -> bool {
    text.as_bytes()
        .windows(2)
        .any(|w| w[0] == b'<' && (w[1].is_ascii_alphabetic() || w[1] == b'_'))
}

struct Chunk {
    ty: u16,
    header_size: usize,
    start: usize,
    end: usize,
}

fn read_u16(b: &[u8], at: usize) -> Option<u16> {
    b.get(at..at + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

fn read_u32(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn chunk_at(b: &[u8], at: usize, limit: usize) -> Result<Chunk, ApkError> {
    let corrupt = || ApkError::NotManifestData(format!("malformed chunk at offset {at}"));
    let ty = read_u16(b, at).ok_or_else(corrupt)?;
    let header_size = read_u16(b, at + 2).ok_or_else(corrupt)? as usize;
    let size = read_u32(b, at + 4).ok_or_else(corrupt)? as usize;
    if header_size < 8 || size < header_size || at + size > limit {
        return Err(corrupt());
    }
    Ok(Chunk {
        ty,
        header_size,
        start: at,
        end: at + size,
    })
}

/// Parsed `RES_STRING_POOL_TYPE` chunk.
#[derive(Debug, Default)]
struct StringPool {
    strings: Vec<String>,
}

impl StringPool {
    fn parse(b: &[u8], chunk: &Chunk) -> Result<Self, ApkError> {
        let corrupt = |m: &str| ApkError::CorruptStringPool(m.to_string());
        let base = chunk.start;
        let count = read_u32(b, base + 8).ok_or_else(|| corrupt("header"))? as usize;
        let flags = read_u32(b, base + 16).ok_or_else(|| corrupt("header"))?;
        let strings_start = read_u32(b, base + 20).ok_or_else(|| corrupt("header"))? as usize;
        let utf8 = flags & UTF8_FLAG != 0;
        let offsets_at = base + chunk.header_size;
        if offsets_at + count * 4 > chunk.end {
            return Err(corrupt("offset table overruns chunk"));
        }
        let data_at = base + strings_start;
        let mut strings = Vec::with_capacity(count);
        for i in 0..count {
            let off = read_u32(b, offsets_at + 4 * i).unwrap() as usize;
            let at = data_at + off;
            if at >= chunk.end {
                return Err(corrupt(&format!("string {i} starts outside the pool")));
            }
            let s = if utf8 {
                decode_utf8_entry(&b[at..chunk.end])
            } else {
                decode_utf16_entry(&b[at..chunk.end])
            }
            .ok_or_else(|| corrupt(&format!("string {i} overruns the pool")))?;
            strings.push(s);
        }
        Ok(Self { strings })
    }

    fn get(&self, idx: u32) -> Option<&str> {
        if idx == NO_INDEX {
            return None;
        }
        self.strings.get(idx as usize).map(String::as_str)
    }
}

fn utf8_len(b: &[u8], at: usize) -> Option<(usize, usize)> {
    let first = *b.get(at)? as usize;
    if first & 0x80 != 0 {
        let second = *b.get(at + 1)? as usize;
        Some((((first & 0x7F) << 8) | second, 2))
    } else {
        Some((first, 1))
    }
}

fn decode_utf8_entry(b: &[u8]) -> Option<String> {
    let (_, n1) = utf8_len(b, 0)?;
    let (bytes, n2) = utf8_len(b, n1)?;
    let start = n1 + n2;
    let raw = b.get(start..start + bytes)?;
    Some(String::from_utf8_lossy(raw).into_owned())
}

fn decode_utf16_entry(b: &[u8]) -> Option<String> {
    let first = read_u16(b, 0)? as usize;
    let (units, skip) = if first & 0x8000 != 0 {
        let second = read_u16(b, 2)? as usize;
        (((first & 0x7FFF) << 16) | second, 4)
    } else {
        (first, 2)
    };
    let raw = b.get(skip..skip + units * 2)?;
    let units: Vec<u16> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Some(String::from_utf16_lossy(&units))
}

fn complex_to_float(data: u32) -> f64 {
    const RADIX_MULTS: [f64; 4] = [
        1.0 / (1u64 << 8) as f64,
        1.0 / (1u64 << 15) as f64,
        1.0 / (1u64 << 23) as f64,
        1.0 / (1u64 << 31) as f64,
    ];
    let mantissa = (data & 0xFFFF_FF00) as i32 as f64;
    mantissa * RADIX_MULTS[((data >> 4) & 3) as usize]
}

fn render_typed(ty: u8, data: u32, pool: &StringPool) -> String {
    match ty {
        0x00 => String::new(),
        0x01 | 0x07 => format!("@0x{data:08x}"),
        0x02 | 0x08 => format!("?0x{data:08x}"),
        0x03 => pool.get(data).unwrap_or_default().to_string(),
        0x04 => format!("{}", f32::from_bits(data)),
        0x05 => {
            const UNITS: [&str; 6] = ["px", "dip", "sp", "pt", "in", "mm"];
            let unit = UNITS.get((data & 0xF) as usize).copied().unwrap_or("");
            format!("{}{unit}", complex_to_float(data) as f32)
        }
        0x06 => {
            let unit = if data & 0xF == 1 { "%p" } else { "%" };
            format!("{}{unit}", (complex_to_float(data) * 100.0) as f32)
        }
        0x10 => (data as i32).to_string(),
        0x11 => format!("0x{data:08x}"),
        0x12 => if data != 0 { "true" } else { "false" }.to_string(),
        0x1C..=0x1F => format!("#{data:08x}"),
        _ => format!("0x{data:08x}"),
    }
}

fn parse_binary(b: &[u8]) -> Result<(Element, Vec<String>), ApkError> {
    if read_u16(b, 0) != Some(RES_XML_TYPE) {
        return Err(ApkError::NotManifestData(
            "neither textual XML nor an AXML file chunk".into(),
        ));
    }
    let file = chunk_at(b, 0, b.len()).or_else(|_| {
        // Some packers understate or overstate the file size; trust the buffer.
        let header_size = read_u16(b, 2).unwrap_or(8) as usize;
        Ok::<_, ApkError>(Chunk {
            ty: RES_XML_TYPE,
            header_size: header_size.max(8),
            start: 0,
            end: b.len(),
        })
    })?;

    let mut warnings = Vec::new();
    let mut pool = None::<StringPool>;
    let mut resource_ids: Vec<u32> = Vec::new();
    let mut prefixes: HashMap<String, String> = HashMap::new();
    let mut pending_ns: Vec<(String, String)> = Vec::new();
    let mut stack: Vec<Element> = Vec::new();
    let mut roots: Vec<Element> = Vec::new();

    let mut at = file.start + file.header_size;
    while at + 8 <= file.end {
        let chunk = chunk_at(b, at, file.end)?;
        at = chunk.end;
        let body = chunk.start + chunk.header_size;
        match chunk.ty {
            RES_STRING_POOL_TYPE => {
                if pool.is_none() {
                    pool = Some(StringPool::parse(b, &chunk)?);
                }
            }
            RES_XML_RESOURCE_MAP_TYPE => {
                resource_ids = (body..chunk.end).step_by(4).filter_map(|p| read_u32(b, p)).collect();
            }
            RES_XML_START_NAMESPACE_TYPE | RES_XML_END_NAMESPACE_TYPE => {
                let pool = pool.as_ref().ok_or_else(missing_pool)?;
                let prefix = read_u32(b, body).and_then(|i| pool.get(i)).unwrap_or_default();
                let uri = read_u32(b, body + 4).and_then(|i| pool.get(i)).unwrap_or_default();
                if chunk.ty == RES_XML_START_NAMESPACE_TYPE {
                    prefixes.insert(uri.to_string(), prefix.to_string());
                    pending_ns.push((prefix.to_string(), uri.to_string()));
                }
            }
            RES_XML_START_ELEMENT_TYPE => {
                let pool = pool.as_ref().ok_or_else(missing_pool)?;
                let element = parse_start_element(b, &chunk, pool, &resource_ids, &prefixes)?;
                let mut element = element;
                let decls = pending_ns.drain(..).map(|(p, u)| {
                    let key = if p.is_empty() {
                        "xmlns".to_string()
                    } else {
                        format!("xmlns:{p}")
                    };
                    (key, u)
                });
                element.attributes.splice(0..0, decls);
                stack.push(element);
            }
            RES_XML_END_ELEMENT_TYPE => match stack.pop() {
                Some(done) => match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(done)),
                    None => roots.push(done),
                },
                None => warnings.push(format!("unbalanced end tag at offset {}", chunk.start)),
            },
            RES_XML_CDATA_TYPE => {
                let pool = pool.as_ref().ok_or_else(missing_pool)?;
                let text = read_u32(b, body).and_then(|i| pool.get(i)).unwrap_or_default();
                if let Some(top) = stack.last_mut() {
                    top.children.push(Node::Text(text.to_string()));
                }
            }
            other => {
                let msg = format!("skipping unknown chunk type 0x{other:04x} at offset {}", chunk.start);
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    while let Some(open) = stack.pop() {
        warnings.push(format!("unterminated element <{}>", open.name));
        match stack.last_mut() {
            Some(parent) => parent.children.push(Node::Element(open)),
            None => roots.push(open),
        }
    }
    if roots.len() > 1 {
        warnings.push(format!("{} top-level elements; keeping the first", roots.len()));
    }
    let root = roots
        .into_iter()
        .next()
        .ok_or_else(|| ApkError::NotManifestData("document has no elements".into()))?;
    Ok((root, warnings))
}

fn missing_pool() -> ApkError {
    ApkError::CorruptStringPool("XML node precedes the string pool".into())
}

fn parse_start_element(
    b: &[u8],
    chunk: &Chunk,
    pool: &StringPool,
    resource_ids: &[u32],
    prefixes: &HashMap<String, String>,
) -> Result<Element, ApkError> {
    let body = chunk.start + chunk.header_size;
    let bad = || ApkError::NotManifestData(format!("malformed start tag at offset {}", chunk.start));
    let name_idx = read_u32(b, body + 4).ok_or_else(bad)?;
    let attr_start = read_u16(b, body + 8).ok_or_else(bad)? as usize;
    let attr_size = read_u16(b, body + 10).ok_or_else(bad)? as usize;
    let attr_count = read_u16(b, body + 12).ok_or_else(bad)? as usize;
    let name = pool.get(name_idx).ok_or_else(bad)?.to_string();
    let attr_size = if attr_size == 0 { 20 } else { attr_size };

    let mut attributes = Vec::with_capacity(attr_count);
    for i in 0..attr_count {
        let a = body + attr_start + i * attr_size;
        if a + 20 > chunk.end {
            return Err(bad());
        }
        let ns = read_u32(b, a).unwrap();
        let an = read_u32(b, a + 4).unwrap();
        let raw = read_u32(b, a + 8).unwrap();
        let ty = b[a + 15];
        let data = read_u32(b, a + 16).unwrap();

        let mut local = pool.get(an).unwrap_or_default().to_string();
        if local.is_empty() {
            if let Some(id) = resource_ids.get(an as usize) {
                local = format!("attr_0x{id:08x}");
            }
        }
        let qualified = match pool.get(ns) {
            Some(uri) => {
                let prefix = prefixes.get(uri).cloned().unwrap_or_else(|| {
                    if uri == ANDROID_NS {
                        "android".into()
                    } else {
                        String::new()
                    }
                });
                if prefix.is_empty() {
                    local
                } else {
                    format!("{prefix}:{local}")
                }
            }
            None => local,
        };
        let value = match pool.get(raw) {
            Some(s) => s.to_string(),
            None => render_typed(ty, data, pool),
        };
        attributes.push((qualified, value));
    }
    Ok(Element {
        name,
        attributes,
        children: Vec::new(),
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Renders an element tree as indented XML with a UTF-8 prolog.
pub fn render(root: &Element) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    render_element(root, 0, &mut out);
    out
}

fn render_element(e: &Element, depth: usize, out: &mut String) {
    let indent = "  ".repeat(depth);
    let _ = write!(out, "{indent}<{}", e.name);
    for (k, v) in &e.attributes {
        let _ = write!(out, " {k}=\"{}\"", escape(v));
    }
    if e.children.is_empty() {
        out.push_str("/>\n");
        return;
    }
    out.push_str(">\n");
    for c in &e.children {
        match c {
            Node::Element(child) => render_element(child, depth + 1, out),
            Node::Text(t) => {
                let _ = writeln!(out, "{indent}  {}", escape(t));
            }
        }
    }
    let _ = writeln!(out, "{indent}</{}>", e.name);
}

/// Parses binary AXML into an element tree without rendering it.
pub fn parse_axml_tree(raw: &[u8]) -> Result<(Element, Vec<String>), ApkError> {
    parse_binary(raw)
}
