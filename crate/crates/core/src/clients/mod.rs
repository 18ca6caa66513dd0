//! Sample repository and scanner clients (live or offline fixtures), the
//! content-addressed sample store and directory ingestion.

mod alias;
mod ingest;
mod store;

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::Category;

pub use alias::AliasTable;
pub use ingest::{ingest_directory, IngestOutcome};
pub use store::SampleStore;

const MAX_BODY_BYTES: u64 = 256 << 20;
const API_KEY_HEADER: &str = "x-apikey";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    Config(String),
    #[error("`{0}` is not a lowercase sha256 hex digest")]
    BadHash(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("fixture missing: {}", .0.display())]
    FixtureMissing(PathBuf),
    #[error("sample not found: {0}")]
    NotFound(String),
    #[error("hash mismatch: expected {expected}, downloaded bytes hash to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("no scanner report for {0}")]
    UnknownHash(String),
    #[error("unmappable category `{0}`")]
    UnmappableCategory(String),
    #[error("alias table line {line}: {reason}")]
    BadAliasTable { line: usize, reason: String },
    #[error("bad filter: {0}")]
    BadFilter(String),
    #[error("bad index row {row}: {reason}")]
    BadIndex { row: u64, reason: String },
    #[error("http: {0}")]
    Http(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("{0}")]
    Ingest(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

pub fn validate_hash(hash: &str) -> Result<()> {
    if hash.len() == 64 && hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        Ok(())
    } else {
        Err(ClientError::BadHash(hash.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Malware,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Benign => "benign",
            Verdict::Malware => "malware",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "benign" => Some(Verdict::Benign),
            "malware" => Some(Verdict::Malware),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Repository,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchStatus {
    Pending,
    Stored(PathBuf),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDescriptor {
    pub sha256: String,
    pub source: SampleSource,
    pub verdict: Option<Verdict>,
    pub category: Option<Category>,
    pub fetch_status: FetchStatus,
    pub filename: Option<String>,
    /// `YYYY-MM-DD`.
    pub date: Option<String>,
}

impl SampleDescriptor {
    pub fn new(sha256: impl Into<String>, source: SampleSource) -> Result<Self> {
        let sha256 = sha256.into();
        validate_hash(&sha256)?;
        Ok(Self {
            sha256,
            source,
            verdict: None,
            category: None,
            fetch_status: FetchStatus::Pending,
            filename: None,
            date: None,
        })
    }
}

/// Row of a sample index: fixture `index.csv`, a labels file, or a page of
/// the live listing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub hash: String,
    #[serde(default)]
    pub verdict: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub filename: String,
    #[serde(default)]
    pub date: String,
}

impl IndexRow {
    fn into_descriptor(self, row: u64) -> Result<SampleDescriptor> {
        let bad = |reason: String| ClientError::BadIndex { row, reason };
        let mut d =
            SampleDescriptor::new(self.hash.trim(), SampleSource::Repository).map_err(|e| bad(e.to_string()))?;
        d.verdict = match self.verdict.trim() {
            "" => None,
            v => Some(Verdict::parse(v).ok_or_else(|| bad(format!("unknown verdict `{v}`")))?),
        };
        d.category = match self.category.trim() {
            "" => None,
            c => Some(c.parse().map_err(|c| bad(format!("unknown category `{c}`")))?),
        };
        d.filename = Some(self.filename.trim().to_string()).filter(|s| !s.is_empty());
        d.date = Some(self.date.trim().to_string()).filter(|s| !s.is_empty());
        Ok(d)
    }

    fn from_descriptor(d: &SampleDescriptor) -> Self {
        Self {
            hash: d.sha256.clone(),
            verdict: d.verdict.map_or("", Verdict::as_str).to_string(),
            category: d.category.map_or("", Category::as_str).to_string(),
            filename: d.filename.clone().unwrap_or_default(),
            date: d.date.clone().unwrap_or_default(),
        }
    }
}

pub fn read_index_from<R: Read>(reader: R) -> Result<Vec<SampleDescriptor>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<IndexRow>() {
        let row = row?;
        out.push(row.into_descriptor(out.len() as u64 + 2)?);
    }
    Ok(out)
}

pub fn read_index(path: &Path) -> Result<Vec<SampleDescriptor>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ClientError::FixtureMissing(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_index_from(file)
}

pub fn write_index_to<W: Write>(writer: W, samples: &[SampleDescriptor]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in samples {
        w.serialize(IndexRow::from_descriptor(d))?;
    }
    if samples.is_empty() {
        w.write_record(["hash", "verdict", "category", "filename", "date"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_index(path: &Path, samples: &[SampleDescriptor]) -> Result<()> {
    write_index_to(std::io::BufWriter::new(std::fs::File::create(path)?), samples)
}

/// Listing filter; dates are inclusive `YYYY-MM-DD` bounds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleFilter {
    pub verdict: Option<Verdict>,
    pub date_from: Option<String>,
    pub date_to: Option<String>,
}

fn check_date(s: &str) -> Result<String> {
    let b = s.as_bytes();
    let ok = b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit());
    if ok {
        Ok(s.to_string())
    } else {
        Err(ClientError::BadFilter(format!("date `{s}` is not YYYY-MM-DD")))
    }
}

impl SampleFilter {
    /// Parses `verdict=malware,from=2021-01-01,to=2021-12-31` (any subset).
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Self::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| ClientError::BadFilter(format!("expected key=value, got `{part}`")))?;
            match k.trim() {
                "verdict" => {
                    f.verdict = Some(
                        Verdict::parse(v.trim())
                            .ok_or_else(|| ClientError::BadFilter(format!("unknown verdict `{v}`")))?,
                    )
                }
                "from" => f.date_from = Some(check_date(v.trim())?),
                "to" => f.date_to = Some(check_date(v.trim())?),
                other => return Err(ClientError::BadFilter(format!("unknown key `{other}`"))),
            }
        }
        Ok(f)
    }

    pub fn matches(&self, d: &SampleDescriptor) -> bool {
        if self.verdict.is_some() && d.verdict != self.verdict {
            return false;
        }
        let date = d.date.as_deref();
        if let Some(from) = &self.date_from {
            if date.is_none_or(|x| x < from.as_str()) {
                return false;
            }
        }
        if let Some(to) = &self.date_to {
            if date.is_none_or(|x| x > to.as_str()) {
                return false;
            }
        }
        true
    }

    fn query(&self) -> Vec<(&'static str, String)> {
        let mut q = Vec::new();
        if let Some(v) = self.verdict {
            q.push(("verdict", v.as_str().to_string()));
        }
        if let Some(d) = &self.date_from {
            q.push(("from", d.clone()));
        }
        if let Some(d) = &self.date_to {
            q.push(("to", d.clone()));
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each retry.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            backoff: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientMode {
    Live,
    Offline,
}

/// Holds the *name* of the credential environment variable, never its value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub mode: ClientMode,
    pub base_url: String,
    pub credential_env: Option<String>,
    pub rate_limit_per_minute: u32,
    pub retry: RetryPolicy,
    pub fixture_dir: Option<PathBuf>,
    pub parallelism: usize,
}

impl ClientConfig {
    pub fn offline(fixture_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: ClientMode::Offline,
            base_url: String::new(),
            credential_env: None,
            rate_limit_per_minute: 60,
            retry: RetryPolicy::default(),
            fixture_dir: Some(fixture_dir.into()),
            parallelism: 4,
        }
    }

    pub fn live(base_url: impl Into<String>, credential_env: Option<String>) -> Self {
        Self {
            mode: ClientMode::Live,
            base_url: base_url.into(),
            credential_env,
            rate_limit_per_minute: 4,
            retry: RetryPolicy::default(),
            fixture_dir: None,
            parallelism: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_limit_per_minute == 0 {
            return Err(ClientError::Config("rate limit must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ClientError::Config("max_attempts must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(ClientError::Config("parallelism must be at least 1".into()));
        }
        match self.mode {
            ClientMode::Offline if self.fixture_dir.is_none() => {
                Err(ClientError::Config("offline mode needs a fixture directory".into()))
            }
            ClientMode::Live if self.base_url.is_empty() => {
                Err(ClientError::Config("live mode needs a base url".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Spaces request starts at least `60 / rate` seconds apart.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        Self {
            interval: Duration::from_secs(60) / per_minute,
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Scanner report: engines flagging the sample and their family strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub sha256: String,
    pub positives: u32,
    #[serde(default)]
    pub families: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ListingPage {
    samples: Vec<IndexRow>,
    #[serde(default)]
    next_page: Option<u32>,
}

pub struct Client {
    config: ClientConfig,
    agent: Option<ureq::Agent>,
    limiter: RateLimiter,
    attempts: AtomicUsize,
    fetches: AtomicUsize,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

enum Fetched {
    Body(Vec<u8>),
    NotFound,
}

impl Client {
    pub fn new(config: ClientConfig) -> Result<Self> {
        config.validate()?;
        let agent = (config.mode == ClientMode::Live).then(|| {
            ureq::Agent::new_with_config(
                ureq::Agent::config_builder()
                    .http_status_as_error(false)
                    .timeout_global(Some(Duration::from_secs(120)))
                    .build(),
            )
        });
        Ok(Self {
            limiter: RateLimiter::new(config.rate_limit_per_minute),
            config,
            agent,
            attempts: AtomicUsize::new(0),
            fetches: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// HTTP requests sent (including retries).
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    /// Sample bodies fetched from the repository or fixtures.
    pub fn fetches(&self) -> usize {
        self.fetches.load(Ordering::Relaxed)
    }

    fn fixture(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.fixture_dir.as_deref().unwrap_or(Path::new(".")).join(rel)
    }

    fn credential(&self) -> Result<Option<String>> {
        match &self.config.credential_env {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| ClientError::AuthFailure(format!("environment variable `{name}` is not set"))),
        }
    }

    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<Fetched> {
        let agent = self.agent.as_ref().expect("live client");
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let credential = self.credential()?;
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.acquire();
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let mut req = agent.get(&url);
            for (k, v) in query {
                req = req.query(k, v);
            }
            if let Some(key) = &credential {
                req = req.header(API_KEY_HEADER, key);
            }
            let mut resp = req.call().map_err(|e| ClientError::Http(e.to_string()))?;
            let status = resp.status().as_u16();
            debug!("GET {url} -> {status} (attempt {attempt})");
            match status {
                200..=299 => {
                    let body = resp
                        .body_mut()
                        .with_config()
                        .limit(MAX_BODY_BYTES)
                        .read_to_vec()
                        .map_err(|e| ClientError::Http(e.to_string()))?;
                    return Ok(Fetched::Body(body));
                }
                404 => return Ok(Fetched::NotFound),
                401 | 403 => {
                    let name = self.config.credential_env.as_deref().unwrap_or("<none>");
                    return Err(ClientError::AuthFailure(format!(
                        "server rejected the credential from `{name}` ({status})"
                    )));
                }
                429 | 500..=599 if attempt < policy.max_attempts => {
                    let delay = policy.backoff * 2u32.saturating_pow(attempt - 1);
                    warn!("GET {url} -> {status}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
                429 => return Err(ClientError::RateLimited { attempts: attempt }),
                other => return Err(ClientError::Http(format!("GET {url} returned status {other}"))),
            }
        }
    }

    fn get_json<T: for<'de> Deserialize<'de>>(&self, path: &str, query: &[(&str, String)]) -> Result<Option<T>> {
        match self.get(path, query)? {
            Fetched::NotFound => Ok(None),
            Fetched::Body(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| ClientError::BadResponse(format!("{path}: {e}"))),
        }
    }

    /// Samples matching `filter`: the fixture `index.csv` offline, the
    /// paged `samples` listing live.
    pub fn fetch_sample_list(&self, filter: &SampleFilter) -> Result<Vec<SampleDescriptor>> {
        let all = match self.config.mode {
            ClientMode::Offline => read_index(&self.fixture("index.csv"))?,
            ClientMode::Live => {
                let mut out = Vec::new();
                let mut page = 1u32;
                loop {
                    let mut query = filter.query();
                    query.push(("page", page.to_string()));
                    let listing: ListingPage = self
                        .get_json("samples", &query)?
                        .ok_or_else(|| ClientError::BadResponse("sample listing not found".into()))?;
                    for row in listing.samples {
                        out.push(row.into_descriptor(out.len() as u64 + 1)?);
                    }
                    match listing.next_page {
                        Some(n) if n > page => page = n,
                        _ => break,
                    }
                }
                out
            }
        };
        Ok(all.into_iter().filter(|d| filter.matches(d)).collect())
    }

    fn fetch_bytes(&self, d: &SampleDescriptor) -> Result<Vec<u8>> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        match self.config.mode {
            ClientMode::Offline => {
                let name = d.filename.clone().unwrap_or_else(|| format!("{}.apk", d.sha256));
                std::fs::read(self.fixture(Path::new("apks").join(name))).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => ClientError::NotFound(d.sha256.clone()),
                    _ => e.into(),
                })
            }
            ClientMode::Live => match self.get(&format!("samples/{}/download", d.sha256), &[])? {
                Fetched::Body(b) => Ok(b),
                Fetched::NotFound => Err(ClientError::NotFound(d.sha256.clone())),
            },
        }
    }

    /// Stores the sample under its hash; a stored sample is not fetched again.
    pub fn download_sample(&self, store: &SampleStore, d: &SampleDescriptor) -> Result<PathBuf> {
        validate_hash(&d.sha256)?;
        if store.contains(&d.sha256) {
            debug!("cache hit for {}", d.sha256);
            return Ok(store.path_for(&d.sha256));
        }
        let bytes = self.fetch_bytes(d)?;
        store.put(&d.sha256, &bytes)
    }

    /// Downloads with up to `config.parallelism` workers; results follow
    /// input order.
    pub fn download_all(&self, store: &SampleStore, samples: &[SampleDescriptor]) -> Vec<Result<PathBuf>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<PathBuf>>>> = samples.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.config.parallelism.min(samples.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(d) = samples.get(i) else { break };
                    let r = self.download_sample(store, d);
                    *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every index visited")
            })
            .collect()
    }

    pub fn scan_report(&self, hash: &str) -> Result<ScanReport> {
        validate_hash(hash)?;
        let report: Option<ScanReport> = match self.config.mode {
            ClientMode::Offline => {
                let path = self.fixture(Path::new("reports").join(format!("{hash}.json")));
                match std::fs::read(&path) {
                    Ok(b) => Some(
                        serde_json::from_slice(&b)
                            .map_err(|e| ClientError::BadResponse(format!("{}: {e}", path.display())))?,
                    ),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                    Err(e) => return Err(e.into()),
                }
            }
            ClientMode::Live => self.get_json(&format!("reports/{hash}"), &[])?,
        };
        report.ok_or_else(|| ClientError::UnknownHash(hash.to_string()))
    }

    /// Verdict and, for malware, the canonical category.
    pub fn label_sample(&self, aliases: &AliasTable, hash: &str) -> Result<(Verdict, Option<Category>)> {
        aliases.classify(&self.scan_report(hash)?)
    }
}
