//! Keyword-driven image acquisition from a search endpoint.
//!
//! The endpoint is a URL template with `{keyword}` and `{limit}` placeholders
//! that answers `{"results": [{"url": ..., "id": ...}]}` in relevance order.
//! Downloads are content-addressed under `images/<keyword>/<sha256>.<ext>` and
//! recorded in an append-only JSON-lines manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qfilter::QualityVerdict;

pub const TOKEN_ENV: &str = "PROXYFORGE_API_TOKEN";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Fetched,
    Rejected,
}

/// Quality gate outcome recorded by the filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub blur_score: f64,
    pub mean_sat: f64,
    pub mean_val: f64,
    pub accepted: bool,
    pub reason: Option<String>,
}

impl From<&QualityVerdict> for QualityRecord {
    fn from(v: &QualityVerdict) -> Self {
        Self {
            blur_score: v.blur_score,
            mean_sat: v.mean_sat,
            mean_val: v.mean_val,
            accepted: v.accepted,
            reason: v.reason.map(|r| r.as_str().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub keyword: String,
    pub url: String,
    /// Relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityRecord>,
}

impl ManifestEntry {
    pub fn is_fetched(&self) -> bool {
        self.status == EntryStatus::Fetched
    }

    /// Fetched and, if a quality verdict exists, accepted.
    pub fn is_usable(&self) -> bool {
        self.is_fetched() && self.quality.as_ref().is_none_or(|q| q.accepted)
    }

    /// Short stable identifier derived from the content hash.
    pub fn id(&self) -> Option<String> {
        self.content_hash.as_ref().map(|h| h[..16.min(h.len())].to_string())
    }

    fn rejected(keyword: &str, url: &str, reason: impl Into<String>) -> Self {
        Self {
            keyword: keyword.to_string(),
            url: url.to_string(),
            local_path: None,
            content_hash: None,
            status: EntryStatus::Rejected,
            reason: Some(reason.into()),
            quality: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrawlManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CrawlManifest {
    pub fn fetched(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_fetched())
    }

    /// Reads a JSON-lines manifest; a trailing partial line (from an
    /// interrupted writer) is skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let lines: Vec<String> = std::io::BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => entries.push(e),
                Err(_) if i == last => log::warn!("{}: skipping truncated final line", path.display()),
                Err(e) => return Err(Error::corrupt(path, format!("line {}: {e}", i + 1))),
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).expect("plain data"));
            text.push('\n');
        }
        crate::maps::write_atomic(path, text.as_bytes())
    }
}

/// Union of manifests with global dedup by content hash, ordered by
/// (keyword, hash). Entries without a hash are kept once each, after the
/// hashed entries of their keyword.
pub fn merge_manifests(parts: &[CrawlManifest]) -> Result<CrawlManifest> {
    let mut by_hash: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    let mut unhashed: Vec<ManifestEntry> = Vec::new();
    for entry in parts.iter().flat_map(|p| &p.entries) {
        match &entry.content_hash {
            Some(h) => match by_hash.get(h) {
                Some(prev) if prev.local_path != entry.local_path => {
                    return Err(Error::ManifestConflict {
                        hash: h.clone(),
                        first: prev.local_path.clone().unwrap_or_default(),
                        second: entry.local_path.clone().unwrap_or_default(),
                    })
                }
                Some(_) => {}
                None => {
                    by_hash.insert(h.clone(), entry.clone());
                }
            },
            None => {
                if !unhashed.contains(entry) {
                    unhashed.push(entry.clone());
                }
            }
        }
    }
    let mut entries: Vec<ManifestEntry> = by_hash.into_values().collect();
    entries.extend(unhashed);
    entries.sort_by(|a, b| {
        (&a.keyword, a.content_hash.is_none(), &a.content_hash, &a.url)
            .cmp(&(&b.keyword, b.content_hash.is_none(), &b.content_hash, &b.url))
    });
    Ok(CrawlManifest { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrawlConfig {
    /// Search URL with `{keyword}` and `{limit}` placeholders.
    pub endpoint: String,
    pub limit: usize,
    pub workers: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            limit: 2000,
            workers: 8,
            max_retries: 5,
            backoff_ms: 500,
            timeout_secs: 30,
        }
    }
}

#[derive(Deserialize)]
struct SearchResponse {
    results: Vec<SearchResult>,
}

#[derive(Deserialize)]
struct SearchResult {
    url: String,
}

enum Fetch {
    Ok(Vec<u8>),
    Failed(String),
}

struct Client {
    agent: ureq::Agent,
    token: Option<String>,
    config: CrawlConfig,
}

impl Client {
    fn new(config: &CrawlConfig, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            token,
            config: config.clone(),
        }
    }

    /// GET with exponential backoff on 429 and 5xx. Authentication failures
    /// abort; other client errors are reported as failed fetches.
    fn get(&self, url: &str) -> Result<Fetch> {
        let mut attempt = 0;
        loop {
            let mut req = self.agent.get(url);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            let outcome = match req.call() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => {
                            return Ok(match resp.body_mut().with_config().limit(256 << 20).read_to_vec() {
                                Ok(b) => Fetch::Ok(b),
                                Err(e) => Fetch::Failed(format!("body: {e}")),
                            })
                        }
                        401 | 403 => {
                            return Err(Error::Auth {
                                endpoint: url.to_string(),
                                status,
                            })
                        }
                        429 | 500..=599 => format!("HTTP {status}"),
                        _ => return Ok(Fetch::Failed(format!("HTTP {status}"))),
                    }
                }
                Err(e) => format!("transport: {e}"),
            };
            if attempt >= self.config.max_retries {
                return Ok(Fetch::Failed(outcome));
            }
            let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
            log::debug!("{url}: {outcome}, retrying in {wait} ms");
            std::thread::sleep(Duration::from_millis(wait));
            attempt += 1;
        }
    }
}

fn search_url(template: &str, keyword: &str, limit: usize) -> String {
    let kw: String = url::form_urlencoded::byte_serialize(keyword.as_bytes()).collect();
    template.replace("{keyword}", &kw).replace("{limit}", &limit.to_string())
}

fn sniff_extension(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Pnm) => "pnm",
        Ok(image::ImageFormat::Jpeg) => "jpg",
        Ok(image::ImageFormat::Gif) => "gif",
        Ok(image::ImageFormat::WebP) => "webp",
        _ => "bin",
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Crawls one keyword into `out_dir`, appending to `out_dir/manifest.jsonl`.
/// Entries already in the manifest are reused: their URLs are not fetched
/// again and their hashes count for dedup. Returns the entries added by this
/// run.
pub fn crawl_keyword(
    keyword: &str,
    config: &CrawlConfig,
    token: Option<String>,
    out_dir: &Path,
) -> Result<CrawlManifest> {
    if config.limit == 0 {
        return Err(Error::InvalidInput("crawl limit must be at least 1".into()));
    }
    if config.workers == 0 {
        return Err(Error::InvalidInput("crawl needs at least one worker".into()));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let existing = if manifest_path.exists() {
        CrawlManifest::load(&manifest_path)?
    } else {
        CrawlManifest::default()
    };
    let mut seen_hashes: HashSet<String> = existing
        .fetched()
        .filter_map(|e| e.content_hash.clone())
        .collect();
    let known_urls: HashMap<&str, &ManifestEntry> = existing
        .entries
        .iter()
        .filter(|e| e.keyword == keyword)
        .map(|e| (e.url.as_str(), e))
        .collect();
    let mut fetched = existing
        .fetched()
        .filter(|e| e.keyword == keyword)
        .count();

    let client = Client::new(config, token);
    let search = search_url(&config.endpoint, keyword, config.limit);
    let body = match client.get(&search)? {
        Fetch::Ok(b) => b,
        Fetch::Failed(reason) => return Err(Error::Network(format!("{search}: {reason}"))),
    };
    let results: SearchResponse = serde_json::from_slice(&body)
        .map_err(|e| Error::Network(format!("{search}: malformed search response: {e}")))?;
    let pending: Vec<String> = results
        .results
        .into_iter()
        .map(|r| r.url)
        .filter(|u| !known_urls.contains_key(u.as_str()))
        .collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut writer = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let mut added = CrawlManifest::default();
    for chunk in pending.chunks(config.workers) {
        if fetched >= config.limit {
            break;
        }
        let downloads: Vec<Result<Fetch>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|u| s.spawn(|| client.get(u))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("download worker panicked"))
                .collect()
        });
        for (url, download) in chunk.iter().zip(downloads) {
            if fetched >= config.limit {
                break;
            }
            let entry = match download? {
                Fetch::Failed(reason) => ManifestEntry::rejected(keyword, url, reason),
                Fetch::Ok(bytes) => {
                    let hash = sha256_hex(&bytes);
                    if seen_hashes.contains(&hash) {
                        let mut e = ManifestEntry::rejected(keyword, url, "duplicate");
                        e.content_hash = Some(hash);
                        e
                    } else {
                        let rel = PathBuf::from("images")
                            .join(keyword)
                            .join(format!("{hash}.{}", sniff_extension(&bytes)));
                        let abs = out_dir.join(&rel);
                        crate::maps::write_atomic(&abs, &bytes)?;
                        seen_hashes.insert(hash.clone());
                        fetched += 1;
                        ManifestEntry {
                            keyword: keyword.to_string(),
                            url: url.clone(),
                            local_path: Some(rel),
                            content_hash: Some(hash),
                            status: EntryStatus::Fetched,
                            reason: None,
                            quality: None,
                        }
                    }
                }
            };
            let line = serde_json::to_string(&entry).expect("plain data");
            writeln!(writer, "{line}")
                .and_then(|_| writer.flush())
                .map_err(|e| Error::io(&manifest_path, e))?;
            added.entries.push(entry);
        }
    }
    Ok(added)
}
