//! Breadth-first crawl of a street-view panorama link graph and the on-disk
//! catalog the crawl produces.
//!
//! Providers abstract the street-view platform. The crawler only ever sees
//! [`PanoramaMeta`] records; image payloads are fetched separately and never
//! enter the catalog.
//!
//! The catalog file is newline-delimited JSON: a header object followed by
//! one object per panorama in BFS discovery order.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::atomic_write;
use crate::geodesy::{Datum, GeoPoint, GeodesyError, TaggedPoint};

pub const CATALOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("panorama {0:?} not found")]
    NotFound(String),
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("malformed provider response for {pano_id:?}: {message}")]
    Malformed { pano_id: String, message: String },
}

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("none of the seeds could be fetched")]
    EmptyCrawl,
    #[error("invalid crawl input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported catalog schema_version {found} (expected {CATALOG_SCHEMA_VERSION})")]
    Version { found: u64 },
    #[error("catalog line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("panorama {pano_id:?} is tagged {found}, catalog is {expected}")]
    DatumMismatch {
        pano_id: String,
        expected: Datum,
        found: Datum,
    },
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaMeta {
    pub pano_id: String,
    pub position: GeoPoint,
    pub datum: Datum,
    pub capture_time: Option<DateTime<Utc>>,
    pub heading_deg: Option<f64>,
    pub links: Vec<String>,
}

impl PanoramaMeta {
    /// Applies the ingest rules: self-links and duplicate links are dropped
    /// (first occurrence wins) and capture time is truncated to seconds.
    pub fn normalized(mut self) -> Self {
        let mut seen = HashSet::new();
        let own = self.pano_id.clone();
        self.links.retain(|l| *l != own && seen.insert(l.clone()));
        self.capture_time = self.capture_time.map(|t| t.trunc_subsecs(0));
        self
    }

    fn from_line(rec: RecordLine, datum: Datum) -> Self {
        PanoramaMeta {
            pano_id: rec.pano_id,
            position: GeoPoint::new(rec.lng, rec.lat),
            datum,
            capture_time: rec.capture_time,
            heading_deg: rec.heading_deg,
            links: rec.links,
        }
    }

    fn to_line(&self) -> RecordLine {
        RecordLine {
            pano_id: self.pano_id.clone(),
            lng: self.position.lng,
            lat: self.position.lat,
            capture_time: self.capture_time,
            heading_deg: self.heading_deg,
            links: self.links.clone(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.pano_id.is_empty() {
            return Err("empty pano_id".into());
        }
        self.position.validate().map_err(|e| e.to_string())?;
        if let Some(h) = self.heading_deg {
            if !(0.0..=360.0).contains(&h) {
                return Err(format!("heading_deg {h} outside [0, 360]"));
            }
        }
        if self.links.iter().any(|l| *l == self.pano_id) {
            return Err("record links to itself".into());
        }
        let mut seen = HashSet::new();
        if !self.links.iter().all(|l| seen.insert(l)) {
            return Err("duplicate link".into());
        }
        Ok(())
    }
}

/// Wire form of one panorama record (catalog lines and fixture files).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    pano_id: String,
    lng: f64,
    lat: f64,
    capture_time: Option<DateTime<Utc>>,
    heading_deg: Option<f64>,
    links: Vec<String>,
}

/// Axis-aligned crawl region, inclusive on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min_lng: f64,
    pub min_lat: f64,
    pub max_lng: f64,
    pub max_lat: f64,
    pub datum: Datum,
}

impl Region {
    pub fn new(bbox: [f64; 4], datum: Datum) -> Result<Self, CrawlError> {
        let [min_lng, min_lat, max_lng, max_lat] = bbox;
        if !bbox.iter().all(|v| v.is_finite()) || min_lng >= max_lng || min_lat >= max_lat {
            return Err(CrawlError::InvalidInput(format!(
                "region {bbox:?} must have min < max on both axes"
            )));
        }
        Ok(Self {
            min_lng,
            min_lat,
            max_lng,
            max_lat,
            datum,
        })
    }

    pub fn bbox(&self) -> [f64; 4] {
        [self.min_lng, self.min_lat, self.max_lng, self.max_lat]
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lng..=self.max_lng).contains(&p.lng) && (self.min_lat..=self.max_lat).contains(&p.lat)
    }

    /// Membership test for a point expressed in any datum.
    pub fn contains_tagged(&self, p: TaggedPoint) -> Result<bool, GeodesyError> {
        Ok(self.contains(p.to_datum(self.datum)?.point))
    }
}

/// Street-view metadata source. Implementations must be safe to call from
/// several crawl workers at once.
pub trait PanoramaProvider: Sync {
    fn name(&self) -> String;
    fn fetch_metadata(&self, pano_id: &str) -> Result<PanoramaMeta, ProviderError>;
}

/// Reads `<dir>/<pano_id>.json` files holding one record each.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dir: PathBuf,
    datum: Datum,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>, datum: Datum) -> Self {
        Self {
            dir: dir.into(),
            datum,
        }
    }

    /// Writes fixture files for the given records (used to build fixture sets).
    pub fn write_fixture(dir: &Path, records: &[PanoramaMeta]) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for r in records {
            let mut bytes = serde_json::to_vec(&r.to_line()).map_err(io::Error::other)?;
            bytes.push(b'\n');
            atomic_write(&dir.join(format!("{}.json", r.pano_id)), &bytes)?;
        }
        Ok(())
    }
}

impl PanoramaProvider for FixtureProvider {
    fn name(&self) -> String {
        format!("fixture:{}", self.dir.display())
    }

    fn fetch_metadata(&self, pano_id: &str) -> Result<PanoramaMeta, ProviderError> {
        if pano_id.is_empty() || pano_id.contains(['/', '\\']) || pano_id.starts_with('.') {
            return Err(ProviderError::NotFound(pano_id.to_string()));
        }
        let path = self.dir.join(format!("{pano_id}.json"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ProviderError::NotFound(pano_id.to_string()))
            }
            Err(e) => return Err(ProviderError::Transient(e.to_string())),
        };
        let malformed = |message: String| ProviderError::Malformed {
            pano_id: pano_id.to_string(),
            message,
        };
        let rec: RecordLine = serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
        if rec.pano_id != pano_id {
            return Err(malformed(format!("file holds record for {:?}", rec.pano_id)));
        }
        let meta = PanoramaMeta::from_line(rec, self.datum).normalized();
        meta.check().map_err(malformed)?;
        Ok(meta)
    }
}

/// In-memory provider keyed by pano id.
#[derive(Debug, Clone, Default)]
pub struct MemoryProvider {
    records: BTreeMap<String, PanoramaMeta>,
}

impl MemoryProvider {
    pub fn new(records: impl IntoIterator<Item = PanoramaMeta>) -> Self {
        Self {
            records: records
                .into_iter()
                .map(|r| (r.pano_id.clone(), r))
                .collect(),
        }
    }
}

impl PanoramaProvider for MemoryProvider {
    fn name(&self) -> String {
        "memory".to_string()
    }

    fn fetch_metadata(&self, pano_id: &str) -> Result<PanoramaMeta, ProviderError> {
        self.records
            .get(pano_id)
            .cloned()
            .map(PanoramaMeta::normalized)
            .ok_or_else(|| ProviderError::NotFound(pano_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrawlLimits {
    pub max_nodes: usize,
    pub max_depth: usize,
    pub max_retries: usize,
    /// Upper bound on concurrent provider calls.
    pub max_in_flight: usize,
    /// Minimum spacing between the starts of consecutive provider calls.
    pub min_interval: Duration,
}

impl Default for CrawlLimits {
    fn default() -> Self {
        Self {
            max_nodes: 100_000,
            max_depth: 10_000,
            max_retries: 3,
            max_in_flight: 4,
            min_interval: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub pano_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub datum: Datum,
    pub seeds: Vec<String>,
    pub region: Region,
    pub provider: String,
    pub crawled_at: Option<DateTime<Utc>>,
    /// Datum the positions were crawled in, set once they have been converted.
    pub source_datum: Option<Datum>,
    pub records: Vec<PanoramaMeta>,
    /// Out-of-region panoramas seen during the crawl, in discovery order.
    pub boundary: Vec<String>,
    pub skipped: Vec<SkipRecord>,
}

impl Catalog {
    pub fn new(datum: Datum, seeds: Vec<String>, region: Region, provider: String) -> Self {
        Self {
            datum,
            seeds,
            region,
            provider,
            crawled_at: None,
            source_datum: None,
            records: Vec::new(),
            boundary: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn get(&self, pano_id: &str) -> Option<&PanoramaMeta> {
        self.records.iter().find(|r| r.pano_id == pano_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.pano_id.as_str())
    }
}

struct RateLimiter {
    interval: Duration,
    next_start: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn wait_turn(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next_start.lock().unwrap();
            let now = Instant::now();
            let start = next.map_or(now, |n| n.max(now));
            *next = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

fn fetch_with_retries(
    provider: &dyn PanoramaProvider,
    limiter: &RateLimiter,
    pano_id: &str,
    max_retries: usize,
) -> Result<PanoramaMeta, ProviderError> {
    let mut attempt = 0;
    loop {
        limiter.wait_turn();
        match provider.fetch_metadata(pano_id) {
            Err(ProviderError::Transient(msg)) if attempt < max_retries => {
                log::debug!("retrying {pano_id} after transient error: {msg}");
                attempt += 1;
            }
            other => return other.map(PanoramaMeta::normalized),
        }
    }
}

/// Breadth-first crawl from `seeds`, expanding only panoramas inside `region`.
///
/// Fetches for the head of the FIFO frontier are issued concurrently (up to
/// `limits.max_in_flight`) but their results are applied in frontier order,
/// so the catalog is identical to a sequential crawl.
pub fn crawl(
    seeds: &[String],
    region: &Region,
    provider: &dyn PanoramaProvider,
    limits: &CrawlLimits,
) -> Result<Catalog, CrawlError> {
    if seeds.is_empty() {
        return Err(CrawlError::InvalidInput("at least one seed is required".into()));
    }
    if limits.max_nodes == 0 || limits.max_in_flight == 0 {
        return Err(CrawlError::InvalidInput(
            "max_nodes and max_in_flight must be positive".into(),
        ));
    }

    let limiter = RateLimiter {
        interval: limits.min_interval,
        next_start: Mutex::new(None),
    };
    let mut visited: HashSet<String> = HashSet::new();
    let mut frontier: VecDeque<(String, usize)> = VecDeque::new();
    let mut unique_seeds = Vec::new();
    for s in seeds {
        if visited.insert(s.clone()) {
            unique_seeds.push(s.clone());
            frontier.push_back((s.clone(), 0));
        }
    }

    let mut records: Vec<PanoramaMeta> = Vec::new();
    let mut boundary = Vec::new();
    let mut skipped = Vec::new();
    let mut datum = None;
    let mut seed_fetched = false;

    'crawl: while !frontier.is_empty() {
        let batch: Vec<(String, usize)> = frontier
            .drain(..limits.max_in_flight.min(frontier.len()))
            .collect();
        let results: Vec<_> = thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|(id, _)| {
                    let limiter = &limiter;
                    scope.spawn(move || fetch_with_retries(provider, limiter, id, limits.max_retries))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch worker panicked")).collect()
        });

        for ((id, depth), result) in batch.into_iter().zip(results) {
            let meta = match result {
                Ok(meta) => meta,
                Err(err) => {
                    log::warn!("skipping panorama {id}: {err}");
                    let reason = match err {
                        ProviderError::NotFound(_) => "not_found".to_string(),
                        ProviderError::Transient(m) => format!("transient: {m}"),
                        ProviderError::Malformed { message, .. } => format!("malformed: {message}"),
                    };
                    skipped.push(SkipRecord { pano_id: id, reason });
                    continue;
                }
            };
            if depth == 0 {
                seed_fetched = true;
            }
            let expected = *datum.get_or_insert(meta.datum);
            if meta.datum != expected {
                return Err(CrawlError::Geodesy(GeodesyError::DatumMismatch {
                    expected,
                    found: meta.datum,
                }));
            }
            if !region.contains_tagged(TaggedPoint::new(meta.position, meta.datum))? {
                boundary.push(id);
                continue;
            }
            if depth < limits.max_depth {
                for link in &meta.links {
                    if visited.insert(link.clone()) {
                        frontier.push_back((link.clone(), depth + 1));
                    }
                }
            }
            records.push(meta);
            if records.len() >= limits.max_nodes {
                break 'crawl;
            }
        }
    }

    if !seed_fetched {
        return Err(CrawlError::EmptyCrawl);
    }
    let mut catalog = Catalog::new(
        datum.unwrap_or(region.datum),
        unique_seeds,
        *region,
        provider.name(),
    );
    catalog.records = records;
    catalog.boundary = boundary;
    catalog.skipped = skipped;
    Ok(catalog)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    schema_version: u64,
    datum: Datum,
    seeds: Vec<String>,
    region: [f64; 4],
    #[serde(default)]
    region_datum: Option<Datum>,
    #[serde(default)]
    provider: String,
    #[serde(default)]
    crawled_at: Option<DateTime<Utc>>,
    #[serde(default)]
    source_datum: Option<Datum>,
    #[serde(default)]
    boundary: Vec<String>,
    #[serde(default)]
    skipped: Vec<SkipRecord>,
}

/// Serializes the catalog to its newline-delimited form.
pub fn catalog_to_string(catalog: &Catalog) -> Result<String, CatalogError> {
    let header = HeaderLine {
        schema_version: CATALOG_SCHEMA_VERSION as u64,
        datum: catalog.datum,
        seeds: catalog.seeds.clone(),
        region: catalog.region.bbox(),
        region_datum: Some(catalog.region.datum),
        provider: catalog.provider.clone(),
        crawled_at: catalog.crawled_at,
        source_datum: catalog.source_datum,
        boundary: catalog.boundary.clone(),
        skipped: catalog.skipped.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &catalog.records {
        if r.datum != catalog.datum {
            return Err(CatalogError::DatumMismatch {
                pano_id: r.pano_id.clone(),
                expected: catalog.datum,
                found: r.datum,
            });
        }
        let _ = writeln!(out, "{}", serde_json::to_string(&r.to_line()).expect("record serializes"));
    }
    Ok(out)
}

pub fn catalog_save(catalog: &Catalog, path: &Path) -> Result<(), CatalogError> {
    let text = catalog_to_string(catalog)?;
    atomic_write(path, text.as_bytes()).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn catalog_from_str(text: &str) -> Result<Catalog, CatalogError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(CatalogError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| CatalogError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == CATALOG_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(CatalogError::Version { found: v }),
        None => {
            return Err(CatalogError::Parse {
                line: 1,
                message: "header lacks an integer schema_version".into(),
            })
        }
    }
    let header: HeaderLine = serde_json::from_value(raw).map_err(|e| CatalogError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let region = Region::new(header.region, header.region_datum.unwrap_or(header.datum)).map_err(
        |e| CatalogError::Parse {
            line: 1,
            message: e.to_string(),
        },
    )?;

    let mut catalog = Catalog::new(header.datum, header.seeds, region, header.provider);
    catalog.crawled_at = header.crawled_at;
    catalog.source_datum = header.source_datum;
    catalog.boundary = header.boundary;
    catalog.skipped = header.skipped;

    let mut ids = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| CatalogError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let meta = PanoramaMeta::from_line(rec, header.datum);
        meta.check().map_err(|message| CatalogError::Parse {
            line: line_no,
            message,
        })?;
        if !ids.insert(meta.pano_id.clone()) {
            return Err(CatalogError::Parse {
                line: line_no,
                message: format!("duplicate pano_id {:?}", meta.pano_id),
            });
        }
        catalog.records.push(meta);
    }
    Ok(catalog)
}

pub fn catalog_load(path: &Path) -> Result<Catalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    catalog_from_str(&text)
}

/// Converts every position to WGS-84, remembering the original datum.
pub fn catalog_to_wgs84(catalog: &Catalog) -> Result<Catalog, CatalogError> {
    let mut out = catalog.clone();
    for r in &mut out.records {
        if r.datum != catalog.datum {
            return Err(CatalogError::DatumMismatch {
                pano_id: r.pano_id.clone(),
                expected: catalog.datum,
                found: r.datum,
            });
        }
        r.position = TaggedPoint::new(r.position, r.datum)
            .to_datum(Datum::Wgs84)?
            .point;
        r.datum = Datum::Wgs84;
    }
    out.datum = Datum::Wgs84;
    out.source_datum = Some(catalog.source_datum.unwrap_or(catalog.datum));
    Ok(out)
}
