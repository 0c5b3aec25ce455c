//! Pipeline stages behind the `laneforge` command.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::Utc;
use laneforge::atomic_write;
use laneforge::basemap::{build_graph, parse_osm, EdgeId, RoadGraph};
use laneforge::laneio::{evaluate_detections, read_annotations, read_detections, LaneIoError};
use laneforge::matching::{
    build_tracks, match_tracks, matches_from_str, matches_to_string, split_at_junctions, tracks_from_str,
    tracks_to_string, MatchError,
};
use laneforge::netgen::{build_network, export_geojson, export_sim_xml, fuse_lane_counts, FusedCount, LaneLevelNetwork};
use laneforge::svcrawl::{catalog_load, catalog_save, catalog_to_wgs84, crawl, CatalogError, FixtureProvider};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{Overrides, PipelineConfig};

pub const CATALOG: &str = "catalog.jsonl";
pub const CATALOG_WGS84: &str = "catalog_wgs84.jsonl";
pub const TRACKS: &str = "tracks.jsonl";
pub const MATCHES: &str = "matches.jsonl";
pub const LANE_COUNTS: &str = "lane_counts.json";
pub const NETWORK: &str = "network.json";
pub const GEOJSON: &str = "network.geojson";
pub const SIM_XML: &str = "network.sim.xml";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";

/// Every artifact a run can produce, in stage order.
pub const ARTIFACTS: [&str; 9] = [CATALOG, CATALOG_WGS84, TRACKS, MATCHES, LANE_COUNTS, NETWORK, GEOJSON, SIM_XML, METRICS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad invocation, configuration, or missing stage inputs.
    Usage,
    /// Input data that fails parsing or validation.
    Data,
    Io,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineError {
    #[serde(rename = "error")]
    pub kind: ErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<&'static str>,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

impl PipelineError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            stage: None,
            message: message.into(),
            path: None,
            line: None,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.display().to_string());
        self
    }

    pub fn with_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }

    fn in_stage(mut self, stage: Stage) -> Self {
        self.stage.get_or_insert(stage.name());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Io => 3,
        }
    }

    /// One-line JSON record for standard error.
    pub fn record(&self) -> String {
        serde_json::to_string(self).expect("error record serializes")
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for PipelineError {}

fn lane_io(e: LaneIoError, path: &Path) -> PipelineError {
    match e {
        LaneIoError::Io { source, .. } => PipelineError::io(source.to_string()).with_path(path),
        LaneIoError::Parse { line, message } => PipelineError::data(message).with_path(path).with_line(line),
        other => PipelineError::data(other.to_string()).with_path(path),
    }
}

fn catalog_err(e: CatalogError, path: &Path) -> PipelineError {
    match e {
        CatalogError::Io { source, .. } => PipelineError::io(source.to_string()).with_path(path),
        CatalogError::Parse { line, message } => PipelineError::data(message).with_path(path).with_line(line),
        other => PipelineError::data(other.to_string()).with_path(path),
    }
}

fn match_err(e: MatchError, path: &Path) -> PipelineError {
    match e {
        MatchError::Parse { line, message } => PipelineError::data(message).with_path(path).with_line(line),
        other => PipelineError::data(other.to_string()).with_path(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Crawl,
    Transform,
    Tracks,
    Match,
    Fuse,
    Build,
    Export,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Crawl,
        Stage::Transform,
        Stage::Tracks,
        Stage::Match,
        Stage::Fuse,
        Stage::Build,
        Stage::Export,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Crawl => "crawl",
            Stage::Transform => "transform",
            Stage::Tracks => "tracks",
            Stage::Match => "match",
            Stage::Fuse => "fuse",
            Stage::Build => "build",
            Stage::Export => "export",
            Stage::Eval => "eval",
        }
    }

    /// The stage that writes `artifact`.
    fn producer(artifact: &str) -> &'static str {
        match artifact {
            CATALOG => "crawl",
            CATALOG_WGS84 => "transform",
            TRACKS => "tracks",
            MATCHES => "match",
            LANE_COUNTS => "fuse",
            NETWORK => "build",
            _ => "export",
        }
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
}

impl Run<'_> {
    fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.run_dir.join(name)
    }

    /// An upstream artifact that must already exist.
    fn input(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.artifact(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::config(format!(
                "missing {name}; run the '{}' stage first",
                Stage::producer(name)
            ))
            .with_path(&p))
        }
    }

    /// A file named in the configuration that must exist.
    fn configured(&self, path: &Path, what: &str) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path.to_path_buf())
        } else {
            Err(PipelineError::config(format!("{what} not found")).with_path(path))
        }
    }

    fn read(&self, path: &Path) -> Result<String, PipelineError> {
        std::fs::read_to_string(path).map_err(|e| PipelineError::io(e.to_string()).with_path(path))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.artifact(name);
        atomic_write(&p, bytes).map_err(|e| PipelineError::io(e.to_string()).with_path(&p))
    }

    fn graph(&self) -> Result<RoadGraph, PipelineError> {
        let path = self.configured(&self.cfg.osm, "OSM extract")?;
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(e.to_string()).with_path(&path))?;
        let doc = parse_osm(&bytes).map_err(|e| PipelineError::data(e.to_string()).with_path(&path))?;
        Ok(build_graph(&doc))
    }

    fn tracks(&self) -> Result<Vec<laneforge::matching::ObservationTrack>, PipelineError> {
        let p = self.input(TRACKS)?;
        tracks_from_str(&self.read(&p)?).map_err(|e| match_err(e, &p))
    }

    fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        match stage {
            Stage::Crawl => {
                let dir = self.configured(&cfg.fixture_dir(), "provider fixture directory")?;
                let provider = FixtureProvider::new(dir, cfg.datum);
                let mut catalog = crawl(&cfg.seeds, &cfg.region()?, &provider, &cfg.crawl_limits())
                    .map_err(|e| PipelineError::data(e.to_string()))?;
                catalog.crawled_at = Some(cfg.crawled_at.unwrap_or_else(Utc::now));
                // Record the provider as configured so runs do not depend on
                // where the fixture directory lives.
                catalog.provider = cfg.provider.clone();
                log::info!("crawled {} panoramas, skipped {}", catalog.records.len(), catalog.skipped.len());
                let p = self.artifact(CATALOG);
                catalog_save(&catalog, &p).map_err(|e| catalog_err(e, &p))
            }
            Stage::Transform => {
                let p = self.input(CATALOG)?;
                let catalog = catalog_load(&p).map_err(|e| catalog_err(e, &p))?;
                let wgs = catalog_to_wgs84(&catalog).map_err(|e| catalog_err(e, &p))?;
                let out = self.artifact(CATALOG_WGS84);
                catalog_save(&wgs, &out).map_err(|e| catalog_err(e, &out))
            }
            Stage::Tracks => {
                let p = self.input(CATALOG_WGS84)?;
                let catalog = catalog_load(&p).map_err(|e| catalog_err(e, &p))?;
                let det_path = self.configured(&cfg.detections, "detections file")?;
                let detections = read_detections(&det_path).map_err(|e| lane_io(e, &det_path))?;
                let graph = self.graph()?;
                let tracks = build_tracks(&catalog, &detections, &cfg.track_params()).map_err(|e| match_err(e, &p))?;
                let pieces = split_at_junctions(&tracks, &graph, cfg.junction_split_m);
                log::info!("{} tracks, {} after junction splits", tracks.len(), pieces.len());
                self.write(TRACKS, tracks_to_string(&pieces).as_bytes())
            }
            Stage::Match => {
                let tracks = self.tracks()?;
                let graph = self.graph()?;
                let matches = match_tracks(&tracks, &graph, &cfg.match_params());
                log::info!(
                    "{} of {} tracks accepted",
                    matches.iter().filter(|m| m.accepted).count(),
                    matches.len()
                );
                self.write(MATCHES, matches_to_string(&matches).as_bytes())
            }
            Stage::Fuse => {
                let tracks = self.tracks()?;
                let p = self.input(MATCHES)?;
                let matches = matches_from_str(&self.read(&p)?).map_err(|e| match_err(e, &p))?;
                let graph = self.graph()?;
                let fused = fuse_lane_counts(&tracks, &matches, &graph);
                let text = serde_json::to_string_pretty(&fused).expect("counts serialize") + "\n";
                self.write(LANE_COUNTS, text.as_bytes())
            }
            Stage::Build => {
                let p = self.input(LANE_COUNTS)?;
                let fused: BTreeMap<EdgeId, FusedCount> = serde_json::from_str(&self.read(&p)?)
                    .map_err(|e| PipelineError::data(e.to_string()).with_path(&p).with_line(e.line()))?;
                let graph = self.graph()?;
                let net = build_network(&graph, &fused, cfg.lane_width_m)
                    .map_err(|e| PipelineError::data(e.to_string()))?;
                log::info!("{} directed edges, {} turn connections", net.edges.len(), net.connections.len());
                let text = serde_json::to_string(&net).expect("network serializes") + "\n";
                self.write(NETWORK, text.as_bytes())
            }
            Stage::Export => {
                let p = self.input(NETWORK)?;
                let net: LaneLevelNetwork = serde_json::from_str(&self.read(&p)?)
                    .map_err(|e| PipelineError::data(e.to_string()).with_path(&p).with_line(e.line()))?;
                let refuse = |e: laneforge::netgen::NetgenError| PipelineError::data(e.to_string()).with_path(&p);
                let geojson = export_geojson(&net).map_err(refuse)?;
                let xml = export_sim_xml(&net).map_err(refuse)?;
                self.write(GEOJSON, &geojson)?;
                self.write(SIM_XML, &xml)
            }
            Stage::Eval => {
                let Some(ann) = &cfg.annotations else {
                    return Err(PipelineError::config("eval needs \"annotations\" in the config"));
                };
                let ann = self.configured(ann, "annotations file")?;
                let det_path = self.configured(&cfg.detections, "detections file")?;
                let detections = read_detections(&det_path).map_err(|e| lane_io(e, &det_path))?;
                let annotations = read_annotations(&ann).map_err(|e| lane_io(e, &ann))?;
                let metrics =
                    evaluate_detections(&detections, &annotations, cfg.tau).map_err(|e| lane_io(e, &det_path))?;
                let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
                self.write(METRICS, text.as_bytes())
            }
        }
    }
}

/// Rewrites `manifest.json` with the SHA-256 of every artifact present.
pub fn write_manifest(run_dir: &Path) -> Result<(), PipelineError> {
    let mut artifacts = BTreeMap::new();
    for name in ARTIFACTS {
        let p = run_dir.join(name);
        if p.is_file() {
            let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(e.to_string()).with_path(&p))?;
            artifacts.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
    }
    let body = serde_json::json!({ "schema_version": 1, "artifacts": artifacts });
    let text = serde_json::to_string_pretty(&body).expect("manifest serializes") + "\n";
    let p = run_dir.join(MANIFEST);
    atomic_write(&p, text.as_bytes()).map_err(|e| PipelineError::io(e.to_string()).with_path(&p))
}

/// Runs the given stages in order, refreshing the manifest after each.
pub fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cfg.run_dir)
        .map_err(|e| PipelineError::io(e.to_string()).with_path(&cfg.run_dir))?;
    let run = Run { cfg };
    for &stage in stages {
        log::info!("stage {}", stage.name());
        run.run(stage).map_err(|e| e.in_stage(stage))?;
        write_manifest(&cfg.run_dir).map_err(|e| e.in_stage(stage))?;
    }
    Ok(())
}
