//! Pipeline configuration file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use laneforge::geodesy::Datum;
use laneforge::matching::{MatchParams, TrackParams};
use laneforge::svcrawl::{CrawlLimits, Region};
use serde::Deserialize;

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrawlSettings {
    pub max_nodes: usize,
    pub max_depth: usize,
    pub max_retries: usize,
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
}

impl Default for CrawlSettings {
    fn default() -> Self {
        let d = CrawlLimits::default();
        Self {
            max_nodes: d.max_nodes,
            max_depth: d.max_depth,
            max_retries: d.max_retries,
            max_in_flight: d.max_in_flight,
            min_interval_ms: d.min_interval.as_millis() as u64,
        }
    }
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    /// `fixture:<directory>`.
    pub provider: String,
    /// Datum the provider reports positions in.
    pub datum: Datum,
    pub seeds: Vec<String>,
    /// `[min_lng, min_lat, max_lng, max_lat]` in the provider datum.
    pub region: [f64; 4],
    pub osm: PathBuf,
    pub detections: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Timestamp recorded in the catalog; the current time when absent.
    #[serde(default)]
    pub crawled_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub crawl: CrawlSettings,
    #[serde(default = "d::radius_m")]
    pub radius_m: f64,
    #[serde(default = "d::lane_width_m")]
    pub lane_width_m: f64,
    #[serde(default = "d::tau")]
    pub tau: f64,
    #[serde(default = "d::junction_split_m")]
    pub junction_split_m: f64,
    #[serde(default = "d::densify_m")]
    pub densify_m: f64,
    #[serde(default = "d::max_gap_m")]
    pub max_gap_m: f64,
    #[serde(default = "d::max_turn_deg")]
    pub max_turn_deg: f64,
    /// Directory of the config file; relative provider paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod d {
    pub fn radius_m() -> f64 {
        25.0
    }
    pub fn lane_width_m() -> f64 {
        laneforge::netgen::DEFAULT_LANE_WIDTH_M
    }
    pub fn tau() -> f64 {
        laneforge::laneio::DEFAULT_TAU
    }
    pub fn junction_split_m() -> f64 {
        15.0
    }
    pub fn densify_m() -> f64 {
        5.0
    }
    pub fn max_gap_m() -> f64 {
        100.0
    }
    pub fn max_turn_deg() -> f64 {
        60.0
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub seeds: Vec<String>,
    pub radius_m: Option<f64>,
    pub lane_width_m: Option<f64>,
    pub tau: Option<f64>,
    pub crawled_at: Option<DateTime<Utc>>,
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), PipelineError> {
    if v.is_finite() && v > lo && v <= hi {
        Ok(())
    } else {
        Err(PipelineError::config(format!("{name} = {v} is outside ({lo}, {hi}]")))
    }
}

impl PipelineConfig {
    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::config(format!("cannot read config: {e}")).with_path(path))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::config(e.to_string()).with_path(path).with_line(e.line()))?;
        if let Some(v) = &overrides.run_dir {
            cfg.run_dir = v.clone();
        }
        if !overrides.seeds.is_empty() {
            cfg.seeds = overrides.seeds.clone();
        }
        cfg.radius_m = overrides.radius_m.unwrap_or(cfg.radius_m);
        cfg.lane_width_m = overrides.lane_width_m.unwrap_or(cfg.lane_width_m);
        cfg.tau = overrides.tau.unwrap_or(cfg.tau);
        if overrides.crawled_at.is_some() {
            cfg.crawled_at = overrides.crawled_at;
        }

        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.run_dir);
        resolve(&mut cfg.osm);
        resolve(&mut cfg.detections);
        if let Some(a) = &mut cfg.annotations {
            resolve(a);
        }
        cfg.base_dir = base.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::config("at least one seed is required"));
        }
        if !self.provider.starts_with("fixture:") {
            return Err(PipelineError::config(format!(
                "unsupported provider {:?}; expected fixture:<dir>",
                self.provider
            )));
        }
        self.region()?;
        in_range("radius_m", self.radius_m, 0.0, 1000.0)?;
        in_range("lane_width_m", self.lane_width_m, 0.0, 10.0)?;
        in_range("tau", self.tau, 0.0, 1.0)?;
        in_range("junction_split_m", self.junction_split_m, 0.0, 200.0)?;
        in_range("densify_m", self.densify_m, 0.0, 100.0)?;
        in_range("max_gap_m", self.max_gap_m, 0.0, 10_000.0)?;
        in_range("max_turn_deg", self.max_turn_deg, 0.0, 180.0)?;
        if self.crawl.max_nodes == 0 || self.crawl.max_in_flight == 0 {
            return Err(PipelineError::config("crawl.max_nodes and crawl.max_in_flight must be positive"));
        }
        Ok(())
    }

    pub fn region(&self) -> Result<Region, PipelineError> {
        Region::new(self.region, self.datum).map_err(|e| PipelineError::config(e.to_string()))
    }

    pub fn fixture_dir(&self) -> PathBuf {
        self.base_dir.join(self.provider.strip_prefix("fixture:").unwrap_or_default())
    }

    pub fn crawl_limits(&self) -> CrawlLimits {
        CrawlLimits {
            max_nodes: self.crawl.max_nodes,
            max_depth: self.crawl.max_depth,
            max_retries: self.crawl.max_retries,
            max_in_flight: self.crawl.max_in_flight,
            min_interval: Duration::from_millis(self.crawl.min_interval_ms),
        }
    }

    pub fn track_params(&self) -> TrackParams {
        TrackParams {
            max_gap_m: self.max_gap_m,
            max_turn_deg: self.max_turn_deg,
        }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            radius_m: self.radius_m,
            densify_m: self.densify_m,
        }
    }
}
