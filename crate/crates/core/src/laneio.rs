//! Lane annotation and detection records: validation, the dataset curation
//! transforms (outer-lane completion, separator suppression), detection
//! metrics, and the newline-delimited record files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::atomic_write;
use crate::lanegeom::{
    even_rows, fit_curve, hungarian, lane_assignment_costs, LaneCurve,
    LaneGeomError, DEFAULT_NO_OVERLAP_PENALTY, OFF_IMAGE_BAND,
};

pub const RECORD_SCHEMA_VERSION: u64 = 1;
pub const MAX_LANES: usize = 16;
pub const DEFAULT_TAU: f64 = 0.02;

const COMPLETION_ROWS: usize = 10;
const EVAL_ROWS: usize = 20;

/// Pixel coordinate `(u, v)`, v growing downward.
pub type Pixel = (f64, f64);

#[derive(Debug, Error)]
pub enum LaneIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("outer-lane completion needs at least 2 lanes, found {found}")]
    InsufficientNeighbors { found: usize },
    #[error("existing lanes share no common rows")]
    NoSharedRows,
    #[error("completed lane falls outside the image")]
    OutOfFrame,
    #[error("invalid tau {0}; must be positive")]
    InvalidTau(f64),
    #[error(transparent)]
    Fit(#[from] LaneGeomError),
}

pub type Result<T> = std::result::Result<T, LaneIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridClass {
    Bus,
    NoParking,
    JunctionGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridZone {
    pub polygon: Vec<Pixel>,
    pub class: GridClass,
    /// Fraction of the visible road surface covered by the zone, in `(0, 1]`.
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Lane point lists, each ordered by increasing v, lanes ordered left to right.
    pub lanes: Vec<Vec<Pixel>>,
    #[serde(default)]
    pub is_negative: bool,
    #[serde(default)]
    pub grid_zones: Vec<GridZone>,
    #[serde(default)]
    pub separators: Vec<Vec<Pixel>>,
    pub lane_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NegativeWithLanes,
    LaneCountMismatch { declared: usize, actual: usize },
    LaneCountExceedsCap { count: usize },
    InvalidDimensions,
    LaneTooShort { lane: usize },
    LaneNotMonotonic { lane: usize },
    PointOutOfBounds { lane: usize },
    LanesNotSorted,
    BadAreaFraction { zone: usize },
    DegenerateGridPolygon { zone: usize },
    SeparatorTooShort { separator: usize },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NegativeWithLanes => "negative_with_lanes",
            Violation::LaneCountMismatch { .. } => "lane_count_mismatch",
            Violation::LaneCountExceedsCap { .. } => "lane_count_exceeds_cap",
            Violation::InvalidDimensions => "invalid_dimensions",
            Violation::LaneTooShort { .. } => "lane_too_short",
            Violation::LaneNotMonotonic { .. } => "lane_not_monotonic",
            Violation::PointOutOfBounds { .. } => "point_out_of_bounds",
            Violation::LanesNotSorted => "lanes_not_sorted",
            Violation::BadAreaFraction { .. } => "bad_area_fraction",
            Violation::DegenerateGridPolygon { .. } => "degenerate_grid_polygon",
            Violation::SeparatorTooShort { .. } => "separator_too_short",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LaneCountMismatch { declared, actual } => {
                write!(f, "{} (declared {declared}, found {actual})", self.code())
            }
            Violation::LaneCountExceedsCap { count } => write!(f, "{} ({count} > {MAX_LANES})", self.code()),
            Violation::LaneTooShort { lane }
            | Violation::LaneNotMonotonic { lane }
            | Violation::PointOutOfBounds { lane } => write!(f, "{} (lane {lane})", self.code()),
            Violation::BadAreaFraction { zone } | Violation::DegenerateGridPolygon { zone } => {
                write!(f, "{} (zone {zone})", self.code())
            }
            Violation::SeparatorTooShort { separator } => write!(f, "{} (separator {separator})", self.code()),
            _ => f.write_str(self.code()),
        }
    }
}

/// Horizontal position of a polyline at row `v`, by linear interpolation,
/// clamped to the end points outside its vertical extent.
fn x_at_row(lane: &[Pixel], v: f64) -> f64 {
    let first = lane[0];
    let last = lane[lane.len() - 1];
    if v <= first.1 {
        return first.0;
    }
    if v >= last.1 {
        return last.0;
    }
    for w in lane.windows(2) {
        let (a, b) = (w[0], w[1]);
        if v >= a.1 && v <= b.1 {
            if b.1 == a.1 {
                return a.0;
            }
            let t = (v - a.1) / (b.1 - a.1);
            return a.0 + t * (b.0 - a.0);
        }
    }
    last.0
}

/// Lowest row (largest v) that every lane reaches.
fn shared_lowest_row(lanes: &[Vec<Pixel>]) -> f64 {
    lanes
        .iter()
        .map(|l| l[l.len() - 1].1)
        .fold(f64::INFINITY, f64::min)
}

fn lane_order_keys(lanes: &[Vec<Pixel>]) -> Vec<f64> {
    let v = shared_lowest_row(lanes);
    lanes.iter().map(|l| x_at_row(l, v)).collect()
}

/// Returns every invariant violation of `rec`; an empty list means valid.
pub fn validate_annotation(rec: &AnnotationRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let (w, h) = (rec.width as f64, rec.height as f64);
    if rec.width == 0 || rec.height == 0 {
        out.push(Violation::InvalidDimensions);
    }
    if rec.is_negative && (!rec.lanes.is_empty() || rec.lane_count != 0) {
        out.push(Violation::NegativeWithLanes);
    }
    if rec.lane_count != rec.lanes.len() {
        out.push(Violation::LaneCountMismatch {
            declared: rec.lane_count,
            actual: rec.lanes.len(),
        });
    }
    if rec.lanes.len() > MAX_LANES || rec.lane_count > MAX_LANES {
        out.push(Violation::LaneCountExceedsCap {
            count: rec.lanes.len().max(rec.lane_count),
        });
    }
    let in_bounds = |p: &Pixel| p.0.is_finite() && p.1.is_finite() && (0.0..=w).contains(&p.0) && (0.0..=h).contains(&p.1);
    let mut well_formed = true;
    for (i, lane) in rec.lanes.iter().enumerate() {
        if lane.len() < 2 {
            out.push(Violation::LaneTooShort { lane: i });
            well_formed = false;
            continue;
        }
        if lane.windows(2).any(|p| p[1].1 <= p[0].1) {
            out.push(Violation::LaneNotMonotonic { lane: i });
            well_formed = false;
        }
        if !lane.iter().all(in_bounds) {
            out.push(Violation::PointOutOfBounds { lane: i });
        }
    }
    if well_formed && rec.lanes.len() >= 2 {
        let keys = lane_order_keys(&rec.lanes);
        if keys.windows(2).any(|k| k[1] < k[0]) {
            out.push(Violation::LanesNotSorted);
        }
    }
    for (i, z) in rec.grid_zones.iter().enumerate() {
        if !(z.area_fraction > 0.0 && z.area_fraction <= 1.0) {
            out.push(Violation::BadAreaFraction { zone: i });
        }
        if z.polygon.len() < 3 {
            out.push(Violation::DegenerateGridPolygon { zone: i });
        }
    }
    for (i, s) in rec.separators.iter().enumerate() {
        if s.len() < 2 {
            out.push(Violation::SeparatorTooShort { separator: i });
        }
    }
    out
}

/// Fits the pixel lane in normalized image space, lowering the degree when
/// the lane has too few distinct rows for a cubic.
pub fn fit_pixel_lane(lane: &[Pixel], width: f64, height: f64) -> Result<LaneCurve> {
    let pts: Vec<(f64, f64)> = lane.iter().map(|&(u, v)| (u / width, v / height)).collect();
    let mut degree = 3.min(pts.len().saturating_sub(1)).max(1);
    loop {
        match fit_curve(&pts, degree) {
            Ok(fit) => {
                let mut curve = fit.curve;
                curve.y_range = (curve.y_range.0.max(0.0), curve.y_range.1.min(1.0));
                return Ok(curve);
            }
            Err(LaneGeomError::Degenerate { .. }) if degree > 1 => degree -= 1,
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Reconstructs a missing outermost lane from the spacing of the existing ones.
///
/// All lanes are fitted with cubics and sampled at 10 shared rows; the new
/// lane is the outermost lane shifted by the median adjacent gap. Points of
/// the new lane falling outside the image are dropped.
pub fn complete_outer_lane(rec: &AnnotationRecord, side: Side) -> Result<AnnotationRecord> {
    if rec.lanes.len() < 2 {
        return Err(LaneIoError::InsufficientNeighbors {
            found: rec.lanes.len(),
        });
    }
    let (w, h) = (rec.width as f64, rec.height as f64);
    let curves = rec
        .lanes
        .iter()
        .map(|l| fit_pixel_lane(l, w, h))
        .collect::<Result<Vec<_>>>()?;

    let top = curves.iter().map(|c| c.y_range.0).fold(f64::NEG_INFINITY, f64::max);
    let bottom = curves.iter().map(|c| c.y_range.1).fold(f64::INFINITY, f64::min);
    if !(top < bottom) {
        return Err(LaneIoError::NoSharedRows);
    }
    let rows = even_rows(top, bottom, COMPLETION_ROWS);
    let mut samples: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| rows.iter().map(|&y| c.eval(y)).collect())
        .collect();
    samples.sort_by(|a, b| a[rows.len() - 1].total_cmp(&b[rows.len() - 1]));

    let mut gaps: Vec<f64> = samples
        .windows(2)
        .flat_map(|pair| pair[1].iter().zip(&pair[0]).map(|(r, l)| r - l).collect::<Vec<_>>())
        .collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    let gap = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        (gaps[n / 2 - 1] + gaps[n / 2]) / 2.0
    };

    let (outer, shift) = match side {
        Side::Left => (&samples[0], -gap),
        Side::Right => (&samples[samples.len() - 1], gap),
    };
    let new_x: Vec<f64> = outer.iter().map(|x| x + shift).collect();
    let (lo, hi) = OFF_IMAGE_BAND;
    if new_x.iter().all(|x| !(lo..=hi).contains(x)) {
        return Err(LaneIoError::OutOfFrame);
    }
    let new_lane: Vec<Pixel> = new_x
        .iter()
        .zip(&rows)
        .map(|(x, y)| (x * w, y * h))
        .filter(|&(u, v)| (0.0..=w).contains(&u) && (0.0..=h).contains(&v))
        .collect();
    if new_lane.len() < 2 {
        return Err(LaneIoError::OutOfFrame);
    }

    let mut out = rec.clone();
    match side {
        Side::Left => out.lanes.insert(0, new_lane),
        Side::Right => out.lanes.push(new_lane),
    }
    // Restore left-to-right order; a stable sort leaves already ordered lanes in place.
    let keys = lane_order_keys(&out.lanes);
    let mut order: Vec<usize> = (0..out.lanes.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    out.lanes = order.into_iter().map(|i| out.lanes[i].clone()).collect();
    out.lane_count = out.lanes.len();
    Ok(out)
}

fn cross(a: Pixel, b: Pixel, p: Pixel) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn dist_to_segment(a: Pixel, b: Pixel, p: Pixel) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Side of `p` relative to the separator segment nearest to it: -1, 0 or 1.
fn side_of(separator: &[Pixel], p: Pixel) -> i8 {
    let mut best = (f64::INFINITY, 0.0);
    for seg in separator.windows(2) {
        let d = dist_to_segment(seg[0], seg[1], p);
        if d < best.0 {
            best = (d, cross(seg[0], seg[1], p));
        }
    }
    match best.1 {
        c if c > 0.0 => 1,
        c if c < 0.0 => -1,
        _ => 0,
    }
}

/// Drops lanes lying mostly beyond a physical separator as seen from the
/// camera at the bottom centre of the image.
pub fn suppress_separated_lanes(rec: &AnnotationRecord) -> AnnotationRecord {
    let camera = (rec.width as f64 / 2.0, rec.height as f64);
    let mut out = rec.clone();
    out.lanes.retain(|lane| {
        !rec.separators.iter().filter(|s| s.len() >= 2).any(|sep| {
            let own = side_of(sep, camera);
            if own == 0 {
                return false;
            }
            let across = lane.iter().filter(|&&p| side_of(sep, p) == -own).count();
            2 * across > lane.len()
        })
    });
    out.lane_count = out.lanes.len();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub pano_id: String,
    pub heading_deg: f64,
    #[serde(default)]
    pub negative: bool,
    pub lanes: Vec<LaneCurve>,
    /// Fields not covered by the schema; kept on read, never written.
    #[serde(flatten, skip_serializing)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DetectionRecord {
    pub fn new(pano_id: impl Into<String>, heading_deg: f64, lanes: Vec<LaneCurve>) -> Self {
        let negative = lanes.is_empty();
        Self {
            pano_id: pano_id.into(),
            heading_deg,
            negative,
            lanes,
            extra: serde_json::Map::new(),
        }
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.pano_id.is_empty() {
            return Err("empty pano_id".into());
        }
        if !self.heading_deg.is_finite() {
            return Err("non-finite heading_deg".into());
        }
        if self.negative && !self.lanes.is_empty() {
            return Err("negative record carries lanes".into());
        }
        if self.lanes.len() > MAX_LANES {
            return Err(format!("{} lanes exceeds cap {MAX_LANES}", self.lanes.len()));
        }
        for (i, l) in self.lanes.iter().enumerate() {
            l.validate().map_err(|e| format!("lane {i}: {e}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub lane_count_accuracy: f64,
    /// `None` when the ground truth holds no negative images.
    pub negative_accuracy: Option<f64>,
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

/// Matches predicted and annotated lanes per image and aggregates
/// micro-averaged detection metrics.
///
/// With zero predictions precision is reported as 1.0; with zero ground
/// truth lanes recall is 1.0.
pub fn evaluate_detections(
    preds: &[DetectionRecord],
    gts: &[AnnotationRecord],
    tau: f64,
) -> Result<Metrics> {
    if !(tau > 0.0) {
        return Err(LaneIoError::InvalidTau(tau));
    }
    let mut by_id: HashMap<&str, &DetectionRecord> = HashMap::new();
    for p in preds {
        if by_id.insert(p.pano_id.as_str(), p).is_some() {
            return Err(LaneIoError::Pairing(format!("duplicate prediction for {:?}", p.pano_id)));
        }
    }
    let rows = even_rows(0.0, 1.0, EVAL_ROWS);
    let (mut tp, mut n_pred, mut n_gt) = (0usize, 0usize, 0usize);
    let (mut count_ok, mut neg_total, mut neg_ok) = (0usize, 0usize, 0usize);
    let mut seen = std::collections::HashSet::new();
    for gt in gts {
        let pred = by_id
            .get(gt.image_id.as_str())
            .ok_or_else(|| LaneIoError::Pairing(format!("annotation {:?} has no prediction", gt.image_id)))?;
        if !seen.insert(gt.image_id.as_str()) {
            return Err(LaneIoError::Pairing(format!("duplicate annotation {:?}", gt.image_id)));
        }
        let gt_curves = gt
            .lanes
            .iter()
            .map(|l| fit_pixel_lane(l, gt.width as f64, gt.height as f64))
            .collect::<Result<Vec<_>>>()?;
        let costs = lane_assignment_costs(&pred.lanes, &gt_curves, &rows, DEFAULT_NO_OVERLAP_PENALTY);
        let assignment = hungarian(&costs);
        tp += assignment
            .pairs
            .iter()
            .filter(|&&(r, c)| costs.get(r, c) < tau)
            .count();
        n_pred += pred.lanes.len();
        n_gt += gt_curves.len();
        if pred.lane_count() == gt.lane_count {
            count_ok += 1;
        }
        if gt.is_negative {
            neg_total += 1;
            if pred.lanes.is_empty() {
                neg_ok += 1;
            }
        }
    }

    if let Some(extra) = preds.iter().find(|p| !seen.contains(p.pano_id.as_str())) {
        return Err(LaneIoError::Pairing(format!("prediction {:?} has no annotation", extra.pano_id)));
    }

    let precision = if n_pred == 0 { 1.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        lane_count_accuracy: if gts.is_empty() { 1.0 } else { count_ok as f64 / gts.len() as f64 },
        negative_accuracy: (neg_total > 0).then(|| neg_ok as f64 / neg_total as f64),
        true_positives: tp,
        predicted: n_pred,
        ground_truth: n_gt,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    schema_version: u64,
    kind: String,
}

fn parse_records<T: serde::de::DeserializeOwned>(
    text: &str,
    kind: &str,
    check: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(LaneIoError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: FileHeader = serde_json::from_str(htext).map_err(|e| LaneIoError::Parse {
        line: hline,
        message: format!("bad header: {e}"),
    })?;
    if header.schema_version != RECORD_SCHEMA_VERSION || header.kind != kind {
        return Err(LaneIoError::Parse {
            line: hline,
            message: format!(
                "expected schema_version {RECORD_SCHEMA_VERSION} kind {kind:?}, found {} {:?}",
                header.schema_version, header.kind
            ),
        });
    }
    lines
        .map(|(line, l)| {
            let rec: T = serde_json::from_str(l).map_err(|e| LaneIoError::Parse {
                line,
                message: e.to_string(),
            })?;
            check(&rec).map_err(|message| LaneIoError::Parse { line, message })?;
            Ok(rec)
        })
        .collect()
}

fn render_records<T: Serialize>(kind: &str, records: &[T]) -> String {
    let header = FileHeader {
        schema_version: RECORD_SCHEMA_VERSION,
        kind: kind.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn detections_from_str(text: &str) -> Result<Vec<DetectionRecord>> {
    parse_records(text, "detections", DetectionRecord::check)
}

pub fn detections_to_string(records: &[DetectionRecord]) -> String {
    render_records("detections", records)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    detections_from_str(&read_text(path)?)
}

pub fn write_detections(records: &[DetectionRecord], path: &Path) -> Result<()> {
    write_text(path, &detections_to_string(records))
}

pub fn annotations_from_str(text: &str) -> Result<Vec<AnnotationRecord>> {
    parse_records(text, "annotations", |rec: &AnnotationRecord| {
        let v = validate_annotation(rec);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
        }
    })
}

pub fn annotations_to_string(records: &[AnnotationRecord]) -> String {
    render_records("annotations", records)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    annotations_from_str(&read_text(path)?)
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    write_text(path, &annotations_to_string(records))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| LaneIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes()).map_err(|source| LaneIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vertical(u: f64) -> Vec<Pixel> {
        (0..8).map(|k| (u, 300.0 + 50.0 * k as f64)).collect()
    }

    fn record(lanes: Vec<Vec<Pixel>>) -> AnnotationRecord {
        AnnotationRecord {
            image_id: "img".into(),
            width: 1000,
            height: 800,
            lane_count: lanes.len(),
            lanes,
            is_negative: false,
            grid_zones: vec![],
            separators: vec![],
        }
    }

    fn codes(rec: &AnnotationRecord) -> Vec<&'static str> {
        validate_annotation(rec).iter().map(Violation::code).collect()
    }

    #[test]
    fn validation_examples() {
        let ok = record(vec![vertical(300.0), vertical(400.0), vertical(500.0)]);
        assert!(codes(&ok).is_empty());

        let mut neg = record(vec![vertical(300.0)]);
        neg.is_negative = true;
        assert_eq!(codes(&neg), vec!["negative_with_lanes"]);

        let many = record((0..17).map(|k| vertical(50.0 * k as f64 + 10.0)).collect());
        assert_eq!(codes(&many), vec!["lane_count_exceeds_cap"]);
    }

    #[test]
    fn validation_catches_ordering_and_bounds() {
        let swapped = record(vec![vertical(500.0), vertical(300.0)]);
        assert_eq!(codes(&swapped), vec!["lanes_not_sorted"]);
        let outside = record(vec![vertical(1200.0)]);
        assert_eq!(codes(&outside), vec!["point_out_of_bounds"]);
        let mut wrong = record(vec![vertical(300.0)]);
        wrong.lane_count = 2;
        assert_eq!(codes(&wrong), vec!["lane_count_mismatch"]);
        let upward = record(vec![vec![(100.0, 500.0), (100.0, 400.0)]]);
        assert_eq!(codes(&upward), vec!["lane_not_monotonic"]);
    }

    #[test]
    fn completion_adds_parallel_lane() {
        let rec = record(vec![vertical(300.0), vertical(400.0), vertical(500.0)]);
        let out = complete_outer_lane(&rec, Side::Right).unwrap();
        assert_eq!(out.lane_count, 4);
        assert_eq!(&out.lanes[..3], &rec.lanes[..]);
        assert!(out.lanes[3].iter().all(|p| (p.0 - 600.0).abs() <= 1.0));

        let out = complete_outer_lane(&rec, Side::Left).unwrap();
        assert_eq!(&out.lanes[1..], &rec.lanes[..]);
        assert!(out.lanes[0].iter().all(|p| (p.0 - 200.0).abs() <= 1.0));
    }

    #[test]
    fn completion_uses_median_gap() {
        let rec = record(vec![vertical(300.0), vertical(390.0), vertical(490.0), vertical(600.0)]);
        let out = complete_outer_lane(&rec, Side::Right).unwrap();
        assert!(out.lanes[4].iter().all(|p| (p.0 - 700.0).abs() <= 1.0));
    }

    #[test]
    fn completion_errors() {
        let one = record(vec![vertical(300.0)]);
        assert!(matches!(
            complete_outer_lane(&one, Side::Right),
            Err(LaneIoError::InsufficientNeighbors { found: 1 })
        ));
        let edge = record(vec![vertical(100.0), vertical(990.0)]);
        assert!(matches!(complete_outer_lane(&edge, Side::Right), Err(LaneIoError::OutOfFrame)));
        let disjoint = record(vec![vec![(100.0, 0.0), (100.0, 100.0)], vec![(300.0, 500.0), (300.0, 600.0)]]);
        assert!(matches!(complete_outer_lane(&disjoint, Side::Right), Err(LaneIoError::NoSharedRows)));
    }

    #[test]
    fn suppression_rules() {
        let mut rec = record(vec![vertical(350.0), vertical(700.0)]);
        rec.width = 1200; // camera at u = 600, right of the separator
        rec.lane_count = 2;
        rec.separators = vec![vec![(500.0, 0.0), (500.0, 800.0)]];
        let out = suppress_separated_lanes(&rec);
        assert_eq!(out.lanes, vec![vertical(700.0)]);
        assert_eq!(out.lane_count, 1);
        assert_eq!(suppress_separated_lanes(&out), out);

        let plain = record(vec![vertical(350.0)]);
        assert_eq!(suppress_separated_lanes(&plain), plain);

        let mut tie = record(vec![vec![(450.0, 100.0), (460.0, 200.0), (550.0, 300.0), (560.0, 400.0)]]);
        tie.width = 1200;
        tie.separators = vec![vec![(500.0, 0.0), (500.0, 800.0)]];
        assert_eq!(suppress_separated_lanes(&tie).lanes.len(), 1);
    }

    fn as_detection(rec: &AnnotationRecord) -> DetectionRecord {
        let lanes = rec
            .lanes
            .iter()
            .map(|l| fit_pixel_lane(l, rec.width as f64, rec.height as f64).unwrap())
            .collect();
        DetectionRecord::new(rec.image_id.clone(), 0.0, lanes)
    }

    #[test]
    fn evaluation_conventions() {
        let gt = record(vec![vertical(300.0), vertical(500.0)]);
        let m = evaluate_detections(&[as_detection(&gt)], &[gt.clone()], DEFAULT_TAU).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.negative_accuracy, None);

        let empty = DetectionRecord::new("img", 0.0, vec![]);
        let m = evaluate_detections(&[empty.clone()], &[gt.clone()], DEFAULT_TAU).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 0.0, 0.0));

        let mut neg = record(vec![]);
        neg.is_negative = true;
        let m = evaluate_detections(&[empty], &[neg], DEFAULT_TAU).unwrap();
        assert_eq!(m.negative_accuracy, Some(1.0));
    }

    #[test]
    fn evaluation_pairing_errors() {
        let gt = record(vec![vertical(300.0)]);
        let other = DetectionRecord::new("elsewhere", 0.0, vec![]);
        assert!(matches!(
            evaluate_detections(&[other], &[gt.clone()], DEFAULT_TAU),
            Err(LaneIoError::Pairing(_))
        ));
        let d = as_detection(&gt);
        assert!(matches!(
            evaluate_detections(&[d.clone(), d], &[gt], DEFAULT_TAU),
            Err(LaneIoError::Pairing(_))
        ));
    }

    #[test]
    fn detection_file_round_trip_and_errors() {
        let recs = vec![
            DetectionRecord::new("a", 90.0, vec![LaneCurve::constant(0.25), LaneCurve::constant(0.75)]),
            DetectionRecord::new("b", 270.5, vec![]),
        ];
        let text = detections_to_string(&recs);
        assert_eq!(detections_from_str(&text).unwrap(), recs);

        let header = "{\"schema_version\":1,\"kind\":\"detections\"}\n";
        assert!(detections_from_str(header).unwrap().is_empty());

        let bad = format!("{header}{}\n{{\"pano_id\":\"x\",\"heading_deg\":0.0,\"negative\":true}}\n",
            text.lines().nth(1).unwrap());
        match detections_from_str(&bad) {
            Err(LaneIoError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("lanes"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_kept_on_read_dropped_on_write() {
        let text = "{\"schema_version\":1,\"kind\":\"detections\"}\n{\"pano_id\":\"a\",\"heading_deg\":1.0,\"negative\":true,\"lanes\":[],\"model\":\"v2\"}\n";
        let recs = detections_from_str(text).unwrap();
        assert_eq!(recs[0].extra["model"], "v2");
        assert!(!detections_to_string(&recs).contains("model"));
    }

    #[test]
    fn annotation_file_rejects_invalid_records() {
        let good = record(vec![vertical(300.0)]);
        let mut bad = good.clone();
        bad.lane_count = 5;
        let text = annotations_to_string(&[good.clone(), bad]);
        assert!(matches!(annotations_from_str(&text), Err(LaneIoError::Parse { line: 3, .. })));
        let text = annotations_to_string(&[good.clone()]);
        assert_eq!(annotations_from_str(&text).unwrap(), vec![good]);
    }
}
