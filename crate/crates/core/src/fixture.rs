//! Synthetic 4×4 grid town used by tests and the `fixture-town` command.
//!
//! Streets run on a 200 m grid near Shenzhen. Every row and column is a single
//! OSM way split into three edges at the crossings. Panoramas sit every 10 m
//! along the streets (stored in BD-09, like the upstream provider), with one
//! panorama on each junction. Detections carry the true per-direction lane
//! count, except for a few deliberately noisy votes; junction panoramas are
//! negative samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic_write;
use crate::basemap::EdgeId;
use crate::geodesy::{gcj02_to_bd09, wgs84_to_gcj02, Datum, GeoPoint, LocalFrame};
use crate::laneio::{annotations_to_string, detections_to_string, AnnotationRecord, DetectionRecord};
use crate::lanegeom::LaneCurve;
use crate::svcrawl::{FixtureProvider, PanoramaMeta};

pub const ORIGIN: GeoPoint = GeoPoint {
    lng: 113.93,
    lat: 22.54,
};
pub const GRID: usize = 4;
pub const BLOCK_M: f64 = 200.0;
pub const PANO_SPACING_M: f64 = 10.0;
const IMAGE_W: u32 = 1024;
const IMAGE_H: u32 = 512;

/// True lanes per direction for each row (south to north) and column (west
/// to east), listed per block in way order.
const ROW_LANES: [[u32; 3]; GRID] = [[2, 2, 2], [3, 3, 2], [2, 3, 3], [1, 1, 2]];
const COL_LANES: [[u32; 3]; GRID] = [[1, 2, 2], [2, 2, 3], [3, 3, 3], [2, 2, 2]];
/// OSM `lanes` tags; some deliberately disagree with the truth.
const ROW_TAGS: [Option<u32>; GRID] = [Some(4), Some(6), None, Some(2)];
const COL_TAGS: [Option<u32>; GRID] = [Some(4), None, Some(4), Some(2)];
/// Column 3 is one-way northbound.
const ONEWAY_COL: usize = 3;
/// Column 0's northern block has no panoramas.
const UNOBSERVED: (Axis, usize, usize) = (Axis::Col, 0, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Row,
    Col,
}

pub fn junction_id(row: usize, col: usize) -> i64 {
    1 + (row * GRID + col) as i64
}

pub fn junction_cell(id: i64) -> Option<(usize, usize)> {
    let k = usize::try_from(id - 1).ok()?;
    (k < GRID * GRID).then_some((k / GRID, k % GRID))
}

fn way_id(axis: Axis, line: usize) -> i64 {
    match axis {
        Axis::Row => 1000 + line as i64,
        Axis::Col => 2000 + line as i64,
    }
}

/// Local position (east, north) in metres at distance `s` along a street.
fn local_at(axis: Axis, line: usize, s: f64) -> (f64, f64) {
    let across = line as f64 * BLOCK_M;
    match axis {
        Axis::Row => (s, across),
        Axis::Col => (across, s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownTruth {
    /// True lanes per travel direction.
    pub lane_counts: BTreeMap<EdgeId, u32>,
    /// Edges with panoramas along them.
    pub observed: BTreeSet<EdgeId>,
    pub oneway: BTreeSet<EdgeId>,
    pub seed_pano: String,
    /// Region around the town in the provider datum (BD-09).
    pub region_bd09: [f64; 4],
}

struct Street {
    axis: Axis,
    line: usize,
    lanes: [u32; 3],
    tag: Option<u32>,
    oneway: bool,
}

fn streets() -> Vec<Street> {
    let mut out = Vec::new();
    for line in 0..GRID {
        out.push(Street {
            axis: Axis::Row,
            line,
            lanes: ROW_LANES[line],
            tag: ROW_TAGS[line],
            oneway: false,
        });
    }
    for line in 0..GRID {
        out.push(Street {
            axis: Axis::Col,
            line,
            lanes: COL_LANES[line],
            tag: COL_TAGS[line],
            oneway: line == ONEWAY_COL,
        });
    }
    out
}

fn to_bd09(p: GeoPoint) -> GeoPoint {
    gcj02_to_bd09(wgs84_to_gcj02(p).expect("town is valid")).expect("town is valid")
}

/// Lane boundaries converging towards a vanishing point above the image
/// centre, as a forward-facing camera would see them.
fn lane_curves(n: u32) -> Vec<LaneCurve> {
    let horizon = 0.4;
    (0..n)
        .map(|i| {
            let bottom = (i as f64 + 1.0) / (n as f64 + 1.0);
            let slope = (bottom - 0.5) / (1.0 - horizon);
            LaneCurve::new([0.0, 0.0, slope, 0.5 - slope * horizon], (horizon, 1.0), 1.0)
        })
        .collect()
}

fn annotation_for(pano_id: &str, curves: &[LaneCurve]) -> AnnotationRecord {
    let lanes: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| {
            (0..8)
                .map(|k| {
                    let y = c.y_range.0 + (c.y_range.1 - c.y_range.0) * k as f64 / 7.0;
                    (c.eval(y) * IMAGE_W as f64, y * IMAGE_H as f64)
                })
                .collect()
        })
        .collect();
    AnnotationRecord {
        image_id: pano_id.to_string(),
        width: IMAGE_W,
        height: IMAGE_H,
        lane_count: lanes.len(),
        is_negative: lanes.is_empty(),
        lanes,
        grid_zones: Vec::new(),
        separators: Vec::new(),
    }
}

/// Writes the town into `dir`: `town.osm`, `panoramas/`, `detections.jsonl`,
/// `annotations.jsonl`, `truth.json` and a ready-to-run `config.json`.
pub fn write_town(dir: &Path) -> io::Result<TownTruth> {
    let frame = LocalFrame::new(ORIGIN).expect("origin is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_70_77);
    let base_time: DateTime<Utc> = "2024-05-01T08:00:00Z".parse().expect("literal timestamp");

    let mut truth = TownTruth {
        lane_counts: BTreeMap::new(),
        observed: BTreeSet::new(),
        oneway: BTreeSet::new(),
        seed_pano: String::new(),
        region_bd09: [0.0; 4],
    };
    let mut osm = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"laneforge-fixture\">\n");
    let mut ways = String::new();

    // Junction nodes and panoramas.
    let mut panos: BTreeMap<String, PanoramaMeta> = BTreeMap::new();
    let mut truth_lanes: BTreeMap<String, Option<u32>> = BTreeMap::new();
    for row in 0..GRID {
        for col in 0..GRID {
            let id = junction_id(row, col);
            let p = frame.unproject(col as f64 * BLOCK_M, row as f64 * BLOCK_M);
            let _ = writeln!(osm, "  <node id=\"{id}\" lat=\"{:.8}\" lon=\"{:.8}\"/>", p.lat, p.lng);
            let pano_id = format!("j{id:02}");
            panos.insert(
                pano_id.clone(),
                PanoramaMeta {
                    pano_id: pano_id.clone(),
                    position: to_bd09(p),
                    datum: Datum::Bd09,
                    capture_time: Some(base_time),
                    heading_deg: None,
                    links: Vec::new(),
                },
            );
            truth_lanes.insert(pano_id, None);
        }
    }

    let mut shape_node = 10_000i64;
    let mut shot = 0i64;
    for st in streets() {
        let way = way_id(st.axis, st.line);
        let mut refs = Vec::new();
        for block in 0..3 {
            let edge = EdgeId { way, index: block as u32 };
            truth.lane_counts.insert(edge, st.lanes[block]);
            if st.oneway {
                truth.oneway.insert(edge);
            }
            let (row, col) = match st.axis {
                Axis::Row => (st.line, block),
                Axis::Col => (block, st.line),
            };
            refs.push(junction_id(row, col));
            // Mid-block shape node, nudged sideways so the geometry is not a
            // perfect straight line.
            let (x, y) = local_at(st.axis, st.line, (block as f64 + 0.5) * BLOCK_M);
            let nudge = if block % 2 == 0 { 1.5 } else { -1.5 };
            let (x, y) = match st.axis {
                Axis::Row => (x, y + nudge),
                Axis::Col => (x + nudge, y),
            };
            let p = frame.unproject(x, y);
            let _ = writeln!(osm, "  <node id=\"{shape_node}\" lat=\"{:.8}\" lon=\"{:.8}\"/>", p.lat, p.lng);
            refs.push(shape_node);
            shape_node += 1;
        }
        refs.push(match st.axis {
            Axis::Row => junction_id(st.line, GRID - 1),
            Axis::Col => junction_id(GRID - 1, st.line),
        });

        let _ = writeln!(ways, "  <way id=\"{way}\">");
        for r in &refs {
            let _ = writeln!(ways, "    <nd ref=\"{r}\"/>");
        }
        let highway = if st.axis == Axis::Row && st.line == 1 { "primary" } else { "residential" };
        let _ = writeln!(ways, "    <tag k=\"highway\" v=\"{highway}\"/>");
        if let Some(t) = st.tag {
            let _ = writeln!(ways, "    <tag k=\"lanes\" v=\"{t}\"/>");
        }
        if st.oneway {
            let _ = writeln!(ways, "    <tag k=\"oneway\" v=\"yes\"/>");
        }
        let _ = writeln!(ways, "    <tag k=\"name\" v=\"{} {}\"/>", if st.axis == Axis::Row { "Row" } else { "Column" }, st.line);
        ways.push_str("  </way>\n");

        // Panoramas along the street, following the nudged geometry loosely.
        let heading = match (st.axis, st.oneway, st.line % 2) {
            (Axis::Row, _, 0) => 90.0,
            (Axis::Row, _, _) => 270.0,
            (Axis::Col, true, _) => 0.0,
            (Axis::Col, false, 0) => 0.0,
            (Axis::Col, false, _) => 180.0,
        };
        let steps = (3.0 * BLOCK_M / PANO_SPACING_M) as usize;
        let per_block = (BLOCK_M / PANO_SPACING_M) as usize;
        let mut prev: Option<(usize, String)> = None;
        for k in 0..=steps {
            let s = k as f64 * PANO_SPACING_M;
            let block = (k / per_block).min(2);
            let id = if k % per_block == 0 {
                let (row, col) = match st.axis {
                    Axis::Row => (st.line, k / per_block),
                    Axis::Col => (k / per_block, st.line),
                };
                format!("j{:02}", junction_id(row, col))
            } else {
                if (st.axis, st.line, block) == UNOBSERVED {
                    continue;
                }
                let jitter = rng.random_range(-0.8..0.8);
                let (x, y) = local_at(st.axis, st.line, s);
                let (x, y) = match st.axis {
                    Axis::Row => (x, y + jitter),
                    Axis::Col => (x + jitter, y),
                };
                let id = format!("p{way}-{k:03}");
                shot += 1;
                panos.insert(
                    id.clone(),
                    PanoramaMeta {
                        pano_id: id.clone(),
                        position: to_bd09(frame.unproject(x, y)),
                        datum: Datum::Bd09,
                        capture_time: Some(base_time + Duration::seconds(7 * shot)),
                        heading_deg: Some(heading),
                        links: Vec::new(),
                    },
                );
                let mut n = st.lanes[block];
                if k % 11 == 5 {
                    n += 1;
                }
                truth_lanes.insert(id.clone(), Some(n));
                truth.observed.insert(EdgeId { way, index: block as u32 });
                id
            };
            // Only neighbours 10 m apart are linked, so skipped blocks leave a gap.
            if let Some((pk, p)) = prev.take() {
                if pk + 1 == k {
                    panos.get_mut(&p).unwrap().links.push(id.clone());
                    panos.get_mut(&id).unwrap().links.push(p);
                }
            }
            prev = Some((k, id));
        }
    }

    // Ways the basemap must ignore.
    let footway_nodes = [(20_000, -20.0, -20.0), (20_001, 620.0, -20.0)];
    let building_nodes = [(20_010, 80.0, 80.0), (20_011, 120.0, 80.0), (20_012, 120.0, 120.0), (20_013, 80.0, 120.0)];
    for (id, x, y) in footway_nodes.iter().chain(&building_nodes) {
        let p = frame.unproject(*x, *y);
        let _ = writeln!(osm, "  <node id=\"{id}\" lat=\"{:.8}\" lon=\"{:.8}\"/>", p.lat, p.lng);
    }
    osm.push_str(&ways);
    osm.push_str("  <way id=\"3000\">\n    <nd ref=\"20000\"/>\n    <nd ref=\"20001\"/>\n    <tag k=\"highway\" v=\"footway\"/>\n  </way>\n");
    osm.push_str("  <way id=\"3001\">\n    <nd ref=\"20010\"/>\n    <nd ref=\"20011\"/>\n    <nd ref=\"20012\"/>\n    <nd ref=\"20013\"/>\n    <nd ref=\"20010\"/>\n    <tag k=\"building\" v=\"yes\"/>\n  </way>\n");
    osm.push_str("</osm>\n");

    let records: Vec<PanoramaMeta> = panos.values().cloned().collect();
    let mut detections = Vec::new();
    let mut annotations = Vec::new();
    for r in &records {
        let curves = lane_curves(truth_lanes[&r.pano_id].unwrap_or(0));
        detections.push(DetectionRecord::new(r.pano_id.clone(), r.heading_deg.unwrap_or(0.0), curves.clone()));
        annotations.push(annotation_for(&r.pano_id, &curves));
    }

    let (mut lo, mut hi) = (records[0].position, records[0].position);
    for r in &records {
        lo = GeoPoint::new(lo.lng.min(r.position.lng), lo.lat.min(r.position.lat));
        hi = GeoPoint::new(hi.lng.max(r.position.lng), hi.lat.max(r.position.lat));
    }
    let margin = 0.002;
    truth.region_bd09 = [lo.lng - margin, lo.lat - margin, hi.lng + margin, hi.lat + margin];
    truth.seed_pano = "p1000-005".to_string();

    std::fs::create_dir_all(dir)?;
    FixtureProvider::write_fixture(&dir.join("panoramas"), &records)?;
    atomic_write(&dir.join("town.osm"), osm.as_bytes())?;
    atomic_write(&dir.join("detections.jsonl"), detections_to_string(&detections).as_bytes())?;
    atomic_write(&dir.join("annotations.jsonl"), annotations_to_string(&annotations).as_bytes())?;
    let truth_json = serde_json::to_string_pretty(&truth).map_err(io::Error::other)? + "\n";
    atomic_write(&dir.join("truth.json"), truth_json.as_bytes())?;
    let config = serde_json::json!({
        "run_dir": "run",
        "provider": "fixture:panoramas",
        "datum": "bd09",
        "seeds": [truth.seed_pano],
        "region": truth.region_bd09,
        "osm": "town.osm",
        "detections": "detections.jsonl",
        "annotations": "annotations.jsonl",
        "crawled_at": "2024-05-02T00:00:00Z",
        "crawl": { "min_interval_ms": 0 },
    });
    let config = serde_json::to_string_pretty(&config).map_err(io::Error::other)? + "\n";
    atomic_write(&dir.join("config.json"), config.as_bytes())?;
    Ok(truth)
}
