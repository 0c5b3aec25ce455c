//! Lane-count fusion, lane geometry expansion, turn connectivity and network
//! export.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::thread;

use quick_xml::escape::escape;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basemap::{EdgeId, RoadEdge, RoadGraph};
use crate::geodesy::{GeoPoint, GeodesyError, LocalFrame};
use crate::matching::{MatchResult, ObservationTrack};

pub const DEFAULT_LANE_WIDTH_M: f64 = 3.5;
/// Movements within this many degrees of straight ahead are "through".
pub const THROUGH_THRESHOLD_DEG: f64 = 30.0;
const MAX_MITER: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetgenError {
    #[error("edge {edge}: zero-length segment at vertex {vertex}")]
    ZeroLengthSegment { edge: EdgeId, vertex: usize },
    #[error("edge {0}: geometry needs at least 2 points")]
    ShortGeometry(EdgeId),
    #[error("lane count must be at least 1")]
    ZeroLanes,
    #[error("lane width must be positive and finite, got {0}")]
    InvalidWidth(f64),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error("invalid network: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NetgenError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneSource {
    Observed,
    OsmTag,
    Default,
}

impl LaneSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LaneSource::Observed => "observed",
            LaneSource::OsmTag => "osm_tag",
            LaneSource::Default => "default",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedCount {
    pub lane_count: u32,
    pub source: LaneSource,
    pub votes: usize,
}

/// Lanes per travel direction implied by an OSM `lanes` tag.
pub fn per_direction_tag(edge: &RoadEdge) -> Option<u32> {
    let total = edge.tags.lanes?;
    Some(if edge.tags.oneway { total } else { total.div_ceil(2) })
}

/// Mode of the observed counts. Ties prefer the raw OSM tag value, then the
/// per-direction tag value, then the smallest candidate.
pub fn fuse_votes(votes: &[u32], edge: &RoadEdge) -> FusedCount {
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in votes.iter().filter(|&&v| v > 0) {
        *hist.entry(v).or_default() += 1;
    }
    let Some(&top) = hist.values().max() else {
        return match per_direction_tag(edge) {
            Some(n) if n > 0 => FusedCount {
                lane_count: n,
                source: LaneSource::OsmTag,
                votes: 0,
            },
            _ => FusedCount {
                lane_count: 1,
                source: LaneSource::Default,
                votes: 0,
            },
        };
    };
    let modes: Vec<u32> = hist.iter().filter(|(_, &c)| c == top).map(|(&v, _)| v).collect();
    let lane_count = [edge.tags.lanes, per_direction_tag(edge)]
        .into_iter()
        .flatten()
        .find(|t| modes.contains(t))
        .unwrap_or(modes[0]);
    FusedCount {
        lane_count,
        source: LaneSource::Observed,
        votes: hist.values().sum(),
    }
}

/// Pools the per-point lane counts of accepted tracks by matched edge and
/// fuses them. Every graph edge receives an entry.
pub fn fuse_lane_counts(
    tracks: &[ObservationTrack],
    matches: &[MatchResult],
    graph: &RoadGraph,
) -> BTreeMap<EdgeId, FusedCount> {
    let by_id: HashMap<&str, &ObservationTrack> = tracks.iter().map(|t| (t.track_id.as_str(), t)).collect();
    let mut votes: BTreeMap<EdgeId, Vec<u32>> = BTreeMap::new();
    for m in matches.iter().filter(|m| m.accepted) {
        let (Some(edge), Some(track)) = (m.edge_id, by_id.get(m.track_id.as_str())) else {
            continue;
        };
        votes
            .entry(edge)
            .or_default()
            .extend(track.points.iter().filter_map(|p| p.lane_count));
    }
    graph
        .edges
        .iter()
        .map(|e| (e.id, fuse_votes(votes.get(&e.id).map_or(&[][..], Vec::as_slice), e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One travel direction of a road edge. Rendered as the edge id, prefixed
/// with `r` for the backward direction (a `-` prefix would clash with
/// negative way ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DirectedEdge {
    pub edge_id: EdgeId,
    pub direction: Direction,
}

impl DirectedEdge {
    pub fn forward(edge_id: EdgeId) -> Self {
        Self {
            edge_id,
            direction: Direction::Forward,
        }
    }

    pub fn backward(edge_id: EdgeId) -> Self {
        Self {
            edge_id,
            direction: Direction::Backward,
        }
    }

    pub fn reverse(self) -> Self {
        Self {
            edge_id: self.edge_id,
            direction: match self.direction {
                Direction::Forward => Direction::Backward,
                Direction::Backward => Direction::Forward,
            },
        }
    }
}

impl fmt::Display for DirectedEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Forward => write!(f, "{}", self.edge_id),
            Direction::Backward => write!(f, "r{}", self.edge_id),
        }
    }
}

impl FromStr for DirectedEdge {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.strip_prefix('r') {
            Some(rest) => rest.parse().map(Self::backward),
            None => s.parse().map(Self::forward),
        }
        .map_err(|e: crate::basemap::BasemapError| e.to_string())
    }
}

impl Serialize for DirectedEdge {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DirectedEdge {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneLevelEdge {
    pub id: DirectedEdge,
    /// Junction where travel in this direction starts.
    pub from: i64,
    pub to: i64,
    pub lane_count: u32,
    pub lane_width_m: f64,
    pub source: LaneSource,
    /// Road centerline in travel direction.
    pub centerline: Vec<GeoPoint>,
    /// Lane polylines, lane 0 leftmost in travel direction.
    pub lanes: Vec<Vec<GeoPoint>>,
}

fn unit(v: (f64, f64)) -> Option<(f64, f64)> {
    let n = v.0.hypot(v.1);
    (n > 1e-9).then(|| (v.0 / n, v.1 / n))
}

/// Right-hand normals at each vertex scaled for a mitered join.
fn vertex_normals(pts: &[(f64, f64)], edge: EdgeId) -> Result<Vec<(f64, f64)>> {
    let seg_normals = pts
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let d = unit((w[1].0 - w[0].0, w[1].1 - w[0].1)).ok_or(NetgenError::ZeroLengthSegment { edge, vertex: k })?;
            Ok((d.1, -d.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let last = seg_normals.len() - 1;
    Ok((0..pts.len())
        .map(|k| {
            if k == 0 {
                return seg_normals[0];
            }
            if k > last {
                return seg_normals[last];
            }
            let (a, b) = (seg_normals[k - 1], seg_normals[k]);
            match unit((a.0 + b.0, a.1 + b.1)) {
                Some(n) => {
                    let scale = (1.0 / (n.0 * a.0 + n.1 * a.1)).min(MAX_MITER);
                    (n.0 * scale, n.1 * scale)
                }
                None => a,
            }
        })
        .collect())
}

/// Offsets the centerline of one travel direction into `count` parallel
/// lanes. Lane `i` sits `(i - (count-1)/2) * lane_width_m` to the right of
/// the centerline.
pub fn expand_lanes(
    edge: &RoadEdge,
    direction: Direction,
    count: u32,
    lane_width_m: f64,
    source: LaneSource,
) -> Result<LaneLevelEdge> {
    if count == 0 {
        return Err(NetgenError::ZeroLanes);
    }
    if !(lane_width_m > 0.0 && lane_width_m.is_finite()) {
        return Err(NetgenError::InvalidWidth(lane_width_m));
    }
    if edge.geometry.len() < 2 {
        return Err(NetgenError::ShortGeometry(edge.id));
    }
    let mut centerline = edge.geometry.clone();
    let (from, to) = match direction {
        Direction::Forward => (edge.from, edge.to),
        Direction::Backward => {
            centerline.reverse();
            (edge.to, edge.from)
        }
    };
    let (mut lo, mut hi) = (centerline[0], centerline[0]);
    for p in &centerline {
        lo = GeoPoint::new(lo.lng.min(p.lng), lo.lat.min(p.lat));
        hi = GeoPoint::new(hi.lng.max(p.lng), hi.lat.max(p.lat));
    }
    let frame = LocalFrame::new(GeoPoint::new((lo.lng + hi.lng) / 2.0, (lo.lat + hi.lat) / 2.0))?;
    let local = centerline.iter().map(|p| frame.project(*p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let normals = vertex_normals(&local, edge.id)?;

    let half = (count as f64 - 1.0) / 2.0;
    let lanes = (0..count)
        .map(|i| {
            let offset = (i as f64 - half) * lane_width_m;
            if offset == 0.0 {
                return centerline.clone();
            }
            local
                .iter()
                .zip(&normals)
                .map(|(p, n)| frame.unproject(p.0 + n.0 * offset, p.1 + n.1 * offset))
                .collect()
        })
        .collect();
    Ok(LaneLevelEdge {
        id: DirectedEdge { edge_id: edge.id, direction },
        from,
        to,
        lane_count: count,
        lane_width_m,
        source,
        centerline,
        lanes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub fn as_str(self) -> &'static str {
        match self {
            Movement::Left => "left",
            Movement::Through => "through",
            Movement::Right => "right",
        }
    }

    /// Single-letter code used in the simulation network export.
    pub fn code(self) -> &'static str {
        match self {
            Movement::Left => "l",
            Movement::Through => "s",
            Movement::Right => "r",
        }
    }
}

/// Signed turn angle in degrees from the incoming to the outgoing direction,
/// counterclockwise positive.
pub fn turn_angle_deg(incoming: (f64, f64), outgoing: (f64, f64)) -> f64 {
    let cross = incoming.0 * outgoing.1 - incoming.1 * outgoing.0;
    let dot = incoming.0 * outgoing.0 + incoming.1 * outgoing.1;
    cross.atan2(dot).to_degrees()
}

pub fn movement_for_angle(angle_deg: f64) -> Movement {
    if angle_deg.abs() <= THROUGH_THRESHOLD_DEG {
        Movement::Through
    } else if angle_deg > 0.0 {
        Movement::Left
    } else {
        Movement::Right
    }
}

/// Classifies the movement from `from` into `to` at `node` using the last
/// segment of the incoming centerline and the first of the outgoing one.
pub fn classify_movement(node: GeoPoint, from: &LaneLevelEdge, to: &LaneLevelEdge) -> Result<Movement> {
    let frame = LocalFrame::new(node)?;
    let n = from.centerline.len();
    let a = frame.project(from.centerline[n - 2])?;
    let b = frame.project(from.centerline[n - 1])?;
    let c = frame.project(to.centerline[0])?;
    let d = frame.project(to.centerline[1])?;
    Ok(movement_for_angle(turn_angle_deg((b.0 - a.0, b.1 - a.1), (d.0 - c.0, d.1 - c.1))))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TurnConnection {
    pub node_id: i64,
    pub from_edge: DirectedEdge,
    pub from_lane: u32,
    pub to_edge: DirectedEdge,
    pub to_lane: u32,
    pub movement: Movement,
}

/// Lane pairs for one movement between an `n`-lane and an `m`-lane edge.
pub fn lane_mapping(movement: Movement, n: u32, m: u32) -> Vec<(u32, u32)> {
    match movement {
        Movement::Through => (0..n).map(|i| (i, (i as u64 * m as u64 / n as u64) as u32)).collect(),
        Movement::Left => vec![(0, 0)],
        Movement::Right => vec![(n - 1, m - 1)],
    }
}

/// Turn connections at one junction over every incoming/outgoing pair other
/// than a U-turn onto the incoming edge's own reverse.
pub fn build_turn_connections(
    node_id: i64,
    position: GeoPoint,
    edges: &[&LaneLevelEdge],
) -> Result<Vec<TurnConnection>> {
    let mut out = Vec::new();
    for from in edges.iter().filter(|e| e.to == node_id) {
        for to in edges.iter().filter(|e| e.from == node_id) {
            if to.id == from.id.reverse() || to.id == from.id {
                continue;
            }
            let movement = classify_movement(position, from, to)?;
            out.extend(
                lane_mapping(movement, from.lane_count, to.lane_count)
                    .into_iter()
                    .map(|(fl, tl)| TurnConnection {
                        node_id,
                        from_edge: from.id,
                        from_lane: fl,
                        to_edge: to.id,
                        to_lane: tl,
                        movement,
                    }),
            );
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneLevelNetwork {
    pub junctions: BTreeMap<i64, GeoPoint>,
    /// Sorted by directed edge id.
    pub edges: Vec<LaneLevelEdge>,
    pub connections: Vec<TurnConnection>,
    /// Number of road edges per lane-count source.
    pub provenance: BTreeMap<LaneSource, usize>,
}

impl LaneLevelNetwork {
    pub fn edge(&self, id: DirectedEdge) -> Option<&LaneLevelEdge> {
        self.edges.binary_search_by(|e| e.id.cmp(&id)).ok().map(|k| &self.edges[k])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetgenError::Invalid(m));
        if !self.edges.windows(2).all(|w| w[0].id < w[1].id) {
            return bad("edges not sorted or duplicated".into());
        }
        for e in &self.edges {
            if e.lane_count == 0 || e.lanes.len() != e.lane_count as usize {
                return bad(format!("edge {}: {} lanes for lane_count {}", e.id, e.lanes.len(), e.lane_count));
            }
            if e.centerline.len() < 2 || e.lanes.iter().any(|l| l.len() != e.centerline.len()) {
                return bad(format!("edge {}: lane and centerline point counts differ", e.id));
            }
            for j in [e.from, e.to] {
                if !self.junctions.contains_key(&j) {
                    return bad(format!("edge {}: unknown junction {j}", e.id));
                }
            }
        }
        for c in &self.connections {
            let (Some(f), Some(t)) = (self.edge(c.from_edge), self.edge(c.to_edge)) else {
                return bad(format!("connection {} -> {} references a missing edge", c.from_edge, c.to_edge));
            };
            if c.from_lane >= f.lane_count || c.to_lane >= t.lane_count {
                return bad(format!("connection {} -> {} lane index out of range", c.from_edge, c.to_edge));
            }
            if f.to != c.node_id || t.from != c.node_id {
                return bad(format!("connection {} -> {} does not meet at node {}", c.from_edge, c.to_edge, c.node_id));
            }
            if c.to_edge == c.from_edge.reverse() {
                return bad(format!("connection {} -> {} is a U-turn", c.from_edge, c.to_edge));
            }
        }
        Ok(())
    }
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = items.len().div_ceil(workers).max(1);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Expands every edge direction and connects lanes at every junction.
/// Edges missing from `counts` get a default single lane.
pub fn build_network(
    graph: &RoadGraph,
    counts: &BTreeMap<EdgeId, FusedCount>,
    lane_width_m: f64,
) -> Result<LaneLevelNetwork> {
    let mut jobs = Vec::new();
    for e in &graph.edges {
        jobs.push((e, Direction::Forward));
        if !e.tags.oneway {
            jobs.push((e, Direction::Backward));
        }
    }
    let mut edges = parallel_map(&jobs, |(e, dir)| {
        let (n, src) = counts
            .get(&e.id)
            .map_or((1, LaneSource::Default), |c| (c.lane_count, c.source));
        expand_lanes(e, *dir, n, lane_width_m, src)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    edges.sort_by(|a, b| a.id.cmp(&b.id));

    let mut at_node: BTreeMap<i64, Vec<&LaneLevelEdge>> = BTreeMap::new();
    for e in &edges {
        at_node.entry(e.from).or_default().push(e);
        if e.to != e.from {
            at_node.entry(e.to).or_default().push(e);
        }
    }
    let nodes: Vec<(i64, GeoPoint, Vec<&LaneLevelEdge>)> = graph
        .junctions
        .iter()
        .map(|(&id, &p)| (id, p, at_node.remove(&id).unwrap_or_default()))
        .collect();
    let connections: Vec<TurnConnection> = parallel_map(&nodes, |(id, p, es)| build_turn_connections(*id, *p, es))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut provenance = BTreeMap::new();
    for e in &graph.edges {
        let src = counts.get(&e.id).map_or(LaneSource::Default, |c| c.source);
        *provenance.entry(src).or_default() += 1;
    }
    let net = LaneLevelNetwork {
        junctions: graph.junctions.clone(),
        edges,
        connections,
        provenance,
    };
    net.validate()?;
    Ok(net)
}

fn coord(p: &GeoPoint) -> String {
    format!("[{:.7},{:.7}]", p.lng, p.lat)
}

/// GeoJSON FeatureCollection with one LineString per lane followed by one
/// Point per junction summarising its turn connections.
pub fn export_geojson(net: &LaneLevelNetwork) -> Result<Vec<u8>> {
    net.validate()?;
    let mut features = Vec::new();
    for e in &net.edges {
        for (i, lane) in e.lanes.iter().enumerate() {
            let props = serde_json::json!({
                "edge_id": e.id.edge_id.to_string(),
                "direction": e.id.direction,
                "directed_edge_id": e.id.to_string(),
                "lane_index": i,
                "lane_count": e.lane_count,
                "lane_width_m": e.lane_width_m,
                "source": e.source,
            });
            let coords: Vec<String> = lane.iter().map(coord).collect();
            features.push(format!(
                "{{\"type\":\"Feature\",\"geometry\":{{\"type\":\"LineString\",\"coordinates\":[{}]}},\"properties\":{}}}",
                coords.join(","),
                props
            ));
        }
    }
    let mut by_node: BTreeMap<i64, BTreeMap<&str, usize>> = BTreeMap::new();
    for c in &net.connections {
        *by_node.entry(c.node_id).or_default().entry(c.movement.as_str()).or_default() += 1;
    }
    for (id, p) in &net.junctions {
        let summary = by_node.remove(id).unwrap_or_default();
        let props = serde_json::json!({
            "node_id": id,
            "connections": summary.values().sum::<usize>(),
            "movements": summary,
        });
        features.push(format!(
            "{{\"type\":\"Feature\",\"geometry\":{{\"type\":\"Point\",\"coordinates\":{}}},\"properties\":{}}}",
            coord(p),
            props
        ));
    }
    let mut out = String::from("{\"type\":\"FeatureCollection\",\"features\":[\n");
    out.push_str(&features.join(",\n"));
    out.push_str("\n]}\n");
    Ok(out.into_bytes())
}

/// Plain-text simulation network: nodes, per-direction edges with lane
/// shapes, and lane-to-lane connections.
pub fn export_sim_xml(net: &LaneLevelNetwork) -> Result<Vec<u8>> {
    net.validate()?;
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<network version=\"1\">\n  <nodes>\n");
    for (id, p) in &net.junctions {
        let _ = writeln!(out, "    <node id=\"{id}\" lon=\"{:.7}\" lat=\"{:.7}\"/>", p.lng, p.lat);
    }
    out.push_str("  </nodes>\n  <edges>\n");
    for e in &net.edges {
        let _ = writeln!(
            out,
            "    <edge id=\"{}\" from=\"{}\" to=\"{}\" numLanes=\"{}\" width=\"{:.2}\" source=\"{}\">",
            escape(e.id.to_string().as_str()),
            e.from,
            e.to,
            e.lane_count,
            e.lane_width_m,
            e.source.as_str()
        );
        for (i, lane) in e.lanes.iter().enumerate() {
            let shape: Vec<String> = lane.iter().map(|p| format!("{:.7},{:.7}", p.lng, p.lat)).collect();
            let _ = writeln!(out, "      <lane index=\"{i}\" shape=\"{}\"/>", shape.join(" "));
        }
        out.push_str("    </edge>\n");
    }
    out.push_str("  </edges>\n  <connections>\n");
    for c in &net.connections {
        let _ = writeln!(
            out,
            "    <connection from=\"{}\" to=\"{}\" fromLane=\"{}\" toLane=\"{}\" via=\"{}\" dir=\"{}\"/>",
            escape(c.from_edge.to_string().as_str()),
            escape(c.to_edge.to_string().as_str()),
            c.from_lane,
            c.to_lane,
            c.node_id,
            c.movement.code()
        );
    }
    out.push_str("  </connections>\n</network>\n");
    Ok(out.into_bytes())
}
