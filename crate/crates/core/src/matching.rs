//! Panorama observation tracks and their discrete Fréchet matching against
//! road graph edges.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basemap::{EdgeId, RoadGraph};
use crate::geodesy::{
    bearing_delta_deg, haversine_unchecked, initial_bearing_deg, Datum, GeoPoint, METERS_PER_DEGREE,
};
use crate::laneio::DetectionRecord;
use crate::svcrawl::Catalog;

pub const TRACK_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("discrete Fréchet distance needs non-empty polylines")]
    EmptyInput,
    #[error("tracks must be built from a WGS-84 catalog, got {0}")]
    NotWgs84(Datum),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// Discrete Fréchet distance under an arbitrary point metric, by the
/// coupling recurrence over a rolling row (O(n·m) time, O(m) memory).
pub fn discrete_frechet<T>(p: &[T], q: &[T], metric: impl Fn(&T, &T) -> f64) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    let mut prev = vec![0.0; q.len()];
    let mut cur = vec![0.0; q.len()];
    for (i, pi) in p.iter().enumerate() {
        for (j, qj) in q.iter().enumerate() {
            let d = metric(pi, qj);
            let reach = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = d.max(reach);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[q.len() - 1])
}

pub fn euclidean(a: &(f64, f64), b: &(f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    haversine_unchecked(*a, *b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub pano_id: String,
    pub lng: f64,
    pub lat: f64,
    /// Observed lane count; `None` when no usable detection exists.
    pub lane_count: Option<u32>,
}

impl TrackPoint {
    pub fn position(&self) -> GeoPoint {
        GeoPoint::new(self.lng, self.lat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTrack {
    pub track_id: String,
    pub points: Vec<TrackPoint>,
}

impl ObservationTrack {
    pub fn positions(&self) -> Vec<GeoPoint> {
        self.points.iter().map(TrackPoint::position).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    pub max_gap_m: f64,
    pub max_turn_deg: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            max_gap_m: 100.0,
            max_turn_deg: 60.0,
        }
    }
}

struct PanoGraph<'a> {
    catalog: &'a Catalog,
    index: HashMap<&'a str, usize>,
}

impl<'a> PanoGraph<'a> {
    fn pos(&self, i: usize) -> GeoPoint {
        self.catalog.records[i].position
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.catalog.records[i]
            .links
            .iter()
            .filter_map(|l| self.index.get(l.as_str()).copied())
    }
}

/// Greedily extends `chain` from its last node. A node already claimed by
/// another track may end the chain but is never walked through.
fn extend_chain(
    g: &PanoGraph<'_>,
    chain: &mut Vec<usize>,
    mut heading: Option<f64>,
    visited: &mut [bool],
    blocked: &[usize],
    params: &TrackParams,
) {
    loop {
        let cur = *chain.last().expect("chain is never empty");
        let here = g.pos(cur);
        let mut best: Option<(bool, f64, usize)> = None;
        for n in g.neighbors(cur) {
            if chain.contains(&n) || blocked.contains(&n) {
                continue;
            }
            let there = g.pos(n);
            if haversine_unchecked(here, there) > params.max_gap_m {
                continue;
            }
            let bearing = initial_bearing_deg(here, there);
            let deviation = match heading {
                Some(h) => {
                    let d = bearing_delta_deg(h, bearing);
                    if d > params.max_turn_deg {
                        continue;
                    }
                    d
                }
                None => 0.0,
            };
            // Unclaimed nodes first, then smallest deviation, then link order.
            let key = (visited[n], deviation, n);
            let better = match best {
                None => true,
                Some((bv, bd, _)) => (key.0, key.1) < (bv, bd),
            };
            if better {
                best = Some(key);
            }
        }
        let Some((claimed, _, next)) = best else {
            return;
        };
        heading = Some(initial_bearing_deg(here, g.pos(next)));
        chain.push(next);
        if claimed {
            return;
        }
        visited[next] = true;
    }
}

fn pick_detection<'d>(dets: &[&'d DetectionRecord], bearing: Option<f64>) -> Option<&'d DetectionRecord> {
    match bearing {
        None => dets.first().copied(),
        Some(b) => dets.iter().copied().min_by(|x, y| {
            let dx = bearing_delta_deg(x.heading_deg, b).min(bearing_delta_deg(x.heading_deg, b + 180.0));
            let dy = bearing_delta_deg(y.heading_deg, b).min(bearing_delta_deg(y.heading_deg, b + 180.0));
            dx.total_cmp(&dy)
        }),
    }
}

/// Chains linked panoramas into observation tracks.
///
/// Each track starts at the first unclaimed panorama in catalog order and is
/// grown in both directions along the link whose bearing deviates least from
/// the current heading. A track stops at gaps above `max_gap_m`, at turns
/// above `max_turn_deg`, or at a panorama already claimed by another track
/// (which is kept as its end point). Tracks are oriented to agree with the
/// recorded vehicle headings when those are present.
pub fn build_tracks(
    catalog: &Catalog,
    detections: &[DetectionRecord],
    params: &TrackParams,
) -> Result<Vec<ObservationTrack>> {
    if catalog.datum != Datum::Wgs84 {
        return Err(MatchError::NotWgs84(catalog.datum));
    }
    let g = PanoGraph {
        catalog,
        index: catalog
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.pano_id.as_str(), i))
            .collect(),
    };
    let mut by_pano: HashMap<&str, Vec<&DetectionRecord>> = HashMap::new();
    for d in detections {
        by_pano.entry(d.pano_id.as_str()).or_default().push(d);
    }

    let n = catalog.records.len();
    let mut visited = vec![false; n];
    let mut tracks = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut forward = vec![start];
        extend_chain(&g, &mut forward, None, &mut visited, &[], params);
        let mut backward = vec![start];
        if forward.len() >= 2 {
            let reverse = (initial_bearing_deg(g.pos(start), g.pos(forward[1])) + 180.0) % 360.0;
            extend_chain(&g, &mut backward, Some(reverse), &mut visited, &forward[1..], params);
        }
        let mut order: Vec<usize> = backward[1..].iter().rev().copied().collect();
        order.extend_from_slice(&forward);
        if order.len() < 2 {
            continue;
        }

        let headings_agree: i64 = order
            .windows(2)
            .filter_map(|w| {
                let h = catalog.records[w[0]].heading_deg?;
                let b = initial_bearing_deg(g.pos(w[0]), g.pos(w[1]));
                Some(if bearing_delta_deg(h, b) < 90.0 { 1 } else { -1 })
            })
            .sum();
        if headings_agree < 0 {
            order.reverse();
        }

        let points = order
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let r = &catalog.records[i];
                let bearing = if k + 1 < order.len() {
                    Some(initial_bearing_deg(r.position, g.pos(order[k + 1])))
                } else if k > 0 {
                    Some(initial_bearing_deg(g.pos(order[k - 1]), r.position))
                } else {
                    None
                };
                let lane_count = by_pano
                    .get(r.pano_id.as_str())
                    .and_then(|d| pick_detection(d, bearing))
                    .filter(|d| !d.negative && d.lane_count() > 0)
                    .map(|d| d.lane_count() as u32);
                TrackPoint {
                    pano_id: r.pano_id.clone(),
                    lng: r.position.lng,
                    lat: r.position.lat,
                    lane_count,
                }
            })
            .collect();
        tracks.push(ObservationTrack {
            track_id: format!("t{:05}", tracks.len()),
            points,
        });
    }
    Ok(tracks)
}

/// Cuts tracks where they pass a junction: within each run of consecutive
/// points lying within `radius_m` of the same junction, the point nearest to
/// it ends one piece and starts the next.
pub fn split_at_junctions(tracks: &[ObservationTrack], graph: &RoadGraph, radius_m: f64) -> Vec<ObservationTrack> {
    let junctions: Vec<(i64, GeoPoint)> = graph.junctions.iter().map(|(k, v)| (*k, *v)).collect();
    let mut out = Vec::new();
    for track in tracks {
        let nearest: Vec<Option<(i64, f64)>> = track
            .points
            .iter()
            .map(|p| {
                junctions
                    .iter()
                    .map(|(id, j)| (*id, haversine_unchecked(p.position(), *j)))
                    .filter(|(_, d)| *d <= radius_m)
                    .min_by(|a, b| a.1.total_cmp(&b.1))
            })
            .collect();

        let mut cuts = Vec::new();
        let mut k = 0;
        while k < nearest.len() {
            let Some((junction, _)) = nearest[k] else {
                k += 1;
                continue;
            };
            let run_start = k;
            while k < nearest.len() && nearest[k].is_some_and(|(j, _)| j == junction) {
                k += 1;
            }
            let best = (run_start..k)
                .min_by(|&a, &b| nearest[a].unwrap().1.total_cmp(&nearest[b].unwrap().1))
                .unwrap();
            cuts.push(best);
        }

        let mut bounds = vec![0];
        bounds.extend(cuts.into_iter().filter(|&c| c != 0 && c != track.points.len() - 1));
        bounds.push(track.points.len() - 1);
        for (piece, w) in bounds.windows(2).enumerate() {
            let pts = &track.points[w[0]..=w[1]];
            if pts.len() >= 2 {
                out.push(ObservationTrack {
                    track_id: format!("{}.{}", track.track_id, piece),
                    points: pts.to_vec(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub track_id: String,
    pub edge_id: Option<EdgeId>,
    /// Distance to the best candidate edge; `None` when there was no candidate.
    pub frechet_m: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub radius_m: f64,
    /// Edge geometry is resampled to at most this spacing before comparison.
    pub densify_m: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            radius_m: 25.0,
            densify_m: 5.0,
        }
    }
}

/// Inserts evenly spaced points so that no segment exceeds `max_step_m`.
pub fn densify(points: &[GeoPoint], max_step_m: f64) -> Vec<GeoPoint> {
    let mut out = Vec::with_capacity(points.len());
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let steps = (haversine_unchecked(a, b) / max_step_m).ceil().max(1.0) as usize;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            out.push(GeoPoint::new(a.lng + t * (b.lng - a.lng), a.lat + t * (b.lat - a.lat)));
        }
    }
    if let Some(last) = points.last() {
        out.push(*last);
    }
    out
}

type Bbox = [f64; 4];

fn bbox(points: &[GeoPoint]) -> Bbox {
    points.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p.lng), b[1].min(p.lat), b[2].max(p.lng), b[3].max(p.lat)],
    )
}

/// Best edge for a track by discrete Fréchet distance.
///
/// Candidates are edges whose bounding box, inflated by the radius,
/// intersects the track's bounding box. Two-way edges are also compared in
/// reverse. Ties go to the smallest edge id.
pub fn match_track(track: &ObservationTrack, graph: &RoadGraph, params: &MatchParams) -> MatchResult {
    let pts = track.positions();
    let tb = bbox(&pts);
    let mid_lat = (tb[1] + tb[3]) / 2.0;
    let d_lat = params.radius_m / METERS_PER_DEGREE;
    let d_lng = params.radius_m / (METERS_PER_DEGREE * mid_lat.to_radians().cos().max(1e-6));

    let mut best: Option<(f64, EdgeId)> = None;
    for edge in &graph.edges {
        let eb = bbox(&edge.geometry);
        let hit = eb[0] - d_lng <= tb[2] && eb[2] + d_lng >= tb[0] && eb[1] - d_lat <= tb[3] && eb[3] + d_lat >= tb[1];
        if !hit || pts.is_empty() {
            continue;
        }
        let dense = densify(&edge.geometry, params.densify_m);
        let mut d = discrete_frechet(&pts, &dense, haversine).expect("non-empty");
        if !edge.tags.oneway {
            let rev: Vec<GeoPoint> = dense.iter().rev().copied().collect();
            d = d.min(discrete_frechet(&pts, &rev, haversine).expect("non-empty"));
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && edge.id < bid),
        };
        if better {
            best = Some((d, edge.id));
        }
    }
    match best {
        Some((d, id)) => MatchResult {
            track_id: track.track_id.clone(),
            edge_id: Some(id),
            frechet_m: Some(d),
            accepted: d <= params.radius_m,
        },
        None => MatchResult {
            track_id: track.track_id.clone(),
            edge_id: None,
            frechet_m: None,
            accepted: false,
        },
    }
}

/// Matches every track, spreading the work over the available cores.
/// Output order follows input order.
pub fn match_tracks(tracks: &[ObservationTrack], graph: &RoadGraph, params: &MatchParams) -> Vec<MatchResult> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = tracks.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = tracks
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|t| match_track(t, graph, params)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("match worker panicked"))
            .collect()
    })
}

#[derive(Serialize, Deserialize)]
struct TrackHeader {
    schema_version: u64,
    kind: String,
}

pub fn tracks_to_string(tracks: &[ObservationTrack]) -> String {
    let mut out = serde_json::to_string(&TrackHeader {
        schema_version: TRACK_SCHEMA_VERSION,
        kind: "tracks".into(),
    })
    .expect("header serializes");
    out.push('\n');
    for t in tracks {
        let _ = writeln!(out, "{}", serde_json::to_string(t).expect("track serializes"));
    }
    out
}

pub fn tracks_from_str(text: &str) -> Result<Vec<ObservationTrack>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: TrackHeader = lines
        .next()
        .ok_or_else(|| "missing header".to_string())
        .and_then(|(_, l)| serde_json::from_str(l).map_err(|e| e.to_string()))
        .map_err(|message| MatchError::Parse { line: 1, message })?;
    if header.schema_version != TRACK_SCHEMA_VERSION || header.kind != "tracks" {
        return Err(MatchError::Parse {
            line: 1,
            message: "not a version-1 tracks file".into(),
        });
    }
    lines
        .map(|(i, l)| {
            let t: ObservationTrack = serde_json::from_str(l).map_err(|e| MatchError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if t.points.len() < 2 {
                return Err(MatchError::Parse {
                    line: i + 1,
                    message: "track has fewer than 2 points".into(),
                });
            }
            Ok(t)
        })
        .collect()
}

pub fn matches_to_string(matches: &[MatchResult]) -> String {
    matches
        .iter()
        .map(|m| serde_json::to_string(m).expect("match serializes") + "\n")
        .collect()
}

pub fn matches_from_str(text: &str) -> Result<Vec<MatchResult>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MatchError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
