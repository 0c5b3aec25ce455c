use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use laneforge::basemap::{build_graph, polyline_length_m, OsmDoc, OsmWay};
use laneforge::geodesy::{Datum, GeoPoint};
use laneforge::laneio::{
    complete_outer_lane, detections_from_str, detections_to_string, evaluate_detections, suppress_separated_lanes,
    AnnotationRecord, DetectionRecord, Side,
};
use laneforge::lanegeom::{even_rows, fit_curve, hungarian, sample_curve, CostMatrix, LaneCurve};
use laneforge::matching::{discrete_frechet, euclidean};
use laneforge::netgen::{expand_lanes, fuse_votes, Direction, LaneSource};
use laneforge::svcrawl::{catalog_from_str, catalog_to_string, Catalog, PanoramaMeta, Region};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec((0u32..50).prop_map(f64::from), c), r)
    })
}

fn polyline() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..12)
}

fn eval_poly(c: &[f64; 4], y: f64) -> f64 {
    ((c[0] * y + c[1]) * y + c[2]) * y + c[3]
}

proptest! {
    #[test]
    fn hungarian_ignores_constant_shifts(rows in matrix(), k in 0usize..6, shift in 0u32..20) {
        let base = CostMatrix::from_rows(&rows).unwrap();
        let (r, c) = (base.rows(), base.cols());
        let mut shifted = rows.clone();
        // Every row (or column) of the smaller side is assigned exactly once.
        if r <= c {
            let k = k % r;
            for v in &mut shifted[k] {
                *v += shift as f64;
            }
        } else {
            let k = k % c;
            for row in &mut shifted {
                row[k] += shift as f64;
            }
        }
        let a = hungarian(&base);
        let b = hungarian(&CostMatrix::from_rows(&shifted).unwrap());
        prop_assert_eq!(b.total_cost, a.total_cost + shift as f64);
        prop_assert_eq!(a.pairs.len(), r.min(c));
    }

    #[test]
    fn fit_recovers_sampled_cubic(c in prop::array::uniform4(-1.0..1.0f64), n in 4usize..30) {
        let curve = LaneCurve::new(c, (0.0, 1.0), 1.0);
        let pts = sample_curve(&curve, &even_rows(0.0, 1.0, n));
        let fit = fit_curve(&pts, 3).unwrap();
        prop_assert!(fit.residual_rms < 1e-9);
        for (x, y) in pts {
            prop_assert!((fit.curve.eval(y) - x).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_beats_any_other_cubic(
        pts in prop::collection::vec((-1.0..1.0f64, 0.0..1.0f64), 8..30),
        other in prop::array::uniform4(-2.0..2.0f64),
    ) {
        let Ok(fit) = fit_curve(&pts, 3) else { return Ok(()) };
        let rms = |c: &[f64; 4]| {
            (pts.iter().map(|&(x, y)| (eval_poly(c, y) - x).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
        };
        prop_assert!(fit.residual_rms <= rms(&other) + 1e-9);
        let mut nudged = fit.curve.coeffs;
        nudged[3] += 1e-3;
        prop_assert!(fit.residual_rms <= rms(&nudged) + 1e-12);
    }

    #[test]
    fn frechet_symmetric_and_reversible(p in polyline(), q in polyline()) {
        let d = discrete_frechet(&p, &q, euclidean).unwrap();
        prop_assert_eq!(d, discrete_frechet(&q, &p, euclidean).unwrap());
        let (mut pr, mut qr) = (p.clone(), q.clone());
        pr.reverse();
        qr.reverse();
        prop_assert_eq!(d, discrete_frechet(&pr, &qr, euclidean).unwrap());
        let ends = euclidean(&p[0], &q[0]).max(euclidean(p.last().unwrap(), q.last().unwrap()));
        prop_assert!(d >= ends);
        let mut longer = p.clone();
        longer.push((0.0, 0.0));
        let d2 = discrete_frechet(&longer, &q, euclidean).unwrap();
        prop_assert!(d2 >= euclidean(&(0.0, 0.0), q.last().unwrap()));
    }

    #[test]
    fn fused_count_is_positive(votes in prop::collection::vec(0u32..6, 0..10), tag in prop::option::of(0u32..8), oneway: bool) {
        let mut graph = town_edge();
        graph.tags.lanes = tag;
        graph.tags.oneway = oneway;
        let f = fuse_votes(&votes, &graph);
        prop_assert!(f.lane_count > 0);
        if votes.iter().all(|&v| v == 0) {
            prop_assert_ne!(f.source, LaneSource::Observed);
        }
    }

    #[test]
    fn extreme_lanes_straddle_the_centerline(
        steps in prop::collection::vec((5.0..80.0f64, -1.2..1.2f64), 1..6),
        count in 1u32..6,
        width in 2.5..4.5f64,
        backward: bool,
    ) {
        let mut edge = town_edge();
        edge.geometry = walk(&steps);
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        let e = expand_lanes(&edge, dir, count, width, LaneSource::Default).unwrap();
        prop_assert_eq!(e.lanes.len(), count as usize);
        let (first, last) = (&e.lanes[0], &e.lanes[count as usize - 1]);
        for (k, c) in e.centerline.iter().enumerate() {
            prop_assert_eq!(first.len(), e.centerline.len());
            let mid = GeoPoint::new((first[k].lng + last[k].lng) / 2.0, (first[k].lat + last[k].lat) / 2.0);
            prop_assert!(laneforge::geodesy::haversine_m(mid, *c).unwrap() < 0.01);
        }
    }

    #[test]
    fn split_edges_cover_the_way(len in 2usize..12, shared in prop::collection::btree_set(1usize..11, 0..4)) {
        let nodes: BTreeMap<i64, GeoPoint> = (0..len as i64)
            .map(|k| (k, GeoPoint::new(113.9 + 0.0003 * k as f64, 22.5 + 0.0001 * (k % 3) as f64)))
            .chain((0..len as i64).map(|k| (100 + k, GeoPoint::new(113.9 + 0.0003 * k as f64, 22.51))))
            .collect();
        let main = OsmWay { id: 1, node_refs: (0..len as i64).collect(), tags: highway() };
        let mut ways = vec![main.clone()];
        for (i, &s) in shared.iter().filter(|&&s| s < len).enumerate() {
            ways.push(OsmWay { id: 10 + i as i64, node_refs: vec![s as i64, 100 + s as i64], tags: highway() });
        }
        let graph = build_graph(&OsmDoc { nodes: nodes.clone(), ways });
        let pieces: Vec<_> = graph.edges.iter().filter(|e| e.id.way == 1).collect();
        let total: f64 = pieces.iter().map(|e| e.length_m).sum();
        let whole = polyline_length_m(&main.node_refs.iter().map(|r| nodes[r]).collect::<Vec<_>>());
        prop_assert!((total - whole).abs() < 1e-6 * whole.max(1.0));
        for w in pieces.windows(2) {
            prop_assert_eq!(w[0].to, w[1].from);
        }
    }

    #[test]
    fn suppression_is_idempotent(rec in annotation(), sep in prop::collection::vec((0.0..1024.0f64, 0.0..512.0f64), 0..4)) {
        let mut rec = rec;
        rec.separators = vec![sep];
        let once = suppress_separated_lanes(&rec);
        prop_assert_eq!(suppress_separated_lanes(&once), once.clone());
        prop_assert_eq!(once.lane_count, once.lanes.len());
    }

    #[test]
    fn completion_keeps_existing_lanes(rec in annotation(), right: bool) {
        let side = if right { Side::Right } else { Side::Left };
        if let Ok(done) = complete_outer_lane(&rec, side) {
            prop_assert_eq!(done.lanes.len(), rec.lanes.len() + 1);
            for lane in &rec.lanes {
                prop_assert!(done.lanes.contains(lane));
            }
        }
    }

    #[test]
    fn evaluation_ignores_lane_order(rec in annotation(), noise in prop::collection::vec(-0.002..0.002f64, 6), seed: u64) {
        let curves: Vec<LaneCurve> = rec.lanes.iter().zip(&noise).map(|(l, dx)| {
            let x0 = l[0].0 / rec.width as f64;
            LaneCurve::new([0.0, 0.0, 0.0, x0 + dx], (0.0, 1.0), 0.9)
        }).collect();
        let mut shuffled = curves.clone();
        shuffled.rotate_left(seed as usize % curves.len().max(1));
        let a = evaluate_detections(&[DetectionRecord::new("img", 0.0, curves)], std::slice::from_ref(&rec), 0.02).unwrap();
        let b = evaluate_detections(&[DetectionRecord::new("img", 0.0, shuffled)], std::slice::from_ref(&rec), 0.02).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn detections_round_trip(recs in prop::collection::vec(detection(), 0..5)) {
        let text = detections_to_string(&recs);
        prop_assert_eq!(detections_from_str(&text).unwrap(), recs);
    }

    #[test]
    fn catalog_round_trip(n in 0usize..6, heading in prop::option::of(0.0..360.0f64), secs in 0i64..2_000_000_000) {
        let region = Region::new([113.0, 22.0, 114.0, 23.0], Datum::Gcj02).unwrap();
        let mut c = Catalog::new(Datum::Gcj02, vec!["a0".into()], region, "memory".into());
        c.crawled_at = Some(Utc.timestamp_opt(secs, 0).unwrap());
        c.records = (0..n).map(|k| PanoramaMeta {
            pano_id: format!("a{k}"),
            position: GeoPoint::new(113.5 + 1e-7 * k as f64 / 3.0, 22.5),
            datum: Datum::Gcj02,
            capture_time: Some(Utc.timestamp_opt(secs + k as i64, 0).unwrap()),
            heading_deg: heading,
            links: (0..n).filter(|&j| j != k).map(|j| format!("a{j}")).collect(),
        }).collect();
        c.boundary = vec!["z".into()];
        let text = catalog_to_string(&c).unwrap();
        prop_assert_eq!(catalog_from_str(&text).unwrap(), c);
    }
}

/// Vertical lanes at distinct, well separated columns.
fn annotation() -> impl Strategy<Value = AnnotationRecord> {
    prop::collection::btree_set(1u32..10, 2..6).prop_map(|cols| {
        let lanes: Vec<Vec<(f64, f64)>> = cols
            .iter()
            .map(|&c| (0..8).map(|k| (c as f64 * 100.0, 200.0 + 40.0 * k as f64)).collect())
            .collect();
        AnnotationRecord {
            image_id: "img".into(),
            width: 1024,
            height: 512,
            lane_count: lanes.len(),
            lanes,
            is_negative: false,
            grid_zones: Vec::new(),
            separators: Vec::new(),
        }
    })
}

fn detection() -> impl Strategy<Value = DetectionRecord> {
    (
        "[a-z0-9]{1,8}",
        0.0..360.0f64,
        prop::collection::vec((prop::array::uniform4(-0.1..0.1f64), 0.2..0.8f64, 0.0..0.5f64, 0.5..1.0f64, 0.0..1.0f64), 0..4),
    )
        .prop_map(|(id, heading, lanes)| {
            let lanes = lanes
                .into_iter()
                .map(|(c, x0, top, bottom, s)| LaneCurve::new([c[0], c[1], c[2], x0 + c[3]], (top, bottom), s))
                .collect();
            DetectionRecord::new(id, heading, lanes)
        })
}

fn highway() -> BTreeMap<String, String> {
    BTreeMap::from([("highway".to_string(), "residential".to_string())])
}

/// Polyline starting at the fixture origin, walking `(length, turn)` steps.
fn walk(steps: &[(f64, f64)]) -> Vec<GeoPoint> {
    let frame = laneforge::geodesy::LocalFrame::new(GeoPoint::new(113.93, 22.54)).unwrap();
    let (mut x, mut y, mut h) = (0.0, 0.0, 0.3f64);
    let mut out = vec![frame.unproject(x, y)];
    for &(len, turn) in steps {
        h += turn;
        x += len * h.cos();
        y += len * h.sin();
        out.push(frame.unproject(x, y));
    }
    out
}

fn town_edge() -> laneforge::basemap::RoadEdge {
    let doc = OsmDoc {
        nodes: BTreeMap::from([(1, GeoPoint::new(113.93, 22.54)), (2, GeoPoint::new(113.931, 22.54))]),
        ways: vec![OsmWay { id: 7, node_refs: vec![1, 2], tags: highway() }],
    };
    build_graph(&doc).edges.remove(0)
}
