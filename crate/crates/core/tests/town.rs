use std::collections::BTreeMap;
use std::time::Duration;

use laneforge::basemap::{build_graph, parse_osm};
use laneforge::fixture::write_town;
use laneforge::geodesy::Datum;
use laneforge::laneio::{evaluate_detections, read_annotations, read_detections, DEFAULT_TAU};
use laneforge::matching::{build_tracks, match_tracks, split_at_junctions, MatchParams, TrackParams};
use laneforge::netgen::{build_network, fuse_lane_counts, LaneSource, DEFAULT_LANE_WIDTH_M};
use laneforge::svcrawl::{catalog_to_wgs84, crawl, CrawlLimits, FixtureProvider, Region};

#[test]
fn town_runs_through_every_library_stage() {
    let dir = tempfile::tempdir().unwrap();
    let truth = write_town(dir.path()).unwrap();

    let graph = build_graph(&parse_osm(&std::fs::read(dir.path().join("town.osm")).unwrap()).unwrap());
    assert_eq!(graph.junctions.len(), 16);
    assert_eq!(graph.edges.len(), 24);
    let ids: Vec<_> = graph.edges.iter().map(|e| e.id).collect();
    assert_eq!(ids, truth.lane_counts.keys().copied().collect::<Vec<_>>());
    assert_eq!(truth.observed.len(), 23);

    let provider = FixtureProvider::new(dir.path().join("panoramas"), Datum::Bd09);
    let region = Region::new(truth.region_bd09, Datum::Bd09).unwrap();
    let limits = CrawlLimits {
        min_interval: Duration::ZERO,
        ..CrawlLimits::default()
    };
    let catalog = crawl(&[truth.seed_pano.clone()], &region, &provider, &limits).unwrap();
    let on_disk = std::fs::read_dir(dir.path().join("panoramas")).unwrap().count();
    assert_eq!(catalog.records.len(), on_disk);
    let catalog = catalog_to_wgs84(&catalog).unwrap();

    let detections = read_detections(&dir.path().join("detections.jsonl")).unwrap();
    let tracks = build_tracks(&catalog, &detections, &TrackParams::default()).unwrap();
    let pieces = split_at_junctions(&tracks, &graph, 15.0);
    let matches = match_tracks(&pieces, &graph, &MatchParams::default());
    let accepted = matches.iter().filter(|m| m.accepted).count();
    assert!(accepted * 10 >= matches.len() * 9, "{accepted}/{}", matches.len());

    let fused = fuse_lane_counts(&pieces, &matches, &graph);
    let mut wrong = BTreeMap::new();
    for e in &truth.observed {
        let f = &fused[e];
        assert_eq!(f.source, LaneSource::Observed, "{e}");
        if f.lane_count != truth.lane_counts[e] {
            wrong.insert(*e, (f.lane_count, truth.lane_counts[e]));
        }
    }
    assert!(wrong.is_empty(), "{wrong:?}");

    let net = build_network(&graph, &fused, DEFAULT_LANE_WIDTH_M).unwrap();
    assert_eq!(net.edges.len(), 24 * 2 - 3);
    assert_eq!(net.provenance.values().sum::<usize>(), 24);

    let annotations = read_annotations(&dir.path().join("annotations.jsonl")).unwrap();
    let m = evaluate_detections(&detections, &annotations, DEFAULT_TAU).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    assert_eq!(m.negative_accuracy, Some(1.0));
}
