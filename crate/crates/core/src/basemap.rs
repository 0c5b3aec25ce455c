//! OpenStreetMap XML ingestion and the junction/edge road graph built from it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geodesy::{haversine_unchecked, GeoPoint};

/// Highway classes kept as drivable roads.
pub const HIGHWAY_ALLOWLIST: &[&str] = &[
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "residential",
    "unclassified",
    "service",
    "motorway_link",
    "trunk_link",
    "primary_link",
    "secondary_link",
    "tertiary_link",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BasemapError {
    #[error("malformed OSM XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("way {way_id} references missing node {node_id}")]
    DanglingRef { way_id: i64, node_id: i64 },
    #[error("invalid edge id {0:?}")]
    BadEdgeId(String),
}

pub type Result<T> = std::result::Result<T, BasemapError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OsmWay {
    pub id: i64,
    pub node_refs: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OsmDoc {
    pub nodes: BTreeMap<i64, GeoPoint>,
    pub ways: Vec<OsmWay>,
}

fn xml_err(reader: &Reader<&[u8]>, message: impl fmt::Display) -> BasemapError {
    BasemapError::Xml {
        offset: reader.buffer_position(),
        message: message.to_string(),
    }
}

fn attrs(reader: &Reader<&[u8]>, e: &BytesStart<'_>) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for a in e.attributes() {
        let a = a.map_err(|err| xml_err(reader, err))?;
        let key = a.key.as_ref().to_string();
        let value = a
            .normalized_value(XmlVersion::Implicit1_0)
            .map_err(|err| xml_err(reader, err))?;
        out.insert(key, value.into_owned());
    }
    Ok(out)
}

fn required<T: FromStr>(reader: &Reader<&[u8]>, map: &HashMap<String, String>, key: &str, tag: &str) -> Result<T> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| xml_err(reader, format!("<{tag}> lacks a valid {key:?} attribute")))
}

/// Parses an OSM XML document, keeping only ways whose `highway` tag is in
/// [`HIGHWAY_ALLOWLIST`] and the nodes they reference.
pub fn parse_osm(xml: &[u8]) -> Result<OsmDoc> {
    let mut reader = Reader::from_reader(xml);
    let mut nodes: BTreeMap<i64, GeoPoint> = BTreeMap::new();
    let mut ways = Vec::new();
    let mut current: Option<OsmWay> = None;
    let mut saw_root = false;
    let mut depth = 0usize;

    loop {
        let event = reader.read_event().map_err(|err| BasemapError::Xml {
            offset: reader.error_position(),
            message: err.to_string(),
        })?;
        let (e, is_empty) = match event {
            Event::Start(e) => (e, false),
            Event::Empty(e) => (e, true),
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                if e.name().as_ref() == "way" {
                    if let Some(way) = current.take() {
                        ways.push(way);
                    }
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        if depth == 0 {
            if e.name().as_ref() != "osm" {
                return Err(xml_err(&reader, "root element must be <osm>"));
            }
            saw_root = true;
        }
        if !is_empty {
            depth += 1;
        }
        match e.name().as_ref() {
            "node" => {
                let a = attrs(&reader, &e)?;
                let id = required(&reader, &a, "id", "node")?;
                let lat: f64 = required(&reader, &a, "lat", "node")?;
                let lon: f64 = required(&reader, &a, "lon", "node")?;
                let p = GeoPoint::new(lon, lat)
                    .validate()
                    .map_err(|err| xml_err(&reader, format!("node {id}: {err}")))?;
                nodes.insert(id, p);
            }
            "way" => {
                let a = attrs(&reader, &e)?;
                let way = OsmWay {
                    id: required(&reader, &a, "id", "way")?,
                    node_refs: Vec::new(),
                    tags: BTreeMap::new(),
                };
                if is_empty {
                    ways.push(way);
                } else {
                    current = Some(way);
                }
            }
            "nd" => {
                if let Some(way) = current.as_mut() {
                    let a = attrs(&reader, &e)?;
                    let r: i64 = required(&reader, &a, "ref", "nd")?;
                    // Repeated consecutive refs carry no geometry.
                    if way.node_refs.last() != Some(&r) {
                        way.node_refs.push(r);
                    }
                }
            }
            "tag" => {
                if let Some(way) = current.as_mut() {
                    let a = attrs(&reader, &e)?;
                    if let (Some(k), Some(v)) = (a.get("k"), a.get("v")) {
                        way.tags.insert(k.clone(), v.clone());
                    }
                }
            }
            _ => {}
        }
    }
    if !saw_root {
        return Err(BasemapError::Xml {
            offset: 0,
            message: "document has no <osm> root".into(),
        });
    }

    ways.retain(|w: &OsmWay| {
        w.node_refs.len() >= 2
            && w.tags
                .get("highway")
                .is_some_and(|h| HIGHWAY_ALLOWLIST.contains(&h.as_str()))
    });
    let mut used = BTreeSet::new();
    for w in &ways {
        for r in &w.node_refs {
            if !nodes.contains_key(r) {
                return Err(BasemapError::DanglingRef {
                    way_id: w.id,
                    node_id: *r,
                });
            }
            used.insert(*r);
        }
    }
    nodes.retain(|id, _| used.contains(id));
    Ok(OsmDoc { nodes, ways })
}

/// Edge identifier derived from the source way and the split index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId {
    pub way: i64,
    pub index: u32,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.way, self.index)
    }
}

impl FromStr for EdgeId {
    type Err = BasemapError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || BasemapError::BadEdgeId(s.to_string());
        let (way, index) = s.rsplit_once('_').ok_or_else(bad)?;
        Ok(EdgeId {
            way: way.parse().map_err(|_| bad())?,
            index: index.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for EdgeId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTags {
    pub highway: String,
    /// Parsed `lanes` tag; a total over both directions unless oneway.
    pub lanes: Option<u32>,
    pub oneway: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadEdge {
    pub id: EdgeId,
    pub from: i64,
    pub to: i64,
    pub geometry: Vec<GeoPoint>,
    pub tags: EdgeTags,
    pub length_m: f64,
}

/// Junction nodes joined by edges that keep their full intermediate geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoadGraph {
    pub junctions: BTreeMap<i64, GeoPoint>,
    pub edges: Vec<RoadEdge>,
    index: HashMap<EdgeId, usize>,
}

impl RoadGraph {
    pub fn new(junctions: BTreeMap<i64, GeoPoint>, mut edges: Vec<RoadEdge>) -> Self {
        edges.sort_by_key(|e| e.id);
        let index = edges.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Self {
            junctions,
            edges,
            index,
        }
    }

    pub fn edge(&self, id: EdgeId) -> Option<&RoadEdge> {
        self.index.get(&id).map(|&i| &self.edges[i])
    }

    /// Edges with an end at `node`, in edge id order.
    pub fn incident_edges(&self, node: i64) -> impl Iterator<Item = &RoadEdge> {
        self.edges.iter().filter(move |e| e.from == node || e.to == node)
    }

    /// Number of edge ends at `node` (a loop edge counts twice).
    pub fn degree(&self, node: i64) -> usize {
        self.edges
            .iter()
            .map(|e| usize::from(e.from == node) + usize::from(e.to == node))
            .sum()
    }

    /// Undirected connected components as sorted junction id lists.
    pub fn components(&self) -> Vec<Vec<i64>> {
        let mut parent: BTreeMap<i64, i64> = self.junctions.keys().map(|&k| (k, k)).collect();
        fn find(parent: &mut BTreeMap<i64, i64>, x: i64) -> i64 {
            let p = parent[&x];
            if p == x {
                return x;
            }
            let root = find(parent, p);
            parent.insert(x, root);
            root
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            if a != b {
                parent.insert(a.max(b), a.min(b));
            }
        }
        let mut groups: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        let keys: Vec<i64> = self.junctions.keys().copied().collect();
        for k in keys {
            let root = find(&mut parent, k);
            groups.entry(root).or_default().push(k);
        }
        groups.into_values().collect()
    }
}

pub fn polyline_length_m(points: &[GeoPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| haversine_unchecked(w[0], w[1]))
        .sum()
}

fn parse_lanes(v: &str) -> Option<u32> {
    v.trim().parse::<u32>().ok().filter(|&n| n > 0)
}

fn parse_oneway(v: &str) -> bool {
    matches!(v.trim(), "yes" | "true" | "1")
}

/// Splits every way at junction nodes: way end points and nodes used more
/// than once across the retained ways.
pub fn build_graph(doc: &OsmDoc) -> RoadGraph {
    let mut uses: HashMap<i64, usize> = HashMap::new();
    for w in &doc.ways {
        let closed = w.node_refs.first() == w.node_refs.last();
        let n = if closed { w.node_refs.len() - 1 } else { w.node_refs.len() };
        for r in &w.node_refs[..n] {
            *uses.entry(*r).or_default() += 1;
        }
    }

    let mut junctions = BTreeMap::new();
    let mut edges = Vec::new();
    for w in &doc.ways {
        let tags = EdgeTags {
            highway: w.tags.get("highway").cloned().unwrap_or_default(),
            lanes: w.tags.get("lanes").and_then(|v| parse_lanes(v)),
            oneway: w.tags.get("oneway").is_some_and(|v| parse_oneway(v)),
        };
        let refs = &w.node_refs;
        let last = refs.len() - 1;
        let mut start = 0;
        let mut index = 0u32;
        for k in 1..=last {
            let r = refs[k];
            if k == last || uses.get(&r).copied().unwrap_or(0) >= 2 {
                let geometry: Vec<GeoPoint> = refs[start..=k].iter().map(|id| doc.nodes[id]).collect();
                junctions.insert(refs[start], doc.nodes[&refs[start]]);
                junctions.insert(r, doc.nodes[&r]);
                edges.push(RoadEdge {
                    id: EdgeId { way: w.id, index },
                    from: refs[start],
                    to: r,
                    length_m: polyline_length_m(&geometry),
                    geometry,
                    tags: tags.clone(),
                });
                index += 1;
                start = k;
            }
        }
    }
    RoadGraph::new(junctions, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn osm(body: &str) -> Vec<u8> {
        format!("<?xml version='1.0' encoding='UTF-8'?>\n<osm version=\"0.6\">\n{body}\n</osm>").into_bytes()
    }

    const NODES: &str = r#"
        <node id="1" lat="22.500" lon="113.900"/>
        <node id="2" lat="22.500" lon="113.901"/>
        <node id="3" lat="22.500" lon="113.902"/>
        <node id="4" lat="22.501" lon="113.901"/>
        <node id="5" lat="22.510" lon="113.950"/>
        <node id="6" lat="22.511" lon="113.950"/>"#;

    #[test]
    fn keeps_highway_ways_only() {
        let doc = parse_osm(&osm(&format!(
            r#"{NODES}
            <way id="10"><nd ref="1"/><nd ref="2"/><tag k="highway" v="residential"/></way>
            <way id="11"><nd ref="5"/><nd ref="6"/><tag k="building" v="yes"/></way>"#
        )))
        .unwrap();
        assert_eq!(doc.ways.len(), 1);
        assert_eq!(doc.ways[0].id, 10);
        assert_eq!(doc.nodes.len(), 2);

        let doc = parse_osm(&osm(&format!(
            r#"{NODES}<way id="11"><nd ref="5"/><nd ref="6"/><tag k="building" v="yes"/></way>"#
        )))
        .unwrap();
        assert!(doc.ways.is_empty());
    }

    #[test]
    fn dangling_refs_and_bad_xml() {
        let err = parse_osm(&osm(
            r#"<node id="1" lat="22.5" lon="113.9"/>
            <way id="77"><nd ref="1"/><nd ref="99"/><tag k="highway" v="primary"/></way>"#,
        ))
        .unwrap_err();
        assert_eq!(err, BasemapError::DanglingRef { way_id: 77, node_id: 99 });

        let err = parse_osm(b"<osm><node id=\"1\" lat=\"1\" lon=\"2\"></osm>").unwrap_err();
        assert!(matches!(err, BasemapError::Xml { offset, .. } if offset > 0), "{err:?}");
        assert!(matches!(parse_osm(b"<gpx></gpx>"), Err(BasemapError::Xml { .. })));
    }

    #[test]
    fn splits_at_shared_nodes() {
        let doc = parse_osm(&osm(&format!(
            r#"{NODES}
            <way id="10"><nd ref="1"/><nd ref="2"/><nd ref="3"/><tag k="highway" v="residential"/><tag k="lanes" v="4"/></way>
            <way id="20"><nd ref="2"/><nd ref="4"/><tag k="highway" v="service"/><tag k="oneway" v="yes"/></way>"#
        )))
        .unwrap();
        let g = build_graph(&doc);
        let ids: Vec<String> = g.edges.iter().map(|e| e.id.to_string()).collect();
        assert_eq!(ids, vec!["10_0", "10_1", "20_0"]);
        assert_eq!((g.edges[0].from, g.edges[0].to), (1, 2));
        assert_eq!((g.edges[1].from, g.edges[1].to), (2, 3));
        assert_eq!(g.edges[0].tags.lanes, Some(4));
        assert!(g.edges[2].tags.oneway);
        assert_eq!((g.edges[2].from, g.edges[2].to), (2, 4));
        assert_eq!(g.degree(2), 3);
        assert_eq!(g.junctions.len(), 4);

        let whole = polyline_length_m(&[doc.nodes[&1], doc.nodes[&2], doc.nodes[&3]]);
        let split = g.edges[0].length_m + g.edges[1].length_m;
        assert!(((whole - split) / whole).abs() < 1e-9);
    }

    #[test]
    fn disjoint_ways_form_two_components() {
        let doc = parse_osm(&osm(&format!(
            r#"{NODES}
            <way id="10"><nd ref="1"/><nd ref="2"/><tag k="highway" v="primary"/></way>
            <way id="11"><nd ref="5"/><nd ref="6"/><tag k="highway" v="primary"/></way>"#
        )))
        .unwrap();
        let g = build_graph(&doc);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.components(), vec![vec![1, 2], vec![5, 6]]);
    }

    #[test]
    fn tag_parsing() {
        assert_eq!(parse_lanes("3"), Some(3));
        assert_eq!(parse_lanes("0"), None);
        assert_eq!(parse_lanes("2;3"), None);
        assert!(parse_oneway("yes") && parse_oneway("true") && parse_oneway("1"));
        assert!(!parse_oneway("no") && !parse_oneway("-1"));
    }

    #[test]
    fn edge_id_round_trip() {
        let id: EdgeId = "-42_3".parse().unwrap();
        assert_eq!(id, EdgeId { way: -42, index: 3 });
        assert_eq!(id.to_string(), "-42_3");
        assert!("nope".parse::<EdgeId>().is_err());
    }
}
