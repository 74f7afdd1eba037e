//! Lane-level map, route planning, driving-area derivation and pose-to-lane
//! matching.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::geometry::{
    angle_diff, chain_self_intersects, point_in_polygon, ring_is_simple, signed_area, Polyline,
    PolylineProjection, Pose2D, Vec2,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dangling reference to lane {0:?}")]
    DanglingReference(String),
    #[error("duplicate lane id {0:?}")]
    DuplicateLane(String),
    #[error("invalid lane {id:?}: {reason}")]
    InvalidLane { id: String, reason: String },
    #[error("no lane matches the {0} pose")]
    NoLaneMatch(&'static str),
    #[error("lane {to:?} unreachable from {from:?}")]
    Unreachable { from: String, to: String },
    #[error("geometry error: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDoc {
    pub id: String,
    #[serde(default)]
    pub crossing_permitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneDoc {
    pub id: String,
    pub centerline: Vec<[f64; 2]>,
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_neighbor: Option<NeighborDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_neighbor: Option<NeighborDoc>,
    pub speed_limit: f64,
}

/// On-disk map document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDocument {
    pub schema_version: u32,
    pub lanes: Vec<LaneDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub crossing_permitted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    pub centerline: Vec<Pose2D>,
    pub left_boundary: Vec<Vec2>,
    pub right_boundary: Vec<Vec2>,
    pub successors: Vec<String>,
    pub left_neighbor: Option<Neighbor>,
    pub right_neighbor: Option<Neighbor>,
    pub speed_limit: f64,
    reference: Polyline,
}

impl Lane {
    pub fn reference(&self) -> &Polyline {
        &self.reference
    }

    pub fn length(&self) -> f64 {
        self.reference.length()
    }

    fn from_doc(doc: &LaneDoc) -> Result<Self, MapError> {
        let invalid = |reason: &str| MapError::InvalidLane {
            id: doc.id.clone(),
            reason: reason.to_string(),
        };
        if doc.centerline.len() < 2 {
            return Err(invalid("centerline needs at least 2 points"));
        }
        if doc.left.len() < 2 || doc.right.len() < 2 {
            return Err(invalid("boundaries need at least 2 points"));
        }
        let all = doc.centerline.iter().chain(&doc.left).chain(&doc.right);
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if !(doc.speed_limit > 0.0) || !doc.speed_limit.is_finite() {
            return Err(invalid("speed_limit must be positive"));
        }
        let reference = Polyline::new(doc.centerline.iter().map(|&p| Vec2::from(p)));
        if reference.len() < 2 {
            return Err(invalid("centerline collapses to a point"));
        }
        let left: Vec<Vec2> = doc.left.iter().map(|&p| p.into()).collect();
        let right: Vec<Vec2> = doc.right.iter().map(|&p| p.into()).collect();
        if chain_self_intersects(&left) || chain_self_intersects(&right) {
            return Err(invalid("boundary intersects itself"));
        }
        let pts = reference.points();
        let centerline = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let seg = i.min(pts.len() - 2);
                Pose2D::new(p.x, p.y, reference.segment_heading(seg))
            })
            .collect();
        Ok(Self {
            id: doc.id.clone(),
            centerline,
            left_boundary: left,
            right_boundary: right,
            successors: doc.successors.clone(),
            left_neighbor: doc.left_neighbor.as_ref().map(|n| Neighbor {
                id: n.id.clone(),
                crossing_permitted: n.crossing_permitted,
            }),
            right_neighbor: doc.right_neighbor.as_ref().map(|n| Neighbor {
                id: n.id.clone(),
                crossing_permitted: n.crossing_permitted,
            }),
            speed_limit: doc.speed_limit,
            reference,
        })
    }

    fn to_doc(&self) -> LaneDoc {
        let arr = |v: &[Vec2]| v.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
        let nb = |n: &Option<Neighbor>| {
            n.as_ref().map(|n| NeighborDoc {
                id: n.id.clone(),
                crossing_permitted: n.crossing_permitted,
            })
        };
        LaneDoc {
            id: self.id.clone(),
            centerline: arr(self.reference.points()),
            left: arr(&self.left_boundary),
            right: arr(&self.right_boundary),
            successors: self.successors.clone(),
            left_neighbor: nb(&self.left_neighbor),
            right_neighbor: nb(&self.right_neighbor),
            speed_limit: self.speed_limit,
        }
    }

    /// Mean heading of the centerline as a unit vector.
    fn direction(&self) -> Vec2 {
        let pts = self.reference.points();
        (pts[pts.len() - 1] - pts[0]).normalized()
    }
}

/// Immutable lane graph. Iteration order is by lane id.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneMap {
    lanes: BTreeMap<String, Lane>,
}

impl LaneMap {
    pub fn get(&self, id: &str) -> Option<&Lane> {
        self.lanes.get(id)
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.values()
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn from_document(doc: &MapDocument) -> Result<Self, MapError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(MapError::Parse {
                line: 0,
                column: 0,
                message: format!(
                    "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                    doc.schema_version
                ),
            });
        }
        let mut lanes = BTreeMap::new();
        for ld in &doc.lanes {
            let lane = Lane::from_doc(ld)?;
            if lanes.insert(lane.id.clone(), lane).is_some() {
                return Err(MapError::DuplicateLane(ld.id.clone()));
            }
        }
        for lane in lanes.values() {
            let refs = lane
                .successors
                .iter()
                .chain(lane.left_neighbor.as_ref().map(|n| &n.id))
                .chain(lane.right_neighbor.as_ref().map(|n| &n.id));
            for r in refs {
                if !lanes.contains_key(r) {
                    return Err(MapError::DanglingReference(r.clone()));
                }
            }
        }
        Ok(Self { lanes })
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            schema_version: SCHEMA_VERSION,
            lanes: self.lanes.values().map(Lane::to_doc).collect(),
        }
    }

    /// Reflection about the x-axis: left and right swap, so a right-hand
    /// traffic map becomes its left-hand counterpart.
    pub fn mirrored(&self) -> LaneMap {
        let m = |v: &[Vec2]| v.iter().map(|p| p.mirrored()).collect::<Vec<_>>();
        let lanes = self
            .lanes
            .values()
            .map(|l| {
                let centerline: Vec<Vec2> = m(l.reference.points());
                let reference = Polyline::new(centerline.iter().copied());
                let lane = Lane {
                    id: l.id.clone(),
                    centerline: l.centerline.iter().map(|p| p.mirrored()).collect(),
                    left_boundary: m(&l.right_boundary),
                    right_boundary: m(&l.left_boundary),
                    successors: l.successors.clone(),
                    left_neighbor: l.right_neighbor.clone(),
                    right_neighbor: l.left_neighbor.clone(),
                    speed_limit: l.speed_limit,
                    reference,
                };
                (l.id.clone(), lane)
            })
            .collect();
        LaneMap { lanes }
    }
}

/// Parses and links a map document.
pub fn load_map(text: &str) -> Result<LaneMap, MapError> {
    if text.trim().is_empty() {
        return Err(MapError::Parse {
            line: 1,
            column: 0,
            message: "empty document".into(),
        });
    }
    let doc: MapDocument = serde_json::from_str(text).map_err(|e| MapError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    LaneMap::from_document(&doc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub sigma_d: f64,
    pub sigma_theta: f64,
    pub threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            sigma_d: 1.5,
            sigma_theta: 0.5,
            threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteConfig {
    /// Cost of a lateral lane change, in meter-equivalents.
    pub lane_change_cost: f64,
    pub matching: MatchConfig,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            lane_change_cost: 5.0,
            matching: MatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneMatch {
    pub lane_id: String,
    pub confidence: f64,
    pub station: f64,
}

/// Scores every lane by `exp(-d²/σd²)·exp(-Δθ²/σθ²)`; returns the
/// candidates above threshold, best first.
pub fn match_pose_to_lane(map: &LaneMap, pose: Pose2D, cfg: &MatchConfig) -> Vec<LaneMatch> {
    let mut out: Vec<LaneMatch> = map
        .lanes()
        .filter_map(|lane| {
            let pr = lane.reference.project(pose.position())?;
            let dtheta = angle_diff(pose.theta, pr.heading);
            let confidence = (-(pr.distance * pr.distance) / (cfg.sigma_d * cfg.sigma_d)).exp()
                * (-(dtheta * dtheta) / (cfg.sigma_theta * cfg.sigma_theta)).exp();
            (confidence >= cfg.threshold).then(|| LaneMatch {
                lane_id: lane.id.clone(),
                confidence,
                station: pr.station,
            })
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub lane_ids: Vec<String>,
    /// Sum of the centerline lengths of the lanes on the route.
    pub length: f64,
    /// Graph cost: traversed lane lengths between the start and goal
    /// stations plus lane-change costs.
    pub cost: f64,
}

impl Route {
    /// Checks that consecutive lanes are linked by a successor or a
    /// permitted neighbor edge.
    pub fn is_connected(&self, map: &LaneMap) -> bool {
        self.lane_ids.windows(2).all(|w| {
            map.get(&w[0]).is_some_and(|l| {
                l.successors.contains(&w[1]) || lateral_edge(map, l).any(|n| n == w[1])
            })
        })
    }
}

/// Lanes reachable by a permitted lane change in the same direction.
fn lateral_edge<'a>(map: &'a LaneMap, lane: &'a Lane) -> impl Iterator<Item = &'a str> + 'a {
    [&lane.left_neighbor, &lane.right_neighbor]
        .into_iter()
        .flatten()
        .filter(|n| n.crossing_permitted)
        .filter(move |n| {
            map.get(&n.id)
                .is_some_and(|nl| nl.direction().dot(lane.direction()) > 0.0)
        })
        .map(|n| n.id.as_str())
}

fn is_lateral_pair(map: &LaneMap, a: &str, b: &str) -> bool {
    map.get(a)
        .is_some_and(|l| lateral_edge(map, l).any(|n| n == b))
}

fn out_edges(map: &LaneMap, lane: &Lane, cfg: &RouteConfig) -> Vec<(String, f64)> {
    let mut e: Vec<(String, f64)> = lane
        .successors
        .iter()
        .map(|s| (s.clone(), lane.length()))
        .collect();
    e.extend(lateral_edge(map, lane).map(|n| (n.to_string(), cfg.lane_change_cost)));
    e
}

/// Dijkstra over the lane graph. Successor edges cost the length of the lane
/// being left, lane changes cost `lane_change_cost`. The search starts from
/// the out-edges of `from`, so `from == to` is only satisfied by a cycle.
/// Ties break on lane id. Returns the lane sequence and its cost.
pub fn shortest_lane_path(
    map: &LaneMap,
    from: &str,
    to: &str,
    cfg: &RouteConfig,
) -> Result<(Vec<String>, f64), MapError> {
    let start = map
        .get(from)
        .ok_or_else(|| MapError::DanglingReference(from.to_string()))?;
    if map.get(to).is_none() {
        return Err(MapError::DanglingReference(to.to_string()));
    }
    let mut dist: BTreeMap<String, f64> = BTreeMap::new();
    let mut prev: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut done: BTreeSet<String> = BTreeSet::new();
    for (n, w) in out_edges(map, start, cfg) {
        if dist.get(&n).map_or(true, |&d| w < d) {
            dist.insert(n.clone(), w);
            prev.insert(n, None);
        }
    }
    loop {
        let Some((node, d)) = dist
            .iter()
            .filter(|(k, _)| !done.contains(*k))
            .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| a.0.cmp(b.0)))
            .map(|(k, &d)| (k.clone(), d))
        else {
            return Err(MapError::Unreachable {
                from: from.to_string(),
                to: to.to_string(),
            });
        };
        if node == to {
            let mut path = vec![node.clone()];
            let mut cur = node;
            while let Some(Some(p)) = prev.get(&cur) {
                path.push(p.clone());
                cur = p.clone();
            }
            path.push(from.to_string());
            path.reverse();
            return Ok((path, d));
        }
        done.insert(node.clone());
        let lane = map.get(&node).expect("linked map");
        for (n, w) in out_edges(map, lane, cfg) {
            if done.contains(&n) {
                continue;
            }
            let nd = d + w;
            if dist.get(&n).map_or(true, |&old| nd < old) {
                dist.insert(n.clone(), nd);
                prev.insert(n, Some(node.clone()));
            }
        }
    }
}

fn route_from_lanes(map: &LaneMap, lane_ids: Vec<String>, cost: f64) -> Route {
    let length = lane_ids
        .iter()
        .filter_map(|id| map.get(id))
        .map(|l| l.length())
        .sum();
    Route {
        lane_ids,
        length,
        cost,
    }
}

/// Minimum-cost lane sequence from `start` to `goal`.
pub fn plan_route(map: &LaneMap, start: Pose2D, goal: Pose2D, cfg: &RouteConfig) -> Result<Route, MapError> {
    let starts = match_pose_to_lane(map, start, &cfg.matching);
    let goals = match_pose_to_lane(map, goal, &cfg.matching);
    if starts.is_empty() {
        return Err(MapError::NoLaneMatch("start"));
    }
    if goals.is_empty() {
        return Err(MapError::NoLaneMatch("goal"));
    }
    let mut first_err = None;
    for s in &starts {
        for g in &goals {
            if s.lane_id == g.lane_id && g.station >= s.station - 1e-9 {
                return Ok(route_from_lanes(
                    map,
                    vec![s.lane_id.clone()],
                    g.station - s.station,
                ));
            }
            match shortest_lane_path(map, &s.lane_id, &g.lane_id, cfg) {
                Ok((lanes, cost)) => {
                    return Ok(route_from_lanes(map, lanes, cost - s.station + g.station));
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    Err(first_err.expect("at least one candidate pair"))
}

/// Polygon bounding where trajectories may be planned. Both edges run in
/// the driving direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingArea {
    pub left_edge: Vec<Vec2>,
    pub right_edge: Vec<Vec2>,
}

impl DrivingArea {
    /// Closed ring: left edge forward, right edge backward.
    pub fn ring(&self) -> Vec<Vec2> {
        self.left_edge
            .iter()
            .copied()
            .chain(self.right_edge.iter().rev().copied())
            .collect()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.ring()).abs()
    }

    pub fn contains(&self, p: Vec2) -> bool {
        point_in_polygon(p, &self.ring())
    }

    pub fn is_simple(&self) -> bool {
        ring_is_simple(&self.ring())
    }

    pub fn mirrored(&self) -> DrivingArea {
        DrivingArea {
            left_edge: self.right_edge.iter().map(|p| p.mirrored()).collect(),
            right_edge: self.left_edge.iter().map(|p| p.mirrored()).collect(),
        }
    }
}

/// Splits a route into longitudinal sections of laterally linked lanes.
fn route_sections<'a>(map: &LaneMap, route: &'a Route) -> Vec<Vec<&'a str>> {
    let mut sections: Vec<Vec<&str>> = Vec::new();
    for (i, id) in route.lane_ids.iter().enumerate() {
        let lateral = i > 0 && is_lateral_pair(map, &route.lane_ids[i - 1], id);
        match sections.last_mut() {
            Some(sec) if lateral => sec.push(id),
            _ => sections.push(vec![id]),
        }
    }
    sections
}

/// The boundary of `neighbor` farther from `lane`, oriented along `lane`.
fn outer_boundary(lane: &Lane, neighbor: &Lane) -> Vec<Vec2> {
    let mean_dist = |b: &[Vec2]| {
        b.iter()
            .map(|p| lane.reference.project(*p).map_or(0.0, |pr| pr.distance))
            .sum::<f64>()
            / b.len() as f64
    };
    let mut edge = if mean_dist(&neighbor.left_boundary) >= mean_dist(&neighbor.right_boundary) {
        neighbor.left_boundary.clone()
    } else {
        neighbor.right_boundary.clone()
    };
    if neighbor.direction().dot(lane.direction()) < 0.0 {
        edge.reverse();
    }
    edge
}

fn append_chain(dst: &mut Vec<Vec2>, src: &[Vec2]) {
    for &p in src {
        if dst.last().map_or(true, |q| q.distance(p) > 1e-9) {
            dst.push(p);
        }
    }
}

/// Left and right edges follow the route's lane boundaries; each edge is
/// widened to a neighbor's outer boundary wherever crossing into that
/// neighbor is permitted. Clipped at the route's first and last lane.
pub fn derive_driving_area(map: &LaneMap, route: &Route) -> Result<DrivingArea, MapError> {
    if route.lane_ids.is_empty() {
        return Err(MapError::Geometry("empty route".into()));
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    for section in route_sections(map, route) {
        let lanes: Vec<&Lane> = section
            .iter()
            .map(|id| map.get(id).ok_or_else(|| MapError::DanglingReference(id.to_string())))
            .collect::<Result<_, _>>()?;
        let in_section = |n: &Option<Neighbor>| n.as_ref().is_some_and(|n| section.contains(&n.id.as_str()));
        let leftmost = lanes
            .iter()
            .find(|l| !in_section(&l.left_neighbor))
            .copied()
            .unwrap_or(lanes[0]);
        let rightmost = lanes
            .iter()
            .find(|l| !in_section(&l.right_neighbor))
            .copied()
            .unwrap_or(lanes[0]);
        let widened = |lane: &Lane, nb: &Option<Neighbor>, own: &Vec<Vec2>| -> Result<Vec<Vec2>, MapError> {
            match nb {
                Some(n) if n.crossing_permitted => {
                    let nl = map
                        .get(&n.id)
                        .ok_or_else(|| MapError::DanglingReference(n.id.clone()))?;
                    Ok(outer_boundary(lane, nl))
                }
                _ => Ok(own.clone()),
            }
        };
        append_chain(
            &mut left,
            &widened(leftmost, &leftmost.left_neighbor, &leftmost.left_boundary)?,
        );
        append_chain(
            &mut right,
            &widened(rightmost, &rightmost.right_neighbor, &rightmost.right_boundary)?,
        );
    }
    let area = DrivingArea {
        left_edge: left,
        right_edge: right,
    };
    if !area.is_simple() {
        return Err(MapError::Geometry(
            "driving area polygon self-intersects".into(),
        ));
    }
    Ok(area)
}

/// Centerline reference of a route with per-segment speed limits. Lateral
/// sections follow the last lane entered.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteReference {
    pub polyline: Polyline,
    /// Speed limit of the lane each segment belongs to.
    segment_limits: Vec<f64>,
}

impl RouteReference {
    pub fn new(map: &LaneMap, route: &Route) -> Result<Self, MapError> {
        let mut pts: Vec<Vec2> = Vec::new();
        let mut limits_at: Vec<f64> = Vec::new();
        for section in route_sections(map, route) {
            let id = section.last().expect("non-empty section");
            let lane = map
                .get(id)
                .ok_or_else(|| MapError::DanglingReference(id.to_string()))?;
            for &p in lane.reference.points() {
                if pts.last().map_or(true, |q: &Vec2| q.distance(p) > 1e-9) {
                    pts.push(p);
                    limits_at.push(lane.speed_limit);
                }
            }
        }
        let polyline = Polyline::new(pts);
        if polyline.len() < 2 {
            return Err(MapError::Geometry("route reference degenerate".into()));
        }
        let segment_limits = limits_at[1..polyline.len()].to_vec();
        Ok(Self {
            polyline,
            segment_limits,
        })
    }

    /// Straight or arbitrary reference without speed limit variation.
    pub fn from_polyline(polyline: Polyline, speed_limit: f64) -> Self {
        let n = polyline.len().saturating_sub(1);
        Self {
            polyline,
            segment_limits: vec![speed_limit; n],
        }
    }

    pub fn project(&self, p: Vec2) -> PolylineProjection {
        self.polyline.project(p).expect("reference has 2+ points")
    }

    pub fn speed_limit_at_segment(&self, seg: usize) -> f64 {
        self.segment_limits[seg.min(self.segment_limits.len() - 1)]
    }

    pub fn speed_limit_at(&self, p: Vec2) -> f64 {
        self.speed_limit_at_segment(self.project(p).segment)
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.segment_limits.iter().copied().fold(0.0, f64::max)
    }

    pub fn length(&self) -> f64 {
        self.polyline.length()
    }

    pub fn mirrored(&self) -> Self {
        Self {
            polyline: Polyline::new(self.polyline.points().iter().map(|p| p.mirrored())),
            segment_limits: self.segment_limits.clone(),
        }
    }
}

/// Lane document whose boundaries are the centerline offset by half the
/// width on each side.
pub fn lane_doc(id: &str, centerline: &[Vec2], width: f64, speed_limit: f64, successors: &[&str]) -> LaneDoc {
    let arr = |v: Vec<Vec2>| v.into_iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
    LaneDoc {
        id: id.to_string(),
        centerline: arr(centerline.to_vec()),
        left: arr(crate::geometry::offset_vertices(centerline, width / 2.0)),
        right: arr(crate::geometry::offset_vertices(centerline, -width / 2.0)),
        successors: successors.iter().map(|s| s.to_string()).collect(),
        left_neighbor: None,
        right_neighbor: None,
        speed_limit,
    }
}
