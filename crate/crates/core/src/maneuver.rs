//! Weighted interval votes ("traits") on widening the driving area, and the
//! sign-change search that turns them into a single consent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, offset_vertices, point_segment_distance, rectangle_corners, Vec2};
use crate::map::{DrivingArea, RouteReference};
use crate::prediction::PredictedObject;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManeuverError {
    #[error("no traits to resolve")]
    EmptyTraitSet,
    #[error("invalid trait {source_label}: {reason}")]
    InvalidTrait { source_label: String, reason: String },
    #[error("negative consent offset {0}")]
    NegativeOffset(f64),
    #[error("consent produces a self-intersecting driving area")]
    Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trait {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
    pub source: String,
}

impl Trait {
    pub fn new(lo: f64, hi: f64, weight: f64, source: impl Into<String>) -> Result<Self, ManeuverError> {
        let source = source.into();
        let reason = if !(lo.is_finite() && hi.is_finite()) {
            Some("non-finite bound")
        } else if lo > hi {
            Some("lower bound above upper bound")
        } else if !weight.is_finite() || weight == 0.0 {
            Some("weight must be finite and nonzero")
        } else {
            None
        };
        match reason {
            Some(r) => Err(ManeuverError::InvalidTrait {
                source_label: source,
                reason: r.into(),
            }),
            None => Ok(Self { lo, hi, weight, source }),
        }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Half-open `[lo, hi)` piece with the summed weight of all traits covering it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisjointInterval {
    pub lo: f64,
    pub hi: f64,
    pub net_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    #[default]
    Left,
    Right,
}

impl Side {
    /// +1 for left, -1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consent {
    pub offset: f64,
    pub side: Side,
}

impl Consent {
    pub fn none(side: Side) -> Self {
        Self { offset: 0.0, side }
    }
}

/// Cuts the traits at every distinct endpoint. Stretches not covered by any
/// trait are left out.
pub fn build_disjoint_intervals(traits: &[Trait]) -> Result<Vec<DisjointInterval>, ManeuverError> {
    if traits.is_empty() {
        return Err(ManeuverError::EmptyTraitSet);
    }
    let mut bounds: Vec<f64> = traits.iter().flat_map(|t| [t.lo, t.hi]).collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();
    let mut out = Vec::with_capacity(bounds.len());
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mut covered = false;
        let mut net = 0.0;
        let mut magnitude = 0.0;
        for t in traits.iter().filter(|t| t.lo <= lo && t.hi >= hi) {
            covered = true;
            net += t.weight;
            magnitude += t.weight.abs();
        }
        // cancellation residue counts as zero
        if net.abs() <= 1e-12 * magnitude {
            net = 0.0;
        }
        if covered {
            out.push(DisjointInterval { lo, hi, net_weight: net });
        }
    }
    Ok(out)
}

/// Walks the disjoint intervals upward and stops at the first switch from a
/// positive to a negative net weight. Zero weights inherit the previous sign;
/// a zero first interval counts as positive.
pub fn resolve(traits: &[Trait], side: Side) -> Result<Consent, ManeuverError> {
    let intervals = build_disjoint_intervals(traits)?;
    let Some(first) = intervals.first() else {
        return Ok(Consent::none(side));
    };
    if first.net_weight < 0.0 {
        return Ok(Consent::none(side));
    }
    let mut positive = true;
    for iv in &intervals[1..] {
        if iv.net_weight < 0.0 && positive {
            return Ok(Consent { offset: iv.lo, side });
        }
        if iv.net_weight != 0.0 {
            positive = iv.net_weight > 0.0;
        }
    }
    Ok(Consent {
        offset: intervals.last().expect("non-empty").hi,
        side,
    })
}

/// Pushes the consent-side edge outward by the consent offset.
pub fn apply_consent(area: &DrivingArea, consent: &Consent) -> Result<DrivingArea, ManeuverError> {
    if consent.offset < 0.0 {
        return Err(ManeuverError::NegativeOffset(consent.offset));
    }
    if consent.offset == 0.0 {
        return Ok(area.clone());
    }
    let mut out = area.clone();
    match consent.side {
        Side::Left => out.left_edge = offset_vertices(&area.left_edge, consent.offset),
        Side::Right => out.right_edge = offset_vertices(&area.right_edge, -consent.offset),
    }
    if !out.is_simple() {
        return Err(ManeuverError::Geometry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManeuverConfig {
    /// Trait weights by source label.
    pub weights: BTreeMap<String, f64>,
    /// Side on which stopped vehicles are passed.
    pub passing_side: Side,
    pub max_extension: f64,
    pub lookahead: f64,
    /// Lateral margin kept to other objects when passing.
    pub margin: f64,
    pub ego_width: f64,
    /// Objects slower than this count as stopped.
    pub stationary_speed: f64,
}

pub const SOURCE_PARKED: &str = "parked_vehicle";
pub const SOURCE_COMFORT: &str = "comfort";
pub const SOURCE_ONCOMING: &str = "oncoming_traffic";

impl Default for ManeuverConfig {
    fn default() -> Self {
        let weights = [(SOURCE_ONCOMING, -5.0), (SOURCE_PARKED, 3.0), (SOURCE_COMFORT, 1.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            weights,
            passing_side: Side::Left,
            max_extension: 3.5,
            lookahead: 40.0,
            margin: 0.5,
            ego_width: 1.9,
            stationary_speed: 0.3,
        }
    }
}

impl ManeuverConfig {
    pub fn weight(&self, source: &str) -> f64 {
        self.weights.get(source).copied().unwrap_or(0.0)
    }
}

/// Distance from the reference point at `station` to an area edge.
fn edge_distance(reference: &RouteReference, station: f64, edge: &[Vec2]) -> f64 {
    let (p, _) = reference.polyline.sample(station);
    edge.windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Lateral traits for the current situation: stopped vehicles in the ego lane
/// ask for room on the passing side, oncoming traffic on that side limits it.
pub fn derive_lateral_traits(
    area: &DrivingArea,
    reference: &RouteReference,
    ego_position: Vec2,
    objects: &[PredictedObject],
    cfg: &ManeuverConfig,
) -> Vec<Trait> {
    let side = cfg.passing_side.sign();
    let edge = match cfg.passing_side {
        Side::Left => &area.left_edge,
        Side::Right => &area.right_edge,
    };
    let ego_station = reference.project(ego_position).station;
    let mut needed: f64 = 0.0;
    let mut limit = f64::INFINITY;
    for obj in objects {
        let pos = obj.start.position();
        let proj = reference.project(pos);
        let ahead = proj.station - ego_station;
        if ahead <= 0.0 || ahead > cfg.lookahead {
            continue;
        }
        let corners = rectangle_corners(pos, obj.start.theta, obj.extents.length, obj.extents.width);
        let laterals: Vec<f64> = corners
            .iter()
            .map(|c| {
                let pr = reference.project(*c);
                pr.lateral * side
            })
            .collect();
        let near = laterals.iter().copied().fold(f64::INFINITY, f64::min);
        let far = laterals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let room = edge_distance(reference, proj.station, edge);
        let stopped = obj.start.v < cfg.stationary_speed;
        let heading_gap = angle_diff(obj.start.theta, proj.heading).cos();
        if stopped && near < cfg.ego_width {
            // blocks the reference corridor
            let required = far + cfg.margin + cfg.ego_width;
            needed = needed.max(required - room);
        } else if !stopped && heading_gap < -0.5 && near > 0.0 {
            limit = limit.min((near - cfg.margin - room).max(0.0));
        }
    }
    let mut traits = Vec::new();
    if needed > 1e-9 {
        let needed = needed.min(cfg.max_extension);
        traits.push(Trait {
            lo: 0.0,
            hi: needed,
            weight: cfg.weight(SOURCE_PARKED),
            source: SOURCE_PARKED.into(),
        });
        traits.push(Trait {
            lo: 0.0,
            hi: cfg.max_extension,
            weight: cfg.weight(SOURCE_COMFORT),
            source: SOURCE_COMFORT.into(),
        });
        if limit < cfg.max_extension {
            traits.push(Trait {
                lo: limit,
                hi: cfg.max_extension,
                weight: cfg.weight(SOURCE_ONCOMING),
                source: SOURCE_ONCOMING.into(),
            });
        }
    }
    traits.retain(|t| t.weight != 0.0 && t.hi > t.lo);
    traits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polyline;
    use crate::prediction::{PredictedTrajectory, TimedState};
    use crate::types::{Classification, Extents};
    use proptest::prelude::*;

    fn t(lo: f64, hi: f64, w: f64) -> Trait {
        Trait::new(lo, hi, w, "test").unwrap()
    }

    fn fig2() -> Vec<Trait> {
        vec![t(0.0, 2.0, 3.0), t(0.0, 5.0, 1.0), t(2.0, 5.0, -5.0)]
    }

    #[test]
    fn disjoint_interval_examples() {
        let iv = build_disjoint_intervals(&[t(0.0, 2.0, 3.0)]).unwrap();
        assert_eq!(iv, vec![DisjointInterval { lo: 0.0, hi: 2.0, net_weight: 3.0 }]);
        let iv = build_disjoint_intervals(&[t(0.0, 2.0, 3.0), t(0.0, 5.0, 1.0)]).unwrap();
        assert_eq!(iv.iter().map(|i| (i.lo, i.hi, i.net_weight)).collect::<Vec<_>>(), vec![(0.0, 2.0, 4.0), (2.0, 5.0, 1.0)]);
        let iv = build_disjoint_intervals(&fig2()).unwrap();
        assert_eq!(iv.iter().map(|i| (i.lo, i.hi, i.net_weight)).collect::<Vec<_>>(), vec![(0.0, 2.0, 4.0), (2.0, 5.0, -4.0)]);
        // per-point coverage sum on a centimeter grid
        for k in 0..500 {
            let x = k as f64 / 100.0;
            let direct: f64 = fig2().iter().filter(|t| t.lo <= x && x < t.hi).map(|t| t.weight).sum();
            let piece = iv.iter().find(|i| i.lo <= x && x < i.hi).unwrap();
            assert_eq!(direct, piece.net_weight);
        }
        assert_eq!(build_disjoint_intervals(&[]), Err(ManeuverError::EmptyTraitSet));
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve(&fig2(), Side::Left).unwrap().offset, 2.0);
        assert_eq!(resolve(&[t(0.0, 3.0, 1.0)], Side::Left).unwrap().offset, 3.0);
        assert_eq!(resolve(&[t(0.0, 3.0, -1.0)], Side::Left).unwrap().offset, 0.0);
        assert_eq!(resolve(&[], Side::Left), Err(ManeuverError::EmptyTraitSet));
        // zero net weight carries the previous sign
        let c = resolve(&[t(0.0, 4.0, 1.0), t(1.0, 4.0, -1.0), t(2.0, 4.0, -1.0)], Side::Right).unwrap();
        assert_eq!((c.offset, c.side), (2.0, Side::Right));
    }

    #[test]
    fn invalid_traits_are_rejected() {
        assert!(Trait::new(2.0, 1.0, 1.0, "x").is_err());
        assert!(Trait::new(0.0, 1.0, 0.0, "x").is_err());
        assert!(Trait::new(0.0, f64::NAN, 1.0, "x").is_err());
    }

    fn straight_area(width: f64) -> DrivingArea {
        DrivingArea {
            left_edge: vec![Vec2::new(0.0, width / 2.0), Vec2::new(50.0, width / 2.0)],
            right_edge: vec![Vec2::new(0.0, -width / 2.0), Vec2::new(50.0, -width / 2.0)],
        }
    }

    #[test]
    fn apply_consent_examples() {
        let area = straight_area(3.0);
        assert_eq!(apply_consent(&area, &Consent::none(Side::Left)).unwrap(), area);
        let wide = apply_consent(&area, &Consent { offset: 2.0, side: Side::Left }).unwrap();
        for p in &wide.left_edge {
            assert!((p.y - 3.5).abs() < 1e-12);
        }
        assert_eq!(wide.right_edge, area.right_edge);
        assert!((wide.area() - 5.0 * 50.0).abs() < 1e-9);
        let right = apply_consent(&area, &Consent { offset: 1.0, side: Side::Right }).unwrap();
        assert!(right.right_edge.iter().all(|p| (p.y + 2.5).abs() < 1e-12));
        assert!(apply_consent(&area, &Consent { offset: -1.0, side: Side::Left }).is_err());
    }

    #[test]
    fn curved_corridor_grows_by_offset_times_length() {
        let r = 30.0;
        let arc = |radius: f64| -> Vec<Vec2> {
            (0..=60)
                .map(|k| {
                    let a = -std::f64::consts::FRAC_PI_2 + k as f64 * 0.02;
                    Vec2::new(radius * a.cos(), r + radius * a.sin())
                })
                .collect()
        };
        // left turn: left edge is the inner arc
        let area = DrivingArea { left_edge: arc(r - 1.5), right_edge: arc(r + 1.5) };
        let grown = apply_consent(&area, &Consent { offset: 1.0, side: Side::Right }).unwrap();
        let edge_len = crate::geometry::polyline_length(&area.right_edge);
        let gain = grown.area() - area.area();
        assert!((gain - edge_len).abs() / edge_len < 0.05, "{gain} vs {edge_len}");
    }

    /// Offset sweep on a centimeter grid with integer weights.
    fn sweep_oracle(traits: &[(i64, i64, i64)]) -> i64 {
        let lo = traits.iter().map(|t| t.0).min().unwrap();
        let hi = traits.iter().map(|t| t.1).max().unwrap();
        let mut first = true;
        let mut positive = true;
        for x in lo..hi {
            let covering: Vec<_> = traits.iter().filter(|t| t.0 <= x && x < t.1).collect();
            if covering.is_empty() {
                continue;
            }
            let w: i64 = covering.iter().map(|t| t.2).sum();
            if first {
                if w < 0 {
                    return 0;
                }
                first = false;
                continue;
            }
            if w < 0 && positive {
                return x;
            }
            if w != 0 {
                positive = w > 0;
            }
        }
        if first {
            0
        } else {
            hi
        }
    }

    fn to_traits(raw: &[(i64, i64, i64)]) -> Vec<Trait> {
        raw.iter().map(|&(lo, hi, w)| t(lo as f64 / 100.0, hi as f64 / 100.0, w as f64)).collect()
    }

    fn raw_traits() -> impl Strategy<Value = Vec<(i64, i64, i64)>> {
        proptest::collection::vec(
            (0i64..500, 1i64..300, prop_oneof![-6i64..0, 1i64..7]).prop_map(|(lo, len, w)| (lo, lo + len, w)),
            1..8,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn resolve_matches_sweep(raw in raw_traits()) {
            let c = resolve(&to_traits(&raw), Side::Left).unwrap();
            prop_assert_eq!(c.offset, sweep_oracle(&raw) as f64 / 100.0);
        }

        #[test]
        fn weight_length_is_conserved(raw in raw_traits()) {
            let traits = to_traits(&raw);
            let iv = build_disjoint_intervals(&traits).unwrap();
            let a: f64 = iv.iter().map(|i| i.net_weight * (i.hi - i.lo)).sum();
            let b: f64 = traits.iter().map(|t| t.weight * t.length()).sum();
            prop_assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
            for w in iv.windows(2) {
                prop_assert!(w[0].hi <= w[1].lo);
            }
        }

        #[test]
        fn resolve_is_scale_invariant(raw in raw_traits(), k in 0.01f64..100.0) {
            let traits = to_traits(&raw);
            let scaled: Vec<Trait> = traits.iter().map(|t| Trait { weight: t.weight * k, ..t.clone() }).collect();
            prop_assert_eq!(resolve(&traits, Side::Left).unwrap(), resolve(&scaled, Side::Left).unwrap());
        }

        #[test]
        fn resolve_lands_on_an_endpoint(raw in raw_traits()) {
            let traits = to_traits(&raw);
            let iv = build_disjoint_intervals(&traits).unwrap();
            let c = resolve(&traits, Side::Left).unwrap();
            prop_assert!(c.offset == 0.0 || iv.iter().any(|i| i.lo == c.offset || i.hi == c.offset));
        }

        #[test]
        fn splitting_a_trait_changes_nothing(raw in raw_traits(), which in 0usize..8, cut in 0.0f64..1.0) {
            let which = which % raw.len();
            let (lo, hi, w) = raw[which];
            let mid = lo + ((hi - lo) as f64 * cut).round() as i64;
            prop_assume!(mid > lo && mid < hi);
            let mut split = raw.clone();
            split[which] = (lo, mid, w);
            split.push((mid, hi, w));
            prop_assert_eq!(
                resolve(&to_traits(&raw), Side::Left).unwrap(),
                resolve(&to_traits(&split), Side::Left).unwrap()
            );
        }
    }

    fn object(id: u64, x: f64, y: f64, theta: f64, v: f64) -> PredictedObject {
        PredictedObject {
            id,
            classification: Classification::Car,
            extents: Extents { length: 4.5, width: 1.8, height: 1.5 },
            start: TimedState { t: 0.0, x, y, theta, v },
            trajectories: vec![PredictedTrajectory { states: vec![], likelihood: 1.0, lane_ids: vec![] }],
        }
    }

    fn reference() -> RouteReference {
        RouteReference::from_polyline(Polyline::new([Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]), 13.9)
    }

    #[test]
    fn parked_vehicle_requests_room_and_oncoming_limits_it() {
        let area = DrivingArea {
            left_edge: vec![Vec2::new(0.0, 1.75), Vec2::new(100.0, 1.75)],
            right_edge: vec![Vec2::new(0.0, -1.75), Vec2::new(100.0, -1.75)],
        };
        let cfg = ManeuverConfig::default();
        let parked = object(1, 20.0, -0.5, 0.0, 0.0);
        let traits = derive_lateral_traits(&area, &reference(), Vec2::new(0.0, 0.0), &[parked.clone()], &cfg);
        assert_eq!(traits.len(), 2);
        // far edge 0.4 + margin + ego width - 1.75
        let need = 0.4 + 0.5 + 1.9 - 1.75;
        assert!((traits[0].hi - need).abs() < 1e-9);
        assert_eq!(resolve(&traits, Side::Left).unwrap().offset, cfg.max_extension);

        let oncoming = object(2, 35.0, 4.0, std::f64::consts::PI, 8.0);
        let traits = derive_lateral_traits(&area, &reference(), Vec2::new(0.0, 0.0), &[parked.clone(), oncoming], &cfg);
        assert_eq!(traits.len(), 3);
        let consent = resolve(&traits, Side::Left).unwrap();
        let limit = (4.0 - 0.9) - 0.5 - 1.75;
        assert!((consent.offset - limit).abs() < 1e-9, "{}", consent.offset);

        let nothing = derive_lateral_traits(&area, &reference(), Vec2::new(0.0, 0.0), &[object(3, 20.0, 0.0, 0.0, 10.0)], &cfg);
        assert!(nothing.is_empty());
        let behind = derive_lateral_traits(&area, &reference(), Vec2::new(30.0, 0.0), &[parked], &cfg);
        assert!(behind.is_empty());
    }
}
