//! The Curvepoints trajectory interface between planning and execution, and
//! the resampling utilities that produce it.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::geometry::{lerp_angle, normalize_angle, Pose2D, Vec2};

/// Default fixed capacity of the trajectory array.
pub const DEFAULT_CAPACITY: usize = 256;

/// Tolerance on consecutive point distances.
pub const SPACING_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("arclength {s} outside trajectory [0, {max}]")]
    OutOfRange { s: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Curvepoint {
    pub pose: Pose2D,
    pub curvature: f64,
    pub v: f64,
    pub a: f64,
}

impl Curvepoint {
    pub fn at(p: Vec2) -> Self {
        Self {
            pose: Pose2D {
                x: p.x,
                y: p.y,
                theta: 0.0,
            },
            ..Default::default()
        }
    }

    pub fn position(&self) -> Vec2 {
        self.pose.position()
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.curvature.is_finite() && self.v.is_finite() && self.a.is_finite()
    }
}

/// Geodetic origin of the planar frame. Carried, never used for math here.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Curvepoint>,
    pub spacing: f64,
    pub timestamp: f64,
    pub generation: u64,
    pub valid_count: usize,
    pub capacity: usize,
    pub reference_point: GeoPoint,
    pub car_index: usize,
}

impl Trajectory {
    /// Wraps `points`, truncating to the default capacity.
    pub fn new(mut points: Vec<Curvepoint>, spacing: f64, timestamp: f64, generation: u64) -> Self {
        points.truncate(DEFAULT_CAPACITY);
        let valid_count = points.len();
        Self {
            points,
            spacing,
            timestamp,
            generation,
            valid_count,
            capacity: DEFAULT_CAPACITY,
            reference_point: GeoPoint::default(),
            car_index: 0,
        }
    }

    pub fn valid_points(&self) -> &[Curvepoint] {
        &self.points[..self.valid_count.min(self.points.len())]
    }

    /// Arclength of the last valid point.
    pub fn length(&self) -> f64 {
        self.valid_count.saturating_sub(1) as f64 * self.spacing
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.valid_points().iter().map(|p| p.position()).collect()
    }

    pub fn mirrored(&self) -> Trajectory {
        let mut t = self.clone();
        for p in &mut t.points {
            p.pose = p.pose.mirrored();
            p.curvature = -p.curvature;
        }
        t
    }
}

/// Samples a polyline at points exactly `spacing` apart (straight-line
/// distance), each lying on the polyline. Returns positions with the
/// arclength station of each sample along the input.
pub fn resample_polyline(
    polyline: &[Vec2],
    spacing: f64,
    inclusive_end: bool,
) -> Result<Vec<(Vec2, f64)>, GeometryError> {
    if polyline.len() < 2 {
        return Err(GeometryError::DegenerateInput(format!(
            "polyline needs at least 2 points, got {}",
            polyline.len()
        )));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(GeometryError::DegenerateInput(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let mut stations = Vec::with_capacity(polyline.len());
    let mut acc = 0.0;
    stations.push(0.0);
    for (i, w) in polyline.windows(2).enumerate() {
        if !w[0].is_finite() || !w[1].is_finite() {
            return Err(GeometryError::DegenerateInput("non-finite vertex".into()));
        }
        let d = w[0].distance(w[1]);
        if d <= 1e-12 {
            return Err(GeometryError::DegenerateInput(format!(
                "duplicate consecutive points at index {}",
                i + 1
            )));
        }
        acc += d;
        stations.push(acc);
    }
    if acc < spacing {
        return Err(GeometryError::DegenerateInput(format!(
            "polyline length {acc} shorter than spacing {spacing}"
        )));
    }

    let s_sq = spacing * spacing;
    let mut out = vec![(polyline[0], 0.0)];
    let mut cur = polyline[0];
    let mut seg = 0usize;
    let mut t_start = 0.0;
    'outer: loop {
        while seg + 1 < polyline.len() {
            let a = polyline[seg];
            let d = polyline[seg + 1] - a;
            let dd = d.norm_sq();
            let e = a - cur;
            let ed = e.dot(d);
            let disc = ed * ed - dd * (e.norm_sq() - s_sq);
            if disc >= 0.0 {
                let t = (-ed + disc.sqrt()) / dd;
                if t >= t_start && t <= 1.0 {
                    let q = a + d * t;
                    let station = stations[seg] + t * dd.sqrt();
                    out.push((q, station));
                    cur = q;
                    t_start = t;
                    continue 'outer;
                }
            }
            seg += 1;
            t_start = 0.0;
        }
        break;
    }
    if inclusive_end {
        let last = *polyline.last().unwrap();
        if out.last().unwrap().0.distance(last) > 1e-9 {
            out.push((last, acc));
        }
    }
    Ok(out)
}

/// Resamples a pose polyline into equidistant Curvepoints. Heading,
/// curvature, speed and acceleration are left zero.
pub fn resample_equidistant(
    polyline: &[Pose2D],
    spacing: f64,
    inclusive_end: bool,
) -> Result<Vec<Curvepoint>, GeometryError> {
    let pts: Vec<Vec2> = polyline.iter().map(|p| p.position()).collect();
    Ok(resample_polyline(&pts, spacing, inclusive_end)?
        .into_iter()
        .map(|(p, _)| Curvepoint::at(p))
        .collect())
}

/// Signed three-point (Menger) curvature; positive for left turns.
pub fn three_point_curvature(a: Vec2, b: Vec2, c: Vec2) -> Option<f64> {
    let ab = a.distance(b);
    let bc = b.distance(c);
    let ac = a.distance(c);
    let denom = ab * bc * ac;
    if denom <= 1e-18 {
        return None;
    }
    Some(2.0 * (b - a).cross(c - b) / denom)
}

/// Fills heading (central differences, one-sided at the ends) and curvature
/// (three-point formula, copied from the nearest interior point at the ends).
pub fn compute_heading_curvature(points: &[Curvepoint]) -> Result<Vec<Curvepoint>, GeometryError> {
    let n = points.len();
    if n < 3 {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let pos: Vec<Vec2> = points.iter().map(|p| p.position()).collect();
    for (i, w) in pos.windows(2).enumerate() {
        if w[0].distance(w[1]) <= 1e-12 {
            return Err(GeometryError::DegenerateInput(format!(
                "coincident points at index {}",
                i + 1
            )));
        }
    }
    let mut out = points.to_vec();
    for i in 0..n {
        let d = if i == 0 {
            pos[1] - pos[0]
        } else if i == n - 1 {
            pos[n - 1] - pos[n - 2]
        } else {
            pos[i + 1] - pos[i - 1]
        };
        if d.norm() <= 1e-12 {
            return Err(GeometryError::DegenerateInput(format!(
                "path reverses onto itself at index {i}"
            )));
        }
        out[i].pose.theta = normalize_angle(d.angle());
    }
    for i in 1..n - 1 {
        out[i].curvature = three_point_curvature(pos[i - 1], pos[i], pos[i + 1]).ok_or_else(|| {
            GeometryError::DegenerateInput(format!("coincident points around index {i}"))
        })?;
    }
    out[0].curvature = out[1].curvature;
    out[n - 1].curvature = out[n - 2].curvature;
    Ok(out)
}

/// State at arclength `s`, interpolated between neighboring nodes.
pub fn interpolate_state_at(trajectory: &Trajectory, s: f64) -> Result<Curvepoint, GeometryError> {
    let pts = trajectory.valid_points();
    let max = trajectory.length();
    if pts.is_empty() || !s.is_finite() || s < -1e-9 || s > max + 1e-9 {
        return Err(GeometryError::OutOfRange { s, max });
    }
    let f = (s / trajectory.spacing).max(0.0);
    let mut i = f.floor() as usize;
    let mut t = f - i as f64;
    if t > 1.0 - 1e-9 {
        i += 1;
        t = 0.0;
    } else if t < 1e-9 {
        t = 0.0;
    }
    if i >= pts.len() - 1 {
        return Ok(pts[pts.len() - 1]);
    }
    if t == 0.0 {
        return Ok(pts[i]);
    }
    let a = &pts[i];
    let b = &pts[i + 1];
    let lerp = |x: f64, y: f64| x + (y - x) * t;
    Ok(Curvepoint {
        pose: Pose2D {
            x: lerp(a.pose.x, b.pose.x),
            y: lerp(a.pose.y, b.pose.y),
            theta: lerp_angle(a.pose.theta, b.pose.theta, t),
        },
        curvature: lerp(a.curvature, b.curvature),
        v: lerp(a.v, b.v),
        a: lerp(a.a, b.a),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryViolation {
    GenerationNotIncreased { previous: u64, current: u64 },
    NonEquidistant { index: usize, gap: f64 },
    NonFinite { index: usize },
    NegativeVelocity { index: usize },
    CarIndexOutOfRange { car_index: usize, valid_count: usize },
    ValidCountOverflow { valid_count: usize, capacity: usize },
    InvalidSpacing,
}

impl fmt::Display for TrajectoryViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GenerationNotIncreased { previous, current } => write!(
                f,
                "generation not increased ({current} after {previous})"
            ),
            Self::NonEquidistant { index, gap } => {
                write!(f, "non-equidistant spacing at point {index} (gap {gap})")
            }
            Self::NonFinite { index } => write!(f, "non-finite field at point {index}"),
            Self::NegativeVelocity { index } => write!(f, "negative velocity at point {index}"),
            Self::CarIndexOutOfRange {
                car_index,
                valid_count,
            } => write!(f, "car_index {car_index} out of range ({valid_count} valid)"),
            Self::ValidCountOverflow {
                valid_count,
                capacity,
            } => write!(f, "valid_count overflow ({valid_count} > {capacity})"),
            Self::InvalidSpacing => write!(f, "spacing must be positive and finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryVerdict {
    pub violations: Vec<TrajectoryViolation>,
}

impl TrajectoryVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the interface contract. The whole array, prefix included, is
/// checked for equidistance.
pub fn validate_trajectory(trajectory: &Trajectory, prev_generation: Option<u64>) -> TrajectoryVerdict {
    let mut violations = Vec::new();
    if let Some(previous) = prev_generation {
        if trajectory.generation <= previous {
            violations.push(TrajectoryViolation::GenerationNotIncreased {
                previous,
                current: trajectory.generation,
            });
        }
    }
    if trajectory.valid_count > trajectory.capacity || trajectory.valid_count > trajectory.points.len() {
        violations.push(TrajectoryViolation::ValidCountOverflow {
            valid_count: trajectory.valid_count,
            capacity: trajectory.capacity.min(trajectory.points.len()),
        });
    }
    if trajectory.car_index >= trajectory.valid_count {
        violations.push(TrajectoryViolation::CarIndexOutOfRange {
            car_index: trajectory.car_index,
            valid_count: trajectory.valid_count,
        });
    }
    let spacing_ok = trajectory.spacing > 0.0 && trajectory.spacing.is_finite();
    if !spacing_ok {
        violations.push(TrajectoryViolation::InvalidSpacing);
    }
    let pts = trajectory.valid_points();
    for (i, p) in pts.iter().enumerate() {
        if !p.is_finite() {
            violations.push(TrajectoryViolation::NonFinite { index: i });
        } else if p.v < 0.0 {
            violations.push(TrajectoryViolation::NegativeVelocity { index: i });
        }
    }
    if spacing_ok {
        for i in 1..pts.len() {
            let gap = pts[i].position().distance(pts[i - 1].position());
            if !gap.is_finite() {
                continue;
            }
            if (gap - trajectory.spacing).abs() > SPACING_TOLERANCE {
                violations.push(TrajectoryViolation::NonEquidistant { index: i, gap });
            }
        }
    }
    TrajectoryVerdict { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_diff;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn arc(radius: f64, sweep: f64, n: usize, ccw: bool) -> Vec<Vec2> {
        (0..=n)
            .map(|i| {
                let phi = sweep * i as f64 / n as f64;
                if ccw {
                    Vec2::new(radius * phi.sin(), radius * (1.0 - phi.cos()))
                } else {
                    Vec2::new(radius * phi.sin(), -radius * (1.0 - phi.cos()))
                }
            })
            .collect()
    }

    fn straight_trajectory(n: usize, spacing: f64, v: f64) -> Trajectory {
        let pts = (0..n)
            .map(|i| Curvepoint {
                pose: Pose2D::new(i as f64 * spacing, 0.0, 0.0),
                curvature: 0.0,
                v,
                a: 0.0,
            })
            .collect();
        Trajectory::new(pts, spacing, 0.0, 5)
    }

    #[test]
    fn straight_segment_uniform_subdivision() {
        let line = [Pose2D::new(0.0, 0.0, 0.0), Pose2D::new(10.0, 0.0, 0.0)];
        let pts = resample_equidistant(&line, 2.5, false).unwrap();
        let xs: Vec<f64> = pts.iter().map(|p| p.pose.x).collect();
        assert_eq!(xs.len(), 5);
        for (x, expect) in xs.iter().zip([0.0, 2.5, 5.0, 7.5, 10.0]) {
            assert!((x - expect).abs() < 1e-12);
        }
        assert!(pts.iter().all(|p| p.pose.theta == 0.0 && p.curvature == 0.0));
    }

    #[test]
    fn single_point_is_degenerate() {
        let err = resample_equidistant(&[Pose2D::new(1.0, 1.0, 0.0)], 1.0, false).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateInput(_)));
    }

    #[test]
    fn duplicate_points_and_short_polylines_are_degenerate() {
        let dup = [Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0)];
        assert!(resample_polyline(&dup, 1.0, false).is_err());
        let short = [Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.0)];
        assert!(resample_polyline(&short, 1.0, false).is_err());
    }

    #[test]
    fn quarter_circle_samples_stay_on_circle() {
        // dense polyline: chord sagitta ~3e-8 m, well inside the tolerance
        let pl = arc(10.0, FRAC_PI_2, 20_000, true);
        let out = resample_polyline(&pl, 1.0, false).unwrap();
        assert_eq!(out.len(), 16);
        let center = Vec2::new(0.0, 10.0);
        for (p, _) in &out {
            assert!((p.distance(center) - 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inclusive_end_appends_shorter_gap() {
        let line = [Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)];
        let out = resample_polyline(&line, 3.0, true).unwrap();
        assert_eq!(out.len(), 5);
        assert!((out[4].0.x - 10.0).abs() < 1e-12);
        let out = resample_polyline(&line, 3.0, false).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn collinear_points_have_zero_heading_and_curvature() {
        let pts: Vec<Curvepoint> = (0..6).map(|i| Curvepoint::at(Vec2::new(i as f64, 0.0))).collect();
        let out = compute_heading_curvature(&pts).unwrap();
        assert!(out.iter().all(|p| p.pose.theta == 0.0 && p.curvature == 0.0));
    }

    #[test]
    fn circle_curvature_sign_follows_turn_direction() {
        for (ccw, expect) in [(true, 0.1), (false, -0.1)] {
            let pl = arc(10.0, 1.5, 30_000, ccw);
            let pts: Vec<Curvepoint> = resample_polyline(&pl, 0.5, false)
                .unwrap()
                .into_iter()
                .map(|(p, _)| Curvepoint::at(p))
                .collect();
            let out = compute_heading_curvature(&pts).unwrap();
            for p in &out[1..out.len() - 1] {
                assert!((p.curvature - expect).abs() < 1e-3, "{} vs {expect}", p.curvature);
            }
        }
    }

    #[test]
    fn coincident_points_rejected_by_curvature() {
        let pts = vec![
            Curvepoint::at(Vec2::new(0.0, 0.0)),
            Curvepoint::at(Vec2::new(0.0, 0.0)),
            Curvepoint::at(Vec2::new(1.0, 0.0)),
        ];
        assert!(compute_heading_curvature(&pts).is_err());
    }

    #[test]
    fn interpolation_at_nodes_and_midpoints() {
        let t = straight_trajectory(5, 0.5, 3.0);
        for k in 0..5 {
            let p = interpolate_state_at(&t, k as f64 * 0.5).unwrap();
            assert_eq!(p, t.points[k]);
        }
        let mid = interpolate_state_at(&t, 0.25).unwrap();
        assert!((mid.pose.x - 0.25).abs() < 1e-12);
        assert_eq!(mid.v, 3.0);
        assert!(matches!(
            interpolate_state_at(&t, 2.5),
            Err(GeometryError::OutOfRange { .. })
        ));
    }

    #[test]
    fn validation_reports_each_violation() {
        let t = straight_trajectory(5, 0.5, 3.0);
        assert!(validate_trajectory(&t, Some(4)).is_valid());

        let v = validate_trajectory(&t, Some(5));
        assert_eq!(v.violations.len(), 1);
        assert!(v.violations[0].to_string().contains("generation not increased"));

        let mut nan = t.clone();
        nan.points[2].curvature = f64::NAN;
        let v = validate_trajectory(&nan, Some(4));
        assert_eq!(v.violations.len(), 1);
        assert!(v.violations[0].to_string().contains("non-finite field"));

        let mut bad = t.clone();
        bad.points[3].pose.x += 0.1;
        bad.car_index = 301;
        bad.valid_count = 300;
        let v = validate_trajectory(&bad, None);
        assert!(v.violations.iter().any(|x| matches!(x, TrajectoryViolation::CarIndexOutOfRange { .. })));
        assert!(v.violations.iter().any(|x| matches!(x, TrajectoryViolation::ValidCountOverflow { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn resampled_gaps_equal_spacing(
            steps in proptest::collection::vec((0.2f64..5.0, -1.2f64..1.2), 2..12),
            spacing in 0.1f64..1.5,
        ) {
            let mut pts = vec![Vec2::new(0.0, 0.0)];
            let mut heading = 0.0;
            for (len, turn) in steps {
                heading += turn;
                let last = *pts.last().unwrap();
                pts.push(last + Vec2::from_angle(heading) * len);
            }
            prop_assume!(polyline_len(&pts) >= spacing);
            let out = resample_polyline(&pts, spacing, false).unwrap();
            for w in out.windows(2) {
                prop_assert!((w[0].0.distance(w[1].0) - spacing).abs() < 1e-6);
                prop_assert!(w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn circle_curvature_matches_inverse_radius(radius in 5.0f64..100.0) {
            let pl = arc(radius, 0.8, 40_000, true);
            let pts: Vec<Curvepoint> = resample_polyline(&pl, 0.5, false)
                .unwrap()
                .into_iter()
                .map(|(p, _)| Curvepoint::at(p))
                .collect();
            let out = compute_heading_curvature(&pts).unwrap();
            for p in &out[1..out.len() - 1] {
                prop_assert!((p.curvature - 1.0 / radius).abs() < 1e-3);
            }
        }

        #[test]
        fn interpolation_is_continuous(s in 0.0f64..9.0) {
            let pl = arc(15.0, 1.0, 5_000, true);
            let pts: Vec<Curvepoint> = resample_polyline(&pl, 0.5, false)
                .unwrap()
                .into_iter()
                .enumerate()
                .map(|(i, (p, _))| Curvepoint { v: 1.0 + i as f64 * 0.1, ..Curvepoint::at(p) })
                .collect();
            let pts = compute_heading_curvature(&pts).unwrap();
            let t = Trajectory::new(pts, 0.5, 0.0, 1);
            let a = interpolate_state_at(&t, s).unwrap();
            let b = interpolate_state_at(&t, s + 1e-7).unwrap();
            prop_assert!(a.position().distance(b.position()) < 1e-6);
            prop_assert!((a.v - b.v).abs() < 1e-6);
            prop_assert!(angle_diff(a.pose.theta, b.pose.theta).abs() < 1e-6);
        }
    }

    fn polyline_len(p: &[Vec2]) -> f64 {
        crate::geometry::polyline_length(p)
    }
}
