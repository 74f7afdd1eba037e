//! Planar geometry shared by every stage: vectors, poses, angle helpers,
//! polyline projection and simple polygon predicates.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is left of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotated by +90 degrees.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Reflection about the x-axis.
    pub fn mirrored(self) -> Vec2 {
        Vec2::new(self.x, -self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(p: [f64; 2]) -> Self {
        Vec2::new(p[0], p[1])
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Signed shortest rotation from `from` to `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    normalize_angle(to - from)
}

/// Interpolates along the shortest angular path.
pub fn lerp_angle(a: f64, b: f64, t: f64) -> f64 {
    normalize_angle(a + angle_diff(b, a) * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Point `offset` meters ahead along the heading.
    pub fn advanced(&self, offset: f64) -> Pose2D {
        let p = self.position() + self.heading() * offset;
        Pose2D {
            x: p.x,
            y: p.y,
            theta: self.theta,
        }
    }

    /// Transforms a point from this pose's local frame to the world frame.
    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.position() + local.rotate(self.theta)
    }

    pub fn to_local(&self, world: Vec2) -> Vec2 {
        (world - self.position()).rotate(-self.theta)
    }

    pub fn mirrored(&self) -> Pose2D {
        Pose2D {
            x: self.x,
            y: -self.y,
            theta: normalize_angle(-self.theta),
        }
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineProjection {
    pub segment: usize,
    /// Fraction along `segment`, in [0, 1].
    pub t: f64,
    pub station: f64,
    pub point: Vec2,
    pub distance: f64,
    /// Signed offset of the query point, positive to the left of travel.
    pub lateral: f64,
    /// Heading of the segment the point projects onto.
    pub heading: f64,
}

/// A polyline with cached cumulative arclength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Vec2>,
    stations: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline, dropping consecutive duplicate vertices.
    pub fn new(points: impl IntoIterator<Item = Vec2>) -> Self {
        let mut pts: Vec<Vec2> = Vec::new();
        for p in points {
            if pts.last().map_or(true, |q: &Vec2| q.distance(p) > 1e-12) {
                pts.push(p);
            }
        }
        let mut stations = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                acc += p.distance(pts[i - 1]);
            }
            stations.push(acc);
        }
        Self {
            points: pts,
            stations,
        }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn stations(&self) -> &[f64] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.stations.last().copied().unwrap_or(0.0)
    }

    pub fn segment_heading(&self, seg: usize) -> f64 {
        (self.points[seg + 1] - self.points[seg]).angle()
    }

    /// Nearest point on the polyline. Ties resolve to the lower segment index.
    pub fn project(&self, p: Vec2) -> Option<PolylineProjection> {
        if self.points.len() < 2 {
            return None;
        }
        self.project_range(p, 0, self.points.len() - 1)
    }

    /// Like [`Polyline::project`] but only considers segments in `[first, last)`.
    pub fn project_range(&self, p: Vec2, first: usize, last: usize) -> Option<PolylineProjection> {
        let last = last.min(self.points.len().saturating_sub(1));
        let mut best: Option<PolylineProjection> = None;
        for seg in first..last {
            let a = self.points[seg];
            let b = self.points[seg + 1];
            let d = b - a;
            let len_sq = d.norm_sq();
            let t = ((p - a).dot(d) / len_sq).clamp(0.0, 1.0);
            let q = a + d * t;
            let dist = p.distance(q);
            if best.as_ref().map_or(true, |b| dist < b.distance) {
                let len = len_sq.sqrt();
                best = Some(PolylineProjection {
                    segment: seg,
                    t,
                    station: self.stations[seg] + t * len,
                    point: q,
                    distance: dist,
                    lateral: d.cross(p - a) / len,
                    heading: d.angle(),
                });
            }
        }
        best
    }

    /// Point and heading at arclength `s`, clamped to the polyline.
    pub fn sample(&self, s: f64) -> (Vec2, f64) {
        let n = self.points.len();
        if n == 1 {
            return (self.points[0], 0.0);
        }
        let s = s.clamp(0.0, self.length());
        let seg = match self
            .stations
            .binary_search_by(|st| st.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let len = self.stations[seg + 1] - self.stations[seg];
        let t = if len > 0.0 {
            (s - self.stations[seg]) / len
        } else {
            0.0
        };
        (
            self.points[seg].lerp(self.points[seg + 1], t),
            self.segment_heading(seg),
        )
    }

    /// Offsets every vertex along the left normal by `offset` meters using
    /// mitered vertex normals.
    pub fn offset_left(&self, offset: f64) -> Polyline {
        Polyline::new(offset_vertices(&self.points, offset))
    }

    pub fn reversed(&self) -> Polyline {
        Polyline::new(self.points.iter().rev().copied())
    }
}

/// Mitered left-offset of a vertex chain.
pub fn offset_vertices(points: &[Vec2], offset: f64) -> Vec<Vec2> {
    let n = points.len();
    if n < 2 || offset == 0.0 {
        return points.to_vec();
    }
    let dirs: Vec<Vec2> = points
        .windows(2)
        .map(|w| (w[1] - w[0]).normalized())
        .collect();
    (0..n)
        .map(|i| {
            let normal = if i == 0 {
                dirs[0].perp()
            } else if i == n - 1 {
                dirs[n - 2].perp()
            } else {
                let n0 = dirs[i - 1].perp();
                let n1 = dirs[i].perp();
                let bis = n0 + n1;
                let bl = bis.norm();
                if bl < 1e-9 {
                    n1
                } else {
                    let bis = bis * (1.0 / bl);
                    // miter length 1/cos(half angle), limited for sharp corners
                    let c = bis.dot(n1).max(0.25);
                    bis * (1.0 / c)
                }
            };
            points[i] + normal * offset
        })
        .collect()
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Vec2]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Vec2, ring: &[Vec2]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a = ring[i];
        let b = ring[j];
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Even-odd containment with edges bucketed by horizontal band. Gives the
/// same answer as [`point_in_polygon`] but only visits edges spanning the
/// query's band.
#[derive(Debug, Clone)]
pub struct RingIndex {
    ring: Vec<Vec2>,
    y0: f64,
    band: f64,
    bands: Vec<Vec<(u32, u32)>>,
}

impl RingIndex {
    pub fn new(ring: Vec<Vec2>, band: f64) -> Self {
        let n = ring.len();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &ring {
            lo = lo.min(p.y);
            hi = hi.max(p.y);
        }
        if n < 3 || !lo.is_finite() {
            return Self { ring, y0: 0.0, band, bands: Vec::new() };
        }
        let count = (((hi - lo) / band).floor() as usize) + 1;
        let mut bands = vec![Vec::new(); count];
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (ring[i], ring[j]);
            let first = ((a.y.min(b.y) - lo) / band).floor() as usize;
            let last = (((a.y.max(b.y) - lo) / band).floor() as usize).min(count - 1);
            for bucket in &mut bands[first..=last] {
                bucket.push((i as u32, j as u32));
            }
            j = i;
        }
        Self { ring, y0: lo, band, bands }
    }

    pub fn ring(&self) -> &[Vec2] {
        &self.ring
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let f = (p.y - self.y0) / self.band;
        if !(f >= 0.0) || f as usize >= self.bands.len() {
            return false;
        }
        let mut inside = false;
        for &(i, j) in &self.bands[f as usize] {
            let a = self.ring[i as usize];
            let b = self.ring[j as usize];
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let d = b - a;
    let len_sq = d.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(d) / len_sq).clamp(0.0, 1.0);
    p.distance(a + d * t)
}

/// Distance from `p` to the boundary of a closed ring.
pub fn distance_to_ring(p: Vec2, ring: &[Vec2]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| point_segment_distance(p, ring[i], ring[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

/// Proper or touching intersection of closed segments `ab` and `cd`.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    (d1 == 0.0 && on(c, d, a))
        || (d2 == 0.0 && on(c, d, b))
        || (d3 == 0.0 && on(a, b, c))
        || (d4 == 0.0 && on(a, b, d))
}

/// Segment intersection point if the segments cross.
pub fn segment_intersection(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> Option<(f64, Vec2)> {
    let r = b - a;
    let s = d - c;
    let denom = r.cross(s);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (c - a).cross(s) / denom;
    let u = (c - a).cross(r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some((t, a + r * t))
    } else {
        None
    }
}

/// True if no two non-adjacent edges of the closed ring intersect.
pub fn ring_is_simple(ring: &[Vec2]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let c = ring[j];
            let d = ring[(j + 1) % n];
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// True if an open chain crosses itself.
pub fn chain_self_intersects(points: &[Vec2]) -> bool {
    let n = points.len();
    if n < 4 {
        return false;
    }
    for i in 0..n - 1 {
        for j in (i + 2)..n - 1 {
            if segments_intersect(points[i], points[i + 1], points[j], points[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Corners of an oriented rectangle, counter-clockwise.
pub fn rectangle_corners(center: Vec2, heading: f64, length: f64, width: f64) -> [Vec2; 4] {
    let f = Vec2::from_angle(heading) * (length / 2.0);
    let l = Vec2::from_angle(heading).perp() * (width / 2.0);
    [center - f - l, center + f - l, center + f + l, center - f + l]
}

/// Separating-axis overlap test for two convex polygons (strict overlap).
pub fn convex_overlap(a: &[Vec2], b: &[Vec2]) -> bool {
    for poly in [a, b] {
        let n = poly.len();
        for i in 0..n {
            let axis = (poly[(i + 1) % n] - poly[i]).perp();
            let (amin, amax) = project_onto(a, axis);
            let (bmin, bmax) = project_onto(b, axis);
            if amax <= bmin || bmax <= amin {
                return false;
            }
        }
    }
    true
}

fn project_onto(poly: &[Vec2], axis: Vec2) -> (f64, f64) {
    poly.iter()
        .map(|p| p.dot(axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

/// Minimum distance between two convex polygons; zero when they overlap.
pub fn convex_distance(a: &[Vec2], b: &[Vec2]) -> f64 {
    if convex_overlap(a, b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (p, q) in [(a, b), (b, a)] {
        let n = q.len();
        for &v in p {
            for i in 0..n {
                best = best.min(point_segment_distance(v, q[i], q[(i + 1) % n]));
            }
        }
    }
    best
}
