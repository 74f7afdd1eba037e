//! Tri-state occupancy grid fed by planar scans.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{convex_overlap, Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Occupied,
    Unknown,
}

impl Cell {
    fn glyph(self) -> char {
        match self {
            Cell::Free => '.',
            Cell::Occupied => '#',
            Cell::Unknown => '?',
        }
    }
}

/// Ordered from best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FootprintVerdict {
    Clear,
    UnknownContact,
    Collision,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostmapError {
    #[error("scan origin ({x:.2}, {y:.2}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid grid parameters: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarScan {
    pub sensor_origin: Pose2D,
    /// Hit points in world coordinates. Points at `max_range` are rays without a return.
    pub points: Vec<Vec2>,
    pub max_range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Consecutive free observations needed to revert an occupied cell.
    pub clear_count: u32,
    /// Mark previously free cells behind a hit as unknown again.
    pub occlusion_reset: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.25,
            width: 320,
            height: 320,
            clear_count: 2,
            occlusion_reset: false,
        }
    }
}

/// Raster anchored at `origin`: cell (0, 0) has its lower-left corner there and
/// columns run along the origin heading.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Pose2D,
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    free_streak: Vec<u32>,
    clear_count: u32,
    occlusion_reset: bool,
}

const NO_HIT_EPS: f64 = 1e-6;

impl OccupancyGrid {
    pub fn new(origin: Pose2D, config: &GridConfig) -> Result<Self, CostmapError> {
        if !(config.resolution > 0.0) || !config.resolution.is_finite() {
            return Err(CostmapError::InvalidGrid(format!("resolution {}", config.resolution)));
        }
        if config.width == 0 || config.height == 0 {
            return Err(CostmapError::InvalidGrid("empty raster".into()));
        }
        if config.clear_count == 0 {
            return Err(CostmapError::InvalidGrid("clear_count must be at least 1".into()));
        }
        let n = config.width * config.height;
        Ok(Self {
            origin,
            resolution: config.resolution,
            width: config.width,
            height: config.height,
            cells: vec![Cell::Unknown; n],
            free_streak: vec![0; n],
            clear_count: config.clear_count,
            occlusion_reset: config.occlusion_reset,
        })
    }

    /// Grid of the given size centered on `center`, axis aligned.
    pub fn centered(center: Vec2, config: &GridConfig) -> Result<Self, CostmapError> {
        let half = Vec2::new(config.width as f64, config.height as f64) * (0.5 * config.resolution);
        let o = center - half;
        Self::new(Pose2D::new(o.x, o.y, 0.0), config)
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, ix: i64, iy: i64) -> Cell {
        match self.index(ix, iy) {
            Some(i) => self.cells[i],
            None => Cell::Unknown,
        }
    }

    pub fn set(&mut self, ix: i64, iy: i64, cell: Cell) {
        if let Some(i) = self.index(ix, iy) {
            self.cells[i] = cell;
            self.free_streak[i] = 0;
        }
    }

    fn index(&self, ix: i64, iy: i64) -> Option<usize> {
        if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
            None
        } else {
            Some(iy as usize * self.width + ix as usize)
        }
    }

    /// Continuous grid coordinates in cell units.
    fn to_grid(&self, p: Vec2) -> Vec2 {
        self.origin.to_local(p) * (1.0 / self.resolution)
    }

    pub fn cell_of(&self, p: Vec2) -> (i64, i64) {
        let g = self.to_grid(p);
        (g.x.floor() as i64, g.y.floor() as i64)
    }

    pub fn cell_at(&self, p: Vec2) -> Cell {
        let (ix, iy) = self.cell_of(p);
        self.get(ix, iy)
    }

    pub fn cell_center(&self, ix: i64, iy: i64) -> Vec2 {
        let local = Vec2::new(ix as f64 + 0.5, iy as f64 + 0.5) * self.resolution;
        self.origin.to_world(local)
    }

    pub fn cell_polygon(&self, ix: i64, iy: i64) -> [Vec2; 4] {
        let r = self.resolution;
        let (x0, y0) = (ix as f64 * r, iy as f64 * r);
        [
            self.origin.to_world(Vec2::new(x0, y0)),
            self.origin.to_world(Vec2::new(x0 + r, y0)),
            self.origin.to_world(Vec2::new(x0 + r, y0 + r)),
            self.origin.to_world(Vec2::new(x0, y0 + r)),
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (ix, iy) = self.cell_of(p);
        self.index(ix, iy).is_some()
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|c| **c == cell).count()
    }

    pub fn integrate_scan(&mut self, scan: &PlanarScan) -> Result<(), CostmapError> {
        let o = scan.sensor_origin.position();
        if !self.contains(o) {
            return Err(CostmapError::OutOfBounds { x: o.x, y: o.y });
        }
        let start = self.cell_of(o);
        let n = self.cells.len();
        // 0 untouched, 1 traversed, 2 hit
        let mut mark = vec![0u8; n];
        let mut behind = Vec::new();
        for &p in &scan.points {
            if !p.is_finite() {
                continue;
            }
            let range = p.distance(o);
            let is_hit = range < scan.max_range - NO_HIT_EPS;
            let end = self.cell_of(p);
            let ray = bresenham(start, end);
            let (last, traversed) = ray.split_last().expect("ray has at least one cell");
            for &(ix, iy) in traversed {
                if let Some(i) = self.index(ix, iy) {
                    if mark[i] == 0 {
                        mark[i] = 1;
                    }
                }
            }
            if is_hit {
                if let Some(i) = self.index(last.0, last.1) {
                    mark[i] = 2;
                }
                if self.occlusion_reset && range > 0.0 {
                    let far = o + (p - o) * (scan.max_range / range);
                    let shadow = bresenham(*last, self.cell_of(far));
                    behind.extend(shadow.into_iter().skip(1));
                }
            }
        }
        for i in 0..n {
            match mark[i] {
                2 => {
                    self.cells[i] = Cell::Occupied;
                    self.free_streak[i] = 0;
                }
                1 => {
                    if self.cells[i] == Cell::Occupied {
                        self.free_streak[i] = self.free_streak[i].saturating_add(1).min(self.clear_count);
                        if self.free_streak[i] >= self.clear_count {
                            self.cells[i] = Cell::Free;
                            self.free_streak[i] = 0;
                        }
                    } else {
                        self.cells[i] = Cell::Free;
                    }
                }
                _ => {}
            }
        }
        for (ix, iy) in behind {
            if let Some(i) = self.index(ix, iy) {
                if mark[i] == 0 && self.cells[i] == Cell::Free {
                    self.cells[i] = Cell::Unknown;
                }
            }
        }
        Ok(())
    }

    /// Worst cell state under a convex footprint. Cells outside the raster count as unknown.
    pub fn query_footprint(&self, footprint: &[Vec2]) -> FootprintVerdict {
        if footprint.is_empty() {
            return FootprintVerdict::Clear;
        }
        let local: Vec<Vec2> = footprint.iter().map(|p| self.to_grid(*p)).collect();
        let (mut lo, mut hi) = (local[0], local[0]);
        for p in &local {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let mut verdict = FootprintVerdict::Clear;
        for iy in lo.y.floor() as i64..=hi.y.floor() as i64 {
            for ix in lo.x.floor() as i64..=hi.x.floor() as i64 {
                let cell = self.get(ix, iy);
                let worse = match cell {
                    Cell::Occupied => FootprintVerdict::Collision,
                    Cell::Unknown => FootprintVerdict::UnknownContact,
                    Cell::Free => continue,
                };
                if worse <= verdict {
                    continue;
                }
                let (x, y) = (ix as f64, iy as f64);
                let square = [
                    Vec2::new(x, y),
                    Vec2::new(x + 1.0, y),
                    Vec2::new(x + 1.0, y + 1.0),
                    Vec2::new(x, y + 1.0),
                ];
                if convex_overlap(&local, &square) {
                    verdict = worse;
                    if verdict == FootprintVerdict::Collision {
                        return verdict;
                    }
                }
            }
        }
        verdict
    }

    /// Shifts the window by whole cells; cells leaving the window are dropped
    /// and cells entering it start unknown.
    pub fn scroll(&mut self, dx: i64, dy: i64) {
        if dx == 0 && dy == 0 {
            return;
        }
        let mut cells = vec![Cell::Unknown; self.cells.len()];
        let mut streak = vec![0; self.cells.len()];
        for iy in 0..self.height as i64 {
            for ix in 0..self.width as i64 {
                if let Some(src) = self.index(ix + dx, iy + dy) {
                    let dst = iy as usize * self.width + ix as usize;
                    cells[dst] = self.cells[src];
                    streak[dst] = self.free_streak[src];
                }
            }
        }
        self.cells = cells;
        self.free_streak = streak;
        let shift = Vec2::new(dx as f64, dy as f64) * self.resolution;
        let o = self.origin.to_world(shift);
        self.origin = Pose2D::new(o.x, o.y, self.origin.theta);
    }

    /// Scrolls so that `p` is near the middle of the window.
    pub fn recenter(&mut self, p: Vec2) {
        let g = self.to_grid(p);
        let dx = (g.x - self.width as f64 / 2.0).round() as i64;
        let dy = (g.y - self.height as f64 / 2.0).round() as i64;
        self.scroll(dx, dy);
    }

    /// Reflection about the world x-axis. Rows are flipped so that every
    /// cell keeps its world footprint, mirrored.
    pub fn mirrored(&self) -> OccupancyGrid {
        let top = self.origin.to_world(Vec2::new(0.0, self.height as f64 * self.resolution));
        let origin = Pose2D::new(top.x, -top.y, -self.origin.theta);
        let mut cells = Vec::with_capacity(self.cells.len());
        let mut streak = Vec::with_capacity(self.cells.len());
        for iy in (0..self.height).rev() {
            cells.extend_from_slice(&self.cells[iy * self.width..(iy + 1) * self.width]);
            streak.extend_from_slice(&self.free_streak[iy * self.width..(iy + 1) * self.width]);
        }
        OccupancyGrid {
            origin,
            cells,
            free_streak: streak,
            ..self.clone()
        }
    }

    pub fn occupied_centers(&self) -> Vec<Vec2> {
        let mut out = Vec::new();
        for iy in 0..self.height {
            for ix in 0..self.width {
                if self.cells[iy * self.width + ix] == Cell::Occupied {
                    out.push(self.cell_center(ix as i64, iy as i64));
                }
            }
        }
        out
    }

    /// Plain-text raster, top row first.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height + 80);
        let _ = writeln!(
            s,
            "origin {:.3} {:.3} {:.4} resolution {} size {}x{}",
            self.origin.x, self.origin.y, self.origin.theta, self.resolution, self.width, self.height
        );
        for iy in (0..self.height).rev() {
            s.extend(self.cells[iy * self.width..(iy + 1) * self.width].iter().map(|c| c.glyph()));
            s.push('\n');
        }
        s
    }
}

/// Integer Bresenham line including both end cells.
pub fn bresenham(from: (i64, i64), to: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Distance field over occupied cells, for fast clearance lookups.
#[derive(Debug, Clone)]
pub struct ClearanceField {
    origin: Pose2D,
    resolution: f64,
    width: usize,
    height: usize,
    /// Distance in meters from each cell center to the nearest occupied cell center.
    dist: Vec<f64>,
}

impl ClearanceField {
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        let (w, h) = (grid.width, grid.height);
        let big = 1e20;
        let mut f: Vec<f64> = grid
            .cells
            .iter()
            .map(|c| if *c == Cell::Occupied { 0.0 } else { big })
            .collect();
        let mut buf = vec![0.0; w.max(h)];
        for x in 0..w {
            for y in 0..h {
                buf[y] = f[y * w + x];
            }
            let col = edt_1d(&buf[..h]);
            for y in 0..h {
                f[y * w + x] = col[y];
            }
        }
        for y in 0..h {
            let row = edt_1d(&f[y * w..(y + 1) * w]);
            f[y * w..(y + 1) * w].copy_from_slice(&row);
        }
        let dist = f
            .into_iter()
            .map(|d2| if d2 >= big { f64::INFINITY } else { d2.sqrt() * grid.resolution })
            .collect();
        Self {
            origin: grid.origin,
            resolution: grid.resolution,
            width: w,
            height: h,
            dist,
        }
    }

    /// Lower bound on the distance from `p` to any occupied cell.
    /// Positions outside the raster report infinity.
    pub fn clearance(&self, p: Vec2) -> f64 {
        let g = self.origin.to_local(p) * (1.0 / self.resolution);
        let (ix, iy) = (g.x.floor() as i64, g.y.floor() as i64);
        if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
            return f64::INFINITY;
        }
        let d = self.dist[iy as usize * self.width + ix as usize];
        // point to own cell center plus the occupied cell's half extent
        d - std::f64::consts::SQRT_2 * self.resolution
    }
}

/// Squared Euclidean distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    if n == 0 {
        return d;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
    d
}
