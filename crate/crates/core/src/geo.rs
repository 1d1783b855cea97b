//! Local map projection, an axial-coordinate hexagonal grid, and circle/cell
//! overlap geometry.
//!
//! Cells are pointy-top hexagons laid out over an equirectangular projection
//! centred on a configured origin. Resolutions follow an aperture-7 ladder:
//! every step down in size divides the edge length by √7, anchored so that
//! resolution 6 has a 3229.48 m edge.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Edge length of a resolution-6 cell, in metres.
pub const RES6_EDGE_M: f64 = 3_229.482_772;

/// Finest supported resolution.
pub const MAX_RESOLUTION: u8 = 15;

/// Vertex count of the polygon that stands in for a report circle.
pub const CIRCLE_SEGMENTS: usize = 64;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("resolution {0} out of range 0..={MAX_RESOLUTION}")]
    InvalidResolution(u8),

    #[error("radius must be finite and positive, got {0}")]
    InvalidRadius(f64),
}

pub type Result<T> = std::result::Result<T, GeoError>;

/// A WGS-84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate { lat: self.lat, lon: self.lon })
        }
    }
}

/// Metres east (`x_m`) and north (`y_m`) of a projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalXY {
    pub x_m: f64,
    pub y_m: f64,
}

impl LocalXY {
    pub fn new(x_m: f64, y_m: f64) -> Self {
        Self { x_m, y_m }
    }

    pub fn dist(&self, other: &LocalXY) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }
}

/// Equirectangular projection of `p` around `origin`.
pub fn project(p: GeoPoint, origin: GeoPoint) -> Result<LocalXY> {
    p.validate()?;
    origin.validate()?;
    let k = EARTH_RADIUS_M * PI / 180.0;
    Ok(LocalXY {
        x_m: (p.lon - origin.lon) * origin.lat.to_radians().cos() * k,
        y_m: (p.lat - origin.lat) * k,
    })
}

/// Inverse of [`project`].
pub fn unproject(xy: LocalXY, origin: GeoPoint) -> GeoPoint {
    let k = EARTH_RADIUS_M * PI / 180.0;
    GeoPoint {
        lat: origin.lat + xy.y_m / k,
        lon: origin.lon + xy.x_m / (k * origin.lat.to_radians().cos()),
    }
}

/// Edge length (equal to the circumradius) of a cell at `resolution`.
pub fn edge_length_m(resolution: u8) -> f64 {
    RES6_EDGE_M * 7f64.powf((6.0 - f64::from(resolution)) / 2.0)
}

/// A hexagonal cell in axial coordinates at a given resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub res: u8,
    pub q: i32,
    pub r: i32,
}

impl CellId {
    pub fn new(res: u8, q: i32, r: i32) -> Self {
        Self { res, q, r }
    }

    /// The six edge-adjacent cells, counter-clockwise starting east.
    pub fn neighbors(&self) -> [CellId; 6] {
        const DIRS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
        DIRS.map(|(dq, dr)| CellId::new(self.res, self.q + dq, self.r + dr))
    }

    /// Hex distance in cell steps. Both cells must share a resolution.
    pub fn grid_distance(&self, other: &CellId) -> i32 {
        let dq = self.q - other.q;
        let dr = self.r - other.r;
        (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
    }

    /// All cells within `k` steps, in (q, r) order.
    pub fn disk(&self, k: i32) -> Vec<CellId> {
        let mut out = Vec::with_capacity((3 * k * (k + 1) + 1).max(1) as usize);
        for dq in -k..=k {
            let lo = (-k).max(-dq - k);
            let hi = k.min(-dq + k);
            for dr in lo..=hi {
                out.push(CellId::new(self.res, self.q + dq, self.r + dr));
            }
        }
        out
    }
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.res, self.q, self.r)
    }
}

/// Grid anchor and working resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub origin: GeoPoint,
    pub resolution: u8,
}

impl GridConfig {
    pub fn new(origin: GeoPoint, resolution: u8) -> Result<Self> {
        origin.validate()?;
        if resolution > MAX_RESOLUTION {
            return Err(GeoError::InvalidResolution(resolution));
        }
        Ok(Self { origin, resolution })
    }

    pub fn edge_length_m(&self) -> f64 {
        edge_length_m(self.resolution)
    }

    pub fn project(&self, p: GeoPoint) -> Result<LocalXY> {
        project(p, self.origin)
    }

    pub fn unproject(&self, xy: LocalXY) -> GeoPoint {
        unproject(xy, self.origin)
    }

    pub fn cell_of(&self, p: GeoPoint) -> Result<CellId> {
        Ok(self.cell_of_xy(self.project(p)?))
    }

    /// Cell whose centre is nearest to `xy`; exact ties go to the
    /// lexicographically smallest (q, r).
    pub fn cell_of_xy(&self, xy: LocalXY) -> CellId {
        let s = self.edge_length_m();
        let fq = (SQRT3 / 3.0 * xy.x_m - xy.y_m / 3.0) / s;
        let fr = (2.0 / 3.0 * xy.y_m) / s;
        let (q, r) = cube_round(fq, fr);
        let seed = CellId::new(self.resolution, q, r);

        let tol = 1e-9 * s * s;
        let mut best = seed;
        let mut best_d = f64::INFINITY;
        for c in std::iter::once(seed).chain(seed.neighbors()) {
            let ctr = self.center_xy(c);
            let d = (ctr.x_m - xy.x_m).powi(2) + (ctr.y_m - xy.y_m).powi(2);
            let closer = d < best_d - tol;
            let tied = (d - best_d).abs() <= tol && (c.q, c.r) < (best.q, best.r);
            if closer || tied {
                best = c;
                best_d = d;
            }
        }
        best
    }

    pub fn center_xy(&self, c: CellId) -> LocalXY {
        let s = edge_length_m(c.res);
        LocalXY {
            x_m: s * SQRT3 * (f64::from(c.q) + f64::from(c.r) / 2.0),
            y_m: s * 1.5 * f64::from(c.r),
        }
    }

    pub fn center_of(&self, c: CellId) -> GeoPoint {
        self.unproject(self.center_xy(c))
    }

    /// Hexagon vertices in projected metres, counter-clockwise from 30°.
    pub fn cell_polygon_xy(&self, c: CellId) -> [LocalXY; 6] {
        let s = edge_length_m(c.res);
        let ctr = self.center_xy(c);
        std::array::from_fn(|k| {
            let a = (30.0 + 60.0 * k as f64).to_radians();
            LocalXY::new(ctr.x_m + s * a.cos(), ctr.y_m + s * a.sin())
        })
    }

    pub fn cell_polygon(&self, c: CellId) -> [GeoPoint; 6] {
        self.cell_polygon_xy(c).map(|v| self.unproject(v))
    }

    /// Every cell whose hexagon intersects the report circle, in (q, r) order.
    pub fn covered_cells(&self, area: &ReportArea) -> Result<Vec<CellId>> {
        let ctr = self.project(area.center)?;
        Ok(self.covered_cells_xy(ctr, area.radius_m))
    }

    pub fn covered_cells_xy(&self, ctr: LocalXY, radius_m: f64) -> Vec<CellId> {
        let s = self.edge_length_m();
        let home = self.cell_of_xy(ctr);
        // Centres are √3·s apart; anything farther than radius + s cannot touch.
        let k = ((radius_m + s) / (SQRT3 * s)).ceil() as i32 + 1;
        home.disk(k)
            .into_iter()
            .filter(|&c| {
                let poly = self.cell_polygon_xy(c);
                point_polygon_distance(ctr, &poly) <= radius_m
            })
            .collect()
    }

    /// Fraction of the report circle's area that lies inside `cell`.
    pub fn circle_cell_overlap(&self, area: &ReportArea, cell: CellId) -> Result<f64> {
        let ctr = self.project(area.center)?;
        Ok(self.circle_cell_overlap_xy(ctr, area.radius_m, cell))
    }

    pub fn circle_cell_overlap_xy(&self, ctr: LocalXY, radius_m: f64, cell: CellId) -> f64 {
        let s = edge_length_m(cell.res);
        let cc = self.center_xy(cell);
        if ctr.dist(&cc) > radius_m + s {
            return 0.0;
        }
        let circle = circle_polygon(ctr, radius_m);
        let full = shoelace_area(&circle);
        let hex = self.cell_polygon_xy(cell);
        let clipped = clip_convex(&circle, &hex);
        if clipped.len() < 3 {
            return 0.0;
        }
        (shoelace_area(&clipped) / full).clamp(0.0, 1.0)
    }
}

/// A report's uncertainty disc: the incident lies within `radius_m` of `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportArea {
    pub center: GeoPoint,
    pub radius_m: f64,
}

impl ReportArea {
    pub fn new(center: GeoPoint, radius_m: f64) -> Result<Self> {
        center.validate()?;
        if !(radius_m.is_finite() && radius_m > 0.0) {
            return Err(GeoError::InvalidRadius(radius_m));
        }
        Ok(Self { center, radius_m })
    }
}

fn cube_round(fq: f64, fr: f64) -> (i32, i32) {
    let fs = -fq - fr;
    let (mut q, mut r, s) = (fq.round(), fr.round(), fs.round());
    let (dq, dr, ds) = ((q - fq).abs(), (r - fr).abs(), (s - fs).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i32, r as i32)
}

/// Regular polygon inscribed in the circle, counter-clockwise.
pub fn circle_polygon(ctr: LocalXY, radius_m: f64) -> Vec<LocalXY> {
    (0..CIRCLE_SEGMENTS)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / CIRCLE_SEGMENTS as f64;
            LocalXY::new(ctr.x_m + radius_m * a.cos(), ctr.y_m + radius_m * a.sin())
        })
        .collect()
}

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn shoelace_area(poly: &[LocalXY]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x_m * b.y_m - b.x_m * a.y_m;
    }
    acc / 2.0
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[LocalXY], clip: &[LocalXY]) -> Vec<LocalXY> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let nxt = input[(j + 1) % n];
            let cur_in = side(cur, e0, e1) >= 0.0;
            let nxt_in = side(nxt, e0, e1) >= 0.0;
            if cur_in {
                output.push(cur);
                if !nxt_in {
                    output.push(intersect(cur, nxt, e0, e1));
                }
            } else if nxt_in {
                output.push(intersect(cur, nxt, e0, e1));
            }
        }
    }
    output
}

fn side(p: LocalXY, a: LocalXY, b: LocalXY) -> f64 {
    (b.x_m - a.x_m) * (p.y_m - a.y_m) - (b.y_m - a.y_m) * (p.x_m - a.x_m)
}

// Segment p→q against the infinite line a→b; callers guarantee a crossing.
fn intersect(p: LocalXY, q: LocalXY, a: LocalXY, b: LocalXY) -> LocalXY {
    let sp = side(p, a, b);
    let sq = side(q, a, b);
    let t = sp / (sp - sq);
    LocalXY::new(p.x_m + t * (q.x_m - p.x_m), p.y_m + t * (q.y_m - p.y_m))
}

fn point_segment_distance(p: LocalXY, a: LocalXY, b: LocalXY) -> f64 {
    let (dx, dy) = (b.x_m - a.x_m, b.y_m - a.y_m);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x_m - a.x_m) * dx + (p.y_m - a.y_m) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(&LocalXY::new(a.x_m + t * dx, a.y_m + t * dy))
}

/// Distance from `p` to a convex CCW polygon; zero when inside.
fn point_polygon_distance(p: LocalXY, poly: &[LocalXY]) -> f64 {
    let n = poly.len();
    let inside = (0..n).all(|i| side(p, poly[i], poly[(i + 1) % n]) >= 0.0);
    if inside {
        return 0.0;
    }
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}
