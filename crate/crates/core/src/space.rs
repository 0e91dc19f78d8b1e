//! Phase spaces, points, the metric, normalized volume and uniform partitions.
//!
//! Three spaces are supported: the circle `R/Z`, a closed interval `[a, b]`
//! and the flat cylinder `(R/Z) x [-1, 1]`. Volumes are normalized to total
//! mass one and the metric is normalized the same way, so an interval has
//! diameter 1 and the cylinder's `y` axis contributes `|dy| / 2`.
//!
//! Cells are half-open boxes `[lo, lo + w)`; on an interval (and on the
//! cylinder's `y` axis) the last cell is also closed on the right.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSpace {
    Circle,
    Interval { a: f64, b: f64 },
    Cylinder,
}

/// Lower and upper bound of the cylinder's second coordinate.
pub const CYLINDER_Y: (f64, f64) = (-1.0, 1.0);

/// A point of a state space, or a raw (not yet canonical) coordinate tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Point {
    D1(f64),
    D2(f64, f64),
}

impl Point {
    #[inline]
    pub fn x(&self) -> f64 {
        match *self {
            Point::D1(x) | Point::D2(x, _) => x,
        }
    }

    /// Second coordinate, `0.0` for one-dimensional points.
    #[inline]
    pub fn y(&self) -> f64 {
        match *self {
            Point::D1(_) => 0.0,
            Point::D2(_, y) => y,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Point::D1(_) => 1,
            Point::D2(..) => 2,
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        match *self {
            Point::D1(x) => vec![x],
            Point::D2(x, y) => vec![x, y],
        }
    }

    /// Componentwise translation by a noise vector `[tx, ty]` (`ty` ignored in 1D).
    #[inline]
    pub fn translate(&self, t: [f64; 2]) -> Point {
        match *self {
            Point::D1(x) => Point::D1(x + t[0]),
            Point::D2(x, y) => Point::D2(x + t[0], y + t[1]),
        }
    }

    fn is_finite(&self) -> bool {
        self.x().is_finite() && self.y().is_finite()
    }
}

#[inline]
fn mod1(x: f64) -> f64 {
    let r = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[inline]
fn circle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 1.0;
    d.min(1.0 - d)
}

impl StateSpace {
    pub fn dim(&self) -> usize {
        match self {
            StateSpace::Circle | StateSpace::Interval { .. } => 1,
            StateSpace::Cylinder => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StateSpace::Circle => "circle",
            StateSpace::Interval { .. } => "interval",
            StateSpace::Cylinder => "cylinder",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StateSpace::Interval { a, b } = *self {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(LabError::Parameter(format!("interval [{a}, {b}] is empty")));
            }
        }
        Ok(())
    }

    fn check_dim(&self, p: &Point) -> Result<()> {
        if p.dim() != self.dim() {
            return Err(LabError::SpaceMismatch(format!(
                "{}-dimensional point on the {}",
                p.dim(),
                self.name()
            )));
        }
        Ok(())
    }

    /// Distance between canonical points (normalized so the space has
    /// diameter at most 1; the circle's is 1/2).
    pub fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        self.check_dim(p)?;
        self.check_dim(q)?;
        Ok(self.dist_unchecked(p, q))
    }

    #[inline]
    pub(crate) fn dist_unchecked(&self, p: &Point, q: &Point) -> f64 {
        match *self {
            StateSpace::Circle => circle_gap(p.x(), q.x()),
            StateSpace::Interval { a, b } => (p.x() - q.x()).abs() / (b - a),
            StateSpace::Cylinder => circle_gap(p.x(), q.x()).max(0.5 * (p.y() - q.y()).abs()),
        }
    }

    /// Canonicalizes raw coordinates: circle coordinates reduced mod 1,
    /// bounded coordinates clamped to their closed range.
    pub fn wrap(&self, raw: Point) -> Result<Point> {
        self.check_dim(&raw)?;
        if !raw.is_finite() {
            return Err(LabError::NonFinite);
        }
        Ok(self.canonical(raw).0)
    }

    /// Hot-path canonicalization without validation. The flag reports
    /// whether a clamp at a boundary was applied.
    #[inline]
    pub(crate) fn canonical(&self, raw: Point) -> (Point, bool) {
        match (*self, raw) {
            (StateSpace::Circle, p) => (Point::D1(mod1(p.x())), false),
            (StateSpace::Interval { a, b }, p) => {
                let x = p.x();
                (Point::D1(x.clamp(a, b)), x < a || x > b)
            }
            (StateSpace::Cylinder, p) => {
                let y = p.y();
                let (lo, hi) = CYLINDER_Y;
                (Point::D2(mod1(p.x()), y.clamp(lo, hi)), y < lo || y > hi)
            }
        }
    }

    /// Whether `p` already lies in the canonical fundamental domain.
    pub fn is_canonical(&self, p: &Point) -> bool {
        if p.dim() != self.dim() || !p.is_finite() {
            return false;
        }
        match *self {
            StateSpace::Circle => (0.0..1.0).contains(&p.x()),
            StateSpace::Interval { a, b } => (a..=b).contains(&p.x()),
            StateSpace::Cylinder => (0.0..1.0).contains(&p.x()) && (CYLINDER_Y.0..=CYLINDER_Y.1).contains(&p.y()),
        }
    }
}

/// Uniform grid of `nx` (times `ny` on the cylinder) cells. Cell `i` of a
/// 2D grid has column `i % nx` and row `i / nx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    space: StateSpace,
    nx: usize,
    ny: usize,
}

/// Index of the half-open cell `[lo + k w, lo + (k + 1) w)` holding `t`,
/// with cell edges computed as `lo + k * (hi - lo) / n`.
#[inline]
fn axis_cell(t: f64, lo: f64, hi: f64, n: usize) -> usize {
    let len = hi - lo;
    let edge = |k: usize| lo + len * (k as f64) / (n as f64);
    let mut k = (((t - lo) / len) * n as f64).floor().max(0.0) as usize;
    if k >= n {
        k = n - 1;
    }
    if k > 0 && t < edge(k) {
        k -= 1;
    } else if k + 1 < n && t >= edge(k + 1) {
        k += 1;
    }
    k
}

impl Partition {
    pub fn new(space: StateSpace, nx: usize, ny: usize) -> Result<Self> {
        space.validate()?;
        if nx == 0 || ny == 0 {
            return Err(LabError::Parameter("partition needs at least one cell per axis".into()));
        }
        if space.dim() == 1 && ny != 1 {
            return Err(LabError::SpaceMismatch(format!(
                "{} partition cannot have {ny} rows",
                space.name()
            )));
        }
        Ok(Partition { space, nx, ny })
    }

    pub fn new_1d(space: StateSpace, n: usize) -> Result<Self> {
        Self::new(space, n, 1)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn x_range(&self) -> (f64, f64) {
        match self.space {
            StateSpace::Interval { a, b } => (a, b),
            _ => (0.0, 1.0),
        }
    }

    /// Raw coordinate widths `(wx, wy)`; `wy` is 0 for 1D spaces.
    pub fn raw_widths(&self) -> (f64, f64) {
        let (lo, hi) = self.x_range();
        let wx = (hi - lo) / self.nx as f64;
        let wy = match self.space {
            StateSpace::Cylinder => (CYLINDER_Y.1 - CYLINDER_Y.0) / self.ny as f64,
            _ => 0.0,
        };
        (wx, wy)
    }

    /// Cell width in the (normalized) metric, the largest over the axes.
    pub fn cell_width(&self) -> f64 {
        match self.space {
            StateSpace::Cylinder => 1.0 / self.nx.min(self.ny) as f64,
            _ => 1.0 / self.nx as f64,
        }
    }

    pub fn cell_of(&self, p: &Point) -> usize {
        let (lo, hi) = self.x_range();
        let ix = axis_cell(p.x(), lo, hi, self.nx);
        match self.space {
            StateSpace::Cylinder => {
                let iy = axis_cell(p.y(), CYLINDER_Y.0, CYLINDER_Y.1, self.ny);
                iy * self.nx + ix
            }
            _ => ix,
        }
    }

    /// `[(x_lo, x_hi), (y_lo, y_hi)]` of cell `i` (the `y` pair is `(0, 0)` in 1D).
    pub fn cell_bounds(&self, i: usize) -> [(f64, f64); 2] {
        let (lo, hi) = self.x_range();
        let (ix, iy) = (i % self.nx, i / self.nx);
        let e = |lo: f64, hi: f64, n: usize, k: usize| lo + (hi - lo) * (k as f64) / (n as f64);
        let xb = (e(lo, hi, self.nx, ix), e(lo, hi, self.nx, ix + 1));
        let yb = match self.space {
            StateSpace::Cylinder => (
                e(CYLINDER_Y.0, CYLINDER_Y.1, self.ny, iy),
                e(CYLINDER_Y.0, CYLINDER_Y.1, self.ny, iy + 1),
            ),
            _ => (0.0, 0.0),
        };
        [xb, yb]
    }

    pub fn cell_center(&self, i: usize) -> Point {
        let [(x0, x1), (y0, y1)] = self.cell_bounds(i);
        match self.space {
            StateSpace::Cylinder => Point::D2(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
            _ => Point::D1(0.5 * (x0 + x1)),
        }
    }

    pub fn cell_volume(&self, _i: usize) -> f64 {
        1.0 / self.len() as f64
    }

    /// Volume of `count` cells, computed from the count so that all cells
    /// together have volume exactly 1.
    pub fn volume_of(&self, count: usize) -> f64 {
        count as f64 / self.len() as f64
    }

    /// Doubles the resolution along every axis.
    pub fn refined(&self) -> Partition {
        let ny = if self.space.dim() == 2 { 2 * self.ny } else { 1 };
        Partition {
            space: self.space,
            nx: 2 * self.nx,
            ny,
        }
    }
}
