//! Built-in systems and their reference attractor data.
//!
//! * [`Rotation`]: rigid circle rotation, the symmetric baseline.
//! * [`NorthSouth`]: `x - a sin(4 pi x)`, two hyperbolic sinks at `0` and `1/2`
//!   with basins of length `1/2` each.
//! * [`AsymTwoSink`]: `x - a sin(2 pi x) - b sin(4 pi x)`, two sinks with
//!   unequal basins.
//! * [`InfiniteSinks`]: time-one map of the gradient-type flow of
//!   `phi(s) = s^4 sin(1/s)` on `[-1/pi, 1/pi]` with endpoints glued, which
//!   has infinitely many sinks accumulating at the degenerate point `s = 0`.
//! * [`Bowen`]: time-one map of a dissipative pendulum field on the cylinder
//!   whose orbits accumulate on a heteroclinic cycle between two saddles.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_PI, FRAC_PI_2, PI, TAU};

use crate::error::{LabError, Result};
use crate::noise::{DeterministicMap, PerturbedSystem};
use crate::space::{Point, StateSpace};
use crate::stability::{AttractorRef, Basin};

#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    angle: f64,
}

impl Rotation {
    pub fn new(angle: f64) -> Self {
        Self { angle }
    }
}

impl DeterministicMap for Rotation {
    fn space(&self) -> StateSpace {
        StateSpace::Circle
    }

    fn lift(&self, p: Point) -> Point {
        Point::D1(p.x() + self.angle)
    }

    fn name(&self) -> String {
        format!("rotation(angle={})", self.angle)
    }
}

/// The identity map of any space.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    space: StateSpace,
}

impl Identity {
    pub fn new(space: StateSpace) -> Self {
        Self { space }
    }
}

impl DeterministicMap for Identity {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn lift(&self, p: Point) -> Point {
        p
    }

    fn name(&self) -> String {
        format!("identity({})", self.space.name())
    }
}

/// `x - a sin(4 pi x) (mod 1)` for `0 < a < 1/(4 pi)`.
#[derive(Debug, Clone, Copy)]
pub struct NorthSouth {
    a: f64,
}

impl NorthSouth {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0 && a < 0.25 * FRAC_1_PI) {
            return Err(LabError::Parameter(format!(
                "north_south needs 0 < a < 1/(4 pi), got a = {a}"
            )));
        }
        Ok(Self { a })
    }

    pub fn derivative(&self, x: f64) -> f64 {
        1.0 - 4.0 * PI * self.a * (4.0 * PI * x).cos()
    }

    pub fn sinks() -> [f64; 2] {
        [0.0, 0.5]
    }

    pub fn sources() -> [f64; 2] {
        [0.25, 0.75]
    }
}

impl DeterministicMap for NorthSouth {
    fn space(&self) -> StateSpace {
        StateSpace::Circle
    }

    #[inline]
    fn lift(&self, p: Point) -> Point {
        let x = p.x();
        Point::D1(x - self.a * (4.0 * PI * x).sin())
    }

    fn name(&self) -> String {
        format!("north_south(a={})", self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Sink,
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FixedPoint {
    pub x: f64,
    pub derivative: f64,
    pub kind: Stability,
}

/// Fixed points of a degree-one circle map given by its lift, located by
/// bisection on `lift(x) - x` over `grid` brackets offset by half a step.
pub fn circle_fixed_points(lift: impl Fn(f64) -> f64, grid: usize) -> Vec<FixedPoint> {
    let g = |x: f64| lift(x) - x;
    let n = grid as f64;
    let mut roots = Vec::new();
    for k in 0..grid {
        let (mut lo, mut hi) = ((k as f64 - 0.5) / n, (k as f64 + 0.5) / n);
        let (glo, ghi) = (g(lo), g(hi));
        if glo == 0.0 {
            roots.push(lo);
            continue;
        }
        if glo.signum() == ghi.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid).signum() == glo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots
        .into_iter()
        .map(|r| {
            let x = r.rem_euclid(1.0);
            let h = 1e-6;
            let derivative = (lift(r + h) - lift(r - h)) / (2.0 * h);
            FixedPoint {
                x: if x >= 1.0 { 0.0 } else { x },
                derivative,
                kind: if derivative.abs() < 1.0 {
                    Stability::Sink
                } else {
                    Stability::Source
                },
            }
        })
        .collect()
}

/// `x - a sin(2 pi x) - b sin(4 pi x) (mod 1)`. The constructor locates the
/// fixed points and requires exactly two sinks and two sources,
/// alternating around the circle, and a positive derivative everywhere.
#[derive(Debug, Clone)]
pub struct AsymTwoSink {
    a: f64,
    b: f64,
    fixed: Vec<FixedPoint>,
}

impl AsymTwoSink {
    pub const DEFAULT: (f64, f64) = (0.03, 0.05);

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(LabError::Parameter("asym_two_sink parameters must be finite".into()));
        }
        let lift = move |x: f64| x - a * (TAU * x).sin() - b * (2.0 * TAU * x).sin();
        let deriv = |x: f64| 1.0 - TAU * a * (TAU * x).cos() - 2.0 * TAU * b * (2.0 * TAU * x).cos();
        if let Some(k) = (0..10_000).find(|&k| deriv(k as f64 / 10_000.0) <= 0.0) {
            return Err(LabError::PhasePortrait(format!(
                "map is not a circle diffeomorphism (f' <= 0 at x = {})",
                k as f64 / 10_000.0
            )));
        }
        let fixed = circle_fixed_points(lift, 4096);
        if fixed.len() != 4 {
            return Err(LabError::PhasePortrait(format!(
                "expected 4 fixed points, found {}",
                fixed.len()
            )));
        }
        let alternating = (0..4).all(|i| fixed[i].kind != fixed[(i + 1) % 4].kind);
        if !alternating {
            return Err(LabError::PhasePortrait("sinks and sources do not alternate".into()));
        }
        Ok(Self { a, b, fixed })
    }

    pub fn fixed_points(&self) -> &[FixedPoint] {
        &self.fixed
    }

    /// Sinks with their basins (the arcs between the flanking sources).
    pub fn basins(&self) -> Vec<(f64, Basin)> {
        let n = self.fixed.len();
        (0..n)
            .filter(|&i| self.fixed[i].kind == Stability::Sink)
            .map(|i| {
                let lo = self.fixed[(i + n - 1) % n].x;
                let hi = self.fixed[(i + 1) % n].x;
                (self.fixed[i].x, Basin::arc(lo, hi))
            })
            .collect()
    }
}

impl DeterministicMap for AsymTwoSink {
    fn space(&self) -> StateSpace {
        StateSpace::Circle
    }

    #[inline]
    fn lift(&self, p: Point) -> Point {
        let x = p.x();
        Point::D1(x - self.a * (TAU * x).sin() - self.b * (2.0 * TAU * x).sin())
    }

    fn name(&self) -> String {
        format!("asym_two_sink(a={}, b={})", self.a, self.b)
    }
}

/// `phi'(s) = s^2 (4 s sin(1/s) - cos(1/s))`, with `phi'(0) = 0`.
#[inline]
pub fn phi_prime(s: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let (sin, cos) = (1.0 / s).sin_cos();
    s * s * (4.0 * s * sin - cos)
}

/// Chart `[-1/pi, 1/pi) -> [0, 1)`: `x = 1/2 + s pi / 2`, so the degenerate
/// point `s = 0` sits at `x = 1/2` and the glued endpoints at `x = 0`.
#[inline]
pub fn chart_to_circle(s: f64) -> f64 {
    0.5 + s * FRAC_PI_2
}

#[inline]
pub fn circle_to_chart(x: f64) -> f64 {
    (x - 0.5) / FRAC_PI_2
}

#[inline]
fn wrap_chart(s: f64) -> f64 {
    if (-FRAC_1_PI..FRAC_1_PI).contains(&s) {
        return s;
    }
    let period = 2.0 * FRAC_1_PI;
    s - period * ((s + FRAC_1_PI) / period).floor()
}

/// Largest `u = 1/s` up to which the sinks are treated as resolvable.
pub const SINK_U_CAP: f64 = 1e8;

/// Time-one map of `ds/dt = -phi'(s)` on the glued chart, RK4 with fixed
/// substeps. Local minima of `phi` are sinks and local maxima sources.
#[derive(Debug, Clone, Copy)]
pub struct InfiniteSinks {
    substeps: usize,
}

impl Default for InfiniteSinks {
    fn default() -> Self {
        Self { substeps: 64 }
    }
}

impl InfiniteSinks {
    pub fn with_substeps(substeps: usize) -> Self {
        Self { substeps }
    }

    /// Maps a lifted chart coordinate forward by one time unit.
    ///
    /// The glued field is only continuous at `s = +-1/pi` (its derivative
    /// jumps), so a substep that crosses the glue point is split there to
    /// keep fourth-order accuracy.
    pub fn flow_chart(&self, s0: f64) -> f64 {
        let v = |s: f64| -phi_prime(wrap_chart(s));
        let rk4 = |s: f64, h: f64| {
            let k1 = v(s);
            let k2 = v(s + 0.5 * h * k1);
            let k3 = v(s + 0.5 * h * k2);
            let k4 = v(s + h * k3);
            s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        };
        let period = 2.0 * FRAC_1_PI;
        let sheet = |s: f64| ((s + FRAC_1_PI) / period).floor();
        let h = 1.0 / self.substeps as f64;
        let mut s = s0;
        for _ in 0..self.substeps {
            let next = rk4(s, h);
            let (a, b) = (sheet(s), sheet(next));
            if a == b {
                s = next;
                continue;
            }
            let glue = -FRAC_1_PI + period * a.max(b);
            let mut tau = h * (glue - s) / (next - s);
            for _ in 0..4 {
                tau = (tau + (glue - rk4(s, tau)) / v(glue)).clamp(0.0, h);
            }
            s = rk4(glue, h - tau);
        }
        s
    }

    /// Number of sinks with a computable basin below [`SINK_U_CAP`].
    pub fn sink_cap() -> usize {
        (SINK_U_CAP / PI).floor() as usize - 1
    }

    /// The `k`-th critical branch `u_k in (k pi, k pi + pi/2)` solving
    /// `tan(u) = u / 4`, by bisection on the angle offset.
    pub fn critical_u(k: usize) -> f64 {
        let base = k as f64 * PI;
        let h = |t: f64| 4.0 * t.sin() - (base + t) * t.cos();
        let (mut lo, mut hi) = (0.0, FRAC_PI_2);
        while hi - lo > 1e-15 {
            let mid = 0.5 * (lo + hi);
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        base + 0.5 * (lo + hi)
    }

    /// The `count` outermost sinks ordered by decreasing `|s|`, each with
    /// its basin bounded by the two flanking sources.
    pub fn sinks(count: usize) -> Result<Vec<ChartSink>> {
        let cap = Self::sink_cap();
        if count == 0 || count > cap {
            return Err(LabError::SinkCap { requested: count, cap });
        }
        let us: Vec<f64> = (1..=count + 1).map(Self::critical_u).collect();
        let mut out = Vec::with_capacity(count);
        for j in 1..=count {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            let s = sign / us[j - 1];
            let inner = sign / us[j];
            let outer = if j == 1 { -1.0 / us[0] } else { sign / us[j - 2] };
            let (lo_s, hi_s) = if sign > 0.0 { (inner, outer) } else { (outer, inner) };
            let kind = classify_critical(s);
            debug_assert_eq!(kind, Stability::Sink);
            out.push(ChartSink {
                s,
                x: chart_to_circle(s),
                basin: Basin::arc(chart_to_circle(lo_s), chart_to_circle(hi_s)),
                basin_chart: (lo_s, hi_s),
            });
        }
        Ok(out)
    }

    /// All critical points `+-1/u_k`, `k <= branches`, with their type.
    pub fn critical_points(branches: usize) -> Vec<(f64, Stability)> {
        (1..=branches)
            .flat_map(|k| {
                let u = Self::critical_u(k);
                [1.0 / u, -1.0 / u]
            })
            .map(|s| (s, classify_critical(s)))
            .collect()
    }
}

/// Type of a zero of `phi'` for the flow `-phi'`: a sink where `phi'` goes
/// from negative to positive.
pub fn classify_critical(s: f64) -> Stability {
    let d = 1e-4 * s * s;
    if phi_prime(s - d) < 0.0 && phi_prime(s + d) > 0.0 {
        Stability::Sink
    } else {
        Stability::Source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ChartSink {
    /// Position in the original chart `[-1/pi, 1/pi]`.
    pub s: f64,
    /// Position on the circle.
    pub x: f64,
    pub basin: Basin,
    pub basin_chart: (f64, f64),
}

impl DeterministicMap for InfiniteSinks {
    fn space(&self) -> StateSpace {
        StateSpace::Circle
    }

    fn lift(&self, p: Point) -> Point {
        let x = p.x();
        let s0 = circle_to_chart(x);
        let s1 = self.flow_chart(s0);
        Point::D1(x + (s1 - s0) * FRAC_PI_2)
    }

    fn name(&self) -> String {
        format!("example1(substeps={})", self.substeps)
    }
}

/// Saddle energy of the Bowen field.
pub const BOWEN_H_SEP: f64 = 1.0 / (8.0 * PI * PI);

/// `H(x, y) = y^2/2 + (1 + cos(4 pi x)) / (4 pi)^2`.
#[inline]
pub fn bowen_energy(x: f64, y: f64) -> f64 {
    0.5 * y * y + (1.0 + (2.0 * TAU * x).cos()) / (16.0 * PI * PI)
}

/// Time-one map of `V = J grad H + c (H_sep - H) grad H` on the cylinder.
/// `J grad H` circulates along level sets of `H`; the second term pulls
/// every level set towards `H = H_sep`, the heteroclinic cycle joining the
/// saddles at `x = 0` and `x = 1/2`.
#[derive(Debug, Clone, Copy)]
pub struct Bowen {
    c: f64,
    substeps: usize,
}

impl Bowen {
    pub fn new(c: f64) -> Result<Self> {
        Self::with_substeps(c, 128)
    }

    pub fn with_substeps(c: f64, substeps: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(LabError::Parameter(format!("bowen needs c > 0, got {c}")));
        }
        Ok(Self { c, substeps })
    }

    #[inline]
    pub fn field(&self, x: f64, y: f64) -> (f64, f64) {
        let (sin, cos) = (2.0 * TAU * x).sin_cos();
        let hx = -sin / (4.0 * PI);
        let h = 0.5 * y * y + (1.0 + cos) / (16.0 * PI * PI);
        let pull = self.c * (BOWEN_H_SEP - h);
        (y + pull * hx, -hx + pull * y)
    }

    pub fn flow(&self, x0: f64, y0: f64) -> (f64, f64) {
        let h = 1.0 / self.substeps as f64;
        let (mut x, mut y) = (x0, y0);
        for _ in 0..self.substeps {
            let k1 = self.field(x, y);
            let k2 = self.field(x + 0.5 * h * k1.0, y + 0.5 * h * k1.1);
            let k3 = self.field(x + 0.5 * h * k2.0, y + 0.5 * h * k2.1);
            let k4 = self.field(x + h * k3.0, y + h * k3.1);
            x += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (x, y)
    }

    /// Critical points of `H` in the fundamental domain by Newton's method,
    /// with the sign of the Hessian determinant.
    pub fn critical_points() -> Result<Vec<(Point, f64)>> {
        let mut found: Vec<(Point, f64)> = Vec::new();
        for k in 0..16 {
            let (mut x, mut y): (f64, f64) = (k as f64 / 16.0 + 1.0 / 64.0, 0.05);
            let mut converged = false;
            for _ in 0..100 {
                let gx = -(2.0 * TAU * x).sin() / (4.0 * PI);
                let hxx = -(2.0 * TAU * x).cos();
                if hxx.abs() < 1e-12 {
                    break;
                }
                let (dx, dy) = (gx / hxx, y);
                x -= dx;
                y -= dy;
                if dx.abs() < 1e-15 && dy.abs() < 1e-15 {
                    converged = true;
                    break;
                }
            }
            if !converged {
                continue;
            }
            let x = x.rem_euclid(1.0);
            let x = if x >= 1.0 - 1e-13 { 0.0 } else { x };
            let det = -(2.0 * TAU * x).cos();
            if !found.iter().any(|(p, _)| (p.x() - x).abs() < 1e-9) {
                found.push((Point::D2(x, y), det));
            }
        }
        found.sort_by(|a, b| a.0.x().total_cmp(&b.0.x()));
        if found.len() != 4 {
            return Err(LabError::Newton(format!(
                "expected 4 critical points of H, found {}",
                found.len()
            )));
        }
        Ok(found)
    }

    /// The two saddles `s1, s2` (indefinite Hessian).
    pub fn saddles() -> Result<[Point; 2]> {
        let s: Vec<Point> = Self::critical_points()?
            .into_iter()
            .filter(|(_, det)| *det < 0.0)
            .map(|(p, _)| p)
            .collect();
        <[Point; 2]>::try_from(s).map_err(|s| LabError::Newton(format!("expected 2 saddles, found {}", s.len())))
    }

    /// The two eye centers `s3, s4` (definite Hessian), sources of the field.
    pub fn sources() -> Result<[Point; 2]> {
        let s: Vec<Point> = Self::critical_points()?
            .into_iter()
            .filter(|(_, det)| *det > 0.0)
            .map(|(p, _)| p)
            .collect();
        <[Point; 2]>::try_from(s).map_err(|s| LabError::Newton(format!("expected 2 sources, found {}", s.len())))
    }
}

impl DeterministicMap for Bowen {
    fn space(&self) -> StateSpace {
        StateSpace::Cylinder
    }

    fn lift(&self, p: Point) -> Point {
        let (x, y) = self.flow(p.x(), p.y());
        Point::D2(x, y)
    }

    fn name(&self) -> String {
        format!("bowen(c={}, substeps={})", self.c, self.substeps)
    }
}

/// A built-in model: the perturbed system, its reference attractors and
/// the noise range over which they are meaningful.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub system: PerturbedSystem,
    pub refs: Vec<AttractorRef>,
    /// Largest supported noise level for this model.
    pub eps_max: f64,
    /// Vertices `(s1, s2)` of the convex-hull check, when the model has one.
    pub hull_vertices: Option<[Point; 2]>,
    /// Multi-cell reference sets used by support diagnostics (the
    /// separatrix cells of the Bowen model are generated from this).
    pub level_set: Option<LevelSet>,
}

/// A curve `{H = level}` described by the energy function.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum LevelSet {
    BowenSeparatrix,
}

impl LevelSet {
    /// Cells whose closure meets the level set. For the Bowen energy
    /// `H = y^2/2 + g(x)` the range of `H` over a cell is separable, so it is
    /// computed exactly from the ranges of `y^2` and of `cos(4 pi x)`.
    pub fn cells(&self, part: &crate::space::Partition) -> Vec<usize> {
        match self {
            LevelSet::BowenSeparatrix => (0..part.len())
                .filter(|&i| {
                    let [(x0, x1), (y0, y1)] = part.cell_bounds(i);
                    let (ymin2, ymax2) = if y0 <= 0.0 && y1 >= 0.0 {
                        (0.0, (y0 * y0).max(y1 * y1))
                    } else {
                        ((y0 * y0).min(y1 * y1), (y0 * y0).max(y1 * y1))
                    };
                    let mut cmin = (2.0 * TAU * x0).cos().min((2.0 * TAU * x1).cos());
                    let mut cmax = (2.0 * TAU * x0).cos().max((2.0 * TAU * x1).cos());
                    // interior extrema of cos(4 pi x) sit at x = m / 4
                    let mut m = (4.0 * x0).ceil();
                    while m / 4.0 <= x1 {
                        let v = if (m as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                        cmin = cmin.min(v);
                        cmax = cmax.max(v);
                        m += 1.0;
                    }
                    let k = 1.0 / (16.0 * PI * PI);
                    let hmin = 0.5 * ymin2 + k * (1.0 + cmin);
                    let hmax = 0.5 * ymax2 + k * (1.0 + cmax);
                    hmin <= BOWEN_H_SEP && BOWEN_H_SEP <= hmax
                })
                .collect(),
        }
    }
}

pub const MODEL_NAMES: [&str; 5] = ["rotation", "north_south", "asym_two_sink", "example1", "bowen"];

fn take_params(name: &str, given: &BTreeMap<String, f64>, defaults: &[(&str, f64)]) -> Result<BTreeMap<String, f64>> {
    if let Some(bad) = given.keys().find(|k| !defaults.iter().any(|(d, _)| d == k)) {
        let allowed: Vec<&str> = defaults.iter().map(|(d, _)| *d).collect();
        return Err(LabError::Parameter(format!(
            "model `{name}` has no parameter `{bad}` (allowed: {})",
            allowed.join(", ")
        )));
    }
    Ok(defaults
        .iter()
        .map(|(k, v)| (k.to_string(), *given.get(*k).unwrap_or(v)))
        .collect())
}

fn sink_ref(id: String, description: String, x: f64, basin: Option<Basin>) -> AttractorRef {
    AttractorRef {
        id,
        description,
        carrier: vec![Point::D1(x)],
        reference: vec![(Point::D1(x), 1.0)],
        basin,
    }
}

impl ModelSpec {
    /// Looks up a model by name, filling unspecified parameters with their
    /// defaults, and runs the load-time self-check.
    pub fn by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let spec = match name {
            "rotation" => {
                let p = take_params(name, params, &[("angle", 0.25)])?;
                ModelSpec {
                    name: name.into(),
                    system: PerturbedSystem::new(Rotation::new(p["angle"])),
                    params: p,
                    refs: Vec::new(),
                    eps_max: 0.2,
                    hull_vertices: None,
                    level_set: None,
                }
            }
            "north_south" => {
                let p = take_params(name, params, &[("a", 0.05)])?;
                let map = NorthSouth::new(p["a"])?;
                let refs = vec![
                    sink_ref(
                        "sink_0".into(),
                        "sink at x = 0".into(),
                        0.0,
                        Some(Basin::arc(0.75, 0.25)),
                    ),
                    sink_ref(
                        "sink_half".into(),
                        "sink at x = 1/2".into(),
                        0.5,
                        Some(Basin::arc(0.25, 0.75)),
                    ),
                ];
                ModelSpec {
                    name: name.into(),
                    system: PerturbedSystem::new(map),
                    params: p,
                    refs,
                    eps_max: 0.1,
                    hull_vertices: None,
                    level_set: None,
                }
            }
            "asym_two_sink" => {
                let (da, db) = AsymTwoSink::DEFAULT;
                let p = take_params(name, params, &[("a", da), ("b", db)])?;
                let map = AsymTwoSink::new(p["a"], p["b"])?;
                let refs = map
                    .basins()
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, basin))| sink_ref(format!("sink_{i}"), format!("sink at x = {x:.6}"), x, Some(basin)))
                    .collect();
                ModelSpec {
                    name: name.into(),
                    system: PerturbedSystem::new(map),
                    params: p,
                    refs,
                    eps_max: 0.1,
                    hull_vertices: None,
                    level_set: None,
                }
            }
            "example1" => {
                let p = take_params(name, params, &[("sinks", 12.0)])?;
                let count = p["sinks"];
                if !(count >= 1.0 && count.fract() == 0.0) {
                    return Err(LabError::Parameter(format!(
                        "sinks must be a positive integer, got {count}"
                    )));
                }
                let refs = InfiniteSinks::sinks(count as usize)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, sink)| {
                        sink_ref(
                            format!("sink_{}", i + 1),
                            format!("sink at s = {:.9} (x = {:.9})", sink.s, sink.x),
                            sink.x,
                            Some(sink.basin),
                        )
                    })
                    .collect();
                ModelSpec {
                    name: name.into(),
                    system: PerturbedSystem::new(InfiniteSinks::default()),
                    params: p,
                    refs,
                    eps_max: 0.1,
                    hull_vertices: None,
                    level_set: None,
                }
            }
            "bowen" => {
                let p = take_params(name, params, &[("c", 4.0)])?;
                let map = Bowen::new(p["c"])?;
                let saddles = Bowen::saddles()?;
                let refs = vec![AttractorRef {
                    id: "separatrix".into(),
                    description: "heteroclinic cycle through the saddles s1, s2".into(),
                    carrier: saddles.to_vec(),
                    reference: vec![(saddles[0], 0.5), (saddles[1], 0.5)],
                    basin: None,
                }];
                ModelSpec {
                    name: name.into(),
                    system: PerturbedSystem::new(map),
                    params: p,
                    refs,
                    eps_max: 0.05,
                    hull_vertices: Some(saddles),
                    level_set: Some(LevelSet::BowenSeparatrix),
                }
            }
            other => {
                return Err(LabError::Parameter(format!(
                    "unknown model `{other}` (available: {})",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        spec.self_check()?;
        Ok(spec)
    }

    pub fn builtin_defaults() -> Vec<ModelSpec> {
        MODEL_NAMES
            .iter()
            .map(|n| ModelSpec::by_name(n, &BTreeMap::new()).expect("built-in defaults are valid"))
            .collect()
    }

    /// Reference equilibria must be fixed points of the time-one map within
    /// `1e-8` with the declared stability (finite-difference Jacobian).
    pub fn self_check(&self) -> Result<()> {
        let sys = &self.system;
        let space = sys.space();
        for r in &self.refs {
            for p in &r.carrier {
                let drift = space.dist(&sys.image(*p), p)?;
                if drift > 1e-8 {
                    return Err(LabError::PhasePortrait(format!(
                        "{}: reference point {p:?} moves by {drift:e}",
                        r.id
                    )));
                }
                let ok = match space.dim() {
                    1 => {
                        let h = 1e-7;
                        let d = (sys.map().lift(Point::D1(p.x() + h)).x() - sys.map().lift(Point::D1(p.x() - h)).x())
                            / (2.0 * h);
                        d.abs() < 1.0
                    }
                    // separatrix carriers are saddles: one expanding and one contracting direction
                    _ => {
                        let eig = jacobian_eigen_moduli(sys, *p);
                        eig[0] < 1.0 && eig[1] > 1.0
                    }
                };
                if !ok {
                    return Err(LabError::PhasePortrait(format!(
                        "{}: reference point {p:?} has the wrong stability type",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sorted moduli of the eigenvalues of the finite-difference Jacobian of a
/// planar map at `p`.
pub fn jacobian_eigen_moduli(sys: &PerturbedSystem, p: Point) -> [f64; 2] {
    let h = 1e-6;
    let f = |dx: f64, dy: f64| sys.map().lift(Point::D2(p.x() + dx, p.y() + dy));
    let (xp, xm) = (f(h, 0.0), f(-h, 0.0));
    let (yp, ym) = (f(0.0, h), f(0.0, -h));
    let a = (xp.x() - xm.x()) / (2.0 * h);
    let c = (xp.y() - xm.y()) / (2.0 * h);
    let b = (yp.x() - ym.x()) / (2.0 * h);
    let d = (yp.y() - ym.y()) / (2.0 * h);
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - 4.0 * det;
    let mut m = if disc >= 0.0 {
        [((tr - disc.sqrt()) / 2.0).abs(), ((tr + disc.sqrt()) / 2.0).abs()]
    } else {
        let r = det.abs().sqrt();
        [r, r]
    };
    m.sort_by(f64::total_cmp);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn root_bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid).signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn north_south_values() {
        let ns = NorthSouth::new(0.05).unwrap();
        assert_eq!(ns.lift(Point::D1(0.0)).x(), 0.0);
        assert_abs_diff_eq!(ns.lift(Point::D1(0.25)).x(), 0.25, epsilon = 1e-16);
        let want = 0.1 - 0.05 * (0.4 * PI).sin();
        assert_abs_diff_eq!(ns.lift(Point::D1(0.1)).x(), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.05245, epsilon = 1e-5);
        assert!(NorthSouth::new(0.0).is_err());
        assert!(NorthSouth::new(0.08).is_err());
    }

    #[test]
    fn north_south_is_a_diffeomorphism() {
        for a in [0.001, 0.03, 0.05, 0.0795] {
            let ns = NorthSouth::new(a).unwrap();
            for k in 0..10_000 {
                assert!(ns.derivative(k as f64 / 10_000.0) > 0.0);
            }
        }
    }

    #[test]
    fn asym_fixed_points_alternate() {
        let m = AsymTwoSink::new(0.03, 0.05).unwrap();
        let fp = m.fixed_points();
        assert_eq!(fp.len(), 4);
        // closed form: x = 0, 1/2 and cos(2 pi x) = -a / (2b)
        let src = (-0.3f64).acos() / TAU;
        let want = [0.0, src, 0.5, 1.0 - src];
        for (p, w) in fp.iter().zip(want) {
            assert_abs_diff_eq!(p.x, w, epsilon = 1e-12);
        }
        let basins = m.basins();
        let total: f64 = basins.iter().map(|(_, b)| b.length).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(basins[0].1.length, 2.0 * src, epsilon = 1e-12);
        assert!(AsymTwoSink::new(0.03, 0.0).is_err());
    }

    #[test]
    fn largest_sink_matches_bisection_oracle() {
        // independent oracle: bisection directly on phi'(s) in s-space
        let oracle = root_bisect(phi_prime, 1.0 / (1.5 * PI), 1.0 / PI - 1e-9);
        assert_abs_diff_eq!(oracle, 0.2553, epsilon = 1e-3);
        let sinks = InfiniteSinks::sinks(1).unwrap();
        assert_abs_diff_eq!(sinks[0].s, oracle, epsilon = 1e-12);
        let map = InfiniteSinks::default();
        let x = sinks[0].x;
        assert_abs_diff_eq!(map.lift(Point::D1(x)).x(), x, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_point_and_critical_points_are_fixed() {
        let map = InfiniteSinks::default();
        assert_eq!(map.lift(Point::D1(0.5)).x(), 0.5);
        for (s, _) in InfiniteSinks::critical_points(20) {
            let x = chart_to_circle(s);
            assert_abs_diff_eq!(map.lift(Point::D1(x)).x(), x, epsilon = 1e-8);
        }
    }

    #[test]
    fn critical_points_are_symmetric_with_flipped_type() {
        let pts = InfiniteSinks::critical_points(30);
        for pair in pts.chunks(2) {
            let ((sp, tp), (sn, tn)) = (pair[0], pair[1]);
            assert_abs_diff_eq!(sp, -sn, epsilon = 1e-10);
            assert_ne!(tp, tn);
            assert_abs_diff_eq!(phi_prime(sp), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn sink_basins_are_flanked_by_sources() {
        let sinks = InfiniteSinks::sinks(10).unwrap();
        for sink in &sinks {
            for end in [sink.basin_chart.0, sink.basin_chart.1] {
                assert_eq!(classify_critical(end), Stability::Source);
                assert!(phi_prime(end).abs() < 1e-14);
            }
            assert!(sink.basin.contains(sink.x));
        }
        // basins shrink towards the degenerate point
        for w in sinks.windows(2) {
            assert!(w[1].basin.length < w[0].basin.length);
            assert!(w[1].s.abs() < w[0].s.abs());
        }
        assert!(matches!(
            InfiniteSinks::sinks(InfiniteSinks::sink_cap() + 1),
            Err(LabError::SinkCap { .. })
        ));
    }

    #[test]
    fn rk4_substep_halving() {
        let a = InfiniteSinks::default();
        let b = InfiniteSinks::with_substeps(128);
        for k in 0..100 {
            let p = Point::D1((k as f64 + 0.3) / 100.0);
            assert_abs_diff_eq!(a.lift(p).x(), b.lift(p).x(), epsilon = 1e-9);
        }
        let a = Bowen::new(4.0).unwrap();
        let b = Bowen::with_substeps(4.0, 256).unwrap();
        for k in 0..100 {
            // the pull term stiffens as |y| grows; sample the band around the cycle
            let p = Point::D2((k as f64 + 0.3) / 100.0, ((k * 37) % 100) as f64 / 100.0 - 0.495);
            let (pa, pb) = (a.lift(p), b.lift(p));
            assert_abs_diff_eq!(pa.x(), pb.x(), epsilon = 1e-9);
            assert_abs_diff_eq!(pa.y(), pb.y(), epsilon = 1e-9);
        }
    }

    #[test]
    fn bowen_equilibria() {
        let saddles = Bowen::saddles().unwrap();
        let sources = Bowen::sources().unwrap();
        for s in saddles.iter().chain(&sources) {
            assert_eq!(s.y(), 0.0);
        }
        assert_abs_diff_eq!(saddles[0].x(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(saddles[1].x(), 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sources[0].x(), 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(sources[1].x(), 0.75, epsilon = 1e-10);
        assert_abs_diff_eq!(
            bowen_energy(saddles[0].x(), 0.0),
            bowen_energy(saddles[1].x(), 0.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(bowen_energy(0.0, 0.0), BOWEN_H_SEP, epsilon = 1e-15);
        let map = Bowen::new(4.0).unwrap();
        let sys = PerturbedSystem::new(map);
        for s in saddles.iter().chain(&sources) {
            let img = map.lift(*s);
            assert!(StateSpace::Cylinder.dist(&img, s).unwrap() < 1e-6);
        }
        for s in &sources {
            let m = jacobian_eigen_moduli(&sys, *s);
            assert!(m[0] > 1.0, "source moduli {m:?}");
        }
    }

    #[test]
    fn bowen_energy_is_lyapunov() {
        let map = Bowen::new(4.0).unwrap();
        let mut n = 0;
        for i in 0..10 {
            for j in 0..10 {
                let (x, y) = ((i as f64 + 0.37) / 10.0, (j as f64 + 0.61) / 5.0 - 1.0);
                let (x1, y1) = map.flow(x, y);
                let before = (bowen_energy(x, y) - BOWEN_H_SEP).abs();
                let after = (bowen_energy(x1, y1) - BOWEN_H_SEP).abs();
                assert!(after <= before + 1e-6, "({x}, {y}): {before} -> {after}");
                n += 1;
            }
        }
        assert_eq!(n, 100);
    }

    #[test]
    fn models_load_and_reject_bad_input() {
        for spec in ModelSpec::builtin_defaults() {
            assert!(MODEL_NAMES.contains(&spec.name.as_str()));
        }
        let err = ModelSpec::by_name("unknown", &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("north_south"));
        let mut p = BTreeMap::new();
        p.insert("bogus".to_string(), 1.0);
        assert!(ModelSpec::by_name("north_south", &p).is_err());
    }
}
