//! Additive-noise perturbations `f_t(x) = wrap(f(x) + t)` with `t` drawn
//! uniformly from the closed ball of radius `eps`, and seeded random orbits.
//!
//! Randomness comes from ChaCha8 streams: a run seed selects the key and
//! every independent consumer (one orbit, one initial-condition draw, one
//! kernel row) gets its own 64-bit stream id, so work items can run in any
//! order or on any thread without changing their draws.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::space::{Point, StateSpace};

/// Exclusive upper bound on supported noise levels.
pub const EPS_MAX: f64 = 0.25;

/// A noise level `0 <= eps < EPS_MAX`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(eps: f64) -> Result<Self> {
        if eps.is_finite() && (0.0..EPS_MAX).contains(&eps) {
            Ok(NoiseLevel(eps))
        } else {
            Err(LabError::InvalidNoiseLevel(eps))
        }
    }

    /// A strictly positive level; `eps = 0` is reported as degenerate noise.
    pub fn positive(eps: f64) -> Result<Self> {
        let level = Self::new(eps)?;
        if eps == 0.0 {
            return Err(LabError::DegenerateNoise);
        }
        Ok(level)
    }

    pub fn eps(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for NoiseLevel {
    type Error = LabError;
    fn try_from(eps: f64) -> Result<Self> {
        Self::new(eps)
    }
}

impl From<NoiseLevel> for f64 {
    fn from(level: NoiseLevel) -> f64 {
        level.0
    }
}

/// Independent families of random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Orbit = 0,
    InitialCondition = 1,
    CellSample = 2,
    CellNoise = 3,
}

/// The generator for stream `index` of family `tag` under `seed`.
pub fn stream_rng(seed: u64, tag: StreamTag, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 56) | index);
    rng
}

/// Draws `t` uniformly from the closed `eps`-ball of dimension `dim`:
/// the interval `[-eps, eps]` in 1D, the disc by rejection from the
/// bounding square (x draw first, then y) in 2D.
#[inline]
pub fn sample_noise<R: Rng + ?Sized>(level: NoiseLevel, dim: usize, rng: &mut R) -> [f64; 2] {
    let eps = level.0;
    if eps == 0.0 {
        return [0.0, 0.0];
    }
    if dim == 1 {
        return [eps * (2.0 * rng.random::<f64>() - 1.0), 0.0];
    }
    loop {
        let u = 2.0 * rng.random::<f64>() - 1.0;
        let v = 2.0 * rng.random::<f64>() - 1.0;
        if u * u + v * v <= 1.0 {
            return [eps * u, eps * v];
        }
    }
}

/// A deterministic map of a state space.
pub trait DeterministicMap: Send + Sync + fmt::Debug {
    fn space(&self) -> StateSpace;

    /// Image of a canonical point before canonicalization. Circle
    /// coordinates are returned as a continuous lift (not reduced mod 1),
    /// which is what the exact 1D kernel integration relies on.
    fn lift(&self, p: Point) -> Point;

    fn name(&self) -> String;
}

/// A deterministic map together with its additive noise family.
#[derive(Clone)]
pub struct PerturbedSystem {
    map: Arc<dyn DeterministicMap>,
}

impl fmt::Debug for PerturbedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbedSystem").field("map", &self.map).finish()
    }
}

/// `(x_0, ..., x_n)` of one perturbed orbit and the data that reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitSample {
    pub states: Vec<Point>,
    pub seed: u64,
    pub epsilon: f64,
    pub clamp_events: u64,
}

/// Constants of the covering conditions for an additive family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    /// Number of steps after which the reachable set covers a ball.
    pub k: usize,
    /// Radius of that ball (raw Euclidean coordinates).
    pub xi: f64,
    /// Grid points at which the covering ball was checked.
    pub grid_points: usize,
    pub covering_verified: bool,
    /// The one-step kernel is `Leb` on a ball pushed by a translation, so it
    /// has a bounded density and is absolutely continuous.
    pub kernel_absolutely_continuous: bool,
}

impl PerturbedSystem {
    pub fn new(map: impl DeterministicMap + 'static) -> Self {
        Self { map: Arc::new(map) }
    }

    pub fn from_arc(map: Arc<dyn DeterministicMap>) -> Self {
        Self { map }
    }

    pub fn space(&self) -> StateSpace {
        self.map.space()
    }

    pub fn map(&self) -> &dyn DeterministicMap {
        self.map.as_ref()
    }

    pub fn name(&self) -> String {
        self.map.name()
    }

    /// The unperturbed image `f(x)`, canonical.
    pub fn image(&self, x: Point) -> Point {
        self.space().canonical(self.map.lift(x)).0
    }

    /// `wrap(f(x) + t)` for a noise vector with `|t| <= eps`.
    pub fn perturbed_step(&self, x: Point, t: [f64; 2], level: NoiseLevel) -> Result<Point> {
        let space = self.space();
        if x.dim() != space.dim() {
            return Err(LabError::SpaceMismatch(format!(
                "{}-dimensional point on the {}",
                x.dim(),
                space.name()
            )));
        }
        let norm = if space.dim() == 1 { t[0].abs() } else { t[0].hypot(t[1]) };
        if !norm.is_finite() || !x.x().is_finite() || !x.y().is_finite() {
            return Err(LabError::NonFinite);
        }
        if norm > level.eps() * (1.0 + 1e-12) {
            return Err(LabError::NoiseExceedsLevel { norm, eps: level.eps() });
        }
        Ok(self.step_raw(x, t).0)
    }

    #[inline]
    pub(crate) fn step_raw(&self, x: Point, t: [f64; 2]) -> (Point, bool) {
        self.space().canonical(self.map.lift(x).translate(t))
    }

    /// The perturbed orbit of `x0` of length `n + 1`, noise drawn from
    /// stream 0 of the orbit family under `seed`.
    pub fn random_orbit(&self, x0: Point, level: NoiseLevel, n: usize, seed: u64) -> Result<OrbitSample> {
        let space = self.space();
        let x0 = space.wrap(x0)?;
        let mut rng = stream_rng(seed, StreamTag::Orbit, 0);
        let mut states = Vec::with_capacity(n + 1);
        states.push(x0);
        let mut x = x0;
        let mut clamp_events = 0;
        for _ in 0..n {
            let t = sample_noise(level, space.dim(), &mut rng);
            let (next, clamped) = self.step_raw(x, t);
            clamp_events += clamped as u64;
            states.push(next);
            x = next;
        }
        Ok(OrbitSample {
            states,
            seed,
            epsilon: level.eps(),
            clamp_events,
        })
    }

    /// Covering constants for additive noise: one step reaches the full
    /// `eps`-ball around `f(x)`, so `K = 1` and `xi = eps`. The covering is
    /// also checked on a grid of base points (boundary-clamped directions on
    /// bounded axes are skipped).
    pub fn coverage_report(&self, level: NoiseLevel) -> Result<CoverageReport> {
        let eps = level.eps();
        if eps == 0.0 {
            return Err(LabError::DegenerateNoise);
        }
        let space = self.space();
        let grid = coverage_grid(space, 32);
        let directions: Vec<[f64; 2]> = if space.dim() == 1 {
            vec![[-1.0, 0.0], [-0.5, 0.0], [0.5, 0.0], [1.0, 0.0]]
        } else {
            (0..16)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / 16.0;
                    [a.cos(), a.sin()]
                })
                .collect()
        };
        let mut verified = true;
        for x in &grid {
            let fx = self.map.lift(*x);
            for d in &directions {
                let t = [eps * d[0], eps * d[1]];
                let target = fx.translate(t);
                let (want, clamped) = space.canonical(target);
                if clamped {
                    continue;
                }
                match self.perturbed_step(*x, t, level) {
                    Ok(got) => verified &= space.dist_unchecked(&got, &want) <= 1e-12,
                    Err(_) => verified = false,
                }
            }
        }
        Ok(CoverageReport {
            k: 1,
            xi: eps,
            grid_points: grid.len(),
            covering_verified: verified,
            kernel_absolutely_continuous: true,
        })
    }
}

fn coverage_grid(space: StateSpace, n: usize) -> Vec<Point> {
    let t = |k: usize| (k as f64 + 0.5) / n as f64;
    match space {
        StateSpace::Circle => (0..n).map(|k| Point::D1(t(k))).collect(),
        StateSpace::Interval { a, b } => (0..n).map(|k| Point::D1(a + (b - a) * t(k))).collect(),
        StateSpace::Cylinder => (0..n)
            .flat_map(|i| (0..n).map(move |j| Point::D2(t(i), 2.0 * t(j) - 1.0)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{Bowen, NorthSouth, Rotation};
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_noise_step_is_the_map() {
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let level = NoiseLevel::new(0.1).unwrap();
        assert_eq!(
            id.perturbed_step(Point::D1(0.37), [0.0, 0.0], level).unwrap(),
            Point::D1(0.37)
        );
        let p = id.perturbed_step(Point::D1(0.95), [0.1, 0.0], level).unwrap();
        assert_abs_diff_eq!(p.x(), 0.05, epsilon = 1e-15);
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let q = ns.perturbed_step(Point::D1(0.25), [0.0, 0.0], level).unwrap();
        assert_abs_diff_eq!(q.x(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn oversized_noise_is_rejected() {
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let err = id
            .perturbed_step(Point::D1(0.5), [0.2, 0.0], NoiseLevel::new(0.1).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("noise exceeds level"));
    }

    #[test]
    fn noise_levels_are_validated() {
        assert!(NoiseLevel::new(-0.1).is_err());
        assert!(NoiseLevel::new(0.3).is_err());
        assert!(matches!(NoiseLevel::positive(0.0), Err(LabError::DegenerateNoise)));
    }

    #[test]
    fn zero_level_draws_zero() {
        let mut rng = stream_rng(1, StreamTag::Orbit, 0);
        let zero = NoiseLevel::new(0.0).unwrap();
        assert_eq!(sample_noise(zero, 1, &mut rng), [0.0, 0.0]);
        assert_eq!(sample_noise(zero, 2, &mut rng), [0.0, 0.0]);
    }

    #[test]
    fn draws_stay_in_the_ball() {
        let level = NoiseLevel::new(0.1).unwrap();
        let mut rng = stream_rng(9, StreamTag::Orbit, 3);
        for _ in 0..10_000 {
            let t = sample_noise(level, 2, &mut rng);
            assert!(t[0].hypot(t[1]) <= 0.1);
            let s = sample_noise(level, 1, &mut rng);
            assert!(s[0].abs() <= 0.1);
        }
    }

    #[test]
    fn empirical_mean_within_three_standard_errors() {
        // sd of U[-eps, eps] is eps / sqrt(3)
        let level = NoiseLevel::new(0.1).unwrap();
        let n = 1_000_000;
        let bound = 3.0 * 0.1 / (3.0 * n as f64).sqrt();
        for dim in [1, 2] {
            let mut rng = stream_rng(2024, StreamTag::Orbit, dim as u64);
            let (mut sx, mut sy) = (0.0, 0.0);
            for _ in 0..n {
                let t = sample_noise(level, dim, &mut rng);
                sx += t[0];
                sy += t[1];
            }
            assert!((sx / n as f64).abs() <= bound, "dim {dim}: mean x {}", sx / n as f64);
            assert!((sy / n as f64).abs() <= bound, "dim {dim}: mean y {}", sy / n as f64);
        }
    }

    #[test]
    fn rational_rotation_orbit() {
        let rot = PerturbedSystem::new(Rotation::new(0.25));
        let orbit = rot
            .random_orbit(Point::D1(0.1), NoiseLevel::new(0.0).unwrap(), 4, 5)
            .unwrap();
        let xs: Vec<f64> = orbit.states.iter().map(Point::x).collect();
        for (got, want) in xs.iter().zip([0.1, 0.35, 0.6, 0.85, 0.1]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let empty = rot
            .random_orbit(Point::D1(0.3), NoiseLevel::new(0.05).unwrap(), 0, 5)
            .unwrap();
        assert_eq!(empty.states, vec![Point::D1(0.3)]);
    }

    #[test]
    fn deterministic_orbit_reaches_sink() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let orbit = ns
            .random_orbit(Point::D1(0.1), NoiseLevel::new(0.0).unwrap(), 200, 0)
            .unwrap();
        let last = orbit.states.last().unwrap();
        assert!(StateSpace::Circle.dist(last, &Point::D1(0.0)).unwrap() < 1e-6);
    }

    #[test]
    fn orbits_are_reproducible() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let level = NoiseLevel::new(0.02).unwrap();
        let a = ns.random_orbit(Point::D1(0.4), level, 500, 77).unwrap();
        let b = ns.random_orbit(Point::D1(0.4), level, 500, 77).unwrap();
        let c = ns.random_orbit(Point::D1(0.4), level, 500, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn condition_one_on_builtin_systems() {
        for spec in crate::zoo::ModelSpec::builtin_defaults() {
            let sys = &spec.system;
            let zero = NoiseLevel::new(0.0).unwrap();
            for k in 0..100 {
                let u = (k as f64 + 0.5) / 100.0;
                let x = match sys.space() {
                    StateSpace::Cylinder => Point::D2(u, 1.6 * u - 0.8),
                    _ => Point::D1(u),
                };
                assert_eq!(sys.perturbed_step(x, [0.0, 0.0], zero).unwrap(), sys.image(x));
            }
        }
    }

    #[test]
    fn reachable_set_grows_with_the_level() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let small = NoiseLevel::new(0.01).unwrap();
        let large = NoiseLevel::new(0.02).unwrap();
        let mut rng = stream_rng(3, StreamTag::Orbit, 0);
        for k in 0..200 {
            let x = Point::D1(k as f64 / 200.0);
            let t = sample_noise(small, 1, &mut rng);
            let a = ns.perturbed_step(x, t, small).unwrap();
            let b = ns.perturbed_step(x, t, large).unwrap();
            assert!(StateSpace::Circle.dist(&a, &b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn coverage_constants() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let r = ns.coverage_report(NoiseLevel::new(0.05).unwrap()).unwrap();
        assert_eq!((r.k, r.xi), (1, 0.05));
        assert!(r.covering_verified && r.kernel_absolutely_continuous);
        let r = ns.coverage_report(NoiseLevel::new(0.01).unwrap()).unwrap();
        assert_eq!((r.k, r.xi), (1, 0.01));
        let bowen = PerturbedSystem::new(Bowen::new(4.0).unwrap());
        let r = bowen.coverage_report(NoiseLevel::new(0.05).unwrap()).unwrap();
        assert_eq!((r.k, r.xi), (1, 0.05));
        assert!(r.covering_verified);
        assert!(matches!(
            ns.coverage_report(NoiseLevel::new(0.0).unwrap()),
            Err(LabError::DegenerateNoise)
        ));
    }
}
