//! Discretized measures, Monte Carlo sojourn estimators and the distances
//! used to compare measures (Wasserstein-1 / bounded-Lipschitz) and their
//! supports (Hausdorff).

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::noise::{sample_noise, stream_rng, NoiseLevel, PerturbedSystem, StreamTag};
use crate::par::Exec;
use crate::space::{Partition, Point, StateSpace, CYLINDER_Y};
use rand::Rng;

/// Relative threshold separating a measure's support from round-off.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// A probability vector over the cells of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureVector {
    part: Partition,
    mass: Vec<f64>,
}

impl MeasureVector {
    /// Validates and renormalizes a nonnegative mass vector.
    pub fn from_masses(part: Partition, mut mass: Vec<f64>) -> Result<Self> {
        if mass.len() != part.len() {
            return Err(LabError::PartitionMismatch(format!(
                "{} masses for {} cells",
                mass.len(),
                part.len()
            )));
        }
        if let Some(bad) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(LabError::InvalidMeasure(format!(
                "mass {bad} is not a nonnegative number"
            )));
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(LabError::InvalidMeasure("total mass is zero".into()));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(Self { part, mass })
    }

    pub fn from_counts(part: Partition, counts: &[u64]) -> Result<Self> {
        Self::from_masses(part, counts.iter().map(|&c| c as f64).collect())
    }

    pub fn dirac(part: Partition, cell: usize) -> Self {
        let mut mass = vec![0.0; part.len()];
        mass[cell] = 1.0;
        Self { part, mass }
    }

    /// Point masses at arbitrary points, binned into their cells.
    pub fn atoms(part: Partition, atoms: &[(Point, f64)]) -> Result<Self> {
        let mut mass = vec![0.0; part.len()];
        for (p, w) in atoms {
            mass[part.cell_of(p)] += w;
        }
        Self::from_masses(part, mass)
    }

    pub fn uniform(part: Partition) -> Self {
        let n = part.len();
        Self {
            part,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn partition(&self) -> &Partition {
        &self.part
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `int phi dmu` with every cell's mass placed at its center.
    pub fn integrate(&self, phi: impl Fn(&Point) -> f64) -> f64 {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(i, m)| m * phi(&self.part.cell_center(i)))
            .sum()
    }

    /// Mass of a set of cells.
    pub fn mass_of(&self, cells: impl IntoIterator<Item = usize>) -> f64 {
        cells.into_iter().map(|i| self.mass[i]).sum()
    }
}

/// Integer visit histogram of an orbit ensemble. Merging is exact, so
/// ensembles can be split and recombined in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitCounts {
    part: Partition,
    counts: Vec<u64>,
    pub clamp_events: u64,
}

impl VisitCounts {
    pub fn empty(part: Partition) -> Self {
        Self {
            part,
            counts: vec![0; part.len()],
            clamp_events: 0,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &VisitCounts) -> Result<()> {
        if self.part != other.part {
            return Err(LabError::PartitionMismatch("cannot merge visit counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.clamp_events += other.clamp_events;
        Ok(())
    }

    pub fn to_measure(&self) -> Result<MeasureVector> {
        MeasureVector::from_counts(self.part, &self.counts)
    }

    fn from_bins(part: Partition, mut bins: Vec<u64>) -> Self {
        let clamp_events = bins.pop().unwrap_or(0);
        Self {
            part,
            counts: bins,
            clamp_events,
        }
    }
}

/// Monte Carlo budget: `n` steps per orbit, `samples` noise realizations per
/// initial point, `x_samples` initial points for global estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ensemble {
    pub n: usize,
    pub samples: u64,
    pub x_samples: u64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Ensemble {
    pub fn new(n: usize, samples: u64, x_samples: u64, seed: u64) -> Self {
        Self {
            n,
            samples,
            x_samples,
            seed,
            exec: Exec::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.samples == 0 || self.x_samples == 0 {
            return Err(LabError::Parameter(
                "ensemble needs n >= 1, samples >= 1 and x_samples >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adds the `n` visits `x_0, ..., x_{n-1}` of one perturbed orbit.
#[inline]
fn visit_orbit(
    sys: &PerturbedSystem,
    part: &Partition,
    x0: Point,
    level: NoiseLevel,
    n: usize,
    rng: &mut impl Rng,
    bins: &mut [u64],
) {
    let dim = sys.space().dim();
    let clamp_bin = bins.len() - 1;
    let mut x = x0;
    for j in 0..n {
        bins[part.cell_of(&x)] += 1;
        if j + 1 < n {
            let t = sample_noise(level, dim, rng);
            let (next, clamped) = sys.step_raw(x, t);
            bins[clamp_bin] += clamped as u64;
            x = next;
        }
    }
}

fn check_system(sys: &PerturbedSystem, part: &Partition) -> Result<()> {
    if sys.space() != part.space() {
        return Err(LabError::SpaceMismatch(format!(
            "system on the {} with a partition of the {}",
            sys.space().name(),
            part.space().name()
        )));
    }
    Ok(())
}

/// Visit counts of orbits `samples` (stream ids) started at `x`.
#[allow(clippy::too_many_arguments)]
pub fn sojourn_point_counts(
    sys: &PerturbedSystem,
    x: Point,
    level: NoiseLevel,
    part: &Partition,
    n: usize,
    samples: Range<u64>,
    seed: u64,
    exec: Exec,
) -> Result<VisitCounts> {
    check_system(sys, part)?;
    let x = sys.space().wrap(x)?;
    let bins = exec.sum_counts(samples, part.len() + 1, |s, bins| {
        let mut rng = stream_rng(seed, StreamTag::Orbit, s);
        visit_orbit(sys, part, x, level, n, &mut rng, bins);
    });
    Ok(VisitCounts::from_bins(*part, bins))
}

/// Monte Carlo estimate of the mean sojourn measure of the perturbed
/// orbits of `x`: visit frequencies over steps `0..n` averaged over
/// `ensemble.samples` noise realizations.
pub fn sojourn_point(
    sys: &PerturbedSystem,
    x: Point,
    level: NoiseLevel,
    part: &Partition,
    ensemble: &Ensemble,
) -> Result<MeasureVector> {
    ensemble.validate()?;
    sojourn_point_counts(
        sys,
        x,
        level,
        part,
        ensemble.n,
        0..ensemble.samples,
        ensemble.seed,
        ensemble.exec,
    )?
    .to_measure()
}

/// Initial condition `k` of a global ensemble: uniform in stratum `k` of
/// `strata` equal slabs along the first axis (the second coordinate of the
/// cylinder is uniform on `[-1, 1]`).
pub fn stratified_initial(space: StateSpace, k: u64, strata: u64, seed: u64) -> Point {
    let mut rng = stream_rng(seed, StreamTag::InitialCondition, k);
    let u = (k as f64 + rng.random::<f64>()) / strata as f64;
    match space {
        StateSpace::Circle => Point::D1(u.min(1.0 - f64::EPSILON)),
        StateSpace::Interval { a, b } => Point::D1(a + (b - a) * u),
        StateSpace::Cylinder => {
            let v: f64 = rng.random();
            Point::D2(
                u.min(1.0 - f64::EPSILON),
                CYLINDER_Y.0 + (CYLINDER_Y.1 - CYLINDER_Y.0) * v,
            )
        }
    }
}

/// Visit counts of the global ensemble restricted to initial points `xs`.
pub fn sojourn_global_counts(
    sys: &PerturbedSystem,
    level: NoiseLevel,
    part: &Partition,
    ensemble: &Ensemble,
    xs: Range<u64>,
) -> Result<VisitCounts> {
    check_system(sys, part)?;
    ensemble.validate()?;
    let space = sys.space();
    let (n, samples, strata, seed) = (ensemble.n, ensemble.samples, ensemble.x_samples, ensemble.seed);
    let orbits = xs.start * samples..xs.end * samples;
    let bins = ensemble.exec.sum_counts(orbits, part.len() + 1, |o, bins| {
        let x0 = stratified_initial(space, o / samples, strata, seed);
        let mut rng = stream_rng(seed, StreamTag::Orbit, o);
        visit_orbit(sys, part, x0, level, n, &mut rng, bins);
    });
    Ok(VisitCounts::from_bins(*part, bins))
}

/// Monte Carlo estimate of the mean sojourn measure averaged over initial
/// conditions drawn from the normalized volume (stratified) and noise.
pub fn sojourn_global(
    sys: &PerturbedSystem,
    level: NoiseLevel,
    part: &Partition,
    ensemble: &Ensemble,
) -> Result<MeasureVector> {
    sojourn_global_counts(sys, level, part, ensemble, 0..ensemble.x_samples)?.to_measure()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Trig {
    Sin,
    Cos,
}

impl Trig {
    #[inline]
    fn eval(self, t: f64) -> f64 {
        match self {
            Trig::Sin => t.sin(),
            Trig::Cos => t.cos(),
        }
    }
}

/// One Lipschitz-1 test function `scale * Tx(2 pi j x) * Ty(pi k y / 2)` on
/// the cylinder (a missing factor is the constant 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestFunction {
    x: Option<(Trig, u32)>,
    y: Option<(Trig, u32)>,
    scale: f64,
}

impl TestFunction {
    #[inline]
    pub fn eval(&self, p: &Point) -> f64 {
        let fx = self.x.map_or(1.0, |(t, j)| t.eval(TAU * j as f64 * p.x()));
        let fy = self.y.map_or(1.0, |(t, k)| t.eval(0.5 * PI * k as f64 * p.y()));
        self.scale * fx * fy
    }

    pub fn label(&self) -> String {
        let part =
            |axis: &str, f: Option<(Trig, u32)>, w: &str| f.map(|(t, k)| format!("{t:?}({k}{w}{axis})").to_lowercase());
        let factors: Vec<String> = [part("x", self.x, "*2pi*"), part("y", self.y, "*pi/2*")]
            .into_iter()
            .flatten()
            .collect();
        format!("{:.6}*{}", self.scale, factors.join("*"))
    }
}

/// The fixed 32-function dictionary of coordinate trigonometric polynomials,
/// each Lipschitz-1 for the cylinder's sup metric:
///
/// * `T(2 pi j x) / (2 pi j)`, `j = 1..4`, `T in {sin, cos}` (8),
/// * `T(pi k y / 2) / (pi k)`, `k = 1..4` (8),
/// * `Tx(2 pi j x) Ty(pi k y / 2) / (2 pi j + pi k)`, `j, k in {1, 2}` (16).
pub fn lipschitz_dictionary() -> Vec<TestFunction> {
    let trigs = [Trig::Sin, Trig::Cos];
    let mut out = Vec::with_capacity(32);
    for j in 1..=4u32 {
        for t in trigs {
            out.push(TestFunction {
                x: Some((t, j)),
                y: None,
                scale: 1.0 / (TAU * j as f64),
            });
        }
    }
    for k in 1..=4u32 {
        for t in trigs {
            out.push(TestFunction {
                x: None,
                y: Some((t, k)),
                scale: 1.0 / (PI * k as f64),
            });
        }
    }
    for j in 1..=2u32 {
        for k in 1..=2u32 {
            for tx in trigs {
                for ty in trigs {
                    out.push(TestFunction {
                        x: Some((tx, j)),
                        y: Some((ty, k)),
                        scale: 1.0 / (TAU * j as f64 + PI * k as f64),
                    });
                }
            }
        }
    }
    out
}

/// `int phi dmu` for every dictionary function.
pub fn dictionary_integrals(mu: &MeasureVector) -> Vec<f64> {
    let dict = lipschitz_dictionary();
    let mut acc = vec![0.0; dict.len()];
    for (i, &m) in mu.mass().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let c = mu.partition().cell_center(i);
        for (a, f) in acc.iter_mut().zip(&dict) {
            *a += m * f.eval(&c);
        }
    }
    acc
}

fn check_same_partition(mu: &MeasureVector, nu: &MeasureVector) -> Result<()> {
    if mu.part != nu.part {
        return Err(LabError::PartitionMismatch(format!(
            "{:?} vs {:?}",
            mu.part.resolution(),
            nu.part.resolution()
        )));
    }
    Ok(())
}

/// Distance metrizing weak* convergence.
///
/// * Circle: exact Wasserstein-1 between the cell-center atoms,
///   `min_c sum_k |D_k - c| / n` with `D_k` the cumulative mass difference
///   up to cell `k`; the optimal shift `c` is a median of the `D_k`.
/// * Interval: exact Wasserstein-1, `sum_k |D_k| / n` (normalized metric).
/// * Cylinder: bounded-Lipschitz surrogate, the largest `|int phi dmu -
///   int phi dnu|` over [`lipschitz_dictionary`].
pub fn w1_distance(mu: &MeasureVector, nu: &MeasureVector) -> Result<f64> {
    check_same_partition(mu, nu)?;
    let n = mu.mass.len();
    let cumulative = || {
        let mut acc = 0.0;
        mu.mass.iter().zip(&nu.mass).map(move |(a, b)| {
            acc += a - b;
            acc
        })
    };
    match mu.part.space() {
        StateSpace::Circle => {
            let mut d: Vec<f64> = cumulative().collect();
            let mut sorted = d.clone();
            sorted.sort_by(f64::total_cmp);
            let c = sorted[n / 2];
            d.iter_mut().for_each(|x| *x = (*x - c).abs());
            Ok(d.iter().sum::<f64>() / n as f64)
        }
        StateSpace::Interval { .. } => Ok(cumulative().take(n - 1).map(f64::abs).sum::<f64>() / n as f64),
        StateSpace::Cylinder => {
            let a = dictionary_integrals(mu);
            let b = dictionary_integrals(nu);
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        }
    }
}

/// Cells carrying a non-negligible share of a measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportSet {
    #[serde(skip)]
    part: Partition,
    cells: Vec<usize>,
    threshold: f64,
}

impl SupportSet {
    pub fn from_cells(part: Partition, mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        Self {
            part,
            cells,
            threshold: 0.0,
        }
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn partition(&self) -> &Partition {
        &self.part
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }

    pub fn centers(&self) -> Vec<Point> {
        self.cells.iter().map(|&i| self.part.cell_center(i)).collect()
    }

    /// Largest distance between two cell centers of the set.
    pub fn diameter(&self) -> f64 {
        let pts = self.centers();
        let space = self.part.space();
        if space.dim() == 1 {
            return diameter_1d(space, pts.iter().map(Point::x).collect());
        }
        let mut best: f64 = 0.0;
        for (i, p) in pts.iter().enumerate() {
            for q in &pts[i + 1..] {
                best = best.max(space.dist_unchecked(p, q));
            }
        }
        best
    }
}

fn diameter_1d(space: StateSpace, mut xs: Vec<f64>) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    match space {
        StateSpace::Circle => {
            // farthest partner of each point is the one nearest its antipode
            let mut best: f64 = 0.0;
            for &x in &xs {
                let anti = (x + 0.5) % 1.0;
                let k = xs.partition_point(|&v| v < anti);
                for j in [k % xs.len(), (k + xs.len() - 1) % xs.len()] {
                    best = best.max(space.dist_unchecked(&Point::D1(x), &Point::D1(xs[j])));
                }
            }
            best
        }
        _ => space.dist_unchecked(&Point::D1(xs[0]), &Point::D1(xs[xs.len() - 1])),
    }
}

/// Cells with mass above [`SUPPORT_THRESHOLD`] times the largest cell mass.
pub fn support_of(mu: &MeasureVector) -> SupportSet {
    support_with_threshold(mu, SUPPORT_THRESHOLD)
}

pub fn support_with_threshold(mu: &MeasureVector, tau: f64) -> SupportSet {
    let max = mu.mass.iter().cloned().fold(0.0, f64::max);
    let cells = mu
        .mass
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > tau * max)
        .map(|(i, _)| i)
        .collect();
    SupportSet {
        part: mu.part,
        cells,
        threshold: tau,
    }
}

/// Symmetric Hausdorff distance between the cell centers of two supports
/// (the partitions may differ but must share the space).
pub fn hausdorff(a: &SupportSet, b: &SupportSet) -> Result<f64> {
    if a.part.space() != b.part.space() {
        return Err(LabError::SpaceMismatch("supports live on different spaces".into()));
    }
    hausdorff_points(a.part.space(), &a.centers(), &b.centers())
}

/// Symmetric Hausdorff distance between finite point sets.
pub fn hausdorff_points(space: StateSpace, a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::EmptySupport);
    }
    Ok(directed(space, a, b).max(directed(space, b, a)))
}

fn directed(space: StateSpace, from: &[Point], to: &[Point]) -> f64 {
    if space.dim() == 1 {
        let mut xs: Vec<f64> = to.iter().map(Point::x).collect();
        xs.sort_by(f64::total_cmp);
        let nearest = |x: f64| {
            let k = xs.partition_point(|&v| v < x);
            let mut best = f64::INFINITY;
            for j in [k.saturating_sub(1), k.min(xs.len() - 1), 0, xs.len() - 1] {
                best = best.min(space.dist_unchecked(&Point::D1(x), &Point::D1(xs[j])));
            }
            best
        };
        return from.iter().map(|p| nearest(p.x())).fold(0.0, f64::max);
    }
    let mut worst: f64 = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = space.dist_unchecked(p, q);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{NorthSouth, Rotation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn circle(n: usize) -> Partition {
        Partition::new_1d(StateSpace::Circle, n).unwrap()
    }

    /// Brute-force optimal transport between two measures made of `k` equal
    /// atoms each: the optimal coupling is a permutation, so enumerate them.
    fn assignment_w1(space: StateSpace, a: &[Point], b: &[Point]) -> f64 {
        fn permute(
            k: usize,
            used: &mut Vec<bool>,
            cost: &dyn Fn(usize, usize) -> f64,
            depth: usize,
            acc: f64,
            best: &mut f64,
        ) {
            if acc >= *best {
                return;
            }
            if depth == k {
                *best = acc;
                return;
            }
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    permute(k, used, cost, depth + 1, acc + cost(depth, j), best);
                    used[j] = false;
                }
            }
        }
        let k = a.len();
        let cost = |i: usize, j: usize| space.dist_unchecked(&a[i], &b[j]);
        let mut best = f64::INFINITY;
        permute(k, &mut vec![false; k], &cost, 0, 0.0, &mut best);
        best / k as f64
    }

    fn atoms_measure(part: Partition, cells: &[usize]) -> MeasureVector {
        let mut mass = vec![0.0; part.len()];
        for &c in cells {
            mass[c] += 1.0;
        }
        MeasureVector::from_masses(part, mass).unwrap()
    }

    #[test]
    fn construction_renormalizes_and_validates() {
        let p = circle(4);
        let mu = MeasureVector::from_masses(p, vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(mu.mass(), &[0.25, 0.25, 0.5, 0.0]);
        assert!(MeasureVector::from_masses(p, vec![1.0, -1.0, 0.0, 0.0]).is_err());
        assert!(MeasureVector::from_masses(p, vec![0.0; 4]).is_err());
        assert!(MeasureVector::from_masses(p, vec![1.0; 3]).is_err());
    }

    #[test]
    fn w1_examples() {
        let p = circle(100);
        let a = MeasureVector::dirac(p, p.cell_of(&Point::D1(0.0)));
        let b = MeasureVector::dirac(p, p.cell_of(&Point::D1(0.25)));
        let w = p.cell_width();
        assert!((w1_distance(&a, &b).unwrap() - 0.25).abs() <= w);
        assert_abs_diff_eq!(w1_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        // int dist(x, 0) dx over the circle = 2 int_0^1/2 u du = 1/4
        let u = MeasureVector::uniform(p);
        assert!((w1_distance(&u, &a).unwrap() - 0.25).abs() <= w);
    }

    #[test]
    fn circular_w1_matches_assignment_oracle() {
        let p = circle(8);
        let space = StateSpace::Circle;
        let cases: [(&[usize], &[usize]); 5] = [
            (&[0, 1, 2, 3, 4, 5, 6, 7], &[0, 0, 0, 0, 0, 0, 0, 0]),
            (&[0, 0, 3, 5, 7], &[1, 2, 2, 6, 6]),
            (&[7, 7, 7, 0, 1, 1], &[3, 4, 4, 4, 5, 5]),
            (&[2, 2, 2], &[6, 6, 6]),
            (&[0, 4, 1, 5, 2, 6, 3], &[3, 3, 3, 3, 7, 7, 7]),
        ];
        for (a, b) in cases {
            let pa: Vec<Point> = a.iter().map(|&c| p.cell_center(c)).collect();
            let pb: Vec<Point> = b.iter().map(|&c| p.cell_center(c)).collect();
            let oracle = assignment_w1(space, &pa, &pb);
            let got = w1_distance(&atoms_measure(p, a), &atoms_measure(p, b)).unwrap();
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn interval_w1_matches_assignment_oracle() {
        let space = StateSpace::Interval { a: -1.0, b: 2.0 };
        let p = Partition::new_1d(space, 9).unwrap();
        let (a, b): (&[usize], &[usize]) = (&[0, 0, 4, 8, 8, 8], &[1, 3, 3, 5, 6, 7]);
        let pa: Vec<Point> = a.iter().map(|&c| p.cell_center(c)).collect();
        let pb: Vec<Point> = b.iter().map(|&c| p.cell_center(c)).collect();
        let got = w1_distance(&atoms_measure(p, a), &atoms_measure(p, b)).unwrap();
        assert_abs_diff_eq!(got, assignment_w1(space, &pa, &pb), epsilon = 1e-12);
    }

    #[test]
    fn w1_rejects_partition_mismatch() {
        let a = MeasureVector::uniform(circle(4));
        let b = MeasureVector::uniform(circle(5));
        assert!(matches!(w1_distance(&a, &b), Err(LabError::PartitionMismatch(_))));
    }

    #[test]
    fn dictionary_is_lipschitz_one() {
        let dict = lipschitz_dictionary();
        assert_eq!(dict.len(), 32);
        let space = StateSpace::Cylinder;
        let mut rng = stream_rng(11, StreamTag::Orbit, 0);
        for _ in 0..20_000 {
            let p = Point::D2(rng.random(), 2.0 * rng.random::<f64>() - 1.0);
            let q = Point::D2(
                (p.x() + 0.02 * (rng.random::<f64>() - 0.5)).rem_euclid(1.0),
                (p.y() + 0.04 * (rng.random::<f64>() - 0.5)).clamp(-1.0, 1.0),
            );
            let d = space.dist(&p, &q).unwrap();
            for f in &dict {
                assert!(
                    (f.eval(&p) - f.eval(&q)).abs() <= d * (1.0 + 1e-9) + 1e-15,
                    "{}",
                    f.label()
                );
            }
        }
    }

    #[test]
    fn support_examples() {
        let p = circle(10);
        assert_eq!(support_of(&MeasureVector::dirac(p, 3)).cells(), &[3]);
        assert_eq!(support_of(&MeasureVector::uniform(p)).len(), 10);
        let p3 = circle(3);
        let mu = MeasureVector::from_masses(p3, vec![0.5, 0.5, 1e-9]).unwrap();
        assert_eq!(support_of(&mu).cells(), &[0, 1]);
    }

    #[test]
    fn support_threshold_sensitivity() {
        // a geometric tail: supports shrink monotonically as tau grows
        let p = circle(64);
        let mass: Vec<f64> = (0..64)
            .map(|i| {
                if i == 0 {
                    1.0
                } else {
                    10f64.powf(-(i as f64 + 0.5) / 4.0)
                }
            })
            .collect();
        let mu = MeasureVector::from_masses(p, mass).unwrap();
        let sizes: Vec<usize> = [1e-8, 1e-6, 1e-4]
            .iter()
            .map(|&t| support_with_threshold(&mu, t).len())
            .collect();
        assert!(sizes[0] >= sizes[1] && sizes[1] >= sizes[2]);
        assert_eq!(sizes, vec![32, 24, 16]);
    }

    #[test]
    fn hausdorff_examples() {
        let p = circle(100);
        let w = p.cell_width();
        let set = |xs: &[f64]| SupportSet::from_cells(p, xs.iter().map(|&x| p.cell_of(&Point::D1(x))).collect());
        let h = hausdorff(&set(&[0.1]), &set(&[0.1, 0.3])).unwrap();
        assert!((h - 0.2).abs() <= w);
        assert_eq!(hausdorff(&set(&[0.1, 0.3]), &set(&[0.1, 0.3])).unwrap(), 0.0);
        let h = hausdorff(&set(&[0.0]), &set(&[0.5])).unwrap();
        assert!((h - 0.5).abs() <= w);
        let empty = SupportSet::from_cells(p, vec![]);
        assert!(matches!(hausdorff(&empty, &set(&[0.2])), Err(LabError::EmptySupport)));
    }

    #[test]
    fn hausdorff_1d_fast_path_matches_brute_force() {
        let p = circle(200);
        let a = SupportSet::from_cells(p, vec![0, 3, 50, 120, 199]);
        let b = SupportSet::from_cells(p, vec![10, 101, 180]);
        let brute = |x: &[Point], y: &[Point]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| StateSpace::Circle.dist_unchecked(p, q))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        let (ca, cb) = (a.centers(), b.centers());
        let want = brute(&ca, &cb).max(brute(&cb, &ca));
        assert_abs_diff_eq!(hausdorff(&a, &b).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn circle_diameter() {
        let p = circle(100);
        let s = SupportSet::from_cells(p, vec![5, 10, 90]);
        assert_abs_diff_eq!(s.diameter(), 0.2, epsilon = 1e-12);
        let s = SupportSet::from_cells(p, vec![0, 25, 50, 75]);
        assert_abs_diff_eq!(s.diameter(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sojourn_of_fixed_orbit_is_a_dirac() {
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let p = circle(100);
        let ens = Ensemble::new(100, 3, 1, 1);
        let mu = sojourn_point(&id, Point::D1(0.37), NoiseLevel::new(0.0).unwrap(), &p, &ens).unwrap();
        assert_eq!(mu, MeasureVector::dirac(p, p.cell_of(&Point::D1(0.37))));
    }

    #[test]
    fn sojourn_of_period_four_orbit() {
        let rot = PerturbedSystem::new(Rotation::new(0.25));
        let p = circle(8);
        let ens = Ensemble::new(400, 1, 1, 1);
        let mu = sojourn_point(&rot, Point::D1(0.0), NoiseLevel::new(0.0).unwrap(), &p, &ens).unwrap();
        assert_eq!(mu.mass(), &[0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn single_term_global_average() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let p = circle(50);
        let ens = Ensemble::new(1, 1, 1, 42);
        let mu = sojourn_global(&ns, NoiseLevel::new(0.02).unwrap(), &p, &ens).unwrap();
        let x0 = stratified_initial(StateSpace::Circle, 0, 1, 42);
        assert_eq!(mu, MeasureVector::dirac(p, p.cell_of(&x0)));
    }

    #[test]
    fn rotation_with_noise_is_uniform() {
        let rot = PerturbedSystem::new(Rotation::new(0.25));
        let p = circle(40);
        let ens = Ensemble::new(2000, 4, 50, 3);
        let mu = sojourn_global(&rot, NoiseLevel::new(0.05).unwrap(), &p, &ens).unwrap();
        let w = w1_distance(&mu, &MeasureVector::uniform(p)).unwrap();
        assert!(w <= p.cell_width(), "W1 = {w}");
    }

    #[test]
    fn symmetric_north_south_splits_mass_evenly() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let p = circle(200);
        let ens = Ensemble::new(2000, 4, 200, 5);
        let mu = sojourn_global(&ns, NoiseLevel::new(0.02).unwrap(), &p, &ens).unwrap();
        // the eps-supports sit well inside the half circles around each sink
        let near_half = mu.mass_of(50..150);
        assert!((near_half - 0.5).abs() <= 0.02, "mass near 1/2: {near_half}");
    }

    #[test]
    fn attracting_fixed_point_concentrates() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let p = circle(200);
        let zero = NoiseLevel::new(0.0).unwrap();
        let target = MeasureVector::dirac(p, 0);
        let dists: Vec<f64> = [10, 100, 1000, 10_000]
            .iter()
            .map(|&n| {
                let mu = sojourn_point(&ns, Point::D1(0.2), zero, &p, &Ensemble::new(n, 1, 1, 0)).unwrap();
                w1_distance(&mu, &target).unwrap()
            })
            .collect();
        assert!(dists.windows(2).all(|w| w[1] <= w[0]), "{dists:?}");
        assert!(dists[3] <= 2.0 * p.cell_width());
    }

    #[test]
    fn half_ensembles_merge_exactly() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let p = circle(64);
        let level = NoiseLevel::new(0.03).unwrap();
        let run = |r: Range<u64>, exec| sojourn_point_counts(&ns, Point::D1(0.3), level, &p, 500, r, 9, exec).unwrap();
        let mut merged = run(0..10, Exec::Parallel);
        merged.merge(&run(10..20, Exec::Sequential)).unwrap();
        assert_eq!(merged, run(0..20, Exec::Sequential));
        let ens = Ensemble::new(300, 3, 8, 4);
        let mut g = sojourn_global_counts(&ns, level, &p, &ens, 5..8).unwrap();
        g.merge(&sojourn_global_counts(&ns, level, &p, &ens, 0..5).unwrap())
            .unwrap();
        assert_eq!(g, sojourn_global_counts(&ns, level, &p, &ens, 0..8).unwrap());
    }

    fn arb_measure(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn w1_is_a_metric(a in arb_measure(24), b in arb_measure(24), c in arb_measure(24)) {
            for space in [StateSpace::Circle, StateSpace::Interval { a: 0.0, b: 1.0 }] {
                let p = Partition::new_1d(space, 24).unwrap();
                let (a, b, c) = (
                    MeasureVector::from_masses(p, a.clone()).unwrap(),
                    MeasureVector::from_masses(p, b.clone()).unwrap(),
                    MeasureVector::from_masses(p, c.clone()).unwrap(),
                );
                let ab = w1_distance(&a, &b).unwrap();
                prop_assert!((ab - w1_distance(&b, &a).unwrap()).abs() < 1e-12);
                prop_assert!(w1_distance(&a, &a).unwrap() < 1e-12);
                prop_assert!(ab <= w1_distance(&a, &c).unwrap() + w1_distance(&c, &b).unwrap() + 1e-12);
            }
        }
    }
}
