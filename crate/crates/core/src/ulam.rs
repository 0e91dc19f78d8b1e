//! Ulam discretization of the one-step transition kernel and the finite
//! Markov chain machinery built on it: recurrent classes, stationary
//! measures, absorption probabilities, weights and the assembled mean
//! sojourn measure.
//!
//! Entry `P[i][j]` is the probability that a point drawn uniformly from cell
//! `i` lands in cell `j` after one perturbed step. In 1D it is integrated
//! exactly (up to quadrature of a smooth integrand); in 2D it is estimated
//! from stratified, seeded samples.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::measure::MeasureVector;
use crate::noise::{sample_noise, stream_rng, NoiseLevel, PerturbedSystem, StreamTag};
use crate::par::Exec;
use crate::space::{Partition, Point, StateSpace};
use rand::Rng;

/// How the entries of a [`MarkovModel`] were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    /// Piecewise quadrature of the uniform-noise convolution.
    Exact1d,
    /// Stratified Monte Carlo per cell.
    Sampled2d,
    /// Supplied directly (toy chains).
    Explicit,
}

/// Row-stochastic sparse matrix over the cells of a partition (CSR).
#[derive(Debug, Clone)]
pub struct MarkovModel {
    part: Partition,
    eps: f64,
    mode: BuildMode,
    prune_tol: f64,
    seed: Option<u64>,
    samples_per_cell: Option<usize>,
    clamp_events: u64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    transpose: OnceLock<Csr>,
}

/// Plain CSR storage used for the transposed kernel.
#[derive(Debug, Clone)]
struct Csr {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl MarkovModel {
    /// Builds a model from explicit rows `(column, probability)`; rows are
    /// pruned at `prune_tol` and renormalized.
    pub fn from_rows(part: Partition, rows: Vec<Vec<(usize, f64)>>, prune_tol: f64) -> Result<Self> {
        if rows.len() != part.len() {
            return Err(LabError::PartitionMismatch(format!(
                "{} rows for {} cells",
                rows.len(),
                part.len()
            )));
        }
        let mut model = Self::empty(part, 0.0, BuildMode::Explicit, prune_tol);
        for (i, row) in rows.into_iter().enumerate() {
            let mut merged = BTreeMap::new();
            for (j, p) in row {
                if j >= part.len() || !(p.is_finite() && p >= 0.0) {
                    return Err(LabError::InvalidMeasure(format!("row {i}: bad entry ({j}, {p})")));
                }
                *merged.entry(j).or_insert(0.0) += p;
            }
            model.push_row(i, merged.into_iter().collect())?;
        }
        Ok(model)
    }

    fn empty(part: Partition, eps: f64, mode: BuildMode, prune_tol: f64) -> Self {
        Self {
            part,
            eps,
            mode,
            prune_tol,
            seed: None,
            samples_per_cell: None,
            clamp_events: 0,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            transpose: OnceLock::new(),
        }
    }

    /// Prunes entries below the tolerance, renormalizes and appends.
    fn push_row(&mut self, i: usize, mut row: Vec<(usize, f64)>) -> Result<()> {
        let tol = self.prune_tol;
        row.retain(|&(_, p)| p >= tol && p > 0.0);
        let total: f64 = row.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return Err(LabError::InvalidMeasure(format!("row {i} has no mass")));
        }
        for (j, p) in row {
            self.cols.push(j as u32);
            self.vals.push(p / total);
        }
        self.row_ptr.push(self.cols.len());
        Ok(())
    }

    pub fn partition(&self) -> &Partition {
        &self.part
    }

    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mode(&self) -> BuildMode {
        self.mode
    }

    pub fn prune_tol(&self) -> f64 {
        self.prune_tol
    }

    /// Sampled steps that hit a bounded-axis boundary and were clamped.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    /// Columns and probabilities of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&(j as u32)).map_or(0.0, |k| vals[k])
    }

    /// Largest `|sum_j P[i][j] - 1|` over the rows.
    pub fn max_row_defect(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.row(i).1.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Key-value description written next to the triplet file.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let (nx, ny) = self.part.resolution();
        let mode = serde_json::to_value(self.mode).ok();
        let mut meta = vec![
            ("space".to_string(), self.part.space().name().to_string()),
            ("resolution".to_string(), format!("{nx}x{ny}")),
            ("epsilon".to_string(), crate::io::fmt_f64(self.eps)),
            (
                "mode".to_string(),
                mode.and_then(|m| m.as_str().map(String::from)).unwrap_or_default(),
            ),
            ("prune_tol".to_string(), crate::io::fmt_f64(self.prune_tol)),
            ("nnz".to_string(), self.nnz().to_string()),
        ];
        if let StateSpace::Interval { a, b } = self.part.space() {
            meta.push((
                "interval".to_string(),
                format!("{} {}", crate::io::fmt_f64(a), crate::io::fmt_f64(b)),
            ));
        }
        if let Some(seed) = self.seed {
            meta.push(("seed".to_string(), seed.to_string()));
        }
        if let Some(s) = self.samples_per_cell {
            meta.push(("samples_per_cell".to_string(), s.to_string()));
            meta.push(("clamp_events".to_string(), self.clamp_events.to_string()));
        }
        meta
    }

    fn transposed(&self) -> &Csr {
        self.transpose.get_or_init(|| {
            let n = self.len();
            let mut ptr = vec![0usize; n + 1];
            for &j in &self.cols {
                ptr[j as usize + 1] += 1;
            }
            for k in 0..n {
                ptr[k + 1] += ptr[k];
            }
            let mut fill = ptr.clone();
            let mut idx = vec![0u32; self.nnz()];
            let mut val = vec![0.0; self.nnz()];
            for i in 0..n {
                let (cols, vals) = self.row(i);
                for (&j, &p) in cols.iter().zip(vals) {
                    let slot = &mut fill[j as usize];
                    idx[*slot] = i as u32;
                    val[*slot] = p;
                    *slot += 1;
                }
            }
            Csr { ptr, idx, val }
        })
    }

    /// `v P` for a full-length row vector.
    pub fn left_multiply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                let (cols, vals) = self.row(i);
                for (&j, &p) in cols.iter().zip(vals) {
                    out[j as usize] += vi * p;
                }
            }
        }
        out
    }

    /// Dense copy, for small instances and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut row = vec![0.0; self.len()];
                let (cols, vals) = self.row(i);
                for (&j, &p) in cols.iter().zip(vals) {
                    row[j as usize] = p;
                }
                row
            })
            .collect()
    }
}

/// Parameters of the kernel discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UlamConfig {
    pub prune_tol: f64,
    /// Sampled (2D) mode: draws per cell, split over a 4x4 stratified grid.
    pub samples_per_cell: usize,
    pub seed: u64,
    /// Smallest allowed ratio `eps / cell width` along every axis.
    pub min_cells_per_eps: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for UlamConfig {
    fn default() -> Self {
        Self {
            prune_tol: 1e-12,
            samples_per_cell: 256,
            seed: 0,
            min_cells_per_eps: 4.0,
            exec: Exec::default(),
        }
    }
}

fn check_resolution(part: &Partition, level: NoiseLevel, cfg: &UlamConfig) -> Result<()> {
    let (wx, wy) = part.raw_widths();
    let width = wx.max(wy);
    let eps = level.eps();
    if width * cfg.min_cells_per_eps > eps * (1.0 + 1e-9) {
        return Err(LabError::PartitionTooCoarse {
            width,
            eps,
            min_cells_per_eps: cfg.min_cells_per_eps,
        });
    }
    Ok(())
}

/// Discretizes the perturbed system on `part` at noise level `eps > 0`.
pub fn build_ulam(sys: &PerturbedSystem, level: NoiseLevel, part: &Partition, cfg: &UlamConfig) -> Result<MarkovModel> {
    if level.eps() == 0.0 {
        return Err(LabError::DegenerateNoise);
    }
    if sys.space() != part.space() {
        return Err(LabError::SpaceMismatch(format!(
            "system on the {} with a partition of the {}",
            sys.space().name(),
            part.space().name()
        )));
    }
    check_resolution(part, level, cfg)?;
    match part.space().dim() {
        1 => build_exact_1d(sys, level, part, cfg),
        _ => {
            let images = SampledImages::compute(sys, part, cfg.seed, cfg.exec);
            images.build(sys, level, cfg)
        }
    }
}

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Subintervals of `[a, b]` on which the samples of `f` are monotone.
fn monotone_pieces(f: &dyn Fn(f64) -> f64, a: f64, b: f64, depth: u32, out: &mut Vec<(f64, f64)>) {
    const PROBES: usize = 8;
    let ys: Vec<f64> = (0..=PROBES)
        .map(|k| f(a + (b - a) * k as f64 / PROBES as f64))
        .collect();
    let up = ys.windows(2).all(|w| w[1] >= w[0]);
    let down = ys.windows(2).all(|w| w[1] <= w[0]);
    if up || down || depth == 0 {
        out.push((a, b));
    } else {
        let m = 0.5 * (a + b);
        monotone_pieces(f, a, m, depth - 1, out);
        monotone_pieces(f, m, b, depth - 1, out);
    }
}

/// The `x` in `[a, b]` with `f(x) = y` for monotone `f`, bracketed to 1e-10.
fn solve_monotone(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, fa: f64, y: f64) -> f64 {
    let below_at_a = fa < y;
    while b - a > 1e-10 {
        let m = 0.5 * (a + b);
        if (f(m) < y) == below_at_a {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Exact 1D row `i`: `(1/w) int_cell |[f(x) - eps, f(x) + eps] cap cell_j| / (2 eps) dx`.
fn exact_row(sys: &PerturbedSystem, eps: f64, part: &Partition, i: usize) -> Vec<(usize, f64)> {
    let space = part.space();
    let n = part.len();
    let (lo, len) = match space {
        StateSpace::Interval { a, b } => (a, b - a),
        _ => (0.0, 1.0),
    };
    let map = sys.map();
    let f = |x: f64| map.lift(Point::D1(x)).x();
    let edge = |k: i64| lo + len * (k as f64) / (n as f64);
    let w = len / n as f64;
    let unwrapped = |y: f64| ((y - lo) / w).floor() as i64;

    let [(x0, x1), _] = part.cell_bounds(i);
    let mut pieces = Vec::new();
    monotone_pieces(&f, x0, x1, 12, &mut pieces);

    let mut acc: BTreeMap<i64, f64> = BTreeMap::new();
    for (a, b) in pieces {
        let (fa, fb) = (f(a), f(b));
        let (ymin, ymax) = (fa.min(fb), fa.max(fb));
        let mut knots = Vec::new();
        for k in unwrapped(ymin - eps) - 1..=unwrapped(ymax + eps) + 1 {
            for y in [edge(k) - eps, edge(k) + eps] {
                if y > ymin && y < ymax {
                    knots.push(solve_monotone(&f, a, b, fa, y));
                }
            }
        }
        knots.push(a);
        knots.push(b);
        knots.sort_by(f64::total_cmp);
        for seg in knots.windows(2) {
            let (s0, s1) = (seg[0], seg[1]);
            if s1 <= s0 {
                continue;
            }
            let half = 0.5 * (s1 - s0);
            for (node, weight) in GAUSS5 {
                let y = f(s0 + half * (1.0 + node));
                let wq = weight * half / (2.0 * eps);
                for k in unwrapped(y - eps) - 1..=unwrapped(y + eps) + 1 {
                    let overlap = edge(k + 1).min(y + eps) - edge(k).max(y - eps);
                    if overlap > 0.0 {
                        *acc.entry(k).or_insert(0.0) += wq * overlap;
                    }
                }
            }
        }
    }
    let mut row: BTreeMap<usize, f64> = BTreeMap::new();
    for (k, m) in acc {
        let j = match space {
            StateSpace::Circle => k.rem_euclid(n as i64) as usize,
            _ => k.clamp(0, n as i64 - 1) as usize,
        };
        *row.entry(j).or_insert(0.0) += m / (x1 - x0);
    }
    row.into_iter().collect()
}

fn build_exact_1d(sys: &PerturbedSystem, level: NoiseLevel, part: &Partition, cfg: &UlamConfig) -> Result<MarkovModel> {
    let eps = level.eps();
    let rows = cfg.exec.map(0..part.len(), |i| exact_row(sys, eps, part, i));
    let mut model = MarkovModel::empty(*part, eps, BuildMode::Exact1d, cfg.prune_tol);
    for (i, row) in rows.into_iter().enumerate() {
        model.push_row(i, row)?;
    }
    Ok(model)
}

/// Points per axis of the stratified grid inside each cell.
const STRATA: usize = 4;

/// Unperturbed images of the stratified sample points of every cell. They
/// depend only on the partition and seed, so one set serves every noise
/// level at a given resolution.
#[derive(Debug, Clone)]
pub struct SampledImages {
    part: Partition,
    seed: u64,
    images: Vec<Point>,
}

impl SampledImages {
    pub fn compute(sys: &PerturbedSystem, part: &Partition, seed: u64, exec: Exec) -> Self {
        let per_cell = STRATA * STRATA;
        let map = sys.map();
        let cells = exec.map(0..part.len(), |i| {
            let [(x0, x1), (y0, y1)] = part.cell_bounds(i);
            let mut rng = stream_rng(seed, StreamTag::CellSample, i as u64);
            let mut out = Vec::with_capacity(per_cell);
            for a in 0..STRATA {
                for b in 0..STRATA {
                    let u = (a as f64 + rng.random::<f64>()) / STRATA as f64;
                    let v = (b as f64 + rng.random::<f64>()) / STRATA as f64;
                    out.push(map.lift(Point::D2(x0 + u * (x1 - x0), y0 + v * (y1 - y0))));
                }
            }
            out
        });
        Self {
            part: *part,
            seed,
            images: cells.into_iter().flatten().collect(),
        }
    }

    pub fn partition(&self) -> &Partition {
        &self.part
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Kernel estimate at `level`: each stored image is perturbed
    /// `samples_per_cell / 16` times with noise from the cell's own stream.
    pub fn build(&self, sys: &PerturbedSystem, level: NoiseLevel, cfg: &UlamConfig) -> Result<MarkovModel> {
        if cfg.seed != self.seed {
            return Err(LabError::Parameter(format!(
                "image cache was computed with seed {} but the build uses seed {}",
                self.seed, cfg.seed
            )));
        }
        check_resolution(&self.part, level, cfg)?;
        let part = self.part;
        let per_cell = STRATA * STRATA;
        let draws = (cfg.samples_per_cell / per_cell).max(1);
        let space = sys.space();
        let dim = space.dim();
        let rows = cfg.exec.map(0..part.len(), |i| {
            let mut rng = stream_rng(self.seed, StreamTag::CellNoise, i as u64);
            let mut hits: BTreeMap<usize, u64> = BTreeMap::new();
            let mut clamps = 0u64;
            for img in &self.images[i * per_cell..(i + 1) * per_cell] {
                for _ in 0..draws {
                    let t = sample_noise(level, dim, &mut rng);
                    let (p, clamped) = space.canonical(img.translate(t));
                    clamps += clamped as u64;
                    *hits.entry(part.cell_of(&p)).or_insert(0) += 1;
                }
            }
            let total = (per_cell * draws) as f64;
            let row: Vec<(usize, f64)> = hits.into_iter().map(|(j, c)| (j, c as f64 / total)).collect();
            (row, clamps)
        });
        let mut model = MarkovModel::empty(part, level.eps(), BuildMode::Sampled2d, cfg.prune_tol);
        model.seed = Some(self.seed);
        model.samples_per_cell = Some(per_cell * draws);
        for (i, (row, clamps)) in rows.into_iter().enumerate() {
            model.clamp_events += clamps;
            model.push_row(i, row)?;
        }
        Ok(model)
    }
}

/// Recurrent classes (closed communicating classes) and transient cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecurrentDecomposition {
    pub classes: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
    #[serde(skip)]
    class_of: Vec<Option<usize>>,
}

impl RecurrentDecomposition {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Index of the class containing `cell`, if it is recurrent.
    pub fn class_of(&self, cell: usize) -> Option<usize> {
        self.class_of[cell]
    }
}

/// Strongly connected components of the support digraph (iterative Tarjan),
/// in reverse topological order.
fn strongly_connected(model: &MarkovModel) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = model.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0usize;
    // (node, position in its adjacency list)
    let mut call: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root, 0));
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            let (cols, _) = model.row(v);
            if *pos < cols.len() {
                let w = cols[*pos] as usize;
                *pos += 1;
                if index[w] == UNSEEN {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comps.push(comp);
            }
        }
    }
    comps
}

/// Splits the chain into recurrent classes (components without outgoing
/// edges) and transient cells. Classes are sorted by their smallest cell.
pub fn recurrent_classes(model: &MarkovModel) -> RecurrentDecomposition {
    let n = model.len();
    let comps = strongly_connected(model);
    let mut comp_of = vec![0usize; n];
    for (c, comp) in comps.iter().enumerate() {
        for &v in comp {
            comp_of[v] = c;
        }
    }
    let mut classes = Vec::new();
    let mut transient = Vec::new();
    for (c, comp) in comps.into_iter().enumerate() {
        let closed = comp
            .iter()
            .all(|&v| model.row(v).0.iter().all(|&w| comp_of[w as usize] == c));
        if closed {
            let mut comp = comp;
            comp.sort_unstable();
            classes.push(comp);
        } else {
            transient.extend(comp);
        }
    }
    classes.sort_by_key(|c| c[0]);
    transient.sort_unstable();
    let mut class_of = vec![None; n];
    for (k, class) in classes.iter().enumerate() {
        for &v in class {
            class_of[v] = Some(k);
        }
    }
    RecurrentDecomposition {
        classes,
        transient,
        class_of,
    }
}

/// Iteration controls for the stationary and absorption solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl SolverConfig {
    pub fn stationary() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
            exec: Exec::default(),
        }
    }

    pub fn absorption() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
            exec: Exec::default(),
        }
    }
}

/// Weight of the new iterate in the damped power step; damping removes
/// the unit-modulus eigenvalues of periodic classes.
const DAMPING: f64 = 0.9;

/// Unique stationary probability vector of the chain restricted to a
/// recurrent class, by damped power iteration to a sup-norm residual of
/// `tol`; zero off the class.
pub fn stationary_measure(model: &MarkovModel, class: &[usize]) -> Result<MeasureVector> {
    stationary_measure_with(model, class, &SolverConfig::stationary())
}

pub fn stationary_measure_with(model: &MarkovModel, class: &[usize], cfg: &SolverConfig) -> Result<MeasureVector> {
    let n = model.len();
    if class.is_empty() {
        return Err(LabError::NotRecurrent("empty class".into()));
    }
    let mut local = vec![u32::MAX; n];
    for (k, &c) in class.iter().enumerate() {
        if c >= n || local[c] != u32::MAX {
            return Err(LabError::NotRecurrent(format!("cell {c} is out of range or repeated")));
        }
        local[c] = k as u32;
    }
    for &c in class {
        if let Some(&w) = model.row(c).0.iter().find(|&&w| local[w as usize] == u32::MAX) {
            return Err(LabError::NotRecurrent(format!(
                "cell {c} leaks to cell {w} outside the class"
            )));
        }
    }
    // incoming edges restricted to the class, in local indices
    let t = model.transposed();
    let m = class.len();
    let mut ptr = Vec::with_capacity(m + 1);
    let mut src = Vec::new();
    let mut val = Vec::new();
    ptr.push(0);
    for &c in class {
        for k in t.ptr[c]..t.ptr[c + 1] {
            let from = local[t.idx[k] as usize];
            if from != u32::MAX {
                src.push(from);
                val.push(t.val[k]);
            }
        }
        ptr.push(src.len());
    }

    let mut v = vec![1.0 / m as f64; m];
    let mut residual = f64::INFINITY;
    let exec = if m >= 4096 { cfg.exec } else { Exec::Sequential };
    for iter in 0..cfg.max_iter {
        let vp = exec.map(0..m, |j| {
            (ptr[j]..ptr[j + 1]).map(|k| v[src[k] as usize] * val[k]).sum::<f64>()
        });
        residual = vp.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if residual <= cfg.tol {
            let mut mass = vec![0.0; n];
            for (&c, &p) in class.iter().zip(&vp) {
                mass[c] = p;
            }
            return MeasureVector::from_masses(*model.partition(), mass);
        }
        for (a, b) in v.iter_mut().zip(&vp) {
            *a += DAMPING * (b - *a);
        }
        if iter % 64 == 63 {
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        }
    }
    Err(LabError::NoConvergence {
        residual,
        iterations: cfg.max_iter,
    })
}

/// `alpha[x][i]`: probability that the chain started uniformly in cell `x`
/// is eventually absorbed by recurrent class `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorptionTable {
    pub classes: usize,
    /// Row-major `cells x classes`.
    alpha: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl AbsorptionTable {
    pub fn cells(&self) -> usize {
        self.alpha.len() / self.classes.max(1)
    }

    pub fn alpha(&self, cell: usize) -> &[f64] {
        &self.alpha[cell * self.classes..(cell + 1) * self.classes]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.alpha.chunks(self.classes).map(|r| r[class]).collect()
    }

    /// Largest `|sum_i alpha[x][i] - 1|` over the cells.
    pub fn max_sum_defect(&self) -> f64 {
        self.alpha
            .chunks(self.classes)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|alpha[x] - sum_j P[x][j] alpha[j]|` over cells and classes.
    pub fn harmonic_residual(&self, model: &MarkovModel) -> f64 {
        let l = self.classes;
        let mut worst: f64 = 0.0;
        for x in 0..model.len() {
            let (cols, vals) = model.row(x);
            for i in 0..l {
                let s: f64 = cols
                    .iter()
                    .zip(vals)
                    .map(|(&j, &p)| p * self.alpha[j as usize * l + i])
                    .sum();
                worst = worst.max((s - self.alpha[x * l + i]).abs());
            }
        }
        worst
    }

    /// Largest deviation from the class indicator on recurrent cells.
    pub fn indicator_defect(&self, dec: &RecurrentDecomposition) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, class) in dec.classes.iter().enumerate() {
            for &c in class {
                for (i, a) in self.alpha(c).iter().enumerate() {
                    let want = if i == k { 1.0 } else { 0.0 };
                    worst = worst.max((a - want).abs());
                }
            }
        }
        worst
    }
}

/// Solves `(I - Q) a_i = R 1_i` on the transient cells for all classes at
/// once. Small transient sets go through dense state reduction. Large
/// ones, or a direct solve that misses the tolerance, use symmetric
/// Gauss-Seidel: its updates are convex combinations of rows
/// summing to 1, so `sum_i alpha = 1` holds to round-off.
///
/// Slowly draining cells (a flat fixed point, say) make the sweeps crawl;
/// the direct path does not care.
pub fn absorption(model: &MarkovModel, dec: &RecurrentDecomposition) -> Result<AbsorptionTable> {
    absorption_with(model, dec, &SolverConfig::absorption())
}

pub fn absorption_with(
    model: &MarkovModel,
    dec: &RecurrentDecomposition,
    cfg: &SolverConfig,
) -> Result<AbsorptionTable> {
    let n = model.len();
    let l = dec.classes.len();
    if dec.class_of.len() != n || l == 0 {
        return Err(LabError::PartitionMismatch(
            "decomposition does not belong to this model".into(),
        ));
    }
    let mut alpha = vec![1.0 / l as f64; n * l];
    for x in 0..n {
        if let Some(k) = dec.class_of(x) {
            alpha[x * l..(x + 1) * l].fill(0.0);
            alpha[x * l + k] = 1.0;
        }
    }
    let mut diag = Vec::with_capacity(dec.transient.len());
    for &x in &dec.transient {
        let stay = 1.0 - model.get(x, x);
        if stay <= 1e-15 {
            return Err(LabError::SingularAbsorption(format!(
                "transient cell {x} has self-transition probability {}",
                1.0 - stay
            )));
        }
        diag.push(stay);
    }
    let mut buf = vec![0.0; l];
    let mut update = |alpha: &mut [f64], x: usize, stay: f64| -> f64 {
        buf.fill(0.0);
        let (cols, vals) = model.row(x);
        for (&j, &p) in cols.iter().zip(vals) {
            let j = j as usize;
            if j != x {
                for i in 0..l {
                    buf[i] += p * alpha[j * l + i];
                }
            }
        }
        let mut change: f64 = 0.0;
        for i in 0..l {
            let new = buf[i] / stay;
            change = change.max((new - alpha[x * l + i]).abs());
            alpha[x * l + i] = new;
        }
        change
    };
    let mut table = AbsorptionTable {
        classes: l,
        alpha: Vec::new(),
        iterations: 0,
        residual: 0.0,
    };
    if dec.transient.is_empty() {
        table.alpha = alpha;
        return Ok(table);
    }
    if dec.transient.len() <= DENSE_ABSORPTION_LIMIT {
        dense_absorption(model, dec, &mut alpha)?;
        table.alpha = alpha.clone();
        table.residual = table.harmonic_residual_on(model, &dec.transient);
        if table.residual <= cfg.tol {
            return Ok(table);
        }
    }
    // sweeps continue from whatever the direct solve produced
    for sweep in 1..=cfg.max_iter {
        for (k, &x) in dec.transient.iter().enumerate() {
            update(&mut alpha, x, diag[k]);
        }
        for (k, &x) in dec.transient.iter().enumerate().rev() {
            update(&mut alpha, x, diag[k]);
        }
        table.alpha = alpha.clone();
        let residual = table.harmonic_residual_on(model, &dec.transient);
        if residual <= cfg.tol {
            table.iterations = sweep;
            table.residual = residual;
            return Ok(table);
        }
        table.residual = residual;
    }
    Err(LabError::SingularAbsorption(format!(
        "no convergence after {} sweeps (residual {:.3e}, {} transient cells)",
        cfg.max_iter,
        table.residual,
        dec.transient.len()
    )))
}

/// Transient sets up to this size are solved by dense state reduction.
const DENSE_ABSORPTION_LIMIT: usize = 3000;

/// Eliminates transient cells one at a time (GTH state reduction) and back
/// substitutes. Only sums of nonnegative terms appear, with each pivot the
/// total outflow of its cell rather than `1 - P_xx`, so nearly closed
/// transient regions keep full relative accuracy and rows sum to 1.
fn dense_absorption(model: &MarkovModel, dec: &RecurrentDecomposition, alpha: &mut [f64]) -> Result<()> {
    let l = dec.classes.len();
    let t = dec.transient.len();
    let w = t + l;
    let mut pos = vec![usize::MAX; model.len()];
    for (k, &x) in dec.transient.iter().enumerate() {
        pos[x] = k;
    }
    let mut m = vec![0.0; t * w];
    for (k, &x) in dec.transient.iter().enumerate() {
        let (cols, vals) = model.row(x);
        for (&j, &p) in cols.iter().zip(vals) {
            let j = j as usize;
            if j == x {
                continue;
            }
            let col = match dec.class_of(j) {
                Some(i) => t + i,
                None => pos[j],
            };
            m[k * w + col] += p;
        }
    }
    let mut outflow = vec![0.0; t];
    let mut pivot_row: Vec<(usize, f64)> = Vec::new();
    for k in 0..t {
        pivot_row.clear();
        pivot_row.extend((k + 1..w).map(|j| (j, m[k * w + j])).filter(|&(_, v)| v != 0.0));
        let s: f64 = pivot_row.iter().map(|&(_, v)| v).sum();
        if s.is_nan() || s <= 0.0 {
            return Err(LabError::SingularAbsorption(format!(
                "transient cell {} cannot leave its region",
                dec.transient[k]
            )));
        }
        outflow[k] = s;
        for x in k + 1..t {
            let f = m[x * w + k];
            if f == 0.0 {
                continue;
            }
            m[x * w + k] = 0.0;
            let r = f / s;
            for &(j, v) in &pivot_row {
                m[x * w + j] += r * v;
            }
        }
    }
    let mut a = vec![0.0; t * l];
    for k in (0..t).rev() {
        for i in 0..l {
            let mut acc = m[k * w + t + i];
            for j in k + 1..t {
                let v = m[k * w + j];
                if v != 0.0 {
                    acc += v * a[j * l + i];
                }
            }
            a[k * l + i] = acc / outflow[k];
        }
    }
    for (k, &cell) in dec.transient.iter().enumerate() {
        alpha[cell * l..(cell + 1) * l].copy_from_slice(&a[k * l..(k + 1) * l]);
    }
    Ok(())
}

impl AbsorptionTable {
    fn harmonic_residual_on(&self, model: &MarkovModel, cells: &[usize]) -> f64 {
        let l = self.classes;
        let mut worst: f64 = 0.0;
        for &x in cells {
            let (cols, vals) = model.row(x);
            for i in 0..l {
                let s: f64 = cols
                    .iter()
                    .zip(vals)
                    .map(|(&j, &p)| p * self.alpha[j as usize * l + i])
                    .sum();
                worst = worst.max((s - self.alpha[x * l + i]).abs());
            }
        }
        worst
    }
}

/// `beta_i = sum_x vol(x) alpha[x][i]`.
pub fn weights(table: &AbsorptionTable, part: &Partition) -> Vec<f64> {
    let mut beta = vec![0.0; table.classes];
    for x in 0..table.cells() {
        for (b, a) in beta.iter_mut().zip(table.alpha(x)) {
            *b += part.cell_volume(x) * a;
        }
    }
    beta
}

/// `sum_i beta_i mu_i`.
pub fn assemble_mean_sojourn(measures: &[MeasureVector], beta: &[f64]) -> Result<MeasureVector> {
    if measures.len() != beta.len() || measures.is_empty() {
        return Err(LabError::WeightMismatch(format!(
            "{} measures and {} weights",
            measures.len(),
            beta.len()
        )));
    }
    let total: f64 = beta.iter().sum();
    if (total - 1.0).abs() > 1e-9 || beta.iter().any(|b| b.is_nan() || *b < 0.0) {
        return Err(LabError::WeightMismatch(format!("weights sum to {total}")));
    }
    let part = *measures[0].partition();
    let mut mass = vec![0.0; part.len()];
    for (mu, b) in measures.iter().zip(beta) {
        if *mu.partition() != part {
            return Err(LabError::PartitionMismatch("measures on different partitions".into()));
        }
        for (m, x) in mass.iter_mut().zip(mu.mass()) {
            *m += b * x;
        }
    }
    MeasureVector::from_masses(part, mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{NorthSouth, Rotation};
    use approx::assert_abs_diff_eq;

    fn circle(n: usize) -> Partition {
        Partition::new_1d(StateSpace::Circle, n).unwrap()
    }

    fn coarse_ok() -> UlamConfig {
        UlamConfig {
            min_cells_per_eps: 0.5,
            ..UlamConfig::default()
        }
    }

    fn toy() -> MarkovModel {
        // A = 0, B = 1, C = 2
        let rows = vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 0.3), (1, 0.5), (2, 0.2)]];
        MarkovModel::from_rows(circle(3), rows, 1e-12).unwrap()
    }

    /// Triangular density of the sum of two independent uniforms of
    /// widths `w` and `2 eps`, integrated over the cell offsets.
    fn identity_row_oracle(w: f64, eps: f64, offset: i64) -> f64 {
        // P = (1/w) int_0^w |[x - eps, x + eps] cap [k w, (k + 1) w]| / (2 eps) dx,
        // evaluated by a fine midpoint rule.
        let m = 200_000;
        let (c0, c1) = (offset as f64 * w, (offset + 1) as f64 * w);
        (0..m)
            .map(|k| {
                let x = (k as f64 + 0.5) * w / m as f64;
                ((x + eps).min(c1) - (x - eps).max(c0)).max(0.0) / (2.0 * eps)
            })
            .sum::<f64>()
            / m as f64
    }

    #[test]
    fn identity_row_is_triangular() {
        let want = [
            identity_row_oracle(0.1, 0.05, -1),
            identity_row_oracle(0.1, 0.05, 0),
            identity_row_oracle(0.1, 0.05, 1),
        ];
        assert_abs_diff_eq!(want[0], 0.125, epsilon = 1e-9);
        assert_abs_diff_eq!(want[1], 0.75, epsilon = 1e-9);
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let level = NoiseLevel::new(0.05).unwrap();
        let model = build_ulam(&id, level, &circle(10), &coarse_ok()).unwrap();
        for i in 0..10 {
            let (cols, vals) = model.row(i);
            assert_eq!(cols.len(), 3);
            assert_abs_diff_eq!(model.get(i, (i + 9) % 10), want[0], epsilon = 1e-12);
            assert_abs_diff_eq!(model.get(i, i), want[1], epsilon = 1e-12);
            assert_abs_diff_eq!(model.get(i, (i + 1) % 10), want[2], epsilon = 1e-12);
            assert_abs_diff_eq!(vals.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn half_rotation_shifts_rows() {
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let half = PerturbedSystem::new(Rotation::new(0.5));
        let level = NoiseLevel::new(0.05).unwrap();
        let a = build_ulam(&id, level, &circle(10), &coarse_ok()).unwrap();
        let b = build_ulam(&half, level, &circle(10), &coarse_ok()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_abs_diff_eq!(b.get(i, (j + 5) % 10), a.get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn coarse_partitions_are_rejected() {
        let id = PerturbedSystem::new(Rotation::new(0.0));
        let err = build_ulam(&id, NoiseLevel::new(0.05).unwrap(), &circle(10), &UlamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("partition too coarse"), "{err}");
        let err = build_ulam(&id, NoiseLevel::new(0.0).unwrap(), &circle(10), &coarse_ok()).unwrap_err();
        assert!(matches!(err, LabError::DegenerateNoise));
    }

    #[test]
    fn rows_are_stochastic() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let model = build_ulam(
            &ns,
            NoiseLevel::new(0.02).unwrap(),
            &circle(400),
            &UlamConfig::default(),
        )
        .unwrap();
        assert!(model.max_row_defect() <= 1e-12);
        assert!(model.min_entry() >= 1e-12);
    }

    #[test]
    fn interval_rows_clamp_at_the_ends() {
        let space = StateSpace::Interval { a: 0.0, b: 2.0 };
        let model = build_ulam(
            &PerturbedSystem::new(crate::zoo::Identity::new(space)),
            NoiseLevel::new(0.1).unwrap(),
            &Partition::new_1d(space, 80).unwrap(),
            &UlamConfig::default(),
        )
        .unwrap();
        // cell 0 = [0, 0.025]: everything below 0 returns to cell 0
        let below =
            identity_row_oracle(0.025, 0.1, 0) + (1..=5).map(|k| identity_row_oracle(0.025, 0.1, -k)).sum::<f64>();
        assert_abs_diff_eq!(model.get(0, 0), below, epsilon = 1e-9);
        assert!(model.max_row_defect() <= 1e-12);
    }

    #[test]
    fn toy_chain_classes() {
        let id2 = MarkovModel::from_rows(circle(2), vec![vec![(0, 1.0)], vec![(1, 1.0)]], 1e-12).unwrap();
        let dec = recurrent_classes(&id2);
        assert_eq!(dec.classes, vec![vec![0], vec![1]]);
        assert!(dec.transient.is_empty());
        let dec = recurrent_classes(&toy());
        assert_eq!(dec.classes, vec![vec![0], vec![1]]);
        assert_eq!(dec.transient, vec![2]);
    }

    #[test]
    fn toy_chain_absorption_and_weights() {
        let model = toy();
        let dec = recurrent_classes(&model);
        let table = absorption(&model, &dec).unwrap();
        // 0.3 * sum_k 0.2^k, summed term by term
        let series: f64 = (0..50).map(|k| 0.3 * 0.2f64.powi(k)).sum();
        assert_abs_diff_eq!(series, 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(table.alpha(2)[0], 0.375, epsilon = 1e-12);
        assert_abs_diff_eq!(table.alpha(2)[1], 0.625, epsilon = 1e-12);
        assert_eq!(table.alpha(0), &[1.0, 0.0]);
        let beta = weights(&table, model.partition());
        assert_abs_diff_eq!(beta[0], (1.0 + 0.375) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lazy_walk_absorption_is_gamblers_ruin() {
        // ends absorb, interior cells step left/right with probability 1e-7;
        // sweeps would need ~m^2/q iterations and I - Q has condition ~m^2/q
        let m = 200;
        let q = 1e-7;
        let rows = (0..m + 2)
            .map(|x| match x {
                0 => vec![(0, 1.0)],
                x if x == m + 1 => vec![(x, 1.0)],
                x => vec![(x - 1, q), (x, 1.0 - 2.0 * q), (x + 1, q)],
            })
            .collect();
        let model = MarkovModel::from_rows(circle(m + 2), rows, 0.0).unwrap();
        let dec = recurrent_classes(&model);
        assert_eq!(dec.len(), 2);
        let table = absorption(&model, &dec).unwrap();
        let right = dec.class_of(m + 1).unwrap();
        for k in 1..=m {
            assert_abs_diff_eq!(table.alpha(k)[right], k as f64 / (m + 1) as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(table.alpha(k).iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        }
        assert!(table.harmonic_residual(&model) <= 1e-10);
    }

    #[test]
    fn small_stationary_examples() {
        let p = circle(2);
        let one = MarkovModel::from_rows(p, vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)]], 1e-12).unwrap();
        assert_eq!(stationary_measure(&one, &[0]).unwrap().mass(), &[1.0, 0.0]);
        let flip = MarkovModel::from_rows(p, vec![vec![(1, 1.0)], vec![(0, 1.0)]], 1e-12).unwrap();
        let mu = stationary_measure(&flip, &[0, 1]).unwrap();
        assert_abs_diff_eq!(mu.mass()[0], 0.5, epsilon = 1e-12);
        assert!(matches!(stationary_measure(&one, &[1]), Err(LabError::NotRecurrent(_))));
    }

    #[test]
    fn rotation_stationary_is_uniform() {
        let rot = PerturbedSystem::new(Rotation::new(0.25));
        let model = build_ulam(
            &rot,
            NoiseLevel::new(0.05).unwrap(),
            &circle(160),
            &UlamConfig::default(),
        )
        .unwrap();
        let dec = recurrent_classes(&model);
        assert_eq!(dec.len(), 1);
        let mu = stationary_measure(&model, &dec.classes[0]).unwrap();
        for m in mu.mass() {
            assert_abs_diff_eq!(*m, 1.0 / 160.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn stationary_matches_dense_iteration() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let model = build_ulam(&ns, NoiseLevel::new(0.2).unwrap(), &circle(32), &UlamConfig::default()).unwrap();
        let dec = recurrent_classes(&model);
        assert_eq!(dec.len(), 1);
        let dense = model.to_dense();
        let mut v = vec![1.0 / 32.0; 32];
        for _ in 0..100_000 {
            let mut next = vec![0.0; 32];
            for (i, row) in dense.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += v[i] * p;
                }
            }
            v = next;
        }
        let mu = stationary_measure(&model, &dec.classes[0]).unwrap();
        for (a, b) in mu.mass().iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn north_south_has_two_classes_at_two_resolutions() {
        let ns = PerturbedSystem::new(NorthSouth::new(0.05).unwrap());
        let level = NoiseLevel::new(0.02).unwrap();
        for n in [512, 1024] {
            let p = circle(n);
            let model = build_ulam(&ns, level, &p, &UlamConfig::default()).unwrap();
            let dec = recurrent_classes(&model);
            assert_eq!(dec.len(), 2);
            assert!(dec.class_of(p.cell_of(&Point::D1(0.0))).is_some());
            assert!(dec.class_of(p.cell_of(&Point::D1(0.5))).is_some());
            let need = (0.02 * n as f64).ceil() as usize;
            for class in &dec.classes {
                assert!(class.len() >= need);
                // closed: no mass leaves the class
                for &c in class {
                    assert!(model
                        .row(c)
                        .0
                        .iter()
                        .all(|&j| dec.class_of(j as usize) == dec.class_of(c)));
                }
            }
            let table = absorption(&model, &dec).unwrap();
            assert!(table.max_sum_defect() <= 1e-9);
            assert!(table.harmonic_residual(&model) <= 1e-8);
            assert_eq!(table.indicator_defect(&dec), 0.0);
            let k0 = dec.class_of(p.cell_of(&Point::D1(0.0))).unwrap();
            let source = table.alpha(p.cell_of(&Point::D1(0.25)));
            assert!((source[k0] - 0.5).abs() <= 0.01 + 1.0 / n as f64 * 20.0, "{source:?}");
            let beta = weights(&table, &p);
            assert!((beta[0] - 0.5).abs() <= 0.01, "{beta:?}");
        }
    }

    #[test]
    fn assembly_examples() {
        let p = circle(4);
        let a = MeasureVector::dirac(p, 0);
        let b = MeasureVector::dirac(p, 2);
        assert_eq!(assemble_mean_sojourn(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
        let mix = assemble_mean_sojourn(&[a.clone(), b], &[0.5, 0.5]).unwrap();
        assert_eq!(mix.mass(), &[0.5, 0.0, 0.5, 0.0]);
        assert!(matches!(
            assemble_mean_sojourn(&[a], &[0.5, 0.5]),
            Err(LabError::WeightMismatch(_))
        ));
    }

    #[test]
    fn sampled_kernel_is_reproducible_and_reuses_images() {
        let bowen = PerturbedSystem::new(crate::zoo::Bowen::with_substeps(4.0, 16).unwrap());
        let p = Partition::new(StateSpace::Cylinder, 32, 32).unwrap();
        let cfg = UlamConfig {
            min_cells_per_eps: 1.0,
            samples_per_cell: 64,
            seed: 5,
            ..UlamConfig::default()
        };
        let level = NoiseLevel::new(0.07).unwrap();
        let a = build_ulam(&bowen, level, &p, &cfg).unwrap();
        let images = SampledImages::compute(&bowen, &p, 5, Exec::Sequential);
        let seq = UlamConfig {
            exec: Exec::Sequential,
            ..cfg
        };
        let b = images.build(&bowen, level, &seq).unwrap();
        assert_eq!(crate::io::triplet_csv(&a), crate::io::triplet_csv(&b));
        assert!(a.max_row_defect() <= 1e-12);
        assert_eq!(a.mode(), BuildMode::Sampled2d);
    }
}
