//! Small-noise sweeps and the diagnostics built on them: matching recurrent
//! classes to reference attractors, weights against basin volumes,
//! concentration of the stationary measures, convex-hull distances and
//! growth of the absorption basins.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::io;
use crate::measure::{
    dictionary_integrals, hausdorff_points, lipschitz_dictionary, sojourn_global_counts, support_of, w1_distance,
    Ensemble, MeasureVector, SupportSet,
};
use crate::noise::NoiseLevel;
use crate::space::{Partition, Point, StateSpace, CYLINDER_Y};
use crate::ulam::{
    absorption, assemble_mean_sojourn, build_ulam, recurrent_classes, stationary_measure_with, weights, BuildMode,
    MarkovModel, RecurrentDecomposition, SampledImages, SolverConfig, UlamConfig,
};
use crate::zoo::{LevelSet, ModelSpec};

/// Version of the `report.json` layout.
pub const SCHEMA_VERSION: u32 = 1;

/// The arc of the circle from `lo` counterclockwise to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Basin {
    pub lo: f64,
    pub hi: f64,
    pub length: f64,
}

impl Basin {
    pub fn arc(lo: f64, hi: f64) -> Self {
        let length = (hi - lo).rem_euclid(1.0);
        Self { lo, hi, length }
    }

    /// Membership of the open arc.
    pub fn contains(&self, x: f64) -> bool {
        let t = (x - self.lo).rem_euclid(1.0);
        t > 0.0 && t < self.length
    }

    /// Circle distance from `x` to the nearer endpoint.
    pub fn edge_distance(&self, x: f64) -> f64 {
        let d = |a: f64| {
            let t = (x - a).rem_euclid(1.0);
            t.min(1.0 - t)
        };
        d(self.lo).min(d(self.hi))
    }
}

/// An attractor of the unperturbed map: the points it must contain, its
/// physical measure as weighted atoms and, for sinks, its basin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttractorRef {
    pub id: String,
    pub description: String,
    pub carrier: Vec<Point>,
    pub reference: Vec<(Point, f64)>,
    pub basin: Option<Basin>,
}

impl AttractorRef {
    pub fn carrier_cells(&self, part: &Partition) -> Vec<usize> {
        let mut cells: Vec<usize> = self.carrier.iter().map(|p| part.cell_of(p)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    pub fn reference_measure(&self, part: &Partition) -> Result<MeasureVector> {
        MeasureVector::atoms(*part, &self.reference)
    }
}

/// What a recurrent class corresponds to.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClassStatus {
    /// Contains the carrier of exactly one reference attractor.
    Matched { reference: String },
    /// Contains the carriers of several reference attractors.
    Merged { references: Vec<String> },
    /// Contains no reference carrier.
    Spurious,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    pub classes: Vec<ClassStatus>,
    /// Class containing each reference's carrier, if any.
    pub ref_class: Vec<Option<usize>>,
}

impl Matching {
    /// Whether reference `r` sits alone in its class.
    pub fn resolved(&self, r: usize) -> bool {
        self.ref_class[r].is_some_and(|k| matches!(self.classes[k], ClassStatus::Matched { .. }))
    }

    pub fn resolved_count(&self) -> usize {
        (0..self.ref_class.len()).filter(|&r| self.resolved(r)).count()
    }

    pub fn merged_count(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| matches!(c, ClassStatus::Merged { .. }))
            .count()
    }
}

/// Containment matching: reference `r` belongs to class `k` when all its
/// carrier cells lie in class `k`.
pub fn match_classes(dec: &RecurrentDecomposition, refs: &[AttractorRef], part: &Partition) -> Result<Matching> {
    let mut ref_class = Vec::with_capacity(refs.len());
    let mut claims: Vec<Vec<String>> = vec![Vec::new(); dec.len()];
    for r in refs {
        let cells = r.carrier_cells(part);
        if cells.is_empty() {
            return Err(LabError::Parameter(format!("reference {} has an empty carrier", r.id)));
        }
        let mut hit: Vec<usize> = cells.iter().filter_map(|&c| dec.class_of(c)).collect();
        hit.sort_unstable();
        hit.dedup();
        if hit.len() > 1 {
            return Err(LabError::CarrierSplit {
                attractor: r.id.clone(),
                classes: hit,
            });
        }
        let k = hit
            .first()
            .copied()
            .filter(|&k| cells.iter().all(|&c| dec.class_of(c) == Some(k)));
        if let Some(k) = k {
            claims[k].push(r.id.clone());
        }
        ref_class.push(k);
    }
    let classes = claims
        .into_iter()
        .map(|c| match c.len() {
            0 => ClassStatus::Spurious,
            1 => ClassStatus::Matched {
                reference: c.into_iter().next().unwrap_or_default(),
            },
            _ => ClassStatus::Merged { references: c },
        })
        .collect();
    Ok(Matching { classes, ref_class })
}

/// Distance from `value` to the segment between the two vertex values.
fn segment_distance(value: f64, (a, b): (f64, f64)) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    if value < lo {
        lo - value
    } else if value > hi {
        value - hi
    } else {
        0.0
    }
}

/// Largest distance, over test functions, from `int phi dmu` to the
/// segment `{lambda phi(s1) + (1 - lambda) phi(s2)}`.
pub fn hull_distance(values: &[f64], vertices: &[(f64, f64)]) -> f64 {
    values
        .iter()
        .zip(vertices)
        .map(|(v, s)| segment_distance(*v, *s))
        .fold(0.0, f64::max)
}

/// Per-function hull distances of a measure to the segment of Dirac masses
/// at `s1`, `s2`, over the shared Lipschitz dictionary.
pub fn hull_distances(mu: &MeasureVector, [s1, s2]: [Point; 2]) -> Vec<f64> {
    let values = dictionary_integrals(mu);
    lipschitz_dictionary()
        .iter()
        .zip(values)
        .map(|(f, v)| segment_distance(v, (f.eval(&s1), f.eval(&s2))))
        .collect()
}

/// How a sweep chooses the partition at each noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Raw cell width `eps / ratio` on every axis.
    CellsPerEps {
        ratio: f64,
    },
    Fixed {
        nx: usize,
        ny: usize,
    },
}

impl PartitionPolicy {
    pub fn partition(&self, space: StateSpace, eps: f64) -> Result<Partition> {
        match *self {
            PartitionPolicy::CellsPerEps { ratio } => {
                if !(ratio > 0.0 && ratio.is_finite()) {
                    return Err(LabError::Parameter(format!(
                        "cells per eps must be positive, got {ratio}"
                    )));
                }
                let count = |len: f64| (len * ratio / eps - 1e-9).ceil().max(1.0) as usize;
                match space {
                    StateSpace::Circle => Partition::new_1d(space, count(1.0)),
                    StateSpace::Interval { a, b } => Partition::new_1d(space, count(b - a)),
                    StateSpace::Cylinder => Partition::new(space, count(1.0), count(CYLINDER_Y.1 - CYLINDER_Y.0)),
                }
            }
            PartitionPolicy::Fixed { nx, ny } => Partition::new(space, nx, ny),
        }
    }
}

/// Everything a sweep needs besides the model.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Strictly decreasing noise levels.
    pub epsilons: Vec<f64>,
    pub policy: PartitionPolicy,
    pub ulam: UlamConfig,
    pub solver: SolverConfig,
    /// Monte Carlo cross-check budget; `None` skips the check.
    pub monte_carlo: Option<Ensemble>,
    /// Report directory; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Key-values embedded in every artifact to reproduce it.
    pub provenance: Vec<(String, String)>,
}

impl SweepConfig {
    pub fn new(epsilons: Vec<f64>, policy: PartitionPolicy) -> Self {
        Self {
            epsilons,
            policy,
            ulam: UlamConfig::default(),
            solver: SolverConfig::stationary(),
            monte_carlo: None,
            out_dir: None,
            provenance: Vec::new(),
        }
    }

    /// Levels validated: positive, below the model's range, strictly decreasing.
    pub fn levels(&self, model: &ModelSpec) -> Result<Vec<NoiseLevel>> {
        if self.epsilons.is_empty() {
            return Err(LabError::InvalidSweep("no noise levels".into()));
        }
        let mut out = Vec::with_capacity(self.epsilons.len());
        for &eps in &self.epsilons {
            let level = NoiseLevel::positive(eps)?;
            if eps > model.eps_max {
                return Err(LabError::InvalidSweep(format!(
                    "eps = {eps} exceeds the range of model {} (eps_max = {})",
                    model.name, model.eps_max
                )));
            }
            out.push(level);
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LabError::InvalidSweep(
                "noise levels must be strictly decreasing".into(),
            ));
        }
        Ok(out)
    }
}

/// One recurrent class at one noise level.
#[derive(Debug, Clone, Serialize)]
pub struct ClassRecord {
    pub index: usize,
    pub cells: usize,
    pub beta: f64,
    #[serde(flatten)]
    pub status: ClassStatus,
    pub support_cells: usize,
    /// `Hd(supp mu_i, carrier)` and `W1(mu_i, reference)` for matched classes.
    pub hausdorff: Option<f64>,
    pub w1: Option<f64>,
    pub file: Option<String>,
}

/// One reference attractor at one noise level.
#[derive(Debug, Clone, Serialize)]
pub struct RefRecord {
    pub id: String,
    pub class: Option<usize>,
    pub resolved: bool,
    pub hausdorff: Option<f64>,
    pub w1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloRecord {
    pub n: usize,
    pub samples: u64,
    pub x_samples: u64,
    pub seed: u64,
    pub distance: f64,
    pub tolerance: f64,
    pub clamp_events: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HullRecord {
    pub distance: f64,
    pub per_function: Vec<f64>,
}

/// Numerical invariants checked at every noise level.
#[derive(Debug, Clone, Serialize)]
pub struct Checks {
    pub row_defect: f64,
    pub alpha_sum_defect: f64,
    pub harmonic_residual: f64,
    pub indicator_defect: f64,
    pub beta_sum_defect: f64,
    pub classes_disjoint: bool,
    pub monte_carlo_ok: Option<bool>,
    pub passed: bool,
}

/// Tolerances of [`Checks`].
pub mod tol {
    pub const ROW: f64 = 1e-12;
    pub const ALPHA_SUM: f64 = 1e-9;
    pub const HARMONIC: f64 = 1e-8;
    pub const BETA_SUM: f64 = 1e-9;
    /// Monte Carlo vs assembled measure on the cylinder (dictionary distance).
    pub const MC_2D: f64 = 0.02;
    /// Monte Carlo vs assembled measure in 1D, in cell widths.
    pub const MC_1D_WIDTHS: f64 = 2.0;
}

/// In-memory measures of one noise level (not serialized).
#[derive(Debug, Clone)]
pub struct EpsMeasures {
    pub classes: Vec<MeasureVector>,
    pub assembled: MeasureVector,
    pub monte_carlo: Option<MeasureVector>,
    /// Support of each reference's own class, when resolved.
    pub ref_supports: Vec<Option<SupportSet>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsRecord {
    pub eps: f64,
    pub resolution: (usize, usize),
    pub cell_width: f64,
    pub nnz: usize,
    pub build_mode: BuildMode,
    pub kernel_clamp_events: u64,
    pub l: usize,
    pub transient_cells: usize,
    pub beta: Vec<f64>,
    pub resolved_refs: usize,
    pub merged_classes: usize,
    pub classes: Vec<ClassRecord>,
    pub refs: Vec<RefRecord>,
    pub monte_carlo: Option<MonteCarloRecord>,
    pub hull: Option<HullRecord>,
    pub level_set_hausdorff: Option<f64>,
    pub assembled_support_diameter: f64,
    pub checks: Checks,
    pub directory: Option<String>,
    #[serde(skip)]
    pub measures: EpsMeasures,
}

/// Estimated noise threshold below which an attractor is resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    /// Resolved and nested at every swept level: `eps_hat >= top`.
    TopOfSweep { top: f64 },
    /// `lo < eps_hat <= hi`, with `lo` the largest level that works.
    Interval { lo: f64, hi: f64 },
    /// Never resolved along the sweep.
    BelowRange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdEstimate {
    pub reference: String,
    #[serde(flatten)]
    pub threshold: Threshold,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub complete: bool,
    pub model: String,
    pub params: BTreeMap<String, f64>,
    pub config: BTreeMap<String, String>,
    pub epsilons: Vec<f64>,
    pub records: Vec<EpsRecord>,
    pub thresholds: Vec<ThresholdEstimate>,
    pub passed: bool,
}

/// Directory name of the artifacts of one noise level.
pub fn eps_dir_name(eps: f64) -> String {
    format!("eps_{eps}")
}

/// Runs the model through every noise level of the sweep. With an output
/// directory, `eps_<value>/` is written for every finished level and
/// `report.json` is rewritten after each one (`complete: false` until the
/// last level is done).
pub fn run_sweep(model: &ModelSpec, cfg: &SweepConfig) -> Result<SweepReport> {
    let levels = cfg.levels(model)?;
    let mut report = SweepReport {
        schema_version: SCHEMA_VERSION,
        complete: false,
        model: model.name.clone(),
        params: model.params.clone(),
        config: cfg.provenance.iter().cloned().collect(),
        epsilons: cfg.epsilons.clone(),
        records: Vec::new(),
        thresholds: Vec::new(),
        passed: false,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("model_refs.json"), &ModelRefs::from(model))?;
        io::write_json(&dir.join("report.json"), &report)?;
    }
    let mut cache: Option<SampledImages> = None;
    for level in levels {
        let record = sweep_level(model, cfg, level, &mut cache).map_err(|e| e.at_eps(level.eps()))?;
        report.records.push(record);
        if let Some(dir) = &cfg.out_dir {
            io::write_json(&dir.join("report.json"), &report)?;
        }
    }
    report.thresholds = threshold_estimate(&report, &model.refs);
    report.passed = report.records.iter().all(|r| r.checks.passed);
    report.complete = true;
    if let Some(dir) = &cfg.out_dir {
        io::write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

fn build_model(
    model: &ModelSpec,
    cfg: &SweepConfig,
    level: NoiseLevel,
    part: &Partition,
    cache: &mut Option<SampledImages>,
) -> Result<MarkovModel> {
    let sys = &model.system;
    if part.space().dim() == 1 {
        return build_ulam(sys, level, part, &cfg.ulam);
    }
    if level.eps() == 0.0 {
        return Err(LabError::DegenerateNoise);
    }
    let reuse = cache
        .as_ref()
        .is_some_and(|c| c.partition() == part && c.seed() == cfg.ulam.seed);
    if !reuse {
        *cache = Some(SampledImages::compute(sys, part, cfg.ulam.seed, cfg.ulam.exec));
    }
    cache
        .as_ref()
        .expect("image cache was just filled")
        .build(sys, level, &cfg.ulam)
}

fn sweep_level(
    model: &ModelSpec,
    cfg: &SweepConfig,
    level: NoiseLevel,
    cache: &mut Option<SampledImages>,
) -> Result<EpsRecord> {
    let eps = level.eps();
    let space = model.system.space();
    let part = cfg.policy.partition(space, eps)?;
    let markov = build_model(model, cfg, level, &part, cache)?;
    let dec = recurrent_classes(&markov);
    let matching = match_classes(&dec, &model.refs, &part)?;
    let solver = SolverConfig {
        exec: cfg.ulam.exec,
        ..cfg.solver
    };
    let classes = dec
        .classes
        .iter()
        .map(|c| stationary_measure_with(&markov, c, &solver))
        .collect::<Result<Vec<_>>>()?;
    let table = absorption(&markov, &dec)?;
    let beta = weights(&table, &part);
    let assembled = assemble_mean_sojourn(&classes, &beta)?;

    let supports: Vec<SupportSet> = classes.iter().map(support_of).collect();
    let mut class_records = Vec::with_capacity(dec.len());
    for (k, status) in matching.classes.iter().enumerate() {
        let (hausdorff, w1) = match status {
            ClassStatus::Matched { reference } => {
                let r = model
                    .refs
                    .iter()
                    .find(|r| &r.id == reference)
                    .expect("matched reference exists");
                (
                    Some(hausdorff_points(space, &supports[k].centers(), &r.carrier)?),
                    Some(w1_distance(&classes[k], &r.reference_measure(&part)?)?),
                )
            }
            _ => (None, None),
        };
        class_records.push(ClassRecord {
            index: k,
            cells: dec.classes[k].len(),
            beta: beta[k],
            status: status.clone(),
            support_cells: supports[k].len(),
            hausdorff,
            w1,
            file: None,
        });
    }
    let mut ref_records = Vec::with_capacity(model.refs.len());
    let mut ref_supports = Vec::with_capacity(model.refs.len());
    for (r, reference) in model.refs.iter().enumerate() {
        let class = matching.ref_class[r];
        let resolved = matching.resolved(r);
        let own = class.filter(|_| resolved);
        ref_records.push(RefRecord {
            id: reference.id.clone(),
            class,
            resolved,
            hausdorff: own.and_then(|k| class_records[k].hausdorff),
            w1: own.and_then(|k| class_records[k].w1),
        });
        ref_supports.push(own.map(|k| supports[k].clone()));
    }

    let (mc_measure, monte_carlo) = match &cfg.monte_carlo {
        Some(ens) => {
            let ens = Ensemble {
                exec: cfg.ulam.exec,
                ..*ens
            };
            let counts = sojourn_global_counts(&model.system, level, &part, &ens, 0..ens.x_samples)?;
            let mu = counts.to_measure()?;
            let tolerance = if space.dim() == 1 {
                tol::MC_1D_WIDTHS * part.cell_width()
            } else {
                tol::MC_2D
            };
            let distance = w1_distance(&assembled, &mu)?;
            let rec = MonteCarloRecord {
                n: ens.n,
                samples: ens.samples,
                x_samples: ens.x_samples,
                seed: ens.seed,
                distance,
                tolerance,
                clamp_events: counts.clamp_events,
            };
            (Some(mu), Some(rec))
        }
        None => (None, None),
    };

    let hull = model.hull_vertices.map(|s| {
        let per_function = hull_distances(&assembled, s);
        HullRecord {
            distance: per_function.iter().cloned().fold(0.0, f64::max),
            per_function,
        }
    });
    let assembled_support = support_of(&assembled);
    let level_set_hausdorff = match model.level_set {
        Some(ls) => Some(level_set_distance(ls, &assembled_support)?),
        None => None,
    };

    let mut disjoint = true;
    let mut seen = vec![false; part.len()];
    for c in dec.classes.iter().flatten() {
        disjoint &= !std::mem::replace(&mut seen[*c], true);
    }
    let beta_sum_defect = (beta.iter().sum::<f64>() - 1.0).abs();
    let monte_carlo_ok = monte_carlo.as_ref().map(|m| m.distance <= m.tolerance);
    let mut checks = Checks {
        row_defect: markov.max_row_defect(),
        alpha_sum_defect: table.max_sum_defect(),
        harmonic_residual: table.harmonic_residual(&markov),
        indicator_defect: table.indicator_defect(&dec),
        beta_sum_defect,
        classes_disjoint: disjoint,
        monte_carlo_ok,
        passed: false,
    };
    checks.passed = checks.row_defect <= tol::ROW
        && checks.alpha_sum_defect <= tol::ALPHA_SUM
        && checks.harmonic_residual <= tol::HARMONIC
        && checks.indicator_defect <= tol::ALPHA_SUM
        && checks.beta_sum_defect <= tol::BETA_SUM
        && checks.classes_disjoint
        && checks.monte_carlo_ok != Some(false);

    let mut record = EpsRecord {
        eps,
        resolution: part.resolution(),
        cell_width: part.cell_width(),
        nnz: markov.nnz(),
        build_mode: markov.mode(),
        kernel_clamp_events: markov.clamp_events(),
        l: dec.len(),
        transient_cells: dec.transient.len(),
        beta,
        resolved_refs: matching.resolved_count(),
        merged_classes: matching.merged_count(),
        classes: class_records,
        refs: ref_records,
        monte_carlo,
        hull,
        level_set_hausdorff,
        assembled_support_diameter: assembled_support.diameter(),
        checks,
        directory: None,
        measures: EpsMeasures {
            classes,
            assembled,
            monte_carlo: mc_measure,
            ref_supports,
        },
    };
    if let Some(dir) = &cfg.out_dir {
        write_level(dir, cfg, &markov, &dec, &table, &mut record)?;
    }
    Ok(record)
}

fn write_level(
    dir: &Path,
    cfg: &SweepConfig,
    markov: &MarkovModel,
    dec: &RecurrentDecomposition,
    table: &crate::ulam::AbsorptionTable,
    record: &mut EpsRecord,
) -> Result<()> {
    let name = eps_dir_name(record.eps);
    let sub = dir.join(&name);
    let mut meta = cfg.provenance.clone();
    meta.push(("epsilon".into(), io::fmt_f64(record.eps)));
    io::write_model(&sub, "model", markov)?;
    for (k, mu) in record.measures.classes.iter().enumerate() {
        let file = format!("class_{k}.csv");
        io::write_measure(&sub.join(&file), mu, &meta)?;
        record.classes[k].file = Some(format!("{name}/{file}"));
    }
    io::write_measure(&sub.join("assembled.csv"), &record.measures.assembled, &meta)?;
    if let Some(mu) = &record.measures.monte_carlo {
        io::write_measure(&sub.join("monte_carlo.csv"), mu, &meta)?;
    }
    let mut classes = io::header_lines(&meta);
    classes.push_str("class,cell\n");
    for (k, c) in dec.classes.iter().enumerate() {
        for cell in c {
            classes.push_str(&format!("{k},{cell}\n"));
        }
    }
    io::write_atomic(&sub.join("classes.csv"), classes.as_bytes())?;
    let mut alpha = io::header_lines(&meta);
    let cols: Vec<String> = (0..table.classes).map(|k| format!("alpha_{k}")).collect();
    alpha.push_str(&format!("cell,{}\n", cols.join(",")));
    for x in 0..table.cells() {
        let row: Vec<String> = table.alpha(x).iter().map(|a| io::fmt_f64(*a)).collect();
        alpha.push_str(&format!("{x},{}\n", row.join(",")));
    }
    io::write_atomic(&sub.join("absorption.csv"), alpha.as_bytes())?;
    let mut beta = io::header_lines(&meta);
    beta.push_str("class,beta\n");
    for (k, b) in record.beta.iter().enumerate() {
        beta.push_str(&format!("{k},{}\n", io::fmt_f64(*b)));
    }
    io::write_atomic(&sub.join("beta.csv"), beta.as_bytes())?;
    io::write_json(&sub.join("record.json"), record)?;
    record.directory = Some(name);
    Ok(())
}

/// Hausdorff distance between a support and the cells of a level set on
/// the support's partition.
pub fn level_set_distance(ls: LevelSet, support: &SupportSet) -> Result<f64> {
    let part = support.partition();
    let cells = SupportSet::from_cells(*part, ls.cells(part));
    crate::measure::hausdorff(support, &cells)
}

/// Whether every center of `inner` lies within one cell width of `outer`.
fn nested(inner: &SupportSet, outer: &SupportSet) -> bool {
    let space = outer.partition().space();
    let slack = outer.partition().cell_width() * (1.0 + 1e-9);
    let outer_centers = outer.centers();
    inner
        .centers()
        .iter()
        .all(|p| outer_centers.iter().any(|q| space.dist(p, q).is_ok_and(|d| d <= slack)))
}

/// Per reference: the largest swept level from which on (downwards) the
/// attractor sits alone in its own class and its supports are nested
/// (up to one cell) along the remaining levels.
pub fn threshold_estimate(report: &SweepReport, refs: &[AttractorRef]) -> Vec<ThresholdEstimate> {
    let recs = &report.records;
    refs.iter()
        .enumerate()
        .map(|(r, reference)| {
            let ok_at = |k: usize| recs[k].refs.get(r).is_some_and(|x| x.resolved);
            let n = recs.len();
            // smallest k with every level k.. resolved and nested
            let mut start = n;
            for k in (0..n).rev() {
                if !ok_at(k) {
                    break;
                }
                if k + 1 < n {
                    let (outer, inner) = (&recs[k].measures.ref_supports[r], &recs[k + 1].measures.ref_supports[r]);
                    match (outer, inner) {
                        (Some(o), Some(i)) if nested(i, o) => {}
                        _ => break,
                    }
                }
                start = k;
            }
            let threshold = if start == n {
                Threshold::BelowRange
            } else if start == 0 {
                Threshold::TopOfSweep { top: recs[0].eps }
            } else {
                Threshold::Interval {
                    lo: recs[start].eps,
                    hi: recs[start - 1].eps,
                }
            };
            ThresholdEstimate {
                reference: reference.id.clone(),
                threshold,
            }
        })
        .collect()
}

/// Reference data of a model as exported for the plotting layer.
#[derive(Debug, Clone, Serialize)]
pub struct ModelRefs {
    pub model: String,
    pub params: BTreeMap<String, f64>,
    pub space: StateSpace,
    pub eps_max: f64,
    pub refs: Vec<AttractorRef>,
    pub hull_vertices: Option<[Point; 2]>,
    pub level_set: Option<LevelSet>,
}

impl From<&ModelSpec> for ModelRefs {
    fn from(m: &ModelSpec) -> Self {
        Self {
            model: m.name.clone(),
            params: m.params.clone(),
            space: m.system.space(),
            eps_max: m.eps_max,
            refs: m.refs.clone(),
            hull_vertices: m.hull_vertices,
            level_set: m.level_set,
        }
    }
}

/// One probe point of a basin growth table.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRecord {
    pub x: f64,
    /// Inside the open basin and the unperturbed orbit reaches the sink.
    pub in_basin: bool,
    /// Absorption probability into the attractor's own class per level
    /// (`None` where the attractor is not resolved).
    pub alpha: Vec<Option<f64>>,
    pub nondecreasing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinGrowthTable {
    pub reference: String,
    pub basin: Basin,
    pub epsilons: Vec<f64>,
    pub probes: Vec<ProbeRecord>,
    /// Share of the basin volume with `alpha >= 0.99`, per level.
    pub basin_fraction: Vec<Option<f64>>,
    pub fraction_nondecreasing: bool,
    pub passed: bool,
}

/// Absorption threshold counted as "captured".
pub const CAPTURE: f64 = 0.99;

/// Follows the absorption probabilities of one sink's class along a
/// descending sweep at the given probe points. Probes inside the basin
/// must see non-decreasing absorption that ends at `>= 0.99`.
pub fn basin_growth_check(
    model: &ModelSpec,
    reference: usize,
    probes: &[f64],
    cfg: &SweepConfig,
) -> Result<BasinGrowthTable> {
    let levels = cfg.levels(model)?;
    let r = model
        .refs
        .get(reference)
        .ok_or_else(|| LabError::Parameter(format!("model {} has no reference #{reference}", model.name)))?;
    let basin = r
        .basin
        .ok_or_else(|| LabError::Parameter(format!("reference {} has no basin", r.id)))?;
    let space = model.system.space();
    let sink = r.carrier[0];
    let mut alphas = vec![Vec::new(); probes.len()];
    let mut basin_fraction = Vec::new();
    let mut cache = None;
    for level in levels {
        let eps = level.eps();
        let mut step = || -> Result<()> {
            let part = cfg.policy.partition(space, eps)?;
            let markov = build_model(model, cfg, level, &part, &mut cache)?;
            let dec = recurrent_classes(&markov);
            let matching = match_classes(&dec, &model.refs, &part)?;
            let own = matching.ref_class[reference].filter(|_| matching.resolved(reference));
            let table = own.map(|_| absorption(&markov, &dec)).transpose()?;
            for (k, &x) in probes.iter().enumerate() {
                let a = own
                    .zip(table.as_ref())
                    .map(|(c, t)| t.alpha(part.cell_of(&Point::D1(x)))[c]);
                alphas[k].push(a);
            }
            basin_fraction.push(own.zip(table.as_ref()).map(|(c, t)| {
                let captured = (0..part.len())
                    .filter(|&i| basin.contains(part.cell_center(i).x()) && t.alpha(i)[c] >= CAPTURE)
                    .count();
                part.volume_of(captured) / basin.length
            }));
            Ok(())
        };
        step().map_err(|e| e.at_eps(eps))?;
    }
    let probes: Vec<ProbeRecord> = probes
        .iter()
        .zip(alphas)
        .map(|(&x, alpha)| {
            let mut y = Point::D1(x);
            for _ in 0..10_000 {
                y = model.system.image(y);
            }
            let reaches = space.dist(&y, &sink).is_ok_and(|d| d < 1e-6);
            let seen: Vec<f64> = alpha.iter().flatten().copied().collect();
            ProbeRecord {
                x,
                in_basin: basin.contains(x) && reaches,
                nondecreasing: seen.windows(2).all(|w| w[1] >= w[0] - 1e-9),
                alpha,
            }
        })
        .collect();
    let fractions: Vec<f64> = basin_fraction.iter().flatten().copied().collect();
    let fraction_nondecreasing = fractions.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let passed = fraction_nondecreasing
        && probes
            .iter()
            .filter(|p| p.in_basin)
            .all(|p| p.nondecreasing && p.alpha.last().copied().flatten().is_some_and(|a| a >= CAPTURE));
    Ok(BasinGrowthTable {
        reference: r.id.clone(),
        basin,
        epsilons: cfg.epsilons.clone(),
        probes,
        basin_fraction,
        fraction_nondecreasing,
        passed,
    })
}
