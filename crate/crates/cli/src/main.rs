//! `rdslab`: command-line front end of the lab.
//!
//! ```text
//! rdslab simulate --model north_south --eps 0.02 --n 10000 --out run/
//! rdslab ulam     --model asym_two_sink --eps 0.04,0.02
//! rdslab sweep    --config sweep.conf
//! rdslab basins   --model north_south --ref 0
//! ```
//!
//! Exit status: 0 on success, 1 when a sweep or basin check fails its
//! self-checks, 2 on invalid input or runtime errors.

mod config;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rdslab_core::io::{key_value_text, write_atomic, write_json, write_measure};
use rdslab_core::measure::{sojourn_global, sojourn_point, support_of};
use rdslab_core::stability::{basin_growth_check, eps_dir_name, run_sweep, SweepConfig};
use rdslab_core::{Exec, NoiseLevel, Point};

use config::{Flags, RunConfig};

#[derive(Parser)]
#[command(name = "rdslab", version, about = "Randomly perturbed dynamical systems lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo sojourn measures, one per noise level.
    Simulate(Flags),
    /// Ulam transfer operators, recurrent classes, stationary measures and
    /// absorption weights for each noise level.
    Ulam(Flags),
    /// Full stability sweep with Monte Carlo cross-check and report.
    Sweep(Flags),
    /// Basin growth of one reference attractor as the noise shrinks.
    Basins(Flags),
}

fn exec() -> Exec {
    if cfg!(feature = "parallel") {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn sweep_config(run: &RunConfig, with_mc: bool) -> SweepConfig {
    let mut cfg = SweepConfig::new(run.epsilons.clone(), run.policy);
    cfg.ulam.seed = run.seed;
    cfg.ulam.samples_per_cell = run.samples_per_cell;
    cfg.ulam.exec = exec();
    cfg.solver.exec = exec();
    if run.model.system.space().dim() == 2 {
        // a 2D grid cannot afford four cells per noise radius
        cfg.ulam.min_cells_per_eps = 1.0;
    }
    if with_mc {
        let mut ens = run.ensemble;
        ens.exec = exec();
        cfg.monte_carlo = Some(ens);
    }
    cfg.out_dir = Some(run.out.clone());
    cfg.provenance = run.provenance.clone();
    cfg
}

fn write_sidecar(run: &RunConfig, command: &str) -> Result<()> {
    let mut meta = vec![("command".to_string(), command.to_string())];
    meta.extend(run.provenance.iter().cloned());
    write_atomic(&run.out.join("config.txt"), key_value_text(&meta).as_bytes())?;
    Ok(())
}

fn simulate(run: &RunConfig) -> Result<bool> {
    let sys = &run.model.system;
    let space = sys.space();
    let x0 = run.x0.as_ref().map(|c| match c[..] {
        [x] => Point::D1(x),
        [x, y] => Point::D2(x, y),
        _ => unreachable!("x0 length is validated"),
    });
    let mut ens = run.ensemble;
    ens.exec = exec();
    let mut levels = Vec::new();
    for &eps in &run.epsilons {
        let level = NoiseLevel::positive(eps)?;
        let part = run.policy.partition(space, eps)?;
        let mu = match x0 {
            Some(x) => sojourn_point(sys, x, level, &part, &ens),
            None => sojourn_global(sys, level, &part, &ens),
        }
        .with_context(|| format!("eps = {eps}"))?;
        let mut meta: Vec<_> = run.provenance.iter().filter(|(k, _)| k != "eps").cloned().collect();
        meta.push(("eps".into(), eps.to_string()));
        meta.push((
            "measure".into(),
            if x0.is_some() {
                "sojourn_point"
            } else {
                "sojourn_global"
            }
            .into(),
        ));
        let dir = run.out.join(eps_dir_name(eps));
        write_measure(&dir.join("sojourn.csv"), &mu, &meta)?;
        let support = support_of(&mu);
        let (nx, ny) = part.resolution();
        levels.push(serde_json::json!({
            "eps": eps,
            "resolution": [nx, ny],
            "cell_width": part.cell_width(),
            "support_cells": support.len(),
            "support_diameter": support.diameter(),
            "file": format!("{}/sojourn.csv", eps_dir_name(eps)),
        }));
        eprintln!("eps = {eps}: {} cells, support {} cells", part.len(), support.len());
    }
    let summary = serde_json::json!({
        "model": run.model.name,
        "params": run.model.params,
        "config": run.provenance.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
        "levels": levels,
    });
    write_json(&run.out.join("summary.json"), &summary)?;
    write_sidecar(run, "simulate")?;
    Ok(true)
}

fn sweep(run: &RunConfig, with_mc: bool, command: &str) -> Result<bool> {
    let cfg = sweep_config(run, with_mc);
    let report = run_sweep(&run.model, &cfg)?;
    write_sidecar(run, command)?;
    for r in &report.records {
        eprintln!(
            "eps = {}: {} cells, {} recurrent classes, {} transient, resolved refs {}",
            r.eps,
            r.resolution.0 * r.resolution.1,
            r.l,
            r.transient_cells,
            r.resolved_refs
        );
    }
    eprintln!("report: {}", run.out.join("report.json").display());
    Ok(report.passed)
}

fn basins(run: &RunConfig) -> Result<bool> {
    let model = &run.model;
    let r = model
        .refs
        .get(run.reference)
        .with_context(|| format!("model {} has {} reference attractors", model.name, model.refs.len()))?;
    let probes = match &run.probes {
        Some(p) => p.clone(),
        None => {
            let b = r.basin.with_context(|| format!("reference {} has no basin", r.id))?;
            (1..10)
                .map(|k| (b.lo + b.length * k as f64 / 10.0).rem_euclid(1.0))
                .collect()
        }
    };
    let cfg = sweep_config(run, false);
    let table = basin_growth_check(model, run.reference, &probes, &SweepConfig { out_dir: None, ..cfg })?;
    write_json(&run.out.join("basins.json"), &table)?;
    write_sidecar(run, "basins")?;
    for (eps, f) in table.epsilons.iter().zip(&table.basin_fraction) {
        match f {
            Some(f) => eprintln!("eps = {eps}: captured basin fraction {f:.4}"),
            None => eprintln!("eps = {eps}: {} not resolved", table.reference),
        }
    }
    Ok(table.passed)
}

fn run(cli: Cli) -> Result<bool> {
    let (flags, name) = match &cli.command {
        Command::Simulate(f) => (f, "simulate"),
        Command::Ulam(f) => (f, "ulam"),
        Command::Sweep(f) => (f, "sweep"),
        Command::Basins(f) => (f, "basins"),
    };
    let run = flags
        .resolve()
        .map_err(|report| anyhow::anyhow!("invalid configuration:\n{report}"))?;
    std::fs::create_dir_all(&run.out).with_context(|| format!("cannot create {}", run.out.display()))?;
    match name {
        "simulate" => simulate(&run),
        "ulam" => sweep(&run, false, name),
        "sweep" => sweep(&run, !run.skip_mc, name),
        _ => basins(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("self-checks failed; see the report");
            ExitCode::from(1)
        }
        Err(e) => {
            // wrapped errors often repeat their source in their own message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
