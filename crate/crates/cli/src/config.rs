//! Run configuration: command-line flags layered over an optional
//! key-value file, validated in one pass.
//!
//! Precedence, highest first: flag, config file, `RDSLAB_SEED` (seed only),
//! built-in default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use rdslab_core::io::parse_key_values;
use rdslab_core::measure::Ensemble;
use rdslab_core::stability::PartitionPolicy;
use rdslab_core::zoo::ModelSpec;
use rdslab_core::NoiseLevel;

pub const SEED_ENV: &str = "RDSLAB_SEED";

/// Flags shared by every subcommand. Each can also be set in the
/// `--config` file under the same name (dashes or underscores).
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in model: rotation, north_south, asym_two_sink, example1, bowen.
    #[arg(long)]
    pub model: Option<String>,
    /// Model parameters `k=v`, repeatable or comma-separated.
    #[arg(long = "params", value_name = "K=V")]
    pub params: Vec<String>,
    /// Noise levels, comma-separated, strictly decreasing.
    #[arg(long)]
    pub eps: Option<String>,
    /// Cells per noise radius along each axis (cell width = eps / ratio).
    #[arg(long = "cells-per-eps")]
    pub cells_per_eps: Option<f64>,
    /// Fixed grid `NXxNY`, used instead of --cells-per-eps (2D default 256x256).
    #[arg(long)]
    pub grid: Option<String>,
    /// Orbit length.
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise realizations per initial point.
    #[arg(long)]
    pub samples: Option<u64>,
    /// Initial points of global ensembles (stratified).
    #[arg(long = "x-samples")]
    pub x_samples: Option<u64>,
    /// Kernel samples per cell for 2D models.
    #[arg(long = "samples-per-cell")]
    pub samples_per_cell: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start point for `simulate` (comma-separated coordinates); global
    /// ensemble when absent.
    #[arg(long)]
    pub x0: Option<String>,
    /// Skip the Monte Carlo cross-check of `sweep`.
    #[arg(long = "skip-mc")]
    pub skip_mc: bool,
    /// Reference attractor index for `basins`.
    #[arg(long = "ref")]
    pub reference: Option<usize>,
    /// Probe points for `basins`, comma-separated.
    #[arg(long)]
    pub probes: Option<String>,
}

/// A fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub epsilons: Vec<f64>,
    pub policy: PartitionPolicy,
    pub ensemble: Ensemble,
    pub samples_per_cell: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub x0: Option<Vec<f64>>,
    pub skip_mc: bool,
    pub reference: usize,
    pub probes: Option<Vec<f64>>,
    /// Every resolved setting, for artifact headers and the sidecar.
    pub provenance: Vec<(String, String)>,
}

const DEFAULT_EPS_1D: [f64; 5] = [0.08, 0.04, 0.02, 0.01, 0.005];
const DEFAULT_EPS_2D: [f64; 3] = [0.04, 0.02, 0.01];

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid `{s}` must look like 256x256"))?;
    let p = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("grid `{s}` must look like 256x256"))
    };
    Ok((p(a)?, p(b)?))
}

/// Looks up `key` in flags first, then the file.
struct Layers<'a> {
    file: &'a BTreeMap<String, String>,
}

impl Layers<'_> {
    fn pick<T: Clone>(
        &self,
        flag: &Option<T>,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, String> {
        if let Some(v) = flag {
            return Ok(Some(v.clone()));
        }
        match self.file.get(key) {
            Some(raw) => parse(raw).map(Some).map_err(|e| format!("config `{key}`: {e}")),
            None => Ok(None),
        }
    }
}

fn take<T>(errors: &mut Vec<String>, r: Result<Option<T>, String>) -> Option<T> {
    r.unwrap_or_else(|e| {
        errors.push(e);
        None
    })
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim()
        .parse::<T>()
        .map_err(|_| format!("`{s}` is not a valid number"))
}

impl Flags {
    /// Resolves every setting and validates it, collecting all problems
    /// into one report.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let mut errors = Vec::new();
        let file: BTreeMap<String, String> = match &self.config {
            Some(path) => match std::fs::read_to_string(path) {
                Ok(text) => match parse_key_values(&text) {
                    Ok(kv) => kv.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect(),
                    Err(e) => {
                        errors.push(format!("config file {}: {e}", path.display()));
                        BTreeMap::new()
                    }
                },
                Err(e) => {
                    errors.push(format!("cannot read config file {}: {e}", path.display()));
                    BTreeMap::new()
                }
            },
            None => BTreeMap::new(),
        };
        const KNOWN: [&str; 15] = [
            "model",
            "params",
            "eps",
            "cells_per_eps",
            "grid",
            "n",
            "samples",
            "x_samples",
            "samples_per_cell",
            "seed",
            "out",
            "x0",
            "skip_mc",
            "ref",
            "probes",
        ];
        for k in file.keys() {
            if !KNOWN.contains(&k.as_str()) {
                errors.push(format!("config file: unknown key `{k}`"));
            }
        }
        let layers = Layers { file: &file };

        let model_name = take(
            &mut errors,
            layers.pick(&self.model, "model", |s| Ok(s.trim().to_string())),
        )
        .unwrap_or_else(|| "north_south".to_string());
        let mut param_items: Vec<String> = file
            .get("params")
            .map(|p| p.split(',').map(String::from).collect())
            .unwrap_or_default();
        // flags override file entries with the same key
        param_items.extend(self.params.iter().flat_map(|p| p.split(',').map(String::from)));
        let mut params = BTreeMap::new();
        for item in param_items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
            match item.split_once('=') {
                Some((k, v)) => match v.trim().parse::<f64>() {
                    Ok(v) => {
                        params.insert(k.trim().to_string(), v);
                    }
                    Err(_) => errors.push(format!("parameter `{item}`: value is not a number")),
                },
                None => errors.push(format!("parameter `{item}` must look like k=v")),
            }
        }
        let eps_flag = match self.eps.as_deref().map(parse_list).transpose() {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("eps: {e}"));
                None
            }
        };
        let eps = take(&mut errors, layers.pick(&eps_flag, "eps", parse_list));
        let cells_per_eps = take(
            &mut errors,
            layers.pick(&self.cells_per_eps, "cells_per_eps", parse_num),
        );
        let grid = take(&mut errors, layers.pick(&self.grid, "grid", |s| Ok(s.to_string())));
        let n = take(&mut errors, layers.pick(&self.n, "n", parse_num)).unwrap_or(100_000);
        let samples = take(&mut errors, layers.pick(&self.samples, "samples", parse_num)).unwrap_or(20);
        let x_samples = take(&mut errors, layers.pick(&self.x_samples, "x_samples", parse_num)).unwrap_or(200);
        let samples_per_cell = take(
            &mut errors,
            layers.pick(&self.samples_per_cell, "samples_per_cell", parse_num),
        )
        .unwrap_or(256);
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => match v.trim().parse::<u64>() {
                Ok(s) => Some(s),
                Err(_) => {
                    errors.push(format!("{SEED_ENV}=`{v}` is not an unsigned integer"));
                    None
                }
            },
            Err(_) => None,
        };
        let seed = take(&mut errors, layers.pick(&self.seed, "seed", parse_num))
            .or(env_seed)
            .unwrap_or(0);
        let out = take(
            &mut errors,
            layers.pick(&self.out, "out", |s| Ok(PathBuf::from(s.trim()))),
        )
        .unwrap_or_else(|| PathBuf::from("rdslab_out"));
        let x0 = take(
            &mut errors,
            layers.pick(&self.x0.as_deref().map(|s| s.to_string()), "x0", |s| Ok(s.to_string())),
        );
        let skip_mc = self.skip_mc
            || take(
                &mut errors,
                layers.pick(&None, "skip_mc", |s| {
                    s.trim().parse::<bool>().map_err(|_| format!("`{s}` is not true/false"))
                }),
            )
            .unwrap_or(false);
        let reference = take(&mut errors, layers.pick(&self.reference, "ref", parse_num)).unwrap_or(0);
        let probes = take(
            &mut errors,
            layers.pick(&self.probes.as_deref().map(|s| s.to_string()), "probes", |s| {
                Ok(s.to_string())
            }),
        );

        let model = match ModelSpec::by_name(&model_name, &params) {
            Ok(m) => Some(m),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        };
        let dim = model.as_ref().map_or(1, |m| m.system.space().dim());
        let epsilons = eps.unwrap_or_else(|| {
            if dim == 2 {
                DEFAULT_EPS_2D.to_vec()
            } else {
                DEFAULT_EPS_1D.to_vec()
            }
        });
        for &e in &epsilons {
            match NoiseLevel::positive(e) {
                Err(err) => errors.push(format!("eps {e}: {err}")),
                Ok(_) => {
                    if let Some(m) = &model {
                        if e > m.eps_max {
                            errors.push(format!(
                                "eps {e} exceeds the range of model {} (eps_max = {})",
                                m.name, m.eps_max
                            ));
                        }
                    }
                }
            }
        }
        if epsilons.is_empty() {
            errors.push("no noise levels given".into());
        }
        if epsilons.windows(2).any(|w| w[1] >= w[0]) {
            errors.push("noise levels must be strictly decreasing".into());
        }
        let policy = match (grid, cells_per_eps) {
            (Some(g), _) => match parse_grid(&g) {
                Ok((nx, ny)) if nx > 0 && ny > 0 => PartitionPolicy::Fixed { nx, ny },
                Ok(_) => {
                    errors.push("grid needs at least one cell per axis".into());
                    PartitionPolicy::Fixed { nx: 1, ny: 1 }
                }
                Err(e) => {
                    errors.push(e);
                    PartitionPolicy::Fixed { nx: 1, ny: 1 }
                }
            },
            (None, Some(ratio)) => {
                if !(ratio > 0.0 && ratio.is_finite()) {
                    errors.push(format!("cells-per-eps must be positive, got {ratio}"));
                }
                PartitionPolicy::CellsPerEps { ratio }
            }
            (None, None) if dim == 2 => PartitionPolicy::Fixed { nx: 256, ny: 256 },
            (None, None) => PartitionPolicy::CellsPerEps { ratio: 8.0 },
        };
        if n == 0 || samples == 0 || x_samples == 0 {
            errors.push("n, samples and x-samples must be at least 1".into());
        }
        if samples_per_cell == 0 {
            errors.push("samples-per-cell must be at least 1".into());
        }
        let x0 = match x0.map(|s| parse_list(&s)) {
            Some(Ok(v)) if v.len() == dim => Some(v),
            Some(Ok(v)) => {
                errors.push(format!("x0 has {} coordinates, the model needs {dim}", v.len()));
                None
            }
            Some(Err(e)) => {
                errors.push(format!("x0: {e}"));
                None
            }
            None => None,
        };
        let probes = match probes.map(|s| parse_list(&s)) {
            Some(Ok(v)) => Some(v),
            Some(Err(e)) => {
                errors.push(format!("probes: {e}"));
                None
            }
            None => None,
        };
        let Some(model) = model else {
            return Err(errors.join("\n"));
        };
        if !errors.is_empty() {
            return Err(errors.join("\n"));
        }

        let fmt_list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut provenance = vec![
            ("model".to_string(), model.name.clone()),
            (
                "params".to_string(),
                model
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("eps".to_string(), fmt_list(&epsilons)),
            (
                "partition".to_string(),
                match policy {
                    PartitionPolicy::CellsPerEps { ratio } => format!("cells_per_eps={ratio}"),
                    PartitionPolicy::Fixed { nx, ny } => format!("grid={nx}x{ny}"),
                },
            ),
            ("n".to_string(), n.to_string()),
            ("samples".to_string(), samples.to_string()),
            ("x_samples".to_string(), x_samples.to_string()),
            ("samples_per_cell".to_string(), samples_per_cell.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        if let Some(x) = &x0 {
            provenance.push(("x0".to_string(), fmt_list(x)));
        }
        if skip_mc {
            provenance.push(("skip_mc".to_string(), "true".to_string()));
        }
        Ok(RunConfig {
            model,
            epsilons,
            policy,
            ensemble: Ensemble::new(n, samples, x_samples, seed),
            samples_per_cell,
            seed,
            out,
            x0,
            skip_mc,
            reference,
            probes,
            provenance,
        })
    }
}
