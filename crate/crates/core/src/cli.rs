//! Experiment orchestration behind the `umblt` binary.
//!
//! Configuration is resolved in layers: scale preset (desk or paper), then
//! the optional config file, then command-line flags, most specific wins.
//! A run executes the two-grid protocol: hypothesis checks, fine-grid
//! forward and adjoint solves, internal-data synthesis, restriction to the
//! coarse grid, a baseline reconstruction with the true coefficients, the
//! uncertainty ensembles, and finally the data products: distribution.csv,
//! stability.csv, bound.csv, plain-text field dumps, and a run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde::Deserialize;

use crate::assembly::{assemble_forward_matrix, BoundarySelection, Side};
use crate::coefficients::{
    experiment_coefficients, sample_fields, shepp_logan_phantom, Diffusion, OpticalCoefficients,
    ScalarField, SourceField, DEFAULT_ELL, DEFAULT_GAMMA,
};
use crate::error::{Error, Result};
use crate::mesh::{restrict_to_coarse, Grid2D, NodeField, NormKind};
use crate::pipeline::{adjoint_positive, forward_solve, internal_data, reconstruct_source};
use crate::solver::certify_wcdd;
use crate::uq::{run_ensemble, EnsembleParams, EnsembleReport, DEFAULT_K_FREQ};

/// Desk-scale defaults: fast enough for tests and iteration.
pub const DESK_FINE_N: usize = 101;
pub const DESK_COARSE_N: usize = 51;
pub const DESK_SAMPLES: usize = 100;
/// Paper-scale preset behind `--paper-scale`.
pub const PAPER_FINE_N: usize = 401;
pub const PAPER_COARSE_N: usize = 201;
pub const PAPER_SAMPLES: usize = 1000;

pub const DEFAULT_LEVELS: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
pub const DEFAULT_BOUND_CHECKS: usize = 10;
pub const DEFAULT_BOUND_GRID_N: usize = 21;
pub const OUT_DIR_ENV: &str = "UMBLT_OUT";
pub const DEFAULT_OUT_DIR: &str = "umblt-out";

/// Which coefficient set a run uses. `Custom` takes constant background
/// coefficients from the config file and keeps the head-phantom source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentId {
    One,
    Two,
    Custom,
}

impl ExperimentId {
    fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "one" => Ok(Self::One),
            "2" | "two" => Ok(Self::Two),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment id '{other}', expected 1, 2, or custom"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::One => "1",
            Self::Two => "2",
            Self::Custom => "custom",
        }
    }
}

/// Which uncertainty sweeps a run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// Separate diffusion-only and absorption-only sweeps over the levels.
    Both,
    DOnly,
    SigmaOnly,
    /// Both coefficients perturbed to the same level simultaneously.
    Joint,
}

impl Sweep {
    fn parse(s: &str) -> Result<Self> {
        let key: String =
            s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "both" => Ok(Self::Both),
            "donly" | "d" => Ok(Self::DOnly),
            "sigmaonly" | "sigma" => Ok(Self::SigmaOnly),
            "joint" => Ok(Self::Joint),
            _ => Err(Error::InvalidConfig(format!(
                "unknown sweep '{s}', expected both, D_only, sigma_only, or joint"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::DOnly => "d_only",
            Self::SigmaOnly => "sigma_only",
            Self::Joint => "joint",
        }
    }
}

fn parse_side(s: &str) -> Result<Side> {
    match s.trim().to_ascii_lowercase().as_str() {
        "left" => Ok(Side::Left),
        "right" => Ok(Side::Right),
        "bottom" => Ok(Side::Bottom),
        "top" => Ok(Side::Top),
        other => Err(Error::InvalidConfig(format!(
            "unknown boundary side '{other}', expected top, bottom, left, or right"
        ))),
    }
}

fn side_label(side: Side) -> &'static str {
    match side {
        Side::Left => "left",
        Side::Right => "right",
        Side::Bottom => "bottom",
        Side::Top => "top",
    }
}

/// Command-line flags. Every value flag overrides the config file.
#[derive(Parser, Debug, Default)]
#[command(
    name = "umblt",
    version,
    about = "Staggered-grid diffusive source reconstruction with uncertainty ensembles"
)]
pub struct CliArgs {
    /// Experiment id: 1, 2, or custom (custom reads constant coefficients
    /// from the config file).
    #[arg(long)]
    pub experiment: Option<String>,
    /// Config file (key = value, TOML syntax); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ensemble size per sweep point.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Relative uncertainty levels in (0,1), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Sweep layout: both | D_only | sigma_only | joint.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Elasto-optical modulation constant.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Extrapolation length of the Robin boundary condition.
    #[arg(long)]
    pub ell: Option<f64>,
    /// Measurement sides for partial boundary data, comma separated
    /// (top, bottom, left, right). Omit for whole-boundary data.
    #[arg(long, value_delimiter = ',')]
    pub partial_gamma: Option<Vec<String>>,
    /// Fine (synthesis) grid nodes per side.
    #[arg(long)]
    pub fine_n: Option<usize>,
    /// Coarse (inversion) grid nodes per side; must nest into the fine grid.
    #[arg(long)]
    pub coarse_n: Option<usize>,
    /// Base seed for the frozen modes and the per-sample draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (fallback: env UMBLT_OUT, then ./umblt-out).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker-thread cap for the sample-parallel ensembles.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Paper-scale preset: fine 401^2, coarse 201^2, 1000 samples.
    #[arg(long)]
    pub paper_scale: bool,
    /// Discrete bound checks per run (reduced-grid subsample).
    #[arg(long)]
    pub bound_checks: Option<usize>,
}

/// `experiment` accepts both `experiment = 1` and `experiment = "custom"`.
#[derive(Deserialize, Debug, Clone)]
#[serde(untagged)]
pub enum ExperimentKey {
    Id(u32),
    Name(String),
}

/// Config-file schema; every key is optional and flag-overridable.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub experiment: Option<ExperimentKey>,
    pub fine_n: Option<usize>,
    pub coarse_n: Option<usize>,
    pub samples: Option<usize>,
    pub levels: Option<Vec<f64>>,
    pub sweep: Option<String>,
    pub gamma: Option<f64>,
    pub ell: Option<f64>,
    pub partial_gamma: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub paper_scale: Option<bool>,
    pub bound_checks: Option<usize>,
    pub bound_grid_n: Option<usize>,
    pub custom_d: Option<f64>,
    pub custom_sigma: Option<f64>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub custom_d: Option<f64>,
    pub custom_sigma: Option<f64>,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub samples: usize,
    pub levels: Vec<f64>,
    pub sweep: Sweep,
    pub gamma: f64,
    pub ell: f64,
    pub partial_gamma: Option<Vec<Side>>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    pub bound_checks: usize,
    pub bound_grid_n: usize,
}

/// Layered resolution: preset defaults, then config file, then flags.
pub fn resolve_config(args: &CliArgs, file: &FileConfig) -> Result<ExperimentConfig> {
    let paper = args.paper_scale || file.paper_scale.unwrap_or(false);
    let (fine_default, coarse_default, samples_default) = if paper {
        (PAPER_FINE_N, PAPER_COARSE_N, PAPER_SAMPLES)
    } else {
        (DESK_FINE_N, DESK_COARSE_N, DESK_SAMPLES)
    };

    let experiment = match (&args.experiment, &file.experiment) {
        (Some(s), _) => ExperimentId::parse(s)?,
        (None, Some(ExperimentKey::Id(id))) => ExperimentId::parse(&id.to_string())?,
        (None, Some(ExperimentKey::Name(s))) => ExperimentId::parse(s)?,
        (None, None) => ExperimentId::One,
    };

    let sweep = match (&args.sweep, &file.sweep) {
        (Some(s), _) => Sweep::parse(s)?,
        (None, Some(s)) => Sweep::parse(s)?,
        (None, None) => Sweep::Both,
    };

    let partial_names = args.partial_gamma.clone().or_else(|| file.partial_gamma.clone());
    let partial_gamma = match partial_names {
        None => None,
        Some(names) => {
            if names.is_empty() {
                return Err(Error::InvalidConfig(
                    "partial_gamma needs at least one boundary side".into(),
                ));
            }
            let mut sides = Vec::new();
            for name in &names {
                let side = parse_side(name)?;
                if !sides.contains(&side) {
                    sides.push(side);
                }
            }
            Some(sides)
        }
    };

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| file.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let cfg = ExperimentConfig {
        experiment,
        custom_d: file.custom_d,
        custom_sigma: file.custom_sigma,
        fine_n: args.fine_n.or(file.fine_n).unwrap_or(fine_default),
        coarse_n: args.coarse_n.or(file.coarse_n).unwrap_or(coarse_default),
        samples: args.samples.or(file.samples).unwrap_or(samples_default),
        levels: args.levels.clone().or_else(|| file.levels.clone()).unwrap_or_else(|| DEFAULT_LEVELS.to_vec()),
        sweep,
        gamma: args.gamma.or(file.gamma).unwrap_or(DEFAULT_GAMMA),
        ell: args.ell.or(file.ell).unwrap_or(DEFAULT_ELL),
        partial_gamma,
        seed: args.seed.or(file.seed).unwrap_or(0),
        out_dir,
        jobs: args.jobs.or(file.jobs),
        bound_checks: args.bound_checks.or(file.bound_checks).unwrap_or(DEFAULT_BOUND_CHECKS),
        bound_grid_n: file.bound_grid_n.unwrap_or(DEFAULT_BOUND_GRID_N),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fine_n < 3 || self.coarse_n < 3 {
            return Err(Error::InvalidConfig(
                "grids need at least 3 nodes per side".into(),
            ));
        }
        if self.fine_n <= self.coarse_n {
            return Err(Error::InvalidConfig(format!(
                "the synthesis grid must be strictly finer than the inversion grid \
                 (fine_n = {}, coarse_n = {}); same-grid inversion is disallowed",
                self.fine_n, self.coarse_n
            )));
        }
        if (self.fine_n - 1) % (self.coarse_n - 1) != 0 {
            return Err(Error::InvalidConfig(format!(
                "coarse nodes must nest into the fine grid: ({} - 1) does not divide ({} - 1)",
                self.coarse_n, self.fine_n
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be at least 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig("at least one uncertainty level is required".into()));
        }
        for &l in &self.levels {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "levels must lie strictly inside (0, 1); got {l}"
                )));
            }
        }
        if !(self.gamma > 0.0) || !(self.ell > 0.0) {
            return Err(Error::InvalidConfig("gamma and ell must be positive".into()));
        }
        if self.bound_grid_n < 3 {
            return Err(Error::InvalidConfig("bound_grid_n needs at least 3 nodes".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        if self.experiment == ExperimentId::Custom {
            let d = self.custom_d.ok_or_else(|| {
                Error::InvalidConfig("custom experiments need custom_d in the config file".into())
            })?;
            let sigma = self.custom_sigma.ok_or_else(|| {
                Error::InvalidConfig(
                    "custom experiments need custom_sigma in the config file".into(),
                )
            })?;
            if !(d > 0.0) || sigma < 0.0 {
                return Err(Error::InvalidConfig(
                    "custom_d must be positive and custom_sigma nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    /// The coefficient set and source of this run, with gamma and ell applied.
    pub fn coefficients(&self) -> Result<(OpticalCoefficients, SourceField)> {
        let (mut coeffs, source) = match self.experiment {
            ExperimentId::One => experiment_coefficients(1)?,
            ExperimentId::Two => experiment_coefficients(2)?,
            ExperimentId::Custom => {
                let d = self.custom_d.expect("validated");
                let sigma = self.custom_sigma.expect("validated");
                (
                    OpticalCoefficients {
                        diffusion: Diffusion::Isotropic(ScalarField::constant(d)),
                        sigma_a: ScalarField::constant(sigma),
                        gamma: DEFAULT_GAMMA,
                        ell: DEFAULT_ELL,
                    },
                    SourceField {
                        field: shepp_logan_phantom(),
                        support: "10-ellipse head phantom inside the unit disk".into(),
                    },
                )
            }
        };
        coeffs.gamma = self.gamma;
        coeffs.ell = self.ell;
        Ok((coeffs, source))
    }

    pub fn partial_selection(&self) -> Option<BoundarySelection> {
        self.partial_gamma.as_ref().map(|sides| BoundarySelection::of_sides(sides))
    }
}

/// One stability-curve row.
#[derive(Clone, Debug)]
pub struct StabilityRow {
    pub sweep: &'static str,
    pub level: f64,
    pub e_s: f64,
}

/// Everything a finished run reports back to the caller.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub baseline_rel_err: f64,
    pub distribution: EnsembleReport,
    pub stability: Vec<StabilityRow>,
    pub wall_seconds: f64,
}

fn diff_l2(a: &NodeField, b: &NodeField) -> f64 {
    let values: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    NodeField::from_values(a.grid, values).norm(NormKind::L2)
}

/// Execute the whole experiment described by the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let (coeffs, source) = cfg.coefficients()?;
    let fine = Grid2D::unit_square(cfg.fine_n)?;
    let coarse = Grid2D::unit_square(cfg.coarse_n)?;
    let gamma_sel = cfg.partial_selection();

    // Hypothesis check: the forward operator must be weakly chained
    // diagonally dominant on both grids before anything is solved.
    let sampled_fine = sample_fields(&coeffs, &source, fine)?;
    let sampled_coarse = sample_fields(&coeffs, &source, coarse)?;
    for (name, grid, sampled) in
        [("fine", fine, &sampled_fine), ("coarse", coarse, &sampled_coarse)]
    {
        let cert = certify_wcdd(&assemble_forward_matrix(grid, sampled, cfg.ell)?.csr());
        if !cert.accepted {
            return Err(Error::Assembly(format!(
                "forward operator on the {name} grid failed the dominance certificate"
            )));
        }
    }
    println!("hypotheses: forward operator certified on {0}^2 and {1}^2", cfg.fine_n, cfg.coarse_n);

    // Truth pipeline on the fine grid, then restriction to the coarse grid
    // so the inversion never sees the synthesis discretization.
    let fwd = forward_solve(fine, &sampled_fine, cfg.ell)?;
    let ones_fine = NodeField::from_values(fine, vec![1.0; fine.n()]);
    let adj = adjoint_positive(fine, &sampled_fine, gamma_sel.as_ref(), &ones_fine, cfg.ell)?;
    let data = internal_data(fine, &sampled_fine, &fwd.phi, &adj.psi, cfg.gamma)?;
    let h_coarse = restrict_to_coarse(&data.h, coarse)?;
    let psi_coarse = restrict_to_coarse(&adj.psi, coarse)?;
    println!(
        "synthesis: forward and adjoint solved on {0}^2 (min psi = {1:.3e}), data restricted to {2}^2",
        cfg.fine_n, adj.min_psi, cfg.coarse_n
    );

    // Baseline reconstruction with the true coefficients and the restricted
    // adjoint: its error is pure two-grid discretization error.
    let baseline =
        reconstruct_source(coarse, &sampled_coarse, &psi_coarse, &h_coarse, cfg.gamma, cfg.ell)?;
    let norm_s = sampled_coarse.source.norm(NormKind::L2);
    let baseline_rel_err = diff_l2(&baseline.s_rec, &sampled_coarse.source) / norm_s;
    println!("baseline: relative L2 reconstruction error {baseline_rel_err:.4e}");

    // Ensembles share the seed, so sample i draws the same xi at every
    // sweep point and the stability curves are comparable across levels.
    let run_point = |e_d: f64, e_sigma: f64, bound_checks: usize| -> Result<EnsembleReport> {
        let params = EnsembleParams {
            samples: cfg.samples,
            e_d,
            e_sigma,
            k_freq: DEFAULT_K_FREQ,
            seed: cfg.seed,
            bound_checks,
            bound_grid_n: cfg.bound_grid_n,
        };
        run_ensemble(coarse, &coeffs, &source, &h_coarse, gamma_sel.as_ref(), &params)
    };

    let max_level = cfg.levels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (dist_e_d, dist_e_sigma) = match cfg.sweep {
        Sweep::Both | Sweep::Joint => (max_level, max_level),
        Sweep::DOnly => (max_level, 0.0),
        Sweep::SigmaOnly => (0.0, max_level),
    };
    let sweep_points: Vec<(&'static str, f64, f64)> = match cfg.sweep {
        Sweep::Both => cfg
            .levels
            .iter()
            .map(|&l| ("D", l, 0.0))
            .chain(cfg.levels.iter().map(|&l| ("sigma", 0.0, l)))
            .collect(),
        Sweep::DOnly => cfg.levels.iter().map(|&l| ("D", l, 0.0)).collect(),
        Sweep::SigmaOnly => cfg.levels.iter().map(|&l| ("sigma", 0.0, l)).collect(),
        Sweep::Joint => cfg.levels.iter().map(|&l| ("joint", l, l)).collect(),
    };

    let run_all = || -> Result<(EnsembleReport, Vec<StabilityRow>)> {
        let distribution = run_point(dist_e_d, dist_e_sigma, cfg.bound_checks)?;
        println!(
            "distribution ensemble: {0} samples at (e_D, e_sigma) = ({dist_e_d}, {dist_e_sigma}), \
             {1} failed, {2} redraws, E_S = {3:.4e}",
            cfg.samples, distribution.failed, distribution.rejected_draws, distribution.metrics.e_s
        );
        let mut stability = Vec::with_capacity(sweep_points.len());
        for &(label, e_d, e_sigma) in &sweep_points {
            let report = run_point(e_d, e_sigma, 0)?;
            let level = if label == "sigma" { e_sigma } else { e_d };
            println!("sweep {label} at level {level}: E_S = {0:.4e}", report.metrics.e_s);
            stability.push(StabilityRow { sweep: label, level, e_s: report.metrics.e_s });
        }
        Ok((distribution, stability))
    };
    let (distribution, stability) = match cfg.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| {
                Error::InvalidConfig(format!("cannot build a {jobs}-thread worker pool: {e}"))
            })?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    write_distribution_csv(&cfg.out_dir.join("distribution.csv"), &distribution)?;
    write_stability_csv(&cfg.out_dir.join("stability.csv"), &stability)?;
    write_bound_csv(&cfg.out_dir.join("bound.csv"), &distribution)?;
    write_field(&cfg.out_dir.join("mean_s.txt"), &distribution.mean_s)?;
    write_field(&cfg.out_dir.join("baseline_s.txt"), &baseline.s_rec)?;
    write_field(&cfg.out_dir.join("truth_s.txt"), &sampled_coarse.source)?;

    let wall_seconds = started.elapsed().as_secs_f64();
    let summary = RunSummary {
        out_dir: cfg.out_dir.clone(),
        baseline_rel_err,
        distribution,
        stability,
        wall_seconds,
    };
    write_manifest(&cfg.out_dir.join("manifest.txt"), cfg, &summary)?;
    println!("artifacts written to {}", cfg.out_dir.display());
    Ok(summary)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)?;
    Ok(())
}

fn write_distribution_csv(path: &Path, report: &EnsembleReport) -> Result<()> {
    let mut out = String::from("sample_id,xi,dD_H1,dSigma_L2,dS_L2,rejected\n");
    for s in &report.samples {
        if s.error.is_none() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.sample_id, s.xi, s.d_d_h1, s.d_sigma_l2, s.d_s_l2, s.rejected
            );
        } else {
            // Failed samples keep their row (ids stay dense) with NaN deltas.
            let _ = writeln!(out, "{},{},nan,nan,nan,{}", s.sample_id, s.xi, s.rejected);
        }
    }
    write_text(path, &out)
}

fn write_stability_csv(path: &Path, rows: &[StabilityRow]) -> Result<()> {
    let mut out = String::from("sweep,level,E_S\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.sweep, r.level, r.e_s);
    }
    write_text(path, &out)
}

fn write_bound_csv(path: &Path, report: &EnsembleReport) -> Result<()> {
    let mut out = String::from("sample_id,lhs,rhs,holds\n");
    for r in &report.bound_rows {
        let _ = writeln!(out, "{},{},{},{}", r.sample_id, r.lhs, r.rhs, r.holds);
    }
    write_text(path, &out)
}

/// Plain-text matrix dump: a header with the grid extent, then one line per
/// y-row (j = 1..=ny), each holding nx whitespace-separated node values.
fn write_field(path: &Path, field: &NodeField) -> Result<()> {
    let g = field.grid;
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {} {} {} {}", g.nx, g.ny, g.x_min, g.x_max, g.y_min, g.y_max);
    for j in 1..=g.ny {
        let mut line = String::new();
        for i in 1..=g.nx {
            if i > 1 {
                line.push(' ');
            }
            let _ = write!(line, "{}", field.get(i, j));
        }
        out.push_str(&line);
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_manifest(path: &Path, cfg: &ExperimentConfig, summary: &RunSummary) -> Result<()> {
    let timestamp =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let levels: Vec<String> = cfg.levels.iter().map(|l| l.to_string()).collect();
    let partial = match &cfg.partial_gamma {
        None => "full".to_string(),
        Some(sides) => sides.iter().map(|&s| side_label(s)).collect::<Vec<_>>().join(","),
    };
    let bound_all_hold = summary.distribution.bound_rows.iter().all(|r| r.holds);
    let mut out = String::new();
    let _ = writeln!(out, "# run manifest (timestamps live only in this file)");
    let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "created_unix = {timestamp}");
    let _ = writeln!(out, "wall_seconds = {:.3}", summary.wall_seconds);
    let _ = writeln!(out, "experiment = {}", cfg.experiment.label());
    if let (Some(d), Some(sigma)) = (cfg.custom_d, cfg.custom_sigma) {
        let _ = writeln!(out, "custom_d = {d}");
        let _ = writeln!(out, "custom_sigma = {sigma}");
    }
    let _ = writeln!(out, "fine_n = {} # h = {}", cfg.fine_n, 2.0 / (cfg.fine_n - 1) as f64);
    let _ = writeln!(out, "coarse_n = {} # h = {}", cfg.coarse_n, 2.0 / (cfg.coarse_n - 1) as f64);
    let _ = writeln!(out, "samples = {}", cfg.samples);
    let _ = writeln!(out, "levels = {}", levels.join(","));
    let _ = writeln!(out, "sweep = {}", cfg.sweep.label());
    let _ = writeln!(out, "gamma = {}", cfg.gamma);
    let _ = writeln!(out, "ell = {}", cfg.ell);
    let _ = writeln!(out, "partial_gamma = {partial}");
    let _ = writeln!(out, "seed = {}", cfg.seed);
    let _ = writeln!(out, "bound_checks = {}", cfg.bound_checks);
    let _ = writeln!(out, "bound_grid_n = {}", cfg.bound_grid_n);
    let _ = writeln!(out, "jobs = {}", cfg.jobs.map_or("auto".into(), |j| j.to_string()));
    let _ = writeln!(out, "baseline_rel_l2 = {}", summary.baseline_rel_err);
    let _ = writeln!(out, "distribution_e_d = {}", summary.distribution.metrics.e_d);
    let _ = writeln!(out, "distribution_e_sigma = {}", summary.distribution.metrics.e_sigma);
    let _ = writeln!(out, "distribution_e_s = {}", summary.distribution.metrics.e_s);
    let _ = writeln!(out, "distribution_failed = {}", summary.distribution.failed);
    let _ = writeln!(out, "distribution_rejected_draws = {}", summary.distribution.rejected_draws);
    let _ = writeln!(out, "mean_distance_l2 = {}", summary.distribution.mean_distance);
    let _ = writeln!(out, "median_distance_l2 = {}", summary.distribution.median_distance);
    let _ = writeln!(out, "bound_rows = {}", summary.distribution.bound_rows.len());
    let _ = writeln!(out, "bound_all_hold = {bound_all_hold}");
    let _ = writeln!(
        out,
        "artifacts = distribution.csv,stability.csv,bound.csv,mean_s.txt,baseline_s.txt,truth_s.txt"
    );
    write_text(path, &out)
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidGrid(_)
        | Error::NotNested(_)
        | Error::InvalidCoefficients(_) => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn execute(args: &CliArgs) -> Result<RunSummary> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| {
                Error::InvalidConfig(format!("cannot parse {}: {e}", path.display()))
            })?
        }
        None => FileConfig::default(),
    };
    let cfg = resolve_config(args, &file)?;
    run_experiment(&cfg)
}

/// Binary entry point: parse flags, run, map errors to exit codes
/// (2 config, 3 I/O, 1 any run failure).
pub fn run_cli() -> ExitCode {
    let args = CliArgs::parse();
    match execute(&args) {
        Ok(summary) => {
            println!(
                "done in {:.1}s: baseline error {:.3e}, E_S {:.3e}",
                summary.wall_seconds, summary.baseline_rel_err, summary.distribution.metrics.e_s
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
