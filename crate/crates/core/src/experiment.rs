//! Sweep driver: fine reference, coarse input, observation sets, seeded model
//! fits, evaluation on a test mesh and seed-aggregated trend tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{ensemble_predict_with, evaluate_run, sample_sg_reld, SgReldConfig};
use crate::coefficient::{Forcing, PermeabilityField, MULTISCALE_EPSILONS};
use crate::don::{init_params, Batch, DonArchitecture, FieldInputs};
use crate::elliptic::{solve_coarse_2d, solve_fine_1d, solve_fine_2d, EllipticProblem, SolverOptions};
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, relative_l2_error, write_lines, Grid, GridField};
use crate::homogenize::{
    effective_coefficient_1d, effective_coefficient_2d, solve_cell_problem_2d, solve_homogenized, EffectiveCoefficient,
};
use crate::patch::{build_observation_set, observation_grid, PatchSpec};
use crate::plot::emit_plot;
use crate::train::{train_from, TrainConfig};
use crate::trend::TrendTable;

pub const THREADS_ENV: &str = "DOWNSCALE_OP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    #[serde(rename = "elliptic-1d")]
    Elliptic1d,
    #[serde(rename = "elliptic-2d-fast")]
    Elliptic2dFast,
    #[serde(rename = "elliptic-2d-multiscale")]
    Elliptic2dMultiscale,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Elliptic1d => "elliptic-1d",
            Experiment::Elliptic2dFast => "elliptic-2d-fast",
            Experiment::Elliptic2dMultiscale => "elliptic-2d-multiscale",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Experiment::Elliptic1d => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    PatchSize,
    NObservations,
    NoisyBayes,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::PatchSize => "patch-size",
            Sweep::NObservations => "n-observations",
            Sweep::NoisyBayes => "noisy-bayes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Don,
    NoisyDon,
    BDon,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Don => "DON",
            Method::NoisyDon => "noisy-DON",
            Method::BDon => "B-DON",
        }
    }
}

/// Flat key/value experiment description. Unset keys take per-experiment
/// defaults; [`ExperimentConfig::canonical`] fills every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_sweep")]
    pub sweep: Sweep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_observations: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_interval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_correction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn default_sweep() -> Sweep {
    Sweep::PatchSize
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, sweep: Sweep) -> Self {
        ExperimentConfig {
            experiment,
            sweep,
            epsilon: None,
            epsilons: None,
            kappa_offset: None,
            forcing: None,
            fine_n: None,
            coarse_n: None,
            cell_n: None,
            eval_n: None,
            patch_sizes: None,
            patch_spacing: None,
            n_observations: None,
            seeds: None,
            root_seed: None,
            width: None,
            epochs: None,
            learning_rate: None,
            adam_beta1: None,
            adam_beta2: None,
            adam_eps: None,
            noise_sigma: None,
            tau_low: None,
            tau_high: None,
            step_size: None,
            swap_interval: None,
            swap_correction: None,
            burn_in: None,
            thin: None,
            ensemble_size: None,
            prior_tau: None,
            warm_start: None,
            normalize: None,
            out_dir: None,
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.settings()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key filled with its effective value.
    pub fn canonical(&self) -> Result<Self> {
        let s = self.settings()?;
        let t = &s.train;
        let b = &s.sampler;
        Ok(ExperimentConfig {
            experiment: self.experiment,
            sweep: self.sweep,
            epsilon: Some(s.epsilon),
            epsilons: Some(s.epsilons.to_vec()),
            kappa_offset: Some(s.kappa_offset),
            forcing: Some(s.forcing),
            fine_n: Some(s.fine_n),
            coarse_n: Some(s.coarse_n),
            cell_n: Some(s.cell_n),
            eval_n: Some(s.eval_n),
            patch_sizes: Some(s.patch_sizes.clone()),
            patch_spacing: Some(s.patch_spacing),
            n_observations: Some(s.n_observations.clone()),
            seeds: Some(s.seeds),
            root_seed: Some(s.root_seed),
            width: Some(s.width),
            epochs: Some(t.epochs),
            learning_rate: Some(t.learning_rate),
            adam_beta1: Some(t.adam_beta1),
            adam_beta2: Some(t.adam_beta2),
            adam_eps: Some(t.adam_eps),
            noise_sigma: Some(s.noise_sigma),
            tau_low: Some(b.tau_low),
            tau_high: Some(b.tau_high),
            step_size: Some(b.step_size),
            swap_interval: Some(b.swap_interval),
            swap_correction: Some(b.swap_correction),
            burn_in: Some(b.burn_in),
            thin: Some(b.thin),
            ensemble_size: Some(b.ensemble_size),
            prior_tau: Some(b.prior_tau),
            warm_start: Some(s.warm_start),
            normalize: Some(s.normalize),
            out_dir: Some(s.out_dir.to_string_lossy().into_owned()),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolves defaults and validates.
    pub fn settings(&self) -> Result<Settings> {
        let e = self.experiment;
        let two_d = e.dim() == 2;
        let default_eps = match e {
            Experiment::Elliptic1d => 1.0 / 16.0,
            Experiment::Elliptic2dFast => 1.0 / 8.0,
            Experiment::Elliptic2dMultiscale => 0.0,
        };
        let epsilons: [f64; 8] = match &self.epsilons {
            Some(v) => v
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config("epsilons needs exactly 8 entries".into()))?,
            None => MULTISCALE_EPSILONS,
        };
        let coarse_n = self.coarse_n.unwrap_or(match e {
            Experiment::Elliptic1d => 256,
            Experiment::Elliptic2dFast => 64,
            Experiment::Elliptic2dMultiscale => 16,
        });
        let default_patches = match self.sweep {
            Sweep::PatchSize if two_d => vec![1, 3, 5, 9],
            Sweep::PatchSize => vec![1, 3, 5, 7, 9],
            _ => vec![1],
        };
        let default_obs = match (self.sweep, e) {
            (Sweep::PatchSize, Experiment::Elliptic1d) => vec![16],
            (Sweep::PatchSize, _) => vec![25],
            (_, Experiment::Elliptic1d) => vec![8, 16, 32],
            _ => vec![9, 25, 49],
        };
        let defaults = SgReldConfig::default();
        let train_defaults = TrainConfig::default();
        let s = Settings {
            experiment: e,
            sweep: self.sweep,
            epsilon: self.epsilon.unwrap_or(default_eps),
            epsilons,
            kappa_offset: self.kappa_offset.unwrap_or(2.0),
            forcing: self.forcing.unwrap_or(if two_d { 1.0 } else { 0.5 }),
            fine_n: self.fine_n.unwrap_or(if two_d { 512 } else { 4096 }),
            coarse_n,
            cell_n: self.cell_n.unwrap_or(128),
            eval_n: self.eval_n.unwrap_or(if two_d { 100 } else { 1024 }),
            patch_sizes: self.patch_sizes.clone().unwrap_or(default_patches),
            // a quarter of the coarse mesh spacing
            patch_spacing: self.patch_spacing.unwrap_or(0.25 / coarse_n as f64),
            n_observations: self.n_observations.clone().unwrap_or(default_obs),
            seeds: self.seeds.unwrap_or(20),
            root_seed: self.root_seed.unwrap_or(0),
            width: self.width.unwrap_or(64),
            train: TrainConfig {
                epochs: self.epochs.unwrap_or(train_defaults.epochs),
                learning_rate: self.learning_rate.unwrap_or(train_defaults.learning_rate),
                adam_beta1: self.adam_beta1.unwrap_or(train_defaults.adam_beta1),
                adam_beta2: self.adam_beta2.unwrap_or(train_defaults.adam_beta2),
                adam_eps: self.adam_eps.unwrap_or(train_defaults.adam_eps),
                seed: 0,
            },
            noise_sigma: self.noise_sigma.unwrap_or(if self.sweep == Sweep::NoisyBayes { 0.005 } else { 0.0 }),
            sampler: SgReldConfig {
                tau_low: self.tau_low.unwrap_or(defaults.tau_low),
                tau_high: self.tau_high.unwrap_or(defaults.tau_high),
                step_size: self.step_size.unwrap_or(DEFAULT_STEP_SIZE),
                swap_interval: self.swap_interval.unwrap_or(defaults.swap_interval),
                swap_correction: self.swap_correction.unwrap_or(defaults.swap_correction),
                burn_in: self.burn_in.unwrap_or(defaults.burn_in),
                thin: self.thin.unwrap_or(defaults.thin),
                ensemble_size: self.ensemble_size.unwrap_or(defaults.ensemble_size),
                sigma: 1.0,
                prior_tau: self.prior_tau.unwrap_or(defaults.prior_tau),
                seed: 0,
            },
            warm_start: self.warm_start.unwrap_or(false),
            normalize: self.normalize.unwrap_or(!two_d || self.sweep == Sweep::NoisyBayes),
            out_dir: PathBuf::from(self.out_dir.clone().unwrap_or_else(|| format!("out/{}-{}", e.name(), self.sweep.name()))),
        };
        s.validate()?;
        Ok(s)
    }
}

/// Langevin step for experiment runs; 1e-4 diverges on 49 normalized observations.
pub const DEFAULT_STEP_SIZE: f64 = 5e-5;

/// Fully resolved experiment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: Experiment,
    pub sweep: Sweep,
    pub epsilon: f64,
    pub epsilons: [f64; 8],
    pub kappa_offset: f64,
    pub forcing: f64,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub cell_n: usize,
    pub eval_n: usize,
    pub patch_sizes: Vec<usize>,
    pub patch_spacing: f64,
    pub n_observations: Vec<usize>,
    pub seeds: usize,
    pub root_seed: u64,
    pub width: usize,
    pub train: TrainConfig,
    pub noise_sigma: f64,
    pub sampler: SgReldConfig,
    pub warm_start: bool,
    pub normalize: bool,
    pub out_dir: PathBuf,
}

impl Settings {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment != Experiment::Elliptic2dMultiscale && !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("every multiscale epsilon must be positive".into());
        }
        if self.patch_sizes.is_empty() || self.n_observations.is_empty() {
            return bad("patch_sizes and n_observations must be non-empty".into());
        }
        if let Some(p) = self.patch_sizes.iter().find(|p| **p % 2 == 0) {
            return bad(format!("patch size {p} is even; patches must be centred"));
        }
        if !(self.patch_spacing > 0.0) {
            return bad("patch_spacing must be positive".into());
        }
        for &n in &self.n_observations {
            if n == 0 {
                return bad("observation counts must be positive".into());
            }
            if self.experiment.dim() == 2 && per_axis(n).is_none() {
                return bad(format!("2D observation count {n} is not a perfect square"));
            }
        }
        if self.seeds == 0 || self.width == 0 {
            return bad("seeds and width must be at least 1".into());
        }
        if self.fine_n < 2 || self.coarse_n < 2 || self.eval_n < 1 || self.cell_n < 8 {
            return bad("grid sizes too small".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if self.sweep == Sweep::NoisyBayes && self.noise_sigma == 0.0 {
            return bad("noisy-bayes sweep needs noise_sigma > 0".into());
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut sampler = self.sampler;
        sampler.sigma = self.noise_sigma.max(1e-300);
        sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn sweep_values(&self) -> &[usize] {
        match self.sweep {
            Sweep::PatchSize => &self.patch_sizes,
            _ => &self.n_observations,
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        match self.sweep {
            Sweep::NoisyBayes => vec![Method::Don, Method::NoisyDon, Method::BDon],
            _ => vec![Method::Don],
        }
    }

    pub fn x_label(&self) -> &'static str {
        match self.sweep {
            Sweep::PatchSize => "patch size (points per axis)",
            _ => "number of observations",
        }
    }
}

fn per_axis(count: usize) -> Option<usize> {
    let r = (count as f64).sqrt().round() as usize;
    (r * r == count).then_some(r)
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared inputs of every run in an experiment.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub fine: GridField,
    pub reference: GridField,
    pub coarse: GridField,
    pub eval_grid: Grid,
    pub baseline_error: f64,
    pub a_star: Option<EffectiveCoefficient>,
}

impl ProblemSetup {
    /// `max |coarse|` when normalizing (1 otherwise); network inputs and labels are divided by it.
    pub fn data_scale(&self, normalize: bool) -> f64 {
        let m = self.coarse.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if normalize && m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

fn stage<T>(name: &'static str, sweep_value: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        sweep_value,
        source: Box::new(e),
    })
}

pub fn permeability(s: &Settings) -> Result<PermeabilityField> {
    match s.experiment {
        Experiment::Elliptic1d => PermeabilityField::sinusoid_1d(0.8, 0.5, s.epsilon),
        Experiment::Elliptic2dFast => PermeabilityField::checkerboard_2d(2.0, 1.0, s.epsilon),
        Experiment::Elliptic2dMultiscale => PermeabilityField::multiscale_2d(s.kappa_offset, s.epsilons),
    }
}

/// Fine reference, coarse input and the coarse baseline error on the test mesh.
pub fn build_setup(s: &Settings) -> Result<ProblemSetup> {
    let v0 = s.sweep_values()[0];
    let dim = s.experiment.dim();
    let kappa = stage("permeability", v0, permeability(s))?;
    let forcing = Forcing::constant(s.forcing);
    let fine_grid = stage("fine-reference", v0, Grid::unit(dim, s.fine_n))?;
    let problem = stage("fine-reference", v0, EllipticProblem::new(kappa.clone(), forcing.clone(), fine_grid.clone()))?;
    let fine = stage(
        "fine-reference",
        v0,
        if dim == 1 {
            solve_fine_1d(&problem)
        } else {
            let o = SolverOptions::for_grid(&fine_grid);
            solve_fine_2d(&problem, o.tol, o.max_iter)
        },
    )?;
    let coarse_grid = stage("coarse-solution", v0, Grid::unit(dim, s.coarse_n))?;
    let (coarse, a_star) = stage(
        "coarse-solution",
        v0,
        (|| match s.experiment {
            Experiment::Elliptic1d => {
                let a = effective_coefficient_1d(&kappa, 4096)?;
                Ok((solve_homogenized(&a, &forcing, &coarse_grid)?, Some(a)))
            }
            Experiment::Elliptic2dFast => {
                let chi = solve_cell_problem_2d(&kappa, s.cell_n, 1e-10)?;
                let a = effective_coefficient_2d(&kappa, &chi)?;
                Ok((solve_homogenized(&a, &forcing, &coarse_grid)?, Some(a)))
            }
            Experiment::Elliptic2dMultiscale => Ok((solve_coarse_2d(&problem, s.coarse_n)?, None)),
        })(),
    )?;
    let eval_grid = stage("evaluation", v0, Grid::unit(dim, s.eval_n))?;
    let reference = stage("evaluation", v0, fine.restrict(&eval_grid))?;
    let baseline_error = stage("evaluation", v0, relative_l2_error(&coarse.restrict(&eval_grid)?, &reference))?;
    Ok(ProblemSetup {
        fine,
        reference,
        coarse,
        eval_grid,
        baseline_error,
        a_star,
    })
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub sweep_value: usize,
    pub seed: u64,
    pub patch_p: usize,
    pub n_obs: usize,
    pub noise_sigma: f64,
    pub method: Method,
    pub rel_l2_error: f64,
    pub max_abs_error: f64,
    pub wall_seconds: f64,
}

/// Per-run ensemble diagnostics of the Bayesian fits.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub sweep_value: usize,
    pub seed: u64,
    pub members: usize,
    pub min_variance: f64,
    pub mean_variance: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub settings: Settings,
    pub table: TrendTable,
    pub runs: Vec<RunRecord>,
    pub ensembles: Vec<EnsembleSummary>,
    pub baseline_error: f64,
}

impl ExperimentOutcome {
    /// Errors of one method at one sweep value, in seed order.
    pub fn errors(&self, method: Method, sweep_value: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.method == method && r.sweep_value == sweep_value)
            .map(|r| r.rel_l2_error)
            .collect()
    }
}

struct JobOutput {
    records: Vec<RunRecord>,
    ensemble: Option<EnsembleSummary>,
}

fn run_job(s: &Settings, setup: &ProblemSetup, value: usize, k: usize) -> Result<JobOutput> {
    let seed = s.root_seed + k as u64;
    let (p, n_obs) = match s.sweep {
        Sweep::PatchSize => (value, s.n_observations[0]),
        _ => (s.patch_sizes[0], value),
    };
    let dim = s.experiment.dim();
    let spec = stage("observations", value, if p == 1 { Ok(PatchSpec::vanilla()) } else { PatchSpec::new(p, s.patch_spacing) })?;
    let per = if dim == 1 { n_obs } else { per_axis(n_obs).unwrap() };
    let locations = stage("observations", value, observation_grid(setup.fine.grid(), per))?.points();
    let noisy = stage(
        "observations",
        value,
        build_observation_set(&setup.coarse, &setup.fine, &locations, &spec, s.noise_sigma, derive_seed(seed, 2)),
    )?;
    let scale = setup.data_scale(s.normalize);
    let noisy = noisy.scaled(1.0 / scale);
    let arch = stage("training", value, DonArchitecture::standard(spec.sensors(dim), dim, s.width))?;
    let inputs = stage(
        "evaluation",
        value,
        FieldInputs::new(&setup.coarse.scaled(1.0 / scale), &spec, &setup.eval_grid),
    )?;
    let train = TrainConfig {
        seed: derive_seed(seed, 1),
        ..s.train
    };
    let record = |method: Method, err: crate::bayes::RunMetrics, t: Instant| RunRecord {
        experiment: s.experiment,
        sweep_value: value,
        seed,
        patch_p: p,
        n_obs,
        noise_sigma: if method == Method::Don { 0.0 } else { s.noise_sigma },
        method,
        rel_l2_error: err.rel_l2_error,
        max_abs_error: err.max_abs_error,
        wall_seconds: t.elapsed().as_secs_f64(),
    };
    let fit = |labels_clean: bool| -> Result<crate::don::DonParams> {
        let set = if labels_clean { noisy.with_clean_labels() } else { noisy.clone() };
        let batch = Batch::from_observations(&set);
        let mut params = init_params(&arch, train.seed);
        train_from(&mut params, &arch, &batch, &train)?;
        Ok(params)
    };
    let evaluate = |params: &crate::don::DonParams| -> Result<crate::bayes::RunMetrics> {
        evaluate_run(&inputs.predict(params, &arch)?.scaled(scale), &setup.reference)
    };

    let mut records = Vec::new();
    let t = Instant::now();
    let clean = stage("training", value, fit(true))?;
    records.push(record(Method::Don, stage("evaluation", value, evaluate(&clean))?, t));
    if s.sweep != Sweep::NoisyBayes {
        return Ok(JobOutput { records, ensemble: None });
    }

    let t = Instant::now();
    let single = stage("training", value, fit(false))?;
    records.push(record(Method::NoisyDon, stage("evaluation", value, evaluate(&single))?, t));

    let t = Instant::now();
    let cfg = SgReldConfig {
        sigma: s.noise_sigma / scale,
        seed: derive_seed(seed, 3),
        ..s.sampler
    };
    let samples = stage("sampling", value, sample_sg_reld(&arch, &noisy, &cfg, s.warm_start.then_some(&single)))?;
    let stats = stage("evaluation", value, ensemble_predict_with(&samples, &arch, &inputs))?.scaled(scale);
    let metrics = stage("evaluation", value, evaluate_run(&stats.mean, &setup.reference))?;
    records.push(record(Method::BDon, metrics, t));
    let var = stats.variance.values();
    let ensemble = EnsembleSummary {
        sweep_value: value,
        seed,
        members: stats.members,
        min_variance: var.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_variance: var.iter().sum::<f64>() / var.len() as f64,
    };
    if k == 0 {
        let dir = s.out_dir.join(format!("ensemble_n{value}"));
        stage("output", value, std::fs::create_dir_all(&dir).map_err(Error::from))?;
        stage("output", value, stats.write_csv(&dir))?;
    }
    Ok(JobOutput {
        records,
        ensemble: Some(ensemble),
    })
}

/// Thread count: the environment override, then the request, then 1.
pub fn resolve_threads(requested: Option<usize>) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .or(requested)
        .unwrap_or(1)
        .max(1)
}

/// Runs every (sweep value, seed) job on a pool of `threads` workers and
/// aggregates in job order, so results do not depend on scheduling.
pub fn run_experiment_with(s: &Settings, setup: &ProblemSetup, threads: usize) -> Result<ExperimentOutcome> {
    let jobs: Vec<(usize, usize)> = s
        .sweep_values()
        .iter()
        .flat_map(|&v| (0..s.seeds).map(move |k| (v, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let outputs: Vec<Result<JobOutput>> = pool.install(|| jobs.par_iter().map(|&(v, k)| run_job(s, setup, v, k)).collect());
    let mut runs = Vec::new();
    let mut ensembles = Vec::new();
    for out in outputs {
        let out = out?;
        runs.extend(out.records);
        ensembles.extend(out.ensemble);
    }
    let samples: Vec<(usize, String, f64)> = runs
        .iter()
        .map(|r| (r.sweep_value, r.method.name().to_string(), r.rel_l2_error))
        .collect();
    let table = TrendTable::from_samples(&samples)?;
    Ok(ExperimentOutcome {
        settings: s.clone(),
        table,
        runs,
        ensembles,
        baseline_error: setup.baseline_error,
    })
}

/// Full pipeline including output files in `settings.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutcome> {
    let s = cfg.settings()?;
    let v0 = s.sweep_values()[0];
    stage("output", v0, std::fs::create_dir_all(&s.out_dir).map_err(Error::from))?;
    let setup = build_setup(&s)?;
    log::info!(
        "{} / {}: baseline relative L2 error {:.4e}",
        s.experiment.name(),
        s.sweep.name(),
        setup.baseline_error
    );
    let outcome = run_experiment_with(&s, &setup, threads)?;
    stage("output", v0, write_outputs(cfg, &outcome))?;
    Ok(outcome)
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("experiment,seed,patch_p,n_obs,noise_sigma,method,rel_l2_error,max_abs_error,wall_seconds\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.experiment.name(),
            r.seed,
            r.patch_p,
            r.n_obs,
            fmt_f64(r.noise_sigma),
            r.method.name(),
            fmt_f64(r.rel_l2_error),
            fmt_f64(r.max_abs_error),
            r.wall_seconds
        )
        .unwrap();
    }
    s
}

/// Writes `trend.csv`, `trend.svg`, `runs.csv`, `summary.csv` and the canonical `config.toml`.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    let dir = &outcome.settings.out_dir;
    outcome.table.write_csv(dir.join("trend.csv"))?;
    emit_plot(&outcome.table, dir.join("trend.svg"), outcome.settings.x_label())?;
    write_lines(dir.join("runs.csv"), &runs_csv(&outcome.runs))?;
    write_lines(dir.join("config.toml"), &cfg.canonical()?.to_toml_string()?)?;
    let mut summary = String::from("quantity,value\n");
    writeln!(summary, "baseline_rel_l2,{}", fmt_f64(outcome.baseline_error)).unwrap();
    for e in &outcome.ensembles {
        writeln!(
            summary,
            "ensemble_n{}_seed{}_members,{}\nensemble_n{}_seed{}_min_variance,{}\nensemble_n{}_seed{}_mean_variance,{}",
            e.sweep_value,
            e.seed,
            e.members,
            e.sweep_value,
            e.seed,
            fmt_f64(e.min_variance),
            e.sweep_value,
            e.seed,
            fmt_f64(e.mean_variance)
        )
        .unwrap();
    }
    write_lines(dir.join("summary.csv"), &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = ExperimentConfig::new(Experiment::Elliptic2dFast, Sweep::NObservations);
        cfg.seeds = Some(3);
        cfg.learning_rate = Some(5e-4);
        let c1 = cfg.canonical().unwrap();
        let text = c1.to_toml_string().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c1);
        assert_eq!(back.canonical().unwrap().to_toml_string().unwrap(), text);
    }

    #[test]
    fn parse_flat_toml_and_json() {
        let t = "experiment = \"elliptic-1d\"\nsweep = \"patch-size\"\nseeds = 4\npatch_sizes = [1, 3]\n";
        let c = ExperimentConfig::parse(t).unwrap();
        let s = c.settings().unwrap();
        assert_eq!(s.seeds, 4);
        assert_eq!(s.sweep_values(), &[1, 3]);
        assert_eq!(s.epsilon, 1.0 / 16.0);
        let j = r#"{"experiment": "elliptic-2d-multiscale", "sweep": "patch-size", "seeds": 2}"#;
        let c = ExperimentConfig::parse(j).unwrap();
        assert_eq!(c.settings().unwrap().coarse_n, 16);
    }

    #[test]
    fn invalid_configs() {
        for t in [
            "experiment = \"elliptic-1d\"\nsweep = \"patch-size\"\npatch_sizes = [2]\n",
            "experiment = \"elliptic-1d\"\nsweep = \"patch-size\"\nepsilon = -1.0\n",
            "experiment = \"elliptic-2d-fast\"\nsweep = \"n-observations\"\nn_observations = [10]\n",
            "experiment = \"elliptic-1d\"\nsweep = \"patch-size\"\nbogus = 1\n",
            "experiment = \"elliptic-3d\"\nsweep = \"patch-size\"\n",
            "experiment = \"elliptic-1d\"\nsweep = \"noisy-bayes\"\nnoise_sigma = 0.0\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(t), Err(Error::Config(_))), "{t}");
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let a: Vec<u64> = (0..4).flat_map(|k| (1..4).map(move |s| derive_seed(k, s))).collect();
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
    }

    #[test]
    fn thread_override() {
        assert_eq!(per_axis(49), Some(7));
        assert_eq!(per_axis(50), None);
        if std::env::var(THREADS_ENV).is_err() {
            assert_eq!(resolve_threads(Some(3)), 3);
            assert_eq!(resolve_threads(None), 1);
        }
    }
}
