use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use downscale_core::bayes::{ensemble_predict_with, evaluate_run, sample_sg_reld, SgReldConfig};
use downscale_core::don::{write_params, DonArchitecture, DonParams, FieldInputs};
use downscale_core::experiment::{
    build_setup, derive_seed, permeability, resolve_threads, run_experiment, ExperimentConfig, Experiment, ProblemSetup, Settings,
};
use downscale_core::homogenize::{
    effective_coefficient_1d, effective_coefficient_2d, solve_cell_problem_1d, solve_cell_problem_2d, EffectiveCoefficient,
};
use downscale_core::patch::{build_observation_set, observation_grid, ObservationSet, PatchSpec};
use downscale_core::plot::emit_plot;
use downscale_core::train::{train_don, TrainConfig};
use downscale_core::trend::TrendTable;
use downscale_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "downscale-op", version, about = "Learn coarse-to-fine downscaling operators for multiscale elliptic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (flat TOML, or JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `root_seed` in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (the DOWNSCALE_OP_THREADS variable takes precedence)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use 100 seeds per sweep value
    #[arg(long, global = true)]
    full: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine reference and coarse solution on their grids
    Solve,
    /// Cell problems and the effective coefficient
    Cell,
    /// Observation triplets for the first patch size and observation count
    Dataset,
    /// Train one DON and evaluate it on the test mesh
    Train,
    /// Sample a B-DON ensemble from noisy observations
    Bayes,
    /// Run the configured sweep and write trend.csv, trend.svg and runs.csv
    Experiment,
    /// Render a trend table as SVG
    Plot {
        /// Trend CSV (defaults to <out-dir>/trend.csv)
        #[arg(long)]
        input: Option<PathBuf>,
        /// SVG path (defaults to the input with an .svg extension)
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "sweep value")]
        x_label: String,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Settings)> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = common.seed {
        cfg.root_seed = Some(seed);
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = Some(dir.to_string_lossy().into_owned());
    }
    if common.full {
        cfg.seeds = Some(100);
    }
    let settings = cfg.settings()?;
    std::fs::create_dir_all(&settings.out_dir)?;
    Ok((cfg, settings))
}

fn print_tensor(a: &EffectiveCoefficient) {
    println!("a_star:");
    for i in 0..a.dim {
        let row: Vec<String> = (0..a.dim).map(|j| format!("{:.10}", a.a_star[i][j])).collect();
        println!("  {}", row.join("  "));
    }
    let eig: Vec<String> = a.eigenvalues().iter().map(|v| format!("{v:.10}")).collect();
    println!("eigenvalues: {}", eig.join(" "));
}

fn first_dataset(s: &Settings, setup: &ProblemSetup, noise_sigma: f64) -> Result<ObservationSet> {
    let dim = s.experiment.dim();
    let p = s.patch_sizes[0];
    let spec = if p == 1 { PatchSpec::vanilla() } else { PatchSpec::new(p, s.patch_spacing)? };
    let n = s.n_observations[0];
    let per = if dim == 1 { n } else { (n as f64).sqrt().round() as usize };
    let locations = observation_grid(setup.fine.grid(), per)?.points();
    build_observation_set(&setup.coarse, &setup.fine, &locations, &spec, noise_sigma, derive_seed(s.root_seed, 2))
}

/// Observation set and test-mesh inputs in training units, plus the factor back to solution units.
fn training_data(s: &Settings, setup: &ProblemSetup, set: ObservationSet) -> Result<(ObservationSet, FieldInputs, f64)> {
    let scale = setup.data_scale(s.normalize);
    let inputs = FieldInputs::new(&setup.coarse.scaled(1.0 / scale), &set.spec, &setup.eval_grid)?;
    Ok((set.scaled(1.0 / scale), inputs, scale))
}

fn train_one(s: &Settings, set: &ObservationSet) -> Result<(DonArchitecture, DonParams, Vec<f64>)> {
    let arch = DonArchitecture::standard(set.branch_width(), set.dim(), s.width)?;
    let cfg = TrainConfig {
        seed: derive_seed(s.root_seed, 1),
        ..s.train
    };
    let (params, history) = train_don(&arch, set, &cfg)?;
    Ok((arch, params, history))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Solve => {
            let (_, s) = load(common)?;
            let setup = build_setup(&s)?;
            setup.fine.write_csv(s.out_dir.join("fine.csv"))?;
            setup.coarse.write_csv(s.out_dir.join("coarse.csv"))?;
            setup.reference.write_csv(s.out_dir.join("reference_eval.csv"))?;
            if let Some(a) = &setup.a_star {
                print_tensor(a);
            }
            println!("coarse relative L2 error on the test mesh: {:.6e}", setup.baseline_error);
            println!("wrote fine.csv, coarse.csv, reference_eval.csv to {}", s.out_dir.display());
        }
        Command::Cell => {
            let (_, s) = load(common)?;
            let kappa = permeability(&s)?;
            let a = match s.experiment {
                Experiment::Elliptic1d => {
                    solve_cell_problem_1d(&kappa, s.cell_n)?.write_csv(&s.out_dir)?;
                    effective_coefficient_1d(&kappa, 4096)?
                }
                Experiment::Elliptic2dFast => {
                    let chi = solve_cell_problem_2d(&kappa, s.cell_n, 1e-10)?;
                    chi.write_csv(&s.out_dir)?;
                    effective_coefficient_2d(&kappa, &chi)?
                }
                Experiment::Elliptic2dMultiscale => {
                    return Err(Error::Invalid("the multiscale coefficient has no single period cell".into()))
                }
            };
            a.write_csv(s.out_dir.join("a_star.csv"))?;
            print_tensor(&a);
        }
        Command::Dataset => {
            let (_, s) = load(common)?;
            let setup = build_setup(&s)?;
            let set = first_dataset(&s, &setup, s.noise_sigma)?;
            let path = s.out_dir.join("observations.csv");
            set.write_csv(&path)?;
            println!("{} observations ({} sensors each) written to {}", set.len(), set.branch_width(), path.display());
        }
        Command::Train => {
            let (_, s) = load(common)?;
            let setup = build_setup(&s)?;
            let (set, inputs, scale) = training_data(&s, &setup, first_dataset(&s, &setup, s.noise_sigma)?)?;
            let (arch, params, history) = train_one(&s, &set)?;
            write_params(&params, &arch, s.out_dir.join("params.csv"))?;
            let pred = inputs.predict(&params, &arch)?.scaled(scale);
            pred.write_csv(s.out_dir.join("prediction.csv"))?;
            let m = evaluate_run(&pred, &setup.reference)?;
            println!("final training loss: {:.6e}", history.last().copied().unwrap_or(f64::NAN));
            println!("coarse baseline relative L2 error: {:.6e}", setup.baseline_error);
            println!("DON relative L2 error: {:.6e} (max abs {:.3e})", m.rel_l2_error, m.max_abs_error);
        }
        Command::Bayes => {
            let (_, s) = load(common)?;
            let sigma = if s.noise_sigma > 0.0 { s.noise_sigma } else { 0.005 };
            let setup = build_setup(&s)?;
            let (set, inputs, scale) = training_data(&s, &setup, first_dataset(&s, &setup, sigma)?)?;
            let (arch, single, _) = train_one(&s, &set)?;
            let cfg = SgReldConfig {
                sigma: sigma / scale,
                seed: derive_seed(s.root_seed, 3),
                ..s.sampler
            };
            let samples = sample_sg_reld(&arch, &set, &cfg, s.warm_start.then_some(&single))?;
            let stats = ensemble_predict_with(&samples, &arch, &inputs)?.scaled(scale);
            stats.write_csv(&s.out_dir)?;
            let single_err = evaluate_run(&inputs.predict(&single, &arch)?.scaled(scale), &setup.reference)?;
            let ens_err = evaluate_run(&stats.mean, &setup.reference)?;
            let max_var = stats.variance.values().iter().cloned().fold(0.0, f64::max);
            println!("noisy-DON relative L2 error: {:.6e}", single_err.rel_l2_error);
            println!("B-DON ensemble-mean relative L2 error: {:.6e} ({} members, max variance {:.3e})", ens_err.rel_l2_error, stats.members, max_var);
        }
        Command::Experiment => {
            let (cfg, s) = load(common)?;
            let threads = resolve_threads(common.threads);
            let outcome = run_experiment(&cfg, threads)?;
            println!("{} / {}: coarse baseline relative L2 error {:.6e}", s.experiment.name(), s.sweep.name(), outcome.baseline_error);
            print!("{}", outcome.table.to_csv_string());
            println!("wrote trend.csv, trend.svg, runs.csv to {}", s.out_dir.display());
        }
        Command::Plot { input, output, x_label } => {
            let input = match (input, &common.out_dir) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => d.join("trend.csv"),
                (None, None) => return Err(Error::Config("plot needs --input or --out-dir".into())),
            };
            if !input.exists() {
                return Err(Error::Config(format!("trend table not found: {}", input.display())));
            }
            let table = TrendTable::read_csv(&input)?;
            let output = output.clone().unwrap_or_else(|| input.with_extension("svg"));
            emit_plot(&table, &output, x_label)?;
            println!("wrote {}", Path::new(&output).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
