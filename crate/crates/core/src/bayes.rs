//! Bayesian DON: Gaussian likelihood with a Gaussian prior, two-temperature
//! replica-exchange Langevin sampling and ensemble statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::don::{init_params, weighted_output_gradient, Batch, DonArchitecture, DonParams, FieldInputs};
use crate::error::{Error, Result};
use crate::grid::{max_abs_error, relative_l2_error, Grid, GridField};
use crate::patch::{ObservationSet, PatchSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgReldConfig {
    pub tau_low: f64,
    pub tau_high: f64,
    pub step_size: f64,
    pub swap_interval: usize,
    pub swap_correction: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub ensemble_size: usize,
    pub sigma: f64,
    pub prior_tau: f64,
    pub seed: u64,
}

impl Default for SgReldConfig {
    fn default() -> Self {
        SgReldConfig {
            tau_low: 1e-5,
            tau_high: 1e-2,
            step_size: 1e-4,
            swap_interval: 50,
            swap_correction: 0.0,
            burn_in: 2000,
            thin: 20,
            ensemble_size: 100,
            sigma: 0.005,
            prior_tau: 10.0,
            seed: 0,
        }
    }
}

impl SgReldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low > 0.0 && self.tau_low <= self.tau_high && self.tau_high.is_finite()) {
            return Err(Error::invalid("temperatures must satisfy 0 < tau_low <= tau_high"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step size must be non-negative"));
        }
        if self.swap_interval == 0 || self.thin == 0 || self.ensemble_size == 0 {
            return Err(Error::invalid("swap_interval, thin and ensemble_size must be at least 1"));
        }
        if !(self.swap_correction >= 0.0) {
            return Err(Error::invalid("swap correction must be non-negative"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("likelihood sigma must be positive"));
        }
        if !(self.prior_tau > 0.0) {
            return Err(Error::invalid("prior_tau must be positive"));
        }
        Ok(())
    }

    /// Number of Langevin steps needed to collect the ensemble.
    pub fn total_steps(&self) -> usize {
        self.burn_in + self.ensemble_size * self.thin
    }
}

/// An energy `U(θ)` with its gradient.
pub trait Potential {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `Σ_j (G_θ(û_j)(x_j) − u_j)² / (2σ²) + ‖θ‖² / (2 prior_tau²)`.
#[derive(Debug, Clone)]
pub struct DonPosterior {
    pub arch: DonArchitecture,
    pub batch: Batch,
    pub sigma: f64,
    pub prior_tau: f64,
}

impl DonPosterior {
    pub fn new(arch: DonArchitecture, dataset: &ObservationSet, sigma: f64, prior_tau: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("likelihood sigma must be positive"));
        }
        Ok(DonPosterior {
            arch,
            batch: Batch::from_observations(dataset),
            sigma,
            prior_tau,
        })
    }
}

impl Potential for DonPosterior {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = DonParams::unflatten(&self.arch, theta.to_vec())?;
        let s2 = self.sigma * self.sigma;
        let mut g = weighted_output_gradient(&params, &self.arch, &self.batch, |y| {
            let r = y - &self.batch.labels;
            (r.dot(&r) / (2.0 * s2), r / s2)
        })?;
        if self.prior_tau.is_finite() {
            let p2 = self.prior_tau * self.prior_tau;
            g.loss += theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * p2);
            for (gi, t) in g.values.iter_mut().zip(theta) {
                *gi += t / p2;
            }
        }
        Ok((g.loss, g.values))
    }
}

/// Negative log posterior (up to a constant). An infinite `prior_tau` drops the prior.
pub fn negative_log_posterior(params: &DonParams, arch: &DonArchitecture, dataset: &ObservationSet, sigma: f64, prior_tau: f64) -> Result<f64> {
    Ok(negative_log_posterior_and_grad(params, arch, dataset, sigma, prior_tau)?.0)
}

pub fn negative_log_posterior_and_grad(
    params: &DonParams,
    arch: &DonArchitecture,
    dataset: &ObservationSet,
    sigma: f64,
    prior_tau: f64,
) -> Result<(f64, Vec<f64>)> {
    DonPosterior::new(arch.clone(), dataset, sigma, prior_tau)?.value_and_grad(params.flatten())
}

/// `min{1, exp((1/τ₁ − 1/τ₂)(U₁ − U₂ − F))}`.
pub fn swap_probability(u_low: f64, u_high: f64, tau_low: f64, tau_high: f64, correction: f64) -> f64 {
    let log_p = (1.0 / tau_low - 1.0 / tau_high) * (u_low - u_high - correction);
    if log_p >= 0.0 {
        1.0
    } else {
        log_p.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub samples: Vec<Vec<f64>>,
    pub swaps_attempted: usize,
    pub swaps_accepted: usize,
}

/// Two Langevin chains `θ ← θ − η∇U + √(2ητ) ξ` with periodic swap attempts;
/// collects every `thin`-th low-temperature state after `burn_in`.
pub fn replica_exchange<P: Potential>(potential: &P, init: &[f64], cfg: &SgReldConfig) -> Result<SamplerOutput> {
    cfg.validate()?;
    if init.len() != potential.dim() {
        return Err(Error::shape("initial state does not match the potential"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chains = [init.to_vec(), init.to_vec()];
    let taus = [cfg.tau_low, cfg.tau_high];
    let mut energies = [0.0; 2];
    let mut out = SamplerOutput {
        samples: Vec::with_capacity(cfg.ensemble_size),
        swaps_attempted: 0,
        swaps_accepted: 0,
    };
    let mut step = 0usize;
    while out.samples.len() < cfg.ensemble_size {
        step += 1;
        for c in 0..2 {
            let (u, g) = potential.value_and_grad(&chains[c])?;
            if !u.is_finite() {
                return Err(Error::Divergence { step });
            }
            let noise = (2.0 * cfg.step_size * taus[c]).sqrt();
            for (t, gi) in chains[c].iter_mut().zip(&g) {
                let xi: f64 = rng.sample(StandardNormal);
                *t += -cfg.step_size * gi + noise * xi;
            }
            energies[c] = u;
        }
        if step % cfg.swap_interval == 0 {
            let u_low = potential.value_and_grad(&chains[0])?.0;
            let u_high = potential.value_and_grad(&chains[1])?.0;
            if !(u_low.is_finite() && u_high.is_finite()) {
                return Err(Error::Divergence { step });
            }
            out.swaps_attempted += 1;
            let p = swap_probability(u_low, u_high, cfg.tau_low, cfg.tau_high, cfg.swap_correction);
            if rng.gen::<f64>() < p {
                chains.swap(0, 1);
                out.swaps_accepted += 1;
            }
        }
        if step > cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            if chains[0].iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
            out.samples.push(chains[0].clone());
        }
    }
    log::debug!(
        "replica exchange: {} steps, {}/{} swaps accepted, final energies {:?}",
        step,
        out.swaps_accepted,
        out.swaps_attempted,
        energies
    );
    Ok(out)
}

/// Posterior ensemble of DON parameters. Both chains start at `init`
/// (Glorot initialization from `cfg.seed` if `None`).
pub fn sample_sg_reld(arch: &DonArchitecture, dataset: &ObservationSet, cfg: &SgReldConfig, init: Option<&DonParams>) -> Result<Vec<DonParams>> {
    let posterior = DonPosterior::new(arch.clone(), dataset, cfg.sigma, cfg.prior_tau)?;
    let start = match init {
        Some(p) => p.clone(),
        None => init_params(arch, cfg.seed),
    };
    replica_exchange(&posterior, start.flatten(), cfg)?
        .samples
        .into_iter()
        .map(|s| DonParams::unflatten(arch, s))
        .collect()
}

/// Member mean and population variance at every evaluation node.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: GridField,
    pub variance: GridField,
    pub members: usize,
}

impl EnsembleStats {
    pub fn from_predictions(predictions: &[GridField]) -> Result<Self> {
        let first = predictions.first().ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        let grid = first.grid().clone();
        if predictions.iter().any(|p| p.grid() != &grid) {
            return Err(Error::shape("ensemble members live on different grids"));
        }
        let m = predictions.len() as f64;
        let n = grid.node_count();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for k in 0..n {
            let base = first.values()[k];
            let (mut s1, mut s2) = (0.0, 0.0);
            for p in predictions {
                let d = p.values()[k] - base;
                s1 += d;
                s2 += d * d;
            }
            let md = s1 / m;
            mean[k] = base + md;
            var[k] = (s2 / m - md * md).max(0.0);
        }
        Ok(EnsembleStats {
            mean: GridField::new(grid.clone(), mean)?,
            variance: GridField::new(grid, var)?,
            members: predictions.len(),
        })
    }

    /// Mean scaled by `factor`, variance by `factor²`.
    pub fn scaled(&self, factor: f64) -> EnsembleStats {
        EnsembleStats {
            mean: self.mean.scaled(factor),
            variance: self.variance.scaled(factor * factor),
            members: self.members,
        }
    }

    /// Writes `ensemble_mean.csv` and `ensemble_variance.csv` into `dir`.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.mean.write_csv(dir.as_ref().join("ensemble_mean.csv"))?;
        self.variance.write_csv(dir.as_ref().join("ensemble_variance.csv"))
    }
}

pub fn ensemble_predict(samples: &[DonParams], arch: &DonArchitecture, coarse: &GridField, spec: &PatchSpec, eval_grid: &Grid) -> Result<EnsembleStats> {
    let inputs = FieldInputs::new(coarse, spec, eval_grid)?;
    ensemble_predict_with(samples, arch, &inputs)
}

pub fn ensemble_predict_with(samples: &[DonParams], arch: &DonArchitecture, inputs: &FieldInputs) -> Result<EnsembleStats> {
    let preds = samples.iter().map(|p| inputs.predict(p, arch)).collect::<Result<Vec<_>>>()?;
    EnsembleStats::from_predictions(&preds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub rel_l2_error: f64,
    pub max_abs_error: f64,
}

/// Errors of `prediction` against `fine_ref`, restricting the reference to the
/// prediction's grid when the two differ.
pub fn evaluate_run(prediction: &GridField, fine_ref: &GridField) -> Result<RunMetrics> {
    let restricted;
    let reference = if prediction.grid() == fine_ref.grid() {
        fine_ref
    } else {
        restricted = fine_ref.restrict(prediction.grid())?;
        &restricted
    };
    Ok(RunMetrics {
        rel_l2_error: relative_l2_error(prediction, reference)?,
        max_abs_error: max_abs_error(prediction, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::don::{don_forward, Activation};
    use crate::patch::{ObservationTriplet, PatchSpec};

    /// `U(θ) = Σ (y_j − a θ x_j)²/(2s²) + θ²/(2t²)`.
    struct Linear {
        xs: Vec<f64>,
        ys: Vec<f64>,
        s: f64,
        t: f64,
    }

    impl Potential for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_grad(&self, th: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (mut u, mut g) = (th[0] * th[0] / (2.0 * self.t * self.t), th[0] / (self.t * self.t));
            for (x, y) in self.xs.iter().zip(&self.ys) {
                let r = th[0] * x - y;
                u += r * r / (2.0 * self.s * self.s);
                g += r * x / (self.s * self.s);
            }
            Ok((u, vec![g]))
        }
    }

    fn tiny_set() -> (DonArchitecture, ObservationSet) {
        let arch = DonArchitecture::new(vec![3, 5, 4], vec![1, 5, 4], Activation::Tanh, true).unwrap();
        let triplets = (0..4)
            .map(|i| {
                let x = 0.2 * (i + 1) as f64;
                ObservationTriplet {
                    branch_input: vec![x, x * x, -x],
                    location: vec![x],
                    label: (3.0 * x).sin(),
                    clean_label: (3.0 * x).sin(),
                }
            })
            .collect();
        (arch, ObservationSet::new(triplets, PatchSpec::new(3, 0.01).unwrap(), 0.0, 0).unwrap())
    }

    #[test]
    fn posterior_trivial_values() {
        let (arch, set) = tiny_set();
        let zero = DonParams::zeros(&arch);
        let mut perfect = set.clone();
        for t in &mut perfect.triplets {
            t.label = 0.0;
        }
        assert_eq!(negative_log_posterior(&zero, &arch, &perfect, 0.1, 10.0).unwrap(), 0.0);
        let mut one = perfect.clone();
        one.triplets.truncate(1);
        one.triplets[0].label = 0.3;
        let v = negative_log_posterior(&zero, &arch, &one, 1.0, f64::INFINITY).unwrap();
        assert!((v - 0.045).abs() < 1e-15);
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let (arch, set) = tiny_set();
        let p = init_params(&arch, 5);
        let (_, g) = negative_log_posterior_and_grad(&p, &arch, &set, 0.3, 2.0).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.values_mut()[i] += h;
            let mut b = p.clone();
            b.values_mut()[i] -= h;
            let fd = (negative_log_posterior(&a, &arch, &set, 0.3, 2.0).unwrap() - negative_log_posterior(&b, &arch, &set, 0.3, 2.0).unwrap()) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-3);
            assert!((g[i] - fd).abs() / scale <= 1e-5, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn swap_probability_properties() {
        assert_eq!(swap_probability(3.0, 1.0, 0.5, 0.5, 0.0), 1.0);
        assert_eq!(swap_probability(1.0, 3.0, 0.5, 0.5, 0.0), 1.0);
        let mut last = 1.0;
        for k in 0..50 {
            let p = swap_probability(2.0, 1.0, 0.1, 1.0, k as f64 * 0.2);
            assert!((0.0..=1.0).contains(&p));
            assert!(p <= last);
            last = p;
        }
        assert!(swap_probability(0.0, 1e6, 1e-5, 1e-2, 0.0) == 0.0);
    }

    #[test]
    fn zero_step_never_moves() {
        let (arch, set) = tiny_set();
        let init = init_params(&arch, 2);
        let cfg = SgReldConfig {
            step_size: 0.0,
            burn_in: 10,
            thin: 2,
            ensemble_size: 5,
            swap_interval: 3,
            sigma: 0.1,
            ..Default::default()
        };
        let samples = sample_sg_reld(&arch, &set, &cfg, Some(&init)).unwrap();
        assert_eq!(samples.len(), 5);
        assert!(samples.iter().all(|s| s == &init));
    }

    #[test]
    fn equal_temperatures_return_finite_states() {
        let (arch, set) = tiny_set();
        let cfg = SgReldConfig {
            tau_low: 1e-3,
            tau_high: 1e-3,
            step_size: 1e-4,
            burn_in: 50,
            thin: 5,
            ensemble_size: 10,
            swap_interval: 7,
            sigma: 0.1,
            ..Default::default()
        };
        let samples = sample_sg_reld(&arch, &set, &cfg, None).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(DonParams::is_finite));
        let posterior = DonPosterior::new(arch.clone(), &set, 0.1, 10.0).unwrap();
        let out = replica_exchange(&posterior, init_params(&arch, 0).flatten(), &cfg).unwrap();
        assert_eq!(out.swaps_accepted, out.swaps_attempted);
    }

    #[test]
    fn conjugate_gaussian_variance() {
        let xs: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 + 0.05).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 0.03 * (7.0 * x).sin()).collect();
        let pot = Linear { xs: xs.clone(), ys, s: 0.5, t: 3.0 };
        let precision = xs.iter().map(|x| x * x).sum::<f64>() / 0.25 + 1.0 / 9.0;
        let var = 1.0 / precision;
        let cfg = SgReldConfig {
            tau_low: 1.0,
            tau_high: 5.0,
            step_size: 0.01 * var,
            swap_interval: 50,
            burn_in: 2000,
            thin: 200,
            ensemble_size: 2000,
            sigma: 1.0,
            prior_tau: 1.0,
            seed: 17,
            ..Default::default()
        };
        let out = replica_exchange(&pot, &[0.0], &cfg).unwrap();
        let s: Vec<f64> = out.samples.iter().map(|v| v[0]).collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let emp = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        assert!((emp / var - 1.0).abs() < 0.15, "{emp} vs {var}");
    }

    #[test]
    fn ensemble_formulas() {
        let g = Grid::unit(1, 4).unwrap();
        let a = GridField::from_fn(g.clone(), |_| 1.5);
        let b = GridField::from_fn(g.clone(), |_| -0.5);
        let e = EnsembleStats::from_predictions(&[a.clone(), b]).unwrap();
        assert!(e.mean.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(e.variance.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let one = EnsembleStats::from_predictions(&[a.clone()]).unwrap();
        assert_eq!(one.mean, a);
        assert!(one.variance.values().iter().all(|&v| v == 0.0));
        let same = EnsembleStats::from_predictions(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(same.variance.values().iter().all(|&v| v == 0.0));
        assert_eq!(same.mean, a);
    }

    #[test]
    fn ensemble_matches_direct_computation() {
        let g = Grid::unit(1, 16).unwrap();
        let members: Vec<GridField> = (0..7)
            .map(|k| GridField::from_fn(g.clone(), |x| (x[0] * (k + 1) as f64).sin() + k as f64 * 0.1))
            .collect();
        let e = EnsembleStats::from_predictions(&members).unwrap();
        for n in 0..g.node_count() {
            let vals: Vec<f64> = members.iter().map(|m| m.values()[n]).collect();
            let mu = vals.iter().sum::<f64>() / 7.0;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
            assert!((e.mean.values()[n] - mu).abs() < 1e-12);
            assert!((e.variance.values()[n] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_of_networks() {
        let (arch, _) = tiny_set();
        let coarse = GridField::from_fn(Grid::unit(1, 8).unwrap(), |x| x[0]);
        let eval = Grid::unit(1, 10).unwrap();
        let members: Vec<DonParams> = (0..3).map(|s| init_params(&arch, s)).collect();
        let spec = PatchSpec::new(3, 0.05).unwrap();
        let e = ensemble_predict(&members, &arch, &coarse, &spec, &eval).unwrap();
        assert_eq!(e.members, 3);
        assert!(e.variance.values().iter().all(|&v| v >= 0.0));
        let x = eval.node(4);
        let u = crate::patch::branch_input(&coarse, &x, &spec).unwrap();
        let direct: f64 = members.iter().map(|p| don_forward(p, &arch, &u, &x).unwrap()).sum::<f64>() / 3.0;
        assert!((e.mean.values()[4] - direct).abs() < 1e-12);
    }

    #[test]
    fn evaluate_run_restricts() {
        let fine = GridField::from_fn(Grid::unit(1, 64).unwrap(), |x| x[0] * x[0]);
        let pred = fine.restrict(&Grid::unit(1, 16).unwrap()).unwrap();
        let m = evaluate_run(&pred, &fine).unwrap();
        assert_eq!(m.rel_l2_error, 0.0);
        assert_eq!(m.max_abs_error, 0.0);
    }
}
