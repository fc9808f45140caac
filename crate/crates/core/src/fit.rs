//! Least-squares estimation of the shared absorber rates `{κ, Γ, γ_D}` from
//! transmitted-rate traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChainConfig, PulseSpec, SolverOptions, SuperatomParams};
use crate::observables::simulate;

/// Fraction of the peak input rate above which samples get unit weight by
/// default.
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 0.1;

/// One measured (or synthetic) output-rate trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionTrace {
    pub mean_photons_in: f64,
    pub times: Vec<f64>,
    pub rate_out: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionDataset {
    pub n_sub: usize,
    /// Pulse template; its photon number is replaced by each trace's.
    pub pulse: PulseSpec,
    pub traces: Vec<TransmissionTrace>,
}

impl TransmissionDataset {
    pub fn validate(&self) -> Result<()> {
        if self.n_sub == 0 {
            return Err(Error::config("n_sub must be >= 1"));
        }
        if self.traces.is_empty() {
            return Err(Error::config("dataset has no traces"));
        }
        self.pulse.validate()?;
        for (k, tr) in self.traces.iter().enumerate() {
            let ctx = |msg: &str| Error::config(format!("trace {k}: {msg}"));
            if !(tr.mean_photons_in.is_finite() && tr.mean_photons_in >= 0.0) {
                return Err(ctx("mean photon number must be finite and >= 0"));
            }
            if tr.times.len() < 2 || tr.times.len() != tr.rate_out.len() {
                return Err(ctx("needs at least two samples and matching column lengths"));
            }
            if tr.times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(ctx("times must be strictly increasing"));
            }
            if tr.rate_out.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(ctx("output rates must be finite and >= 0"));
            }
            if let Some(w) = &tr.weights {
                if w.len() != tr.times.len() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(ctx("weights must match the samples and be >= 0"));
                }
            }
        }
        Ok(())
    }

    fn pulse_for(&self, tr: &TransmissionTrace) -> PulseSpec {
        PulseSpec { mean_photons: tr.mean_photons_in, ..self.pulse.clone() }
    }

    /// Weights of a trace: the supplied ones, or 1 where the input rate
    /// exceeds [`DEFAULT_WEIGHT_THRESHOLD`] of its peak and 0 elsewhere.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        let tr = &self.traces[k];
        if let Some(w) = &tr.weights {
            return w.clone();
        }
        let pulse = self.pulse_for(tr);
        let cut = DEFAULT_WEIGHT_THRESHOLD * pulse.peak_rate();
        tr.times.iter().map(|&t| if pulse.rate(t) > cut { 1.0 } else { 0.0 }).collect()
    }

    /// Simulation config reproducing trace `k` with the given rates; the grid
    /// is the trace's sample times extended to the pulse support.
    fn config(&self, k: usize, p: SuperatomParams, solver: SolverOptions) -> Result<(ChainConfig, Vec<usize>)> {
        let tr = &self.traces[k];
        let pulse = self.pulse_for(tr);
        let (begin, end) = pulse.support();
        let mut grid = tr.times.clone();
        let prefix = usize::from(begin < grid[0]);
        if prefix == 1 {
            grid.insert(0, begin);
        }
        if end > grid[grid.len() - 1] {
            grid.push(end);
        }
        let idx = (0..tr.times.len()).map(|i| i + prefix).collect();
        let cfg = ChainConfig::new(self.n_sub, p, pulse)?.with_grid(grid)?.with_solver(solver);
        Ok((cfg, idx))
    }

    /// Model output rate at the sample times of trace `k`.
    pub fn model_trace(&self, k: usize, p: SuperatomParams, solver: SolverOptions) -> Result<Vec<f64>> {
        let (cfg, idx) = self.config(k, p, solver)?;
        let out = simulate(&cfg)?;
        Ok(idx.into_iter().map(|i| out.r_out[i]).collect())
    }

    /// Weighted sum of squared residuals over all traces.
    pub fn objective(&self, p: SuperatomParams, solver: SolverOptions) -> Result<f64> {
        let parts = (0..self.traces.len())
            .into_par_iter()
            .map(|k| {
                let model = self.model_trace(k, p, solver)?;
                let w = self.weights(k);
                Ok(model
                    .iter()
                    .zip(&self.traces[k].rate_out)
                    .zip(&w)
                    .map(|((m, d), w)| w * (m - d).powi(2))
                    .sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the relative spread of the simplex.
    pub xtol: f64,
    /// Initial simplex edge in log-rate units.
    pub initial_step: f64,
    pub solver: SolverOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 500, xtol: 1e-6, initial_step: 0.2, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kappa: f64,
    pub gamma_raman: f64,
    pub gamma_d: f64,
    pub residual: f64,
    pub initial_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn params(&self) -> SuperatomParams {
        SuperatomParams::new(self.kappa, self.gamma_raman, self.gamma_d)
    }
}

fn to_params(x: &[f64; 3]) -> SuperatomParams {
    SuperatomParams::new(x[0].exp(), x[1].exp(), x[2].exp())
}

/// Largest coordinate distance of any vertex from the best one; in log
/// coordinates this is a relative spread of the rates.
fn spread(simplex: &[([f64; 3], f64)]) -> f64 {
    let best = simplex[0].0;
    simplex[1..]
        .iter()
        .flat_map(|(x, _)| x.iter().zip(&best).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

/// Fits the shared rates by Nelder–Mead on their logarithms.
///
/// Returns the best point even when the iteration limit is reached, with
/// `converged = false`. Constant traces carry no information and are
/// rejected.
pub fn fit_params(data: &TransmissionDataset, init: SuperatomParams, opts: FitOptions) -> Result<FitResult> {
    data.validate()?;
    for (name, v) in [("kappa", init.kappa), ("gamma_raman", init.gamma_raman), ("gamma_d", init.gamma_d)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("initial {name} must be > 0, got {v}")));
        }
    }
    let informative = (0..data.traces.len()).any(|k| {
        let w = data.weights(k);
        let tr = &data.traces[k];
        let used: Vec<f64> = tr.rate_out.iter().zip(&w).filter(|(_, w)| **w > 0.0).map(|(r, _)| *r).collect();
        used.len() >= 2 && used.iter().any(|r| (r - used[0]).abs() > 1e-12 * used[0].abs().max(1e-300))
    });
    if !informative {
        return Err(Error::DegenerateData("every trace is constant over its weighted samples".into()));
    }

    let f = |x: &[f64; 3]| data.objective(to_params(x), opts.solver);
    let x0 = [init.kappa.ln(), init.gamma_raman.ln(), init.gamma_d.ln()];
    let mut points = vec![x0];
    for i in 0..3 {
        let mut x = x0;
        x[i] += opts.initial_step;
        points.push(x);
    }
    let values = points.par_iter().map(f).collect::<Result<Vec<_>>>()?;
    let initial_residual = values[0];
    let mut simplex: Vec<([f64; 3], f64)> = points.into_iter().zip(values).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if spread(&simplex) < opts.xtol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let mut centroid = [0.0; 3];
        for (x, _) in &simplex[..3] {
            for i in 0..3 {
                centroid[i] += x[i] / 3.0;
            }
        }
        let along = |t: f64| -> [f64; 3] {
            let worst = simplex[3].0;
            std::array::from_fn(|i| centroid[i] + t * (worst[i] - centroid[i]))
        };
        let xr = along(-alpha);
        let fr = f(&xr)?;
        if fr < simplex[0].1 {
            let xe = along(-gamma);
            let fe = f(&xe)?;
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[3].1 {
            let x = along(-rho);
            (x, f(&x)?)
        } else {
            let x = along(rho);
            (x, f(&x)?)
        };
        if fc < fr.min(simplex[3].1) {
            simplex[3] = (xc, fc);
            continue;
        }
        let best = simplex[0].0;
        let shrunk: Vec<[f64; 3]> = simplex[1..]
            .iter()
            .map(|(x, _)| std::array::from_fn(|i| best[i] + sigma * (x[i] - best[i])))
            .collect();
        let values = shrunk.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        for (k, (x, v)) in shrunk.into_iter().zip(values).enumerate() {
            simplex[k + 1] = (x, v);
        }
    }
    let (x, residual) = simplex[0];
    let p = to_params(&x);
    if !converged {
        log::warn!("fit stopped after {iterations} iterations with simplex spread {:.3e}", spread(&simplex));
    }
    Ok(FitResult {
        kappa: p.kappa,
        gamma_raman: p.gamma_raman,
        gamma_d: p.gamma_d,
        residual,
        initial_residual,
        iterations,
        converged,
    })
}

/// Synthetic dataset: one master-equation trace per photon number on the
/// template's grid, each sample multiplied by `1 + σ·N(0,1)` and clipped at
/// zero. Trace `k` draws from stream `k` of a generator seeded with `seed`.
pub fn simulate_dataset(
    truth: SuperatomParams,
    template: &ChainConfig,
    mean_photons: &[f64],
    noise: f64,
    seed: u64,
) -> Result<TransmissionDataset> {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::invalid(format!("noise level {noise} must be >= 0")));
    }
    let traces = mean_photons
        .par_iter()
        .enumerate()
        .map(|(k, &n)| {
            let pulse = PulseSpec { mean_photons: n, ..template.pulse.clone() };
            let cfg = ChainConfig { params: truth.into(), pulse, ..template.clone() };
            cfg.validate()?;
            let clean = simulate(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let rate_out = clean
                .r_out
                .iter()
                .map(|r| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (r * (1.0 + noise * z)).max(0.0)
                })
                .collect();
            Ok(TransmissionTrace { mean_photons_in: n, times: clean.times, rate_out, weights: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransmissionDataset { n_sub: template.n_sub, pulse: template.pulse.clone(), traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(n: usize) -> ChainConfig {
        ChainConfig::new(n, SuperatomParams::fitted(n).unwrap(), PulseSpec::experimental(1.0)).unwrap()
    }

    #[test]
    fn noiseless_dataset_is_the_model() {
        let t = template(2);
        let d = simulate_dataset(SuperatomParams::FITTED_TWO, &t, &[5.0], 0.0, 1).unwrap();
        let cfg = ChainConfig { pulse: PulseSpec::experimental(5.0), ..t.clone() };
        assert_eq!(d.traces[0].rate_out, simulate(&cfg).unwrap().r_out);
        assert_eq!(d.objective(SuperatomParams::FITTED_TWO, SolverOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn noise_statistics() {
        let t = template(1).with_spacing(0.005).unwrap();
        let clean = simulate_dataset(SuperatomParams::FITTED_ONE, &t, &[10.0, 20.0], 0.0, 3).unwrap();
        let noisy = simulate_dataset(SuperatomParams::FITTED_ONE, &t, &[10.0, 20.0], 0.01, 3).unwrap();
        assert_eq!(noisy, simulate_dataset(SuperatomParams::FITTED_ONE, &t, &[10.0, 20.0], 0.01, 3).unwrap());
        let rel: Vec<f64> = clean
            .traces
            .iter()
            .zip(&noisy.traces)
            .flat_map(|(c, n)| c.rate_out.iter().zip(&n.rate_out).filter(|(c, _)| **c > 1e-3).map(|(c, n)| n / c - 1.0))
            .collect();
        assert!(rel.len() >= 1000);
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let sd = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.002, "{sd}");
    }

    #[test]
    fn default_weights_follow_input() {
        let d = simulate_dataset(SuperatomParams::FITTED_ONE, &template(1), &[10.0], 0.0, 0).unwrap();
        let w = d.weights(0);
        let pulse = PulseSpec::experimental(10.0);
        for (t, w) in d.traces[0].times.iter().zip(&w) {
            assert_eq!(*w == 1.0, pulse.rate(*t) > 0.1 * pulse.peak_rate());
        }
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn fixed_point_at_truth() {
        let truth = SuperatomParams::FITTED_ONE;
        let d = simulate_dataset(truth, &template(1), &[2.0, 10.0], 0.0, 0).unwrap();
        let r = fit_params(&d, truth, FitOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.residual < 1e-10);
        let p = r.params();
        for (a, b) in [(p.kappa, truth.kappa), (p.gamma_raman, truth.gamma_raman), (p.gamma_d, truth.gamma_d)] {
            assert!((a / b - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn recovers_single_absorber_rates() {
        let truth = SuperatomParams::FITTED_ONE;
        let d = simulate_dataset(truth, &template(1), &[2.0, 10.0, 30.0], 0.0, 0).unwrap();
        let init = SuperatomParams::new(0.3, 0.06, 2.0);
        let r = fit_params(&d, init, FitOptions::default()).unwrap();
        assert!(r.residual <= r.initial_residual);
        assert!((r.kappa / truth.kappa - 1.0).abs() < 1e-3, "{r:?}");
        assert!((r.gamma_d / truth.gamma_d - 1.0).abs() < 1e-3, "{r:?}");
        assert!((r.gamma_raman / truth.gamma_raman - 1.0).abs() < 1e-2, "{r:?}");
    }

    #[test]
    fn objective_ignores_trace_order() {
        let mut d = simulate_dataset(SuperatomParams::FITTED_ONE, &template(1), &[2.0, 10.0], 0.01, 5).unwrap();
        let p = SuperatomParams::new(0.4, 0.05, 2.0);
        let a = d.objective(p, SolverOptions::default()).unwrap();
        d.traces.reverse();
        let b = d.objective(p, SolverOptions::default()).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn iteration_limit_flags_non_convergence() {
        let d = simulate_dataset(SuperatomParams::FITTED_ONE, &template(1), &[10.0], 0.0, 0).unwrap();
        let opts = FitOptions { max_iter: 3, ..FitOptions::default() };
        let r = fit_params(&d, SuperatomParams::new(1.0, 0.1, 1.0), opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.residual <= r.initial_residual);
    }

    #[test]
    fn rejects_degenerate_data() {
        let mut d = simulate_dataset(SuperatomParams::FITTED_ONE, &template(1), &[10.0], 0.0, 0).unwrap();
        d.traces[0].rate_out.iter_mut().for_each(|r| *r = 3.0);
        assert!(matches!(fit_params(&d, SuperatomParams::FITTED_ONE, FitOptions::default()), Err(Error::DegenerateData(_))));
        d.traces[0].rate_out[0] = -1.0;
        assert!(fit_params(&d, SuperatomParams::FITTED_ONE, FitOptions::default()).is_err());
        d.traces.clear();
        assert!(fit_params(&d, SuperatomParams::FITTED_ONE, FitOptions::default()).is_err());
    }
}
