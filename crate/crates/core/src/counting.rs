//! Counting statistics of Raman-scattered photons.
//!
//! The register approach keeps one unnormalised density matrix `ρ_m` per
//! number `m` of Raman photons emitted so far. Every Raman sandwich term
//! `LρL†` moves weight from block `m` to block `m + 1`; all other terms act
//! within a block. The last block absorbs counts beyond the truncation.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouvillian::Generator;
use crate::model::ChainConfig;
use crate::observables::{simulate, trapezoid};
use crate::ode::integrate;
use crate::propagator::{ground_state, tolerances, Estimate, TrajectoryEnsemble};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Probability in the overflow block above which a truncation warning is
/// logged.
pub const OVERFLOW_WARNING: f64 = 1e-6;

/// Register state sampled on the configuration grid.
#[derive(Debug, Clone)]
pub struct CountingState {
    pub max_count: usize,
    pub times: Vec<f64>,
    /// `probabilities[k][m] = tr ρ_m(t_k) / Σ_m' tr ρ_m'(t_k)`.
    pub probabilities: Vec<Vec<f64>>,
    /// `Σ_m ρ_m(t_k)`, the reduced absorber state.
    pub marginal: Vec<Vec<C64>>,
    /// Register blocks `ρ_m` at the final time.
    pub final_blocks: Vec<Vec<C64>>,
}

impl CountingState {
    pub fn distribution(&self, k: usize) -> CountDistribution {
        CountDistribution { time: self.times[k], probabilities: self.probabilities[k].clone(), std_errors: None }
    }

    /// Largest weight ever held by the overflow block.
    pub fn overflow(&self) -> f64 {
        self.probabilities.iter().map(|p| p[self.max_count]).fold(0.0, f64::max)
    }
}

/// Distribution of the number of Raman photons emitted before `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub time: f64,
    pub probabilities: Vec<f64>,
    /// Binomial standard errors for empirical estimates.
    pub std_errors: Option<Vec<f64>>,
}

impl CountDistribution {
    pub fn mean(&self) -> f64 {
        self.probabilities.iter().enumerate().map(|(m, p)| m as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.probabilities.iter().enumerate().map(|(m, p)| (m as f64 - mean).powi(2) * p).sum()
    }
}

/// Register size `⌈μ + 6√μ + 5⌉` from the mean Raman loss `μ = Γ∫P_Ryd` of
/// a master-equation pre-run. The variance is taken equal to the mean.
pub fn default_max_count(cfg: &ChainConfig) -> Result<usize> {
    if !cfg.has_raman() {
        return Ok(1);
    }
    let trace = simulate(cfg)?;
    let mean: f64 = (0..cfg.n_sub)
        .map(|i| {
            let p: Vec<f64> = trace.populations.iter().map(|s| s[i][1] + s[i][2]).collect();
            cfg.site(i).gamma_raman * trapezoid(&trace.times, &p)
        })
        .sum();
    Ok((mean + 6.0 * mean.sqrt() + 5.0).ceil() as usize)
}

/// Integrates the counting register with `max_count + 1` blocks from the
/// ground state.
pub fn evolve_counting(cfg: &ChainConfig, max_count: usize) -> Result<CountingState> {
    if max_count == 0 {
        return Err(Error::invalid("register size must be >= 1"));
    }
    cfg.validate()?;
    let gen = Generator::new(cfg);
    let d = gen.dim();
    let d2 = d * d;
    let blocks = max_count + 1;
    let (raman, internal): (Vec<_>, Vec<_>) = gen.jumps().iter().partition(|j| j.tag.is_raman());

    let mut y0 = vec![ZERO; blocks * d2];
    y0[..d2].copy_from_slice(&ground_state(d));
    let mut scratch = vec![ZERO; d2];
    let rhs = |t: f64, y: &[C64], dy: &mut [C64]| {
        for (rho, out) in y.chunks_exact(d2).zip(dy.chunks_exact_mut(d2)) {
            gen.coherent_part(t, rho, out, &mut scratch);
            for j in &internal {
                j.op.sandwich_add(1.0, rho, out);
            }
        }
        for (m, rho) in y.chunks_exact(d2).enumerate() {
            let target = (m + 1).min(max_count);
            let out = &mut dy[target * d2..(target + 1) * d2];
            for j in &raman {
                j.op.sandwich_add(1.0, rho, out);
            }
        }
    };

    let mut probabilities = Vec::with_capacity(cfg.t_grid.len());
    let mut marginal = Vec::with_capacity(cfg.t_grid.len());
    let last = integrate(
        rhs,
        cfg.t_start(),
        y0,
        &cfg.pulse.breakpoints(),
        &cfg.t_grid,
        tolerances(cfg),
        |_, _, y| {
            let mut sum = vec![ZERO; d2];
            let mut p = Vec::with_capacity(blocks);
            for rho in y.chunks_exact(d2) {
                p.push((0..d).map(|i| rho[i * d + i].re).sum());
                sum.iter_mut().zip(rho).for_each(|(a, b)| *a += b);
            }
            // the total trace is conserved exactly; normalising removes integrator drift
            let total: f64 = p.iter().sum();
            probabilities.push(p.into_iter().map(|x: f64| x / total).collect());
            marginal.push(sum);
        },
    )?;
    let state = CountingState {
        max_count,
        times: cfg.t_grid.clone(),
        probabilities,
        marginal,
        final_blocks: last.chunks_exact(d2).map(<[C64]>::to_vec).collect(),
    };
    let overflow = state.overflow();
    if overflow > OVERFLOW_WARNING {
        log::warn!("Raman register truncated at {max_count}: overflow probability {overflow:.3e}");
    }
    Ok(state)
}

/// Mean and variance of the Raman photon number on the register grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamanMoments {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn raman_moments(cs: &CountingState) -> RamanMoments {
    let (mean, variance) = (0..cs.times.len())
        .map(|k| {
            let d = cs.distribution(k);
            (d.mean(), d.variance())
        })
        .unzip();
    RamanMoments { times: cs.times.clone(), mean, variance }
}

/// Empirical distribution of Raman jumps recorded strictly before `t`.
pub fn trajectory_count_distribution(ens: &TrajectoryEnsemble, t: f64) -> Result<CountDistribution> {
    let n = ens.n_traj();
    if n == 0 {
        return Err(Error::invalid("empty trajectory ensemble"));
    }
    let counts: Vec<usize> = ens
        .trajectories
        .iter()
        .map(|tr| tr.records.iter().filter(|r| r.time < t && r.tag.is_raman()).count())
        .collect();
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0usize; top + 1];
    for c in counts {
        hist[c] += 1;
    }
    let probabilities: Vec<f64> = hist.iter().map(|&h| h as f64 / n as f64).collect();
    let std_errors = probabilities.iter().map(|p| (p * (1.0 - p) / n as f64).sqrt()).collect();
    Ok(CountDistribution { time: t, probabilities, std_errors: Some(std_errors) })
}

/// Ensemble estimate of the mean Raman count before `t`.
pub fn trajectory_mean_count(ens: &TrajectoryEnsemble, t: f64) -> Estimate {
    Estimate::from_samples(
        ens.trajectories
            .iter()
            .map(|tr| tr.records.iter().filter(|r| r.time < t && r.tag.is_raman()).count() as f64),
    )
}
