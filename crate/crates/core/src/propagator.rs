//! Time evolution: deterministic master-equation propagation, transport of
//! unnormalised operators for two-time correlations, and Monte-Carlo
//! wavefunction trajectories.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouvillian::{Generator, JumpTag};
use crate::model::ChainConfig;
use crate::ode::{integrate, DormandPrince, Tolerances};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub(crate) fn tolerances(cfg: &ChainConfig) -> Tolerances {
    Tolerances { rtol: cfg.solver.rtol, atol: cfg.solver.atol, max_step: cfg.solver.max_step }
}

/// Density matrix `|G…G⟩⟨G…G|` as a dense row-major matrix.
pub fn ground_state(dim: usize) -> Vec<C64> {
    let mut m = vec![ZERO; dim * dim];
    m[0] = C64::new(1.0, 0.0);
    m
}

pub(crate) fn trace(m: &[C64], dim: usize) -> C64 {
    (0..dim).map(|i| m[i * dim + i]).sum()
}

pub(crate) fn hermiticity_error(m: &[C64], dim: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..dim {
        for b in a..dim {
            worst = worst.max((m[a * dim + b] - m[b * dim + a].conj()).norm());
        }
    }
    worst
}

/// Smallest eigenvalue of a Hermitian row-major matrix.
pub fn min_eigenvalue(m: &[C64], dim: usize) -> f64 {
    let mat = nalgebra::DMatrix::from_fn(dim, dim, |r, c| 0.5 * (m[r * dim + c] + m[c * dim + r].conj()));
    mat.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Sampled solution of the master equation.
#[derive(Debug, Clone)]
pub struct DensityState {
    pub n_sub: usize,
    pub dim: usize,
    pub times: Vec<f64>,
    /// One dense row-major `dim × dim` matrix per sample time.
    pub states: Vec<Vec<C64>>,
}

/// Tolerances a propagated density matrix must satisfy.
pub const TRACE_TOL: f64 = 1e-6;
pub const EIGEN_TOL: f64 = 1e-8;
pub const HERMITIAN_TOL: f64 = 1e-10;

impl DensityState {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &[C64] {
        self.states.last().expect("non-empty state")
    }

    /// Population of basis state `s` at sample `k`.
    pub fn diagonal(&self, k: usize, s: usize) -> f64 {
        self.states[k][s * self.dim + s].re
    }

    /// Checks unit trace, Hermiticity and positivity at every sample.
    pub fn check_invariants(&self) -> Result<()> {
        for (t, rho) in self.times.iter().zip(&self.states) {
            let tr = trace(rho, self.dim);
            if (tr - C64::new(1.0, 0.0)).norm() > TRACE_TOL {
                return Err(Error::invalid(format!("trace {tr} at t = {t}")));
            }
            let herm = hermiticity_error(rho, self.dim);
            if herm > HERMITIAN_TOL {
                return Err(Error::invalid(format!("hermiticity error {herm:e} at t = {t}")));
            }
            let ev = min_eigenvalue(rho, self.dim);
            if ev < -EIGEN_TOL {
                return Err(Error::invalid(format!("negative eigenvalue {ev:e} at t = {t}")));
            }
        }
        Ok(())
    }
}

fn check_operator(rho: &[C64], dim: usize) -> Result<()> {
    if rho.len() != dim * dim {
        return Err(Error::DimensionMismatch { expected: dim * dim, found: rho.len() });
    }
    let herm = hermiticity_error(rho, dim);
    if herm > 1e-10 {
        return Err(Error::invalid(format!("initial operator is not Hermitian (error {herm:e})")));
    }
    Ok(())
}

/// Propagates a Hermitian operator with the full generator from `t0`,
/// reporting it at each of the sorted `samples`.
pub(crate) fn evolve_operator<G>(
    gen: &Generator,
    cfg: &ChainConfig,
    t0: f64,
    op: Vec<C64>,
    samples: &[f64],
    on_sample: G,
) -> Result<Vec<C64>>
where
    G: FnMut(usize, f64, &[C64]),
{
    let dim = gen.dim();
    let mut scratch = vec![ZERO; dim * dim];
    let rhs = |t: f64, y: &[C64], dy: &mut [C64]| gen.rhs(t, y, dy, &mut scratch);
    integrate(rhs, t0, op, &cfg.pulse.breakpoints(), samples, tolerances(cfg), on_sample)
}

/// Solves the master equation from `rho0` at the first grid time and samples
/// it on the configuration's grid.
pub fn evolve_me(cfg: &ChainConfig, rho0: &[C64]) -> Result<DensityState> {
    cfg.validate()?;
    let dim = cfg.dim();
    check_operator(rho0, dim)?;
    let tr = trace(rho0, dim);
    if (tr - C64::new(1.0, 0.0)).norm() > 1e-9 {
        return Err(Error::invalid(format!("initial state has trace {tr}")));
    }
    let gen = Generator::new(cfg);
    let mut states = Vec::with_capacity(cfg.t_grid.len());
    evolve_operator(&gen, cfg, cfg.t_start(), rho0.to_vec(), &cfg.t_grid, |_, _, rho| states.push(rho.to_vec()))?;
    Ok(DensityState { n_sub: cfg.n_sub, dim, times: cfg.t_grid.clone(), states })
}

/// Master-equation solution starting from every absorber in the ground state.
pub fn evolve_from_ground(cfg: &ChainConfig) -> Result<DensityState> {
    evolve_me(cfg, &ground_state(cfg.dim()))
}

/// Transports an unnormalised Hermitian operator from `t1` to `t2` under the
/// full generator. The map is linear and trace preserving.
pub fn propagate_conditional(rho_tilde: &[C64], t1: f64, t2: f64, cfg: &ChainConfig) -> Result<Vec<C64>> {
    let dim = cfg.dim();
    check_operator(rho_tilde, dim)?;
    if t2 < t1 {
        return Err(Error::invalid(format!("t2 = {t2} precedes t1 = {t1}")));
    }
    if t2 == t1 {
        return Ok(rho_tilde.to_vec());
    }
    let gen = Generator::new(cfg);
    evolve_operator(&gen, cfg, t1, rho_tilde.to_vec(), &[t2], |_, _, _| {})
}

/// One emission event of a stochastic trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub time: f64,
    pub tag: JumpTag,
}

impl JumpRecord {
    pub fn site(&self) -> Option<usize> {
        self.tag.site()
    }
}

/// Result of one stochastic trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<JumpRecord>,
    /// Normalised state vector at the final grid time.
    pub final_state: Vec<C64>,
    /// `[P_G, P_W, P_D]` per absorber at each grid time.
    pub populations: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub n_sub: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

/// Ensemble mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std_err: (var / n).sqrt() }
    }

    /// Distance to `value` in units of the standard error.
    pub fn z_score(&self, value: f64) -> f64 {
        (self.mean - value).abs() / self.std_err.max(f64::MIN_POSITIVE)
    }
}

impl TrajectoryEnsemble {
    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }

    /// Mean population of `level` (0 = G, 1 = W, 2 = D) of absorber `site` at sample `k`.
    pub fn site_population(&self, k: usize, site: usize, level: usize) -> Estimate {
        Estimate::from_samples(self.trajectories.iter().map(|tr| tr.populations[k][site][level]))
    }

    /// Dark population summed over the chain at sample `k`.
    pub fn total_dark(&self, k: usize) -> Estimate {
        Estimate::from_samples(self.trajectories.iter().map(|tr| tr.populations[k].iter().map(|p| p[2]).sum()))
    }

    /// Rydberg (W + D) population summed over the chain at sample `k`.
    pub fn total_rydberg(&self, k: usize) -> Estimate {
        Estimate::from_samples(
            self.trajectories.iter().map(|tr| tr.populations[k].iter().map(|p| p[1] + p[2]).sum()),
        )
    }
}

fn norm_sqr(psi: &[C64]) -> f64 {
    psi.iter().map(|x| x.norm_sqr()).sum()
}

fn site_populations(psi: &[C64], n_sub: usize) -> Vec<[f64; 3]> {
    let norm = norm_sqr(psi);
    let mut pops = vec![[0.0; 3]; n_sub];
    for (s, x) in psi.iter().enumerate() {
        let p = x.norm_sqr() / norm;
        if p == 0.0 {
            continue;
        }
        let mut rest = s;
        for site in pops.iter_mut() {
            site[rest % 3] += p;
            rest /= 3;
        }
    }
    pops
}

/// Relative accuracy of jump times located by bisection.
const JUMP_TIME_RTOL: f64 = 1e-10;

/// Time inside the last step where the squared norm falls to `threshold`,
/// by Illinois regula falsi on the log-norm with bisection as a fallback.
fn locate_jump(stepper: &DormandPrince<C64>, threshold: f64, buf: &mut [C64]) -> f64 {
    let ln_thr = threshold.ln();
    let mut g = |t: f64| {
        stepper.interpolate(t, buf);
        norm_sqr(buf).ln() - ln_thr
    };
    let (mut lo, mut hi) = (stepper.previous_time(), stepper.time());
    let (mut g_lo, mut g_hi) = (g(lo), g(hi));
    if !(g_lo > 0.0) {
        return lo;
    }
    let tol = JUMP_TIME_RTOL * (hi - lo).max(f64::MIN_POSITIVE);
    let mut side = 0;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mut t = if g_lo.is_finite() && g_hi.is_finite() && g_lo != g_hi {
            hi - g_hi * (hi - lo) / (g_hi - g_lo)
        } else {
            0.5 * (lo + hi)
        };
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let gt = g(t);
        if gt > 0.0 {
            lo = t;
            g_lo = gt;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = t;
            g_hi = gt;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
        if gt.abs() < 1e-13 {
            return t;
        }
    }
    hi
}

fn run_single(gen: &Generator, cfg: &ChainConfig, seed: u64, index: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let dim = gen.dim();
    let n = cfg.n_sub;
    let samples = &cfg.t_grid;
    let t0 = cfg.t_start();
    let t_end = cfg.t_end();

    let mut psi = vec![ZERO; dim];
    psi[0] = C64::new(1.0, 0.0);
    let mut threshold: f64 = rng.random();
    let mut records = Vec::new();
    let mut populations = Vec::with_capacity(samples.len());
    let mut next = 0;
    while next < samples.len() && samples[next] <= t0 {
        populations.push(site_populations(&psi, n));
        next += 1;
    }

    let mut knots: Vec<f64> = cfg.pulse.breakpoints().into_iter().filter(|&b| b > t0 && b < t_end).collect();
    knots.push(t_end);
    let mut stepper = DormandPrince::new(t0, psi.clone(), tolerances(cfg));
    let mut buf = vec![ZERO; dim];
    let mut scratch = vec![ZERO; dim];
    let mut seg_start = t0;
    for &seg_end in &knots {
        let edge = seg_end - 1e-12 * (1.0 + seg_end.abs());
        let mut f = |t: f64, y: &[C64], dy: &mut [C64]| {
            gen.trajectory_rhs(t.min(edge).max(seg_start), y, dy, &mut scratch)
        };
        while stepper.time() < seg_end {
            stepper.step(&mut f, seg_end)?;
            if norm_sqr(stepper.state()) >= threshold {
                while next < samples.len() && samples[next] <= stepper.time() {
                    stepper.interpolate(samples[next], &mut buf);
                    populations.push(site_populations(&buf, n));
                    next += 1;
                }
                continue;
            }
            // the norm crossed the threshold inside the last step
            let t_jump = locate_jump(&stepper, threshold, &mut buf);
            while next < samples.len() && samples[next] <= t_jump {
                stepper.interpolate(samples[next], &mut buf);
                populations.push(site_populations(&buf, n));
                next += 1;
            }
            stepper.interpolate(t_jump, &mut psi);
            let weights: Vec<f64> = gen
                .jumps()
                .iter()
                .map(|j| {
                    buf.fill(ZERO);
                    j.op.apply_add(C64::new(1.0, 0.0), &psi, &mut buf);
                    norm_sqr(&buf)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut pick: f64 = rng.random::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if pick < *w {
                    chosen = k;
                    break;
                }
                pick -= w;
            }
            let jump = &gen.jumps()[chosen];
            let mut after = jump.op.apply(&psi);
            let norm = norm_sqr(&after).sqrt();
            after.iter_mut().for_each(|x| *x /= norm);
            records.push(JumpRecord { time: t_jump, tag: jump.tag });
            threshold = rng.random();
            stepper.reset(t_jump, &after);
        }
        let y = stepper.state().to_vec();
        stepper.reset(seg_end, &y);
        seg_start = seg_end;
    }
    while populations.len() < samples.len() {
        populations.push(site_populations(stepper.state(), n));
    }
    let mut final_state = stepper.state().to_vec();
    let norm = norm_sqr(&final_state).sqrt();
    final_state.iter_mut().for_each(|x| *x /= norm);
    Ok(Trajectory { records, final_state, populations })
}

/// Runs `n_traj` Monte-Carlo wavefunction trajectories from the ground
/// state. Trajectory `k` draws from its own stream of a generator seeded
/// with `seed`, so results do not depend on scheduling.
pub fn run_trajectories(cfg: &ChainConfig, n_traj: usize, seed: u64) -> Result<TrajectoryEnsemble> {
    if n_traj == 0 {
        return Err(Error::invalid("n_traj must be >= 1"));
    }
    cfg.validate()?;
    let gen = Generator::new(cfg);
    let trajectories = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| run_single(&gen, cfg, seed, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble { n_sub: cfg.n_sub, seed, times: cfg.t_grid.clone(), trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouvillian::basis_projector;
    use crate::model::{PulseSpec, SuperatomParams};
    use rand::Rng;

    fn undriven(p: SuperatomParams, t_end: f64) -> ChainConfig {
        let pulse = PulseSpec::flat(t_end, 0.0);
        ChainConfig::new(1, p, pulse).unwrap()
    }

    #[test]
    fn single_emitter_bright_decay() {
        let p = SuperatomParams::new(0.35, 0.04, 2.4);
        let cfg = undriven(p, 3.0);
        let st = evolve_me(&cfg, &basis_projector(3, 1)).unwrap();
        for (k, t) in st.times.iter().enumerate() {
            assert!((st.diagonal(k, 1) - (-p.bright_decay() * t).exp()).abs() < 1e-6);
        }
        st.check_invariants().unwrap();
    }

    #[test]
    fn dark_branching_ratio() {
        let p = SuperatomParams::new(0.35, 0.0, 2.4);
        let cfg = undriven(p, 30.0).with_spacing(0.5).unwrap();
        let st = evolve_me(&cfg, &basis_projector(3, 1)).unwrap();
        let dd = st.diagonal(st.len() - 1, 2);
        assert!((dd - 2.4 / (0.35 + 2.4)).abs() < 1e-6, "{dd}");
    }

    #[test]
    fn trace_preserved_over_pulse() {
        for n in 1..=3 {
            let cfg = ChainConfig::new(n, SuperatomParams::FITTED_THREE, PulseSpec::experimental(40.0)).unwrap();
            let st = evolve_from_ground(&cfg).unwrap();
            st.check_invariants().unwrap();
        }
    }

    #[test]
    fn rejects_bad_initial_state() {
        let cfg = undriven(SuperatomParams::FITTED_ONE, 1.0);
        assert!(evolve_me(&cfg, &ground_state(9)).is_err());
        let mut half = ground_state(3);
        half[0] = C64::new(0.5, 0.0);
        assert!(evolve_me(&cfg, &half).is_err());
    }

    fn random_psd(d: usize, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<C64> = (0..d * d).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let mut m = vec![ZERO; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k].conj()).sum();
            }
        }
        m
    }

    #[test]
    fn conditional_propagation_is_linear_and_trace_preserving() {
        let cfg = ChainConfig::new(2, SuperatomParams::FITTED_TWO, PulseSpec::experimental(10.0)).unwrap();
        let a = random_psd(9, 1);
        let b = random_psd(9, 2);
        let sum: Vec<C64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = propagate_conditional(&a, 0.5, 2.5, &cfg).unwrap();
        let pb = propagate_conditional(&b, 0.5, 2.5, &cfg).unwrap();
        let ps = propagate_conditional(&sum, 0.5, 2.5, &cfg).unwrap();
        for k in 0..81 {
            assert!((ps[k] - pa[k] - pb[k]).norm() < 1e-9);
        }
        assert!((trace(&pa, 9) - trace(&a, 9)).norm() < 1e-9);
        assert_eq!(propagate_conditional(&a, 1.0, 1.0, &cfg).unwrap(), a);
        assert!(propagate_conditional(&a, 2.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn trajectories_are_reproducible() {
        let cfg = ChainConfig::new(2, SuperatomParams::FITTED_TWO, PulseSpec::experimental(10.0)).unwrap();
        let a = run_trajectories(&cfg, 20, 11).unwrap();
        let b = run_trajectories(&cfg, 20, 11).unwrap();
        for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(x.records, y.records);
        }
        assert!(run_trajectories(&cfg, 0, 1).is_err());
    }

    #[test]
    fn no_raman_jumps_without_raman_decay() {
        let p = SuperatomParams::new(0.35, 0.0, 2.4);
        let cfg = ChainConfig::new(2, p, PulseSpec::experimental(20.0)).unwrap();
        let ens = run_trajectories(&cfg, 50, 3).unwrap();
        assert!(ens.trajectories.iter().flat_map(|t| &t.records).all(|r| !r.tag.is_raman()));
        for tr in &ens.trajectories {
            assert!(tr.records.windows(2).all(|w| w[1].time > w[0].time));
            assert!(tr.records.iter().all(|r| r.time >= cfg.t_start() && r.time <= cfg.t_end()));
        }
    }

    #[test]
    fn trajectory_average_matches_master_equation() {
        let cfg = ChainConfig::new(1, SuperatomParams::FITTED_ONE, PulseSpec::experimental(10.0)).unwrap();
        let me = evolve_from_ground(&cfg).unwrap();
        let ens = run_trajectories(&cfg, 500, 5).unwrap();
        let k = me.len() - 1;
        for level in 0..3 {
            let est = ens.site_population(k, 0, level);
            assert!(est.z_score(me.diagonal(k, level)) < 4.0, "level {level}: {est:?}");
        }
    }

    #[test]
    fn norm_decreases_between_jumps() {
        let cfg = ChainConfig::new(2, SuperatomParams::FITTED_TWO, PulseSpec::experimental(20.0)).unwrap();
        let gen = Generator::new(&cfg);
        let mut psi = vec![ZERO; 9];
        psi[0] = C64::new(1.0, 0.0);
        let mut last = 1.0 + 1e-12;
        integrate(
            |t, y: &[C64], dy: &mut [C64]| gen.schrodinger_rhs(t, y, dy),
            0.0,
            psi,
            &cfg.pulse.breakpoints(),
            &cfg.t_grid,
            tolerances(&cfg),
            |_, _, y| {
                let n = norm_sqr(y);
                assert!(n <= last + 1e-12);
                last = n;
            },
        )
        .unwrap();
        assert!(last < 1.0);
    }
}
