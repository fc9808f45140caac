//! Parameter records, probe pulse envelopes and microscopic-to-effective rate
//! conversions.
//!
//! Units are fixed throughout the crate: rates in 1/µs, times in µs, and the
//! probe is described by its photon rate `R_in(t)` (photons per µs).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rates of one effective three-level absorber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperatomParams {
    /// Collective forward-emission rate κ.
    pub kappa: f64,
    /// Bright-to-dark dephasing rate γ_D.
    pub gamma_d: f64,
    /// Raman decay rate Γ out of both excited levels.
    pub gamma_raman: f64,
}

impl SuperatomParams {
    pub const fn new(kappa: f64, gamma_raman: f64, gamma_d: f64) -> Self {
        Self { kappa, gamma_d, gamma_raman }
    }

    /// Fitted rates reported for the one-absorber transmission data.
    pub const FITTED_ONE: Self = Self::new(0.494, 0.045, 2.329);
    /// Fitted rates reported for the two-absorber transmission data.
    pub const FITTED_TWO: Self = Self::new(0.330, 0.020, 3.215);
    /// Fitted rates reported for the three-absorber transmission data.
    pub const FITTED_THREE: Self = Self::new(0.350, 0.040, 2.393);

    /// The fitted set matching a chain of `n_sub` absorbers, if one was reported.
    pub fn fitted(n_sub: usize) -> Option<Self> {
        match n_sub {
            1 => Some(Self::FITTED_ONE),
            2 => Some(Self::FITTED_TWO),
            3 => Some(Self::FITTED_THREE),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("gamma_d", self.gamma_d),
            ("gamma_raman", self.gamma_raman),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Total decay rate out of the bright state.
    pub fn bright_decay(&self) -> f64 {
        self.kappa + self.gamma_raman + self.gamma_d
    }
}

/// A probe rate envelope given by samples, linearly interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledEnvelope {
    pub times_us: Vec<f64>,
    pub rates: Vec<f64>,
}

impl SampledEnvelope {
    fn validate(&self) -> Result<()> {
        if self.times_us.len() < 2 || self.times_us.len() != self.rates.len() {
            return Err(Error::config(
                "sampled pulse needs at least two (time, rate) pairs of equal length",
            ));
        }
        if self.times_us.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("sampled pulse times must be strictly increasing"));
        }
        if self.rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("sampled pulse rates must be finite and >= 0"));
        }
        if self.area() <= 0.0 {
            return Err(Error::config("sampled pulse has zero area"));
        }
        Ok(())
    }

    /// Trapezoidal area, exact for the linear interpolant.
    fn area(&self) -> f64 {
        self.times_us
            .windows(2)
            .zip(self.rates.windows(2))
            .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
            .sum()
    }

    fn eval(&self, t: f64) -> f64 {
        let ts = &self.times_us;
        if t < ts[0] || t > ts[ts.len() - 1] {
            return 0.0;
        }
        let k = ts.partition_point(|&x| x <= t).clamp(1, ts.len() - 1);
        let (t0, t1) = (ts[k - 1], ts[k]);
        let w = (t - t0) / (t1 - t0);
        self.rates[k - 1] * (1.0 - w) + self.rates[k] * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseShape {
    /// Cosine-tapered flat top applied to the photon rate.
    Tukey,
    /// Rectangular envelope with instant edges.
    Flat,
    /// Measured envelope, rescaled to the requested mean photon number.
    Samples(SampledEnvelope),
}

/// Probe pulse: envelope of the incoming photon rate `R_in(t)`.
///
/// For Tukey pulses `fwhm` is the distance between the half-maximum points,
/// which sit at the ramp midpoints, so the plateau lasts `fwhm - ramp` and the
/// full support `fwhm + ramp`. Flat pulses ignore `ramp` and last `fwhm`.
/// Sampled pulses ignore `fwhm`, `ramp` and `start_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub shape: PulseShape,
    pub fwhm: f64,
    pub ramp: f64,
    pub mean_photons: f64,
    pub start_time: f64,
}

impl PulseSpec {
    pub fn tukey(fwhm: f64, ramp: f64, mean_photons: f64) -> Self {
        Self { shape: PulseShape::Tukey, fwhm, ramp, mean_photons, start_time: 0.0 }
    }

    /// The probe used in the transmission experiments: 2.5 µs FWHM, 1 µs ramps.
    pub fn experimental(mean_photons: f64) -> Self {
        Self::tukey(2.5, 1.0, mean_photons)
    }

    /// Rectangular pulse of duration `tau` at constant rate `rate`.
    pub fn flat(tau: f64, rate: f64) -> Self {
        Self { shape: PulseShape::Flat, fwhm: tau, ramp: 0.0, mean_photons: rate * tau, start_time: 0.0 }
    }

    pub fn sampled(envelope: SampledEnvelope, mean_photons: f64) -> Self {
        Self { shape: PulseShape::Samples(envelope), fwhm: 0.0, ramp: 0.0, mean_photons, start_time: 0.0 }
    }

    pub fn with_start(mut self, start_time: f64) -> Self {
        self.start_time = start_time;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean_photons.is_finite() || self.mean_photons < 0.0 {
            return Err(Error::config("mean_photons must be finite and >= 0"));
        }
        match &self.shape {
            PulseShape::Tukey => {
                if !(self.ramp >= 0.0) || !(self.fwhm > 0.0) || self.fwhm < self.ramp {
                    return Err(Error::config(format!(
                        "tukey pulse needs fwhm > 0 and 0 <= ramp <= fwhm (fwhm = {}, ramp = {})",
                        self.fwhm, self.ramp
                    )));
                }
            }
            PulseShape::Flat => {
                if !(self.fwhm > 0.0) {
                    return Err(Error::config("flat pulse needs a positive duration"));
                }
            }
            PulseShape::Samples(env) => env.validate()?,
        }
        if !self.start_time.is_finite() {
            return Err(Error::config("start_time must be finite"));
        }
        Ok(())
    }

    /// Support `[begin, end]` outside of which the rate vanishes.
    pub fn support(&self) -> (f64, f64) {
        match &self.shape {
            PulseShape::Tukey => (self.start_time, self.start_time + self.fwhm + self.ramp),
            PulseShape::Flat => (self.start_time, self.start_time + self.fwhm),
            PulseShape::Samples(env) => (env.times_us[0], env.times_us[env.times_us.len() - 1]),
        }
    }

    /// Plateau rate for Tukey and flat pulses; the maximum for sampled ones.
    pub fn peak_rate(&self) -> f64 {
        match &self.shape {
            PulseShape::Tukey | PulseShape::Flat => self.mean_photons / self.fwhm,
            PulseShape::Samples(env) => {
                let scale = self.mean_photons / env.area();
                env.rates.iter().fold(0.0_f64, |m, r| m.max(*r)) * scale
            }
        }
    }

    /// Incoming photon rate `R_in(t)`.
    pub fn rate(&self, t: f64) -> f64 {
        let (begin, end) = self.support();
        match &self.shape {
            PulseShape::Tukey => {
                if t < begin || t > end {
                    return 0.0;
                }
                let peak = self.peak_rate();
                let ramp = self.ramp;
                let rise = t - begin;
                let fall = end - t;
                let edge = rise.min(fall);
                if ramp > 0.0 && edge < ramp {
                    peak * 0.5 * (1.0 - (PI * edge / ramp).cos())
                } else {
                    peak
                }
            }
            PulseShape::Flat => {
                if t >= begin && t < end {
                    self.peak_rate()
                } else {
                    0.0
                }
            }
            PulseShape::Samples(env) => env.eval(t) * self.mean_photons / env.area(),
        }
    }

    /// Coherent probe amplitude, taken real and non-negative: `α = √R_in`.
    pub fn amplitude(&self, t: f64) -> f64 {
        self.rate(t).sqrt()
    }

    /// Times at which the envelope or one of its derivatives is discontinuous.
    pub fn breakpoints(&self) -> Vec<f64> {
        let (begin, end) = self.support();
        let mut pts = match &self.shape {
            PulseShape::Tukey => vec![begin, begin + self.ramp, end - self.ramp, end],
            PulseShape::Flat => vec![begin, end],
            PulseShape::Samples(env) => env.times_us.clone(),
        };
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        pts
    }
}

/// Rates shared by the whole chain or given per absorber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChainParams {
    Shared(SuperatomParams),
    PerAbsorber(Vec<SuperatomParams>),
}

impl ChainParams {
    pub fn site(&self, i: usize) -> SuperatomParams {
        match self {
            ChainParams::Shared(p) => *p,
            ChainParams::PerAbsorber(ps) => ps[i],
        }
    }

    /// Largest value of each rate over the chain.
    fn maxima(&self) -> SuperatomParams {
        match self {
            ChainParams::Shared(p) => *p,
            ChainParams::PerAbsorber(ps) => ps.iter().fold(SuperatomParams::new(0.0, 0.0, 0.0), |m, p| {
                SuperatomParams::new(
                    m.kappa.max(p.kappa),
                    m.gamma_raman.max(p.gamma_raman),
                    m.gamma_d.max(p.gamma_d),
                )
            }),
        }
    }
}

impl From<SuperatomParams> for ChainParams {
    fn from(p: SuperatomParams) -> Self {
        ChainParams::Shared(p)
    }
}

/// Numerical options shared by every propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the internal step, µs.
    pub max_step: f64,
    pub n_traj: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_step: 0.1, n_traj: 1000, seed: 0 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0) || !(self.atol > 0.0) || !(self.max_step > 0.0) {
            return Err(Error::config("solver tolerances and max_step must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to simulate one chain of absorbers driven by one pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_sub: usize,
    pub params: ChainParams,
    pub pulse: PulseSpec,
    /// Strictly increasing output sample times, µs.
    pub t_grid: Vec<f64>,
    pub solver: SolverOptions,
}

/// Minimum number of grid points per shortest dynamical time scale.
pub const POINTS_PER_TIMESCALE: f64 = 40.0;
/// Upper bound on the default output spacing, µs.
pub const MAX_GRID_SPACING: f64 = 0.01;

impl ChainConfig {
    /// Builds a configuration with the default output grid over the pulse support.
    pub fn new(n_sub: usize, params: impl Into<ChainParams>, pulse: PulseSpec) -> Result<Self> {
        let params = params.into();
        let (begin, end) = pulse.support();
        let mut cfg = Self { n_sub, params, pulse, t_grid: vec![begin, end], solver: SolverOptions::default() };
        cfg.t_grid = cfg.default_grid(begin, end, MAX_GRID_SPACING);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_grid(mut self, t_grid: Vec<f64>) -> Result<Self> {
        self.t_grid = t_grid;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the grid by the default one with spacing at most `max_dt`.
    pub fn with_spacing(mut self, max_dt: f64) -> Result<Self> {
        let (begin, end) = (self.t_grid[0], self.t_grid[self.t_grid.len() - 1]);
        self.t_grid = self.default_grid(begin, end, max_dt);
        self.validate()?;
        Ok(self)
    }

    /// Extends the default grid past the pulse end by `tail` µs.
    pub fn with_tail(mut self, tail: f64) -> Result<Self> {
        let begin = self.t_grid[0];
        let end = self.t_grid[self.t_grid.len() - 1] + tail;
        let dt = self.t_grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        self.t_grid = self.default_grid(begin, end, dt.max(1e-6));
        self.validate()?;
        Ok(self)
    }

    pub fn with_solver(mut self, solver: SolverOptions) -> Self {
        self.solver = solver;
        self
    }

    /// Grid over `[begin, end]` containing every pulse breakpoint, with spacing
    /// at most `max_dt` and at least [`POINTS_PER_TIMESCALE`] points per
    /// shortest dynamical time scale.
    pub fn default_grid(&self, begin: f64, end: f64, max_dt: f64) -> Vec<f64> {
        let m = self.params.maxima();
        let fastest = [m.kappa, m.gamma_d, m.gamma_raman, (m.kappa * self.pulse.peak_rate()).sqrt()]
            .into_iter()
            .fold(0.0_f64, f64::max);
        let dt = if fastest > 0.0 { max_dt.min(1.0 / (POINTS_PER_TIMESCALE * fastest)) } else { max_dt };
        let mut knots: Vec<f64> = self
            .pulse
            .breakpoints()
            .into_iter()
            .filter(|&b| b > begin && b < end)
            .collect();
        knots.insert(0, begin);
        knots.push(end);
        segmented_grid(&knots, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sub == 0 {
            return Err(Error::config("n_sub must be >= 1"));
        }
        match &self.params {
            ChainParams::Shared(p) => p.validate()?,
            ChainParams::PerAbsorber(ps) => {
                if ps.len() != self.n_sub {
                    return Err(Error::config(format!(
                        "per-absorber parameter list has {} entries for n_sub = {}",
                        ps.len(),
                        self.n_sub
                    )));
                }
                ps.iter().try_for_each(SuperatomParams::validate)?;
            }
        }
        self.pulse.validate()?;
        self.solver.validate()?;
        if self.t_grid.len() < 2 {
            return Err(Error::config("time grid needs at least two points"));
        }
        if self.t_grid.windows(2).any(|w| !(w[1] > w[0])) || self.t_grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("time grid must be finite and strictly increasing"));
        }
        let (begin, end) = self.pulse.support();
        let tol = 1e-9;
        if self.t_grid[0] > begin + tol || self.t_grid[self.t_grid.len() - 1] < end - tol {
            return Err(Error::config(format!(
                "time grid [{}, {}] does not cover the pulse support [{begin}, {end}]",
                self.t_grid[0],
                self.t_grid[self.t_grid.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn site(&self, i: usize) -> SuperatomParams {
        self.params.site(i)
    }

    pub fn t_start(&self) -> f64 {
        self.t_grid[0]
    }

    pub fn t_end(&self) -> f64 {
        self.t_grid[self.t_grid.len() - 1]
    }

    /// Whether any absorber has a Raman channel.
    pub fn has_raman(&self) -> bool {
        (0..self.n_sub).any(|i| self.site(i).gamma_raman > 0.0)
    }

    /// Hilbert-space dimension `3^n_sub`.
    pub fn dim(&self) -> usize {
        3usize.pow(self.n_sub as u32)
    }
}

/// Uniform sub-grids between consecutive knots, each with spacing <= `dt`.
pub fn segmented_grid(knots: &[f64], dt: f64) -> Vec<f64> {
    let mut grid = vec![knots[0]];
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 1e-12 {
            continue;
        }
        let steps = ((b - a) / dt - 1e-9).ceil().max(1.0) as usize;
        grid.extend((1..=steps).map(|k| if k == steps { b } else { a + (b - a) * k as f64 / steps as f64 }));
    }
    grid
}

/// Ensemble-level parameters from which κ and Γ follow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroscopicParams {
    pub n_atoms: f64,
    /// Single-atom single-photon coupling g₀.
    pub g0: f64,
    /// Control Rabi frequency Ω_c.
    pub omega_c: f64,
    /// Intermediate-state detuning Δ.
    pub delta: f64,
    /// Natural linewidth Γ_e of the intermediate state.
    pub gamma_e: f64,
    pub c6: f64,
    pub linewidth: f64,
}

/// κ = N g₀² Ω_c²/(2Δ)² and Γ = Γ_e Ω_c²/(2Δ)². The returned `gamma_d` is zero;
/// dephasing is not determined by these parameters.
pub fn effective_rates(m: &MicroscopicParams) -> Result<SuperatomParams> {
    if m.delta == 0.0 || !m.delta.is_finite() {
        return Err(Error::invalid("detuning must be non-zero"));
    }
    if !(m.n_atoms >= 1.0) {
        return Err(Error::invalid("n_atoms must be >= 1"));
    }
    if [m.g0, m.omega_c, m.gamma_e].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("couplings and linewidths must be >= 0"));
    }
    let ratio = m.omega_c * m.omega_c / (4.0 * m.delta * m.delta);
    Ok(SuperatomParams {
        kappa: m.n_atoms * m.g0 * m.g0 * ratio,
        gamma_d: 0.0,
        gamma_raman: m.gamma_e * ratio,
    })
}

/// Distance at which the van-der-Waals shift `C6/r^6` equals `linewidth`.
pub fn blockade_radius(c6: f64, linewidth: f64) -> Result<f64> {
    if !(c6 > 0.0) || !(linewidth > 0.0) {
        return Err(Error::invalid("c6 and linewidth must be positive"));
    }
    Ok((c6 / linewidth).powf(1.0 / 6.0))
}

/// Van-der-Waals shift at separation `r`.
pub fn vdw_shift(c6: f64, r: f64) -> f64 {
    c6 / r.powi(6)
}
