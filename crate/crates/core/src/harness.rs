//! Configuration files, subcommand drivers, parameter sweeps and output.
//!
//! A run is described by a TOML file whose keys carry their units
//! (`kappa_per_us`, `fwhm_us`, ...). Every driver returns a [`RunOutput`]:
//! a set of long-format tables plus a JSON summary, written as CSV (12
//! significant digits) or JSON next to a `<command>.meta.json` sidecar that
//! records the resolved configuration, its SHA-256 and the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::counting::{default_max_count, evolve_counting, raman_moments, trajectory_count_distribution, trajectory_mean_count};
use crate::detection::{ion_statistics, DetectionParams, DETECTION_WINDOW_US};
use crate::error::{Error, Result};
use crate::fit::{fit_params, FitOptions, TransmissionDataset, TransmissionTrace};
use crate::model::{ChainConfig, ChainParams, PulseShape, PulseSpec, SampledEnvelope, SolverOptions, SuperatomParams};
use crate::observables::{conservation_residual_of, cumulative_trapezoid, g2_map, pulse_metrics, simulate, trapezoid};
use crate::propagator::run_trajectories;
use crate::reduced::{evolve_rate_equation, gamma_eff};

pub const TOOL_NAME: &str = "superatom";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// configuration file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsorberSection {
    pub kappa_per_us: f64,
    pub gamma_d_per_us: f64,
    #[serde(default)]
    pub gamma_raman_per_us: f64,
}

impl From<&AbsorberSection> for SuperatomParams {
    fn from(a: &AbsorberSection) -> Self {
        SuperatomParams::new(a.kappa_per_us, a.gamma_raman_per_us, a.gamma_d_per_us)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Tukey,
    Flat,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSection {
    pub shape: PulseKind,
    /// Tukey: distance between half-maximum points.
    pub fwhm_us: Option<f64>,
    pub ramp_us: Option<f64>,
    /// Flat: pulse length.
    pub duration_us: Option<f64>,
    pub mean_photons: Option<f64>,
    /// Flat: constant input rate, alternative to `mean_photons`.
    pub rate_per_us: Option<f64>,
    #[serde(default)]
    pub start_us: f64,
    pub sample_times_us: Option<Vec<f64>>,
    pub sample_rates_per_us: Option<Vec<f64>>,
}

impl PulseSection {
    pub fn to_spec(&self) -> Result<PulseSpec> {
        let spec = match self.shape {
            PulseKind::Tukey => {
                let n = self.mean_photons.ok_or_else(|| Error::config("tukey pulse needs mean_photons"))?;
                PulseSpec::tukey(self.fwhm_us.unwrap_or(2.5), self.ramp_us.unwrap_or(1.0), n).with_start(self.start_us)
            }
            PulseKind::Flat => {
                let tau = self.duration_us.ok_or_else(|| Error::config("flat pulse needs duration_us"))?;
                let rate = match (self.rate_per_us, self.mean_photons) {
                    (Some(r), None) => r,
                    (None, Some(n)) => n / tau,
                    _ => return Err(Error::config("flat pulse needs exactly one of rate_per_us and mean_photons")),
                };
                PulseSpec::flat(tau, rate).with_start(self.start_us)
            }
            PulseKind::Samples => {
                let (Some(t), Some(r)) = (&self.sample_times_us, &self.sample_rates_per_us) else {
                    return Err(Error::config("sampled pulse needs sample_times_us and sample_rates_per_us"));
                };
                let n = self.mean_photons.unwrap_or_else(|| trapezoid(t, r));
                PulseSpec::sampled(SampledEnvelope { times_us: t.clone(), rates: r.clone() }, n)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub max_spacing_us: f64,
    /// Time simulated after the pulse ends.
    pub tail_us: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { max_spacing_us: crate::model::MAX_GRID_SPACING, tail_us: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub rtol: f64,
    pub atol: f64,
    pub max_step_us: f64,
    pub n_traj: usize,
    pub seed: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self { rtol: s.rtol, atol: s.atol, max_step_us: s.max_step, n_traj: s.n_traj, seed: s.seed }
    }
}

impl From<SolverSection> for SolverOptions {
    fn from(s: SolverSection) -> Self {
        SolverOptions { rtol: s.rtol, atol: s.atol, max_step: s.max_step_us, n_traj: s.n_traj, seed: s.seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G2Section {
    pub step_us: f64,
    /// Defaults to the pulse support.
    pub start_us: Option<f64>,
    pub end_us: Option<f64>,
}

impl Default for G2Section {
    fn default() -> Self {
        Self { step_us: 0.05, start_us: None, end_us: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountSection {
    /// Register size; estimated from the mean Raman loss when absent.
    pub max_count: Option<usize>,
    /// Also estimate the distribution from Monte-Carlo trajectories.
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    /// One value for every absorber, or one per absorber.
    pub eta: Vec<f64>,
    pub p2: Vec<f64>,
    pub noise_scale: Vec<f64>,
    pub dark_count_rate_per_us: f64,
    pub window_us: f64,
    /// Input photon numbers to evaluate; defaults to the pulse's.
    pub photon_numbers: Vec<f64>,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            eta: vec![0.2],
            p2: vec![0.0],
            noise_scale: vec![1.0],
            dark_count_rate_per_us: crate::detection::DARK_COUNT_RATE_PER_US,
            window_us: DETECTION_WINDOW_US,
            photon_numbers: Vec::new(),
        }
    }
}

impl DetectionSection {
    pub fn params(&self, n_sub: usize) -> Result<Vec<DetectionParams>> {
        let pick = |name: &str, v: &[f64], i: usize| -> Result<f64> {
            match v.len() {
                1 => Ok(v[0]),
                n if n == n_sub => Ok(v[i]),
                n => Err(Error::config(format!("detection.{name} has {n} entries for {n_sub} absorbers"))),
            }
        };
        (0..n_sub)
            .map(|i| {
                let d = DetectionParams {
                    eta: pick("eta", &self.eta, i)?,
                    p2: pick("p2", &self.p2, i)?,
                    dark_mean: self.dark_count_rate_per_us * self.window_us,
                    noise_scale: pick("noise_scale", &self.noise_scale, i)?,
                };
                d.validate()?;
                Ok(d)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// CSV with columns `file,mean_photons_in`; paths relative to it.
    pub manifest: PathBuf,
    /// Starting point; defaults to the `[absorber]` rates.
    pub init: Option<AbsorberSection>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_xtol")]
    pub xtol: f64,
}

fn default_max_iter() -> usize {
    FitOptions::default().max_iter
}

fn default_xtol() -> f64 {
    FitOptions::default().xtol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    GammaD,
    RIn,
    Kappa,
    GammaRaman,
    NSub,
    Tau,
}

impl SweepParam {
    pub fn column(&self) -> &'static str {
        match self {
            SweepParam::GammaD => "gamma_d_per_us",
            SweepParam::RIn => "r_in_per_us",
            SweepParam::Kappa => "kappa_per_us",
            SweepParam::GammaRaman => "gamma_raman_per_us",
            SweepParam::NSub => "n_sub",
            SweepParam::Tau => "tau_us",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub name: SweepParam,
    pub values: Option<Vec<f64>>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub points: Option<usize>,
    #[serde(default)]
    pub log: bool,
}

impl AxisSection {
    pub fn grid(&self) -> Result<Vec<f64>> {
        let values = match (&self.values, self.min, self.max, self.points) {
            (Some(v), None, None, None) => v.clone(),
            (None, Some(a), Some(b), Some(n)) if n >= 1 => {
                if n == 1 {
                    vec![a]
                } else if self.log {
                    if !(a > 0.0 && b > 0.0) {
                        return Err(Error::config("log-spaced axis needs positive bounds"));
                    }
                    (0..n).map(|k| (a.ln() + (b.ln() - a.ln()) * k as f64 / (n - 1) as f64).exp()).collect()
                } else {
                    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
                }
            }
            _ => return Err(Error::config("axis needs either `values` or `min`, `max` and `points`")),
        };
        if values.is_empty() || values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("axis {:?} must be non-empty and strictly increasing", self.name)));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    FinalDarkPopulation,
    FinalRydbergPopulation,
    NSubtracted,
    NOut,
    RamanLoss,
    ConservationResidual,
}

impl Observable {
    pub fn name(&self) -> &'static str {
        match self {
            Observable::FinalDarkPopulation => "final_dark_population",
            Observable::FinalRydbergPopulation => "final_rydberg_population",
            Observable::NSubtracted => "n_subtracted",
            Observable::NOut => "n_out",
            Observable::RamanLoss => "raman_loss",
            Observable::ConservationResidual => "conservation_residual",
        }
    }

    /// Evaluates the observable with one master-equation run.
    pub fn evaluate(&self, cfg: &ChainConfig) -> Result<f64> {
        let tr = simulate(cfg)?;
        let last = tr.populations.last().expect("grid has at least two points");
        Ok(match self {
            Observable::FinalDarkPopulation => last.iter().map(|p| p[2]).sum(),
            Observable::FinalRydbergPopulation => last.iter().map(|p| p[1] + p[2]).sum(),
            Observable::NSubtracted => pulse_metrics(&tr).n_subtracted,
            Observable::NOut => pulse_metrics(&tr).n_out,
            Observable::RamanLoss => raman_loss(cfg, &tr.times, &tr.populations),
            Observable::ConservationResidual => conservation_residual_of(&tr, cfg),
        })
    }
}

fn raman_loss(cfg: &ChainConfig, times: &[f64], pops: &[Vec<[f64; 3]>]) -> f64 {
    (0..cfg.n_sub)
        .map(|i| {
            let p: Vec<f64> = pops.iter().map(|s| s[i][1] + s[i][2]).collect();
            cfg.site(i).gamma_raman * trapezoid(times, &p)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis1: AxisSection,
    pub axis2: AxisSection,
    #[serde(default = "default_observable")]
    pub observable: Observable,
}

fn default_observable() -> Observable {
    Observable::FinalDarkPopulation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainCompareSection {
    pub n_values: Vec<usize>,
    pub gamma_raman_per_us: Vec<f64>,
    /// Larger chains are simulated with trajectories.
    pub max_master_equation_n: usize,
    pub n_traj: usize,
}

impl Default for ChainCompareSection {
    fn default() -> Self {
        Self { n_values: vec![1, 2, 4, 8], gamma_raman_per_us: vec![0.0, 0.04], max_master_equation_n: 4, n_traj: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub n_sub: usize,
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub chain: ChainSection,
    /// Rates shared by every absorber.
    pub absorber: Option<AbsorberSection>,
    /// Per-absorber rates, one entry per absorber.
    pub absorbers: Option<Vec<AbsorberSection>>,
    pub pulse: PulseSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub g2: G2Section,
    #[serde(default)]
    pub count: CountSection,
    #[serde(default)]
    pub detection: DetectionSection,
    pub fit: Option<FitSection>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub chain_compare: ChainCompareSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.chain_config()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn params(&self) -> Result<ChainParams> {
        match (&self.absorber, &self.absorbers) {
            (Some(a), None) => Ok(ChainParams::Shared(a.into())),
            (None, Some(list)) => Ok(ChainParams::PerAbsorber(list.iter().map(Into::into).collect())),
            _ => Err(Error::config("give exactly one of [absorber] and [[absorbers]]")),
        }
    }

    /// Simulation configuration described by the file.
    pub fn chain_config(&self) -> Result<ChainConfig> {
        build_chain(self.chain.n_sub, self.params()?, self.pulse.to_spec()?, &self.grid, self.solver.into())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Chain configuration on the default grid for `grid` settings.
pub fn build_chain(
    n_sub: usize,
    params: ChainParams,
    pulse: PulseSpec,
    grid: &GridSection,
    solver: SolverOptions,
) -> Result<ChainConfig> {
    if !(grid.max_spacing_us > 0.0) || !(grid.tail_us >= 0.0) {
        return Err(Error::config("grid spacing must be > 0 and tail >= 0"));
    }
    let mut cfg = ChainConfig::new(n_sub, params, pulse)?.with_solver(solver).with_spacing(grid.max_spacing_us)?;
    if grid.tail_us > 0.0 {
        cfg = cfg.with_tail(grid.tail_us)?;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// tables

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Missing,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        if x.is_nan() {
            Cell::Missing
        } else {
            Cell::Num(x)
        }
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(i64::from(x))
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::from)
    }
}

/// Formats a number with 12 significant digits.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { String::new() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("round trip");
    let mut s = String::new();
    write!(s, "{rounded}").expect("write to string");
    s
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => format_number(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) if x.is_finite() => json!(x),
            Cell::Num(_) | Cell::Missing => Value::Null,
            Cell::Int(i) => json!(i),
            Cell::Text(s) => json!(s),
        }
    }
}

/// A named long-format table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Object(self.columns.iter().cloned().zip(r.iter().map(Cell::json)).collect()))
            .collect();
        json!({ "name": self.name, "columns": self.columns, "rows": rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: Command, cfg: &RunConfig) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.name().into(),
            config_sha256: cfg.hash(),
            seed: cfg.solver.seed,
            config: cfg.clone(),
        }
    }
}

/// Result of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub provenance: Provenance,
    pub tables: Vec<Table>,
    pub summary: Value,
    /// False only for a fit that hit its iteration limit.
    pub converged: bool,
}

impl RunOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes every table and the `<command>.meta.json` sidecar into `dir`;
    /// returns the paths written.
    pub fn write(&self, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let meta = json!({ "provenance": self.provenance, "summary": self.summary, "converged": self.converged });
        match format {
            OutputFormat::Csv => {
                for t in &self.tables {
                    let path = dir.join(format!("{}.csv", t.name));
                    t.write_csv(&path)?;
                    written.push(path);
                }
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{}.json", self.provenance.command));
                let tables: Vec<Value> = self.tables.iter().map(Table::to_json).collect();
                let doc = json!({ "provenance": self.provenance, "summary": self.summary, "tables": tables });
                fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
                written.push(path);
            }
        }
        let path = dir.join(format!("{}.meta.json", self.provenance.command));
        fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
        written.push(path);
        Ok(written)
    }
}

// ---------------------------------------------------------------------------
// subcommands

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    G2,
    Count,
    Adiabatic,
    Ions,
    Fit,
    Sweep,
    Chain,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::G2 => "g2",
            Command::Count => "count",
            Command::Adiabatic => "adiabatic",
            Command::Ions => "ions",
            Command::Fit => "fit",
            Command::Sweep => "sweep",
            Command::Chain => "chain",
        }
    }
}

/// Runs a subcommand. Relative paths in the configuration are resolved
/// against `base_dir`.
pub fn run(command: Command, cfg: &RunConfig, base_dir: &Path) -> Result<RunOutput> {
    let provenance = Provenance::new(command, cfg);
    let (tables, summary, converged) = match command {
        Command::Simulate => run_simulate(cfg)?,
        Command::G2 => run_g2(cfg)?,
        Command::Count => run_count(cfg)?,
        Command::Adiabatic => run_adiabatic(cfg)?,
        Command::Ions => run_ions(cfg)?,
        Command::Fit => run_fit(cfg, base_dir)?,
        Command::Sweep => run_sweep_command(cfg)?,
        Command::Chain => run_chain(cfg)?,
    };
    Ok(RunOutput { provenance, tables, summary, converged })
}

type Parts = (Vec<Table>, Value, bool);

fn population_columns(n_sub: usize) -> Vec<String> {
    (0..n_sub).flat_map(|i| ["p_g", "p_w", "p_d"].map(|l| format!("{l}_{i}"))).collect()
}

fn run_simulate(cfg: &RunConfig) -> Result<Parts> {
    let chain = cfg.chain_config()?;
    let tr = simulate(&chain)?;
    let mut columns = vec!["time_us".to_string(), "rate_in_per_us".into(), "rate_out_per_us".into()];
    columns.extend(population_columns(chain.n_sub));
    let mut trace = Table { name: "trace".into(), columns, rows: Vec::new() };
    for k in 0..tr.times.len() {
        let mut row = vec![Cell::from(tr.times[k]), tr.r_in[k].into(), tr.r_out[k].into()];
        row.extend(tr.populations[k].iter().flat_map(|p| p.map(Cell::from)));
        trace.push(row);
    }
    let m = pulse_metrics(&tr);
    let loss = raman_loss(&chain, &tr.times, &tr.populations);
    let residual = conservation_residual_of(&tr, &chain);
    let mut metrics = Table::new("metrics", &["quantity", "value"]);
    for (name, v) in [
        ("n_in", m.n_in),
        ("n_out", m.n_out),
        ("n_subtracted", m.n_subtracted),
        ("raman_loss", loss),
        ("conservation_residual", residual),
    ] {
        metrics.push(vec![name.into(), v.into()]);
    }
    let summary = json!({ "n_in": m.n_in, "n_out": m.n_out, "n_subtracted": m.n_subtracted,
        "raman_loss": loss, "conservation_residual": residual });
    Ok((vec![trace, metrics], summary, true))
}

fn run_g2(cfg: &RunConfig) -> Result<Parts> {
    let chain = cfg.chain_config()?;
    let (begin, end) = chain.pulse.support();
    let a = cfg.g2.start_us.unwrap_or(begin).max(chain.t_start());
    let b = cfg.g2.end_us.unwrap_or(end).min(chain.t_end());
    if !(cfg.g2.step_us > 0.0) || !(b > a) {
        return Err(Error::config("g2 window must be non-empty with a positive step"));
    }
    let n = ((b - a) / cfg.g2.step_us).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|k| a + (b - a) * k as f64 / n.max(1) as f64).collect();
    let map = g2_map(&chain, &grid)?;
    let mut table = Table::new("g2", &["t1_us", "t2_us", "g2", "masked"]);
    for (i, t1) in map.times.iter().enumerate() {
        for (j, t2) in map.times.iter().enumerate() {
            table.push(vec![(*t1).into(), (*t2).into(), map.values[i][j].into(), map.masked[i][j].into()]);
        }
    }
    let diag = map.diagonal();
    let summary = json!({ "points": grid.len(), "max_equal_time_g2": diag.iter().copied().filter(|x| x.is_finite()).fold(f64::NAN, f64::max) });
    Ok((vec![table], summary, true))
}

fn run_count(cfg: &RunConfig) -> Result<Parts> {
    let chain = cfg.chain_config()?;
    let m = match cfg.count.max_count {
        Some(m) => m,
        None => default_max_count(&chain)?,
    };
    let cs = evolve_counting(&chain, m)?;
    let moments = raman_moments(&cs);
    let tr = simulate(&chain)?;
    let mut mom = Table::new(
        "raman_moments",
        &["time_us", "mean", "variance", "std", "rydberg_population", "absorbed"],
    );
    for k in 0..cs.times.len() {
        let ryd: f64 = tr.populations[k].iter().map(|p| p[1] + p[2]).sum();
        mom.push(vec![
            cs.times[k].into(),
            moments.mean[k].into(),
            moments.variance[k].into(),
            moments.variance[k].max(0.0).sqrt().into(),
            ryd.into(),
            (ryd + moments.mean[k]).into(),
        ]);
    }
    let mut dist = Table::new("raman_distribution", &["time_us", "count", "probability"]);
    for (k, t) in cs.times.iter().enumerate() {
        for (c, p) in cs.probabilities[k].iter().enumerate() {
            dist.push(vec![(*t).into(), c.into(), (*p).into()]);
        }
    }
    let mut tables = vec![mom, dist];
    let mut summary = json!({ "max_count": m, "overflow": cs.overflow(),
        "final_mean": moments.mean.last(), "final_variance": moments.variance.last() });
    if cfg.count.trajectories {
        let ens = run_trajectories(&chain, cfg.solver.n_traj, cfg.solver.seed)?;
        let t_end = chain.t_end() + 1e-12;
        let d = trajectory_count_distribution(&ens, t_end)?;
        let mut tt = Table::new("trajectory_distribution", &["count", "probability", "std_error"]);
        let se = d.std_errors.clone().unwrap_or_default();
        for (c, p) in d.probabilities.iter().enumerate() {
            tt.push(vec![c.into(), (*p).into(), se[c].into()]);
        }
        tables.push(tt);
        let est = trajectory_mean_count(&ens, t_end);
        summary["trajectory_mean"] = json!(est.mean);
        summary["trajectory_mean_std_error"] = json!(est.std_err);
        summary["n_traj"] = json!(cfg.solver.n_traj);
    }
    Ok((tables, summary, true))
}

fn run_adiabatic(cfg: &RunConfig) -> Result<Parts> {
    let chain = cfg.chain_config()?;
    let rate = evolve_rate_equation(&chain)?;
    let me = simulate(&chain)?;
    let p = chain.site(0);
    let mut table = Table::new(
        "adiabatic",
        &["time_us", "rate_in_per_us", "gamma_eff_per_us", "rho_gg_rate_model", "rho_dd_rate_model", "p_d_master_equation"],
    );
    let mut worst: f64 = 0.0;
    for k in 0..rate.times.len() {
        let r = chain.pulse.rate(rate.times[k]);
        let pd = me.populations[k][0][2];
        worst = worst.max((rate.rho_dd[k] - pd).abs());
        table.push(vec![
            rate.times[k].into(),
            r.into(),
            gamma_eff(&p, r).into(),
            rate.rho_gg[k].into(),
            rate.rho_dd[k].into(),
            pd.into(),
        ]);
    }
    let last = rate.times.len() - 1;
    let summary = json!({ "final_rho_dd_rate_model": rate.rho_dd[last],
        "final_p_d_master_equation": me.populations[last][0][2], "max_abs_difference": worst });
    Ok((vec![table], summary, true))
}

fn run_ions(cfg: &RunConfig) -> Result<Parts> {
    let chain = cfg.chain_config()?;
    let det = cfg.detection.params(chain.n_sub)?;
    let numbers = if cfg.detection.photon_numbers.is_empty() {
        vec![chain.pulse.mean_photons]
    } else {
        cfg.detection.photon_numbers.clone()
    };
    let results = numbers
        .par_iter()
        .map(|&n| {
            let pulse = PulseSpec { mean_photons: n, ..chain.pulse.clone() };
            let c = build_chain(chain.n_sub, chain.params.clone(), pulse, &cfg.grid, chain.solver)?;
            let tr = simulate(&c)?;
            let p: Vec<f64> =
                tr.populations.last().expect("non-empty").iter().map(|s| (s[1] + s[2]).clamp(0.0, 1.0)).collect();
            Ok((n, p.clone(), ion_statistics(&p, n, &det)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(
        "ions",
        &["mean_photons_in", "absorber", "rydberg_population", "mean_ions", "variance", "mandel_q", "q_per_mean"],
    );
    for (n, p, s) in &results {
        for (i, m) in s.per_absorber.iter().enumerate() {
            table.push(vec![
                (*n).into(),
                i.to_string().as_str().into(),
                p[i].into(),
                m.mean.into(),
                m.variance.into(),
                m.q.into(),
                m.q_per_mean().into(),
            ]);
        }
        let t = s.total;
        let total: f64 = p.iter().sum();
        table.push(vec![(*n).into(), "total".into(), total.into(), t.mean.into(), t.variance.into(), t.q.into(), t.q_per_mean().into()]);
    }
    Ok((vec![table], json!({ "photon_numbers": numbers }), true))
}

/// Reads a fit manifest (`file,mean_photons_in`) and the per-trace CSV files
/// (`time_us,rate_out_per_us[,weight]`).
pub fn load_dataset(manifest: &Path, n_sub: usize, pulse: PulseSpec) -> Result<TransmissionDataset> {
    #[derive(Deserialize)]
    struct Entry {
        file: PathBuf,
        mean_photons_in: f64,
    }
    #[derive(Deserialize)]
    struct Sample {
        time_us: f64,
        rate_out_per_us: f64,
        weight: Option<f64>,
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut traces = Vec::new();
    for entry in csv::Reader::from_path(manifest)?.deserialize::<Entry>() {
        let entry = entry?;
        let path = if entry.file.is_absolute() { entry.file.clone() } else { dir.join(&entry.file) };
        let mut rdr = csv::Reader::from_path(&path)?;
        let has_weight = rdr.headers()?.iter().any(|h| h == "weight");
        let samples = rdr.deserialize::<Sample>().collect::<std::result::Result<Vec<_>, _>>()?;
        let weights = if has_weight {
            Some(
                samples
                    .iter()
                    .map(|s| s.weight.ok_or_else(|| Error::config(format!("{}: missing weight", path.display()))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        traces.push(TransmissionTrace {
            mean_photons_in: entry.mean_photons_in,
            times: samples.iter().map(|s| s.time_us).collect(),
            rate_out: samples.iter().map(|s| s.rate_out_per_us).collect(),
            weights,
        });
    }
    let data = TransmissionDataset { n_sub, pulse, traces };
    data.validate()?;
    Ok(data)
}

/// Writes a dataset in the fit input format: one CSV per trace plus
/// `manifest.csv`.
pub fn write_dataset(data: &TransmissionDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut m = csv::Writer::from_path(&manifest)?;
    m.write_record(["file", "mean_photons_in"])?;
    for (k, tr) in data.traces.iter().enumerate() {
        let name = format!("trace_{k}.csv");
        let mut w = csv::Writer::from_path(dir.join(&name))?;
        if let Some(ws) = &tr.weights {
            w.write_record(["time_us", "rate_out_per_us", "weight"])?;
            for ((t, r), x) in tr.times.iter().zip(&tr.rate_out).zip(ws) {
                w.write_record([format_number(*t), format_number(*r), format_number(*x)])?;
            }
        } else {
            w.write_record(["time_us", "rate_out_per_us"])?;
            for (t, r) in tr.times.iter().zip(&tr.rate_out) {
                w.write_record([format_number(*t), format_number(*r)])?;
            }
        }
        w.flush()?;
        m.write_record([name, format_number(tr.mean_photons_in)])?;
    }
    m.flush()?;
    Ok(manifest)
}

fn run_fit(cfg: &RunConfig, base_dir: &Path) -> Result<Parts> {
    let section = cfg.fit.as_ref().ok_or_else(|| Error::config("fit needs a [fit] section"))?;
    let manifest = if section.manifest.is_absolute() { section.manifest.clone() } else { base_dir.join(&section.manifest) };
    let pulse = cfg.pulse.to_spec()?;
    let data = load_dataset(&manifest, cfg.chain.n_sub, pulse)?;
    let init = match (&section.init, cfg.params()) {
        (Some(a), _) => a.into(),
        (None, Ok(ChainParams::Shared(p))) => p,
        _ => return Err(Error::config("fit needs [fit.init] or shared [absorber] rates")),
    };
    let opts = FitOptions { max_iter: section.max_iter, xtol: section.xtol, solver: cfg.solver.into(), ..FitOptions::default() };
    let r = fit_params(&data, init, opts)?;
    let mut params = Table::new("fit", &["parameter", "value"]);
    for (name, v) in [
        ("kappa_per_us", r.kappa),
        ("gamma_raman_per_us", r.gamma_raman),
        ("gamma_d_per_us", r.gamma_d),
        ("residual", r.residual),
        ("initial_residual", r.initial_residual),
    ] {
        params.push(vec![name.into(), v.into()]);
    }
    params.push(vec!["iterations".into(), r.iterations.into()]);
    params.push(vec!["converged".into(), r.converged.into()]);
    let mut model = Table::new("fit_model", &["mean_photons_in", "time_us", "rate_out_per_us", "model_rate_out_per_us", "weight"]);
    for k in 0..data.traces.len() {
        let m = data.model_trace(k, r.params(), opts.solver)?;
        let w = data.weights(k);
        let tr = &data.traces[k];
        for i in 0..tr.times.len() {
            model.push(vec![tr.mean_photons_in.into(), tr.times[i].into(), tr.rate_out[i].into(), m[i].into(), w[i].into()]);
        }
    }
    Ok((vec![params, model], serde_json::to_value(r)?, r.converged))
}

// ---------------------------------------------------------------------------
// sweeps

/// One axis of a two-dimensional parameter scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis1: Axis,
    pub axis2: Axis,
    pub base: ChainConfig,
    pub grid: GridSection,
    pub observable: Observable,
}

/// Value of the scan at one grid point; `None` with a diagnostic when the
/// point failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis1: f64,
    pub axis2: f64,
    pub value: Option<f64>,
    pub diagnostic: Option<String>,
}

/// A dashed criterion line in the `(γ_D, R_in)` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySeries {
    pub name: String,
    /// `(γ_D, R_in)` points, 1/µs.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub axis1: SweepParam,
    pub axis2: SweepParam,
    pub observable: Observable,
    /// Axis-2-major order: `rows[j * len1 + i]` belongs to `(axis1[i], axis2[j])`.
    pub rows: Vec<SweepRow>,
    pub boundaries: Vec<BoundarySeries>,
}

impl ResultTable {
    pub fn value(&self, i: usize, j: usize, len1: usize) -> Option<f64> {
        self.rows[j * len1 + i].value
    }
}

/// Copy of `base` with one swept quantity replaced. Pulse lengths and input
/// rates keep the other fixed; the grid is rebuilt for the new pulse.
pub fn apply_param(base: &ChainConfig, grid: &GridSection, param: SweepParam, value: f64) -> Result<ChainConfig> {
    let set_rate = |f: &dyn Fn(&mut SuperatomParams)| -> ChainParams {
        match &base.params {
            ChainParams::Shared(p) => {
                let mut p = *p;
                f(&mut p);
                ChainParams::Shared(p)
            }
            ChainParams::PerAbsorber(ps) => ChainParams::PerAbsorber(
                ps.iter()
                    .map(|p| {
                        let mut p = *p;
                        f(&mut p);
                        p
                    })
                    .collect(),
            ),
        }
    };
    let mut n_sub = base.n_sub;
    let mut params = base.params.clone();
    let mut pulse = base.pulse.clone();
    if matches!(pulse.shape, PulseShape::Samples(_)) && matches!(param, SweepParam::RIn | SweepParam::Tau) {
        return Err(Error::config("r_in and tau sweeps need a tukey or flat pulse"));
    }
    match param {
        SweepParam::GammaD => params = set_rate(&|p| p.gamma_d = value),
        SweepParam::Kappa => params = set_rate(&|p| p.kappa = value),
        SweepParam::GammaRaman => params = set_rate(&|p| p.gamma_raman = value),
        SweepParam::RIn => pulse.mean_photons = value * pulse.fwhm,
        SweepParam::Tau => {
            let peak = pulse.peak_rate();
            pulse.fwhm = value;
            pulse.mean_photons = peak * value;
        }
        SweepParam::NSub => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::config(format!("n_sub must be a positive integer, got {value}")));
            }
            if matches!(params, ChainParams::PerAbsorber(_)) {
                return Err(Error::config("n_sub sweeps need shared absorber rates"));
            }
            n_sub = value as usize;
        }
    }
    build_chain(n_sub, params, pulse, grid, base.solver)
}

/// Criterion lines `√(κR)τ = π/2`, `exp(-γ_D τ) = 0.1` and
/// `exp(-4κRτ/γ_D) = 0.1` for a scan over `γ_D` and `R_in`.
pub fn boundary_series(kappa: f64, tau: f64, gamma_d: &[f64], r_in: &[f64]) -> Vec<BoundarySeries> {
    let ln10 = std::f64::consts::LN_10;
    let r_min = (std::f64::consts::FRAC_PI_2 / tau).powi(2) / kappa;
    let gd_min = ln10 / tau;
    vec![
        BoundarySeries { name: "rabi".into(), points: gamma_d.iter().map(|&g| (g, r_min)).collect() },
        BoundarySeries { name: "dephasing".into(), points: r_in.iter().map(|&r| (gd_min, r)).collect() },
        BoundarySeries {
            name: "overdamped".into(),
            points: r_in.iter().map(|&r| (4.0 * kappa * r * tau / ln10, r)).collect(),
        },
    ]
}

/// Evaluates the observable at every grid point, concurrently, assembling
/// rows in axis-2-major order.
pub fn run_sweep(spec: &SweepSpec) -> Result<ResultTable> {
    for axis in [&spec.axis1, &spec.axis2] {
        if axis.values.is_empty() || axis.values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config(format!("axis {:?} must be non-empty and strictly increasing", axis.param)));
        }
    }
    if spec.axis1.param == spec.axis2.param {
        return Err(Error::config("sweep axes must differ"));
    }
    spec.base.validate()?;
    let (n1, n2) = (spec.axis1.values.len(), spec.axis2.values.len());
    let rows = (0..n1 * n2)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (spec.axis1.values[k % n1], spec.axis2.values[k / n1]);
            let value = apply_param(&spec.base, &spec.grid, spec.axis1.param, a)
                .and_then(|c| apply_param(&c, &spec.grid, spec.axis2.param, b))
                .and_then(|c| spec.observable.evaluate(&c));
            match value {
                Ok(v) => SweepRow { axis1: a, axis2: b, value: Some(v), diagnostic: None },
                Err(e) => {
                    log::warn!("sweep point ({a}, {b}) failed: {e}");
                    SweepRow { axis1: a, axis2: b, value: None, diagnostic: Some(e.to_string()) }
                }
            }
        })
        .collect();
    let boundaries = match (spec.axis1.param, spec.axis2.param) {
        (SweepParam::GammaD, SweepParam::RIn) | (SweepParam::RIn, SweepParam::GammaD) => {
            let (gd, r) = if spec.axis1.param == SweepParam::GammaD {
                (&spec.axis1.values, &spec.axis2.values)
            } else {
                (&spec.axis2.values, &spec.axis1.values)
            };
            boundary_series(spec.base.site(0).kappa, spec.base.pulse.fwhm, gd, r)
        }
        _ => Vec::new(),
    };
    Ok(ResultTable { axis1: spec.axis1.param, axis2: spec.axis2.param, observable: spec.observable, rows, boundaries })
}

impl RunConfig {
    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let s = self.sweep.as_ref().ok_or_else(|| Error::config("sweep needs a [sweep] section"))?;
        Ok(SweepSpec {
            axis1: Axis { param: s.axis1.name, values: s.axis1.grid()? },
            axis2: Axis { param: s.axis2.name, values: s.axis2.grid()? },
            base: self.chain_config()?,
            grid: self.grid,
            observable: s.observable,
        })
    }
}

fn run_sweep_command(cfg: &RunConfig) -> Result<Parts> {
    let spec = cfg.sweep_spec()?;
    let res = run_sweep(&spec)?;
    let mut table = Table::new(
        "sweep",
        &[res.axis1.column(), res.axis2.column(), "observable", "value", "diagnostic"],
    );
    for r in &res.rows {
        table.push(vec![
            r.axis1.into(),
            r.axis2.into(),
            res.observable.name().into(),
            r.value.into(),
            r.diagnostic.as_deref().map_or(Cell::Missing, Cell::from),
        ]);
    }
    let mut bounds = Table::new("boundaries", &["series", "gamma_d_per_us", "r_in_per_us"]);
    for b in &res.boundaries {
        for (g, r) in &b.points {
            bounds.push(vec![b.name.as_str().into(), (*g).into(), (*r).into()]);
        }
    }
    let failed = res.rows.iter().filter(|r| r.value.is_none()).count();
    let summary = json!({ "points": res.rows.len(), "failed": failed, "observable": res.observable.name() });
    Ok((vec![table, bounds], summary, true))
}

/// Total dark population against time for one chain length and Raman rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCurve {
    pub n_sub: usize,
    pub gamma_raman: f64,
    /// `master_equation` or `trajectories`.
    pub method: String,
    pub times: Vec<f64>,
    pub total_dark: Vec<f64>,
    /// Standard errors for trajectory estimates.
    pub std_err: Option<Vec<f64>>,
}

impl ChainCurve {
    pub fn final_dark(&self) -> f64 {
        *self.total_dark.last().expect("non-empty curve")
    }
}

/// Dark population of chains of every length in `settings.n_values`, for
/// every Raman rate, starting from the shared rates of `base`.
pub fn chain_comparison(base: &ChainConfig, grid: &GridSection, settings: &ChainCompareSection, seed: u64) -> Result<Vec<ChainCurve>> {
    let mut curves = Vec::new();
    for &g in &settings.gamma_raman_per_us {
        for &n in &settings.n_values {
            let c = apply_param(base, grid, SweepParam::GammaRaman, g)?;
            let c = apply_param(&c, grid, SweepParam::NSub, n as f64)?;
            let curve = if n <= settings.max_master_equation_n {
                let tr = simulate(&c)?;
                ChainCurve {
                    n_sub: n,
                    gamma_raman: g,
                    method: "master_equation".into(),
                    times: tr.times.clone(),
                    total_dark: tr.dark(),
                    std_err: None,
                }
            } else {
                let ens = run_trajectories(&c, settings.n_traj, seed)?;
                let est: Vec<_> = (0..ens.times.len()).map(|k| ens.total_dark(k)).collect();
                ChainCurve {
                    n_sub: n,
                    gamma_raman: g,
                    method: "trajectories".into(),
                    times: ens.times.clone(),
                    total_dark: est.iter().map(|e| e.mean).collect(),
                    std_err: Some(est.iter().map(|e| e.std_err).collect()),
                }
            };
            curves.push(curve);
        }
    }
    Ok(curves)
}

fn run_chain(cfg: &RunConfig) -> Result<Parts> {
    let base = cfg.chain_config()?;
    let curves = chain_comparison(&base, &cfg.grid, &cfg.chain_compare, cfg.solver.seed)?;
    let mut table = Table::new("chain", &["n_sub", "gamma_raman_per_us", "method", "time_us", "total_dark", "std_error"]);
    for c in &curves {
        for k in 0..c.times.len() {
            table.push(vec![
                c.n_sub.into(),
                c.gamma_raman.into(),
                c.method.as_str().into(),
                c.times[k].into(),
                c.total_dark[k].into(),
                c.std_err.as_ref().map(|s| s[k]).into(),
            ]);
        }
    }
    let finals: Vec<Value> = curves
        .iter()
        .map(|c| json!({ "n_sub": c.n_sub, "gamma_raman_per_us": c.gamma_raman, "final_total_dark": c.final_dark() }))
        .collect();
    Ok((vec![table], json!({ "final": finals }), true))
}

/// Cumulative mean Raman loss `Γ∫P_Ryd` on the trace grid.
pub fn cumulative_raman_loss(cfg: &ChainConfig) -> Result<Vec<f64>> {
    let tr = simulate(cfg)?;
    let mut acc = vec![0.0; tr.times.len()];
    for i in 0..cfg.n_sub {
        let p: Vec<f64> = tr.populations.iter().map(|s| s[i][1] + s[i][2]).collect();
        let g = cfg.site(i).gamma_raman;
        for (a, c) in acc.iter_mut().zip(cumulative_trapezoid(&tr.times, &p)) {
            *a += g * c;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[chain]
n_sub = 1

[absorber]
kappa_per_us = 0.35
gamma_d_per_us = 2.4
gamma_raman_per_us = 0.04

[pulse]
shape = "flat"
duration_us = 3.0
rate_per_us = 5.0
"#;

    #[test]
    fn parses_units_and_defaults() {
        let cfg = RunConfig::from_toml(BASIC).unwrap();
        let c = cfg.chain_config().unwrap();
        assert_eq!(c.site(0), SuperatomParams::new(0.35, 0.04, 2.4));
        assert_eq!(c.pulse, PulseSpec::flat(3.0, 5.0));
        assert_eq!(c.solver, SolverOptions::default());
        assert_eq!(cfg.detection.params(1).unwrap()[0].dark_mean, 9e-3 * 0.075);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(RunConfig::from_toml(&BASIC.replace("kappa_per_us", "kappa")), Err(Error::Toml(_))));
        assert!(matches!(
            RunConfig::from_toml(&BASIC.replace("rate_per_us = 5.0", "")),
            Err(Error::Config(_))
        ));
        let both = format!("{BASIC}\n[[absorbers]]\nkappa_per_us = 1.0\ngamma_d_per_us = 1.0\n");
        assert!(RunConfig::from_toml(&both).is_err());
        assert!(RunConfig::from_toml(&BASIC.replace("n_sub = 1", "n_sub = 0")).is_err());
    }

    #[test]
    fn tukey_and_sampled_pulses() {
        let tukey = BASIC.replace(
            "shape = \"flat\"\nduration_us = 3.0\nrate_per_us = 5.0",
            "shape = \"tukey\"\nmean_photons = 20.0",
        );
        let c = RunConfig::from_toml(&tukey).unwrap().chain_config().unwrap();
        assert_eq!(c.pulse, PulseSpec::experimental(20.0));
        let sampled = BASIC.replace(
            "shape = \"flat\"\nduration_us = 3.0\nrate_per_us = 5.0",
            "shape = \"samples\"\nsample_times_us = [0.0, 1.0, 2.0]\nsample_rates_per_us = [0.0, 4.0, 0.0]",
        );
        let c = RunConfig::from_toml(&sampled).unwrap().chain_config().unwrap();
        assert!((c.pulse.mean_photons - 4.0).abs() < 1e-12);
    }

    #[test]
    fn number_format() {
        assert_eq!(format_number(0.1 + 0.2), "0.3");
        assert_eq!(format_number(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_number(2.0), "2");
        assert_eq!(format_number(f64::NAN), "");
        assert_eq!(format_number(-1234567.891234567), "-1234567.89123");
    }

    #[test]
    fn config_hash_is_stable() {
        let a = RunConfig::from_toml(BASIC).unwrap();
        let b = RunConfig::from_toml(&format!("# comment\n{BASIC}")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::from_toml(&BASIC.replace("5.0", "5.5")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    fn small_sweep() -> SweepSpec {
        let base = RunConfig::from_toml(BASIC).unwrap().chain_config().unwrap();
        SweepSpec {
            axis1: Axis { param: SweepParam::GammaD, values: vec![1.0, 5.0] },
            axis2: Axis { param: SweepParam::RIn, values: vec![2.0, 10.0] },
            base,
            grid: GridSection::default(),
            observable: Observable::FinalDarkPopulation,
        }
    }

    #[test]
    fn sweep_order_and_boundaries() {
        let spec = small_sweep();
        let res = run_sweep(&spec).unwrap();
        assert_eq!(res.rows.len(), 4);
        let coords: Vec<(f64, f64)> = res.rows.iter().map(|r| (r.axis1, r.axis2)).collect();
        assert_eq!(coords, vec![(1.0, 2.0), (5.0, 2.0), (1.0, 10.0), (5.0, 10.0)]);
        assert_eq!(res.boundaries.len(), 3);
        let c = apply_param(&spec.base, &spec.grid, SweepParam::GammaD, 5.0).unwrap();
        let c = apply_param(&c, &spec.grid, SweepParam::RIn, 10.0).unwrap();
        assert_eq!(res.value(1, 1, 2), Some(Observable::FinalDarkPopulation.evaluate(&c).unwrap()));
        assert_eq!(run_sweep(&spec).unwrap(), res);
        let rabi = &res.boundaries[0].points[0];
        assert!((rabi.1 * 0.35 * 9.0 - std::f64::consts::FRAC_PI_2.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn failed_points_are_missing() {
        let mut spec = small_sweep();
        spec.axis2 = Axis { param: SweepParam::NSub, values: vec![1.0, 1.5] };
        let res = run_sweep(&spec).unwrap();
        assert!(res.rows[..2].iter().all(|r| r.value.is_some()));
        assert!(res.rows[2..].iter().all(|r| r.value.is_none() && r.diagnostic.is_some()));
    }

    #[test]
    fn apply_param_keeps_pulse_consistent() {
        let base = RunConfig::from_toml(BASIC).unwrap().chain_config().unwrap();
        let g = GridSection::default();
        let c = apply_param(&base, &g, SweepParam::Tau, 4.0).unwrap();
        assert_eq!(c.pulse.peak_rate(), 5.0);
        assert_eq!(c.t_end(), 4.0);
        let c = apply_param(&base, &g, SweepParam::RIn, 8.0).unwrap();
        assert_eq!(c.pulse.mean_photons, 24.0);
        let c = apply_param(&base, &g, SweepParam::NSub, 2.0).unwrap();
        assert_eq!(c.dim(), 9);
    }

    #[test]
    fn writes_tables_and_sidecar() {
        let cfg = RunConfig::from_toml(BASIC).unwrap();
        let out = run(Command::Simulate, &cfg, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = out.write(dir.path(), OutputFormat::Csv).unwrap();
        assert_eq!(files.len(), 3);
        let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("simulate.meta.json")).unwrap()).unwrap();
        assert_eq!(meta["provenance"]["config_sha256"], cfg.hash());
        assert_eq!(meta["provenance"]["config"]["absorber"]["kappa_per_us"], 0.35);
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace.starts_with("time_us,rate_in_per_us,rate_out_per_us,p_g_0,p_w_0,p_d_0\n"));
        let files = out.write(dir.path(), OutputFormat::Json).unwrap();
        let doc: Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(doc["tables"][0]["name"], "trace");
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = RunConfig::from_toml(BASIC).unwrap().chain_config().unwrap();
        let data = crate::fit::simulate_dataset(SuperatomParams::FITTED_ONE, &cfg, &[3.0, 6.0], 0.01, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(&manifest, 1, cfg.pulse.clone()).unwrap();
        assert_eq!(back.traces.len(), 2);
        for (a, b) in data.traces.iter().zip(&back.traces) {
            for (x, y) in a.rate_out.iter().zip(&b.rate_out) {
                assert!((x - y).abs() <= 1e-11 * x.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn loss_matches_register() {
        let cfg = RunConfig::from_toml(BASIC).unwrap();
        let out = run(Command::Count, &cfg, Path::new(".")).unwrap();
        let loss = cumulative_raman_loss(&cfg.chain_config().unwrap()).unwrap();
        let mean = out.summary["final_mean"].as_f64().unwrap();
        assert!((mean - loss.last().unwrap()).abs() < 1e-5);
    }
}
