//! Chain operators and the Lindblad generator for cascaded absorbers.
//!
//! Basis states of an `n`-absorber chain are indexed by `s = Σ dᵢ 3ⁱ` with the
//! digit `dᵢ` the level of absorber `i` (G = 0, W = 1, D = 2). Absorber 0 is
//! hit first by the probe; a larger index sits further downstream.
//!
//! Operators are stored in compressed sparse rows. Density matrices are dense,
//! row-major `dim × dim` slices, and the generator is only ever applied, never
//! assembled as a superoperator.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChainConfig, PulseSpec};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Level of a single effective absorber.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    G = 0,
    W = 1,
    D = 2,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::G, Level::W, Level::D];

    fn digit(self) -> usize {
        self as usize
    }
}

/// Level of absorber `site` in basis state `state`.
pub fn digit(state: usize, site: usize) -> usize {
    (state / 3usize.pow(site as u32)) % 3
}

/// Sparse square operator on the chain Hilbert space (CSR layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl ChainOperator {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, C64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside dimension {dim}");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != ZERO);
        let mut row_ptr = vec![0; dim + 1];
        let cols = merged.iter().map(|e| e.1).collect();
        let vals = merged.iter().map(|e| e.2).collect();
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { dim, row_ptr, cols, vals }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, row_ptr: vec![0; dim + 1], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_triplets(dim, (0..dim).map(|s| (s, s, C64::new(1.0, 0.0))).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Iterates over stored entries as `(row, col, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        (self.row_ptr[row]..self.row_ptr[row + 1])
            .find(|&k| self.cols[k] == col)
            .map_or(ZERO, |k| self.vals[k])
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (c, r, v.conj())).collect())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (r, c, v * s)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        Self::from_triplets(self.dim, self.entries().chain(other.entries()).collect())
    }

    /// Sparse product `self · other`.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut trip = Vec::new();
        for (r, k, a) in self.entries() {
            for j in other.row_ptr[k]..other.row_ptr[k + 1] {
                trip.push((r, other.cols[j], a * other.vals[j]));
            }
        }
        Self::from_triplets(self.dim, trip)
    }

    /// `y = self · x`.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![ZERO; self.dim];
        self.apply_add(C64::new(1.0, 0.0), x, &mut y);
        y
    }

    /// `y += coeff · self · x`.
    pub fn apply_add(&self, coeff: C64, x: &[C64], y: &mut [C64]) {
        assert!(x.len() >= self.dim && y.len() >= self.dim);
        for (r, yr) in y.iter_mut().enumerate().take(self.dim) {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            let mut acc = ZERO;
            for (v, &c) in self.vals[span.clone()].iter().zip(&self.cols[span]) {
                acc += v * x[c];
            }
            *yr += coeff * acc;
        }
    }

    /// `out += coeff · self · m` for a dense row-major `dim × dim` matrix `m`.
    pub fn left_mul_add(&self, coeff: C64, m: &[C64], out: &mut [C64]) {
        let d = self.dim;
        for r in 0..d {
            let out_row = &mut out[r * d..(r + 1) * d];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = coeff * self.vals[k];
                let src = &m[self.cols[k] * d..(self.cols[k] + 1) * d];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// `out += coeff · self · m · self†` for dense row-major `m`.
    pub fn sandwich_add(&self, coeff: f64, m: &[C64], out: &mut [C64]) {
        let d = self.dim;
        for (a, c, l1) in self.entries() {
            let l1 = l1 * coeff;
            let src = &m[c * d..(c + 1) * d];
            let dst = &mut out[a * d..(a + 1) * d];
            for (b, x) in dst.iter_mut().enumerate() {
                for k in self.row_ptr[b]..self.row_ptr[b + 1] {
                    *x += l1 * src[self.cols[k]] * self.vals[k].conj();
                }
            }
        }
    }

    /// `tr(self · m)` for dense row-major `m`.
    pub fn trace_product(&self, m: &[C64]) -> C64 {
        let d = self.dim;
        self.entries().map(|(r, c, v)| v * m[c * d + r]).sum()
    }

    /// `⟨x| self |x⟩`.
    pub fn expectation(&self, x: &[C64]) -> C64 {
        self.entries().map(|(r, c, v)| x[r].conj() * v * x[c]).sum()
    }

    /// Largest entry of `self - self†`.
    pub fn hermiticity_error(&self) -> f64 {
        self.entries()
            .map(|(r, c, v)| (v - self.get(c, r).conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<C64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] += v;
        }
        m
    }
}

/// `|a⟩⟨b|` on absorber `site` of an `n`-absorber chain, identity elsewhere.
pub fn site_operator(site: usize, a: Level, b: Level, n: usize) -> Result<ChainOperator> {
    if site >= n {
        return Err(Error::IndexOutOfRange { index: site, len: n });
    }
    let dim = 3usize.pow(n as u32);
    let stride = 3usize.pow(site as u32);
    let trip = (0..dim)
        .filter(|&s| digit(s, site) == b.digit())
        .map(|s| {
            let row = s + a.digit() * stride - b.digit() * stride;
            (row, s, C64::new(1.0, 0.0))
        })
        .collect();
    Ok(ChainOperator::from_triplets(dim, trip))
}

/// Lowering operator `σ_{A,i}⁻ = |G⟩⟨A|` on absorber `i`.
pub fn lowering(site: usize, level: Level, n: usize) -> Result<ChainOperator> {
    site_operator(site, Level::G, level, n)
}

/// Projector onto level `level` of absorber `site`.
pub fn projector(site: usize, level: Level, n: usize) -> Result<ChainOperator> {
    site_operator(site, level, level, n)
}

/// Identifies a dissipation channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "channel", content = "site", rename_all = "snake_case")]
pub enum JumpTag {
    /// Collective forward emission into the probe mode.
    ForwardCollective,
    /// Bright-to-dark dephasing of absorber `i`.
    Dephase(usize),
    /// Raman decay of the bright state of absorber `i`.
    RamanBright(usize),
    /// Raman decay of the dark state of absorber `i`.
    RamanDark(usize),
}

impl JumpTag {
    pub fn site(&self) -> Option<usize> {
        match *self {
            JumpTag::ForwardCollective => None,
            JumpTag::Dephase(i) | JumpTag::RamanBright(i) | JumpTag::RamanDark(i) => Some(i),
        }
    }

    pub fn is_raman(&self) -> bool {
        matches!(self, JumpTag::RamanBright(_) | JumpTag::RamanDark(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            JumpTag::ForwardCollective => "forward_collective",
            JumpTag::Dephase(_) => "dephase",
            JumpTag::RamanBright(_) => "raman_bright",
            JumpTag::RamanDark(_) => "raman_dark",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Jump {
    /// Jump operator with the rate folded in (`√rate · σ`).
    pub op: ChainOperator,
    pub tag: JumpTag,
}

pub type JumpSet = Vec<Jump>;

/// Collective lowering `c = Σᵢ √κᵢ σ_{W,i}⁻`. The collective jump operator
/// and the absorber part of the transmitted field are both built from it.
pub fn collective_lowering(cfg: &ChainConfig) -> ChainOperator {
    let n = cfg.n_sub;
    let mut c = ChainOperator::zeros(cfg.dim());
    for i in 0..n {
        let s = lowering(i, Level::W, n).expect("site in range");
        c = c.add(&s.scale(C64::new(cfg.site(i).kappa.sqrt(), 0.0)));
    }
    c
}

/// Coupling of the probe to the chain without the amplitude:
/// `Σᵢ √κᵢ (σ_{W,i}⁺ + σ_{W,i}⁻)`.
pub fn drive_operator(cfg: &ChainConfig) -> ChainOperator {
    let c = collective_lowering(cfg);
    c.add(&c.adjoint())
}

/// Exchange of virtual photons between absorbers,
/// `-(i/2) Σ_{i>j} √(κᵢκⱼ) (σ_{W,i}⁺ σ_{W,j}⁻ - σ_{W,j}⁺ σ_{W,i}⁻)`.
pub fn exchange_hamiltonian(cfg: &ChainConfig) -> ChainOperator {
    let n = cfg.n_sub;
    let lower: Vec<ChainOperator> = (0..n).map(|i| lowering(i, Level::W, n).unwrap()).collect();
    let mut h = ChainOperator::zeros(cfg.dim());
    for i in 0..n {
        for j in 0..i {
            let g = cfg.site(i).kappa.sqrt() * cfg.site(j).kappa.sqrt();
            let hop = lower[i].adjoint().mul(&lower[j]);
            let term = hop.add(&hop.adjoint().scale(C64::new(-1.0, 0.0)));
            h = h.add(&term.scale(C64::new(0.0, -0.5 * g)));
        }
    }
    h
}

/// Hamiltonian `H(t) = α(t) Σ√κᵢ(σ⁺+σ⁻) + H_exc` with a real amplitude.
pub fn build_hamiltonian(t: f64, cfg: &ChainConfig) -> ChainOperator {
    let alpha = cfg.pulse.amplitude(t);
    drive_operator(cfg).scale(C64::new(alpha, 0.0)).add(&exchange_hamiltonian(cfg))
}

/// Jump operators: one collective forward channel, per-site dephasing and,
/// for sites with Γ > 0, Raman decay from W and from D.
pub fn build_jumps(cfg: &ChainConfig) -> JumpSet {
    let n = cfg.n_sub;
    let mut jumps = vec![Jump { op: collective_lowering(cfg), tag: JumpTag::ForwardCollective }];
    for i in 0..n {
        let gd = cfg.site(i).gamma_d;
        let op = site_operator(i, Level::D, Level::W, n).unwrap().scale(C64::new(gd.sqrt(), 0.0));
        jumps.push(Jump { op, tag: JumpTag::Dephase(i) });
    }
    for i in 0..n {
        let gr = cfg.site(i).gamma_raman;
        if gr > 0.0 {
            let s = C64::new(gr.sqrt(), 0.0);
            jumps.push(Jump { op: lowering(i, Level::W, n).unwrap().scale(s), tag: JumpTag::RamanBright(i) });
            jumps.push(Jump { op: lowering(i, Level::D, n).unwrap().scale(s), tag: JumpTag::RamanDark(i) });
        }
    }
    jumps
}

/// Precomputed pieces of the master equation for one configuration.
///
/// The generator is written through the non-Hermitian effective Hamiltonian
/// `H_eff(t) = H(t) - (i/2) Σ L†L`, so that
/// `dρ/dt = -i(H_eff ρ - ρ H_eff†) + Σ L ρ L†`.
#[derive(Debug, Clone)]
pub struct Generator {
    n_sub: usize,
    dim: usize,
    pulse: PulseSpec,
    drive: ChainOperator,
    h_exc: ChainOperator,
    /// `H_exc - (i/2) Σ L†L`; the drive is added on the fly.
    h_eff_static: ChainOperator,
    jumps: JumpSet,
    collective: ChainOperator,
    sqrt_kappa: Vec<f64>,
    /// `-i` times the diagonal of `h_eff_static`.
    decay_diag: Vec<C64>,
}

impl Generator {
    pub fn new(cfg: &ChainConfig) -> Self {
        let dim = cfg.dim();
        let jumps = build_jumps(cfg);
        let h_exc = exchange_hamiltonian(cfg);
        let mut h_eff = h_exc.clone();
        for j in &jumps {
            h_eff = h_eff.add(&j.op.adjoint().mul(&j.op).scale(C64::new(0.0, -0.5)));
        }
        let decay_diag = (0..dim).map(|s| -I * h_eff.get(s, s)).collect();
        Self {
            sqrt_kappa: (0..cfg.n_sub).map(|i| cfg.site(i).kappa.sqrt()).collect(),
            decay_diag,
            n_sub: cfg.n_sub,
            dim,
            pulse: cfg.pulse.clone(),
            drive: drive_operator(cfg),
            h_exc,
            h_eff_static: h_eff,
            jumps,
            collective: collective_lowering(cfg),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn pulse(&self) -> &PulseSpec {
        &self.pulse
    }

    /// `c = Σ √κᵢ σ_{W,i}⁻`.
    pub fn collective(&self) -> &ChainOperator {
        &self.collective
    }

    pub fn amplitude(&self, t: f64) -> f64 {
        self.pulse.amplitude(t)
    }

    pub fn hamiltonian(&self, t: f64) -> ChainOperator {
        self.drive.scale(C64::new(self.amplitude(t), 0.0)).add(&self.h_exc)
    }

    /// `out = -i(H_eff ρ - ρ H_eff†)` for Hermitian `ρ`; every jump's
    /// `L ρ L†` term is left to the caller.
    pub fn coherent_part(&self, t: f64, rho: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        let d = self.dim;
        scratch.fill(ZERO);
        self.h_eff_static.left_mul_add(C64::new(1.0, 0.0), rho, scratch);
        let alpha = self.amplitude(t);
        if alpha != 0.0 {
            self.drive.left_mul_add(C64::new(alpha, 0.0), rho, scratch);
        }
        // ρ H_eff† = (H_eff ρ)† since ρ is Hermitian
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = -I * scratch[a * d + b] + I * scratch[b * d + a].conj();
            }
        }
    }

    /// Full Lindblad right-hand side for a Hermitian density matrix.
    pub fn rhs(&self, t: f64, rho: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        self.coherent_part(t, rho, out, scratch);
        for j in &self.jumps {
            j.op.sandwich_add(1.0, rho, out);
        }
    }

    /// Same as [`Self::schrodinger_rhs`] without the sparse matrices. The
    /// off-diagonal part of `H_eff` is `-iΣ_{i>j}√(κᵢκⱼ) σᵢ⁺σⱼ⁻ + αΣ√κᵢ(σᵢ⁺+σᵢ⁻)`;
    /// the cascade sum is accumulated site by site in `scratch`.
    pub fn trajectory_rhs(&self, t: f64, psi: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        let d = self.dim;
        let (psi, out, phi) = (&psi[..d], &mut out[..d], &mut scratch[..d]);
        for ((o, g), x) in out.iter_mut().zip(&self.decay_diag).zip(psi) {
            *o = g * x;
        }
        phi.fill(ZERO);
        let ia = C64::new(0.0, self.amplitude(t));
        let mut stride = 1;
        for &k in &self.sqrt_kappa {
            let block = 3 * stride;
            for base in (0..d).step_by(block) {
                for g in base..base + stride {
                    let w = g + stride;
                    out[w] -= k * (phi[g] + ia * psi[g]);
                    out[g] -= k * ia * psi[w];
                    phi[g] += k * psi[w];
                }
            }
            stride = block;
        }
    }

    /// `dψ/dt = -i H_eff(t) ψ` for the unnormalised trajectory state.
    pub fn schrodinger_rhs(&self, t: f64, psi: &[C64], out: &mut [C64]) {
        out.fill(ZERO);
        self.h_eff_static.apply_add(-I, psi, out);
        let alpha = self.amplitude(t);
        if alpha != 0.0 {
            self.drive.apply_add(C64::new(0.0, -alpha), psi, out);
        }
    }
}

/// Evaluates `dρ/dt` for one configuration. Builds the generator on every
/// call; use [`Generator::rhs`] inside loops.
pub fn apply_rhs(rho: &[C64], t: f64, cfg: &ChainConfig) -> Result<Vec<C64>> {
    let d = cfg.dim();
    if rho.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, found: rho.len() });
    }
    let g = Generator::new(cfg);
    let mut out = vec![ZERO; d * d];
    let mut scratch = vec![ZERO; d * d];
    g.rhs(t, rho, &mut out, &mut scratch);
    Ok(out)
}

/// Dense `|s⟩⟨s|` for a basis state of dimension `dim`.
pub fn basis_projector(dim: usize, state: usize) -> Vec<C64> {
    let mut m = vec![ZERO; dim * dim];
    m[state * dim + state] = C64::new(1.0, 0.0);
    m
}

/// Basis index with every absorber in `level`.
pub fn uniform_state(n: usize, level: Level) -> usize {
    (0..n).map(|i| level.digit() * 3usize.pow(i as u32)).sum()
}

/// Basis index from per-absorber levels, absorber 0 first.
pub fn state_index(levels: &[Level]) -> usize {
    levels.iter().enumerate().map(|(i, l)| l.digit() * 3usize.pow(i as u32)).sum()
}
