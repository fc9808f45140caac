//! Dormand–Prince 5(4) integration with embedded error control and the
//! fourth-order continuous extension for dense output.
//!
//! The stepper is generic over real or complex state vectors. [`integrate`]
//! drives it across the breakpoints of a piecewise-smooth right-hand side
//! and samples the solution on an arbitrary output grid.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Element type of an integrated state vector.
pub trait OdeScalar:
    Copy + Default + Send + Sync + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn magnitude(self) -> f64;
}

impl OdeScalar for f64 {
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for Complex64 {
    fn magnitude(self) -> f64 {
        // no hypot: amplitudes here are far from overflow
        self.norm_sqr().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_step: f64::INFINITY }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// `y += a · x`.
fn axpy<S: OdeScalar>(y: &mut [S], x: &[S], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y = *y + *x * a;
    }
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Single-step Dormand–Prince integrator keeping the dense-output polynomial
/// of its last accepted step.
#[derive(Debug, Clone)]
pub struct DormandPrince<S> {
    tol: Tolerances,
    t: f64,
    y: Vec<S>,
    /// Proposed size of the next step; zero until initialised.
    h: f64,
    k: [Vec<S>; 7],
    /// Whether `k[0]` holds `f(t, y)`.
    fsal: bool,
    stage: Vec<S>,
    y_new: Vec<S>,
    t_prev: f64,
    h_last: f64,
    cont: [Vec<S>; 5],
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl<S: OdeScalar> DormandPrince<S> {
    pub fn new(t0: f64, y0: Vec<S>, tol: Tolerances) -> Self {
        let n = y0.len();
        let z = || vec![S::default(); n];
        Self {
            tol,
            t: t0,
            y: y0.clone(),
            h: 0.0,
            k: [z(), z(), z(), z(), z(), z(), z()],
            fsal: false,
            stage: z(),
            y_new: z(),
            t_prev: t0,
            h_last: 0.0,
            cont: [y0, z(), z(), z(), z()],
            accepted: 0,
            rejected: 0,
            evaluations: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[S] {
        &self.y
    }

    /// Start of the interval covered by [`Self::interpolate`].
    pub fn previous_time(&self) -> f64 {
        self.t_prev
    }

    /// Restarts from `(t, y)` after a discontinuity, keeping the step size.
    pub fn reset(&mut self, t: f64, y: &[S]) {
        self.t = t;
        self.t_prev = t;
        self.h_last = 0.0;
        self.y.copy_from_slice(y);
        self.cont[0].copy_from_slice(y);
        self.cont[1..].iter_mut().for_each(|c| c.fill(S::default()));
        self.fsal = false;
    }

    fn weighted_rms(&self, v: &[S], a: &[S], b: &[S]) -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(a.iter().zip(b))
            .map(|(e, (x, y))| {
                let sc = self.tol.atol + self.tol.rtol * x.magnitude().max(y.magnitude());
                let r = e.magnitude() / sc;
                r * r
            })
            .sum();
        (s / n).sqrt()
    }

    fn initial_step<F: FnMut(f64, &[S], &mut [S])>(&mut self, f: &mut F, span: f64) -> f64 {
        let d0 = self.weighted_rms(&self.y, &self.y, &self.y);
        let d1 = self.weighted_rms(&self.k[0], &self.y, &self.y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span).min(self.tol.max_step);
        for (s, (y, k)) in self.stage.iter_mut().zip(self.y.iter().zip(&self.k[0])) {
            *s = *y + *k * h0;
        }
        f(self.t + h0, &self.stage, &mut self.k[1]);
        self.evaluations += 1;
        let diff: Vec<S> = self.k[1].iter().zip(&self.k[0]).map(|(a, b)| *a - *b).collect();
        let d2 = self.weighted_rms(&diff, &self.y, &self.y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span).min(self.tol.max_step)
    }

    /// Advances by one accepted step without passing `t_stop`.
    pub fn step<F: FnMut(f64, &[S], &mut [S])>(&mut self, f: &mut F, t_stop: f64) -> Result<()> {
        let span = t_stop - self.t;
        if span <= 0.0 {
            return Ok(());
        }
        if !self.fsal {
            f(self.t, &self.y, &mut self.k[0]);
            self.evaluations += 1;
            self.fsal = true;
        }
        if self.h <= 0.0 {
            self.h = self.initial_step(f, span);
        }
        let mut reject_streak = false;
        loop {
            let mut h = self.h.min(self.tol.max_step);
            let mut last = false;
            if h >= span * (1.0 - 1e-12) {
                h = span;
                last = true;
            }
            let h_floor = 1e-14 * self.t.abs().max(1.0);
            if h < h_floor {
                return Err(Error::StepSizeUnderflow { time: self.t, step: h });
            }
            for s in 1..7 {
                self.stage.copy_from_slice(&self.y);
                for (m, a) in A[s].iter().enumerate().take(s) {
                    if *a != 0.0 {
                        axpy(&mut self.stage, &self.k[m], h * a);
                    }
                }
                let ts = if last && C[s] == 1.0 { t_stop } else { self.t + C[s] * h };
                f(ts, &self.stage, &mut self.k[s]);
                self.evaluations += 1;
                if s == 6 {
                    self.y_new.copy_from_slice(&self.stage);
                }
            }
            // embedded error estimate
            self.stage.fill(S::default());
            for (m, em) in E.iter().enumerate() {
                if *em != 0.0 {
                    axpy(&mut self.stage, &self.k[m], h * em);
                }
            }
            let mut err_sum = 0.0;
            for ((e, y), yn) in self.stage.iter().zip(&self.y).zip(&self.y_new) {
                let sc = self.tol.atol + self.tol.rtol * y.magnitude().max(yn.magnitude());
                let r = e.magnitude() / sc;
                err_sum += r * r;
            }
            let err = (err_sum / self.y.len().max(1) as f64).sqrt();
            let err_ok = err.is_finite();
            let factor = if err_ok && err > 0.0 {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            } else if err_ok {
                MAX_FACTOR
            } else {
                MIN_FACTOR
            };
            if err_ok && err <= 1.0 {
                // dense output for [t, t + h]
                for j in 0..self.y.len() {
                    let y0 = self.y[j];
                    let diff = self.y_new[j] - y0;
                    let b = self.k[0][j] * h - diff;
                    self.cont[0][j] = y0;
                    self.cont[1][j] = diff;
                    self.cont[2][j] = b;
                    self.cont[3][j] = diff - self.k[6][j] * h - b;
                }
                self.cont[4].fill(S::default());
                for (m, dm) in D.iter().enumerate() {
                    if *dm != 0.0 {
                        axpy(&mut self.cont[4], &self.k[m], h * dm);
                    }
                }
                self.t_prev = self.t;
                self.h_last = h;
                self.t = if last { t_stop } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.y_new);
                self.k.swap(0, 6);
                let grow = if reject_streak { factor.min(1.0) } else { factor };
                if !last || h * grow > self.h {
                    self.h = h * grow;
                }
                self.accepted += 1;
                return Ok(());
            }
            self.rejected += 1;
            reject_streak = true;
            self.h = h * factor.min(1.0);
        }
    }

    /// Evaluates the dense-output polynomial of the last step at `t`.
    pub fn interpolate(&self, t: f64, out: &mut [S]) {
        if self.h_last == 0.0 || t >= self.t {
            out.copy_from_slice(&self.y);
            return;
        }
        let theta = (t - self.t_prev) / self.h_last;
        let th1 = 1.0 - theta;
        for (j, o) in out.iter_mut().enumerate() {
            let inner = self.cont[2][j] + (self.cont[3][j] + self.cont[4][j] * th1) * theta;
            *o = self.cont[0][j] + (self.cont[1][j] + inner * th1) * theta;
        }
    }
}

/// Relative nudge applied to right-end evaluations of a segment, so that a
/// right-continuous forcing is evaluated on the segment's own side.
const EDGE_NUDGE: f64 = 1e-12;

/// Integrates `y' = f(t, y)` from `t0` to the last sample time, restarting at
/// every breakpoint and calling `on_sample(index, t, y)` for each sample
/// time (which must be sorted and `>= t0`). Returns the final state.
pub fn integrate<S, F, G>(
    mut f: F,
    t0: f64,
    y0: Vec<S>,
    breakpoints: &[f64],
    samples: &[f64],
    tol: Tolerances,
    mut on_sample: G,
) -> Result<Vec<S>>
where
    S: OdeScalar,
    F: FnMut(f64, &[S], &mut [S]),
    G: FnMut(usize, f64, &[S]),
{
    let Some(&t_end) = samples.last() else {
        return Ok(y0);
    };
    if samples.windows(2).any(|w| w[1] < w[0]) || samples[0] < t0 {
        return Err(Error::invalid("sample times must be sorted and not precede t0"));
    }
    let mut knots: Vec<f64> = breakpoints.iter().copied().filter(|&b| b > t0 && b < t_end).collect();
    knots.sort_by(f64::total_cmp);
    knots.push(t_end);

    let mut stepper = DormandPrince::new(t0, y0, tol);
    let mut buf = vec![S::default(); stepper.state().len()];
    let mut next = 0;
    while next < samples.len() && samples[next] <= t0 {
        on_sample(next, samples[next], stepper.state());
        next += 1;
    }
    let mut seg_start = t0;
    for &seg_end in &knots {
        if seg_end <= seg_start {
            continue;
        }
        let edge = seg_end - EDGE_NUDGE * (1.0 + seg_end.abs());
        let mut g = |t: f64, y: &[S], dy: &mut [S]| f(t.min(edge).max(seg_start), y, dy);
        while stepper.time() < seg_end {
            stepper.step(&mut g, seg_end)?;
            while next < samples.len() && samples[next] <= stepper.time() {
                stepper.interpolate(samples[next], &mut buf);
                on_sample(next, samples[next], &buf);
                next += 1;
            }
        }
        let y = stepper.state().to_vec();
        stepper.reset(seg_end, &y);
        seg_start = seg_end;
    }
    Ok(stepper.state().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let samples: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let mut got = vec![0.0; samples.len()];
        let y = integrate(
            |_, y: &[f64], dy: &mut [f64]| dy[0] = -1.3 * y[0],
            0.0,
            vec![1.0],
            &[],
            &samples,
            Tolerances::default(),
            |i, _, y| got[i] = y[0],
        )
        .unwrap();
        for (t, g) in samples.iter().zip(&got) {
            assert!((g - (-1.3 * t).exp()).abs() < 1e-8, "t = {t}");
        }
        assert!((y[0] - (-1.3 * 5.0_f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn complex_rotation_dense_output() {
        // y' = i ω y on a grid much finer than the internal steps
        let omega = 3.0;
        let samples: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let mut worst: f64 = 0.0;
        integrate(
            |_, y: &[Complex64], dy: &mut [Complex64]| dy[0] = Complex64::new(0.0, omega) * y[0],
            0.0,
            vec![Complex64::new(1.0, 0.0)],
            &[],
            &samples,
            Tolerances::default(),
            |_, t, y| worst = worst.max((y[0] - Complex64::new(0.0, omega * t).exp()).norm()),
        )
        .unwrap();
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn discontinuous_forcing_with_breakpoint() {
        // y' = 1 on [0, 1), 0 afterwards
        let forcing = |t: f64| if t < 1.0 { 1.0 } else { 0.0 };
        let y = integrate(
            |t, _: &[f64], dy: &mut [f64]| dy[0] = forcing(t),
            0.0,
            vec![0.0],
            &[1.0],
            &[2.0],
            Tolerances::default(),
            |_, _, _| {},
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10, "{}", y[0]);
    }

    #[test]
    fn stiff_blowup_reports_underflow() {
        let r = integrate(
            |_, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0],
            0.0,
            vec![1.0],
            &[],
            &[2.0],
            Tolerances::default(),
            |_, _, _| {},
        );
        match r {
            Err(Error::StepSizeUnderflow { time, .. }) => assert!((time - 1.0).abs() < 1e-6, "{time}"),
            other => panic!("expected underflow, got {other:?}"),
        }
    }
}
