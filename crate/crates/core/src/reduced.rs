//! Rate model of a single absorber after adiabatic elimination of the bright
//! state, valid when dephasing dominates the coherent drive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChainConfig, SuperatomParams};
use crate::ode::{integrate, Tolerances};

/// Effective ground-to-dark pumping rate
/// `4κRγ_D / ((κ + Γ + γ_D)² + 4κR)`.
pub fn gamma_eff(p: &SuperatomParams, r_in: f64) -> f64 {
    let drive = 4.0 * p.kappa * r_in;
    if drive == 0.0 {
        return 0.0;
    }
    drive * p.gamma_d / (p.bright_decay().powi(2) + drive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModelResult {
    pub times: Vec<f64>,
    pub rho_gg: Vec<f64>,
    pub rho_dd: Vec<f64>,
}

/// Solves `dρ_GG/dt = -γ_eff(R_in(t)) ρ_GG` with the instantaneous input
/// rate, starting from the ground state at the first grid time.
pub fn evolve_rate_equation(cfg: &ChainConfig) -> Result<RateModelResult> {
    cfg.validate()?;
    if cfg.n_sub != 1 {
        return Err(Error::invalid(format!("rate model needs a single absorber, got n_sub = {}", cfg.n_sub)));
    }
    let p = cfg.site(0);
    // exponent ∫γ_eff dt, integrated exactly for piecewise-constant drive
    let tol = Tolerances { rtol: 1e-12, atol: 1e-14, max_step: cfg.solver.max_step };
    let mut rho_gg = Vec::with_capacity(cfg.t_grid.len());
    integrate(
        |t, _: &[f64], dy: &mut [f64]| dy[0] = gamma_eff(&p, cfg.pulse.rate(t)),
        cfg.t_start(),
        vec![0.0],
        &cfg.pulse.breakpoints(),
        &cfg.t_grid,
        tol,
        |_, _, y| rho_gg.push((-y[0]).exp()),
    )?;
    let rho_dd = rho_gg.iter().map(|g| 1.0 - g).collect();
    Ok(RateModelResult { times: cfg.t_grid.clone(), rho_gg, rho_dd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PulseSpec;
    use crate::observables::simulate;
    use proptest::prelude::*;

    #[test]
    fn closed_form_value() {
        let p = SuperatomParams::new(0.35, 0.04, 2.4);
        // 4·0.35·5·2.4 = 16.8; (2.79)² + 7 = 14.7841
        assert!((gamma_eff(&p, 5.0) - 16.8 / 14.7841).abs() < 1e-12);
        assert!((gamma_eff(&p, 5.0) - 1.136356).abs() < 1e-6);
        assert_eq!(gamma_eff(&p, 0.0), 0.0);
    }

    #[test]
    fn strong_dephasing_asymptote() {
        let ratio = |gd: f64, r: f64| gamma_eff(&SuperatomParams::new(0.35, 0.0, gd), r) / (4.0 * 0.35 * r / gd);
        // exact ratio γ_D² / ((κ + γ_D)² + 4κR)
        assert!((ratio(35.0, 5.0) - 1225.0 / (35.35f64.powi(2) + 7.0)).abs() < 1e-12);
        assert!((ratio(35.0, 0.01) - 1.0).abs() < 0.02);
        assert!((ratio(1e4, 5.0) - 1.0).abs() < 1e-4);
        let mut last = 0.0;
        for gd in [1.0, 10.0, 100.0, 1000.0] {
            assert!(ratio(gd, 5.0) > last);
            last = ratio(gd, 5.0);
        }
    }

    #[test]
    fn constant_drive_is_exponential() {
        let p = SuperatomParams::new(0.35, 0.04, 2.4);
        let g = gamma_eff(&p, 5.0);
        let cfg = ChainConfig::new(1, p, PulseSpec::flat(1.0 / g, 5.0)).unwrap();
        let res = evolve_rate_equation(&cfg).unwrap();
        assert!((res.rho_gg.last().unwrap() - (-1.0f64).exp()).abs() < 1e-9);
        for (t, g_t) in res.times.iter().zip(&res.rho_gg) {
            assert!((g_t - (-g * t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn no_drive_stays_in_ground() {
        let cfg = ChainConfig::new(1, SuperatomParams::FITTED_ONE, PulseSpec::flat(2.0, 0.0)).unwrap();
        let res = evolve_rate_equation(&cfg).unwrap();
        assert!(res.rho_gg.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn rejects_chains() {
        let cfg = ChainConfig::new(2, SuperatomParams::FITTED_TWO, PulseSpec::flat(2.0, 1.0)).unwrap();
        assert!(evolve_rate_equation(&cfg).is_err());
    }

    #[test]
    fn overdamped_agrees_with_master_equation() {
        for (gd, r) in [(10.0, 10.0), (20.0, 10.0), (10.0, 20.0)] {
            let cfg = ChainConfig::new(1, SuperatomParams::new(0.35, 0.0, gd), PulseSpec::flat(3.0, r)).unwrap();
            let rate = evolve_rate_equation(&cfg).unwrap();
            let me = simulate(&cfg).unwrap();
            // compared after the pulse: during it the rate model runs ahead by
            // the bright-state build-up time ~ 1/γ_D
            let last = me.populations.last().unwrap()[0][2];
            assert!((rate.rho_dd.last().unwrap() - last).abs() < 0.05);
        }
    }

    proptest! {
        #[test]
        fn increasing_in_drive(k in 0.01..2.0f64, g in 0.0..0.5f64, gd in 0.01..20.0f64, r in 0.0..50.0f64, dr in 0.01..10.0f64) {
            let p = SuperatomParams::new(k, g, gd);
            prop_assert!(gamma_eff(&p, r + dr) > gamma_eff(&p, r));
        }

        #[test]
        fn populations_complementary(r in 0.0..20.0f64, tau in 0.5..5.0f64) {
            let cfg = ChainConfig::new(1, SuperatomParams::FITTED_ONE, PulseSpec::flat(tau, r)).unwrap().with_spacing(0.05).unwrap();
            let res = evolve_rate_equation(&cfg).unwrap();
            for (g, d) in res.rho_gg.iter().zip(&res.rho_dd) {
                prop_assert!((g + d - 1.0).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(g) && (0.0..=1.0).contains(d));
            }
        }
    }
}
