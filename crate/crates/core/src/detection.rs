//! Ion detection model: each absorber's Rydberg excitation is detected with
//! efficiency η, on top of Poissonian spurious excitations (slope p₂ per
//! input photon) and dark counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dark-count rate of the ion detector, per µs.
pub const DARK_COUNT_RATE_PER_US: f64 = 9e-3;
/// Ion detection window, µs.
pub const DETECTION_WINDOW_US: f64 = 0.075;

/// Detection parameters of one absorber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub eta: f64,
    /// Spurious excitation probability per input photon.
    pub p2: f64,
    /// Mean dark counts per shot.
    pub dark_mean: f64,
    pub noise_scale: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { eta: 0.2, p2: 0.0, dark_mean: DARK_COUNT_RATE_PER_US * DETECTION_WINDOW_US, noise_scale: 1.0 }
    }
}

impl DetectionParams {
    /// Ideal detector with efficiency `eta` and no noise.
    pub fn ideal(eta: f64) -> Self {
        Self { eta, p2: 0.0, dark_mean: 0.0, noise_scale: 1.0 }
    }

    /// Noise settings matched to the three-absorber ion data; the middle
    /// absorber carries five times the dark-count offset.
    pub fn three_absorber(eta: f64) -> [Self; 3] {
        let base = Self { eta, ..Self::default() };
        [
            Self { p2: 3.5e-4, ..base },
            Self { p2: 6.5e-4, noise_scale: 5.0, ..base },
            Self { p2: 5.0e-4, ..base },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta = {} outside [0, 1]", self.eta)));
        }
        for (name, v) in [("p2", self.p2), ("dark_mean", self.dark_mean), ("noise_scale", self.noise_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Mean of the Poissonian background for `n_in` input photons.
    pub fn background(&self, n_in: f64) -> f64 {
        self.eta * self.p2 * n_in + self.noise_scale * self.dark_mean
    }
}

/// Mean, variance and Mandel Q of an ion count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountMoments {
    pub mean: f64,
    pub variance: f64,
    /// `Var/mean - 1`; NaN when the mean vanishes.
    pub q: f64,
}

impl CountMoments {
    fn new(mean: f64, variance: f64) -> Self {
        let q = if mean > 0.0 { variance / mean - 1.0 } else { f64::NAN };
        Self { mean, variance, q }
    }

    pub fn q_per_mean(&self) -> f64 {
        self.q / self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonStats {
    pub total: CountMoments,
    pub per_absorber: Vec<CountMoments>,
}

/// Analytic ion statistics for absorbers with Rydberg populations `p_ryd`.
/// Absorber `i` yields `Bernoulli(ηᵢ pᵢ) + Poisson(ηᵢ p₂ᵢ n_in + sᵢ dᵢ)`
/// ions, independently of the others.
pub fn ion_statistics(p_ryd: &[f64], n_in: f64, params: &[DetectionParams]) -> Result<IonStats> {
    if p_ryd.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: p_ryd.len(), found: params.len() });
    }
    if !(n_in.is_finite() && n_in >= 0.0) {
        return Err(Error::invalid(format!("n_in = {n_in} must be finite and >= 0")));
    }
    let mut per_absorber = Vec::with_capacity(p_ryd.len());
    let (mut mean, mut variance) = (0.0, 0.0);
    for (&p, d) in p_ryd.iter().zip(params) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("Rydberg population {p} outside [0, 1]")));
        }
        d.validate()?;
        let q = d.eta * p;
        let lambda = d.background(n_in);
        let m = CountMoments::new(q + lambda, q * (1.0 - q) + lambda);
        mean += m.mean;
        variance += m.variance;
        per_absorber.push(m);
    }
    Ok(IonStats { total: CountMoments::new(mean, variance), per_absorber })
}

/// Draws `shots` ion counts per absorber from the detection model;
/// `result[shot][absorber]`.
pub fn sample_counts(
    p_ryd: &[f64],
    n_in: f64,
    params: &[DetectionParams],
    shots: usize,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    ion_statistics(p_ryd, n_in, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists = p_ryd
        .iter()
        .zip(params)
        .map(|(&p, d)| {
            let b = Bernoulli::new(d.eta * p).map_err(|e| Error::invalid(e.to_string()))?;
            let lambda = d.background(n_in);
            let poisson = if lambda > 0.0 {
                Some(Poisson::new(lambda).map_err(|e| Error::invalid(e.to_string()))?)
            } else {
                None
            };
            Ok((b, poisson))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..shots)
        .map(|_| {
            dists
                .iter()
                .map(|(b, p)| u64::from(b.sample(&mut rng)) + p.map_or(0, |p| p.sample(&mut rng) as u64))
                .collect()
        })
        .collect())
}

/// Sample mean and Mandel Q with the unbiased variance estimator. A single
/// count has zero variance by convention.
pub fn mandel_q_empirical(counts: &[u64]) -> Result<CountMoments> {
    if counts.is_empty() {
        return Err(Error::invalid("no counts"));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let variance = if counts.len() > 1 {
        counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(CountMoments::new(mean, variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn saturated_single_absorber() {
        let s = ion_statistics(&[1.0], 10.0, &[DetectionParams::ideal(0.2)]).unwrap();
        assert!((s.total.mean - 0.2).abs() < 1e-15);
        assert!((s.total.variance - 0.16).abs() < 1e-15);
        assert!((s.total.q + 0.2).abs() < 1e-15);
    }

    #[test]
    fn three_saturated_absorbers() {
        let d = [DetectionParams::ideal(0.2); 3];
        let s = ion_statistics(&[1.0; 3], 10.0, &d).unwrap();
        assert!((s.total.mean - 0.6).abs() < 1e-15);
        assert!((s.total.q + 0.2).abs() < 1e-12);
        assert!((s.total.q + s.total.mean / 3.0).abs() < 1e-12);
    }

    #[test]
    fn default_dark_counts() {
        assert!((DetectionParams::default().dark_mean - 6.75e-4).abs() < 1e-18);
        let d = DetectionParams::three_absorber(0.2);
        assert_eq!(d[1].noise_scale, 5.0);
        assert_eq!([d[0].p2, d[1].p2, d[2].p2], [3.5e-4, 6.5e-4, 5.0e-4]);
    }

    #[test]
    fn noise_lifts_q_per_mean() {
        let d = DetectionParams::three_absorber(0.2);
        let mut last = f64::NEG_INFINITY;
        for n_in in [5.0, 10.0, 20.0, 40.0] {
            let s = ion_statistics(&[1.0; 3], n_in, &d).unwrap();
            for m in &s.per_absorber {
                assert!(m.q_per_mean() > -1.0);
            }
            assert!(s.per_absorber[0].q_per_mean() > last);
            last = s.per_absorber[0].q_per_mean();
        }
    }

    #[test]
    fn rejects_bad_input() {
        let d = [DetectionParams::ideal(0.2)];
        assert!(ion_statistics(&[1.5], 1.0, &d).is_err());
        assert!(ion_statistics(&[0.5, 0.5], 1.0, &d).is_err());
        assert!(ion_statistics(&[0.5], 1.0, &[DetectionParams::ideal(1.2)]).is_err());
        assert!(mandel_q_empirical(&[]).is_err());
        assert!(ion_statistics(&[0.0], 0.0, &d).unwrap().total.q.is_nan());
    }

    #[test]
    fn empirical_q() {
        assert_eq!(mandel_q_empirical(&[3, 3, 3, 3]).unwrap().q, -1.0);
        assert_eq!(mandel_q_empirical(&[2]).unwrap().q, -1.0);
        let m = mandel_q_empirical(&[0, 1, 2, 3]).unwrap();
        assert!((m.mean - 1.5).abs() < 1e-15);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);

        let bern = sample_counts(&[1.0], 0.0, &[DetectionParams::ideal(0.2)], 200_000, 7).unwrap();
        let q = mandel_q_empirical(&bern.iter().map(|s| s[0]).collect::<Vec<_>>()).unwrap().q;
        assert!((q + 0.2).abs() < 0.01, "{q}");

        let pois = DetectionParams { eta: 0.0, p2: 0.0, dark_mean: 2.0, noise_scale: 1.0 };
        let c = sample_counts(&[0.0], 0.0, &[pois], 200_000, 8).unwrap();
        let q = mandel_q_empirical(&c.iter().map(|s| s[0]).collect::<Vec<_>>()).unwrap().q;
        assert!(q.abs() < 0.02, "{q}");
    }

    #[test]
    fn sampling_matches_analytic_moments() {
        let d = DetectionParams::three_absorber(0.22);
        let p = [0.9, 0.7, 0.5];
        let exact = ion_statistics(&p, 30.0, &d).unwrap();
        let shots = sample_counts(&p, 30.0, &d, 200_000, 11).unwrap();
        let totals: Vec<u64> = shots.iter().map(|s| s.iter().sum()).collect();
        let emp = mandel_q_empirical(&totals).unwrap();
        assert!((emp.mean - exact.total.mean).abs() < 5e-3);
        assert!((emp.q - exact.total.q).abs() < 0.01);
        assert_eq!(shots, sample_counts(&p, 30.0, &d, 200_000, 11).unwrap());
    }

    proptest! {
        #[test]
        fn bernoulli_identity(eta in 0.0..=1.0f64, p in 0.001..=1.0f64) {
            let s = ion_statistics(&[p], 3.0, &[DetectionParams::ideal(eta)]).unwrap();
            if eta > 0.0 {
                prop_assert!((s.total.q + eta * p).abs() < 1e-12);
            }
            prop_assert!(s.total.variance >= 0.0);
        }

        #[test]
        fn mean_is_linear(a in 0.0..=1.0f64, b in 0.0..=1.0f64, n in 0.0..100.0f64) {
            let d = DetectionParams::three_absorber(0.2);
            let s = |p: f64, n: f64| ion_statistics(&[p, 0.3, 0.4], n, &d).unwrap().total.mean;
            let mid = s(0.5 * (a + b), n);
            prop_assert!((mid - 0.5 * (s(a, n) + s(b, n))).abs() < 1e-12);
            prop_assert!((s(a, 2.0 * n) - 2.0 * s(a, n) + s(a, 0.0)).abs() < 1e-12);
        }
    }
}
