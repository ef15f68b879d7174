//! Variance-stabilizing and noise-normalizing transforms for
//! Poisson-Gaussian data.
//!
//! Inputs are DN above black, modelled as `y = K * Poisson(e) + N(0, sigma^2)`.
//! The generalized Anscombe transform (GAT) maps `y` to roughly unit-variance
//! Gaussian noise; the kSigma transform rescales it to unit-gain form where
//! variance equals mean. Both have closed-form algebraic inverses.

use crate::calibration::NoiseParams;
use crate::error::{Error, Result};

/// Poisson-Gaussian parameters in the DN domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgParams {
    /// DN per electron.
    pub k: f64,
    /// Total Gaussian standard deviation, DN.
    pub sigma: f64,
}

impl PgParams {
    pub fn new(k: f64, sigma: f64) -> Result<Self> {
        let p = Self { k, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Domain(format!("K must be positive, got {}", self.k)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Parameters seen in a digitally gained image: the gain scales both the
    /// shot-noise slope and every signal-independent component.
    pub fn effective(params: &NoiseParams, dgain: f64) -> Result<Self> {
        if !(dgain > 0.0) {
            return Err(Error::Domain(format!("digital gain must be positive, got {dgain}")));
        }
        let var = params.sigma_read.powi(2)
            + params.sigma_row.powi(2)
            + params.quant_step.powi(2) / 12.0
            + params.sigma_frame.powi(2);
        Self::new(dgain * params.k, dgain * var.sqrt())
    }
}

/// `y / K + sigma^2 / K^2`.
pub fn ksigma_forward(y: f64, p: &PgParams) -> Result<f64> {
    p.validate()?;
    Ok(KSigma(*p).forward(y))
}

/// `K t - sigma^2 / K`.
pub fn ksigma_inverse(t: f64, p: &PgParams) -> Result<f64> {
    p.validate()?;
    Ok(KSigma(*p).inverse(t))
}

/// `(2 / K) sqrt(max(K y + 3/8 K^2 + sigma^2, 0))`.
pub fn gat_forward(y: f64, p: &PgParams) -> Result<f64> {
    p.validate()?;
    Ok(Gat(*p).forward(y))
}

/// Algebraic inverse `(K / 4) t^2 - 3/8 K - sigma^2 / K`.
pub fn gat_inverse(t: f64, p: &PgParams) -> Result<f64> {
    p.validate()?;
    if t < 0.0 {
        return Err(Error::Domain(format!("GAT inverse needs t >= 0, got {t}")));
    }
    Ok(Gat(*p).inverse(t))
}

/// Elementwise forward/inverse pair used by the denoiser.
///
/// Implement this to plug in a different inverse (for example an unbiased
/// lookup table) without touching the pipeline.
pub trait Stabilizer: Send + Sync {
    fn forward(&self, y: f64) -> f64;
    fn inverse(&self, t: f64) -> f64;
}

/// Generalized Anscombe transform.
#[derive(Debug, Clone, Copy)]
pub struct Gat(pub PgParams);

impl Stabilizer for Gat {
    fn forward(&self, y: f64) -> f64 {
        let PgParams { k, sigma } = self.0;
        (2.0 / k) * (k * y + 0.375 * k * k + sigma * sigma).max(0.0).sqrt()
    }

    /// Negative inputs are treated as zero.
    fn inverse(&self, t: f64) -> f64 {
        let PgParams { k, sigma } = self.0;
        let t = t.max(0.0);
        0.25 * k * t * t - 0.375 * k - sigma * sigma / k
    }
}

/// kSigma unit-gain normalization.
#[derive(Debug, Clone, Copy)]
pub struct KSigma(pub PgParams);

impl Stabilizer for KSigma {
    fn forward(&self, y: f64) -> f64 {
        let PgParams { k, sigma } = self.0;
        y / k + sigma * sigma / (k * k)
    }

    fn inverse(&self, t: f64) -> f64 {
        let PgParams { k, sigma } = self.0;
        k * t - sigma * sigma / k
    }
}

/// Pass-through, for denoising directly in the DN domain.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Stabilizer for Identity {
    fn forward(&self, y: f64) -> f64 {
        y
    }

    fn inverse(&self, t: f64) -> f64 {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    fn p(k: f64, s: f64) -> PgParams {
        PgParams::new(k, s).unwrap()
    }

    #[test]
    fn ksigma_values() {
        assert_eq!(ksigma_forward(10.0, &p(2.0, 4.0)).unwrap(), 9.0);
        assert_eq!(ksigma_inverse(9.0, &p(2.0, 4.0)).unwrap(), 10.0);
        assert_eq!(ksigma_forward(123.5, &p(1.0, 0.0)).unwrap(), 123.5);
        assert_eq!(ksigma_inverse(16.0 / 4.0, &p(2.0, 4.0)).unwrap(), 0.0);
    }

    #[test]
    fn gat_values() {
        let t0 = gat_forward(0.0, &p(1.0, 0.0)).unwrap();
        assert!((t0 - 2.0 * 0.375f64.sqrt()).abs() < 1e-15);
        assert!((t0 - 1.224745).abs() < 1e-6);
        let t = gat_forward(10.0, &p(0.5, 1.0)).unwrap();
        assert!((t - 4.0 * 6.09375f64.sqrt()).abs() < 1e-12);
        assert!((t - 9.874209).abs() < 1e-6);
        assert_eq!(gat_inverse(2.0, &p(1.0, 0.0)).unwrap(), 0.625);
        let back = gat_inverse(t, &p(0.5, 1.0)).unwrap();
        assert!((back - 10.0).abs() < 1e-12 * 10.0);
        assert!(gat_inverse(t0, &p(1.0, 0.0)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let bad = PgParams { k: 0.0, sigma: 1.0 };
        assert!(matches!(ksigma_forward(1.0, &bad), Err(Error::Domain(_))));
        assert!(matches!(ksigma_inverse(1.0, &bad), Err(Error::Domain(_))));
        assert!(matches!(gat_forward(1.0, &bad), Err(Error::Domain(_))));
        assert!(matches!(gat_inverse(-0.1, &p(1.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn effective_params_scale_with_dgain() {
        let n = NoiseParams { k: 0.8, sigma_read: 4.0, sigma_row: 0.0, quant_step: 0.0, sigma_frame: 0.0 };
        let e = PgParams::effective(&n, 100.0).unwrap();
        assert!((e.k - 80.0).abs() < 1e-12);
        assert!((e.sigma - 400.0).abs() < 1e-12);
        assert!(PgParams::effective(&n, 0.0).is_err());
    }

    #[test]
    fn ksigma_mean_equals_variance() {
        let params = p(2.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pois = Poisson::new(50.0).unwrap();
        let gauss = Normal::new(0.0, 4.0).unwrap();
        let n = 1_000_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let y: f64 = 2.0 * pois.sample(&mut rng) + gauss.sample(&mut rng);
                KSigma(params).forward(y)
            })
            .collect();
        let mean = crate::stats::mean(&vals).unwrap();
        let var = crate::stats::sample_variance(&vals).unwrap();
        assert!((var / mean - 1.0).abs() < 0.03, "mean {mean} var {var}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn forwards_are_increasing(k in 0.05f64..8.0, s in 0.0f64..20.0, y in 0.0f64..1e5, dy in 1e-3f64..100.0) {
            let pp = p(k, s);
            prop_assert!(Gat(pp).forward(y + dy) > Gat(pp).forward(y));
            prop_assert!(KSigma(pp).forward(y + dy) > KSigma(pp).forward(y));
        }

        #[test]
        fn round_trips(k in 0.05f64..8.0, s in 0.0f64..20.0, y in 0.0f64..1e5) {
            // Relative to the magnitude of the terms the inverse cancels.
            let pp = p(k, s);
            let scale = y.abs() + s * s / k + k;
            let g = Gat(pp).inverse(Gat(pp).forward(y));
            prop_assert!((g - y).abs() <= 1e-12 * scale);
            let ks = KSigma(pp).inverse(KSigma(pp).forward(y));
            prop_assert!((ks - y).abs() <= 1e-12 * scale);
        }
    }
}
