//! Additive complex Gaussian measurement noise.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Real and imaginary parts each receive independent `N(0, sigma^2)` noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }

    /// `sigma = mean|s| / snr` for the reference signal `s`.
    pub fn for_snr(reference: &[Complex64], snr: f64, seed: u64) -> Result<Self> {
        if !(snr > 0.0) || reference.is_empty() {
            return Err(Error::InvalidParams(
                "SNR needs a positive value and a non-empty reference".into(),
            ));
        }
        Self::new(mean_magnitude(reference) / snr, seed)
    }
}

pub fn mean_magnitude(s: &[Complex64]) -> f64 {
    s.iter().map(|x| x.norm()).sum::<f64>() / s.len() as f64
}

/// Returns `signals` plus noise, drawn sequentially from one seeded stream.
pub fn add_noise(signals: &[Complex64], noise: &NoiseModel) -> Vec<Complex64> {
    if noise.sigma == 0.0 {
        return signals.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    signals
        .iter()
        .map(|&x| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            x + Complex64::new(re, im) * noise.sigma
        })
        .collect()
}
