use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Awgn,
    Poisson,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Gaussian standard deviation on the 0-255 scale.
    pub sigma: f64,
    /// Photon count corresponding to intensity 1.
    pub peak: f64,
}

impl NoiseSpec {
    pub fn awgn(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::Awgn,
            sigma,
            peak: 255.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.peak > 0.0) {
            return Err(Error::Config(format!(
                "noise needs sigma >= 0 and peak > 0, got sigma {} peak {}",
                self.sigma, self.peak
            )));
        }
        Ok(())
    }
}

/// Applies `spec` to a clean image in [0, 1]; the result is clipped to [0, 1].
pub fn add_noise<T: Scalar>(clean: &FeatureMap<T>, spec: &NoiseSpec, seed: u64) -> Result<FeatureMap<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, spec.sigma / 255.0).expect("sigma checked");
    let shot = |v: f64, rng: &mut ChaCha8Rng| {
        let lambda = v.max(0.0) * spec.peak;
        if lambda == 0.0 {
            0.0
        } else {
            Poisson::new(lambda).expect("positive rate").sample(rng) / spec.peak
        }
    };
    let data = clean
        .data()
        .iter()
        .map(|v| {
            let v = v.f64();
            let y = match spec.kind {
                NoiseKind::Awgn => v + gauss.sample(&mut rng),
                NoiseKind::Poisson => shot(v, &mut rng),
                NoiseKind::Mixed => shot(v, &mut rng) + gauss.sample(&mut rng),
            };
            T::of(y.clamp(0.0, 1.0))
        })
        .collect();
    FeatureMap::from_vec(clean.shape(), data)
}
