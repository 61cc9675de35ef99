//! Frequency mix: a pointwise linear map over stacked real and imaginary
//! spectra, transformed back and used to modulate the input.

use rand::Rng;

use crate::error::Result;
use crate::numerics::activation::leaky_relu_backward;
use crate::numerics::fft::{fft2d_backward, ifft2d_backward};
use crate::numerics::{fft2d, ifft2d, join, leaky_relu, ComplexMap, FeatureMap, HasParams, LayerNorm, Linear, NormCache, Param, Scalar};

#[derive(Clone, Debug)]
pub struct Fmix<T> {
    /// Acts on `2C` stacked channels.
    pub spectral: Linear<T>,
    pub slope: T,
    pub norm: LayerNorm<T>,
}

pub struct FmixCache<T> {
    x: FeatureMap<T>,
    stacked: FeatureMap<T>,
    pre: FeatureMap<T>,
    s: FeatureMap<T>,
    norm: NormCache<T>,
}

impl<T: Scalar> Fmix<T> {
    pub fn new(channels: usize, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            spectral: Linear::new(2 * channels, 2 * channels, rng),
            slope: T::of(slope),
            norm: LayerNorm::new(channels),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, FmixCache<T>)> {
        let stacked = fft2d(x).stack();
        let pre = self.spectral.forward(&stacked)?;
        let mixed = ComplexMap::unstack(&leaky_relu(&pre, self.slope))?;
        let (s, _) = ifft2d(&mixed);
        let (y, norm) = self.norm.forward(&s.mul(x)?);
        Ok((
            y,
            FmixCache {
                x: x.clone(),
                stacked,
                pre,
                s,
                norm,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FmixCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let dp = self.norm.backward(&cache.norm, dy);
        let mut dx = dp.mul(&cache.s)?;
        let dmixed = ifft2d_backward(&dp.mul(&cache.x)?).stack();
        let dpre = leaky_relu_backward(&cache.pre, self.slope, &dmixed);
        let dstacked = self.spectral.backward(&cache.stacked, &dpre);
        dx.axpy(T::one(), &fft2d_backward(&ComplexMap::unstack(&dstacked)?))?;
        Ok(dx)
    }
}

impl<T: Scalar> HasParams<T> for Fmix<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.spectral.visit(&join(prefix, "spectral"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.spectral.visit_mut(&join(prefix, "spectral"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};
    use crate::numerics::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_spectrum_with_transparent_activation_squares_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut m = Fmix::<f64>::new(3, 1.0, &mut rng);
        m.spectral = Linear::identity(6);
        let x = FeatureMap::randn([2, 3, 5, 4], &mut rng);
        let (y, _) = m.forward(&x).unwrap();
        let sq = x.mul(&x).unwrap();
        let (expect, _) = layer_norm(&sq, &m.norm.gamma.value, &m.norm.beta.value, 1e-5);
        assert!(y.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn zero_input_gives_norm_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut m = Fmix::<f64>::new(2, 0.2, &mut rng);
        m.norm.beta.value.copy_from_slice(&[0.7, -0.3]);
        let (y, _) = m.forward(&FeatureMap::zeros([1, 2, 4, 4])).unwrap();
        assert!(y.plane(0, 0).iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(y.plane(0, 1).iter().all(|v| (v + 0.3).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut m = Fmix::<f64>::new(3, 0.2, &mut rng);
        let x = FeatureMap::randn([2, 3, 4, 5], &mut rng);
        let probe = FeatureMap::randn(x.shape(), &mut rng);
        let (_, cache) = m.forward(&x).unwrap();
        let dx = m.backward(&cache, &probe).unwrap();
        let rep = check_params(&mut m, &mut |mm: &Fmix<f64>| probe_loss(&mm.forward(&x).unwrap().0, &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        let m2 = m.clone();
        let rep = check_input(&x, &dx, &mut |xx| probe_loss(&m2.forward(xx).unwrap().0, &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
