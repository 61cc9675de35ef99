//! Layer normalization across the channel axis at every pixel.

use rayon::prelude::*;

use super::tensor::{join, FeatureMap, HasParams, Param};
use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved statistics for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: FeatureMap<T>,
    rstd: Vec<T>,
}

/// Normalizes each (batch, pixel) channel vector, then scales by `gamma`
/// and shifts by `beta`.
pub fn layer_norm<T: Scalar>(x: &FeatureMap<T>, gamma: &[T], beta: &[T], eps: T) -> (FeatureMap<T>, NormCache<T>) {
    let [b, c, h, w] = x.shape();
    assert_eq!(gamma.len(), c, "layer_norm gamma length");
    assert_eq!(beta.len(), c, "layer_norm beta length");
    let hw = h * w;
    let mut xhat = FeatureMap::zeros(x.shape());
    let mut y = FeatureMap::zeros(x.shape());
    let mut rstd = vec![T::zero(); b * hw];
    let inv_c = T::one() / T::of(c as f64);
    xhat.data_mut()
        .par_chunks_mut((c * hw).max(1))
        .zip(y.data_mut().par_chunks_mut((c * hw).max(1)))
        .zip(rstd.par_chunks_mut(hw.max(1)))
        .enumerate()
        .for_each(|(ib, ((xh, out), rs))| {
            let item = x.item(ib);
            let mut mean = vec![T::zero(); hw];
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&item[ch * hw..(ch + 1) * hw]) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m * inv_c);
            let mut var = vec![T::zero(); hw];
            for ch in 0..c {
                for p in 0..hw {
                    let d = item[ch * hw + p] - mean[p];
                    var[p] = var[p] + d * d;
                }
            }
            for p in 0..hw {
                rs[p] = T::one() / (var[p] * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                for p in 0..hw {
                    let o = ch * hw + p;
                    let n = (item[o] - mean[p]) * rs[p];
                    xh[o] = n;
                    out[o] = n * gamma[ch] + beta[ch];
                }
            }
        });
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    dy: &FeatureMap<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> FeatureMap<T> {
    let [b, c, h, w] = dy.shape();
    let hw = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = FeatureMap::zeros(dy.shape());
    dx.data_mut()
        .par_chunks_mut((c * hw).max(1))
        .enumerate()
        .for_each(|(ib, out)| {
            let xh = cache.xhat.item(ib);
            let g = dy.item(ib);
            let rs = &cache.rstd[ib * hw..(ib + 1) * hw];
            let mut mean_d = vec![T::zero(); hw];
            let mut mean_dx = vec![T::zero(); hw];
            for ch in 0..c {
                for p in 0..hw {
                    let d = g[ch * hw + p] * gamma[ch];
                    mean_d[p] = mean_d[p] + d;
                    mean_dx[p] = mean_dx[p] + d * xh[ch * hw + p];
                }
            }
            for ch in 0..c {
                for p in 0..hw {
                    let o = ch * hw + p;
                    let d = g[o] * gamma[ch];
                    out[o] = rs[p] * (d - mean_d[p] * inv_c - xh[o] * mean_dx[p] * inv_c);
                }
            }
        });
    for ib in 0..b {
        let xh = cache.xhat.item(ib);
        let g = dy.item(ib);
        for ch in 0..c {
            let mut sg = T::zero();
            let mut sb = T::zero();
            for p in 0..hw {
                sg = sg + g[ch * hw + p] * xh[ch * hw + p];
                sb = sb + g[ch * hw + p];
            }
            dgamma[ch] = dgamma[ch] + sg;
            dbeta[ch] = dbeta[ch] + sb;
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::filled(vec![c], T::one(), false),
            beta: Param::filled(vec![c], T::zero(), false),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, NormCache<T>) {
        layer_norm(x, &self.gamma.value, &self.beta.value, T::of(LAYER_NORM_EPS))
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        layer_norm_backward(cache, &self.gamma.value, dy, &mut self.gamma.grad, &mut self.beta.grad)
    }
}

impl<T: Scalar> HasParams<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channels_collapse_to_beta() {
        let x = FeatureMap::<f64>::full([1, 4, 2, 2], 3.25);
        let (y, _) = LayerNorm::<f64>::new(4).forward(&x);
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn already_normalized_pair_is_unchanged() {
        let x = FeatureMap::<f64>::from_vec([1, 2, 1, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn per_position_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FeatureMap::<f64>::randn([2, 16, 3, 3], &mut rng).scale(3.0);
        let (y, _) = LayerNorm::<f64>::new(16).forward(&x);
        for b in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let vals: Vec<f64> = (0..16).map(|c| y.at(b, c, yy, xx)).collect();
                    let mean = vals.iter().sum::<f64>() / 16.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                    assert!(mean.abs() <= 1e-6);
                    assert!((var - 1.0).abs() <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = rng.gen_range(2..6);
            let x = FeatureMap::<f64>::randn([2, c, 2, 3], &mut rng);
            let mut ln = LayerNorm::<f64>::new(c);
            ln.gamma.value.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            ln.beta.value.iter_mut().for_each(|g| *g = rng.gen_range(-0.5..0.5));
            let probe = FeatureMap::<f64>::randn(x.shape(), &mut rng);
            let (_, cache) = ln.forward(&x);
            let dx = ln.backward(&cache, &probe);
            let rep = check_params(&mut ln, &mut |m: &LayerNorm<f64>| probe_loss(&m.forward(&x).0, &probe), usize::MAX, &mut rng);
            assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
            let l2 = ln.clone();
            let rep = check_input(&x, &dx, &mut |xx| probe_loss(&l2.forward(xx).0, &probe), usize::MAX, &mut rng);
            assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        }
    }
}
