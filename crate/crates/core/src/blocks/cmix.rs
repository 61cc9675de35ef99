//! Channel mix: a sigmoid-gated receptance path and a squared-ReLU key path,
//! each fed by its own token shift.

use rand::Rng;

use crate::error::Result;
use crate::numerics::activation::{sigmoid, sigmoid_backward, squared_relu, squared_relu_backward};
use crate::numerics::{join, FeatureMap, HasParams, LayerNorm, Linear, NormCache, Param, Scalar};
use crate::shift::{ShiftCache, ShiftVariant, TokenShift};

#[derive(Clone, Debug)]
pub struct Cmix<T> {
    pub shift_r: TokenShift<T>,
    pub shift_k: TokenShift<T>,
    pub receptance: Linear<T>,
    pub gate: Linear<T>,
    /// `C -> expansion * C`.
    pub key: Linear<T>,
    /// `expansion * C -> C`.
    pub value: Linear<T>,
    pub norm: LayerNorm<T>,
}

pub struct CmixCache<T> {
    shift_r: ShiftCache<T>,
    shift_k: ShiftCache<T>,
    sr: FeatureMap<T>,
    sk: FeatureMap<T>,
    rc: FeatureMap<T>,
    g: FeatureMap<T>,
    kc: FeatureMap<T>,
    hidden: FeatureMap<T>,
    normed: FeatureMap<T>,
    norm: NormCache<T>,
}

impl<T: Scalar> Cmix<T> {
    pub fn new(channels: usize, expansion: usize, shift: ShiftVariant, rng: &mut impl Rng) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            shift_r: TokenShift::new(shift, channels)?,
            shift_k: TokenShift::new(shift, channels)?,
            receptance: Linear::new(channels, channels, rng),
            gate: Linear::new(channels, channels, rng),
            key: Linear::new(channels, hidden, rng),
            value: Linear::new(hidden, channels, rng),
            norm: LayerNorm::new(channels),
        })
    }

    pub fn forward(&self, z: &FeatureMap<T>) -> Result<(FeatureMap<T>, CmixCache<T>)> {
        let (sr, shift_r) = self.shift_r.forward(z);
        let (sk, shift_k) = self.shift_k.forward(z);
        let rc = self.receptance.forward(&sr)?;
        let g = sigmoid(&self.gate.forward(&rc)?);
        let kc = self.key.forward(&sk)?;
        let hidden = squared_relu(&kc);
        let projected = self.value.forward(&hidden)?;
        let (normed, norm) = self.norm.forward(&projected);
        let y = g.mul(&normed)?;
        Ok((
            y,
            CmixCache {
                shift_r,
                shift_k,
                sr,
                sk,
                rc,
                g,
                kc,
                hidden,
                normed,
                norm,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CmixCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let dgate_pre = sigmoid_backward(&cache.g, &dy.mul(&cache.normed)?);
        let drc = self.gate.backward(&cache.rc, &dgate_pre);
        let dsr = self.receptance.backward(&cache.sr, &drc);

        let dprojected = self.norm.backward(&cache.norm, &dy.mul(&cache.g)?);
        let dhidden = self.value.backward(&cache.hidden, &dprojected);
        let dkc = squared_relu_backward(&cache.kc, &dhidden);
        let dsk = self.key.backward(&cache.sk, &dkc);

        let mut dz = self.shift_r.backward(&cache.shift_r, &dsr);
        dz.axpy(T::one(), &self.shift_k.backward(&cache.shift_k, &dsk))?;
        Ok(dz)
    }
}

impl<T: Scalar> HasParams<T> for Cmix<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.shift_r.visit(&join(prefix, "shift_r"), f);
        self.shift_k.visit(&join(prefix, "shift_k"), f);
        self.receptance.visit(&join(prefix, "receptance"), f);
        self.gate.visit(&join(prefix, "gate"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.shift_r.visit_mut(&join(prefix, "shift_r"), f);
        self.shift_k.visit_mut(&join(prefix, "shift_k"), f);
        self.receptance.visit_mut(&join(prefix, "receptance"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let m = Cmix::<f32>::new(48, 4, ShiftVariant::Cts, &mut rng).unwrap();
        let x = FeatureMap::randn([2, 48, 16, 16], &mut rng);
        assert_eq!(m.forward(&x).unwrap().0.shape(), [2, 48, 16, 16]);
    }

    #[test]
    fn zero_input_gives_half_of_norm_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut m = Cmix::<f64>::new(4, 4, ShiftVariant::Cts, &mut rng).unwrap();
        for lin in [&mut m.receptance, &mut m.gate, &mut m.key, &mut m.value] {
            lin.bias.fill(0.0);
        }
        let beta = [0.4, -1.0, 2.0, 0.0];
        m.norm.beta.value.copy_from_slice(&beta);
        let (y, _) = m.forward(&FeatureMap::zeros([1, 4, 3, 3])).unwrap();
        for c in 0..4 {
            for v in y.plane(0, c) {
                // sigmoid(0) * (gamma * 0 + beta)
                assert!((v - 0.5 * beta[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut m = Cmix::<f64>::new(4, 4, ShiftVariant::Cts, &mut rng).unwrap();
        m.shift_r.omega_raw.value[0] = -0.4;
        m.shift_k.omega_raw.value[0] = 0.6;
        let x = FeatureMap::randn([2, 4, 4, 4], &mut rng);
        let probe = FeatureMap::randn(x.shape(), &mut rng);
        let (_, cache) = m.forward(&x).unwrap();
        let dx = m.backward(&cache, &probe).unwrap();
        let rep = check_params(&mut m, &mut |mm: &Cmix<f64>| probe_loss(&mm.forward(&x).unwrap().0, &probe), 40, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        let m2 = m.clone();
        let rep = check_input(&x, &dx, &mut |xx| probe_loss(&m2.forward(xx).unwrap().0, &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
