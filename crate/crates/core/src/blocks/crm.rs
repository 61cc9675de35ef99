//! Context receptance module: shared token shift, receptance/key/value
//! projections, BiWKV over the flattened plane, sigmoid gate.

use rand::Rng;

use crate::error::Result;
use crate::numerics::activation::{sigmoid, sigmoid_backward};
use crate::numerics::{join, FeatureMap, HasParams, LayerNorm, Linear, NormCache, Param, Scalar};
use crate::shift::{ShiftCache, ShiftVariant, TokenShift};
use crate::wkv::{biwkv_backward, biwkv_scan, TokenSequence, WkvParams};

#[derive(Clone, Debug)]
pub struct Crm<T> {
    pub shift: TokenShift<T>,
    pub receptance: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub decay: Param<T>,
    pub bonus: Param<T>,
    pub norm: LayerNorm<T>,
}

pub struct CrmCache<T> {
    shift: ShiftCache<T>,
    shifted: FeatureMap<T>,
    seq: TokenSequence<T>,
    gate: FeatureMap<T>,
    normed: FeatureMap<T>,
    norm: NormCache<T>,
}

impl<T: Scalar> Crm<T> {
    pub fn new(channels: usize, shift: ShiftVariant, rng: &mut impl Rng) -> Result<Self> {
        let init = WkvParams::<T>::init(channels);
        Ok(Self {
            shift: TokenShift::new(shift, channels)?,
            receptance: Linear::new(channels, channels, rng),
            key: Linear::new(channels, channels, rng),
            value: Linear::new(channels, channels, rng),
            decay: Param::new(vec![channels], init.w, false),
            bonus: Param::new(vec![channels], init.u, false),
            norm: LayerNorm::new(channels),
        })
    }

    pub fn wkv_params(&self) -> WkvParams<T> {
        WkvParams {
            w: self.decay.value.clone(),
            u: self.bonus.value.clone(),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, CrmCache<T>)> {
        let (shifted, shift) = self.shift.forward(x);
        let r = self.receptance.forward(&shifted)?;
        let k = self.key.forward(&shifted)?;
        let v = self.value.forward(&shifted)?;
        let seq = TokenSequence::from_maps(&k, &v)?;
        let mixed = FeatureMap::from_vec(x.shape(), biwkv_scan(&seq, &self.wkv_params())?)?;
        let (normed, norm) = self.norm.forward(&mixed);
        let gate = sigmoid(&r);
        let y = gate.mul(&normed)?;
        Ok((
            y,
            CrmCache {
                shift,
                shifted,
                seq,
                gate,
                normed,
                norm,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CrmCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let dnormed = dy.mul(&cache.gate)?;
        let dr = sigmoid_backward(&cache.gate, &dy.mul(&cache.normed)?);
        let dmixed = self.norm.backward(&cache.norm, &dnormed);
        let grads = biwkv_backward(&cache.seq, &self.wkv_params(), dmixed.data())?;
        for (c, (gw, gu)) in grads.w.iter().zip(&grads.u).enumerate() {
            self.decay.grad[c] = self.decay.grad[c] + *gw;
            self.bonus.grad[c] = self.bonus.grad[c] + *gu;
        }
        let dk = FeatureMap::from_vec(dy.shape(), grads.k)?;
        let dv = FeatureMap::from_vec(dy.shape(), grads.v)?;
        let mut ds = self.receptance.backward(&cache.shifted, &dr);
        ds.axpy(T::one(), &self.key.backward(&cache.shifted, &dk))?;
        ds.axpy(T::one(), &self.value.backward(&cache.shifted, &dv))?;
        Ok(self.shift.backward(&cache.shift, &ds))
    }
}

impl<T: Scalar> HasParams<T> for Crm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.shift.visit(&join(prefix, "shift"), f);
        self.receptance.visit(&join(prefix, "receptance"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        f(&join(prefix, "decay"), &self.decay);
        f(&join(prefix, "bonus"), &self.bonus);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.shift.visit_mut(&join(prefix, "shift"), f);
        self.receptance.visit_mut(&join(prefix, "receptance"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        f(&join(prefix, "decay"), &mut self.decay);
        f(&join(prefix, "bonus"), &mut self.bonus);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
