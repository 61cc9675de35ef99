//! Residual block: token mixer (frequency or receptance), then channel mix,
//! each normalized and added to a scaled skip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cmix::{Cmix, CmixCache};
use super::crm::{Crm, CrmCache};
use super::fmix::{Fmix, FmixCache};
use crate::error::Result;
use crate::numerics::{join, FeatureMap, HasParams, LayerNorm, NormCache, Param, Scalar, LEAKY_SLOPE};
use crate::shift::ShiftVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Fmix,
    Crm,
}

#[derive(Clone, Debug)]
pub enum Mixer<T> {
    Fmix(Fmix<T>),
    Crm(Crm<T>),
}

pub enum MixerCache<T> {
    Fmix(FmixCache<T>),
    Crm(CrmCache<T>),
}

impl<T: Scalar> Mixer<T> {
    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Fmix(_) => MixerKind::Fmix,
            Mixer::Crm(_) => MixerKind::Crm,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, MixerCache<T>)> {
        Ok(match self {
            Mixer::Fmix(m) => {
                let (y, c) = m.forward(x)?;
                (y, MixerCache::Fmix(c))
            }
            Mixer::Crm(m) => {
                let (y, c) = m.forward(x)?;
                (y, MixerCache::Crm(c))
            }
        })
    }

    pub fn backward(&mut self, cache: &MixerCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match (self, cache) {
            (Mixer::Fmix(m), MixerCache::Fmix(c)) => m.backward(c, dy),
            (Mixer::Crm(m), MixerCache::Crm(c)) => m.backward(c, dy),
            _ => panic!("mixer cache from a different block"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Crb<T> {
    pub mixer: Mixer<T>,
    pub cmix: Cmix<T>,
    pub norm_mix: LayerNorm<T>,
    pub norm_channel: LayerNorm<T>,
    pub skip_mix: Param<T>,
    pub skip_channel: Param<T>,
}

pub struct CrbCache<T> {
    x: FeatureMap<T>,
    mixer: MixerCache<T>,
    norm_mix: NormCache<T>,
    z1: FeatureMap<T>,
    cmix: CmixCache<T>,
    norm_channel: NormCache<T>,
}

impl<T: Scalar> Crb<T> {
    pub fn new(kind: MixerKind, channels: usize, expansion: usize, shift: ShiftVariant, rng: &mut impl Rng) -> Result<Self> {
        let mixer = match kind {
            MixerKind::Fmix => Mixer::Fmix(Fmix::new(channels, LEAKY_SLOPE, rng)),
            MixerKind::Crm => Mixer::Crm(Crm::new(channels, shift, rng)?),
        };
        Ok(Self {
            mixer,
            cmix: Cmix::new(channels, expansion, shift, rng)?,
            norm_mix: LayerNorm::new(channels),
            norm_channel: LayerNorm::new(channels),
            skip_mix: Param::filled(vec![1], T::one(), false),
            skip_channel: Param::filled(vec![1], T::one(), false),
        })
    }

    pub fn kind(&self) -> MixerKind {
        self.mixer.kind()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, CrbCache<T>)> {
        let (m, mixer) = self.mixer.forward(x)?;
        let (mut z1, norm_mix) = self.norm_mix.forward(&m);
        z1.axpy(self.skip_mix.value[0], x)?;
        let (c, cmix) = self.cmix.forward(&z1)?;
        let (mut out, norm_channel) = self.norm_channel.forward(&c);
        out.axpy(self.skip_channel.value[0], &z1)?;
        Ok((
            out,
            CrbCache {
                x: x.clone(),
                mixer,
                norm_mix,
                z1,
                cmix,
                norm_channel,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CrbCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.skip_channel.grad[0] = self.skip_channel.grad[0] + T::of(dy.dot(&cache.z1));
        let dc = self.norm_channel.backward(&cache.norm_channel, dy);
        let mut dz1 = self.cmix.backward(&cache.cmix, &dc)?;
        dz1.axpy(self.skip_channel.value[0], dy)?;

        self.skip_mix.grad[0] = self.skip_mix.grad[0] + T::of(dz1.dot(&cache.x));
        let dm = self.norm_mix.backward(&cache.norm_mix, &dz1);
        let mut dx = self.mixer.backward(&cache.mixer, &dm)?;
        dx.axpy(self.skip_mix.value[0], &dz1)?;
        Ok(dx)
    }
}

impl<T: Scalar> HasParams<T> for Crb<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match &self.mixer {
            Mixer::Fmix(m) => m.visit(&join(prefix, "fmix"), f),
            Mixer::Crm(m) => m.visit(&join(prefix, "crm"), f),
        }
        self.cmix.visit(&join(prefix, "cmix"), f);
        self.norm_mix.visit(&join(prefix, "norm_mix"), f);
        self.norm_channel.visit(&join(prefix, "norm_channel"), f);
        f(&join(prefix, "skip_mix"), &self.skip_mix);
        f(&join(prefix, "skip_channel"), &self.skip_channel);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.mixer {
            Mixer::Fmix(m) => m.visit_mut(&join(prefix, "fmix"), f),
            Mixer::Crm(m) => m.visit_mut(&join(prefix, "crm"), f),
        }
        self.cmix.visit_mut(&join(prefix, "cmix"), f);
        self.norm_mix.visit_mut(&join(prefix, "norm_mix"), f);
        self.norm_channel.visit_mut(&join(prefix, "norm_channel"), f);
        f(&join(prefix, "skip_mix"), &mut self.skip_mix);
        f(&join(prefix, "skip_channel"), &mut self.skip_channel);
    }
}
