//! Four-stage U-shaped denoiser built from residual blocks.

pub mod checkpoint;
pub mod config;
pub mod pad;
pub mod resample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Crb, CrbCache};
use crate::error::{Error, Result};
use crate::numerics::{join, Conv2d, FeatureMap, HasParams, Param, Scalar};

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use pad::{crop, pad_reflect};
pub use resample::{pixel_shuffle, pixel_unshuffle, Downsample, SkipFuse, Upsample};

/// Names of the intermediate feature maps exposed by [`CrwkvModel::forward_taps`].
pub const TAPS: [&str; 8] = ["embed", "enc1", "enc2", "enc3", "latent", "dec3", "dec2", "dec1"];

/// Spatial sizes must be multiples of this.
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub blocks: Vec<Crb<T>>,
}

impl<T: Scalar> Stage<T> {
    /// Forward without retaining block caches.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?.0;
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<CrbCache<T>>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[CrbCache<T>], dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            d = b.backward(c, &d)?;
        }
        Ok(d)
    }
}

impl<T: Scalar> HasParams<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrwkvModel<T> {
    config: ModelConfig,
    pub conv_in: Conv2d<T>,
    /// Stages 1-3.
    pub encoders: Vec<Stage<T>>,
    pub downs: Vec<Downsample<T>>,
    pub latent: Stage<T>,
    /// Decoder side, ordered from stage 3 up to stage 1.
    pub ups: Vec<Upsample<T>>,
    pub fuses: Vec<SkipFuse<T>>,
    pub decoders: Vec<Stage<T>>,
    pub conv_out: Conv2d<T>,
}

pub struct ModelCache<T> {
    x: FeatureMap<T>,
    embed: FeatureMap<T>,
    skips: Vec<FeatureMap<T>>,
    enc: Vec<Vec<CrbCache<T>>>,
    latent: Vec<CrbCache<T>>,
    up_in: Vec<FeatureMap<T>>,
    fuse_in: Vec<FeatureMap<T>>,
    dec: Vec<Vec<CrbCache<T>>>,
    last: FeatureMap<T>,
}

fn stage<T: Scalar>(cfg: &ModelConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<Stage<T>> {
    let c = cfg.stage_channels(k);
    let blocks = cfg
        .stage_kinds(k)
        .into_iter()
        .map(|kind| Crb::new(kind, c, cfg.expansion, cfg.shift, rng))
        .collect::<Result<_>>()?;
    Ok(Stage { blocks })
}

impl<T: Scalar> CrwkvModel<T> {
    /// Deterministic construction from a 64-bit seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = config.base_channels;
        let conv_in = Conv2d::same(config.in_channels, c0, 3, &mut rng);
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for k in 0..3 {
            encoders.push(stage(config, k, &mut rng)?);
            downs.push(Downsample::new(config.stage_channels(k), &mut rng));
        }
        let latent = stage(config, 3, &mut rng)?;
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoders = Vec::new();
        for k in (0..3).rev() {
            ups.push(Upsample::new(config.stage_channels(k + 1), &mut rng));
            fuses.push(SkipFuse::new(config.stage_channels(k), &mut rng));
            decoders.push(stage(config, k, &mut rng)?);
        }
        let conv_out = Conv2d::same(c0, config.in_channels, 3, &mut rng);
        Ok(Self {
            config: config.clone(),
            conv_in,
            encoders,
            downs,
            latent,
            ups,
            fuses,
            decoders,
            conv_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "model input {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}; pad it first"
            )));
        }
        Ok(())
    }

    fn finish(&self, x: &FeatureMap<T>, last: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut y = self.conv_out.forward(last)?;
        if self.config.global_residual {
            y.axpy(T::one(), x)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_taps(x, &mut |_, _| {})
    }

    /// Inference forward that hands every named intermediate map to `tap`.
    pub fn forward_taps(&self, x: &FeatureMap<T>, tap: &mut dyn FnMut(&str, &FeatureMap<T>)) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let mut h = self.conv_in.forward(x)?;
        tap(TAPS[0], &h);
        let mut skips = Vec::with_capacity(3);
        for k in 0..3 {
            let e = self.encoders[k].forward(&h)?;
            tap(TAPS[1 + k], &e);
            h = self.downs[k].forward(&e)?;
            skips.push(e);
        }
        h = self.latent.forward(&h)?;
        tap(TAPS[4], &h);
        for i in 0..3 {
            let up = self.ups[i].forward(&h)?;
            h = self.fuses[i].forward(&up, &skips[2 - i])?.0;
            h = self.decoders[i].forward(&h)?;
            tap(TAPS[5 + i], &h);
        }
        self.finish(x, &h)
    }

    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, ModelCache<T>)> {
        self.check_input(x)?;
        let embed = self.conv_in.forward(x)?;
        let mut h = embed.clone();
        let mut skips = Vec::with_capacity(3);
        let mut enc = Vec::with_capacity(3);
        for k in 0..3 {
            let (e, c) = self.encoders[k].forward_train(&h)?;
            h = self.downs[k].forward(&e)?;
            skips.push(e);
            enc.push(c);
        }
        let (lat, latent) = self.latent.forward_train(&h)?;
        h = lat;
        let mut up_in = Vec::with_capacity(3);
        let mut fuse_in = Vec::with_capacity(3);
        let mut dec = Vec::with_capacity(3);
        for i in 0..3 {
            let up = self.ups[i].forward(&h)?;
            up_in.push(h);
            let (fused, cat) = self.fuses[i].forward(&up, &skips[2 - i])?;
            fuse_in.push(cat);
            let (d, c) = self.decoders[i].forward_train(&fused)?;
            dec.push(c);
            h = d;
        }
        let y = self.finish(x, &h)?;
        Ok((
            y,
            ModelCache {
                x: x.clone(),
                embed,
                skips,
                enc,
                latent,
                up_in,
                fuse_in,
                dec,
                last: h,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ModelCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut d = self.conv_out.backward(&cache.last, dy);
        let mut dskips = [None, None, None];
        for i in (0..3).rev() {
            d = self.decoders[i].backward(&cache.dec[i], &d)?;
            let (dup, dskip) = self.fuses[i].backward(&cache.fuse_in[i], &d)?;
            dskips[2 - i] = Some(dskip);
            d = self.ups[i].backward(&cache.up_in[i], &dup)?;
        }
        d = self.latent.backward(&cache.latent, &d)?;
        for k in (0..3).rev() {
            d = self.downs[k].backward(&cache.skips[k], &d);
            d.axpy(T::one(), dskips[k].as_ref().expect("filled above"))?;
            d = self.encoders[k].backward(&cache.enc[k], &d)?;
        }
        debug_assert_eq!(d.shape(), cache.embed.shape());
        let mut dx = self.conv_in.backward(&cache.x, &d);
        if self.config.global_residual {
            dx.axpy(T::one(), dy)?;
        }
        Ok(dx)
    }

    pub fn count_parameters(&self) -> usize {
        self.num_params()
    }

    /// Every named parameter array with its element count.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.len())));
        out
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<CrwkvModel<U>> {
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.clone()));
        let mut out = CrwkvModel::<U>::build(&self.config, 0)?;
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| {
            let v = it.next().expect("same layout");
            p.value = v.iter().map(|x| U::of(x.f64())).collect();
        });
        Ok(out)
    }
}

impl<T: Scalar> HasParams<T> for CrwkvModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for k in 0..3 {
            self.encoders[k].visit(&join(prefix, &format!("enc{}", k + 1)), f);
            self.downs[k].visit(&join(prefix, &format!("down{}", k + 1)), f);
        }
        self.latent.visit(&join(prefix, "latent"), f);
        for i in 0..3 {
            let k = 3 - i;
            self.ups[i].visit(&join(prefix, &format!("up{k}")), f);
            self.fuses[i].visit(&join(prefix, &format!("fuse{k}")), f);
            self.decoders[i].visit(&join(prefix, &format!("dec{k}")), f);
        }
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for k in 0..3 {
            self.encoders[k].visit_mut(&join(prefix, &format!("enc{}", k + 1)), f);
            self.downs[k].visit_mut(&join(prefix, &format!("down{}", k + 1)), f);
        }
        self.latent.visit_mut(&join(prefix, "latent"), f);
        for i in 0..3 {
            let k = 3 - i;
            self.ups[i].visit_mut(&join(prefix, &format!("up{k}")), f);
            self.fuses[i].visit_mut(&join(prefix, &format!("fuse{k}")), f);
            self.decoders[i].visit_mut(&join(prefix, &format!("dec{k}")), f);
        }
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};

    fn toy() -> ModelConfig {
        ModelConfig::toy(8, [1, 1, 1, 1])
    }

    #[test]
    fn toy_forward_keeps_shape() {
        let m = CrwkvModel::<f32>::build(&toy(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(16, 16), (8, 24), (64, 64)] {
            let x = FeatureMap::randn([1, 3, h, w], &mut rng);
            let y = m.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn non_multiple_size_is_a_shape_error() {
        let m = CrwkvModel::<f32>::build(&toy(), 1).unwrap();
        assert!(matches!(m.forward(&FeatureMap::zeros([1, 3, 12, 16])), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_model_is_identity_with_residual() {
        let mut m = CrwkvModel::<f32>::build(&toy(), 2).unwrap();
        m.zero_values();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap::randn([2, 3, 16, 16], &mut rng);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn same_seed_same_output() {
        let a = CrwkvModel::<f32>::build(&toy(), 3).unwrap();
        let b = CrwkvModel::<f32>::build(&toy(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap::randn([1, 3, 16, 16], &mut rng);
        let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.forward_train(&x).unwrap().0, ya);
    }

    #[test]
    fn toy_count_matches_hand_tally() {
        let cfg = toy();
        let m = CrwkvModel::<f32>::build(&cfg, 4).unwrap();
        let lin = |i: usize, o: usize| i * o + o;
        let norm = |c: usize| 2 * c;
        let cmix = |c: usize| 2 + lin(c, c) * 2 + lin(c, 4 * c) + lin(4 * c, c) + norm(c);
        let crm = |c: usize| 1 + lin(c, c) * 3 + 2 * c + norm(c);
        let fmix = |c: usize| lin(2 * c, 2 * c) + norm(c);
        let crb = |c: usize, mixer: usize| mixer + cmix(c) + 2 * norm(c) + 2;
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let mut total = conv(3, 8, 3) + conv(8, 3, 3);
        for c in [8, 16, 32] {
            total += 2 * crb(c, crm(c));
            total += conv(c, 2 * c, 2);
            total += lin(2 * c, 4 * c) + lin(2 * c, c);
        }
        total += crb(64, fmix(64));
        assert_eq!(m.count_parameters(), total);
        let breakdown: usize = m.parameter_breakdown().iter().map(|(_, n)| n).sum();
        assert_eq!(breakdown, total);
        assert_eq!(CrwkvModel::<f32>::build(&cfg, 99).unwrap().count_parameters(), total);
    }

    #[test]
    fn mixed_stage_puts_frequency_blocks_first() {
        let mut cfg = toy();
        cfg.stage_depths[1] = 3;
        cfg.fmix_split[1] = [2, 1];
        let m = CrwkvModel::<f32>::build(&cfg, 5).unwrap();
        let kinds: Vec<_> = m.encoders[1].blocks.iter().map(|b| b.kind()).collect();
        use crate::blocks::MixerKind::*;
        assert_eq!(kinds, vec![Fmix, Fmix, Crm]);
    }

    #[test]
    fn end_to_end_gradients_on_toy() {
        let cfg = ModelConfig::toy(4, [1, 1, 1, 1]);
        let mut m = CrwkvModel::<f64>::build(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = FeatureMap::randn([1, 3, 16, 16], &mut rng);
        let probe = FeatureMap::randn(x.shape(), &mut rng);
        let (_, cache) = m.forward_train(&x).unwrap();
        let dx = m.backward(&cache, &probe).unwrap();
        let rep = check_params(&mut m, &mut |mm: &CrwkvModel<f64>| probe_loss(&mm.forward(&x).unwrap(), &probe), 2, &mut rng);
        assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
        let m2 = m.clone();
        let rep = check_input(&x, &dx, &mut |xx| probe_loss(&m2.forward(xx).unwrap(), &probe), 40, &mut rng);
        assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
    }
}
