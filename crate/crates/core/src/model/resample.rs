//! Resolution changes and skip fusion between U-net stages.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{join, Conv2d, ConvGeometry, FeatureMap, HasParams, Linear, Param, Scalar};

/// Channel-to-space rearrangement: `(B, 4C, H, W) -> (B, C, 2H, 2W)`.
pub fn pixel_shuffle<T: Scalar>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let [b, c4, h, w] = x.shape();
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("pixel shuffle needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    Ok(FeatureMap::from_fn([b, c, 2 * h, 2 * w], |[ib, ic, y, xx]| {
        x.at(ib, ic * 4 + (y % 2) * 2 + xx % 2, y / 2, xx / 2)
    }))
}

/// Inverse (and adjoint) of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let [b, c, h2, w2] = x.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(format!("pixel unshuffle needs even size, got {h2}x{w2}")));
    }
    Ok(FeatureMap::from_fn([b, 4 * c, h2 / 2, w2 / 2], |[ib, ic, y, xx]| {
        let (base, i, j) = (ic / 4, (ic % 4) / 2, ic % 2);
        x.at(ib, base, 2 * y + i, 2 * xx + j)
    }))
}

/// 2x2 stride-2 convolution doubling the channel count.
#[derive(Clone, Debug)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let geometry = ConvGeometry {
            c_in: channels,
            c_out: 2 * channels,
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        Self {
            conv: Conv2d::new(geometry, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if !x.height().is_multiple_of(2) || !x.width().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "downsample needs even spatial size, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        self.conv.forward(x)
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        self.conv.backward(x, dy)
    }
}

/// 1x1 projection to twice the channels, then pixel shuffle: `C -> C/2`
/// channels at double resolution.
#[derive(Clone, Debug)]
pub struct Upsample<T> {
    pub proj: Linear<T>,
}

impl<T: Scalar> Upsample<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(channels, 2 * channels, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        pixel_shuffle(&self.proj.forward(x)?)
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.proj.backward(x, &pixel_unshuffle(dy)?))
    }
}

/// Concatenation of decoder and encoder features followed by a 1x1
/// projection back to the decoder width.
#[derive(Clone, Debug)]
pub struct SkipFuse<T> {
    pub proj: Linear<T>,
}

impl<T: Scalar> SkipFuse<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(2 * channels, channels, rng),
        }
    }

    /// Returns the fused map and the concatenated input the backward pass needs.
    pub fn forward(&self, dec: &FeatureMap<T>, enc: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        if dec.shape() != enc.shape() {
            return Err(Error::shape(format!(
                "skip fusion of decoder {:?} with encoder {:?}",
                dec.shape(),
                enc.shape()
            )));
        }
        let cat = FeatureMap::concat_channels(dec, enc)?;
        Ok((self.proj.forward(&cat)?, cat))
    }

    /// Gradients for the decoder and encoder inputs.
    pub fn backward(&mut self, cat: &FeatureMap<T>, dy: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        self.proj.backward(cat, dy).split_channels(cat.channels() / 2)
    }
}

macro_rules! forward_params {
    ($ty:ident, $field:ident) => {
        impl<T: Scalar> HasParams<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
                self.$field.visit(&join(prefix, stringify!($field)), f);
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
                self.$field.visit_mut(&join(prefix, stringify!($field)), f);
            }
        }
    };
}

forward_params!(Downsample, conv);
forward_params!(Upsample, proj);
forward_params!(SkipFuse, proj);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn down_then_up_round_trips_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let down = Downsample::<f32>::new(4, &mut rng);
        let up = Upsample::<f32>::new(8, &mut rng);
        let x = FeatureMap::randn([1, 4, 8, 8], &mut rng);
        let d = down.forward(&x).unwrap();
        assert_eq!(d.shape(), [1, 8, 4, 4]);
        assert_eq!(up.forward(&d).unwrap().shape(), [1, 4, 8, 8]);
    }

    #[test]
    fn odd_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let down = Downsample::<f32>::new(2, &mut rng);
        assert!(matches!(down.forward(&FeatureMap::zeros([1, 2, 5, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn averaging_kernel_keeps_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut down = Downsample::<f64>::new(3, &mut rng);
        down.conv.kernel.fill(1.0 / 12.0);
        down.conv.bias.fill(0.0);
        let y = down.forward(&FeatureMap::full([2, 3, 6, 4], 0.37)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn shuffle_places_channels_in_blocks() {
        let x = FeatureMap::<f64>::from_fn([1, 4, 1, 1], |[_, c, _, _]| c as f64);
        let y = pixel_shuffle(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(pixel_unshuffle(&y).unwrap(), x);
    }

    #[test]
    fn fuse_with_identity_half_passes_decoder_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let c = 5;
        let mut fuse = SkipFuse::<f64>::new(c, &mut rng);
        fuse.proj.weight.fill(0.0);
        fuse.proj.bias.fill(0.0);
        for i in 0..c {
            fuse.proj.weight.value[i * c + i] = 1.0;
        }
        let x = FeatureMap::randn([2, c, 3, 3], &mut rng);
        let (y, _) = fuse.forward(&x, &FeatureMap::zeros(x.shape())).unwrap();
        assert_eq!(y.channels(), c);
        assert!(y.max_abs_diff(&x) == 0.0);
        assert!(fuse.forward(&x, &FeatureMap::zeros([2, c, 3, 4])).is_err());
    }

    #[test]
    fn down_up_pair_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let mut down = Downsample::<f64>::new(2, &mut rng);
        let mut up = Upsample::<f64>::new(4, &mut rng);
        let x = FeatureMap::randn([2, 2, 4, 6], &mut rng);
        let probe = FeatureMap::randn(x.shape(), &mut rng);
        let d = down.forward(&x).unwrap();
        let dd = up.backward(&d, &probe).unwrap();
        let dx = down.backward(&x, &dd);
        let (down2, up2) = (down.clone(), up.clone());
        let rep = check_input(&x, &dx, &mut |xx| probe_loss(&up2.forward(&down2.forward(xx).unwrap()).unwrap(), &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        let rep = check_params(&mut down, &mut |m: &Downsample<f64>| probe_loss(&up2.forward(&m.forward(&x).unwrap()).unwrap(), &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        let rep = check_params(&mut up, &mut |m: &Upsample<f64>| probe_loss(&m.forward(&d).unwrap(), &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn fuse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let mut fuse = SkipFuse::<f64>::new(3, &mut rng);
        let a = FeatureMap::randn([1, 3, 3, 3], &mut rng);
        let b = FeatureMap::randn([1, 3, 3, 3], &mut rng);
        let probe = FeatureMap::randn(a.shape(), &mut rng);
        let (_, cat) = fuse.forward(&a, &b).unwrap();
        let (da, db) = fuse.backward(&cat, &probe).unwrap();
        let f2 = fuse.clone();
        let rep = check_input(&a, &da, &mut |x| probe_loss(&f2.forward(x, &b).unwrap().0, &probe), usize::MAX, &mut rng)
            .merge(check_input(&b, &db, &mut |x| probe_loss(&f2.forward(&a, x).unwrap().0, &probe), usize::MAX, &mut rng));
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        let rep = check_params(&mut fuse, &mut |m: &SkipFuse<f64>| probe_loss(&m.forward(&a, &b).unwrap().0, &probe), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
