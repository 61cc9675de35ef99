//! 2-D cross-correlation with zero padding, lowered to im2col + GEMM.

use rand::Rng;
use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::{join, FeatureMap, HasParams, Param};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::param("conv2d stride must be positive"));
        }
        if self.kernel == 0 || self.kernel > h + 2 * self.padding || self.kernel > w + 2 * self.padding {
            return Err(Error::param(format!(
                "conv2d kernel {} does not fit {h}x{w} input with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfolds one batch item (`c_in x h x w`) into `(c_in*k*k) x (oh*ow)`.
fn im2col<T: Scalar>(item: &[T], g: &ConvGeometry, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let k = g.kernel;
    let mut cols = vec![T::zero(); g.patch_len() * oh * ow];
    for c in 0..g.c_in {
        let plane = &item[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, h: usize, w: usize, oh: usize, ow: usize, item: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &mut item[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            let o = iy as usize * w + ix as usize;
                            plane[o] = plane[o] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation; `kernel` is `c_out x c_in x k x k` row-major.
pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, kernel: &[T], bias: &[T], g: &ConvGeometry) -> Result<FeatureMap<T>> {
    let [b, c, h, w] = x.shape();
    if c != g.c_in || kernel.len() != g.c_out * g.patch_len() || bias.len() != g.c_out {
        return Err(Error::shape(format!(
            "conv2d: input {:?} vs kernel [{}, {}, {k}, {k}]",
            x.shape(),
            g.c_out,
            g.c_in,
            k = g.kernel
        )));
    }
    let (oh, ow) = g.output_size(h, w)?;
    let n = oh * ow;
    let mut y = FeatureMap::zeros([b, g.c_out, oh, ow]);
    y.data_mut()
        .par_chunks_mut((g.c_out * n).max(1))
        .enumerate()
        .for_each(|(ib, out)| {
            for (o, row) in out.chunks_mut(n.max(1)).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[o]);
            }
            let cols = im2col(x.item(ib), g, h, w, oh, ow);
            gemm(
                T::one(),
                MatRef::row_major(kernel, g.c_out, g.patch_len()),
                MatRef::row_major(&cols, g.patch_len(), n),
                T::one(),
                MatMut::row_major(out, g.c_out, n),
            );
        });
    Ok(y)
}

/// Returns `dx`; accumulates into `dkernel` / `dbias`.
pub fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    kernel: &[T],
    dy: &FeatureMap<T>,
    dkernel: &mut [T],
    dbias: &mut [T],
    g: &ConvGeometry,
) -> FeatureMap<T> {
    let [b, _, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let n = oh * ow;
    let mut dx = FeatureMap::zeros(x.shape());
    let item_len = g.c_in * h * w;
    let per_item: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|ib| im2col(x.item(ib), g, h, w, oh, ow))
        .collect();
    dx.data_mut()
        .par_chunks_mut(item_len.max(1))
        .enumerate()
        .for_each(|(ib, out)| {
            let mut dcols = vec![T::zero(); g.patch_len() * n];
            gemm(
                T::one(),
                MatRef::row_major_t(kernel, g.c_out, g.patch_len()),
                MatRef::row_major(dy.item(ib), g.c_out, n),
                T::zero(),
                MatMut::row_major(&mut dcols, g.patch_len(), n),
            );
            col2im(&dcols, g, h, w, oh, ow, out);
        });
    for (ib, cols) in per_item.iter().enumerate() {
        gemm(
            T::one(),
            MatRef::row_major(dy.item(ib), g.c_out, n),
            MatRef::row_major_t(cols, g.patch_len(), n),
            T::one(),
            MatMut::row_major(dkernel, g.c_out, g.patch_len()),
        );
        for (o, row) in dy.item(ib).chunks(n.max(1)).enumerate() {
            dbias[o] = dbias[o] + row.iter().copied().sum::<T>();
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    geometry: ConvGeometry,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = geometry.patch_len();
        let k = geometry.kernel;
        let mut bias = Param::fan_in_uniform(vec![geometry.c_out], fan_in, rng);
        bias.decay = false;
        Self {
            kernel: Param::fan_in_uniform(vec![geometry.c_out, geometry.c_in, k, k], fan_in, rng),
            bias,
            geometry,
        }
    }

    /// Same-size convolution: stride 1, padding `k / 2`.
    pub fn same(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(
            ConvGeometry {
                c_in,
                c_out,
                kernel: k,
                stride: 1,
                padding: k / 2,
            },
            rng,
        )
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv2d(x, &self.kernel.value, &self.bias.value, &self.geometry)
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        conv2d_backward(
            x,
            &self.kernel.value,
            dy,
            &mut self.kernel.grad,
            &mut self.bias.grad,
            &self.geometry,
        )
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_input, check_params, probe_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &FeatureMap<f64>, k: &[f64], bias: &[f64], g: &ConvGeometry) -> FeatureMap<f64> {
        let [b, _, h, w] = x.shape();
        let (oh, ow) = g.output_size(h, w).unwrap();
        let ks = g.kernel;
        FeatureMap::from_fn([b, g.c_out, oh, ow], |[ib, o, oy, ox]| {
            let mut s = bias[o];
            for c in 0..g.c_in {
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += x.at(ib, c, iy as usize, ix as usize) * k[((o * g.c_in + c) * ks + ky) * ks + kx];
                        }
                    }
                }
            }
            s
        })
    }

    fn geom(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry { c_in, c_out, kernel, stride, padding }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = FeatureMap::<f64>::randn([1, 1, 5, 4], &mut rng);
        let y = conv2d(&x, &[1.0], &[0.0], &geom(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn averaging_kernel_preserves_constant_interior() {
        let c = 0.37;
        let x = FeatureMap::<f64>::full([1, 1, 6, 6], c);
        let y = conv2d(&x, &[1.0 / 9.0; 9], &[0.0], &geom(1, 1, 3, 1, 1)).unwrap();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.at(0, 0, yy, xx) - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_sliding_window_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [geom(2, 3, 3, 1, 1), geom(3, 2, 3, 2, 0), geom(4, 8, 2, 2, 0), geom(3, 5, 1, 1, 0), geom(1, 2, 3, 2, 1)] {
            let x = FeatureMap::<f64>::randn([2, g.c_in, 7, 6], &mut rng);
            let conv = Conv2d::<f64>::new(g, &mut rng);
            let y = conv.forward(&x).unwrap();
            let r = naive(&x, &conv.kernel.value, &conv.bias.value, &g);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r) <= 1e-6);
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(geom(1, 1, 3, 2, 1).output_size(7, 8).unwrap(), (4, 4));
        assert_eq!(geom(1, 1, 2, 2, 0).output_size(8, 8).unwrap(), (4, 4));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(geom(1, 1, 3, 0, 1).output_size(4, 4).is_err());
        assert!(geom(1, 1, 7, 1, 0).output_size(4, 4).is_err());
        let x = FeatureMap::<f32>::zeros([1, 1, 2, 2]);
        assert!(conv2d(&x, &[0.0; 25], &[0.0], &geom(1, 1, 5, 1, 0)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [geom(2, 3, 3, 1, 1), geom(2, 4, 2, 2, 0), geom(3, 2, 3, 2, 1)] {
            let x = FeatureMap::<f64>::randn([2, g.c_in, 5, 6], &mut rng);
            let mut conv = Conv2d::<f64>::new(g, &mut rng);
            let (oh, ow) = g.output_size(5, 6).unwrap();
            let probe = FeatureMap::<f64>::randn([2, g.c_out, oh, ow], &mut rng);
            conv.zero_grad();
            let dx = conv.backward(&x, &probe);
            let rep = check_params(&mut conv, &mut |m: &Conv2d<f64>| probe_loss(&m.forward(&x).unwrap(), &probe), usize::MAX, &mut rng);
            assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
            let c2 = conv.clone();
            let rep = check_input(&x, &dx, &mut |xx| probe_loss(&c2.forward(xx).unwrap(), &probe), usize::MAX, &mut rng);
            assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        }
    }
}
