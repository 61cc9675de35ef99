//! 2-D discrete Fourier transform over the spatial axes of every plane.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/(H*W)` factor, so `ifft2d(fft2d(x)) == x`.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::tensor::FeatureMap;
use super::Scalar;
use crate::error::Result;

/// Complex-valued (B, C, H, W) array stored as separate real and imaginary
/// planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMap<T> {
    pub re: FeatureMap<T>,
    pub im: FeatureMap<T>,
}

impl<T: Scalar> ComplexMap<T> {
    pub fn new(re: FeatureMap<T>, im: FeatureMap<T>) -> Result<Self> {
        im.expect_shape(re.shape(), "complex map imaginary part")?;
        Ok(Self { re, im })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            re: FeatureMap::zeros(shape),
            im: FeatureMap::zeros(shape),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.re.shape()
    }

    /// Sum of `|z|^2`.
    pub fn energy(&self) -> f64 {
        self.re.dot(&self.re) + self.im.dot(&self.im)
    }

    /// Stacks real then imaginary parts into `2C` channels per batch item.
    pub fn stack(&self) -> FeatureMap<T> {
        FeatureMap::concat_channels(&self.re, &self.im).expect("same shape")
    }

    /// Inverse of [`ComplexMap::stack`].
    pub fn unstack(x: &FeatureMap<T>) -> Result<Self> {
        let (re, im) = x.split_channels(x.channels() / 2)?;
        Self::new(re, im)
    }
}

struct Plan2d<T: Scalar> {
    rows: Arc<dyn Fft<T>>,
    cols: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Plan2d<T> {
    fn new(h: usize, w: usize, direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows: planner.plan_fft(w, direction),
            cols: planner.plan_fft(h, direction),
        }
    }

    /// In-place transform of one `h x w` row-major plane.
    fn run(&self, buf: &mut [Complex<T>], h: usize, w: usize) {
        self.rows.process(buf);
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            self.cols.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    }
}

fn transform<T: Scalar>(re: &FeatureMap<T>, im: Option<&FeatureMap<T>>, direction: FftDirection, scale: T) -> ComplexMap<T> {
    let [_, c, h, w] = re.shape();
    let plan = Plan2d::<T>::new(h, w, direction);
    let hw = h * w;
    let mut out = ComplexMap::zeros(re.shape());
    let ComplexMap { re: ore, im: oim } = &mut out;
    ore.data_mut()
        .par_chunks_mut(hw.max(1))
        .zip(oim.data_mut().par_chunks_mut(hw.max(1)))
        .enumerate()
        .for_each(|(idx, (pr, pi))| {
            let (ib, ic) = (idx / c, idx % c);
            let src_re = re.plane(ib, ic);
            let mut buf: Vec<Complex<T>> = match im {
                Some(im) => src_re
                    .iter()
                    .zip(im.plane(ib, ic))
                    .map(|(&a, &b)| Complex::new(a, b))
                    .collect(),
                None => src_re.iter().map(|&a| Complex::new(a, T::zero())).collect(),
            };
            plan.run(&mut buf, h, w);
            for (k, z) in buf.iter().enumerate() {
                pr[k] = z.re * scale;
                pi[k] = z.im * scale;
            }
        });
    out
}

/// Unnormalized forward DFT of a real map.
pub fn fft2d<T: Scalar>(x: &FeatureMap<T>) -> ComplexMap<T> {
    transform(x, None, FftDirection::Forward, T::one())
}

/// Unnormalized forward DFT of a complex map.
pub fn fft2d_complex<T: Scalar>(z: &ComplexMap<T>) -> ComplexMap<T> {
    transform(&z.re, Some(&z.im), FftDirection::Forward, T::one())
}

/// Full complex inverse with the `1/(H*W)` factor.
pub fn ifft2d_complex<T: Scalar>(z: &ComplexMap<T>) -> ComplexMap<T> {
    let n = z.re.plane_len().max(1);
    transform(&z.re, Some(&z.im), FftDirection::Inverse, T::one() / T::of(n as f64))
}

/// Inverse DFT returning the real part and the largest discarded `|imag|`.
pub fn ifft2d<T: Scalar>(z: &ComplexMap<T>) -> (FeatureMap<T>, T) {
    let full = ifft2d_complex(z);
    let residual = full
        .im
        .data()
        .iter()
        .fold(T::zero(), |m, v| m.max(v.abs()));
    (full.re, residual)
}

/// Gradient of a scalar loss w.r.t. the real input of [`fft2d`], given the
/// loss gradients w.r.t. the real and imaginary outputs.
pub fn fft2d_backward<T: Scalar>(dz: &ComplexMap<T>) -> FeatureMap<T> {
    // d/dx = Re(F^H g), i.e. the unnormalized inverse transform
    transform(&dz.re, Some(&dz.im), FftDirection::Inverse, T::one()).re
}

/// Gradient w.r.t. the real and imaginary inputs of [`ifft2d`] (real part),
/// given the loss gradient w.r.t. its real output.
pub fn ifft2d_backward<T: Scalar>(ds: &FeatureMap<T>) -> ComplexMap<T> {
    // s = Re(G z), G = F^{-1}; the gradient pair is conj(G^T ds) = fft(ds) / HW
    let n = ds.plane_len().max(1);
    transform(ds, None, FftDirection::Forward, T::one() / T::of(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &FeatureMap<f64>) -> ComplexMap<f64> {
        let [b, c, h, w] = x.shape();
        let mut out = ComplexMap::zeros([b, c, h, w]);
        for ib in 0..b {
            for ic in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        let (mut re, mut im) = (0.0, 0.0);
                        for m in 0..h {
                            for n in 0..w {
                                let ang = -2.0 * PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                                re += x.at(ib, ic, m, n) * ang.cos();
                                im += x.at(ib, ic, m, n) * ang.sin();
                            }
                        }
                        out.re.set(ib, ic, u, v, re);
                        out.im.set(ib, ic, u, v, im);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_map_is_dc_only() {
        let x = FeatureMap::<f64>::full([1, 1, 3, 5], 0.7);
        let z = fft2d(&x);
        assert!((z.re.at(0, 0, 0, 0) - 0.7 * 15.0).abs() < 1e-12);
        let rest = z.re.data()[1..].iter().chain(z.im.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rest < 1e-12);
    }

    #[test]
    fn impulse_matches_naive_dft() {
        let mut x = FeatureMap::<f64>::zeros([1, 1, 4, 4]);
        x.set(0, 0, 1, 2, 1.0);
        let z = fft2d(&x);
        let r = naive_dft(&x);
        assert!(z.re.max_abs_diff(&r.re) <= 1e-6 && z.im.max_abs_diff(&r.im) <= 1e-6);
    }

    #[test]
    fn random_non_square_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = FeatureMap::<f64>::randn([2, 2, 3, 6], &mut rng);
        let z = fft2d(&x);
        let r = naive_dft(&x);
        assert!(z.re.max_abs_diff(&r.re) <= 1e-9 && z.im.max_abs_diff(&r.im) <= 1e-9);
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = FeatureMap::<f64>::randn([2, 3, 8, 5], &mut rng);
        let z = fft2d(&x);
        let (back, resid) = ifft2d(&z);
        let rel = back.max_abs_diff(&x) / x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel <= 1e-6 && resid <= 1e-9);
        let lhs = z.energy();
        let rhs = 40.0 * x.dot(&x);
        assert!((lhs - rhs).abs() / rhs <= 1e-5);
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = FeatureMap::<f64>::randn([1, 2, 4, 3], &mut rng);
        let g = ComplexMap::new(
            FeatureMap::randn(x.shape(), &mut rng),
            FeatureMap::randn(x.shape(), &mut rng),
        )
        .unwrap();
        let dx = fft2d_backward(&g);
        let shape = x.shape();
        let rep = check_vec("x", x.data(), dx.data(), &mut |v| {
            let z = fft2d(&FeatureMap::from_vec(shape, v.to_vec()).unwrap());
            z.re.dot(&g.re) + z.im.dot(&g.im)
        }, usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = ComplexMap::new(
            FeatureMap::<f64>::randn([1, 2, 3, 4], &mut rng),
            FeatureMap::randn([1, 2, 3, 4], &mut rng),
        )
        .unwrap();
        let g = FeatureMap::<f64>::randn(z.shape(), &mut rng);
        let dz = ifft2d_backward(&g);
        let stacked = z.stack();
        let shape = stacked.shape();
        let rep = check_vec("z", stacked.data(), dz.stack().data(), &mut |v| {
            let zz = ComplexMap::unstack(&FeatureMap::from_vec(shape, v.to_vec()).unwrap()).unwrap();
            ifft2d(&zz).0.dot(&g)
        }, usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
