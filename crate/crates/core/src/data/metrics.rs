use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for data in [0, 1], capped at 100 dB.
pub fn psnr<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn gaussian_taps(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Window side actually used: 11, shrunk to the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w).max(1);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM over valid Gaussian windows, averaged over every plane.
pub fn ssim<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [n, c, h, w] = a.shape();
    let taps = gaussian_taps(ssim_window(h, w));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ib in 0..n {
        for ic in 0..c {
            let x: Vec<f64> = a.plane(ib, ic).iter().map(|v| v.f64()).collect();
            let y: Vec<f64> = b.plane(ib, ic).iter().map(|v| v.f64()).collect();
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mx = filter_valid(&x, h, w, &taps);
            let my = filter_valid(&y, h, w, &taps);
            let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
            let syy = filter_valid(&prod(&y, &y), h, w, &taps);
            let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / mx.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}
