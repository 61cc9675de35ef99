//! Radially averaged power spectrum of feature maps.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{fft2d, FeatureMap, Scalar};

/// Value reported for bins with no energy.
pub const LOG_FLOOR: f64 = -30.0;

pub const CSV_HEADER: &str = "bin,log_amplitude,layer";

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    pub layer: String,
    /// `log10` of the RMS amplitude per radial bin.
    pub log_amplitude: Vec<f64>,
}

/// Bin `r` collects centred frequencies with `r <= |f| < r + 1`; frequencies
/// beyond the last bin are ignored.
pub fn power_spectrum<T: Scalar>(feat: &FeatureMap<T>, layer: &str) -> SpectrumProfile {
    let [b, c, h, w] = feat.shape();
    let bins = h.min(w) / 2;
    let spec = fft2d(feat);
    let mut power = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let centred = |i: usize, n: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    for u in 0..h {
        for v in 0..w {
            let r = centred(u, h).hypot(centred(v, w)).floor() as usize;
            if r >= bins {
                continue;
            }
            for ib in 0..b {
                for ic in 0..c {
                    let (re, im) = (spec.re.at(ib, ic, u, v).f64(), spec.im.at(ib, ic, u, v).f64());
                    power[r] += re * re + im * im;
                }
            }
            counts[r] += b * c;
        }
    }
    let log_amplitude = power
        .iter()
        .zip(&counts)
        .map(|(&p, &n)| {
            let mean = if n == 0 { 0.0 } else { p / n as f64 };
            if mean > 0.0 {
                (0.5 * mean.log10()).max(LOG_FLOOR)
            } else {
                LOG_FLOOR
            }
        })
        .collect();
    SpectrumProfile {
        layer: layer.to_string(),
        log_amplitude,
    }
}

pub fn spectrum_csv(profiles: &[SpectrumProfile]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in profiles {
        for (i, v) in p.log_amplitude.iter().enumerate() {
            writeln!(s, "{i},{v},{}", p.layer).expect("string write");
        }
    }
    s
}

pub fn write_spectrum_csv(path: &Path, profiles: &[SpectrumProfile]) -> Result<()> {
    std::fs::write(path, spectrum_csv(profiles)).map_err(|e| Error::io(path, e))
}
