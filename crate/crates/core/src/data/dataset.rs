//! Training and evaluation image collections.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{load_png, Image};
use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

/// Clean images, optionally paired with pre-made noisy versions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub clean: Vec<Image>,
    pub noisy: Option<Vec<Image>>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

impl Dataset {
    /// Reads `dir/clean/*.png` and, when present, the same file names from
    /// `dir/noisy/`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let clean_dir = dir.join("clean");
        let names = png_names(&clean_dir)?;
        if names.is_empty() {
            return Err(Error::Config(format!("no PNG files in {}", clean_dir.display())));
        }
        let clean = names
            .iter()
            .map(|n| load_png(&clean_dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let noisy_dir = dir.join("noisy");
        let noisy = if noisy_dir.is_dir() {
            let mut out = Vec::with_capacity(names.len());
            for (n, c) in names.iter().zip(&clean) {
                let img = load_png(&noisy_dir.join(n))?;
                if img.shape() != c.shape() {
                    return Err(Error::shape(format!("{n}: noisy {:?} vs clean {:?}", img.shape(), c.shape())));
                }
                out.push(img);
            }
            Some(out)
        } else {
            None
        };
        Ok(Self { names, clean, noisy })
    }

    /// `count` procedural textures of `size x size`.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Self {
        let clean: Vec<Image> = (0..count)
            .map(|i| generate_texture(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect();
        Self {
            names: (0..count).map(|i| format!("texture_{i:03}.png")).collect(),
            clean,
            noisy: None,
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Smooth colour field: a few oriented sinusoids per channel, a soft disc
/// and a gradient, squashed into [0, 1].
pub fn generate_texture(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            let freq = rng.gen_range(0.5..4.0) / h.max(w) as f64 * std::f64::consts::TAU;
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            [freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.1..0.3), 0.0]
        })
        .collect();
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let radius = rng.gen_range(0.15..0.4) * h.min(w) as f64;
    let tint: [f64; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    FeatureMap::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for wv in &waves[3 * c..3 * c + 3] {
            v += wv[3] * (wv[0] * yf + wv[1] * xf + wv[2]).sin();
        }
        let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
        v += tint[c] / (1.0 + ((d - radius) / 2.0).exp());
        (v.clamp(0.0, 1.0)) as f32
    })
}
