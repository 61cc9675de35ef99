//! Images, synthetic noise, patches, quality metrics and spectra.

pub mod dataset;
pub mod image;
pub mod metrics;
pub mod noise;
pub mod patches;
pub mod spectrum;

pub use dataset::{generate_texture, Dataset};
pub use image::{load_png, save_png, Image};
pub use metrics::{psnr, ssim};
pub use noise::{add_noise, NoiseKind, NoiseSpec};
pub use patches::{augment, extract_patches, random_crop, Dihedral};
pub use spectrum::{power_spectrum, write_spectrum_csv, SpectrumProfile};
