use serde::{Deserialize, Serialize};

use crate::data::metrics::{mse, PSNR_CAP};
use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar};

pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    L1,
    Charbonnier { eps: f64 },
    Mse,
    Psnr,
}

impl LossKind {
    pub fn charbonnier() -> Self {
        LossKind::Charbonnier { eps: CHARBONNIER_EPS }
    }

    pub fn parse(name: &str, eps: f64) -> Result<Self> {
        match name {
            "l1" => Ok(LossKind::L1),
            "charbonnier" => {
                if eps > 0.0 {
                    Ok(LossKind::Charbonnier { eps })
                } else {
                    Err(Error::Config(format!("charbonnier eps must be positive, got {eps}")))
                }
            }
            "mse" => Ok(LossKind::Mse),
            "psnr" => Ok(LossKind::Psnr),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected l1, charbonnier, mse or psnr)"
            ))),
        }
    }
}

/// Mean loss over all elements and its gradient w.r.t. `y`.
pub fn loss<T: Scalar>(kind: LossKind, y: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(f64, FeatureMap<T>)> {
    y.expect_shape(target.shape(), "loss target")?;
    let n = y.len().max(1) as f64;
    let inv_n = T::of(1.0 / n);
    let diff = y.zip_map(target, |a, b| a - b)?;
    Ok(match kind {
        LossKind::L1 => {
            let v = diff.data().iter().map(|d| d.f64().abs()).sum::<f64>() / n;
            let g = diff.map(|d| {
                if d > T::zero() {
                    inv_n
                } else if d < T::zero() {
                    -inv_n
                } else {
                    T::zero()
                }
            });
            (v, g)
        }
        LossKind::Charbonnier { eps } => {
            let e2 = eps * eps;
            let v = diff.data().iter().map(|d| (d.f64().powi(2) + e2).sqrt()).sum::<f64>() / n;
            let g = diff.map(|d| T::of(d.f64() / (d.f64().powi(2) + e2).sqrt() / n));
            (v, g)
        }
        LossKind::Mse => {
            let v = diff.data().iter().map(|d| d.f64().powi(2)).sum::<f64>() / n;
            (v, diff.scale(T::of(2.0 / n)))
        }
        LossKind::Psnr => {
            let m = mse(y, target)?;
            if m < 1e-10 {
                (-PSNR_CAP, FeatureMap::zeros(y.shape()))
            } else {
                // -PSNR = 10 log10(mse)
                let scale = 10.0 / (std::f64::consts::LN_10 * m) * 2.0 / n;
                ((10.0 * m.log10()).max(-PSNR_CAP), diff.scale(T::of(scale)))
            }
        }
    })
}
