//! Central-finite-difference gradient checks at 64-bit precision.
//!
//! Relative error per element is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`; the floor keeps near-zero gradients from turning
//! rounding noise into large ratios.

use rand::seq::index::sample;
use rand::Rng;

use super::tensor::{FeatureMap, HasParams};

pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err >= self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Perturbation size for a coordinate of value `theta`.
pub fn step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Scalar probe loss `sum(y * probe)`, whose gradient w.r.t. `y` is `probe`.
pub fn probe_loss(y: &FeatureMap<f64>, probe: &FeatureMap<f64>) -> f64 {
    y.dot(probe)
}

fn pick(n: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if samples >= n {
        (0..n).collect()
    } else {
        sample(rng, n, samples).into_vec()
    }
}

/// Checks `analytic` against finite differences of `loss` around `x`.
pub fn check_vec(
    label: &str,
    x: &[f64],
    analytic: &[f64],
    loss: &mut dyn FnMut(&[f64]) -> f64,
    samples: usize,
    rng: &mut impl Rng,
) -> GradReport {
    assert_eq!(x.len(), analytic.len());
    let mut rep = GradReport::default();
    let mut probe = x.to_vec();
    for i in pick(x.len(), samples, rng) {
        let h = step(x[i]);
        probe[i] = x[i] + h;
        let up = loss(&probe);
        probe[i] = x[i] - h;
        let down = loss(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        rep.record(|| format!("{label}[{i}]"), analytic[i], numeric);
    }
    rep
}

pub fn check_input(
    x: &FeatureMap<f64>,
    analytic: &FeatureMap<f64>,
    loss: &mut dyn FnMut(&FeatureMap<f64>) -> f64,
    samples: usize,
    rng: &mut impl Rng,
) -> GradReport {
    let shape = x.shape();
    check_vec(
        "input",
        x.data(),
        analytic.data(),
        &mut |v| loss(&FeatureMap::from_vec(shape, v.to_vec()).expect("same shape")),
        samples,
        rng,
    )
}

/// Checks the gradients currently stored in `module`'s parameters, sampling
/// up to `per_param` coordinates from every array.
pub fn check_params<M: HasParams<f64>>(
    module: &mut M,
    loss: &mut dyn FnMut(&M) -> f64,
    per_param: usize,
    rng: &mut impl Rng,
) -> GradReport {
    let mut arrays = Vec::new();
    module.visit("", &mut |name, p| {
        arrays.push((name.to_string(), p.value.clone(), p.grad.clone()))
    });
    let mut rep = GradReport::default();
    for (name, values, grads) in arrays {
        for i in pick(values.len(), per_param, rng) {
            let h = step(values[i]);
            let set = |m: &mut M, v: f64| {
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value[i] = v;
                    }
                })
            };
            set(module, values[i] + h);
            let up = loss(module);
            set(module, values[i] - h);
            let down = loss(module);
            set(module, values[i]);
            rep.record(|| format!("{name}[{i}]"), grads[i], (up - down) / (2.0 * h));
        }
    }
    rep
}
