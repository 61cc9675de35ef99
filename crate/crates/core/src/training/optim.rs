use crate::error::{Error, Result};
use crate::numerics::{HasParams, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps.
    pub t: u64,
    /// First and second moments, one array per parameter in visit order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<M: HasParams<T>>(model: &M, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(vec![T::zero(); p.len()]));
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One decoupled-weight-decay Adam update using the stored gradients.
    pub fn step<M: HasParams<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut bad = None;
        model.visit("", &mut |name, p| {
            if bad.is_none() {
                if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                    bad = Some(format!("non-finite gradient in {name}[{i}]"));
                }
            }
        });
        if let Some(msg) = bad {
            return Err(Error::Numeric(msg));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            let shrink = if p.decay { 1.0 - lr * wd } else { 1.0 };
            for i in 0..p.value.len() {
                let g = p.grad[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                p.value[i] = T::of(p.value[i].f64() * shrink - lr * update);
            }
        });
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, M: HasParams<T>>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| sq += p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        model.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = *g * s));
    }
    norm
}
