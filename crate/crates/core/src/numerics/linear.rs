//! Per-pixel affine map over the channel axis.

use rand::Rng;
use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::{join, FeatureMap, HasParams, Param};
use super::Scalar;
use crate::error::{Error, Result};

/// `y[b, o, p] = sum_i x[b, i, p] * weight[i, o] + bias[o]`, with `weight`
/// row-major `c_in x c_out`.
pub fn linear<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    c_in: usize,
    c_out: usize,
) -> Result<FeatureMap<T>> {
    let [b, c, h, w] = x.shape();
    if c != c_in || weight.len() != c_in * c_out || bias.len() != c_out {
        return Err(Error::shape(format!(
            "linear: input {:?} vs weight [{c_in}, {c_out}] ({} values), bias [{}]",
            x.shape(),
            weight.len(),
            bias.len()
        )));
    }
    let hw = h * w;
    let mut y = FeatureMap::zeros([b, c_out, h, w]);
    y.data_mut()
        .par_chunks_mut((c_out * hw).max(1))
        .enumerate()
        .for_each(|(ib, out)| {
            for (o, row) in out.chunks_mut(hw.max(1)).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[o]);
            }
            gemm(
                T::one(),
                MatRef::row_major_t(weight, c_in, c_out),
                MatRef::row_major(x.item(ib), c_in, hw),
                T::one(),
                MatMut::row_major(out, c_out, hw),
            );
        });
    Ok(y)
}

/// Returns `dx`; accumulates into `dweight` / `dbias`.
pub fn linear_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    c_in: usize,
    c_out: usize,
) -> FeatureMap<T> {
    let [b, _, h, w] = x.shape();
    let hw = h * w;
    let mut dx = FeatureMap::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut((c_in * hw).max(1))
        .enumerate()
        .for_each(|(ib, out)| {
            gemm(
                T::one(),
                MatRef::row_major(weight, c_in, c_out),
                MatRef::row_major(dy.item(ib), c_out, hw),
                T::zero(),
                MatMut::row_major(out, c_in, hw),
            );
        });
    for ib in 0..b {
        gemm(
            T::one(),
            MatRef::row_major(x.item(ib), c_in, hw),
            MatRef::row_major_t(dy.item(ib), c_out, hw),
            T::one(),
            MatMut::row_major(dweight, c_in, c_out),
        );
        for (o, row) in dy.item(ib).chunks(hw.max(1)).enumerate() {
            dbias[o] = dbias[o] + row.iter().copied().sum::<T>();
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    c_in: usize,
    c_out: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Param::fan_in_uniform(vec![c_out], c_in, rng);
        bias.decay = false;
        Self {
            weight: Param::fan_in_uniform(vec![c_in, c_out], c_in, rng),
            bias,
            c_in,
            c_out,
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = vec![T::zero(); c * c];
        for i in 0..c {
            w[i * c + i] = T::one();
        }
        Self {
            weight: Param::new(vec![c, c], w, true),
            bias: Param::filled(vec![c], T::zero(), false),
            c_in: c,
            c_out: c,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        linear(x, &self.weight.value, &self.bias.value, self.c_in, self.c_out)
    }

    /// `x` is the input the forward pass saw.
    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        linear_backward(
            x,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            self.c_in,
            self.c_out,
        )
    }
}

impl<T: Scalar> HasParams<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
