use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;
use crate::error::{Error, Result};

/// Activation tensor in (batch, channel, height, width) order, row-major.
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for ib in 0..b {
            for ic in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ib, ic, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn randn(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Pixels per plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.plane_len();
        let o = (b * self.shape[1] + c) * n;
        &self.data[o..o + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.plane_len();
        let o = (b * self.shape[1] + c) * n;
        &mut self.data[o..o + n]
    }

    /// All channels of one batch item, contiguous `C x H*W`.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.shape[1] * self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum of `self * other` accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.f64() * b.f64())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Concatenate along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [ba, ca, ha, wa] = a.shape;
        let [bb, cb, hb, wb] = b.shape;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for ib in 0..ba {
            data.extend_from_slice(a.item(ib));
            data.extend_from_slice(b.item(ib));
        }
        Ok(Self {
            shape: [ba, ca + cb, ha, wa],
            data,
        })
    }

    /// Inverse of [`FeatureMap::concat_channels`]: splits at channel `at`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let [b, c, h, w] = self.shape;
        if at > c {
            return Err(Error::shape(format!("split at {at} beyond {c} channels")));
        }
        let hw = h * w;
        let mut first = Vec::with_capacity(b * at * hw);
        let mut second = Vec::with_capacity(b * (c - at) * hw);
        for ib in 0..b {
            let item = self.item(ib);
            first.extend_from_slice(&item[..at * hw]);
            second.extend_from_slice(&item[at * hw..]);
        }
        Ok((
            Self {
                shape: [b, at, h, w],
                data: first,
            },
            Self {
                shape: [b, c - at, h, w],
                data: second,
            },
        ))
    }
}

impl<T> fmt::Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMap{:?}", self.shape)
    }
}

/// Learnable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Whether AdamW applies weight decay to this array.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, decay: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            shape,
            value,
            grad,
            decay,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T, decay: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], decay)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(shape, value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn fill(&mut self, v: T) {
        self.value.iter_mut().for_each(|x| *x = v);
    }
}

/// Visitor over every named learnable array of a module tree.
pub trait HasParams<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    /// Zero every parameter value.
    fn zero_values(&mut self) {
        self.visit_mut("", &mut |_, p| p.fill(T::zero()));
    }
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(FeatureMap::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn concat_then_split_is_identity() {
        let mut rng = rand::thread_rng();
        let a = FeatureMap::<f64>::randn([2, 3, 4, 5], &mut rng);
        let b = FeatureMap::<f64>::randn([2, 2, 4, 5], &mut rng);
        let cat = FeatureMap::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 5, 4, 5]);
        let (a2, b2) = cat.split_channels(3).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let m = FeatureMap::<f64>::from_fn([2, 3, 4, 5], |[b, c, y, x]| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(m.at(1, 2, 3, 4), 1234.0);
        assert_eq!(m.plane(1, 2)[3 * 5 + 4], 1234.0);
    }
}
