use super::tensor::FeatureMap;
use super::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(sigmoid_scalar)
}

/// Gradient through a sigmoid given its output `s`.
pub fn sigmoid_backward<T: Scalar>(s: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    s.zip_map(dy, |s, g| g * s * (T::one() - s)).expect("same shape")
}

pub fn leaky_relu<T: Scalar>(x: &FeatureMap<T>, slope: T) -> FeatureMap<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &FeatureMap<T>, slope: T, dy: &FeatureMap<T>) -> FeatureMap<T> {
    x.zip_map(dy, |v, g| if v >= T::zero() { g } else { slope * g })
        .expect("same shape")
}

/// `max(0, x)^2`.
pub fn squared_relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| {
        let r = v.max(T::zero());
        r * r
    })
}

pub fn squared_relu_backward<T: Scalar>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let two = T::of(2.0);
    x.zip_map(dy, |v, g| two * v.max(T::zero()) * g)
        .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_vec;
    use rand::SeedableRng;

    fn scalar(v: f64) -> FeatureMap<f64> {
        FeatureMap::full([1, 1, 1, 1], v)
    }

    #[test]
    fn known_values() {
        assert_eq!(sigmoid(&scalar(0.0)).data()[0], 0.5);
        assert_eq!(squared_relu(&scalar(-3.0)).data()[0], 0.0);
        assert_eq!(squared_relu(&scalar(2.0)).data()[0], 4.0);
        assert!((leaky_relu(&scalar(-1.0), 0.2).data()[0] + 0.2).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0f64).is_finite() && sigmoid_scalar(800.0f64) == 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = FeatureMap::<f64>::randn([1, 2, 3, 4], &mut rng);
        let g = FeatureMap::<f64>::randn([1, 2, 3, 4], &mut rng);
        let shape = x.shape();
        let wrap = |v: &[f64]| FeatureMap::from_vec(shape, v.to_vec()).unwrap();

        let s = sigmoid(&x);
        let rep = check_vec("sigmoid", x.data(), sigmoid_backward(&s, &g).data(), &mut |v| sigmoid(&wrap(v)).dot(&g), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");

        let rep = check_vec("lrelu", x.data(), leaky_relu_backward(&x, 0.2, &g).data(), &mut |v| leaky_relu(&wrap(v), 0.2).dot(&g), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");

        let rep = check_vec("sqrelu", x.data(), squared_relu_backward(&x, &g).data(), &mut |v| squared_relu(&wrap(v)).dot(&g), usize::MAX, &mut rng);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
