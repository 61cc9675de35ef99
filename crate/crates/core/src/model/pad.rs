use crate::numerics::{FeatureMap, Scalar};

/// Mirror index without repeating the edge sample; any offset folds back
/// into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

/// Reflect-pads bottom and right edges up to the next multiple of `multiple`.
pub fn pad_reflect<T: Scalar>(x: &FeatureMap<T>, multiple: usize) -> FeatureMap<T> {
    let [b, c, h, w] = x.shape();
    let up = |n: usize| n.div_ceil(multiple).max(1) * multiple;
    let (ph, pw) = (up(h), up(w));
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    FeatureMap::from_fn([b, c, ph, pw], |[ib, ic, y, xx]| {
        x.at(ib, ic, reflect(y as isize, h), reflect(xx as isize, w))
    })
}

/// Top-left `h x w` window.
pub fn crop<T: Scalar>(x: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let [b, c, _, _] = x.shape();
    FeatureMap::from_fn([b, c, h, w], |[ib, ic, y, xx]| x.at(ib, ic, y, xx))
}
