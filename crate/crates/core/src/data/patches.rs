use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{FeatureMap, Scalar};

/// Non-overlapping grid crops in row-major order, at most `count` of them.
/// An image smaller than the patch yields none.
pub fn extract_patches<T: Scalar>(img: &FeatureMap<T>, size: usize, count: usize) -> Vec<FeatureMap<T>> {
    let [_, _, h, w] = img.shape();
    if size == 0 || h < size || w < size {
        log::warn!("skipping {h}x{w} image: smaller than {size}x{size} patch");
        return Vec::new();
    }
    let mut out = Vec::new();
    'grid: for gy in 0..h / size {
        for gx in 0..w / size {
            if out.len() == count {
                break 'grid;
            }
            out.push(crop_at(img, gy * size, gx * size, size, size));
        }
    }
    out
}

pub fn crop_at<T: Scalar>(img: &FeatureMap<T>, top: usize, left: usize, h: usize, w: usize) -> FeatureMap<T> {
    let [b, c, _, _] = img.shape();
    FeatureMap::from_fn([b, c, h, w], |[ib, ic, y, x]| img.at(ib, ic, top + y, left + x))
}

/// Uniformly placed `size x size` crop; returns the crop and its corner.
pub fn random_crop<T: Scalar>(img: &FeatureMap<T>, size: usize, rng: &mut impl Rng) -> (FeatureMap<T>, (usize, usize)) {
    let [_, _, h, w] = img.shape();
    let top = rng.gen_range(0..=h.saturating_sub(size));
    let left = rng.gen_range(0..=w.saturating_sub(size));
    (crop_at(img, top, left, size.min(h), size.min(w)), (top, left))
}

/// Element of the dihedral group of the square: `rot` quarter turns
/// counter-clockwise applied after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral {
            rot: i % 4,
            flip: i >= 4,
        })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let i: u8 = rng.gen_range(0..8);
        Dihedral {
            rot: i % 4,
            flip: i >= 4,
        }
    }

    pub fn apply<T: Scalar>(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let mut y = if self.flip { flip_h(x) } else { x.clone() };
        for _ in 0..self.rot {
            y = rot90(&y);
        }
        y
    }

    pub fn invert<T: Scalar>(&self, y: &FeatureMap<T>) -> FeatureMap<T> {
        let mut x = y.clone();
        for _ in 0..(4 - self.rot) % 4 {
            x = rot90(&x);
        }
        if self.flip {
            flip_h(&x)
        } else {
            x
        }
    }
}

fn flip_h<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let w = x.width();
    FeatureMap::from_fn(x.shape(), |[b, c, i, j]| x.at(b, c, i, w - 1 - j))
}

/// Quarter turn counter-clockwise.
fn rot90<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [b, c, h, w] = x.shape();
    FeatureMap::from_fn([b, c, w, h], |[ib, ic, i, j]| x.at(ib, ic, j, w - 1 - i))
}

/// One uniformly drawn dihedral transform, fixed by `seed`.
pub fn augment<T: Scalar>(patch: &FeatureMap<T>, seed: u64) -> FeatureMap<T> {
    Dihedral::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> FeatureMap<f32> {
        FeatureMap::from_fn([1, 2, h, w], |[_, c, y, x]| (c * 1000 + y * 31 + x) as f32)
    }

    #[test]
    fn grid_of_four() {
        let img = ramp(256, 256);
        let p = extract_patches(&img, 128, 10);
        assert_eq!(p.len(), 4);
        assert_eq!(p[3].at(0, 1, 0, 0), img.at(0, 1, 128, 128));
        assert_eq!(extract_patches(&img, 128, 3).len(), 3);
        assert!(extract_patches(&ramp(100, 300), 128, 10).is_empty());
    }

    #[test]
    fn grid_cells_are_disjoint() {
        let img = FeatureMap::<f32>::from_fn([1, 2, 64, 96], |[_, c, y, x]| (c * 100_000 + y * 1000 + x) as f32);
        let p = extract_patches(&img, 32, 100);
        let mut seen = std::collections::HashSet::new();
        for q in &p {
            for v in q.data() {
                assert!(seen.insert(v.to_bits()));
            }
        }
        assert_eq!(seen.len(), 2 * 64 * 96);
    }

    #[test]
    fn every_transform_inverts() {
        let x = ramp(5, 7);
        let mut outs = Vec::new();
        for t in Dihedral::all() {
            let y = t.apply(&x);
            assert_eq!(t.invert(&y), x, "{t:?}");
            outs.push(y);
        }
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_corner() {
        let x = ramp(2, 3);
        let y = Dihedral { rot: 1, flip: false }.apply(&x);
        assert_eq!(y.shape(), [1, 2, 3, 2]);
        // top-right corner lands top-left
        assert_eq!(y.at(0, 0, 0, 0), x.at(0, 0, 0, 2));
    }

    #[test]
    fn augment_is_seeded() {
        let x = ramp(8, 8);
        assert_eq!(augment(&x, 9), augment(&x, 9));
        let distinct: std::collections::HashSet<_> = (0..64)
            .map(|s| augment(&x, s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(distinct.len(), 8);
    }
}
