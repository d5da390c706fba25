use rand::Rng;

use super::Sample;
use crate::tensor::{Real, Tensor};

/// A horizontal flip followed by a number of clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Quarter turns other than a half turn are only drawn for square maps.
    pub fn random(rng: &mut impl Rng, square: bool) -> Self {
        let flip = rng.random_bool(0.5);
        let quarter_turns = if square {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        };
        Self { flip, quarter_turns }
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = if self.flip { flip_horizontal(t) } else { t.clone() };
        for _ in 0..self.quarter_turns % 4 {
            out = rotate90(&out);
        }
        out
    }

    pub fn apply_sample(&self, s: &Sample) -> Sample {
        Sample {
            name: s.name.clone(),
            rgb: self.apply(&s.rgb),
            depth: self.apply(&s.depth),
            gt: self.apply(&s.gt),
        }
    }
}

fn split(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    assert!(n >= 2, "spatial op on rank {n}");
    (shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1])
}

/// Mirrors the last axis.
pub fn flip_horizontal<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = split(t.shape());
    let d = t.data();
    let data = (0..d.len())
        .map(|i| {
            let (plane, y, x) = (i / (h * w), i / w % h, i % w);
            d[plane * h * w + y * w + (w - 1 - x)]
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same size")
}

/// Rotates the last two axes a quarter turn clockwise.
pub fn rotate90<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = split(t.shape());
    let d = t.data();
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    // Output is [.., w, h]; out[y][x] = in[h-1-x][y].
    let data = (0..d.len())
        .map(|i| {
            let (plane, y, x) = (i / (h * w), i / h % w, i % h);
            d[plane * h * w + (h - 1 - x) * w + y]
        })
        .collect();
    Tensor::new(shape, data).expect("same size")
}

/// Draws and applies one augmentation to every map of the sample.
pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    let (h, w) = s.size();
    Augmentation::random(rng, h == w).apply_sample(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, Quality};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_example() {
        let t = Tensor::<f32>::from_fn([2, 3], |i| i as f32);
        let r = rotate90(&t);
        assert_eq!(r.shape(), [3, 2]);
        assert_eq!(r.data(), &[3.0, 0.0, 4.0, 1.0, 5.0, 2.0]);
        assert_eq!(flip_horizontal(&t).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn four_turns_and_two_flips_are_identity() {
        let t = Tensor::<f32>::from_fn([3, 4, 5], |i| i as f32);
        let mut r = t.clone();
        for _ in 0..4 {
            r = rotate90(&r);
        }
        assert_eq!(r, t);
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
    }

    #[test]
    fn all_maps_move_together() {
        let s = generate_sample(4, (32, 32), Quality::Good).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let a = augment(&s, &mut rng);
            assert!((a.foreground_ratio() - s.foreground_ratio()).abs() < 1e-12);
            // Pixels that are salient in the augmented gt carry the same depth as before.
            let near: Vec<_> = a.depth.data().iter().zip(a.gt.data()).filter(|(_, &g)| g > 0.5).map(|(d, _)| *d).collect();
            let orig: Vec<_> = s.depth.data().iter().zip(s.gt.data()).filter(|(_, &g)| g > 0.5).map(|(d, _)| *d).collect();
            let mut near_sorted = near.clone();
            let mut orig_sorted = orig.clone();
            near_sorted.sort_by(f32::total_cmp);
            orig_sorted.sort_by(f32::total_cmp);
            assert_eq!(near_sorted, orig_sorted);
        }
    }

    #[test]
    fn non_square_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = Augmentation::random(&mut rng, false);
            assert_eq!(a.quarter_turns % 2, 0);
        }
    }
}
