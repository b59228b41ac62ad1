use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{LabelMap, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default per-side fraction range of the pasted rectangle.
pub const PASTE_RATIO_RANGE: (f64, f64) = (0.25, 0.5);

/// Binary `H×W` mask holding one axis-aligned rectangle of ones (the region
/// taken from the labeled image).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasteMask {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
    pub rect_height: usize,
    pub rect_width: usize,
    pub seed: u64,
    data: Vec<u8>,
}

impl PasteMask {
    pub fn from_rect(
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        rect_height: usize,
        rect_width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("degenerate frame {height}×{width}")));
        }
        if top + rect_height > height || left + rect_width > width {
            return Err(Error::InvalidArgument("rectangle leaves the frame".into()));
        }
        let mut data = vec![0u8; height * width];
        for y in top..top + rect_height {
            data[y * width + left..y * width + left + rect_width].fill(1);
        }
        Ok(Self {
            height,
            width,
            top,
            left,
            rect_height,
            rect_width,
            seed: 0,
            data,
        })
    }

    /// All-zero mask (nothing pasted).
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::from_rect(height, width, 0, 0, 0, 0)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn contains(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn ones_fraction(&self) -> f64 {
        (self.rect_height * self.rect_width) as f64 / (self.height * self.width) as f64
    }
}

/// Draw a rectangle whose side fractions are uniform in `ratio_range`,
/// placed uniformly at random fully inside the frame.
pub fn make_paste_mask(
    height: usize,
    width: usize,
    ratio_range: (f64, f64),
    seed: u64,
) -> Result<PasteMask> {
    let (lo, hi) = ratio_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::InvalidArgument(format!("paste ratio range {ratio_range:?}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("degenerate frame {height}×{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut side = |extent: usize| -> usize {
        let f = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        ((f * extent as f64).round() as usize).min(extent)
    };
    let rh = side(height);
    let rw = side(width);
    let top = rng.gen_range(0..=height - rh);
    let left = rng.gen_range(0..=width - rw);
    let mut m = PasteMask::from_rect(height, width, top, left, rh, rw)?;
    m.seed = seed;
    Ok(m)
}

/// `u_c = x_w⊙m + u_s⊙(1−m)` and `q_c = y_w⊙m + q_w⊙(1−m)`.
///
/// Images are `channels×H×W` (or with a leading 1); the mask applies to
/// every channel.
pub fn copy_paste<T: Scalar>(
    x_w: &Tensor<T>,
    u_s: &Tensor<T>,
    y_w: &LabelMap,
    q_w: &LabelMap,
    m: &PasteMask,
) -> Result<(Tensor<T>, LabelMap)> {
    x_w.expect_same_shape("copy_paste", u_s)?;
    let hw = m.height * m.width;
    let shape = x_w.shape();
    let spatial_ok = shape.len() >= 2
        && shape[shape.len() - 2] == m.height
        && shape[shape.len() - 1] == m.width;
    if !spatial_ok
        || (y_w.height, y_w.width) != (m.height, m.width)
        || (q_w.height, q_w.width) != (m.height, m.width)
    {
        return Err(Error::shape(
            "copy_paste",
            format!(
                "image {:?}, labels {}×{} / {}×{}, mask {}×{}",
                shape, y_w.height, y_w.width, q_w.height, q_w.width, m.height, m.width
            ),
        ));
    }
    let image = Tensor::from_fn(shape, |i| {
        if m.contains(i % hw) {
            x_w.data()[i]
        } else {
            u_s.data()[i]
        }
    });
    let labels = (0..hw)
        .map(|i| if m.contains(i) { y_w.data[i] } else { q_w.data[i] })
        .collect();
    Ok((image, LabelMap::new(m.height, m.width, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn full_and_empty_paste() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let u = Tensor::<f64>::from_fn(&[1, 4, 4], |i| -(i as f64));
        let y = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        let q = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let full = make_paste_mask(4, 4, (1.0, 1.0), 3).unwrap();
        assert!(full.data().iter().all(|&v| v == 1));
        let (uc, qc) = copy_paste(&x, &u, &y, &q, &full).unwrap();
        assert_eq!((uc, qc), (x.clone(), y.clone()));
        let none = make_paste_mask(4, 4, (0.0, 0.0), 3).unwrap();
        assert!(none.data().iter().all(|&v| v == 0));
        let (uc, qc) = copy_paste(&x, &u, &y, &q, &none).unwrap();
        assert_eq!((uc, qc), (u, q));
    }

    #[test]
    fn two_by_two_composition() {
        let x = Tensor::<f64>::ones(&[1, 2, 2]);
        let u = Tensor::<f64>::zeros(&[1, 2, 2]);
        let y = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let q = LabelMap::new(2, 2, vec![0, 0, 0, 0]).unwrap();
        let m = PasteMask::from_rect(2, 2, 0, 0, 1, 1).unwrap();
        let (uc, qc) = copy_paste(&x, &u, &y, &q, &m).unwrap();
        assert_eq!(uc.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(qc.data, vec![1, 0, 0, 0]);
    }

    #[test]
    fn mean_fraction_at_default_range() {
        let mean = (0..1000u64)
            .map(|s| make_paste_mask(64, 64, PASTE_RATIO_RANGE, s).unwrap().ones_fraction())
            .sum::<f64>()
            / 1000.0;
        assert!((0.0625..=0.25).contains(&mean), "{mean}");
        // E[side]² = 0.375²
        assert!((mean - 0.140625).abs() < 0.01, "{mean}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_paste_mask(0, 4, PASTE_RATIO_RANGE, 0).is_err());
        assert!(make_paste_mask(4, 4, (0.6, 0.5), 0).is_err());
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let y = LabelMap::zeros(4, 4);
        let m = PasteMask::empty(3, 4).unwrap();
        assert!(copy_paste(&x, &x, &y, &y, &m).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn paste_is_exact_per_pixel(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::from_fn(&[1, 16, 16], |_| rng.gen());
            let u = Tensor::<f32>::from_fn(&[1, 16, 16], |_| rng.gen());
            let y = LabelMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..3)).collect()).unwrap();
            let q = LabelMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..3)).collect()).unwrap();
            let m = make_paste_mask(16, 16, PASTE_RATIO_RANGE, seed).unwrap();
            let frac = m.ones_fraction();
            prop_assert!(frac >= 0.0625 * 0.8 && frac <= 0.25 * 1.2);
            let ones: usize = m.data().iter().map(|&v| v as usize).sum();
            prop_assert_eq!(ones, m.rect_height * m.rect_width);
            let (uc, qc) = copy_paste(&x, &u, &y, &q, &m).unwrap();
            for i in 0..256 {
                if m.contains(i) {
                    prop_assert_eq!(uc.data()[i], x.data()[i]);
                    prop_assert_eq!(qc.data[i], y.data[i]);
                } else {
                    prop_assert_eq!(uc.data()[i], u.data()[i]);
                    prop_assert_eq!(qc.data[i], q.data[i]);
                }
            }
        }
    }
}
