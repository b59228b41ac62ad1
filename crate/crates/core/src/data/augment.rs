use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::domain::Sample;
use super::seed::rng_for;
use crate::engine::{LabelMap, Tensor};

/// Largest weak-view translation, in pixels.
pub const MAX_SHIFT: i32 = 4;

/// Rigid transform of the weak view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    pub dy: i32,
    pub dx: i32,
}

impl WeakParams {
    pub fn identity() -> Self {
        Self { flip: false, dy: 0, dx: 0 }
    }

    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
            dx: rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
        }
    }

    /// Source pixel of output `(y, x)`, or `None` when it was shifted in
    /// from outside the frame.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<usize> {
        let sy = y as i64 - self.dy as i64;
        let sx = x as i64 - self.dx as i64;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            return None;
        }
        let sx = if self.flip { w as i64 - 1 - sx } else { sx };
        Some(sy as usize * w + sx as usize)
    }

    /// Apply the same transform to image and label; vacated pixels are 0.
    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.label.height, s.label.width);
        let mut image = vec![0.0f32; h * w];
        let mut label = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                if let Some(src) = self.source(y, x, h, w) {
                    image[y * w + x] = s.image.data()[src];
                    label[y * w + x] = s.label.data[src];
                }
            }
        }
        Sample {
            id: s.id,
            image: Tensor::new(vec![1, h, w], image).expect("same size"),
            label: LabelMap { height: h, width: w, data: label },
            domain_id: s.domain_id,
        }
    }
}

/// Random horizontal flip and integer translation up to ±4 px.
pub fn weak_augment(s: &Sample, seed: u64) -> Sample {
    WeakParams::draw(&mut rng_for(seed, &[11])).apply(s)
}

/// Intensity perturbation of the strong view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub brightness: f64,
    /// Contrast factor minus one.
    pub contrast: f64,
    /// Blend weight of the 3×3 Gaussian blur.
    pub blur: f64,
    pub noise_sigma: f64,
    /// `(top, left, height, width)`.
    pub cutout: Option<(usize, usize, usize, usize)>,
    pub noise_seed: u64,
}

impl StrongParams {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            blur: 0.0,
            noise_sigma: 0.0,
            cutout: None,
            noise_seed: 0,
        }
    }

    pub fn draw<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let ch = rng.gen_range(h / 8..=h / 4).max(1);
        let cw = rng.gen_range(w / 8..=w / 4).max(1);
        Self {
            brightness: rng.gen_range(-0.15..=0.15),
            contrast: rng.gen_range(-0.25..=0.25),
            blur: rng.gen_range(0.0..=1.0),
            noise_sigma: rng.gen_range(0.0..=0.05),
            cutout: Some((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw)),
            noise_seed: rng.gen(),
        }
    }

    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let shape = image.shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut v: Vec<f64> = image.data().iter().map(|&p| p as f64).collect();
        if self.brightness != 0.0 || self.contrast != 0.0 {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            for p in &mut v {
                *p = ((*p - mean) * (1.0 + self.contrast) + mean + self.brightness).clamp(0.0, 1.0);
            }
        }
        if self.blur > 0.0 {
            let blurred = blur3(&v, h, w);
            for (p, b) in v.iter_mut().zip(blurred) {
                *p = (1.0 - self.blur) * *p + self.blur * b;
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = rng_for(self.noise_seed, &[]);
            let noise = Normal::new(0.0, self.noise_sigma).expect("positive sigma");
            for p in &mut v {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        if let Some((top, left, ch, cw)) = self.cutout {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            for y in top..top + ch {
                v[y * w + left..y * w + left + cw].fill(mean);
            }
        }
        Tensor::new(shape, v.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect())
            .expect("same size")
    }
}

/// 3×3 Gaussian (1-2-1) blur with replicated borders.
fn blur3(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |y: isize, x: isize| v[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, ky) in K.iter().enumerate() {
                for (j, kx) in K.iter().enumerate() {
                    acc += ky * kx * at(y + i as isize - 1, x + j as isize - 1);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Brightness/contrast jitter, blur, noise and a mean-filled cutout.
/// Labels are never involved.
pub fn strong_augment(image: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    StrongParams::draw(&mut rng_for(seed, &[12]), h, w).apply(image)
}
