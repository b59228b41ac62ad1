use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::seed::rng_for;
use crate::engine::{LabelMap, Tensor};
use crate::error::{Error, Result};

/// Default image side.
pub const IMAGE_SIZE: usize = 64;

/// Acquisition style of one domain, applied after rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub gamma: f64,
    pub contrast: f64,
    pub invert: bool,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amp: f64,
    pub noise_sigma: f64,
    /// Spatial frequency of the background texture, in cycles per image.
    pub texture_freq: f64,
}

impl DomainSpec {
    /// Leaves the clean render untouched (apart from its texture frequency).
    pub fn identity(texture_freq: f64) -> Self {
        Self {
            gamma: 1.0,
            contrast: 1.0,
            invert: false,
            bias_amp: 0.0,
            noise_sigma: 0.0,
            texture_freq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.contrast > 0.0
            && self.noise_sigma >= 0.0
            && self.bias_amp >= 0.0
            && self.texture_freq >= 0.0
            && [self.gamma, self.contrast, self.bias_amp, self.noise_sigma, self.texture_freq]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid domain {self:?}")))
        }
    }

    /// The three experiment domains: a clean source, a low-contrast
    /// gamma-shifted one and an inverted one with a strong bias field.
    pub fn experiment_defaults() -> Vec<Self> {
        vec![
            Self {
                gamma: 1.0,
                contrast: 1.0,
                invert: false,
                bias_amp: 0.1,
                noise_sigma: 0.03,
                texture_freq: 3.0,
            },
            Self {
                gamma: 1.8,
                contrast: 0.6,
                invert: false,
                bias_amp: 0.3,
                noise_sigma: 0.06,
                texture_freq: 5.0,
            },
            Self {
                gamma: 0.7,
                contrast: 1.3,
                invert: true,
                bias_amp: 0.6,
                noise_sigma: 0.05,
                texture_freq: 8.0,
            },
        ]
    }

    /// Domains of the foundation pretraining corpus, disjoint from the
    /// experiment ones.
    pub fn pretrain_defaults() -> Vec<Self> {
        vec![
            Self {
                gamma: 0.6,
                contrast: 0.9,
                invert: false,
                bias_amp: 0.2,
                noise_sigma: 0.04,
                texture_freq: 4.0,
            },
            Self {
                gamma: 1.3,
                contrast: 1.1,
                invert: true,
                bias_amp: 0.4,
                noise_sigma: 0.05,
                texture_freq: 6.0,
            },
            Self {
                gamma: 1.0,
                contrast: 0.75,
                invert: true,
                bias_amp: 0.25,
                noise_sigma: 0.03,
                texture_freq: 10.0,
            },
        ]
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub domain_id: usize,
}

const STREAM_GEOMETRY: u64 = 1;
const STREAM_STYLE: u64 = 2;

/// Foreground objects of one sample: a perturbed ellipse per class.
#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    harmonics: [(f64, f64); 2],
    intensity: f64,
}

impl Blob {
    fn draw<R: Rng>(rng: &mut R, size: usize, class: usize) -> Self {
        let s = size as f64;
        let ry = rng.gen_range(0.09..0.2) * s;
        let rx = rng.gen_range(0.09..0.2) * s;
        let margin = ry.max(rx) * 1.3 + 1.0;
        Self {
            cy: rng.gen_range(margin..s - margin),
            cx: rng.gen_range(margin..s - margin),
            ry,
            rx,
            angle: rng.gen_range(0.0..PI),
            harmonics: [
                (rng.gen_range(0.0..0.15), rng.gen_range(0.0..2.0 * PI)),
                (rng.gen_range(0.0..0.1), rng.gen_range(0.0..2.0 * PI)),
            ],
            intensity: if class == 1 {
                rng.gen_range(0.74..0.85)
            } else {
                rng.gen_range(0.45..0.52)
            },
        }
    }

    /// A mid-intensity object placed away from `targets`.
    fn draw_distractor<R: Rng>(rng: &mut R, size: usize, targets: &[Blob]) -> Self {
        let mut d = Self::draw(rng, size, 1);
        d.intensity = rng.gen_range(0.58..0.66);
        for _ in 0..20 {
            let clear = targets.iter().all(|t| {
                let dist = ((t.cy - d.cy).powi(2) + (t.cx - d.cx).powi(2)).sqrt();
                dist > 1.3 * (t.ry.max(t.rx) + d.ry.max(d.rx))
            });
            if clear {
                break;
            }
            let margin = d.ry.max(d.rx) * 1.3 + 1.0;
            let s = size as f64;
            d.cy = rng.gen_range(margin..s - margin);
            d.cx = rng.gen_range(margin..s - margin);
        }
        d
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let theta = v.atan2(u);
        let wobble = 1.0
            + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).sin()
            + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).sin();
        (u * u + v * v).sqrt() <= wobble
    }
}

/// Clean render and label for a geometry seed. The label ignores the
/// domain; the render uses only its texture frequency. The background holds
/// one unlabeled distractor object.
pub fn render_clean(seed: u64, classes: usize, size: usize, texture_freq: f64) -> (Vec<f64>, LabelMap) {
    render_scene(seed, classes, size, texture_freq, false)
}

fn render_scene(
    seed: u64,
    classes: usize,
    size: usize,
    texture_freq: f64,
    label_distractor: bool,
) -> (Vec<f64>, LabelMap) {
    let mut rng = rng_for(seed, &[STREAM_GEOMETRY]);
    let blobs: Vec<Blob> = (1..=classes).map(|c| Blob::draw(&mut rng, size, c)).collect();
    let distractor = Blob::draw_distractor(&mut rng, size, &blobs);
    let background = rng.gen_range(0.25..0.35);
    let texture_amp = rng.gen_range(0.05..0.1);
    let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let mut image = vec![0.0; size * size];
    let mut label = vec![0u8; size * size];
    let k = 2.0 * PI * texture_freq / size as f64;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let texture = (k * fx + phase.0).sin() * (k * fy + phase.1).sin();
            let mut v = background + texture_amp * texture;
            if distractor.contains(fy, fx) {
                v = distractor.intensity + 0.3 * texture_amp * texture;
                if label_distractor {
                    label[y * size + x] = 1;
                }
            }
            for (c, blob) in blobs.iter().enumerate() {
                if blob.contains(fy, fx) {
                    label[y * size + x] = c as u8 + 1;
                    v = blob.intensity + 0.3 * texture_amp * texture;
                }
            }
            image[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    (image, LabelMap { height: size, width: size, data: label })
}

/// Gamma, contrast, inversion, bias field, additive noise, clamp.
pub fn apply_domain(image: &mut [f64], size: usize, domain: &DomainSpec, seed: u64) {
    let mut rng = rng_for(seed, &[STREAM_STYLE]);
    let bias_phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let bias_freq = rng.gen_range(0.5..1.5);
    let noise = Normal::new(0.0, domain.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let k = 2.0 * PI * bias_freq / size as f64;
    for (i, v) in image.iter_mut().enumerate() {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        let mut p = v.max(0.0).powf(domain.gamma);
        p = (p - 0.5) * domain.contrast + 0.5;
        if domain.invert {
            p = 1.0 - p;
        }
        if domain.bias_amp > 0.0 {
            let field = (k * x + bias_phase.0).sin() * (k * y + bias_phase.1).cos();
            p *= 1.0 + domain.bias_amp * field;
        }
        if domain.noise_sigma > 0.0 {
            p += noise.sample(&mut rng);
        }
        *v = p.clamp(0.0, 1.0);
    }
}

/// Render sample `seed` in `domain`. Same seed, same sample.
pub fn generate_sample(
    seed: u64,
    domain: &DomainSpec,
    domain_id: usize,
    classes: usize,
    size: usize,
) -> Result<Sample> {
    generate_with(seed, domain, domain_id, classes, size, false)
}

/// Pretraining-corpus variant of [`generate_sample`]: same scene, but every
/// salient object is foreground, the distractor as class 1.
pub fn generate_pretrain_sample(
    seed: u64,
    domain: &DomainSpec,
    domain_id: usize,
    classes: usize,
    size: usize,
) -> Result<Sample> {
    generate_with(seed, domain, domain_id, classes, size, true)
}

fn generate_with(
    seed: u64,
    domain: &DomainSpec,
    domain_id: usize,
    classes: usize,
    size: usize,
    label_distractor: bool,
) -> Result<Sample> {
    if !(1..=2).contains(&classes) {
        return Err(Error::Config(format!("{classes} classes, expected 1 or 2")));
    }
    if size < 16 {
        return Err(Error::Config(format!("image size {size} below 16")));
    }
    domain.validate()?;
    let (mut image, label) = render_scene(seed, classes, size, domain.texture_freq, label_distractor);
    apply_domain(&mut image, size, domain, seed);
    Ok(Sample {
        id: seed,
        image: Tensor::from_f64(&[1, size, size], &image)?,
        label,
        domain_id,
    })
}
