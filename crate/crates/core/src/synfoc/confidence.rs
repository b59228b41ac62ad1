//! Instance-wise confidence, ensemble ratio and pseudo-label construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::paste::PasteMask;
use crate::engine::{LabelMap, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default confidence threshold of the pseudo-label weight map.
pub const TAU: f64 = 0.95;

/// Mean per-foreground-class Dice between two label maps.
///
/// A class absent from both maps counts as perfect agreement.
pub fn dice_agreement(a: &LabelMap, b: &LabelMap, classes: usize) -> f64 {
    debug_assert_eq!(a.data.len(), b.data.len());
    if classes == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for class in 1..=classes as u8 {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data.iter().zip(&b.data) {
            let (ia, ib) = (x == class, y == class);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        total += if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        };
    }
    total / classes as f64
}

/// Agreement between the conventional student and its teacher on the weak view.
pub fn self_confidence(student: &[LabelMap], teacher: &[LabelMap], classes: usize) -> Vec<f64> {
    student
        .iter()
        .zip(teacher)
        .map(|(s, t)| dice_agreement(s, t, classes))
        .collect()
}

/// Agreement between the foundation teacher and the conventional teacher.
pub fn mutual_confidence(
    foundation_teacher: &[LabelMap],
    conv_teacher: &[LabelMap],
    classes: usize,
) -> Vec<f64> {
    foundation_teacher
        .iter()
        .zip(conv_teacher)
        .map(|(f, c)| dice_agreement(f, c, classes))
        .collect()
}

/// How the per-instance weight of the conventional teacher is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaRule {
    /// Product of self- and mutual confidence.
    Smc,
    Constant,
    Cps,
    Linear,
    SelfOnly,
    MutualOnly,
}

/// Ensemble ratio `α` for one instance.
pub fn ensemble_ratio(
    phi_self: f64,
    phi_mut: f64,
    rule: AlphaRule,
    t: usize,
    t_max: usize,
) -> Result<f64> {
    for (name, v) in [("self-confidence", phi_self), ("mutual confidence", phi_mut)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
        }
    }
    if t_max == 0 || t > t_max {
        return Err(Error::InvalidArgument(format!("step {t} of {t_max}")));
    }
    Ok(match rule {
        AlphaRule::Smc => phi_self * phi_mut,
        AlphaRule::Constant => 0.5,
        AlphaRule::Cps => 0.0,
        AlphaRule::Linear => t as f64 / t_max as f64,
        AlphaRule::SelfOnly => phi_self,
        AlphaRule::MutualOnly => phi_mut,
    })
}

/// `P̂_en = α·P̂_ut + (1−α)·P̂_ms` per instance, plus its argmax.
pub fn ensemble_pseudo<T: Scalar>(
    p_ut: &Tensor<T>,
    p_ms: &Tensor<T>,
    alphas: &[f64],
) -> Result<(Tensor<T>, Vec<LabelMap>)> {
    p_ut.expect_same_shape("ensemble_pseudo", p_ms)?;
    let (n, _, _, _) = p_ut.dims4("ensemble_pseudo")?;
    if alphas.len() != n {
        return Err(Error::shape(
            "ensemble_pseudo",
            format!("{} ratios for {n} instances", alphas.len()),
        ));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("ensemble ratio {a} outside [0, 1]")));
    }
    let per = p_ut.len() / n;
    let mut out = p_ut.clone();
    for (b, &alpha) in alphas.iter().enumerate() {
        let range = b * per..(b + 1) * per;
        let dst = &mut out.data_mut()[range.clone()];
        if alpha == 1.0 {
            continue;
        }
        if alpha == 0.0 {
            dst.copy_from_slice(&p_ms.data()[range]);
            continue;
        }
        let (a, one_minus) = (T::lit(alpha), T::lit(1.0 - alpha));
        for (d, &m) in dst.iter_mut().zip(&p_ms.data()[range]) {
            *d = a * *d + one_minus * m;
        }
    }
    let q = out.argmax_channels()?;
    Ok((out, q))
}

/// Binary weight map `1(max_c P̂_en ≥ τ)`, `N×1×H×W`.
///
/// With `paste_certain`, pixels inside each instance's pasted rectangle get
/// weight 1, since their targets are ground-truth labels.
pub fn confidence_weight<T: Scalar>(
    p_en_w: &Tensor<T>,
    tau: f64,
    masks: &[PasteMask],
    paste_certain: bool,
) -> Result<Tensor<T>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside (0, 1)")));
    }
    let (n, _, h, w) = p_en_w.dims4("confidence_weight")?;
    if paste_certain && masks.len() != n {
        return Err(Error::shape(
            "confidence_weight",
            format!("{} masks for {n} instances", masks.len()),
        ));
    }
    let tau = T::lit(tau);
    let mut weights = p_en_w.channel_max()?.map(|m| if m >= tau { T::one() } else { T::zero() });
    if paste_certain {
        let hw = h * w;
        for (b, m) in masks.iter().enumerate() {
            for i in 0..hw {
                if m.contains(i) {
                    weights.data_mut()[b * hw + i] = T::one();
                }
            }
        }
    }
    Ok(weights)
}

/// Per-instance confidence values and the resulting ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    pub phi_self: f64,
    pub phi_mut: f64,
    pub alpha: f64,
}

/// Everything derived from the teachers on the weak view of one batch.
#[derive(Clone, Debug)]
pub struct PseudoLabelBundle<T> {
    pub p_ut_teacher: Tensor<T>,
    pub p_ms_teacher: Tensor<T>,
    pub p_ut_student: Tensor<T>,
    pub p_ensemble: Tensor<T>,
    pub q_ensemble: Vec<LabelMap>,
    /// Thresholded ensemble confidence, composed with the paste masks when
    /// requested. `N×1×H×W`.
    pub weight_map: Tensor<T>,
    pub confidences: Vec<ConfidencePair>,
}

impl<T: Scalar> PseudoLabelBundle<T> {
    /// Confidence, ratio, ensemble and weight map from the three weak-view
    /// maps (all at the same resolution).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        p_ut_teacher: Tensor<T>,
        p_ms_teacher: Tensor<T>,
        p_ut_student: Tensor<T>,
        rule: AlphaRule,
        t: usize,
        t_max: usize,
        tau: f64,
        masks: &[PasteMask],
        paste_certain: bool,
    ) -> Result<Self> {
        let classes = p_ut_teacher.dims4("pseudo labels")?.1 - 1;
        let q_ut_t = p_ut_teacher.argmax_channels()?;
        let q_ms_t = p_ms_teacher.argmax_channels()?;
        let q_ut_s = p_ut_student.argmax_channels()?;
        let phi_self = self_confidence(&q_ut_s, &q_ut_t, classes);
        let phi_mut = mutual_confidence(&q_ms_t, &q_ut_t, classes);
        let confidences = phi_self
            .iter()
            .zip(&phi_mut)
            .map(|(&s, &m)| {
                Ok(ConfidencePair {
                    phi_self: s,
                    phi_mut: m,
                    alpha: ensemble_ratio(s, m, rule, t, t_max)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alphas: Vec<f64> = confidences.iter().map(|c| c.alpha).collect();
        let (p_ensemble, q_ensemble) = ensemble_pseudo(&p_ut_teacher, &p_ms_teacher, &alphas)?;
        let weight_map = confidence_weight(&p_ensemble, tau, masks, paste_certain)?;
        Ok(Self {
            p_ut_teacher,
            p_ms_teacher,
            p_ut_student,
            p_ensemble,
            q_ensemble,
            weight_map,
            confidences,
        })
    }
}

impl fmt::Display for AlphaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaRule::Smc => "smc",
            AlphaRule::Constant => "constant",
            AlphaRule::Cps => "cps",
            AlphaRule::Linear => "linear",
            AlphaRule::SelfOnly => "self-only",
            AlphaRule::MutualOnly => "mutual-only",
        })
    }
}

impl FromStr for AlphaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "smc" => AlphaRule::Smc,
            "constant" => AlphaRule::Constant,
            "cps" => AlphaRule::Cps,
            "linear" => AlphaRule::Linear,
            "self-only" => AlphaRule::SelfOnly,
            "mutual-only" => AlphaRule::MutualOnly,
            other => return Err(Error::Config(format!("unknown ensemble rule {other:?}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lab(v: &[u8], w: usize) -> LabelMap {
        LabelMap::new(v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn agreement_examples() {
        let a = lab(&[1, 1, 0, 0], 2);
        assert_eq!(dice_agreement(&a, &a, 1), 1.0);
        let b = lab(&[0, 0, 1, 1], 2);
        assert_eq!(dice_agreement(&a, &b, 1), 0.0);
        // |A| = 4, |B| = 4, |A∩B| = 2
        let c = lab(&[1, 1, 1, 1, 0, 0], 3);
        let d = lab(&[0, 0, 1, 1, 1, 1], 3);
        assert_eq!(dice_agreement(&c, &d, 1), 0.5);
        // empty on both sides
        let z = lab(&[0, 0, 0, 0], 2);
        assert_eq!(dice_agreement(&z, &z, 2), 1.0);
        // class 2 absent in both, class 1 disjoint
        assert_eq!(dice_agreement(&a, &b, 2), 0.5);
    }

    #[test]
    fn self_confidence_is_per_instance() {
        let c = lab(&[1, 1, 1, 1, 0, 0], 3);
        let d = lab(&[0, 0, 1, 1, 1, 1], 3);
        let e = lab(&[0, 0, 0, 0, 1, 1], 3);
        let student = [c.clone(), c.clone(), c.clone()];
        let teacher = [c.clone(), e, d];
        assert_eq!(self_confidence(&student, &teacher, 1), vec![1.0, 0.0, 0.5]);
        let ms = [c.clone(), c.clone(), c.clone()];
        let ut = teacher.clone();
        assert_eq!(mutual_confidence(&ms, &ut, 1), vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn ratio_rules() {
        let r = |rule, s, m, t| ensemble_ratio(s, m, rule, t, 10).unwrap();
        assert!((r(AlphaRule::Smc, 0.8, 0.5, 0) - 0.4).abs() < 1e-15);
        assert_eq!(r(AlphaRule::Smc, 1.0, 1.0, 0), 1.0);
        assert_eq!(r(AlphaRule::Smc, 0.0, 0.7, 0), 0.0);
        assert_eq!(r(AlphaRule::Linear, 0.3, 0.3, 10), 1.0);
        assert_eq!(r(AlphaRule::Linear, 0.3, 0.3, 5), 0.5);
        assert_eq!(r(AlphaRule::Constant, 0.3, 0.9, 5), 0.5);
        assert_eq!(r(AlphaRule::Cps, 0.3, 0.9, 5), 0.0);
        assert_eq!(r(AlphaRule::SelfOnly, 0.3, 0.9, 5), 0.3);
        assert_eq!(r(AlphaRule::MutualOnly, 0.3, 0.9, 5), 0.9);
        assert!(ensemble_ratio(1.2, 0.5, AlphaRule::Smc, 0, 10).is_err());
        assert!(ensemble_ratio(0.2, 0.5, AlphaRule::Smc, 11, 10).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let a = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.8, 0.2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.2, 0.8]).unwrap();
        assert_eq!(ensemble_pseudo(&a, &b, &[1.0]).unwrap().0, a);
        assert_eq!(ensemble_pseudo(&a, &b, &[0.0]).unwrap().0, b);
        let (p, q) = ensemble_pseudo(&a, &b, &[0.5]).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15 && (p.data()[1] - 0.5).abs() < 1e-15);
        assert_eq!(q[0].data, vec![0]);
        assert!(ensemble_pseudo(&a, &b, &[1.5]).is_err());
    }

    #[test]
    fn weight_examples() {
        let uniform = Tensor::<f64>::full(&[1, 2, 2, 2], 0.5);
        let none = [PasteMask::empty(2, 2).unwrap()];
        let w = confidence_weight(&uniform, TAU, &none, true).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        let one_hot = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap().one_hot::<f64>(2);
        let w = confidence_weight(&one_hot, TAU, &none, true).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let pmax = [0.99, 0.5, 0.96, 0.9];
        let mixed = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| {
            if i < 4 {
                pmax[i]
            } else {
                1.0 - pmax[i - 4]
            }
        });
        let w = confidence_weight(&mixed, 0.95, &none, true).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 1.0, 0.0]);
        let corner = [PasteMask::from_rect(2, 2, 0, 1, 1, 1).unwrap()];
        assert_eq!(confidence_weight(&mixed, 0.95, &corner, true).unwrap().data(), &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(confidence_weight(&mixed, 0.95, &corner, false).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(confidence_weight(&mixed, 1.0, &none, true).is_err());
    }

    fn random_probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-3.0..3.0)).softmax_channels().unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ensemble_convex_and_exact_at_boundaries(seed in any::<u64>(), alpha in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_probs(&mut rng, &[3, 3, 4, 4]);
            let b = random_probs(&mut rng, &[3, 3, 4, 4]);
            let (p, _) = ensemble_pseudo(&a, &b, &[alpha, 0.0, 1.0]).unwrap();
            let per = 48;
            prop_assert_eq!(&p.data()[per..2 * per], &b.data()[per..2 * per]);
            prop_assert_eq!(&p.data()[2 * per..], &a.data()[2 * per..]);
            for i in 0..per {
                let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
                prop_assert!(p.data()[i] >= lo - 1e-15 && p.data()[i] <= hi + 1e-15);
            }
            for n in 0..3 {
                for px in 0..16 {
                    let s: f64 = (0..3).map(|c| p.data()[n * per + c * 16 + px]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn agreement_symmetric_and_bounded(seed in any::<u64>(), classes in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = LabelMap::new(6, 6, (0..36).map(|_| rng.gen_range(0..=classes as u8)).collect()).unwrap();
            let b = LabelMap::new(6, 6, (0..36).map(|_| rng.gen_range(0..=classes as u8)).collect()).unwrap();
            let ab = dice_agreement(&a, &b, classes);
            prop_assert_eq!(ab, dice_agreement(&b, &a, classes));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice_agreement(&a, &a, classes), 1.0);
            let identical_fg = (1..=classes as u8).all(|c| a.indicator(c) == b.indicator(c));
            prop_assert_eq!(ab == 1.0, identical_fg);
        }

        #[test]
        fn weight_map_is_binary(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::<f64>::from_fn(&[2, 2, 8, 8], |_| rng.gen_range(-6.0..6.0)).softmax_channels().unwrap();
            let masks = [
                super::super::make_paste_mask(8, 8, (0.25, 0.5), seed).unwrap(),
                PasteMask::empty(8, 8).unwrap(),
            ];
            let w = confidence_weight(&p, TAU, &masks, true).unwrap();
            prop_assert_eq!(w.shape(), &[2, 1, 8, 8]);
            prop_assert!(w.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let pm = p.channel_max().unwrap();
            for i in 64..128 {
                prop_assert_eq!(w.data()[i] == 1.0, pm.data()[i] >= TAU);
            }
        }
    }
}
