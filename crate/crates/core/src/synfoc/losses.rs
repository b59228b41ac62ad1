//! Supervised, unsupervised and consensus-divergence losses on the tape.

use serde::{Deserialize, Serialize};

use crate::engine::{LabelMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1e-8;

/// Normalization constant of the consensus and divergence terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Element count of the probability tensor, `N·(C+1)·H·W`.
    #[default]
    AllChannels,
    /// `N·C·H·W`, counting foreground channels only.
    Foreground,
}

impl Normalizer {
    pub fn count(self, shape: &[usize]) -> usize {
        let all: usize = shape.iter().product();
        match self {
            Normalizer::AllChannels => all,
            Normalizer::Foreground => all / shape[1] * (shape[1] - 1).max(1),
        }
    }
}

fn check_targets<T: Scalar>(
    op: &'static str,
    p: &Tensor<T>,
    y: &[LabelMap],
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, wd) = p.dims4(op)?;
    if c < 2 {
        return Err(Error::shape(op, format!("{c} channels, need background plus one class")));
    }
    if y.len() != n || y.iter().any(|l| (l.height, l.width) != (h, wd)) {
        return Err(Error::shape(op, format!("{} label maps for {:?}", y.len(), p.shape())));
    }
    if w.shape() != [n, 1, h, wd] {
        return Err(Error::shape(op, format!("weights {:?} for {:?}", w.shape(), p.shape())));
    }
    Ok((n, c, h, wd))
}

/// `−(1/(N·H·W)) Σ w·y·log p` with one-hot `y`, summed over classes.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, y: &[LabelMap], p: Var, w: &Tensor<T>) -> Result<Var> {
    let (n, c, h, wd) = check_targets("ce_loss", tape.value(p), y, w)?;
    let mut target = Tensor::stack_one_hot(y, c);
    let wc = w.expand_channels(c)?;
    for (t, &m) in target.data_mut().iter_mut().zip(wc.data()) {
        *t *= m;
    }
    let target = tape.constant(target);
    let logp = tape.log(p);
    let prod = tape.mul(target, logp)?;
    let total = tape.sum(prod);
    Ok(tape.mul_scalar(total, T::lit(-1.0 / (n * h * wd) as f64)))
}

/// `1 − (2Σwpy + ε) / (Σw(p² + y²) + ε)` per foreground class, pooled over
/// the batch and averaged over classes `1..C`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, y: &[LabelMap], p: Var, w: &Tensor<T>) -> Result<Var> {
    let (_, c, _, _) = check_targets("dice_loss", tape.value(p), y, w)?;
    let y = Tensor::stack_one_hot(y, c);
    let wc = w.expand_channels(c)?;
    let wy = wc.zip_map(&y, |a, b| a * b)?;
    let wy2 = wy.zip_map(&y, |a, b| a * b)?;
    let wy_v = tape.constant(wy);
    let w_v = tape.constant(wc);
    let inter = tape.mul(p, wy_v)?;
    let inter = tape.sum_axes(inter, &[0, 2, 3])?;
    let num = tape.mul_scalar(inter, T::lit(2.0));
    let num = tape.add_scalar(num, T::lit(DICE_EPS));
    let p2 = tape.square(p);
    let wp2 = tape.mul(p2, w_v)?;
    let den = tape.sum_axes(wp2, &[0, 2, 3])?;
    let ysum = per_channel_sum(&wy2)?;
    let ysum = Tensor::new(vec![1, c, 1, 1], ysum.into_iter().map(|v| v + T::lit(DICE_EPS)).collect())?;
    let ysum = tape.constant(ysum);
    let den = tape.add(den, ysum)?;
    let ratio = tape.div(num, den)?;
    let select = Tensor::from_fn(&[1, c, 1, 1], |i| if i == 0 { T::zero() } else { T::one() });
    let select = tape.constant(select);
    let fg = tape.mul(ratio, select)?;
    let fg = tape.sum(fg);
    let mean = tape.mul_scalar(fg, T::lit(-1.0 / (c - 1) as f64));
    Ok(tape.add_scalar(mean, T::one()))
}

/// Per-channel totals of an `N×C×H×W` tensor.
fn per_channel_sum<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (n, c, h, w) = x.dims4("per_channel_sum")?;
    let hw = h * w;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            *o += x.data()[base..base + hw].iter().copied().sum::<T>();
        }
    }
    Ok(out)
}

/// CE plus Dice under the same weights.
pub fn ce_dice<T: Scalar>(tape: &mut Tape<T>, y: &[LabelMap], p: Var, w: &Tensor<T>) -> Result<Var> {
    let ce = ce_loss(tape, y, p, w)?;
    let dice = dice_loss(tape, y, p, w)?;
    tape.add(ce, dice)
}

/// CE + Dice of both models' labeled predictions against ground truth.
pub fn supervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_x_ut: Var,
    p_x_ms: Var,
    y_w: &[LabelMap],
) -> Result<Var> {
    let shape = tape.shape(p_x_ut).to_vec();
    if shape != tape.shape(p_x_ms) {
        return Err(Error::shape(
            "supervised_loss",
            format!("{:?} vs {:?}", shape, tape.shape(p_x_ms)),
        ));
    }
    let ones = Tensor::ones(&[shape[0], 1, shape[2], shape[3]]);
    let a = ce_dice(tape, y_w, p_x_ut, &ones)?;
    let b = ce_dice(tape, y_w, p_x_ms, &ones)?;
    tape.add(a, b)
}

/// CE + Dice of both students' composed-view predictions against the
/// ensembled pseudo-label, weighted by the confidence map.
pub fn unsupervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q_c_en: &[LabelMap],
    p_c_ut: Var,
    p_c_ms: Var,
    w_c_en: &Tensor<T>,
) -> Result<Var> {
    if tape.shape(p_c_ut) != tape.shape(p_c_ms) {
        return Err(Error::shape(
            "unsupervised_loss",
            format!("{:?} vs {:?}", tape.shape(p_c_ut), tape.shape(p_c_ms)),
        ));
    }
    let a = ce_dice(tape, q_c_en, p_c_ut, w_c_en)?;
    let b = ce_dice(tape, q_c_en, p_c_ms, w_c_en)?;
    tape.add(a, b)
}

/// Consensus and divergence regions of two predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks<T> {
    /// `1(argmax P_ut = argmax P_ms)`, `N×1×H×W`.
    pub m_consensus: Tensor<T>,
    pub m_divergence: Tensor<T>,
}

pub fn region_masks<T: Scalar>(p_c_ut: &Tensor<T>, p_c_ms: &Tensor<T>) -> Result<RegionMasks<T>> {
    p_c_ut.expect_same_shape("region_masks", p_c_ms)?;
    let (n, _, h, w) = p_c_ut.dims4("region_masks")?;
    let a = p_c_ut.argmax_channels()?;
    let b = p_c_ms.argmax_channels()?;
    let mut consensus = Vec::with_capacity(n * h * w);
    for (la, lb) in a.iter().zip(&b) {
        consensus.extend(la.data.iter().zip(&lb.data).map(|(x, y)| if x == y { T::one() } else { T::zero() }));
    }
    let m_consensus = Tensor::new(vec![n, 1, h, w], consensus)?;
    let m_divergence = m_consensus.map(|v| T::one() - v);
    Ok(RegionMasks { m_consensus, m_divergence })
}

fn region_constant<T: Scalar>(
    tape: &mut Tape<T>,
    op: &'static str,
    p: Var,
    q: Var,
    m: &Tensor<T>,
) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if shape != tape.shape(q) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", shape, tape.shape(q))));
    }
    if shape.len() != 4 || m.shape() != [shape[0], 1, shape[2], shape[3]] {
        return Err(Error::shape(op, format!("mask {:?} for {:?}", m.shape(), shape)));
    }
    Ok(tape.constant(m.expand_channels(shape[1])?))
}

/// `−(1/S) Σ (P_ut log P_ut + P_ms log P_ms) ⊙ M_c`.
pub fn consensus_entropy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_c_ut: Var,
    p_c_ms: Var,
    m_c: &Tensor<T>,
    norm: Normalizer,
) -> Result<Var> {
    let mask = region_constant(tape, "consensus_entropy_loss", p_c_ut, p_c_ms, m_c)?;
    let s = norm.count(tape.shape(p_c_ut));
    let mut terms = Vec::with_capacity(2);
    for p in [p_c_ut, p_c_ms] {
        let logp = tape.log(p);
        terms.push(tape.mul(p, logp)?);
    }
    let both = tape.add(terms[0], terms[1])?;
    let masked = tape.mul(both, mask)?;
    let total = tape.sum(masked);
    Ok(tape.mul_scalar(total, T::lit(-1.0 / s as f64)))
}

/// `(1/S) Σ (P_ut − P_ms)² ⊙ M_d`.
pub fn divergence_mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_c_ut: Var,
    p_c_ms: Var,
    m_d: &Tensor<T>,
    norm: Normalizer,
) -> Result<Var> {
    let mask = region_constant(tape, "divergence_mse_loss", p_c_ut, p_c_ms, m_d)?;
    let s = norm.count(tape.shape(p_c_ut));
    let diff = tape.sub(p_c_ut, p_c_ms)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked);
    Ok(tape.mul_scalar(total, T::lit(1.0 / s as f64)))
}

/// `λ(t) = exp(−5(1 − t/t_max))`, equal to 1 from `t_max` on.
pub fn warmup_lambda(t: usize, t_max: usize) -> f64 {
    if t_max == 0 || t >= t_max {
        return 1.0;
    }
    (-5.0 * (1.0 - t as f64 / t_max as f64)).exp()
}

/// `L_x + λ(t)·(L_u + L_c + L_d)`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_x: Var,
    l_u: Var,
    l_c: Var,
    l_d: Var,
    t: usize,
    t_max: usize,
) -> Result<Var> {
    let ucd = tape.add(l_u, l_c)?;
    let ucd = tape.add(ucd, l_d)?;
    let weighted = tape.mul_scalar(ucd, T::lit(warmup_lambda(t, t_max)));
    tape.add(l_x, weighted)
}
