//! SGD with momentum and AdamW over flat parameter lists.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adamw {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    /// SGD defaults of the conventional network.
    pub fn sgd_default() -> Self {
        OptimizerConfig::SgdMomentum {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    /// AdamW defaults of the adapted foundation network.
    pub fn adamw_default() -> Self {
        OptimizerConfig::Adamw {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adamw { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new_lr: f64) -> Self {
        match &mut self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adamw { lr, .. } => {
                *lr = new_lr
            }
        }
        self
    }
}

/// Per-parameter optimizer memory.
///
/// `first` holds the SGD velocity or the AdamW first moment; `second` is
/// only populated for AdamW.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure_slots(&mut self, params: &[&mut Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(self.config, OptimizerConfig::Adamw { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} slots for {} parameters", self.first.len(), params.len()),
            ));
        }
        for (slot, p) in self.first.iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("slot {:?} vs parameter {:?}", slot.shape(), p.shape()),
                ));
            }
        }
        Ok(())
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                p.expect_same_shape("optimizer", g)?;
            }
        }
        self.ensure_slots(params)?;
        self.step += 1;
        match self.config {
            OptimizerConfig::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => {
                let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let pd = p.data_mut();
                    let vd = v.data_mut();
                    for i in 0..pd.len() {
                        let gi = g.map_or(T::zero(), |g| g.data()[i]);
                        vd[i] = mu * vd[i] + gi;
                        pd[i] = pd[i] - lr * (vd[i] + wd * pd[i]);
                    }
                }
            }
            OptimizerConfig::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let bc1 = T::lit(1.0 - beta1.powi(t));
                let bc2 = T::lit(1.0 - beta2.powi(t));
                let (lr, b1, b2, eps, wd) = (
                    T::lit(lr),
                    T::lit(beta1),
                    T::lit(beta2),
                    T::lit(eps),
                    T::lit(weight_decay),
                );
                let one = T::one();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let pd = p.data_mut();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let gi = g.map_or(T::zero(), |g| g.data()[i]);
                        md[i] = b1 * md[i] + (one - b1) * gi;
                        vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        pd[i] = pd[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
