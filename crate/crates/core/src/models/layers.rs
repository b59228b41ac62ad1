use rand::Rng;

use super::params::{Bound, ParamId, ParamRole, ParamSet};
use crate::engine::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// 3×3 convolution (no bias) → instance norm → ReLU.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvNormRelu {
    pub kernel: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl ConvNormRelu {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * 9) as f64;
        let kernel = params.push_uniform(
            format!("{name}.weight"),
            &[cout, cin, 3, 3],
            (6.0 / fan_in).sqrt(),
            rng,
        );
        let gamma = params.push(format!("{name}.gamma"), Tensor::ones(&[cout]), ParamRole::Trainable);
        let beta = params.push(format!("{name}.beta"), Tensor::zeros(&[cout]), ParamRole::Trainable);
        Self {
            kernel,
            gamma,
            beta,
            cin,
            cout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var, kernel: Var) -> Result<Var> {
        let y = tape.conv2d(x, kernel, None, 1, 1)?;
        let y = tape.instance_norm(y, b.var(self.gamma), b.var(self.beta))?;
        Ok(tape.relu(y))
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.kernel, self.gamma, self.beta]
    }
}

/// 1×1 convolution with bias producing class logits.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Head {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = params.push_uniform(
            format!("{name}.weight"),
            &[classes, cin, 1, 1],
            (1.0 / cin as f64).sqrt(),
            rng,
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[classes]), ParamRole::Trainable);
        Self { kernel, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, b.var(self.kernel), Some(b.var(self.bias)), 1, 0)
    }

    /// Zero kernel and bias, so every pixel gets identical logits.
    pub fn zero<T: Scalar>(&self, params: &mut ParamSet<T>) {
        for id in [self.kernel, self.bias] {
            params.get_mut(id).value.data_mut().fill(T::zero());
        }
    }
}
