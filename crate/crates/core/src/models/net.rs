use super::params::{Bound, ParamSet};
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether a forward pass records for differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass that has been placed on a tape.
pub struct Forward {
    pub logits: Var,
    pub bound: Bound,
}

/// Segmentation network mapping `N×1×h×w` images to `N×(C+1)×h'×w'` logits.
pub trait SegNet<T: Scalar>: Clone {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Number of foreground classes `C`.
    fn classes(&self) -> usize;
    /// Logit resolution for an `h×w` input.
    fn output_size(&self, h: usize, w: usize) -> (usize, usize);
    fn check_input(&self, h: usize, w: usize) -> Result<()>;
    fn forward_bound(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<Var>;

    fn channels(&self) -> usize {
        self.classes() + 1
    }

    /// Bind parameters and run the network on constant `images`.
    fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Forward> {
        let (_, c, h, w) = images.dims4("forward")?;
        if c != 1 {
            return Err(Error::shape("forward", format!("expected 1 input channel, got {c}")));
        }
        self.check_input(h, w)?;
        let bound = self.params().bind(tape);
        let x = tape.constant(images.clone());
        let logits = self.forward_bound(tape, &bound, x)?;
        Ok(Forward { logits, bound })
    }

    /// Detached logits.
    fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let f = self.forward(&mut tape, images)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Detached probabilities at `h×w`, resized after the softmax.
    fn predict_probs(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = images.dims4("predict")?;
        self.predict_logits(images)?
            .softmax_channels()?
            .resize_bilinear(h, w)
    }
}

/// Forward in the given mode and return probabilities at input resolution,
/// on `tape` (train) or detached into a constant (eval).
pub fn probs_on_tape<T: Scalar, N: SegNet<T>>(
    net: &N,
    tape: &mut Tape<T>,
    images: &Tensor<T>,
    mode: Mode,
) -> Result<(Var, Option<Bound>)> {
    let (_, _, h, w) = images.dims4("forward")?;
    match mode {
        Mode::Train => {
            let f = net.forward(tape, images)?;
            let p = tape.softmax_channels(f.logits)?;
            let p = tape.bilinear_resize(p, h, w)?;
            Ok((p, Some(f.bound)))
        }
        Mode::Eval => {
            let p = net.predict_probs(images)?;
            Ok((tape.constant(p), None))
        }
    }
}
