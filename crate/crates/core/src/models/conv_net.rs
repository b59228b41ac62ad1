use rand::Rng;

use super::layers::{ConvNormRelu, Head};
use super::net::SegNet;
use super::params::{Bound, ParamSet};
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default channel widths of the encoder stages.
pub const CONV_WIDTHS: [usize; 3] = [16, 32, 64];

/// Small U-shaped encoder-decoder trained from scratch at full resolution.
///
/// Three conv-norm-ReLU stages with 2× max-pooling in between, a mirrored
/// decoder that upsamples bilinearly and concatenates the skip features,
/// and a 1×1 head.
#[derive(Clone, Debug)]
pub struct ConvSegNet<T> {
    params: ParamSet<T>,
    classes: usize,
    widths: [usize; 3],
    enc: [ConvNormRelu; 3],
    dec: [ConvNormRelu; 2],
    head: Head,
}

impl<T: Scalar> ConvSegNet<T> {
    pub fn new<R: Rng>(classes: usize, widths: [usize; 3], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let [w0, w1, w2] = widths;
        let enc = [
            ConvNormRelu::new(&mut params, "enc0", 1, w0, rng),
            ConvNormRelu::new(&mut params, "enc1", w0, w1, rng),
            ConvNormRelu::new(&mut params, "enc2", w1, w2, rng),
        ];
        let dec = [
            ConvNormRelu::new(&mut params, "dec1", w2 + w1, w1, rng),
            ConvNormRelu::new(&mut params, "dec0", w1 + w0, w0, rng),
        ];
        let head = Head::new(&mut params, "head", w0, classes + 1, rng);
        Self {
            params,
            classes,
            widths,
            enc,
            dec,
            head,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }
}

impl<T: Scalar> SegNet<T> for ConvSegNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h, w)
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "conventional network needs spatial size divisible by 4, got {h}×{w}"
            )));
        }
        Ok(())
    }

    fn forward_bound(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
        let e0 = self.enc[0].forward(tape, b, x, b.var(self.enc[0].kernel))?;
        let p0 = tape.maxpool2(e0)?;
        let e1 = self.enc[1].forward(tape, b, p0, b.var(self.enc[1].kernel))?;
        let p1 = tape.maxpool2(e1)?;
        let e2 = self.enc[2].forward(tape, b, p1, b.var(self.enc[2].kernel))?;
        let u1 = tape.bilinear_resize(e2, h / 2, w / 2)?;
        let c1 = tape.concat_channels(u1, e1)?;
        let d1 = self.dec[0].forward(tape, b, c1, b.var(self.dec[0].kernel))?;
        let u0 = tape.bilinear_resize(d1, h, w)?;
        let c0 = tape.concat_channels(u0, e0)?;
        let d0 = self.dec[1].forward(tape, b, c0, b.var(self.dec[1].kernel))?;
        self.head.forward(tape, b, d0)
    }
}
