use rand::Rng;

use super::layers::{ConvNormRelu, Head};
use super::net::SegNet;
use super::params::{Bound, ParamId, ParamRole, ParamSet};
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default channel widths of the backbone stages.
pub const FOUNDATION_WIDTHS: [usize; 3] = [32, 64, 128];
/// Default adapter rank.
pub const LORA_RANK: usize = 4;

/// Low-rank update `scale · B·A` added to one frozen backbone kernel.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// Network that carries prior knowledge from supervised pretraining.
///
/// The input is upsampled 2× before a three-stage backbone (same topology as
/// the conventional encoder); a trainable decoder head turns the deepest
/// features into logits at half the original resolution. After
/// [`attach_adapters`](Self::attach_adapters) the backbone is frozen and
/// each backbone kernel is used as `W + scale·reshape(B·A)`.
#[derive(Clone, Debug)]
pub struct FoundationSegNet<T> {
    params: ParamSet<T>,
    classes: usize,
    widths: [usize; 3],
    backbone: [ConvNormRelu; 3],
    decoder: ConvNormRelu,
    head: Head,
    adapters: Option<[LoraAdapter; 3]>,
}

impl<T: Scalar> FoundationSegNet<T> {
    pub fn new<R: Rng>(classes: usize, widths: [usize; 3], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let [w0, w1, w2] = widths;
        let backbone = [
            ConvNormRelu::new(&mut params, "backbone0", 1, w0, rng),
            ConvNormRelu::new(&mut params, "backbone1", w0, w1, rng),
            ConvNormRelu::new(&mut params, "backbone2", w1, w2, rng),
        ];
        let decoder = ConvNormRelu::new(&mut params, "decoder", w2, w0, rng);
        let head = Head::new(&mut params, "head", w0, classes + 1, rng);
        Self {
            params,
            classes,
            widths,
            backbone,
            decoder,
            head,
            adapters: None,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn adapters(&self) -> Option<&[LoraAdapter; 3]> {
        self.adapters.as_ref()
    }

    pub fn is_adapted(&self) -> bool {
        self.adapters.is_some()
    }

    /// Ids of every backbone parameter (kernels and norm affines).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.iter().flat_map(|b| b.ids()).collect()
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    /// Freeze the backbone and attach rank-`rank` adapters with
    /// `A ~ U(±0.01/√r)`, `B = 0` and `scale = 1/r`.
    pub fn attach_adapters<R: Rng>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::Config("adapters already attached".into()));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        for id in self.backbone_ids() {
            self.params.set_role(id, ParamRole::Frozen);
        }
        let bound = 0.01 / (rank as f64).sqrt();
        let mut make = |i: usize, block: &ConvNormRelu| {
            let fan_in = block.cin * 9;
            let down = self
                .params
                .push_uniform(format!("backbone{i}.lora_a"), &[rank, fan_in], bound, rng);
            let up = self.params.push(
                format!("backbone{i}.lora_b"),
                Tensor::zeros(&[block.cout, rank]),
                ParamRole::Trainable,
            );
            LoraAdapter {
                down,
                up,
                rank,
                scale: 1.0 / rank as f64,
            }
        };
        let adapters = [
            make(0, &self.backbone[0]),
            make(1, &self.backbone[1]),
            make(2, &self.backbone[2]),
        ];
        self.adapters = Some(adapters);
        Ok(())
    }

    fn effective_kernel(&self, tape: &mut Tape<T>, b: &Bound, i: usize) -> Result<Var> {
        let block = &self.backbone[i];
        let base = b.var(block.kernel);
        let Some(adapters) = &self.adapters else {
            return Ok(base);
        };
        let a = adapters[i];
        let delta = tape.matmul(b.var(a.up), b.var(a.down))?;
        let delta = tape.mul_scalar(delta, T::lit(a.scale));
        let delta = tape.reshape(delta, &[block.cout, block.cin, 3, 3])?;
        tape.add(base, delta)
    }
}

impl<T: Scalar> SegNet<T> for FoundationSegNet<T> {
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
        (h / 2, w / 2)
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if (2 * h) % 8 != 0 || (2 * w) % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "foundation network needs the 2× upsampled size divisible by 8, got {h}×{w}"
            )));
        }
        Ok(())
    }

    fn forward_bound(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
        let mut feat = tape.bilinear_resize(x, 2 * h, 2 * w)?;
        for i in 0..3 {
            if i > 0 {
                feat = tape.maxpool2(feat)?;
            }
            let k = self.effective_kernel(tape, b, i)?;
            feat = self.backbone[i].forward(tape, b, feat, k)?;
        }
        let d = self
            .decoder
            .forward(tape, b, feat, b.var(self.decoder.kernel))?;
        self.head.forward(tape, b, d)
    }
}
