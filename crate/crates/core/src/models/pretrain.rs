use serde::{Deserialize, Serialize};

use super::foundation::{FoundationSegNet, LORA_RANK};
use super::net::{probs_on_tape, Mode, SegNet};
use crate::data::{rng_for, stack_images, sub_seed, weak_augment, Sample};
use crate::engine::{OptimizerConfig, OptimizerState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synfoc::ce_dice;

/// Supervised pretraining schedule of the foundation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub adapter_rank: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            optimizer: OptimizerConfig::Adamw {
                lr: 2e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-4,
            },
            seed: 7,
            adapter_rank: LORA_RANK,
        }
    }
}

/// Train the whole network with CE + Dice on `corpus`, then freeze the
/// backbone and attach zero-initialized adapters. Returns the mean loss of
/// each epoch.
pub fn pretrain_foundation<T: Scalar>(
    net: &mut FoundationSegNet<T>,
    corpus: &[&Sample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining corpus".into()));
    }
    if net.is_adapted() {
        return Err(Error::Config("network already carries adapters".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(cfg.seed, &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| weak_augment(corpus[i], sub_seed(cfg.seed, &[epoch as u64, b as u64, i as u64])))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let images: Tensor<T> = stack_images(&refs)?.cast();
            let labels: Vec<_> = batch.iter().map(|s| s.label.clone()).collect();
            let mut tape = Tape::new();
            let (p, bound) = probs_on_tape(&*net, &mut tape, &images, Mode::Train)?;
            let (n, _, h, w) = images.dims4("pretrain")?;
            let loss = ce_dice(&mut tape, &labels, p, &Tensor::ones(&[n, 1, h, w]))?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    iteration: epoch,
                    batch_seed: sub_seed(cfg.seed, &[epoch as u64, b as u64]),
                    detail: "pretraining loss".into(),
                });
            }
            tape.backward(loss)?;
            let bound = bound.expect("train mode binds parameters");
            let (mut params, grads) = net.params_mut().trainable_with_grads(&tape, &bound);
            opt.step(&mut params, &grads)?;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    net.attach_adapters(cfg.adapter_rank, &mut rng_for(cfg.seed, &[u64::MAX]))?;
    Ok(epoch_losses)
}
