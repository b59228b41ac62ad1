//! Conventional and foundation segmentation networks, EMA teachers and
//! checkpoints.

mod checkpoint;
mod conv_net;
mod ema;
mod foundation;
mod layers;
mod net;
mod params;
mod pretrain;

pub use checkpoint::Checkpoint;
pub use conv_net::{ConvSegNet, CONV_WIDTHS};
pub use ema::{TeacherStudentPair, EMA_DECAY};
pub use foundation::{FoundationSegNet, LoraAdapter, FOUNDATION_WIDTHS, LORA_RANK};
pub use net::{probs_on_tape, Forward, Mode, SegNet};
pub use params::{Bound, Param, ParamId, ParamRole, ParamSet};
pub use pretrain::{pretrain_foundation, PretrainConfig};
