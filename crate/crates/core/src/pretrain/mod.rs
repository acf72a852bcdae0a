//! Masked next-frame feature alignment: a frozen teacher supplies per-frame
//! targets, the encoder sees a partially masked clip, and a causally masked
//! decoder predicts the teacher features of the following frame.

mod armask;
mod decoder;
mod loss;
mod mask;
mod teacher;
mod trainer;

pub use armask::{ar_allowed, build_ar_mask, ArMask};
pub use decoder::Decoder;
pub use loss::map_loss;
pub use mask::{mask_count, plan_mask, MaskPlan};
pub use teacher::{oracle_linear_entry, saliency, Teacher};
pub use trainer::{clip_loss, run_pretrain, Pretrainer};
