//! SFT and DPO objectives, AdamW with warmup and linear decay, training
//! loops, and the finite-difference gradient checker.

mod config;
pub mod gradcheck;
pub mod loss;
mod optim;
mod run;

pub use config::{lr_at, warmup_steps, TrainConfig, DESK_SFT_LR};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{
    dpo_loss, dpo_loss_with_reference, dpo_terms, pair_logps, sft_loss, sft_sums, DpoTerms,
    EncodedPair,
};
pub use optim::{adamw_step, OptState};
pub use run::{
    mean_margin, pretrain, reference_logps, train_dpo, train_sft, train_sft_on, trainables_mut,
    StepLog, TrainReport, LORA_SEED_OFFSET,
};
