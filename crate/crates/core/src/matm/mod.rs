//! Masked acoustic token model: a bidirectional transformer over token
//! grids trained on the cloze task, with low-rank adapters for finetuning.
//!
//! Everything runs in `f64` with a hand-written backward pass.

mod lora;
mod model;
mod train;
mod weights;

pub use lora::{merge_lora, LoraAdapter, LoraConfig, LoraPair, Projection};
pub use model::{
    apply_lora, extract_embedding, forward, hidden_states, masked_loss, softmax_logits, token_embedding_pool, Grads, LossStats, Model,
};
pub use train::{
    adapter_step, evaluate, finetune, mask_random_columns, train, train_step, AdamW, MaskRate, StepStats, TrainConfig,
    TrainReport,
};
pub use weights::{LayerWeights, MatmConfig, MatmWeights, ParamMut, ParamRef};
