//! A small causal language model with hand-written gradients, the memory
//! layer in all its selector variants, Adam, and the training loop.

mod checkpoint;
mod data;
mod gradcheck;
mod layers;
mod loss;
mod model;
mod optim;
mod params;
mod sffn;
mod trainer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use data::{byte_tokens, TokenSplits};
pub use gradcheck::{
    check_case, default_grad_cases, grad_check_suite, grad_error, GradCheckCase, GradCheckReport,
    ParamCheck, GRAD_ABS_FLOOR, GRAD_EPS, GRAD_TOL,
};
pub use loss::{scale_expert_grad, scale_expert_grads, switch_aux_loss, LossReport};
pub use model::{Batch, MemoryConfig, Model, ModelConfig, ModelTrace};
pub use optim::{OptimConfig, OptimState};
pub use params::{Grads, ParamId, ParamRole, ParamStore};
pub use sffn::{memory_layer_backward, ForwardCtx, Mode, SffnLayer, SffnTrace};
pub use trainer::{
    metrics_csv, moving_average, train_lm, MetricsRow, TrainConfig, TrainRun, Trainer,
    METRICS_HEADER,
};
