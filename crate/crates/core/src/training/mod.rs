//! Losses, optimisation and the two training stages.
//!
//! Stage 1 ([`pretrain`]) learns a small encoder contrastively from view
//! pairs whose second view passed through the chaotic operator. Stage 2
//! ([`finetune`]) fuses that encoder with a supervised backbone through an
//! SE gate and trains the ensemble with cross-validation.

mod check;
mod finetune;
mod loss;
mod optim;
mod pretrain;

pub use check::composite_suite;
pub use finetune::{
    finetune, train_supervised, EnsembleModel, FinetuneConfig, FinetuneReport, FoldRun, HeadKind,
    SupervisedConfig, SUP_PREFIX,
};
pub use loss::{cross_entropy, nt_xent, nt_xent_value};
pub use optim::{collect_grads, cosine_lr, AdamWConfig, Grads, OptimState, ParamGroup};
pub use pretrain::{
    pretrain, pretrain_init_encoder, trace_csv, EpochRecord, PretrainConfig, PretrainOutcome,
    CHAOS_PREFIX,
};
