//! Supervised momentum contrast: a query encoder trained with infoNCE against a
//! label-aware queue of key embeddings, a momentum-averaged key encoder, and a
//! classifier trained with focal loss on the detached fused vector.

mod checkpoint;
mod config;
mod loss;
mod model;
mod optim;
mod queue;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, write_checkpoint, CheckpointHeader,
    ParamEntry, CHECKPOINT_MAGIC,
};
pub use config::{
    cosine_lr, AlphaMode, DenominatorMode, FocalAlpha, OptimizerConfig, PositiveNormalization,
    Schedule, SuMoCoConfig,
};
pub use loss::{
    anchor_loss, focal_loss, focal_on_tape, focal_single, info_nce, info_nce_on_tape, AnchorLoss,
};
pub use model::{softmax, ClassifierHead, EncoderStack, Model, ENCODER_GROUP, HEAD_GROUP};
pub use optim::{momentum_update, Adam};
pub use queue::ContrastQueue;
pub use train::{
    prepare_sample, thread_count, thread_pool, train_loop, EpochMetrics, StepReport, TrainSample,
    Trainer,
};
