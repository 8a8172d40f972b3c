//! The masked-prediction Transformer encoder: pre-LN blocks over frame
//! features, span masking, masked cross-entropy and early exit.

mod checkpoint;
mod config;
mod forward;
mod masking;
mod train;
mod weights;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, file_hash, load_checkpoint, save_checkpoint, weights_hash, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Activation, EncoderConfig, FramePeriod, MaskingSpec, NormPlacement, Positional};
pub use forward::{
    encode, encode_prefix, forward, masked_ce_loss, positional_encoding, ForwardGraph, ForwardSpec, LayerOutputs,
};
pub use masking::{sample_mask, sample_nonempty_mask};
pub use train::{eval_masked_loss, eval_masks, pretrain, PretrainConfig};
pub use weights::{EncoderVars, EncoderWeights, LayerNormParams, LayerVars, LayerWeights, Linear, LinearVars, NormVars};

pub(crate) use train::{cluster_labels, masked_training, train_batch, EpochSampler};
