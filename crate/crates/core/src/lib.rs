//! Speaker verification on top of frozen, precomputed multi-layer SSL features.
//!
//! The crate covers the whole downstream path:
//!
//! * [`features`]: the `SVFT` binary feature container, CSV manifests and a
//!   synthetic multi-layer corpus generator.
//! * [`trials`]: trial-list construction (duration filter, all pairs,
//!   negative down-sampling) and nested speaker subsets.
//! * [`pooling`]: learnable layer-weighted sum plus statistics, attentive
//!   statistics and channel/context-dependent statistics pooling, each with
//!   analytic gradients.
//! * [`head`]: the downstream embedding head (optional time-dilated frame
//!   encoder, pooling, affine embedding), parameter counting and checkpoints.
//! * [`train`]: additive-margin softmax, AdamW and the training loop.
//! * [`eval`]: cosine scoring, EER, zero-shot layer probing, relative
//!   improvement and Spearman rank correlation.
//! * [`gradcheck`]: central finite-difference checks for every trainable
//!   operation.

pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod head;
pub mod pooling;
pub mod tensor;
pub mod train;
pub mod trials;

pub use error::{Error, Result};
pub use eval::{
    compute_eer, cosine_score, rel_improvement, spearman_rho, zero_shot_eval, EvalReport, ScoreSet,
};
pub use features::{
    generate_synthetic_corpus, read_features, write_features, FeatureStack, Manifest, SynthSpec,
    UtteranceRecord,
};
pub use head::{param_count, FrameEncoderConfig, HeadConfig, HeadParams};
pub use pooling::{LayerWeights, PoolingConfig, PoolingKind};
pub use tensor::Mat;
pub use train::{
    adamw_step, amsoftmax_loss, select_best_checkpoint, train, AdamWConfig, AmSoftmaxParams,
    OptimState, TrainConfig,
};
pub use trials::{build_trials, read_trials, subset_speakers, write_trials, Trial, TrialList};
