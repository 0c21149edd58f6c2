//! Generalized attention: multi-brain heads that score pairs of sequence
//! elements through feature-mapped products of their components, an
//! attention branch driven by corpus-gap-aware relative positions, and the
//! reference scaled dot-product head they reduce to.

pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod error;
pub mod finite_diff;
pub mod gam;
pub mod model;
pub mod position;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod train;
pub mod verify;

pub use baseline::{baseline_head, baseline_scores, compose_b, BaselineHeadParams, InputSequence};
pub use config::{Checkpoint, RunConfig};
pub use error::{GamError, Result};
pub use finite_diff::finite_diff_grad;
pub use gam::{
    apply_feature_map, brain_scores, gam_attention, gam_forward, gam_forward_detailed, gam_head,
    realize_mixture, FeatureMap, GamHead, GamHeadParams, GamModelConfig, MixtureSpec,
};
pub use model::{cross_entropy, Example, LanguageModel, LogitModel, ModelSpec};
pub use position::{
    build_r, combine, embed_positions, position_attention, position_branch, CombinationSpec,
    PosBranchParams, PositionTransform, RelPosVectors, TokenWithLocation,
};
pub use task::{gen_batch, TaskSpec};
pub use tensor::{contract, masked_softmax_rows, signed_pow, GradResult, Mask, ParamSet, Tensor};
pub use train::{evaluate, train, train_from, Metric, TrainConfig, TrainOutcome};
