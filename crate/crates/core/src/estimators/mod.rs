//! Gradient and loss machinery: SNIS marginals, REINFORCE and importance-sampled
//! estimators, clipped surrogates, advantages, path-KL and first variations.

mod kl;
mod policy;
mod rewards;
mod snis;

pub use kl::{first_variation, path_kl, rate_divergence, Functional, PathKl};
pub use policy::{
    clipped_weight_ppo, group_advantages, grpo_advantages, is_gradient, is_ratio,
    reinforce_gradient, scope_targets, surrogate_loss, EmaBaseline, HForm, NeighborScope,
    RolloutBatch, SurrogateOutput, Variant,
};
pub use rewards::{Reward, RewardSpec, REWARD_NAMES};
pub use snis::{
    draw_snis_proposals, snis_marginal, SnisCache, SnisContext, SnisEntry, SnisEstimate, SnisMode,
    SnisSettings,
};
