//! Policy-gradient fine-tuning of discrete diffusion models on small token spaces.
//!
//! Modules, bottom up: [`ctmc`] (generators, schedules, kernels, reverse rates),
//! [`score`] (tabular and exact concrete scores), [`oracle`] (exhaustive ground
//! truth), [`sampler`] (tau-leaping, correctors), [`estimators`] (SNIS,
//! REINFORCE, clipped surrogates, path-KL), [`implicit`] (sparsemax and the
//! rank-one solve), [`trainer`] (pretraining and the fine-tuning loop),
//! [`config`] (file format) and [`verify`] (the oracle-backed invariant suite).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ctmc;
pub mod error;
pub mod estimators;
pub mod implicit;
pub mod oracle;
pub mod sampler;
pub mod score;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `s`.
pub(crate) fn hash_hex(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
