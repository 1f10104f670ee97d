//! Training-free attention-token pruning for diffusion U-Nets.
//!
//! Importance scores come from a weighted PageRank over attention maps
//! ([`gwpr`]), the top scores pick the retained tokens ([`pruner`]), pruned
//! positions are refilled before convolutions ([`recovery`]), early denoising
//! steps can skip pruning in selected blocks ([`dsap`]), and [`costmodel`]
//! prices any schedule analytically.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attnmap;
pub mod costmodel;
pub mod dsap;
pub mod error;
pub mod flat;
pub mod gwpr;
pub mod harness;
pub mod io;
pub mod pruner;
pub mod recovery;
pub mod rng;

pub use attnmap::{average_heads, map_variance, validate_attention, AttentionMap, FeatureMap, HeadStack};
pub use error::{Error, Result};
pub use gwpr::{gwpr_score, GwprOptions, ImportanceScores, MapperKind};
pub use pruner::{apply_mask, build_mask, random_mask, PruneMask};
pub use recovery::{recover, RecoveryMethod};
