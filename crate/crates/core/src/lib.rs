//! Functional-network prior-guided mixture-of-experts decoder.
//!
//! The pipeline maps parcellated brain feature vectors onto a semantic
//! embedding space. Layer-1 routing is regularized toward a one-hot network
//! prior, fourteen data-driven experts refine the fused tokens, and the
//! pooled output is aligned to text and image targets with geometric,
//! contrastive and diffusion-prior objectives.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense tensors, reverse-mode tape, seeded RNG, gradient checks.
//! - [`datagen`]: synthetic parcellated dataset and the preprocessing chain.
//! - [`router`]: layer-1 logits, prior, scheduled KL, capacity and dispatch.
//! - [`experts`]: layer-1 and layer-2 expert banks, fusion, pooling, heads.
//! - [`losses`]: cosine, MSE, SoftCLIP and the total objective.
//! - [`prior`]: miniature diffusion prior over target embeddings.
//! - [`stroute`]: timestep-gated granularity routing and spatial cross-attention.
//! - [`trainer`]: optimization loop, evaluation, ablations, checkpoints.
//! - [`interpret`]: expert/patch similarity heatmaps and routing contributions.

pub mod datagen;
pub mod error;
pub mod experts;
pub mod interpret;
pub mod losses;
pub mod numerics;
pub mod prior;
pub mod router;
pub mod stroute;
pub mod trainer;

pub use error::{FpedError, Result};
pub use numerics::{Tensor, Tape, Var};

/// Number of first-layer experts, one per functional network.
pub const NUM_NETWORKS: usize = 7;

/// Length of the assembled feature vector.
pub const FEATURE_LEN: usize = 4096;

/// Short names of the seven functional networks, in label order.
pub const NETWORK_NAMES: [&str; NUM_NETWORKS] = ["V", "SM", "DA", "VA", "L", "C", "DM"];
