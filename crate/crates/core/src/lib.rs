//! Anchor attention: a linear-complexity approximation of softmax
//! self-attention built from a token/anchor bipartite Markov walk.
//!
//! - [`linalg`]: deterministic dense `f64` matrices.
//! - [`reference`]: exact quadratic softmax attention.
//! - [`anchor`]: affinities, the explicit and fast attention paths, the
//!   transfer matrix, the fixed-point anchor update and multi-head assembly.
//! - [`grad`]: analytic gradients, finite-difference checks and SGD.
//! - [`bench`]: FLOP accounting, timed sweeps and scaling fits.
//! - [`harness`]: configuration, datasets, the demo classifier and the
//!   command implementations behind the `anchorattn` binary.

pub mod anchor;
pub mod bench;
pub mod error;
pub mod grad;
pub mod harness;
pub mod linalg;
pub mod reference;

pub use anchor::{
    anchor_affinity, anchor_attention_explicit, anchor_attention_fast, anchor_fixed_point_step,
    build_transfer_matrix, multi_head_attention, AffinityState, AnchorParams, MultiHeadParams,
    TransferMatrix,
};
pub use error::{Error, Result, Shape};
pub use linalg::{matmul, scale_rows_by_inverse, softmax_rows, transpose, Matrix};
pub use reference::{
    project_tokens, vanilla_attention, vanilla_flops, AttentionInputs, ProjectionWeights,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere a seed is accepted.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
