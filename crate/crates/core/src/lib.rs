//! Value-guided Monte Carlo tree search over action chunks.
//!
//! The crate is organised bottom-up:
//!
//! - [`envsim`]: the deterministic `ChunkGrid` manipulation environment with a
//!   sparse terminal reward.
//! - [`chunks`]: action chunks, the preset chunk library, flattened euclidean
//!   chunk distances and the softmax-over-distance proposal distributions.
//! - [`prior`]: a frozen surrogate policy that produces latent readouts and
//!   proposes chunks, with a tunable bias toward a decoy region.
//! - [`valuehead`]: a three-layer MLP value function trained with Adam on
//!   Monte Carlo returns.
//! - [`collect`]: prior rollouts, Monte Carlo targets and dataset files.
//! - [`search`]: PUCT-style tree search in prior-only (`vlaps`) and
//!   value-guided (`v-vlaps`) modes, plus the per-episode act loop.
//! - [`eval`]: the experiment harness (metrics tables, value traces, latent
//!   exports).

pub mod chunks;
pub mod collect;
pub mod envsim;
pub mod error;
pub mod eval;
pub mod prior;
pub mod rng;
pub mod search;
pub mod valuehead;

pub use error::{Error, Result};
