//! Multi-agent graph Q-learning with Gumbel-Sinkhorn latent permutations.
//!
//! The crate is organized bottom-up:
//!
//! * [`numeric`] dense matrices, seeded RNG, a small reverse-mode tape.
//! * [`env`] Gather and Battle gridworlds.
//! * [`graph`] observation encoder, nearest-neighbor graphs, shift operators.
//! * [`gnn`] polynomial graph filters, multi-head graph attention, Q head.
//! * [`permutation`] Sinkhorn operator, linear assignment, Gumbel-Sinkhorn network.
//! * [`rl`] replay, epsilon-greedy control, losses, training loop, checkpoints.
//! * [`harness`] experiment configs, ablation matrix runs, CSV metrics, SVG plots.

pub mod env;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod numeric;
pub mod permutation;
pub mod rl;

pub use error::{Error, Result};
