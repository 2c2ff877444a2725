//! Sinkhorn normalization, linear assignment and the latent permutation
//! network.

mod assignment;
mod network;
mod sinkhorn;

pub use assignment::{hungarian_match, PermutationMatrix};
pub use network::{predict_next, GsMode, GsNetwork, GsPrediction, LatentPermutation};
pub use sinkhorn::{
    gumbel_sinkhorn_sample, row_col_residual, sinkhorn, sinkhorn_on_tape, DoublyStochasticMatrix,
    GumbelSinkhorn,
};
