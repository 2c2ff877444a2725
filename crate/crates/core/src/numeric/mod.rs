//! Dense matrices, seeded randomness and reverse-mode gradients.

mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use rng::{gumbel_from_uniform, sample_gumbel, RngStream};
pub use tape::{softmax_rows, Activation, NeighborLists, SparseMatrix, Tape, Var};

pub(crate) use tape::argmax;
