//! Sparse linear regression with variable selection by vote.
//!
//! Several penalized loss functions are fitted independently; a predictor is
//! kept when enough of them give it a nonzero coefficient. The kept variables
//! are then refitted under one or more unpenalized losses and the refits are
//! combined with variance-minimizing weights.

pub mod dataprep;
pub mod error;
pub mod lincore;
pub mod optweight;
pub mod parallel;
pub mod pensolve;
pub mod simbench;
pub mod voteselect;

pub use error::{Error, Result};
pub use lincore::{Dataset, LossSpec, SparseFit};
