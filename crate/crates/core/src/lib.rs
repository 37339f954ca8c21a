//! Nash and mean-field equilibria of linear-quadratic games with Volterra costs.

pub mod cli;
pub mod error;
pub mod grid_ops;
pub mod signals;
pub mod fredholm;
pub mod nplayer;
pub mod meanfield;
pub mod model_builders;
pub mod oracle;

pub use error::{Error, Result};
