//! Global robustness certification and training for feed-forward ReLU
//! networks.

pub mod attack;
pub mod backend;
pub mod bnb;
pub mod error;
pub mod graph;
pub mod io;
pub mod lower;
pub mod matrix;
pub mod propagate;
pub mod relax;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
