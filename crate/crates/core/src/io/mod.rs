//! Model and dataset files.

pub mod gmf;
pub mod idx;

pub use gmf::{load_model, save_model};
pub use idx::load_idx;
