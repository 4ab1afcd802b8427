pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gcn;
pub mod head;
pub mod model;
pub mod nn;
pub mod rng;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
