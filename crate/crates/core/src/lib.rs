pub mod attention;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod indicators;
pub mod model;
mod init;
pub mod numerics;

pub use error::{Error, Result};
pub use init::mix_seed;
