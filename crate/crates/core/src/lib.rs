pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod cyclegan;
pub mod discriminator;
pub mod embedding;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod persona;
pub mod plug_and_play;
pub mod rl;
pub mod seq2seq;
pub mod toy;
pub mod trainer;

pub use error::{CoreError, Result};
