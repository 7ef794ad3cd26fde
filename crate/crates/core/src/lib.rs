pub mod audio;
pub mod channel_blocks;
pub mod datagen;
pub mod error;
pub mod evalcli;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objective;
pub mod spectral_codec;
pub mod tf_blocks;
pub mod training;

pub use error::{Error, Result};
