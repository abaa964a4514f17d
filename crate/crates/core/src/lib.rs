pub mod cli;
pub mod coca;
pub mod data_io;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod prompting;
pub mod segmentation;
pub mod supervised;
pub mod wsi;
pub mod zeroshot;

pub use embedding::Embedding;
pub use error::{Error, Result};
