//! Learned point cloud attribute codec.

pub mod autodiff;
pub mod blocks;
pub mod coder;
pub mod eval;
pub mod mathfn;
pub mod network;
pub mod pcio;
pub mod pipeline;
pub mod sparse;
pub mod tensor;
pub mod train;
