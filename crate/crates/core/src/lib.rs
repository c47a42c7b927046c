//! Disentangled-attention language models on a small reverse-mode autodiff
//! engine, with naive and gather-based score kernels, an enhanced mask
//! decoder, span-masked pre-training and embedding-space adversarial
//! regularisation.

pub mod attention;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod nn;
pub mod par;
pub mod relpos;
pub mod run;
pub mod sift;
pub mod tape;
pub mod tensor;
pub mod trainer;
