//! Transformer building blocks: linear maps, layer norm, multi-head
//! attention (self, causal, cross), MLP, the patch-embedding vision encoder
//! and the causal language decoder.

mod attention;
mod block;
mod decoder;
mod encoder;
mod linear;

pub use attention::{AttentionBlock, AttentionMode};
pub use block::{LayerNorm, Mlp, TransformerBlock};
pub use decoder::LanguageDecoder;
pub use encoder::{patchify, VisualEncoder};
pub use linear::LinearMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub(crate) fn normal_tensor(rng: &mut impl Rng, dims: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let numel = dims.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(dims.to_vec(), data).expect("finite normal samples")
}

/// Positional embedding init scale.
pub(crate) const POS_STD: f64 = 0.02;

#[cfg(test)]
mod tests;
