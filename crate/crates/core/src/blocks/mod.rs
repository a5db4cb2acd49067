//! Mamba blocks and the models assembled from them.

mod attention;
mod config;
mod conv;
mod mamba;
mod model;

pub use attention::{
    attention_on_tape, cross_attention_forward, multi_head_attention, reference_self_attention, AttentionOutput,
    CrossAttention,
};
pub use config::{BlockConfig, BlockVariant};
pub use conv::{causal_conv1d, conv_on_tape};
pub use mamba::{
    bimamba_encoder_forward, decoder_block_forward, mamba_block_forward, DecoderLayer, EncoderLayer, MambaBlock, Norm,
    SsmParamIds, NORM_EPS,
};
pub use model::{DecoderStack, ModelConfig, SequenceModel};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lifts `[L, D]` to `[1, L, D]`; the flag says whether to squeeze back.
pub(crate) fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match *x.shape() {
        [l, d] => Ok((x.reshape(&[1, l, d])?, true)),
        [_, _, _] => Ok((x.clone(), false)),
        _ => Err(Error::contract(format!("expected [L, D] or [B, L, D], got {:?}", x.shape()))),
    }
}

pub(crate) fn unbatch(x: &Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        let (_, l, d) = x.dims3("unbatch")?;
        x.reshape(&[l, d])
    } else {
        Ok(x.clone())
    }
}
