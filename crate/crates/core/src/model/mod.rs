//! Miniature decoder-only transformer.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::ModelConfig;
pub use network::{log_softmax_at, Network, Tape};
pub use params::{GradientSet, LayerParams, ModelParams, Proj, INIT_STD};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::tokenizer::frame;

/// `ln p(completion | prompt)` under the framing `[BOS] prompt [SEP] completion`.
///
/// The EOS that closes a framed sequence is not part of the score.
pub fn sequence_logprob<T: Scalar>(
    net: &Network<'_, T>,
    prompt_ids: &[u32],
    completion_ids: &[u32],
) -> Result<T> {
    let framed = frame(prompt_ids, completion_ids);
    let max_seq = net.params.config.max_seq;
    if framed.ids.len() > max_seq {
        return Err(Error::Length {
            len: framed.ids.len(),
            max_seq,
        });
    }
    if completion_ids.is_empty() {
        return Ok(T::zero());
    }
    let start = framed.completion_start();
    let scored = &framed.ids[..framed.ids.len() - 1];
    let (_, logp) = net.target_logprobs(scored, start)?;
    Ok(logp.into_iter().sum())
}

/// Per-token log-probabilities of each completion after the same prompt.
pub fn completion_token_logprobs<T: Scalar>(
    net: &Network<'_, T>,
    prompt_ids: &[u32],
    completion_ids: &[u32],
) -> Result<Vec<T>> {
    let framed = frame(prompt_ids, completion_ids);
    let max_seq = net.params.config.max_seq;
    if framed.ids.len() > max_seq {
        return Err(Error::Length {
            len: framed.ids.len(),
            max_seq,
        });
    }
    if completion_ids.is_empty() {
        return Ok(Vec::new());
    }
    let start = framed.completion_start();
    let (_, logp) = net.target_logprobs(&framed.ids[..framed.ids.len() - 1], start)?;
    Ok(logp)
}

/// Next-token log-softmax row after `[BOS] prompt [SEP]`.
pub fn next_token_logprobs<T: Scalar>(net: &Network<'_, T>, prompt_ids: &[u32]) -> Result<Vec<T>> {
    let framed = frame(prompt_ids, &[]);
    let max_seq = net.params.config.max_seq;
    if framed.ids.len() > max_seq {
        return Err(Error::Length {
            len: framed.ids.len(),
            max_seq,
        });
    }
    let ids = &framed.ids[..framed.ids.len() - 1];
    let tape = net.forward(ids, ids.len() - 1)?;
    let row = tape.logits_row(ids.len() - 1);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok(row.iter().map(|&v| v - lse).collect())
}
