//! Uncompressed reference decoder: every step re-projects the whole sequence
//! and runs full causal attention from scratch.

use crate::attention::causal_attention;
use crate::engine::{GenerationConfig, Sampler};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::Model;

/// Next-token logits for the last position of `tokens`.
pub fn reference_logits<M: Model + ?Sized>(model: &M, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let c = model.config();
    let d = c.head_dim;
    let mut outputs = Vec::with_capacity(c.total_heads() * d);
    for (layer, head) in c.head_ids() {
        let (mut q, mut k, mut v) = (DenseMatrix::with_cols(d), DenseMatrix::with_cols(d), DenseMatrix::with_cols(d));
        for (p, &t) in tokens.iter().enumerate() {
            let proj = model.project(layer, head, p, t)?;
            q.push_row(&proj.q)?;
            k.push_row(&proj.k)?;
            v.push_row(&proj.v)?;
        }
        let (_, out) = causal_attention(&q, &k, &v, d)?;
        outputs.extend_from_slice(out.row(tokens.len() - 1));
    }
    Ok(model.logits(&outputs))
}

/// Generates `gen.max_new_tokens` tokens without any cache.
pub fn generate_reference<M: Model + ?Sized>(model: &M, prompt: &[u32], gen: &GenerationConfig) -> Result<Vec<u32>> {
    let mut sampler = Sampler::new(gen.sampling)?;
    let mut seq = prompt.to_vec();
    for _ in 0..gen.max_new_tokens {
        let next = match model.forced_token(seq.len()) {
            Some(t) => t,
            None => sampler.sample(&reference_logits(model, &seq)?)?,
        };
        seq.push(next);
    }
    Ok(seq.split_off(prompt.len()))
}
