//! Bidirectional transformer encoder over reaction SMILES tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{key_padding_mask, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

/// Post-norm block: `ln(x + attn(x))`, then `ln(x + ffn(x))`.
#[derive(Debug, Clone)]
struct PostNormBlock {
    attn: MultiHeadAttention,
    ln_attn: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct SeqEncoder {
    pub config: SeqEncoderConfig,
    pub embed: String,
    pub positions: String,
    blocks: Vec<PostNormBlock>,
}

/// Encoder output plus per-layer, per-head attention probabilities.
pub struct EncoderTrace<'a, T: Scalar> {
    pub output: Var<'a, T>,
    pub attention: Vec<Vec<Var<'a, T>>>,
    pub truncated: bool,
}

impl SeqEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: SeqEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.width;
        let embed = format!("{prefix}.embed");
        let positions = format!("{prefix}.positions");
        store.init_normal(&embed, &[config.vocab_size, c], 0.5, rng);
        store.init_normal(&positions, &[config.max_len, c], 0.1, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.block{l}");
                Ok(PostNormBlock {
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c, config.heads, rng)?,
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), c),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), c, c * config.ffn_mult, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), c),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embed,
            positions,
            blocks,
        })
    }

    /// Encodes `tokens` into `[max_len × width]`. Tokens equal to `pad` are
    /// masked out as keys and zeroed in the output, as are rows past the
    /// input. Inputs longer than `max_len` are truncated with a warning.
    pub fn encode_traced<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        tokens: &[usize],
        pad: usize,
    ) -> Result<EncoderTrace<'a, T>> {
        let n = self.config.max_len;
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token list".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let truncated = tokens.len() > n;
        if truncated {
            log::warn!("reaction of {} tokens truncated to {n}", tokens.len());
        }
        let tokens = &tokens[..tokens.len().min(n)];
        let visible: Vec<bool> = tokens.iter().map(|&t| t != pad).collect();
        if !visible.iter().any(|&v| v) {
            return Err(Error::Invalid("token list is all padding".into()));
        }
        let l = tokens.len();
        let mask = key_padding_mask(l, &visible);
        let mask = visible.iter().any(|v| !v).then_some(mask.as_slice());
        let pos: Vec<usize> = (0..l).collect();
        let mut x = tape
            .param(&self.embed)?
            .gather_rows(tokens)?
            .add(tape.param(&self.positions)?.gather_rows(&pos)?)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let kv = b.attn.key_values(tape, x)?;
            let (a, probs) = b.attn.attend_traced(tape, x, kv, mask)?;
            x = b.ln_attn.forward(tape, x.add(a)?)?;
            x = b.ln_ffn.forward(tape, x.add(b.ffn.forward(tape, x)?)?)?;
            attention.push(probs);
        }
        // zero padded rows inside the input, then append zero rows up to N
        if mask.is_some() {
            let keep: Vec<f64> = visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let c = self.config.width;
            let m: Vec<T> = keep
                .iter()
                .flat_map(|&k| std::iter::repeat_n(T::from_f64_lossy(k), c))
                .collect();
            x = x.mul(tape.constant(crate::tensor::Tensor::from_vec(&[l, c], m)?))?;
        }
        let output = if l < n {
            concat_rows(&[x, tape.zeros(&[n - l, self.config.width])])?
        } else {
            x
        };
        Ok(EncoderTrace {
            output,
            attention,
            truncated,
        })
    }

    pub fn encode<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        tokens: &[usize],
        pad: usize,
    ) -> Result<Var<'a, T>> {
        Ok(self.encode_traced(tape, tokens, pad)?.output)
    }
}
