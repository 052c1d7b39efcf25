//! Perceiver-style projection of encoder outputs into a fixed number of
//! decoder-width tokens, and context assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, Tape, Var};
use crate::decoder::ContextTokens;
use crate::error::{Error, Result};
use crate::nn::{KeyValues, LayerNorm, Linear, MultiHeadAttention, PreNormBlock};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Width of the modality input rows.
    pub in_width: usize,
    /// Internal width C.
    pub width: usize,
    /// Decoder width C_llm.
    pub llm_width: usize,
    /// Output token count M.
    pub tokens: usize,
    /// Rows of `[inputs; projected words]` consumed by the token-axis
    /// resize; shorter inputs are zero-padded, longer ones truncated.
    pub capacity: usize,
    pub heads: usize,
    pub tower_depth: usize,
    pub ffn_mult: usize,
}

#[derive(Debug, Clone)]
pub struct PerceiverProjector {
    pub config: ProjectorConfig,
    pub latents: String,
    pub resize: String,
    pub input_proj: Linear,
    pub word_proj: Linear,
    pub ln_latents: LayerNorm,
    pub ln_inputs: LayerNorm,
    pub cross: MultiHeadAttention,
    pub tower: Vec<PreNormBlock>,
    pub ln_out: LayerNorm,
    pub out_proj: Linear,
}

impl PerceiverProjector {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: ProjectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.width;
        if config.tokens == 0 || config.capacity == 0 {
            return Err(Error::Config("projector needs positive tokens and capacity".into()));
        }
        let latents = format!("{prefix}.latents");
        store.init_normal(&latents, &[config.tokens, c], 1.0, rng);
        let resize = format!("{prefix}.resize");
        store.init_normal(&resize, &[config.tokens, config.capacity], (config.capacity as f64).powf(-0.5), rng);
        let tower = (0..config.tower_depth)
            .map(|l| {
                PreNormBlock::new(store, &format!("{prefix}.tower{l}"), c, config.heads, config.ffn_mult, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            latents,
            resize,
            input_proj: Linear::new(store, &format!("{prefix}.input_proj"), config.in_width, c, true, rng),
            word_proj: Linear::new(store, &format!("{prefix}.word_proj"), config.llm_width, c, true, rng),
            ln_latents: LayerNorm::new(store, &format!("{prefix}.ln_latents"), c),
            ln_inputs: LayerNorm::new(store, &format!("{prefix}.ln_inputs"), c),
            cross: MultiHeadAttention::new(store, &format!("{prefix}.cross"), c, config.heads, rng)?,
            tower,
            ln_out: LayerNorm::new(store, &format!("{prefix}.ln_out"), c),
            out_proj: Linear::new(store, &format!("{prefix}.out_proj"), c, config.llm_width, true, rng),
        })
    }

    /// Maps `x [n × in_width]` and the decoder word table `[V × C_llm]` to
    /// `[M × C_llm]`.
    pub fn project<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
        word_table: Var<'a, T>,
    ) -> Result<Var<'a, T>> {
        let cfg = &self.config;
        if x.cols() != cfg.in_width {
            return Err(Error::ShapeMismatch {
                op: "projector input",
                left: x.shape(),
                right: vec![cfg.in_width],
            });
        }
        if word_table.cols() != cfg.llm_width {
            return Err(Error::ShapeMismatch {
                op: "projector word table",
                left: word_table.shape(),
                right: vec![cfg.llm_width],
            });
        }
        let inputs = self.input_proj.forward(tape, x)?;
        let words = self.word_proj.forward(tape, word_table)?;
        let mut joined = concat_rows(&[inputs, words])?;
        let rows = joined.rows();
        if rows > cfg.capacity {
            joined = joined.slice_rows(0, cfg.capacity)?;
        } else if rows < cfg.capacity {
            joined = concat_rows(&[joined, tape.zeros(&[cfg.capacity - rows, cfg.width])])?;
        }
        let kv_rows = tape.param(&self.resize)?.matmul(joined)?;
        let latents = tape.param(&self.latents)?;
        let q = self.ln_latents.forward(tape, latents)?;
        let kv_in = self.ln_inputs.forward(tape, kv_rows)?;
        let KeyValues { keys, values } = self.cross.key_values(tape, kv_in)?;
        let mut h = latents.add(self.cross.attend(tape, q, KeyValues { keys, values }, None)?)?;
        for block in &self.tower {
            h = block.forward(tape, h, None)?;
        }
        let h = self.ln_out.forward(tape, h)?;
        self.out_proj.forward(tape, h)
    }
}

/// Concatenates `[smiles; graph; text]` along the token axis. Every row of
/// the result is visible to every other context row.
pub fn assemble_context<'a, T: Scalar>(
    smiles: Var<'a, T>,
    graph: Var<'a, T>,
    text: Option<Var<'a, T>>,
) -> Result<ContextTokens<'a, T>> {
    let mut parts = vec![smiles, graph];
    parts.extend(text);
    let w = smiles.cols();
    if let Some(bad) = parts.iter().find(|p| p.cols() != w) {
        return Err(Error::ShapeMismatch {
            op: "assemble_context",
            left: smiles.shape(),
            right: bad.shape(),
        });
    }
    let tokens = concat_rows(&parts)?;
    let len = tokens.rows();
    Ok(ContextTokens {
        tokens,
        mask: vec![true; len],
    })
}
