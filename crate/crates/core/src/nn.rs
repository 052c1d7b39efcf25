//! Layers shared by the encoders, projectors and decoder. Each layer only
//! stores parameter names; values live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{concat_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in × out]`, Gaussian with std `1/√in`; bias zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.init_normal(&weight, &[in_dim, out_dim], (in_dim as f64).powf(-0.5), rng);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[out_dim]));
            b
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        if x.cols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape(),
                right: vec![self.in_dim, self.out_dim],
            });
        }
        let y = x.matmul(tape.param(&self.weight)?)?;
        match &self.bias {
            Some(b) => y.add_row(tape.param(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(&gain, Tensor::ones(&[dim]));
        store.insert(&bias, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.layer_norm(tape.param(&self.gain)?, tape.param(&self.bias)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Projected keys and values, reusable across queries.
#[derive(Debug, Clone, Copy)]
pub struct KeyValues<'a, T: Scalar> {
    pub keys: Var<'a, T>,
    pub values: Var<'a, T>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn key_values<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
    ) -> Result<KeyValues<'a, T>> {
        Ok(KeyValues {
            keys: self.key.forward(tape, x)?,
            values: self.value.forward(tape, x)?,
        })
    }

    /// Attends queries from `x` over `kv`. `mask` is `[rows(x) × rows(kv)]`,
    /// row-major, `true` = visible. Also returns each head's attention
    /// probabilities.
    pub fn attend_traced<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
        kv: KeyValues<'a, T>,
        mask: Option<&[bool]>,
    ) -> Result<(Var<'a, T>, Vec<Var<'a, T>>)> {
        let q = self.query.forward(tape, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.keys, kv.values)
            } else {
                (
                    q.slice_cols(h * dh, dh)?,
                    kv.keys.slice_cols(h * dh, dh)?,
                    kv.values.slice_cols(h * dh, dh)?,
                )
            };
            let p = qh.matmul_nt(kh)?.scale(scale).softmax(mask)?;
            outs.push(p.matmul(vh)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            concat_cols(&outs)?
        };
        Ok((self.output.forward(tape, merged)?, probs))
    }

    pub fn attend<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
        kv: KeyValues<'a, T>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'a, T>> {
        Ok(self.attend_traced(tape, x, kv, mask)?.0)
    }

    pub fn self_attend<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'a, T>> {
        let kv = self.key_values(tape, x)?;
        self.attend(tape, x, kv, mask)
    }
}

/// Two-layer position-wise network with SiLU activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let h = self.up.forward(tape, x)?.silu();
        self.down.forward(tape, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct PreNormBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl PreNormBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng),
        })
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'a, T>> {
        let n = self.ln_attn.forward(tape, x)?;
        let x = x.add(self.attn.self_attend(tape, n, mask)?)?;
        self.feed_forward(tape, x)
    }

    /// The second half of the block, exposed for callers that handle
    /// attention themselves.
    pub fn feed_forward<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        x: Var<'a, T>,
    ) -> Result<Var<'a, T>> {
        let n = self.ln_ffn.forward(tape, x)?;
        x.add(self.ffn.forward(tape, n)?)
    }
}

/// Square mask letting every query see every key whose flag is set.
pub fn key_padding_mask(queries: usize, visible: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(queries * visible.len());
    for _ in 0..queries {
        m.extend_from_slice(visible);
    }
    m
}
