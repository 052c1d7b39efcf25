//! Tiny prefix-LM decoder with slot-classification heads and the
//! autoregressive generation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, Reduction, Tape, Var};
use crate::beam::{log_softmax, StepScorer};
use crate::error::{Error, Result};
use crate::nn::{key_padding_mask, KeyValues, LayerNorm, Linear, PreNormBlock};
use crate::params::ParamStore;
use crate::reaction::Slot;
use crate::scalar::Scalar;
use crate::vocab::{TokenVocab, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    /// Longest context plus prefix the positional table covers.
    pub max_positions: usize,
}

/// Fused input tokens `[L_ctx × C_llm]` and their visibility mask.
#[derive(Debug, Clone)]
pub struct ContextTokens<'a, T: Scalar> {
    pub tokens: Var<'a, T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> ContextTokens<'_, T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Per-layer keys/values of the context plus its final hidden states.
#[derive(Debug, Clone)]
pub struct ContextState<'a, T: Scalar> {
    pub kv: Vec<KeyValues<'a, T>>,
    pub output: Var<'a, T>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TinyDecoder {
    pub config: DecoderConfig,
    pub embed: String,
    pub positions: String,
    pub blocks: Vec<PreNormBlock>,
    pub ln_final: LayerNorm,
    pub lm_head: Linear,
}

impl TinyDecoder {
    /// Body parameters under `prefix`; the LM head under `head_prefix`
    /// so it can stay trainable while the body is frozen.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        head_prefix: &str,
        config: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.width;
        let embed = format!("{prefix}.embed");
        let positions = format!("{prefix}.positions");
        store.init_normal(&embed, &[config.vocab_size, c], 0.5, rng);
        store.init_normal(&positions, &[config.max_positions, c], 0.1, rng);
        let blocks = (0..config.layers)
            .map(|l| PreNormBlock::new(store, &format!("{prefix}.block{l}"), c, config.heads, config.ffn_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embed,
            positions,
            blocks,
            ln_final: LayerNorm::new(store, &format!("{prefix}.ln_final"), c),
            lm_head: Linear::new(store, &format!("{head_prefix}.lm"), c, config.vocab_size, true, rng),
        })
    }

    /// The token-embedding table `[V × C_llm]`.
    pub fn word_table<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>) -> Result<Var<'a, T>> {
        tape.param(&self.embed)
    }

    pub fn embed_tokens<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, ids: &[usize]) -> Result<Var<'a, T>> {
        self.word_table(tape)?.gather_rows(ids)
    }

    fn position_rows<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        start: usize,
        len: usize,
    ) -> Result<Var<'a, T>> {
        if start + len > self.config.max_positions {
            return Err(Error::IndexOutOfRange {
                what: "decoder position",
                index: start + len,
                bound: self.config.max_positions,
            });
        }
        tape.param(&self.positions)?.slice_rows(start, len)
    }

    /// Runs the context through every layer. Context rows attend only to
    /// visible context rows.
    pub fn forward_context<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        ctx: &ContextTokens<'a, T>,
    ) -> Result<ContextState<'a, T>> {
        let l = ctx.len();
        if ctx.tokens.cols() != self.config.width {
            return Err(Error::ShapeMismatch {
                op: "decoder context",
                left: ctx.tokens.shape(),
                right: vec![l, self.config.width],
            });
        }
        let mask = (!ctx.mask.iter().all(|&m| m)).then(|| key_padding_mask(l, &ctx.mask));
        let mut x = ctx.tokens.add(self.position_rows(tape, 0, l)?)?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n = b.ln_attn.forward(tape, x)?;
            let layer_kv = b.attn.key_values(tape, n)?;
            x = x.add(b.attn.attend(tape, n, layer_kv, mask.as_deref())?)?;
            x = b.feed_forward(tape, x)?;
            kv.push(layer_kv);
        }
        Ok(ContextState {
            kv,
            output: self.ln_final.forward(tape, x)?,
            mask: ctx.mask.clone(),
        })
    }

    /// Logits `[L × V]` for each prefix position. Prefix rows see every
    /// visible context row and the prefix causally.
    pub fn forward_prefix<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        state: &ContextState<'a, T>,
        prefix: &[usize],
    ) -> Result<Var<'a, T>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Invalid("decoder prefix must start with BOS".into()));
        }
        let lc = state.mask.len();
        let lp = prefix.len();
        let mut mask = Vec::with_capacity(lp * (lc + lp));
        for i in 0..lp {
            mask.extend_from_slice(&state.mask);
            mask.extend((0..lp).map(|j| j <= i));
        }
        let mut x = self
            .embed_tokens(tape, prefix)?
            .add(self.position_rows(tape, lc, lp)?)?;
        for (b, ctx_kv) in self.blocks.iter().zip(&state.kv) {
            let n = b.ln_attn.forward(tape, x)?;
            let own = b.attn.key_values(tape, n)?;
            let kv = KeyValues {
                keys: concat_rows(&[ctx_kv.keys, own.keys])?,
                values: concat_rows(&[ctx_kv.values, own.values])?,
            };
            x = x.add(b.attn.attend(tape, n, kv, Some(&mask))?)?;
            x = b.feed_forward(tape, x)?;
        }
        let h = self.ln_final.forward(tape, x)?;
        self.lm_head.forward(tape, h)
    }

    pub fn decode_forward<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        ctx: &ContextTokens<'a, T>,
        prefix: &[usize],
    ) -> Result<Var<'a, T>> {
        let state = self.forward_context(tape, ctx)?;
        self.forward_prefix(tape, &state, prefix)
    }

    /// Teacher-forced generation loss: `Σ_l −log P(y_l | y_<l, ctx)`.
    pub fn generation_loss<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        state: &ContextState<'a, T>,
        target: &[usize],
    ) -> Result<Var<'a, T>> {
        if target.last() != Some(&EOS) {
            return Err(Error::Invalid("generation target must end with EOS".into()));
        }
        if target.contains(&PAD) {
            return Err(Error::Invalid("generation target contains PAD".into()));
        }
        let mut prefix = Vec::with_capacity(target.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&target[..target.len() - 1]);
        generation_loss_from_logits(self.forward_prefix(tape, state, &prefix)?, target)
    }
}

/// Sum over positions of the cross-entropy of `logits [L × V]` against `target`.
pub fn generation_loss_from_logits<'a, T: Scalar>(logits: Var<'a, T>, target: &[usize]) -> Result<Var<'a, T>> {
    logits.cross_entropy(target, Reduction::Sum)
}

/// Mean over context output rows (the pooled decoder state).
pub fn pooled_state<'a, T: Scalar>(state: &ContextState<'a, T>) -> Var<'a, T> {
    state.output.mean_rows()
}

/// Five independent linear heads over the pooled decoder state.
#[derive(Debug, Clone)]
pub struct SlotHeads {
    pub heads: Vec<Linear>,
}

impl SlotHeads {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        sizes: [usize; 5],
        rng: &mut R,
    ) -> Self {
        let heads = Slot::ALL
            .iter()
            .zip(sizes)
            .map(|(s, n)| Linear::new(store, &format!("{prefix}.{}", s.name()), width, n, true, rng))
            .collect();
        Self { heads }
    }

    pub fn sizes(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.heads[i].out_dim)
    }

    /// Logits `[1 × V_i]` per slot.
    pub fn logits<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, pooled: Var<'a, T>) -> Result<Vec<Var<'a, T>>> {
        self.heads.iter().map(|h| h.forward(tape, pooled)).collect()
    }
}

/// `Σ_i CE(logits_i, label_i)` over the five slots.
pub fn classification_loss_from_logits<'a, T: Scalar>(logits: &[Var<'a, T>], labels: &[usize; 5]) -> Result<Var<'a, T>> {
    if logits.len() != 5 {
        return Err(Error::Invalid(format!("{} slot heads, expected 5", logits.len())));
    }
    let mut total: Option<Var<'a, T>> = None;
    for (l, &y) in logits.iter().zip(labels) {
        let ce = l.cross_entropy(&[y], Reduction::Sum)?;
        total = Some(match total {
            Some(t) => t.add(ce)?,
            None => ce,
        });
    }
    Ok(total.expect("five slots"))
}

pub fn classification_loss<'a, T: Scalar>(
    tape: &'a Tape<'a, T>,
    heads: &SlotHeads,
    state: &ContextState<'a, T>,
    labels: &[usize; 5],
) -> Result<Var<'a, T>> {
    let logits = heads.logits(tape, pooled_state(state))?;
    classification_loss_from_logits(&logits, labels)
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn rank_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds {} classes", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Per-slot ranked label indices from slot logits.
pub fn predict_slots_topk<T: Scalar>(logits: &[Var<'_, T>], k: usize) -> Result<Vec<Vec<usize>>> {
    logits
        .iter()
        .map(|l| rank_topk(&l.value().to_f64_vec(), k))
        .collect()
}

/// Adapts the decoder to [`StepScorer`] for one fixed context. Control
/// tokens other than EOS are never proposed.
pub struct DecoderScorer<'d, 'a, T: Scalar> {
    pub decoder: &'d TinyDecoder,
    pub tape: &'a Tape<'a, T>,
    pub state: ContextState<'a, T>,
    pub vocab: &'d TokenVocab,
}

impl<T: Scalar> StepScorer for DecoderScorer<'_, '_, T> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.decoder.forward_prefix(self.tape, &self.state, prefix)?.value();
        let last = logits.row(logits.rows() - 1);
        let row: Vec<f64> = last.iter().map(|v| v.to_f64_lossy()).collect();
        let mut lp = log_softmax(&row);
        for (id, v) in lp.iter_mut().enumerate() {
            if id != EOS && (TokenVocab::is_control(id) || self.vocab.token(id).is_some_and(is_text_only)) {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(lp)
    }
}

/// Word tokens (lowercase multi-letter, or the reaction arrow) never occur
/// in a condition string.
fn is_text_only(t: &str) -> bool {
    t == crate::reaction::ARROW || (t.len() > 1 && t.chars().all(|c| c.is_ascii_lowercase()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, TinyDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DecoderConfig {
            vocab_size: 12,
            width: 8,
            heads: 2,
            layers: 2,
            ffn_mult: 2,
            max_positions: 32,
        };
        let dec = TinyDecoder::new(&mut store, "decoder", "heads", cfg, &mut rng).unwrap();
        (store, dec)
    }

    fn ctx<'a>(tape: &'a Tape<'a, f64>, rows: usize, seed: u64) -> ContextTokens<'a, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContextTokens {
            tokens: tape.constant(Tensor::randn(&[rows, 8], 1.0, &mut rng)),
            mask: vec![true; rows],
        }
    }

    #[test]
    fn bos_only_gives_one_row() {
        let (store, dec) = setup();
        let tape = Tape::with_params(&store);
        let c = ctx(&tape, 5, 1);
        let logits = dec.decode_forward(&tape, &c, &[BOS]).unwrap();
        assert_eq!(logits.shape(), vec![1, 12]);
        assert!(dec.decode_forward(&tape, &c, &[3]).is_err());
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let (store, dec) = setup();
        let tape = Tape::with_params(&store);
        let c = ctx(&tape, 4, 2);
        let a = dec.decode_forward(&tape, &c, &[BOS, 8, 9, 10, 11]).unwrap().value();
        let b = dec.decode_forward(&tape, &c, &[BOS, 8, 11, 10, 9]).unwrap().value();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn prefix_pass_matches_incremental_rows() {
        let (store, dec) = setup();
        let tape = Tape::with_params(&store);
        let c = ctx(&tape, 3, 3);
        let state = dec.forward_context(&tape, &c).unwrap();
        let full = dec.forward_prefix(&tape, &state, &[BOS, 8, 9]).unwrap().value();
        let short = dec.forward_prefix(&tape, &state, &[BOS, 8]).unwrap().value();
        for (x, y) in full.row(1).iter().zip(short.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn target_validation() {
        let (store, dec) = setup();
        let tape = Tape::with_params(&store);
        let c = ctx(&tape, 3, 4);
        let state = dec.forward_context(&tape, &c).unwrap();
        assert!(dec.generation_loss(&tape, &state, &[8, 9]).is_err());
        assert!(dec.generation_loss(&tape, &state, &[8, PAD, EOS]).is_err());
        assert!(dec.generation_loss(&tape, &state, &[8, EOS]).is_ok());
    }

    #[test]
    fn uniform_generation_loss_is_ln_v() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 12]));
        let l = generation_loss_from_logits(logits, &[EOS]).unwrap().value().item().unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_classification_loss_is_sum_ln_vi() {
        let sizes = [3, 5, 2, 7, 4];
        let tape = Tape::<f64>::new();
        let logits: Vec<_> = sizes.iter().map(|&n| tape.constant(Tensor::zeros(&[1, n]))).collect();
        let l = classification_loss_from_logits(&logits, &[0, 4, 1, 6, 2])
            .unwrap()
            .value()
            .item()
            .unwrap();
        let expect: f64 = sizes.iter().map(|&n| (n as f64).ln()).sum();
        assert!((l - expect).abs() < 1e-12);
        assert!(classification_loss_from_logits(&logits, &[3, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_topk(&[0.1, 0.7, 0.2], 3).unwrap(), [1, 2, 0]);
        assert_eq!(rank_topk(&[1.0, 1.0, 1.0], 2).unwrap(), [0, 1]);
        assert!(rank_topk(&[1.0], 2).is_err());
    }

    #[test]
    fn class_heads_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = SlotHeads::new(&mut store, "heads.slot", 8, [3, 4, 5, 6, 7], &mut rng);
        let tape = Tape::with_params(&store);
        let pooled = tape.constant(Tensor::ones(&[1, 8]));
        let logits = heads.logits(&tape, pooled).unwrap();
        let top = predict_slots_topk(&logits, 3).unwrap();
        assert_eq!(top.len(), 5);
        assert!(top.iter().all(|t| t.len() == 3));
        assert_eq!(heads.sizes(), [3, 4, 5, 6, 7]);
    }
}
