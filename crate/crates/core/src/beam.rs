//! Length-normalised beam search over any next-token scorer.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Next-token log-probabilities given the tokens so far (starting with BOS).
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Score = log P / len^alpha.
    pub length_alpha: f64,
    pub bos: usize,
    pub eos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens ending in EOS (BOS excluded).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len as f64).powf(alpha)
}

/// Descending score, then ascending token sequence.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Every hypothesis that reached EOS, best first. Live beams are pruned to
/// `beam_width` by log-probability after each step.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 || cfg.max_len == 0 {
        return Err(Error::Invalid("beam_width and max_len must be positive".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished = Vec::new();
    for step in 0..cfg.max_len {
        let last = step + 1 == cfg.max_len;
        let mut next: Vec<(Vec<usize>, f64)> = Vec::new();
        for (tokens, lp) in &live {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(cfg.bos);
            prefix.extend_from_slice(tokens);
            let step_lp = scorer.log_probs(&prefix)?;
            for (v, &l) in step_lp.iter().enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let total = lp + l;
                let mut t = tokens.clone();
                t.push(v);
                if v == cfg.eos {
                    finished.push(Hypothesis {
                        score: normalized_score(total, t.len(), cfg.length_alpha),
                        tokens: t,
                        log_prob: total,
                    });
                } else if !last {
                    next.push((t, total));
                }
            }
        }
        next.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        next.truncate(cfg.beam_width);
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank_order);
    Ok(finished)
}

/// Argmax decoding until EOS or `max_len` tokens. The returned tokens
/// exclude BOS and include EOS when reached.
pub fn greedy_decode<S: StepScorer + ?Sized>(
    scorer: &mut S,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![bos];
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefix)?;
        let mut best = None;
        for (v, &l) in lp.iter().enumerate() {
            if l.is_finite() && best.is_none_or(|(_, b)| l > b) {
                best = Some((v, l));
            }
        }
        let Some((v, _)) = best else { break };
        prefix.push(v);
        if v == eos {
            break;
        }
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Distinct detokenized candidates with their scores, best first.
    pub candidates: Vec<(String, f64)>,
    /// Fewer than `k` distinct candidates reached EOS.
    pub incomplete: bool,
}

/// Beam search, detokenize, deduplicate, keep `k`.
pub fn beam_search_topk<S, D>(
    scorer: &mut S,
    cfg: &BeamConfig,
    k: usize,
    detokenize: D,
) -> Result<TopK>
where
    S: StepScorer + ?Sized,
    D: Fn(&[usize]) -> String,
{
    if cfg.beam_width < k {
        return Err(Error::Invalid(format!(
            "beam width {} smaller than k {k}",
            cfg.beam_width
        )));
    }
    let mut candidates: Vec<(String, f64)> = Vec::with_capacity(k);
    for h in beam_search(scorer, cfg)? {
        if candidates.len() == k {
            break;
        }
        let s = detokenize(&h.tokens);
        if !candidates.iter().any(|(c, _)| *c == s) {
            candidates.push((s, h.score));
        }
    }
    let incomplete = candidates.len() < k;
    if incomplete {
        log::warn!("beam search produced {} of {k} candidates", candidates.len());
    }
    Ok(TopK {
        candidates,
        incomplete,
    })
}

/// Log-softmax of one row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}
