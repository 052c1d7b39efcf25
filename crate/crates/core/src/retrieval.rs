//! Lexical corpus retrieval over hashed SMILES token n-grams.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction::split_reaction;
use crate::smiles::tokenize_smiles;

pub const DEFAULT_WIDTH: usize = 2048;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub counts: Vec<f64>,
}

impl Fingerprint {
    pub fn norm(&self) -> f64 {
        self.counts.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

fn hash_gram(seed: u64, gram: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for (k, t) in gram.iter().enumerate() {
        if k > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for b in t.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Hashed counts of token 1-, 2- and 3-grams within each side of a
/// reaction (n-grams never span the arrow).
pub fn fingerprint(rxn: &str, width: usize, seed: u64) -> Result<Fingerprint> {
    if width == 0 {
        return Err(Error::Config("fingerprint width must be positive".into()));
    }
    let (left, right) = split_reaction(rxn)?;
    let mut counts = vec![0.0; width];
    for side in [left.join("."), right.join(".")] {
        let toks = tokenize_smiles(&side)?;
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        for n in 1..=3 {
            for gram in texts.windows(n) {
                counts[(hash_gram(seed, gram) % width as u64) as usize] += 1.0;
            }
        }
    }
    Ok(Fingerprint { counts })
}

/// Cosine similarity; 0 when either vector is empty.
pub fn cosine(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.counts.iter().zip(&b.counts).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub reaction_smiles: String,
    pub corpus: String,
}

#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub width: usize,
    pub seed: u64,
    entries: Vec<(PoolEntry, Fingerprint)>,
}

impl CorpusIndex {
    pub fn build(pool: Vec<PoolEntry>, width: usize, seed: u64) -> Result<Self> {
        let entries = pool
            .into_iter()
            .map(|e| {
                let fp = fingerprint(&e.reaction_smiles, width, seed)?;
                Ok((e, fp))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { width, seed, entries })
    }

    pub fn load_jsonl(path: &Path, width: usize, seed: u64) -> Result<Self> {
        let mut pool = Vec::new();
        for (i, line) in std::io::BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pool.push(serde_json::from_str(&line).map_err(|e| Error::Record {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Self::build(pool, width, seed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` pool corpora by fingerprint cosine, descending, ties in pool
    /// order. Entries whose corpus equals `own_corpus` are skipped.
    pub fn retrieve_similar(
        &self,
        rxn: &str,
        own_corpus: Option<&str>,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("empty corpus pool".into()));
        }
        let q = fingerprint(rxn, self.width, self.seed)?;
        let own = own_corpus.filter(|c| !c.is_empty());
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (e, _))| own != Some(e.corpus.as_str()))
            .map(|(i, (_, fp))| (i, cosine(&q, fp)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.entries[i].0.corpus.clone(), s))
            .collect())
    }
}
