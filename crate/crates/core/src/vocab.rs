//! Token vocabulary shared by the encoder and decoder, and the per-slot
//! condition-label vocabularies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::reaction::{tokenize_reaction, Slot, SlotLabels, ARROW};
use crate::smiles::tokenize_smiles;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const DOT: usize = 3;
pub const UNK: usize = 4;
pub const SMILES_SENTINEL: usize = 5;
pub const GRAPH_SENTINEL: usize = 6;
pub const ARROW_ID: usize = 7;

pub const SMILES_MARK: &str = "<SMILES>";
pub const GRAPH_MARK: &str = "<Graph>";

const SPECIALS: [&str; 8] = ["<pad>", "<bos>", "<eos>", ".", "<unk>", SMILES_MARK, GRAPH_MARK, ARROW];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenList", into = "TokenList")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenList {
    tokens: Vec<String>,
}

impl TryFrom<TokenList> for TokenVocab {
    type Error = Error;
    fn try_from(t: TokenList) -> Result<Self> {
        TokenVocab::from_tokens(t.tokens)
    }
}

impl From<TokenVocab> for TokenList {
    fn from(v: TokenVocab) -> Self {
        TokenList { tokens: v.tokens }
    }
}

impl TokenVocab {
    /// Specials first, then `tokens` in the given order (duplicates and
    /// specials skipped).
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS.iter().copied().map(str::to_string) {
            v.push(s);
        }
        for t in tokens {
            v.push(t.as_ref().to_string());
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.index.contains_key(&t) {
            self.index.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Invalid("token vocabulary must start with the reserved specials".into()));
        }
        let v = Self::new(&tokens[SPECIALS.len()..]);
        if v.tokens.len() != tokens.len() {
            return Err(Error::Invalid("duplicate tokens in vocabulary".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_reaction(&self, rxn: &str) -> Result<Vec<usize>> {
        Ok(tokenize_reaction(rxn)?.iter().map(|t| self.id(t)).collect())
    }

    /// Generation target: condition tokens followed by EOS.
    pub fn encode_condition(&self, cond: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = if cond.is_empty() {
            Vec::new()
        } else {
            tokenize_smiles(cond)?.iter().map(|t| self.id(&t.text)).collect()
        };
        ids.push(EOS);
        Ok(ids)
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        text_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Concatenated text of all non-control tokens.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | UNK | SMILES_SENTINEL | GRAPH_SENTINEL))
            .filter_map(|&i| self.token(i))
            .collect()
    }

    pub fn is_control(id: usize) -> bool {
        matches!(id, PAD | BOS | EOS | UNK | SMILES_SENTINEL | GRAPH_SENTINEL)
    }
}

/// Splits question text into tokens: modality markers stay whole, words
/// containing a reaction arrow are SMILES-tokenized, everything else is a
/// lowercase word with surrounding punctuation removed.
pub fn text_tokens(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &[',', ';', ':', '!', '?', '"', '\'', '(', ')', '.'];
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut trimmed = word.trim_end_matches(PUNCT);
        if trimmed.is_empty() {
            continue;
        }
        for mark in [SMILES_MARK, GRAPH_MARK] {
            if trimmed.contains(mark) {
                out.push(mark.to_string());
                trimmed = "";
            }
        }
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.contains(ARROW) {
            if let Ok(toks) = tokenize_reaction(trimmed) {
                out.extend(toks);
                continue;
            }
        }
        let w = trimmed.trim_start_matches(PUNCT).to_lowercase();
        if !w.is_empty() {
            out.push(w);
        }
    }
    out
}

pub const NONE_LABEL: &str = "<none>";

/// Per-slot label vocabularies; index 0 of every slot is NONE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondVocab {
    slots: [Vec<String>; 5],
    #[serde(skip)]
    index: [HashMap<String, usize>; 5],
}

impl CondVocab {
    /// Labels ordered by descending frequency, ties by label text.
    pub fn build<'a, I>(labels: I) -> Self
    where
        I: IntoIterator<Item = &'a SlotLabels>,
    {
        let mut counts: [HashMap<&str, usize>; 5] = Default::default();
        for l in labels {
            for (s, label) in l.iter().enumerate() {
                if let Some(x) = label {
                    *counts[s].entry(x.as_str()).or_default() += 1;
                }
            }
        }
        let slots = counts.map(|c| {
            let mut v: Vec<(&str, usize)> = c.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            std::iter::once(NONE_LABEL.to_string())
                .chain(v.into_iter().map(|(l, _)| l.to_string()))
                .collect::<Vec<_>>()
        });
        Self::from_slots(slots)
    }

    pub fn from_slots(slots: [Vec<String>; 5]) -> Self {
        let index = slots
            .clone()
            .map(|v| v.into_iter().enumerate().map(|(i, l)| (l, i)).collect());
        Self { slots, index }
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_slots(self.slots)
    }

    pub fn size(&self, slot: Slot) -> usize {
        self.slots[slot.index()].len()
    }

    pub fn sizes(&self) -> [usize; 5] {
        Slot::ALL.map(|s| self.size(s))
    }

    /// Index of a label; `None` label is NONE (0); unseen labels give `None`.
    pub fn lookup(&self, slot: Slot, label: Option<&str>) -> Option<usize> {
        match label {
            None => Some(0),
            Some(l) => self.index[slot.index()].get(l).copied(),
        }
    }

    pub fn label(&self, slot: Slot, idx: usize) -> Option<&str> {
        self.slots[slot.index()].get(idx).map(String::as_str)
    }

    pub fn labels(&self, slot: Slot) -> &[String] {
        &self.slots[slot.index()]
    }
}

/// SHA-256 over the serialized vocabularies, hex encoded.
pub fn vocab_hash(tokens: &TokenVocab, conds: Option<&CondVocab>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(tokens).expect("vocab serializes"));
    if let Some(c) = conds {
        h.update(serde_json::to_vec(c).expect("vocab serializes"));
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_fixed() {
        let v = TokenVocab::new(["C", "O", "."]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("."), DOT);
        assert_eq!(v.id(">>"), ARROW_ID);
        assert_eq!(v.len(), 10);
        assert_eq!(v.id("Br"), UNK);
    }

    #[test]
    fn condition_roundtrip() {
        let v = TokenVocab::new(["C", "O", "[Na+]", "l"]);
        let ids = v.encode_condition("CO.[Na+]").unwrap();
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.detokenize(&ids), "CO.[Na+]");
    }

    #[test]
    fn text_keeps_markers_and_reactions() {
        let t = text_tokens("Given <SMILES> and <Graph>, predict for CC>>C.");
        assert_eq!(t, ["given", "<SMILES>", "and", "<Graph>", "predict", "for", "C", "C", ">>", "C"]);
    }

    #[test]
    fn serde_roundtrip() {
        let v = TokenVocab::new(["C", "c1"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: TokenVocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<TokenVocab>(r#"{"tokens":["C"]}"#).is_err());
    }

    #[test]
    fn cond_vocab_frequency_order() {
        let rows: Vec<SlotLabels> = vec![
            [Some("B".into()), None, None, None, None],
            [Some("A".into()), None, None, None, None],
            [Some("B".into()), None, None, None, None],
            [Some("C".into()), None, None, None, None],
        ];
        let cv = CondVocab::build(&rows);
        assert_eq!(cv.labels(Slot::Catalyst), ["<none>", "B", "A", "C"]);
        assert_eq!(cv.size(Slot::Solvent1), 1);
        assert_eq!(cv.lookup(Slot::Catalyst, Some("A")), Some(2));
        assert_eq!(cv.lookup(Slot::Catalyst, None), Some(0));
        assert_eq!(cv.lookup(Slot::Catalyst, Some("Z")), None);
        let back: CondVocab = serde_json::from_str::<CondVocab>(&serde_json::to_string(&cv).unwrap())
            .unwrap()
            .reindexed();
        assert_eq!(back, cv);
    }

    #[test]
    fn hash_changes_with_vocab() {
        let a = TokenVocab::new(["C"]);
        let b = TokenVocab::new(["O"]);
        assert_ne!(vocab_hash(&a, None), vocab_hash(&b, None));
        assert_eq!(vocab_hash(&a, None).len(), 64);
    }
}
