//! Question templates and rendering of instruction examples.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction::{split_condition_string, Conditions, Grouping, ReactionRecord, Slot, SlotLabels};
use crate::seeds::derive_seed;
use crate::vocab::{GRAPH_MARK, SMILES_MARK};

pub const CORPUS_MARK: &str = "<Corpus>";
pub const REACTION_MARK: &str = "<Reaction SMILES>";

const PLACEHOLDERS: [&str; 4] = [CORPUS_MARK, REACTION_MARK, SMILES_MARK, GRAPH_MARK];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: usize,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: usize, text: &str) -> Result<Self> {
        for p in PLACEHOLDERS {
            let n = text.matches(p).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "template {id} has {n} occurrences of {p}, expected 1"
                )));
            }
        }
        Ok(Self {
            id,
            text: text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    pub templates: Vec<PromptTemplate>,
}

const BUNDLED_TEMPLATES: &str = include_str!("../data/templates.txt");

impl TemplateBank {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TEMPLATES).expect("bundled templates are valid")
    }

    /// One template per non-empty line; `#` lines are comments. Ids count
    /// templates from 0 in file order.
    pub fn parse(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| PromptTemplate::new(i, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Slot labels as a JSON object with one key per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotObject {
    pub catalyst: Option<String>,
    pub solvent1: Option<String>,
    pub solvent2: Option<String>,
    pub reagent1: Option<String>,
    pub reagent2: Option<String>,
}

impl From<&SlotLabels> for SlotObject {
    fn from(s: &SlotLabels) -> Self {
        let [catalyst, solvent1, solvent2, reagent1, reagent2] = s.clone();
        Self {
            catalyst,
            solvent1,
            solvent2,
            reagent1,
            reagent2,
        }
    }
}

impl From<&SlotObject> for SlotLabels {
    fn from(o: &SlotObject) -> Self {
        [
            o.catalyst.clone(),
            o.solvent1.clone(),
            o.solvent2.clone(),
            o.reagent1.clone(),
            o.reagent2.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub reaction_smiles: String,
    pub corpus: String,
    pub template_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<SlotObject>,
    #[serde(skip)]
    pub seed: u64,
}

impl InstructionExample {
    pub fn slot_labels(&self) -> Option<SlotLabels> {
        self.slots.as_ref().map(SlotLabels::from)
    }

    /// Rebuilds the reaction record this example was rendered from.
    pub fn to_record(&self, grouping: &Grouping) -> Result<ReactionRecord> {
        let conditions = match self.slot_labels() {
            Some(s) => Conditions::Slots(s),
            None => Conditions::Joined {
                joined: self.answer.clone(),
                species: split_condition_string(&self.answer, grouping),
            },
        };
        ReactionRecord::parse(self.id.clone(), &self.reaction_smiles, conditions, Some(self.corpus.clone()))
    }
}

/// Comma-joined slot tuple, empty cells for NONE.
pub fn slot_tuple(s: &SlotLabels) -> String {
    Slot::ALL
        .iter()
        .map(|slot| s[slot.index()].as_deref().unwrap_or(""))
        .collect::<Vec<_>>()
        .join(",")
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The question text alone, for inference on a bare reaction.
pub fn render_question(t: &PromptTemplate, rxn: &str, corpus: &str) -> String {
    collapse_whitespace(&t.text.replace(CORPUS_MARK, corpus).replace(REACTION_MARK, rxn))
}

/// Substitutes the corpus and reaction placeholders. The modality markers
/// stay in the text as sentinels.
pub fn render_prompt(r: &ReactionRecord, t: &PromptTemplate, seed: u64) -> Result<InstructionExample> {
    for p in PLACEHOLDERS {
        if !t.text.contains(p) {
            return Err(Error::Template(format!("template {} lacks {p}", t.id)));
        }
    }
    let corpus = r.corpus.clone().unwrap_or_default();
    let question = render_question(t, &r.raw, &corpus);
    let (answer, slots) = match &r.conditions {
        Conditions::Slots(s) => (slot_tuple(s), Some(SlotObject::from(s))),
        Conditions::Joined { joined, .. } => (joined.clone(), None),
    };
    if answer.is_empty() {
        return Err(Error::Template(format!("record {} has an empty answer", r.id)));
    }
    Ok(InstructionExample {
        id: r.id.clone(),
        question,
        answer,
        reaction_smiles: r.raw.clone(),
        corpus,
        template_id: t.id,
        slots,
        seed,
    })
}

/// `expand` examples per record, each with a template drawn uniformly from
/// a generator seeded by `(seed, record id, copy index)`. Output follows
/// input order.
pub fn build_qa_dataset(
    records: &[ReactionRecord],
    bank: &TemplateBank,
    seed: u64,
    expand: usize,
) -> Result<Vec<InstructionExample>> {
    if bank.is_empty() {
        return Err(Error::Template("empty template bank".into()));
    }
    if expand == 0 {
        return Err(Error::Config("expansion factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(records.len() * expand);
    for r in records {
        for e in 0..expand {
            let key = if expand == 1 {
                r.id.clone()
            } else {
                format!("{}#{e}", r.id)
            };
            let s = derive_seed(seed, &key);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let t = &bank.templates[rng.random_range(0..bank.len())];
            let mut ex = render_prompt(r, t, s)?;
            ex.id = key;
            out.push(ex);
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[InstructionExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<InstructionExample>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}
