//! CSV ingestion for both dataset flavors, seeded splits, sparsity reports
//! and vocabulary construction.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction::{split_condition_string, tokenize_reaction, Conditions, Grouping, ReactionRecord, Slot, SlotLabels};
use crate::smiles::tokenize_smiles;
use crate::vocab::{text_tokens, CondVocab, TokenVocab};

/// Header names for each field; `corpus` and `id` may be absent from a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub rxn_smiles: String,
    pub catalyst: String,
    pub solvent1: String,
    pub solvent2: String,
    pub reagent1: String,
    pub reagent2: String,
    pub conditions: String,
    pub corpus: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            rxn_smiles: "rxn_smiles".into(),
            catalyst: "catalyst".into(),
            solvent1: "solvent1".into(),
            solvent2: "solvent2".into(),
            reagent1: "reagent1".into(),
            reagent2: "reagent2".into(),
            conditions: "conditions".into(),
            corpus: "corpus".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub records: Vec<ReactionRecord>,
    pub skipped: usize,
    /// `(line, message)` for every skipped row.
    pub problems: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Condition,
    Joined,
}

struct Columns {
    id: Option<usize>,
    rxn: usize,
    slots: [usize; 5],
    conditions: usize,
    corpus: Option<usize>,
}

fn resolve_columns(headers: &csv::StringRecord, map: &ColumnMap, flavor: Flavor) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| Error::Record {
            line: 1,
            msg: format!("missing column {name:?}"),
        })
    };
    let rxn = need(&map.rxn_smiles)?;
    let (slots, conditions) = match flavor {
        Flavor::Condition => (
            [
                need(&map.catalyst)?,
                need(&map.solvent1)?,
                need(&map.solvent2)?,
                need(&map.reagent1)?,
                need(&map.reagent2)?,
            ],
            0,
        ),
        Flavor::Joined => ([0; 5], need(&map.conditions)?),
    };
    Ok(Columns {
        id: find(&map.id),
        rxn,
        slots,
        conditions,
        corpus: find(&map.corpus),
    })
}

fn cell<'r>(row: &'r csv::StringRecord, i: usize) -> &'r str {
    row.get(i).map(str::trim).unwrap_or("")
}

/// Reads either flavor from any reader.
pub fn read_csv<R: Read>(
    reader: R,
    flavor: Flavor,
    map: &ColumnMap,
    grouping: &Grouping,
    mode: LoadMode,
) -> Result<Loaded> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = resolve_columns(&headers, map, flavor)?;
    let mut out = Loaded {
        records: Vec::new(),
        skipped: 0,
        problems: Vec::new(),
    };
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let parsed = row.map_err(Error::from).and_then(|row| {
            let id = cols
                .id
                .map(|i| cell(&row, i).to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("row{}", n + 1));
            let conditions = match flavor {
                Flavor::Condition => Conditions::Slots(cols.slots.map(|i| {
                    let v = cell(&row, i);
                    (!v.is_empty()).then(|| v.to_string())
                })),
                Flavor::Joined => {
                    let joined = cell(&row, cols.conditions).to_string();
                    Conditions::Joined {
                        species: split_condition_string(&joined, grouping),
                        joined,
                    }
                }
            };
            let corpus = cols.corpus.map(|i| cell(&row, i).to_string());
            ReactionRecord::parse(id, cell(&row, cols.rxn), conditions, corpus)
        });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(e) => match mode {
                LoadMode::Strict => {
                    return Err(Error::Record {
                        line,
                        msg: e.to_string(),
                    })
                }
                LoadMode::Lenient => {
                    log::warn!("line {line}: {e}");
                    out.skipped += 1;
                    out.problems.push((line, e.to_string()));
                }
            },
        }
    }
    Ok(out)
}

/// Slot-flavor CSV: id, rxn_smiles, catalyst, solvent1, solvent2, reagent1,
/// reagent2, optional corpus. Empty cells are NONE.
pub fn load_condition_csv(path: &Path, map: &ColumnMap, mode: LoadMode) -> Result<Loaded> {
    read_csv(std::fs::File::open(path)?, Flavor::Condition, map, &Grouping::empty(), mode)
}

/// Joined-flavor CSV: id, rxn_smiles, conditions (dot-joined), optional corpus.
pub fn load_500mt_csv(path: &Path, map: &ColumnMap, grouping: &Grouping, mode: LoadMode) -> Result<Loaded> {
    read_csv(std::fs::File::open(path)?, Flavor::Joined, map, grouping, mode)
}

/// Sizes of the 8:1:1 split: ⌊n/10⌋ each for validation and test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

/// Seeded shuffle, then train / validation / test.
pub fn split_811<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.len() < 10 {
        return Err(Error::Invalid(format!("need at least 10 records to split, got {}", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va, _) = split_sizes(items.len());
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..tr]), pick(&order[tr..tr + va]), pick(&order[tr + va..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDensity {
    pub slot: Slot,
    pub non_empty: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total: usize,
    pub slots: Vec<SlotDensity>,
}

pub fn sparsity_report(records: &[ReactionRecord]) -> Result<SparsityReport> {
    let mut counts = [0usize; 5];
    for r in records {
        let s = r.conditions.slots().ok_or_else(|| {
            Error::Invalid(format!("record {} is not slot-flavored", r.id))
        })?;
        for (c, label) in counts.iter_mut().zip(s) {
            *c += label.is_some() as usize;
        }
    }
    let total = records.len();
    Ok(SparsityReport {
        total,
        slots: Slot::ALL
            .iter()
            .map(|&slot| SlotDensity {
                slot,
                non_empty: counts[slot.index()],
                density: if total == 0 {
                    0.0
                } else {
                    counts[slot.index()] as f64 / total as f64
                },
            })
            .collect(),
    })
}

/// Frequency of every distinct label per slot.
pub fn slot_label_counts(records: &[ReactionRecord]) -> [HashMap<String, usize>; 5] {
    let mut out: [HashMap<String, usize>; 5] = Default::default();
    for r in records {
        if let Some(s) = r.conditions.slots() {
            for (m, label) in out.iter_mut().zip(s) {
                if let Some(l) = label {
                    *m.entry(l.clone()).or_default() += 1;
                }
            }
        }
    }
    out
}

/// Frequency of every distinct condition species (slot labels or grouped
/// joined species).
pub fn species_counts(records: &[ReactionRecord]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for r in records {
        match &r.conditions {
            Conditions::Slots(s) => s.iter().flatten().for_each(|l| *out.entry(l.clone()).or_default() += 1),
            Conditions::Joined { species, .. } => {
                species.iter().for_each(|l| *out.entry(l.clone()).or_default() += 1)
            }
        }
    }
    out
}

fn bump(counts: &mut HashMap<String, usize>, order: &mut Vec<String>, t: String) {
    let e = counts.entry(t.clone()).or_insert(0);
    if *e == 0 {
        order.push(t);
    }
    *e += 1;
}

/// Slot vocabularies from `train` only; the token vocabulary from every
/// reaction and condition in `all` plus the words of `texts`. Tokens are
/// frequency-ordered, ties by first appearance.
pub fn build_vocabs(
    train: &[ReactionRecord],
    all: &[ReactionRecord],
    texts: &[String],
) -> Result<(CondVocab, TokenVocab)> {
    let labels: Vec<&SlotLabels> = train.iter().filter_map(|r| r.conditions.slots()).collect();
    let cond = CondVocab::build(labels);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order = Vec::new();
    for r in all {
        for t in tokenize_reaction(&r.raw)? {
            bump(&mut counts, &mut order, t);
        }
        let cond_strings: Vec<String> = match &r.conditions {
            Conditions::Slots(s) => s.iter().flatten().cloned().collect(),
            Conditions::Joined { joined, .. } => vec![joined.clone()],
        };
        for c in cond_strings.iter().filter(|c| !c.is_empty()) {
            for t in tokenize_smiles(c)? {
                bump(&mut counts, &mut order, t.text);
            }
        }
    }
    for text in texts {
        for t in text_tokens(text) {
            bump(&mut counts, &mut order, t);
        }
    }
    let first: HashMap<&str, usize> = order.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut sorted = order.clone();
    sorted.sort_by(|a, b| counts[b].cmp(&counts[a]).then(first[a.as_str()].cmp(&first[b.as_str()])));
    Ok((cond, TokenVocab::new(sorted)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV_SLOTS: &str = "\
id,rxn_smiles,catalyst,solvent1,solvent2,reagent1,reagent2
a,CC(C)O.O=C(n1ccnc1)n1ccnc1>>CC(C)OC(=O)n1ccnc1,[Zn],C1CCOC1,O,CO,[Cl-].[NH4+]
b,CCO>>CC=O,,ClCCl,,,
c,not a reaction,,,,,
";

    #[test]
    fn slot_csv_lenient_and_strict() {
        let l = read_csv(CSV_SLOTS.as_bytes(), Flavor::Condition, &ColumnMap::default(), &Grouping::empty(), LoadMode::Lenient).unwrap();
        assert_eq!(l.records.len(), 2);
        assert_eq!(l.skipped, 1);
        assert_eq!(l.problems[0].0, 4);
        let s = l.records[0].conditions.slots().unwrap();
        assert!(s.iter().all(Option::is_some));
        assert_eq!(s[4].as_deref(), Some("[Cl-].[NH4+]"));
        let s = l.records[1].conditions.slots().unwrap();
        assert_eq!(s.iter().filter(|x| x.is_none()).count(), 4);
        let e = read_csv(CSV_SLOTS.as_bytes(), Flavor::Condition, &ColumnMap::default(), &Grouping::empty(), LoadMode::Strict);
        assert!(matches!(e, Err(Error::Record { line: 4, .. })));
    }

    #[test]
    fn joined_csv() {
        let csv = "id,rxn_smiles,conditions\nx,CC=O>>CCO,CO.[Na+].CC(=O)O.[BH3-]C#N\ny,C>>O,\nz,C>>>O,CO\n";
        let l = read_csv(csv.as_bytes(), Flavor::Joined, &ColumnMap::default(), &Grouping::bundled(), LoadMode::Lenient).unwrap();
        assert_eq!(l.records.len(), 2);
        assert_eq!(l.skipped, 1);
        match &l.records[0].conditions {
            Conditions::Joined { joined, species } => {
                assert_eq!(joined, "CO.[Na+].CC(=O)O.[BH3-]C#N");
                assert_eq!(species.len(), 4);
            }
            _ => panic!("joined flavor"),
        }
        assert_eq!(l.records[1].conditions.joined(), "");
    }

    #[test]
    fn column_mapping() {
        let csv = "rxn,cat,s1,s2,r1,r2\nC>>O,[Pd],,,,\n";
        let map = ColumnMap {
            rxn_smiles: "rxn".into(),
            catalyst: "cat".into(),
            solvent1: "s1".into(),
            solvent2: "s2".into(),
            reagent1: "r1".into(),
            reagent2: "r2".into(),
            ..ColumnMap::default()
        };
        let l = read_csv(csv.as_bytes(), Flavor::Condition, &map, &Grouping::empty(), LoadMode::Strict).unwrap();
        assert_eq!(l.records[0].id, "row1");
        assert!(read_csv(csv.as_bytes(), Flavor::Condition, &ColumnMap::default(), &Grouping::empty(), LoadMode::Strict).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        assert_eq!(split_sizes(683_410), (546_728, 68_341, 68_341));
        let items: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_811(&items, 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_811(&items, 3).unwrap(), (a, b, c));
        assert!(split_811(&items[..9], 3).is_err());
        let items: Vec<usize> = (0..1234).collect();
        let (a, b, c) = split_811(&items, 9).unwrap();
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, items);
    }

    #[test]
    fn sparsity_hand_fixture() {
        let mk = |s: [Option<&str>; 5]| {
            ReactionRecord::parse("r", "C>>O", Conditions::Slots(s.map(|x| x.map(str::to_string))), None).unwrap()
        };
        let recs = vec![
            mk([Some("[Pd]"), Some("O"), None, Some("CO"), None]),
            mk([None, Some("O"), Some("CCO"), None, None]),
            mk([None, Some("ClCCl"), None, Some("[Na+].[OH-]"), None]),
            mk([None, Some("O"), None, None, None]),
        ];
        let r = sparsity_report(&recs).unwrap();
        let got: Vec<(usize, f64)> = r.slots.iter().map(|s| (s.non_empty, s.density)).collect();
        assert_eq!(got, vec![(1, 0.25), (4, 1.0), (1, 0.25), (2, 0.5), (0, 0.0)]);
        let none = vec![mk([None; 5]); 3];
        assert!(sparsity_report(&none).unwrap().slots.iter().all(|s| s.non_empty == 0 && s.density == 0.0));
    }

    #[test]
    fn vocab_from_train_only() {
        let mk = |cat: &str| {
            ReactionRecord::parse("r", "CC>>CO", Conditions::Slots([Some(cat.to_string()), None, None, None, None]), None).unwrap()
        };
        let train = vec![mk("[Pd]"), mk("[Zn]"), mk("[Pd]"), mk("[Cu]")];
        let test = vec![mk("[Fe]")];
        let all: Vec<_> = train.iter().chain(&test).cloned().collect();
        let (cv, tv) = build_vocabs(&train, &all, &[]).unwrap();
        assert_eq!(cv.size(Slot::Catalyst), 4);
        assert_eq!(cv.labels(Slot::Catalyst)[1], "[Pd]");
        assert_eq!(cv.lookup(Slot::Catalyst, Some("[Fe]")), None);
        assert!(tv.get("[Fe]").is_some());
        assert_eq!(tv.token(8), Some("C"));
    }
}
