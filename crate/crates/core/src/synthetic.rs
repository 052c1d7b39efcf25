//! Small synthetic reaction sets for overfitting checks and smoke runs.
//! Conditions are a fixed function of the two building blocks, so every
//! label is learnable from the reaction alone.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::reaction::{split_condition_string, Conditions, Grouping, ReactionRecord, SlotLabels};

pub const BLOCKS: [&str; 20] = [
    "CCO",
    "c1ccccc1Br",
    "CC(=O)Cl",
    "NCc1ccccc1",
    "OC(=O)CC",
    "CN",
    "Brc1ccncc1",
    "CC(C)O",
    "C=CC(=O)OC",
    "Nc1ccc(F)cc1",
    "OCCN",
    "CS(=O)(=O)Cl",
    "c1ccc2ccccc2c1",
    "CC#N",
    "O=Cc1ccco1",
    "ClCC(=O)O",
    "CCOC(=O)N",
    "Ic1ccsc1",
    "CC(C)(C)OC(=O)N",
    "OB(O)c1ccccc1",
];

pub const CATALYSTS: [&str; 8] = [
    "[Pd]",
    "[Cu]I",
    "[Ni]",
    "[Zn]",
    "[Pt]",
    "[Fe]",
    "[Rh]",
    "[Ag]",
];

pub const SOLVENTS: [&str; 6] = ["O", "CO", "C1CCOC1", "ClCCl", "CN(C)C=O", "Cc1ccccc1"];

pub const REAGENTS: [&str; 10] = [
    "[Na+].[OH-]",
    "CCN(CC)CC",
    "O=C([O-])[O-].[K+].[K+]",
    "Cl",
    "O=S(=O)(O)O",
    "[Li]CCCC",
    "CC(=O)O",
    "[BH4-].[Na+]",
    "N",
    "c1ccncc1",
];

fn labels_for(a: usize, b: usize) -> SlotLabels {
    let s = |x: &str| Some(x.to_string());
    let catalyst = if (a + b) % 5 == 4 { None } else { s(CATALYSTS[(3 * a + b) % 8]) };
    let solvent1 = s(SOLVENTS[(a + 2 * b) % 6]);
    let solvent2 = if (a * b) % 3 == 0 { s(SOLVENTS[(a + 2 * b + 1 + b % 5) % 6]) } else { None };
    let reagent1 = s(REAGENTS[(a * 7 + b * 3) % 10]);
    let reagent2 = if (a + b) % 2 == 0 { s(REAGENTS[(a * 7 + b * 3 + 1 + a % 9) % 10]) } else { None };
    [catalyst, solvent1, solvent2, reagent1, reagent2]
}

/// `n` distinct ordered pairs of building blocks, shuffled by `seed`.
fn pairs(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..BLOCKS.len())
        .flat_map(|a| (0..BLOCKS.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    assert!(n <= all.len(), "at most {} synthetic reactions", all.len());
    all.truncate(n);
    all
}

fn reaction(a: usize, b: usize) -> String {
    format!("{}.{}>>{}{}", BLOCKS[a], BLOCKS[b], BLOCKS[a], BLOCKS[b])
}

/// Slot-labelled records with up to 8 catalysts, 6 solvents and 10 reagents.
pub fn condition_records(n: usize, seed: u64) -> Result<Vec<ReactionRecord>> {
    pairs(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            ReactionRecord::parse(
                format!("syn{i:04}"),
                &reaction(a, b),
                Conditions::Slots(labels_for(a, b)),
                Some(format!("Coupling {i} run under standard conditions.")),
            )
        })
        .collect()
}

/// Joined-condition records built from the same label function.
pub fn joined_records(n: usize, seed: u64, grouping: &Grouping) -> Result<Vec<ReactionRecord>> {
    condition_records(n, seed)?
        .into_iter()
        .map(|mut r| {
            let joined = r.conditions.joined();
            r.conditions = Conditions::Joined {
                species: split_condition_string(&joined, grouping),
                joined,
            };
            Ok(r)
        })
        .collect()
}

/// CSV in the slot layout the condition loader reads by default.
pub fn write_condition_csv<W: Write>(w: W, records: &[ReactionRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "rxn_smiles", "catalyst", "solvent1", "solvent2", "reagent1", "reagent2", "corpus"])?;
    for r in records {
        let slots = r.conditions.slots().cloned().unwrap_or_default();
        let mut row = vec![r.id.clone(), r.raw.clone()];
        row.extend(slots.iter().map(|s| s.clone().unwrap_or_default()));
        row.push(r.corpus.clone().unwrap_or_default());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// CSV in the joined layout.
pub fn write_joined_csv<W: Write>(w: W, records: &[ReactionRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "rxn_smiles", "conditions", "corpus"])?;
    for r in records {
        wr.write_record([
            r.id.as_str(),
            r.raw.as_str(),
            r.conditions.joined().as_str(),
            r.corpus.as_deref().unwrap_or(""),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{read_csv, ColumnMap, Flavor, LoadMode};
    use std::collections::HashSet;

    #[test]
    fn label_pools_fully_used() {
        let recs = condition_records(128, 3).unwrap();
        let mut seen: [HashSet<String>; 5] = Default::default();
        for r in &recs {
            for (i, l) in r.conditions.slots().unwrap().iter().enumerate() {
                if let Some(l) = l {
                    seen[i].insert(l.clone());
                }
            }
        }
        assert_eq!(seen[0].len(), 8);
        assert_eq!(seen[1].len(), 6);
        assert_eq!(seen[3].len(), 10);
        let ids: HashSet<_> = recs.iter().map(|r| r.raw.clone()).collect();
        assert_eq!(ids.len(), 128);
    }

    #[test]
    fn csv_roundtrip() {
        let recs = condition_records(12, 1).unwrap();
        let mut buf = Vec::new();
        write_condition_csv(&mut buf, &recs).unwrap();
        let back = read_csv(&buf[..], Flavor::Condition, &ColumnMap::default(), &Grouping::bundled(), LoadMode::Strict).unwrap();
        assert_eq!(back.records, recs);

        let g = Grouping::bundled();
        let recs = joined_records(12, 1, &g).unwrap();
        let mut buf = Vec::new();
        write_joined_csv(&mut buf, &recs).unwrap();
        let back = read_csv(&buf[..], Flavor::Joined, &ColumnMap::default(), &g, LoadMode::Strict).unwrap();
        assert_eq!(back.records, recs);
    }
}
