//! Strict per-slot top-k, sequence top-k, partial-match accuracy and
//! report emission.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction::{split_condition_string, Grouping, Slot, SlotLabels};

/// Ranked predictions for one slot; `None` is the NONE label.
pub type Ranked = Vec<Option<String>>;

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Metric(format!("invalid k list {ks:?}")));
    }
    Ok(())
}

/// Per slot, `k → fraction of records whose truth is among the first k`.
/// Lists shorter than k (a slot vocabulary smaller than k) count in full.
pub fn topk_strict(
    preds: &[Vec<Ranked>],
    truth: &[SlotLabels],
    ks: &[usize],
) -> Result<[BTreeMap<usize, f64>; 5]> {
    check_ks(ks)?;
    if preds.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} records",
            preds.len(),
            truth.len()
        )));
    }
    let mut hits = [(); 5].map(|_| BTreeMap::<usize, usize>::new());
    for (p, t) in preds.iter().zip(truth) {
        if p.len() != 5 {
            return Err(Error::Metric(format!("prediction has {} slots, expected 5", p.len())));
        }
        for s in 0..5 {
            let rank = p[s].iter().position(|l| *l == t[s]);
            for &k in ks {
                *hits[s].entry(k).or_default() += rank.is_some_and(|r| r < k) as usize;
            }
        }
    }
    let n = truth.len();
    Ok(hits.map(|h| {
        h.into_iter()
            .map(|(k, c)| (k, if n == 0 { 0.0 } else { c as f64 / n as f64 }))
            .collect()
    }))
}

/// Species of a condition string with the fragments inside each grouped
/// species sorted, so `[OH-].[Na+]` and `[Na+].[OH-]` compare equal.
pub fn canonical_species(s: &str, grouping: &Grouping) -> Vec<String> {
    split_condition_string(s, grouping)
        .into_iter()
        .map(|sp| {
            let mut frags: Vec<&str> = sp.split('.').collect();
            frags.sort_unstable();
            frags.join(".")
        })
        .collect()
}

/// Sorted canonical species, for order-free comparison.
pub fn species_multiset(s: &str, grouping: &Grouping) -> Vec<String> {
    let mut v = canonical_species(s, grouping);
    v.sort();
    v
}

/// `k → fraction of records where one of the first k candidates has the
/// same species multiset as the truth`.
pub fn topk_sequence(
    cands: &[Vec<String>],
    truth: &[String],
    ks: &[usize],
    grouping: &Grouping,
) -> Result<BTreeMap<usize, f64>> {
    check_ks(ks)?;
    if cands.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} candidate lists for {} records",
            cands.len(),
            truth.len()
        )));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (c, t) in cands.iter().zip(truth) {
        let want = species_multiset(t, grouping);
        let rank = c.iter().position(|x| species_multiset(x, grouping) == want);
        for &k in ks {
            *hits.get_mut(&k).expect("k present") += rank.is_some_and(|r| r < k) as usize;
        }
    }
    let n = truth.len();
    Ok(hits
        .into_iter()
        .map(|(k, c)| (k, if n == 0 { 0.0 } else { c as f64 / n as f64 }))
        .collect())
}

/// Common solvents ignored by the lenient partial-match mode.
pub const COMMON_SOLVENTS: [&str; 12] = [
    "O", "CO", "CCO", "ClCCl", "C1CCOC1", "CC#N", "CN(C)C=O", "CS(C)=O", "CCOC(C)=O", "c1ccccc1", "Cc1ccccc1", "ClC(Cl)Cl",
];

/// 1 iff every predicted species belongs to the truth species set. An
/// empty prediction matches only an empty truth. With `ignore`, predicted
/// species from that list are dropped first.
pub fn partial_match(pred: &str, truth: &str, grouping: &Grouping, ignore: Option<&[&str]>) -> bool {
    let truth: HashSet<String> = canonical_species(truth, grouping).into_iter().collect();
    let pred = canonical_species(pred, grouping);
    if pred.is_empty() {
        return truth.is_empty();
    }
    pred.iter()
        .filter(|p| !ignore.is_some_and(|list| list.contains(&p.as_str())))
        .all(|p| truth.contains(p))
}

/// One row of the long-format report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub slot: String,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub model: String,
    pub task: String,
    pub records: usize,
    pub rows: Vec<MetricRow>,
    /// Scalar summaries such as the mean slot top-1.
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn add_strict(&mut self, per_slot: &[BTreeMap<usize, f64>; 5]) {
        for s in Slot::ALL {
            for (&k, &a) in &per_slot[s.index()] {
                self.rows.push(MetricRow {
                    model: self.model.clone(),
                    slot: s.name().to_string(),
                    k,
                    accuracy: a,
                });
            }
        }
        let top1: Vec<f64> = per_slot.iter().filter_map(|m| m.get(&1).copied()).collect();
        if top1.len() == 5 {
            self.summary.insert("overall_top1".into(), top1.iter().sum::<f64>() / 5.0);
            self.notes.push("overall_top1 is the unweighted mean of the five slot top-1 accuracies".into());
        }
    }

    pub fn add_sequence(&mut self, acc: &BTreeMap<usize, f64>) {
        for (&k, &a) in acc {
            self.rows.push(MetricRow {
                model: self.model.clone(),
                slot: "conditions".into(),
                k,
                accuracy: a,
            });
        }
    }
}

pub const CSV_HEADER: [&str; 4] = ["model", "slot", "k", "accuracy"];

pub fn write_report_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_reader(r);
    if rd.headers()?.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Metric("unexpected report header".into()));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`, returning both paths.
pub fn emit_report(report: &Report, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut f = std::fs::File::create(&json)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    write_report_csv(std::fs::File::create(&csv_path)?, &report.rows)?;
    Ok((json, csv_path))
}
