//! Reaction records, reaction/condition string splitting, and the curated
//! multi-fragment grouping list.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smiles::{parse_molecule, tokenize_smiles, Molecule};

/// Separator between reactant and product sides.
pub const ARROW: &str = ">>";

/// The five condition roles of the slot flavor, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Catalyst,
    Solvent1,
    Solvent2,
    Reagent1,
    Reagent2,
}

impl Slot {
    pub const ALL: [Slot; 5] = [
        Slot::Catalyst,
        Slot::Solvent1,
        Slot::Solvent2,
        Slot::Reagent1,
        Slot::Reagent2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Catalyst => "catalyst",
            Slot::Solvent1 => "solvent1",
            Slot::Solvent2 => "solvent2",
            Slot::Reagent1 => "reagent1",
            Slot::Reagent2 => "reagent2",
        }
    }

    pub fn parse(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|slot| slot.name() == s.trim())
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One label per slot; `None` is the NONE category.
pub type SlotLabels = [Option<String>; 5];

#[derive(Debug, Clone, PartialEq)]
pub enum Conditions {
    Slots(SlotLabels),
    Joined { joined: String, species: Vec<String> },
}

impl Conditions {
    pub fn slots(&self) -> Option<&SlotLabels> {
        match self {
            Conditions::Slots(s) => Some(s),
            Conditions::Joined { .. } => None,
        }
    }

    /// Dot-joined answer string: present slot labels in slot order, or the
    /// joined string verbatim.
    pub fn joined(&self) -> String {
        match self {
            Conditions::Slots(s) => s.iter().flatten().cloned().collect::<Vec<_>>().join("."),
            Conditions::Joined { joined, .. } => joined.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionRecord {
    pub id: String,
    pub raw: String,
    pub reactant_smiles: Vec<String>,
    pub product_smiles: Vec<String>,
    pub reactants: Vec<Molecule>,
    pub products: Vec<Molecule>,
    pub conditions: Conditions,
    pub corpus: Option<String>,
}

impl ReactionRecord {
    /// Splits and parses `raw`; both sides must contain at least one
    /// parseable component.
    pub fn parse(
        id: impl Into<String>,
        raw: &str,
        conditions: Conditions,
        corpus: Option<String>,
    ) -> Result<Self> {
        let raw = raw.trim();
        let (reactant_smiles, product_smiles) = split_reaction(raw)?;
        let reactants = reactant_smiles
            .iter()
            .map(|s| parse_molecule(s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let products = product_smiles
            .iter()
            .map(|s| parse_molecule(s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            id: id.into(),
            raw: raw.to_string(),
            reactant_smiles,
            product_smiles,
            reactants,
            products,
            conditions,
            corpus,
        })
    }
}

/// Splits `s` on top-level dots (outside brackets and parentheses).
fn split_top_level_dots(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth_sq, mut depth_par, mut start) = (0i32, 0i32, 0usize);
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth_sq += 1,
            ']' => depth_sq -= 1,
            '(' => depth_par += 1,
            ')' => depth_par -= 1,
            '.' if depth_sq == 0 && depth_par == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

/// Splits a reaction SMILES `reactants>>products` into component strings.
pub fn split_reaction(s: &str) -> Result<(Vec<String>, Vec<String>)> {
    let n = s.matches(ARROW).count();
    if n != 1 {
        return Err(Error::Reaction(format!(
            "expected exactly one '{ARROW}', found {n} in {s:?}"
        )));
    }
    let (left, right) = s.split_once(ARROW).expect("one arrow");
    let side = |part: &str, what: &str| -> Result<Vec<String>> {
        let comps: Vec<String> = split_top_level_dots(part.trim())
            .into_iter()
            .map(|c| c.trim().to_string())
            .collect();
        if comps.iter().any(String::is_empty) {
            return Err(Error::Reaction(format!("empty {what} component in {s:?}")));
        }
        Ok(comps)
    };
    Ok((side(left, "reactant")?, side(right, "product")?))
}

/// Token texts of a reaction: reactant tokens, `>>`, product tokens.
pub fn tokenize_reaction(s: &str) -> Result<Vec<String>> {
    let (left, right) = s
        .split_once(ARROW)
        .ok_or_else(|| Error::Reaction(format!("missing '{ARROW}' in {s:?}")))?;
    let mut out: Vec<String> = tokenize_smiles(left.trim())?
        .into_iter()
        .map(|t| t.text)
        .collect();
    out.push(ARROW.to_string());
    out.extend(tokenize_smiles(right.trim())?.into_iter().map(|t| t.text));
    Ok(out)
}

/// Curated list of multi-fragment species (ion pairs and salts) that must
/// stay together when a condition string is split on dots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grouping {
    /// Each group as sorted fragments, plus its original fragment count.
    groups: Vec<Vec<String>>,
    max_len: usize,
}

const DEFAULT_GROUPING: &str = include_str!("../data/grouping.txt");

impl Grouping {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The bundled list of common ion pairs and salts.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_GROUPING)
    }

    /// One dot-joined group per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let mut g = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            g.add(line);
        }
        g
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn add(&mut self, dotted: &str) {
        let mut frags: Vec<String> = dotted
            .split('.')
            .map(|f| f.trim().to_string())
            .filter(|f| !f.is_empty())
            .collect();
        if frags.len() < 2 {
            return;
        }
        frags.sort();
        if !self.groups.contains(&frags) {
            self.max_len = self.max_len.max(frags.len());
            self.groups.push(frags);
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn matches(&self, window: &[&str]) -> bool {
        let mut sorted: Vec<&str> = window.to_vec();
        sorted.sort_unstable();
        self.groups
            .iter()
            .any(|g| g.len() == sorted.len() && g.iter().zip(&sorted).all(|(a, b)| a == b))
    }

    /// Whether `species` (dot-joined) is exactly one curated group.
    pub fn is_group(&self, species: &str) -> bool {
        let frags: Vec<&str> = species.split('.').collect();
        frags.len() >= 2 && self.matches(&frags)
    }
}

/// Splits a dot-joined condition string into species, re-merging adjacent
/// fragments that form a curated group (in any internal order). Order of
/// appearance is preserved.
pub fn split_condition_string(s: &str, grouping: &Grouping) -> Vec<String> {
    let frags: Vec<&str> = s
        .split('.')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .collect();
    let mut out = Vec::with_capacity(frags.len());
    let mut i = 0;
    'outer: while i < frags.len() {
        for len in (2..=grouping.max_len.min(frags.len() - i)).rev() {
            let window = &frags[i..i + len];
            if grouping.matches(window) {
                out.push(window.join("."));
                i += len;
                continue 'outer;
            }
        }
        out.push(frags[i].to_string());
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn carbamate_reaction_splits() {
        let (r, p) = split_reaction("CC(C)O.O=C(n1ccnc1)n1ccnc1>>CC(C)OC(=O)n1ccnc1").unwrap();
        assert_eq!(r, ["CC(C)O", "O=C(n1ccnc1)n1ccnc1"]);
        assert_eq!(p, ["CC(C)OC(=O)n1ccnc1"]);
    }

    #[test]
    fn trivial_reaction() {
        let (r, p) = split_reaction("C>>O").unwrap();
        assert_eq!((r, p), (vec!["C".to_string()], vec!["O".to_string()]));
    }

    #[test]
    fn malformed_reactions() {
        assert!(split_reaction("X>>Y>>Z").is_err());
        assert!(split_reaction("CCO").is_err());
        assert!(split_reaction("C.>>O").is_err());
        assert!(split_reaction(">>O").is_err());
    }

    #[test]
    fn reaction_tokens() {
        let t = tokenize_reaction("CC.O>>CCO").unwrap();
        assert_eq!(t, ["C", "C", ".", "O", ">>", "C", "C", "O"]);
    }

    #[test]
    fn condition_split_without_grouping() {
        let s = split_condition_string("CO.[Na+].CC(=O)O.[BH3-]C#N", &Grouping::empty());
        assert_eq!(s, ["CO", "[Na+]", "CC(=O)O", "[BH3-]C#N"]);
    }

    #[test]
    fn condition_split_with_ion_pair() {
        let mut g = Grouping::empty();
        g.add("[Na+].[OH-]");
        assert_eq!(split_condition_string("[Na+].[OH-]", &g), ["[Na+].[OH-]"]);
        assert_eq!(
            split_condition_string("CO.[OH-].[Na+].O", &g),
            ["CO", "[OH-].[Na+]", "O"]
        );
        assert!(split_condition_string("", &g).is_empty());
    }

    #[test]
    fn bundled_grouping_has_defaults() {
        let g = Grouping::bundled();
        assert!(g.is_group("[Na+].[OH-]"));
        assert!(g.is_group("[Cl-].[NH4+]"));
        assert!(g.is_group("[K+].[OH-]"));
        assert!(!g.is_group("CO"));
    }

    #[test]
    fn slot_roundtrip() {
        for s in Slot::ALL {
            assert_eq!(Slot::parse(s.name()), Some(s));
        }
    }

    proptest! {
        #[test]
        fn species_dots_only_in_groups(frags in prop::collection::vec(
            prop_oneof![Just("[Na+]"), Just("[OH-]"), Just("CO"), Just("O"), Just("[K+]"), Just("[Cl-]"), Just("[NH4+]")], 0..10)) {
            let g = Grouping::bundled();
            let s = frags.join(".");
            let species = split_condition_string(&s, &g);
            for sp in &species {
                prop_assert!(!sp.contains('.') || g.is_group(sp));
            }
            prop_assert_eq!(species.join("."), s);
        }
    }
}
