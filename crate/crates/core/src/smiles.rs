//! SMILES tokenizer and molecule-graph parser.
//!
//! Supported subset: organic-subset atoms (`B C N O P S F Cl Br I`, aromatic
//! `b c n o p s`, wildcard `*`), bracket atoms with isotope, chirality,
//! hydrogen count, charge and atom class, bonds `- = # :`, directional
//! bonds `/ \`, ring closures (`1`..`9`, `%nn`), branches and dots.
//! Stereo markers are preserved in token text but carry no graph meaning.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES")]
    Empty,
    #[error("illegal character {ch:?} at byte {pos}")]
    IllegalChar { ch: char, pos: usize },
    #[error("unbalanced bracket at byte {pos}")]
    UnbalancedBracket { pos: usize },
    #[error("dangling '%' at byte {pos}")]
    DanglingPercent { pos: usize },
    #[error("malformed bracket atom {text:?} at byte {pos}")]
    BadBracketAtom { text: String, pos: usize },
    #[error("ring bond {label} opened but never closed")]
    UnclosedRing { label: u32 },
    #[error("branch opened but never closed")]
    UnclosedBranch,
    #[error("unexpected {what} at byte {pos}")]
    Unexpected { what: &'static str, pos: usize },
    #[error("bond between atom {0} and itself")]
    SelfBond(usize),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
}

type SResult<T> = std::result::Result<T, SmilesError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Atom,
    BracketAtom,
    Bond,
    RingBond,
    BranchOpen,
    BranchClose,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesToken {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offset in the source string.
    pub position: usize,
}

/// Splits `s` into tokens; concatenating their texts reproduces `s`.
pub fn tokenize_smiles(s: &str) -> SResult<Vec<SmilesToken>> {
    if s.is_empty() {
        return Err(SmilesError::Empty);
    }
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let (kind, len) = match c {
            b'[' => {
                let close = b[i + 1..]
                    .iter()
                    .position(|&x| x == b']' || x == b'[')
                    .map(|p| p + i + 1);
                match close {
                    Some(j) if b[j] == b']' => (TokenKind::BracketAtom, j - i + 1),
                    _ => return Err(SmilesError::UnbalancedBracket { pos: i }),
                }
            }
            b']' => return Err(SmilesError::UnbalancedBracket { pos: i }),
            b'B' if b.get(i + 1) == Some(&b'r') => (TokenKind::Atom, 2),
            b'C' if b.get(i + 1) == Some(&b'l') => (TokenKind::Atom, 2),
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'*' => (TokenKind::Atom, 1),
            b'b' | b'c' | b'n' | b'o' | b'p' | b's' => (TokenKind::Atom, 1),
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => (TokenKind::Bond, 1),
            b'0'..=b'9' => (TokenKind::RingBond, 1),
            b'%' => {
                let ok = b.len() >= i + 3 && b[i + 1].is_ascii_digit() && b[i + 2].is_ascii_digit();
                if !ok {
                    return Err(SmilesError::DanglingPercent { pos: i });
                }
                (TokenKind::RingBond, 3)
            }
            b'(' => (TokenKind::BranchOpen, 1),
            b')' => (TokenKind::BranchClose, 1),
            b'.' => (TokenKind::Dot, 1),
            _ => {
                let ch = s[i..].chars().next().unwrap_or('?');
                return Err(SmilesError::IllegalChar { ch, pos: i });
            }
        };
        out.push(SmilesToken {
            kind,
            text: s[i..i + len].to_string(),
            position: i,
        });
        i += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    /// Element symbol with standard capitalisation (`c` is stored as `C`).
    pub element: String,
    pub aromatic: bool,
    pub charge: i8,
    /// Explicit hydrogen count from a bracket atom.
    pub hydrogens: Option<u8>,
    pub isotope: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub const ALL: [BondOrder; 4] = [
        BondOrder::Single,
        BondOrder::Double,
        BondOrder::Triple,
        BondOrder::Aromatic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_symbol(c: &str) -> Self {
        match c {
            "=" => BondOrder::Double,
            "#" => BondOrder::Triple,
            ":" => BondOrder::Aromatic,
            _ => BondOrder::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

/// Atom-bond graph; dot-separated components are disconnected parts of
/// one molecule.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl Molecule {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Relabels atoms: old atom `k` becomes atom `perm[k]`. Bond listing
    /// order and orientation are carried over.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut atoms = vec![None; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = Some(self.atoms[old].clone());
        }
        Molecule {
            atoms: atoms.into_iter().map(|a| a.expect("permutation")).collect(),
            bonds: self
                .bonds
                .iter()
                .map(|b| Bond {
                    i: perm[b.i],
                    j: perm[b.j],
                    order: b.order,
                })
                .collect(),
        }
    }
}

fn parse_bracket_atom(text: &str, pos: usize) -> SResult<Atom> {
    let bad = || SmilesError::BadBracketAtom {
        text: text.to_string(),
        pos,
    };
    let inner = &text[1..text.len() - 1];
    let b = inner.as_bytes();
    let mut i = 0;

    let digits = |i: &mut usize| -> Option<u32> {
        let start = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        (start < *i).then(|| inner[start..*i].parse().ok()).flatten()
    };

    let isotope = digits(&mut i).map(|v| u16::try_from(v).map_err(|_| bad())).transpose()?;

    let (element, aromatic) = match b.get(i) {
        Some(b'*') => {
            i += 1;
            ("*".to_string(), false)
        }
        Some(c) if c.is_ascii_uppercase() => {
            let mut sym = (*c as char).to_string();
            i += 1;
            if let Some(l) = b.get(i).filter(|l| l.is_ascii_lowercase()) {
                sym.push(*l as char);
                i += 1;
            }
            (sym, false)
        }
        Some(c) if c.is_ascii_lowercase() => {
            let two = inner.get(i..i + 2);
            let sym = match two {
                Some("se") | Some("as") => {
                    i += 2;
                    two.unwrap().to_string()
                }
                _ if matches!(c, b'b' | b'c' | b'n' | b'o' | b'p' | b's') => {
                    i += 1;
                    (*c as char).to_string()
                }
                _ => return Err(bad()),
            };
            let mut cs = sym.chars();
            let cap: String = cs
                .next()
                .map(|f| f.to_ascii_uppercase())
                .into_iter()
                .chain(cs)
                .collect();
            (cap, true)
        }
        _ => return Err(bad()),
    };

    while b.get(i) == Some(&b'@') {
        i += 1;
    }
    // extended chirality classes such as @TH1 / @SP2 / @OH12
    if i > 0 && b[i - 1] == b'@' && b.get(i).is_some_and(|c| c.is_ascii_uppercase() && *c != b'H') {
        i += 2;
        digits(&mut i);
    }

    let mut hydrogens = None;
    if b.get(i) == Some(&b'H') {
        i += 1;
        hydrogens = Some(digits(&mut i).map_or(Ok(1), |v| u8::try_from(v).map_err(|_| bad()))?);
    }

    let mut charge: i32 = 0;
    if let Some(&sign @ (b'+' | b'-')) = b.get(i) {
        let unit = if sign == b'+' { 1 } else { -1 };
        i += 1;
        if let Some(n) = digits(&mut i) {
            charge = unit * n as i32;
        } else {
            charge = unit;
            while b.get(i) == Some(&sign) {
                charge += unit;
                i += 1;
            }
        }
    }
    if b.get(i) == Some(&b':') {
        i += 1;
        digits(&mut i).ok_or_else(bad)?;
    }
    if i != b.len() {
        return Err(bad());
    }
    Ok(Atom {
        element,
        aromatic,
        charge: i8::try_from(charge).map_err(|_| bad())?,
        hydrogens,
        isotope,
    })
}

fn organic_atom(text: &str) -> Atom {
    let aromatic = text.chars().next().is_some_and(|c| c.is_ascii_lowercase());
    Atom {
        element: if aromatic {
            text.to_ascii_uppercase()
        } else {
            text.to_string()
        },
        aromatic,
        charge: 0,
        hydrogens: None,
        isotope: None,
    }
}

fn ring_label(text: &str) -> u32 {
    text.trim_start_matches('%').parse().expect("tokenizer guarantees digits")
}

struct Builder {
    mol: Molecule,
}

impl Builder {
    fn bond(&mut self, i: usize, j: usize, explicit: Option<BondOrder>) -> SResult<()> {
        if i == j {
            return Err(SmilesError::SelfBond(i));
        }
        if self
            .mol
            .bonds
            .iter()
            .any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i))
        {
            return Err(SmilesError::DuplicateBond(i.min(j), i.max(j)));
        }
        let order = explicit.unwrap_or_else(|| {
            if self.mol.atoms[i].aromatic && self.mol.atoms[j].aromatic {
                BondOrder::Aromatic
            } else {
                BondOrder::Single
            }
        });
        self.mol.bonds.push(Bond { i, j, order });
        Ok(())
    }
}

/// Parses a (possibly dot-separated) SMILES string into an atom-bond graph.
/// No valence or aromaticity checks are made.
pub fn parse_molecule(s: &str) -> SResult<Molecule> {
    let tokens = tokenize_smiles(s)?;
    let mut b = Builder {
        mol: Molecule::default(),
    };
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut branches: Vec<usize> = Vec::new();
    let mut rings: BTreeMap<u32, (usize, Option<BondOrder>)> = BTreeMap::new();

    for tok in &tokens {
        let pos = tok.position;
        match tok.kind {
            TokenKind::Atom | TokenKind::BracketAtom => {
                let atom = if tok.kind == TokenKind::Atom {
                    organic_atom(&tok.text)
                } else {
                    parse_bracket_atom(&tok.text, pos)?
                };
                b.mol.atoms.push(atom);
                let idx = b.mol.atoms.len() - 1;
                match (prev, pending.take()) {
                    (Some(p), bond) => b.bond(p, idx, bond.map(|(o, _)| o))?,
                    (None, Some((_, bpos))) => {
                        return Err(SmilesError::Unexpected {
                            what: "bond",
                            pos: bpos,
                        })
                    }
                    (None, None) => {}
                }
                prev = Some(idx);
            }
            TokenKind::Bond => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::Unexpected { what: "bond", pos });
                }
                pending = Some((BondOrder::from_symbol(&tok.text), pos));
            }
            TokenKind::RingBond => {
                let Some(p) = prev else {
                    return Err(SmilesError::Unexpected {
                        what: "ring bond",
                        pos,
                    });
                };
                let label = ring_label(&tok.text);
                let here = pending.take().map(|(o, _)| o);
                match rings.remove(&label) {
                    Some((open, there)) => b.bond(open, p, here.or(there))?,
                    None => {
                        rings.insert(label, (p, here));
                    }
                }
            }
            TokenKind::BranchOpen => {
                let Some(p) = prev else {
                    return Err(SmilesError::Unexpected { what: "'('", pos });
                };
                if pending.is_some() {
                    return Err(SmilesError::Unexpected { what: "'('", pos });
                }
                branches.push(p);
            }
            TokenKind::BranchClose => {
                if pending.is_some() {
                    return Err(SmilesError::Unexpected { what: "bond", pos });
                }
                prev = Some(
                    branches
                        .pop()
                        .ok_or(SmilesError::Unexpected { what: "')'", pos })?,
                );
            }
            TokenKind::Dot => {
                if pending.is_some() || !branches.is_empty() || prev.is_none() {
                    return Err(SmilesError::Unexpected { what: "'.'", pos });
                }
                prev = None;
            }
        }
    }
    if let Some((_, pos)) = pending {
        return Err(SmilesError::Unexpected { what: "bond", pos });
    }
    if !branches.is_empty() {
        return Err(SmilesError::UnclosedBranch);
    }
    if let Some((&label, _)) = rings.iter().next() {
        return Err(SmilesError::UnclosedRing { label });
    }
    if b.mol.atoms.is_empty() {
        return Err(SmilesError::Empty);
    }
    Ok(b.mol)
}

impl fmt::Display for BondOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BondOrder::Single => "single",
            BondOrder::Double => "double",
            BondOrder::Triple => "triple",
            BondOrder::Aromatic => "aromatic",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize_smiles(s).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn tokenize_branches() {
        assert_eq!(texts("CC(C)O"), ["C", "C", "(", "C", ")", "O"]);
    }

    #[test]
    fn tokenize_ion_pair() {
        let toks = tokenize_smiles("[Cl-].[NH4+]").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            [TokenKind::BracketAtom, TokenKind::Dot, TokenKind::BracketAtom]
        );
        assert_eq!(toks[0].text, "[Cl-]");
        assert_eq!(toks[2].text, "[NH4+]");
        assert_eq!(toks[2].position, 6);
    }

    #[test]
    fn tokenize_aromatic_ring_with_bromine() {
        // six aromatic carbons, two ring-bond digits, one Br
        let t = texts("c1ccccc1Br");
        assert_eq!(t.len(), 9);
        assert_eq!(t.last().unwrap(), "Br");
        assert_eq!(t[1], "1");
    }

    #[test]
    fn tokenize_percent_ring() {
        assert_eq!(texts("C%12CC%12"), ["C", "%12", "C", "C", "%12"]);
        assert!(matches!(
            tokenize_smiles("C%1"),
            Err(SmilesError::DanglingPercent { pos: 1 })
        ));
    }

    #[test]
    fn tokenize_errors() {
        assert!(matches!(
            tokenize_smiles("[Na+"),
            Err(SmilesError::UnbalancedBracket { pos: 0 })
        ));
        assert!(matches!(
            tokenize_smiles("C]"),
            Err(SmilesError::UnbalancedBracket { .. })
        ));
        assert!(matches!(
            tokenize_smiles("CXC"),
            Err(SmilesError::IllegalChar { ch: 'X', pos: 1 })
        ));
        assert!(matches!(tokenize_smiles(""), Err(SmilesError::Empty)));
    }

    #[test]
    fn parse_isopropanol() {
        let m = parse_molecule("CC(C)O").unwrap();
        let els: Vec<_> = m.atoms.iter().map(|a| a.element.as_str()).collect();
        assert_eq!(els, ["C", "C", "C", "O"]);
        assert_eq!(m.bond_count(), 3);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Single));
        assert!(m.bonds.contains(&Bond {
            i: 1,
            j: 2,
            order: BondOrder::Single
        }));
        assert!(m.bonds.contains(&Bond {
            i: 1,
            j: 3,
            order: BondOrder::Single
        }));
    }

    #[test]
    fn parse_thf_ring() {
        let m = parse_molecule("C1CCOC1").unwrap();
        assert_eq!((m.atom_count(), m.bond_count()), (5, 5));
    }

    #[test]
    fn parse_single_atom() {
        let m = parse_molecule("O").unwrap();
        assert_eq!((m.atom_count(), m.bond_count()), (1, 0));
    }

    #[test]
    fn parse_aromatic_and_explicit_bonds() {
        let m = parse_molecule("c1ccccc1C=O").unwrap();
        assert_eq!(m.atom_count(), 8);
        assert_eq!(
            m.bonds
                .iter()
                .filter(|b| b.order == BondOrder::Aromatic)
                .count(),
            6
        );
        assert_eq!(m.bonds.last().unwrap().order, BondOrder::Double);
        assert!(m.atoms[0].aromatic && !m.atoms[6].aromatic);
    }

    #[test]
    fn parse_bracket_details() {
        let m = parse_molecule("[13CH3-].[NH4+].[Zn].[nH]1cccc1").unwrap();
        assert_eq!(m.atoms[0].isotope, Some(13));
        assert_eq!(m.atoms[0].hydrogens, Some(3));
        assert_eq!(m.atoms[0].charge, -1);
        assert_eq!(m.atoms[1].charge, 1);
        assert_eq!(m.atoms[2].element, "Zn");
        assert!(m.atoms[3].aromatic);
        assert_eq!(m.atoms[3].element, "N");
        let m = parse_molecule("[Fe+++].[O--].[C@@H](F)(Cl)Br").unwrap();
        assert_eq!(m.atoms[0].charge, 3);
        assert_eq!(m.atoms[1].charge, -2);
        assert_eq!(m.atoms[2].hydrogens, Some(1));
    }

    #[test]
    fn dots_disconnect() {
        let m = parse_molecule("CO.[Na+].CC(=O)O").unwrap();
        assert_eq!(m.atom_count(), 7);
        assert_eq!(m.bond_count(), 4);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_molecule("C1CC"),
            Err(SmilesError::UnclosedRing { label: 1 })
        ));
        assert!(matches!(parse_molecule("CC(C"), Err(SmilesError::UnclosedBranch)));
        assert!(matches!(
            parse_molecule("CC)C"),
            Err(SmilesError::Unexpected { .. })
        ));
        assert!(matches!(parse_molecule("C="), Err(SmilesError::Unexpected { .. })));
        assert!(matches!(parse_molecule("C11"), Err(SmilesError::SelfBond(0))));
        assert!(matches!(
            parse_molecule("C12CC12"),
            Err(SmilesError::DuplicateBond(0, 2))
        ));
        assert!(matches!(
            parse_molecule("[C+x]"),
            Err(SmilesError::BadBracketAtom { .. })
        ));
        assert!(matches!(
            parse_molecule("[+]"),
            Err(SmilesError::BadBracketAtom { .. })
        ));
    }

    #[test]
    fn ring_bond_order_from_either_end() {
        let m = parse_molecule("C=1CCC1").unwrap();
        assert_eq!(m.bonds.last().unwrap().order, BondOrder::Double);
        let m = parse_molecule("C1CCC=1").unwrap();
        assert_eq!(m.bonds.last().unwrap().order, BondOrder::Double);
    }

    fn smiles_strategy() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("C".to_string()),
            Just("c1ccccc1".to_string()),
            Just("Cl".to_string()),
            Just("Br".to_string()),
            Just("O".to_string()),
            Just("N".to_string()),
            Just("C(=O)O".to_string()),
            Just("[Na+]".to_string()),
            Just("C#N".to_string()),
            Just("C1CCOC1".to_string()),
            Just("[nH]1cccc1".to_string()),
            Just(".".to_string()),
        ];
        prop::collection::vec(piece, 1..8).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn token_roundtrip_and_atom_count(s in smiles_strategy()) {
            if let Ok(toks) = tokenize_smiles(&s) {
                let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
                prop_assert_eq!(&joined, &s);
                if let Ok(m) = parse_molecule(&s) {
                    let atoms = toks.iter().filter(|t| matches!(t.kind, TokenKind::Atom | TokenKind::BracketAtom)).count();
                    prop_assert_eq!(m.atom_count(), atoms);
                    for bond in &m.bonds {
                        prop_assert!(bond.i != bond.j);
                        prop_assert!(bond.i < m.atom_count() && bond.j < m.atom_count());
                    }
                }
            }
        }

        #[test]
        fn arbitrary_ascii_never_panics(s in "[ -~]{0,24}") {
            if let Ok(toks) = tokenize_smiles(&s) {
                let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
                prop_assert_eq!(&joined, &s);
            }
            let _ = parse_molecule(&s);
        }
    }
}
