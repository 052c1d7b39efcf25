//! Relational graph convolution over molecule graphs and the fused
//! reaction-graph embedding.

use rand::Rng;

use crate::autograd::{concat_cols, concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::smiles::{BondOrder, Molecule};
use crate::tensor::Tensor;

/// Element symbols with a dedicated one-hot slot; anything else maps to
/// the trailing "other" slot.
pub const ELEMENTS: [&str; 16] = [
    "C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "B", "Si", "Na", "K", "Li", "Pd", "Zn",
];

/// One-hot element (+ other), aromatic flag, charge sign.
pub const ATOM_FEATURES: usize = ELEMENTS.len() + 3;

/// Bond orders × {forward, reverse}.
pub const RELATIONS: usize = 8;

/// Relation index of a bond order in the listed (`forward`) or opposite
/// direction.
pub fn relation_of(order: BondOrder, reverse: bool) -> usize {
    order.index() * 2 + reverse as usize
}

/// Directed, labelled multigraph. Edge `(i, j, r)` means node `i` receives
/// a message from node `j` under relation `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelGraph<T> {
    pub node_features: Tensor<T>,
    pub edges: Vec<(usize, usize, usize)>,
    pub relation_count: usize,
}

impl<T: Scalar> RelGraph<T> {
    pub fn from_molecule(m: &Molecule) -> Result<Self> {
        if m.atoms.is_empty() {
            return Err(Error::Invalid("empty molecule".into()));
        }
        let mut feats = vec![T::zero(); m.atoms.len() * ATOM_FEATURES];
        for (k, atom) in m.atoms.iter().enumerate() {
            let row = &mut feats[k * ATOM_FEATURES..(k + 1) * ATOM_FEATURES];
            let slot = ELEMENTS
                .iter()
                .position(|e| *e == atom.element)
                .unwrap_or(ELEMENTS.len());
            row[slot] = T::one();
            if atom.aromatic {
                row[ELEMENTS.len() + 1] = T::one();
            }
            row[ELEMENTS.len() + 2] = T::from_f64_lossy(f64::from(atom.charge.signum()));
        }
        let mut edges = Vec::with_capacity(m.bonds.len() * 2);
        for b in &m.bonds {
            edges.push((b.j, b.i, relation_of(b.order, false)));
            edges.push((b.i, b.j, relation_of(b.order, true)));
        }
        Ok(Self {
            node_features: Tensor::from_vec(&[m.atoms.len(), ATOM_FEATURES], feats)?,
            edges,
            relation_count: RELATIONS,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_features.rows()
    }

    /// Relabels nodes: old node `k` becomes node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count();
        let c = self.node_features.cols();
        let mut feats = vec![T::zero(); n * c];
        for (old, &new) in perm.iter().enumerate() {
            feats[new * c..(new + 1) * c].copy_from_slice(self.node_features.row(old));
        }
        Self {
            node_features: Tensor::from_vec(&[n, c], feats).expect("same shape"),
            edges: self
                .edges
                .iter()
                .map(|&(i, j, r)| (perm[i], perm[j], r))
                .collect(),
            relation_count: self.relation_count,
        }
    }

    /// Row-normalised adjacency per relation: `A_r[i][j] = count / c_{i,r}`.
    /// `None` for relations without edges.
    fn normalized_adjacency(&self) -> Result<Vec<Option<Tensor<T>>>> {
        let n = self.node_count();
        let mut counts = vec![vec![0usize; n * n]; self.relation_count];
        for &(i, j, r) in &self.edges {
            if r >= self.relation_count {
                return Err(Error::IndexOutOfRange {
                    what: "relation",
                    index: r,
                    bound: self.relation_count,
                });
            }
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange {
                    what: "edge endpoint",
                    index: i.max(j),
                    bound: n,
                });
            }
            counts[r][i * n + j] += 1;
        }
        Ok(counts
            .into_iter()
            .map(|c| {
                if c.iter().all(|&x| x == 0) {
                    return None;
                }
                let mut a = vec![T::zero(); n * n];
                for i in 0..n {
                    let deg: usize = c[i * n..(i + 1) * n].iter().sum();
                    if deg == 0 {
                        continue;
                    }
                    let inv = T::from_f64_lossy(1.0 / deg as f64);
                    for j in 0..n {
                        a[i * n + j] = T::from_usize(c[i * n + j]).expect("count") * inv;
                    }
                }
                Some(Tensor::from_vec(&[n, n], a).expect("square"))
            })
            .collect())
    }
}

/// Per-relation weights `W_r` and the self-loop weight `W₀`, no bias.
#[derive(Debug, Clone)]
pub struct RgcnLayer {
    pub relation_weights: Vec<String>,
    pub self_weight: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl RgcnLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        relations: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (in_dim as f64).powf(-0.5);
        let relation_weights = (0..relations)
            .map(|r| {
                let n = format!("{name}.rel{r}");
                store.init_normal(&n, &[in_dim, out_dim], std, rng);
                n
            })
            .collect();
        let self_weight = format!("{name}.self");
        store.init_normal(&self_weight, &[in_dim, out_dim], std, rng);
        Self {
            relation_weights,
            self_weight,
            in_dim,
            out_dim,
        }
    }
}

/// `h_i ← ReLU(Σ_r Σ_{j∈N_i^r} W_r h_j / c_{i,r} + W₀ h_i)` for each layer.
pub fn rgcn_forward<'a, T: Scalar>(
    tape: &'a Tape<'a, T>,
    g: &RelGraph<T>,
    layers: &[RgcnLayer],
) -> Result<Var<'a, T>> {
    if let Some(first) = layers.first() {
        if first.in_dim != g.node_features.cols() {
            return Err(Error::ShapeMismatch {
                op: "rgcn",
                left: g.node_features.shape().to_vec(),
                right: vec![first.in_dim, first.out_dim],
            });
        }
    }
    let adjacency = g.normalized_adjacency()?;
    let mut h = tape.constant(g.node_features.clone());
    for layer in layers {
        if adjacency.len() > layer.relation_weights.len() {
            if let Some(r) = adjacency
                .iter()
                .enumerate()
                .skip(layer.relation_weights.len())
                .find_map(|(r, a)| a.as_ref().map(|_| r))
            {
                return Err(Error::IndexOutOfRange {
                    what: "relation",
                    index: r,
                    bound: layer.relation_weights.len(),
                });
            }
        }
        let mut acc = h.matmul(tape.param(&layer.self_weight)?)?;
        for (a, w) in adjacency.iter().zip(&layer.relation_weights) {
            if let Some(a) = a {
                let msg = tape.constant(a.clone()).matmul(h)?;
                acc = acc.add(msg.matmul(tape.param(w)?)?)?;
            }
        }
        h = acc.relu();
    }
    Ok(h)
}

/// R-GCN stack plus the linear readout over `[mean reactants ∥ mean products]`.
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub layers: Vec<RgcnLayer>,
    pub readout: Linear,
    pub hidden: usize,
}

impl GraphEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let in_dim = if l == 0 { ATOM_FEATURES } else { hidden };
                RgcnLayer::new(store, &format!("{prefix}.layer{l}"), RELATIONS, in_dim, hidden, rng)
            })
            .collect();
        Self {
            layers,
            readout: Linear::new(store, &format!("{prefix}.readout"), 2 * hidden, out_dim, true, rng),
            hidden,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.readout.out_dim
    }

    /// Mean-pooled final node states, `[1 × hidden]`.
    pub fn molecule_embed<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        m: &Molecule,
    ) -> Result<Var<'a, T>> {
        let g = RelGraph::from_molecule(m)?;
        Ok(rgcn_forward(tape, &g, &self.layers)?.mean_rows())
    }

    /// Pre-readout concatenation `[1 × 2·hidden]`.
    pub fn side_means<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        reactants: &[Molecule],
        products: &[Molecule],
    ) -> Result<Var<'a, T>> {
        let side = |mols: &[Molecule], what: &str| -> Result<Var<'a, T>> {
            if mols.is_empty() {
                return Err(Error::Invalid(format!("no {what}")));
            }
            let embs = mols
                .iter()
                .map(|m| self.molecule_embed(tape, m))
                .collect::<Result<Vec<_>>>()?;
            Ok(if embs.len() == 1 {
                embs[0]
            } else {
                concat_rows(&embs)?.mean_rows()
            })
        };
        concat_cols(&[side(reactants, "reactants")?, side(products, "products")?])
    }

    /// Reaction embedding `[1 × C_g]`.
    pub fn reaction_embed<'a, T: Scalar>(
        &self,
        tape: &'a Tape<'a, T>,
        reactants: &[Molecule],
        products: &[Molecule],
    ) -> Result<Var<'a, T>> {
        let cat = self.side_means(tape, reactants, products)?;
        self.readout.forward(tape, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_molecule;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64) -> (ParamStore<f64>, GraphEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = GraphEncoder::new(&mut store, "graph", 16, 2, 8, &mut rng);
        (store, enc)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        store.insert("l.self", Tensor::eye(3));
        for r in 0..2 {
            store.insert(format!("l.rel{r}"), Tensor::zeros(&[3, 3]));
        }
        let layer = RgcnLayer {
            relation_weights: vec!["l.rel0".into(), "l.rel1".into()],
            self_weight: "l.self".into(),
            in_dim: 3,
            out_dim: 3,
        };
        let x = Tensor::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.25]]).unwrap();
        let g = RelGraph {
            node_features: x.clone(),
            edges: vec![(0, 1, 0), (1, 0, 1)],
            relation_count: 2,
        };
        let tape = Tape::with_params(&store);
        let out = rgcn_forward(&tape, &g, &[layer]).unwrap().value();
        assert_eq!(*out, x);
    }

    #[test]
    fn two_node_hand_computation() {
        // node 0 receives from node 1 only; node 1 has no in-edges
        let mut store = ParamStore::<f64>::new();
        store.insert("l.self", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap());
        store.insert("l.rel0", Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let layer = RgcnLayer {
            relation_weights: vec!["l.rel0".into()],
            self_weight: "l.self".into(),
            in_dim: 2,
            out_dim: 2,
        };
        let g = RelGraph {
            node_features: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap(),
            edges: vec![(0, 1, 0)],
            relation_count: 1,
        };
        let tape = Tape::with_params(&store);
        let out = rgcn_forward(&tape, &g, &[layer]).unwrap().value();
        // node 0: self [1,-2] + msg [3,-1]·W_r = [6, 2] → [7, 0]
        // node 1: self [3, 1] → [3, 1]
        assert_eq!(out.data(), &[7.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn normalization_averages_neighbours() {
        let mut store = ParamStore::<f64>::new();
        store.insert("l.self", Tensor::zeros(&[1, 1]));
        store.insert("l.rel0", Tensor::eye(1));
        let layer = RgcnLayer {
            relation_weights: vec!["l.rel0".into()],
            self_weight: "l.self".into(),
            in_dim: 1,
            out_dim: 1,
        };
        let g = RelGraph {
            node_features: Tensor::from_rows(&[vec![0.0], vec![2.0], vec![4.0]]).unwrap(),
            edges: vec![(0, 1, 0), (0, 2, 0)],
            relation_count: 1,
        };
        let tape = Tape::with_params(&store);
        let out = rgcn_forward(&tape, &g, &[layer]).unwrap().value();
        assert_eq!(out.data(), &[3.0, 0.0, 0.0]);
    }

    #[test]
    fn relation_out_of_range() {
        let (store, enc) = encoder(1);
        let mut g = RelGraph::<f64>::from_molecule(&parse_molecule("CC").unwrap()).unwrap();
        g.edges.push((0, 1, RELATIONS));
        let tape = Tape::with_params(&store);
        assert!(rgcn_forward(&tape, &g, &enc.layers).is_err());
    }

    #[test]
    fn single_atom_pooling_is_node_state() {
        let (store, enc) = encoder(2);
        let m = parse_molecule("O").unwrap();
        let tape = Tape::with_params(&store);
        let g = RelGraph::from_molecule(&m).unwrap();
        let nodes = rgcn_forward(&tape, &g, &enc.layers).unwrap().value();
        let pooled = enc.molecule_embed(&tape, &m).unwrap().value();
        assert_eq!(pooled.data(), nodes.data());
    }

    #[test]
    fn water_and_methane_differ() {
        let (store, enc) = encoder(3);
        let tape = Tape::with_params(&store);
        let o = enc.molecule_embed(&tape, &parse_molecule("O").unwrap()).unwrap().value();
        let c = enc.molecule_embed(&tape, &parse_molecule("C").unwrap()).unwrap().value();
        assert!(o.max_abs_diff(&c) > 1e-6);
    }

    #[test]
    fn empty_molecule_rejected() {
        assert!(RelGraph::<f64>::from_molecule(&Molecule::default()).is_err());
    }

    #[test]
    fn node_permutation_equivariance() {
        let (store, enc) = encoder(4);
        let m = parse_molecule("CC(C)OC(=O)n1ccnc1").unwrap();
        let g = RelGraph::<f64>::from_molecule(&m).unwrap();
        let tape = Tape::with_params(&store);
        let base = rgcn_forward(&tape, &g, &enc.layers).unwrap().value();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..g.node_count()).collect();
            perm.shuffle(&mut rng);
            let out = rgcn_forward(&tape, &g.permuted(&perm), &enc.layers).unwrap().value();
            for (old, &new) in perm.iter().enumerate() {
                for (a, b) in base.row(old).iter().zip(out.row(new)) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn identity_reaction_halves_match() {
        let (store, enc) = encoder(5);
        let m = parse_molecule("CCO").unwrap();
        let tape = Tape::with_params(&store);
        let cat = enc.side_means(&tape, &[m.clone()], &[m]).unwrap().value();
        let h = enc.hidden;
        assert_eq!(&cat.data()[..h], &cat.data()[h..]);
    }

    #[test]
    fn reactant_order_does_not_matter() {
        let (store, enc) = encoder(6);
        let a = parse_molecule("CC(C)O").unwrap();
        let b = parse_molecule("O=C(n1ccnc1)n1ccnc1").unwrap();
        let p = parse_molecule("CC(C)OC(=O)n1ccnc1").unwrap();
        let tape = Tape::with_params(&store);
        let x = enc.reaction_embed(&tape, &[a.clone(), b.clone()], &[p.clone()]).unwrap().value();
        let y = enc.reaction_embed(&tape, &[b, a], &[p]).unwrap().value();
        assert!(x.max_abs_diff(&y) < 1e-12);
        assert_eq!(x.shape(), &[1, 8]);
    }
}
