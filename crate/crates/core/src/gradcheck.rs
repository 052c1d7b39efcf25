//! Central-difference gradient checks for every differentiable op, the
//! model components and the composed model, all in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{concat_cols, concat_rows, Reduction, Tape, Var};
use crate::decoder::{classification_loss, ContextTokens, DecoderConfig, SlotHeads, TinyDecoder};
use crate::error::Result;
use crate::graph::{rgcn_forward, GraphEncoder, RelGraph, RgcnLayer, ATOM_FEATURES, RELATIONS};
use crate::model::{encode_example, MmRcr, ModelConfig, Task};
use crate::nn::{key_padding_mask, Linear, MultiHeadAttention, PreNormBlock};
use crate::params::ParamStore;
use crate::projector::{PerceiverProjector, ProjectorConfig};
use crate::prompts::{build_qa_dataset, TemplateBank};
use crate::reaction::Grouping;
use crate::seeds::derive_seed;
use crate::seq_encoder::{SeqEncoder, SeqEncoderConfig};
use crate::smiles::parse_molecule;
use crate::synthetic::{condition_records, joined_records, BLOCKS};
use crate::tensor::Tensor;
use crate::vocab::{EOS, PAD};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients near zero are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub configs: usize,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random configurations per check.
    pub configs: usize,
    /// Coordinates sampled per parameter tensor.
    pub samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 20,
            samples: 6,
        }
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape<'a, f64>) -> Result<Var<'a, f64>>,
{
    let tape = Tape::inference(store);
    f(&tape)?.value().item()
}

/// Max relative error over up to `samples` coordinates of every tensor in
/// `store`, and the number of coordinates checked.
pub fn check_store<F>(store: &mut ParamStore<f64>, f: F, samples: usize, rng: &mut ChaCha8Rng) -> Result<(usize, f64)>
where
    F: for<'a> Fn(&'a Tape<'a, f64>) -> Result<Var<'a, f64>>,
{
    let analytic: Vec<(String, Tensor<f64>)> = {
        let tape = Tape::with_params(store);
        let loss = f(&tape)?;
        let grads = tape.backward(loss)?;
        store
            .iter()
            .map(|(name, p)| {
                let g = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.to_string(), g)
            })
            .collect()
    };
    let (mut coords, mut worst) = (0, 0.0f64);
    for (name, grad) in &analytic {
        let n = grad.len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(rng, n, samples).into_vec()
        };
        for idx in picks {
            let orig = store.get(name)?.data()[idx];
            store.value_mut(name)?.data_mut()[idx] = orig + FD_STEP;
            let up = eval(store, &f)?;
            store.value_mut(name)?.data_mut()[idx] = orig - FD_STEP;
            let down = eval(store, &f)?;
            store.value_mut(name)?.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(grad.data()[idx], numeric);
            if !e.is_finite() {
                return Ok((coords + 1, f64::INFINITY));
            }
            worst = worst.max(e);
            coords += 1;
        }
    }
    Ok((coords, worst))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project<'a>(tape: &'a Tape<'a, f64>, out: Var<'a, f64>, r: &Tensor<f64>) -> Result<Var<'a, f64>> {
    Ok(out.reshape(r.shape())?.mul(tape.constant(r.clone()))?.sum())
}

/// Per-configuration extras an op may need.
#[derive(Debug, Clone)]
struct Aux {
    mask: Vec<bool>,
    ids: Vec<usize>,
    targets: Vec<usize>,
    s: f64,
    start: usize,
    len: usize,
    cstart: usize,
    clen: usize,
}

type Shapes = fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>;
type Body = for<'a> fn(&[Var<'a, f64>], &Aux) -> Result<Var<'a, f64>>;

struct OpCase {
    name: &'static str,
    shapes: Shapes,
    body: Body,
    /// Keeps inputs away from the ReLU kink.
    away_from_zero: bool,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..=5)
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = vec![dim(rng), dim(rng)];
    vec![s.clone(), s]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![vec![dim(rng), dim(rng)]]
}

fn with_row(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (m, n) = (dim(rng), dim(rng));
    vec![vec![m, n], vec![n]]
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: Shapes, body: Body) -> OpCase {
        OpCase {
            name,
            shapes,
            body,
            away_from_zero: false,
        }
    }
    vec![
        case(
            "matmul",
            |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                vec![vec![m, k], vec![k, n]]
            },
            |v, _| v[0].matmul(v[1]),
        ),
        case(
            "matmul_nt",
            |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                vec![vec![m, k], vec![n, k]]
            },
            |v, _| v[0].matmul_nt(v[1]),
        ),
        case("add", two_same, |v, _| v[0].add(v[1])),
        case("sub", two_same, |v, _| v[0].sub(v[1])),
        case("mul", two_same, |v, _| v[0].mul(v[1])),
        case("add_row", with_row, |v, _| v[0].add_row(v[1])),
        case("mul_row", with_row, |v, _| v[0].mul_row(v[1])),
        case("scale", one, |v, a| Ok(v[0].scale(a.s))),
        OpCase {
            name: "relu",
            shapes: one,
            body: |v, _| Ok(v[0].relu()),
            away_from_zero: true,
        },
        case("silu", one, |v, _| Ok(v[0].silu())),
        case("normalize_rows", one, |v, _| Ok(v[0].normalize_rows())),
        case(
            "layer_norm",
            |r| {
                let (m, n) = (dim(r), dim(r));
                vec![vec![m, n], vec![n], vec![n]]
            },
            |v, _| v[0].layer_norm(v[1], v[2]),
        ),
        case("softmax", one, |v, _| v[0].softmax(None)),
        case("softmax_masked", one, |v, a| v[0].softmax(Some(&a.mask))),
        case("sum", one, |v, _| Ok(v[0].sum())),
        case("mean_rows", one, |v, _| Ok(v[0].mean_rows())),
        case("transpose", one, |v, _| Ok(v[0].transpose())),
        case("reshape", one, |v, _| {
            let n = v[0].value().len();
            v[0].reshape(&[1, n])
        }),
        case("slice_rows", one, |v, a| v[0].slice_rows(a.start, a.len)),
        case("slice_cols", one, |v, a| v[0].slice_cols(a.cstart, a.clen)),
        case("gather_rows", one, |v, a| v[0].gather_rows(&a.ids)),
        case(
            "concat_rows",
            |r| {
                let n = dim(r);
                vec![vec![dim(r), n], vec![dim(r), n]]
            },
            |v, _| concat_rows(&[v[0], v[1]]),
        ),
        case(
            "concat_cols",
            |r| {
                let m = dim(r);
                vec![vec![m, dim(r)], vec![m, dim(r)]]
            },
            |v, _| concat_cols(&[v[0], v[1]]),
        ),
        case("cross_entropy_mean", one, |v, a| v[0].cross_entropy(&a.targets, Reduction::Mean)),
        case("cross_entropy_sum", one, |v, a| v[0].cross_entropy(&a.targets, Reduction::Sum)),
    ]
}

fn aux_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Aux {
    let (m, n) = (shape[0], shape[1]);
    let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.6)).collect();
    for i in 0..m {
        let j = rng.random_range(0..n);
        mask[i * n + j] = true;
    }
    let start = rng.random_range(0..m);
    let cstart = rng.random_range(0..n);
    Aux {
        mask,
        ids: (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..m)).collect(),
        targets: (0..m).map(|_| rng.random_range(0..n)).collect(),
        s: rng.random_range(-2.0..2.0),
        start,
        len: rng.random_range(1..=m - start),
        cstart,
        clen: rng.random_range(1..=n - cstart),
    }
}

fn run_op(case: &OpCase, opts: &SuiteOptions) -> Result<CheckOutcome> {
    let mut out = CheckOutcome {
        name: format!("op/{}", case.name),
        configs: 0,
        coords: 0,
        max_rel_err: 0.0,
    };
    for c in 0..opts.configs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("{}#{c}", case.name)));
        let shapes = (case.shapes)(&mut rng);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            let mut t = Tensor::randn(s, 1.0, &mut rng);
            if case.away_from_zero {
                t = t.map(|x: f64| x + 0.1 * x.signum());
            }
            store.insert(format!("x{i}"), t);
        }
        let aux = aux_for(&shapes[0], &mut rng);
        let n_inputs = shapes.len();
        let body = case.body;
        let out_shape = {
            let tape = Tape::inference(&store);
            let vars = (0..n_inputs)
                .map(|i| tape.param(&format!("x{i}")))
                .collect::<Result<Vec<_>>>()?;
            body(&vars, &aux)?.value().shape().to_vec()
        };
        let r = Tensor::randn(&out_shape, 1.0, &mut rng);
        let (coords, err) = check_store(
            &mut store,
            |tape| {
                let vars = (0..n_inputs)
                    .map(|i| tape.param(&format!("x{i}")))
                    .collect::<Result<Vec<_>>>()?;
                project(tape, body(&vars, &aux)?, &r)
            },
            opts.samples,
            &mut rng,
        )?;
        out.configs += 1;
        out.coords += coords;
        out.max_rel_err = out.max_rel_err.max(err);
    }
    Ok(out)
}

fn merge(name: &str, parts: impl IntoIterator<Item = Result<(usize, f64)>>) -> Result<CheckOutcome> {
    let mut out = CheckOutcome {
        name: name.into(),
        configs: 0,
        coords: 0,
        max_rel_err: 0.0,
    };
    for p in parts {
        let (c, e) = p?;
        out.configs += 1;
        out.coords += c;
        out.max_rel_err = out.max_rel_err.max(e);
    }
    Ok(out)
}

fn config_rng(opts: &SuiteOptions, name: &str, c: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("{name}#{c}")))
}

fn check_linear(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/linear",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "linear", c);
            let (m, i, o) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "lin", i, o, true, &mut rng);
            store.insert("x", Tensor::randn(&[m, i], 1.0, &mut rng));
            // bias starts at zero; move it off so its gradient path is exercised
            store.set("lin.bias", Tensor::randn(&[o], 0.5, &mut rng))?;
            let r = Tensor::randn(&[m, o], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| {
                    let x = t.param("x")?;
                    project(t, lin.forward(t, x)?, &r)
                },
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_attention(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/attention",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "attention", c);
            let heads = rng.random_range(1..=2);
            let width = heads * rng.random_range(2..=3);
            let (q, k) = (dim(&mut rng), dim(&mut rng));
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "mha", width, heads, &mut rng)?;
            store.insert("x", Tensor::randn(&[q, width], 1.0, &mut rng));
            store.insert("kv", Tensor::randn(&[k, width], 1.0, &mut rng));
            let mut visible: Vec<bool> = (0..k).map(|_| rng.random_bool(0.7)).collect();
            visible[0] = true;
            let mask = key_padding_mask(q, &visible);
            let r = Tensor::randn(&[q, width], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| {
                    let x = t.param("x")?;
                    let kv = mha.key_values(t, t.param("kv")?)?;
                    project(t, mha.attend(t, x, kv, Some(&mask))?, &r)
                },
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_block(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/prenorm_block",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "block", c);
            let width = 2 * rng.random_range(2..=3);
            let n = dim(&mut rng);
            let mut store = ParamStore::new();
            let block = PreNormBlock::new(&mut store, "blk", width, 2, 2, &mut rng)?;
            store.insert("x", Tensor::randn(&[n, width], 1.0, &mut rng));
            let mask: Vec<bool> = (0..n * n).map(|k| k % n <= k / n).collect();
            let r = Tensor::randn(&[n, width], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| {
                    let x = t.param("x")?;
                    project(t, block.forward(t, x, Some(&mask))?, &r)
                },
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn random_molecule(rng: &mut ChaCha8Rng) -> Result<crate::smiles::Molecule> {
    Ok(parse_molecule(BLOCKS[rng.random_range(0..BLOCKS.len())])?)
}

fn check_rgcn(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/rgcn",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "rgcn", c);
            let mol = random_molecule(&mut rng)?;
            let g = RelGraph::<f64>::from_molecule(&mol)?;
            let (h1, h2) = (dim(&mut rng), dim(&mut rng));
            let mut store = ParamStore::new();
            let layers = vec![
                RgcnLayer::new(&mut store, "l0", RELATIONS, ATOM_FEATURES, h1, &mut rng),
                RgcnLayer::new(&mut store, "l1", RELATIONS, h1, h2, &mut rng),
            ];
            let r = Tensor::randn(&[g.node_count(), h2], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| project(t, rgcn_forward(t, &g, &layers)?, &r),
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_graph_encoder(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/graph_encoder",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "graph_encoder", c);
            let reactants = vec![random_molecule(&mut rng)?, random_molecule(&mut rng)?];
            let products = vec![random_molecule(&mut rng)?];
            let out = dim(&mut rng);
            let mut store = ParamStore::new();
            let enc = GraphEncoder::new(&mut store, "graph", dim(&mut rng), 2, out, &mut rng);
            let r = Tensor::randn(&[1, out], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| project(t, enc.reaction_embed(t, &reactants, &products)?, &r),
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_seq_encoder(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/seq_encoder",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "seq_encoder", c);
            let cfg = SeqEncoderConfig {
                vocab_size: 9,
                max_len: 8,
                width: 4,
                heads: 2,
                layers: 1,
                ffn_mult: 2,
            };
            let mut store = ParamStore::new();
            let enc = SeqEncoder::new(&mut store, "enc", cfg, &mut rng)?;
            let n = rng.random_range(2..=6);
            let mut tokens: Vec<usize> = (0..n).map(|_| rng.random_range(1..9)).collect();
            for _ in 0..rng.random_range(0..=2) {
                tokens.push(PAD);
            }
            let r = Tensor::randn(&[8, 4], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| project(t, enc.encode(t, &tokens, PAD)?, &r),
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_projector(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/projector",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "projector", c);
            let n = dim(&mut rng);
            let vocab = dim(&mut rng);
            let cfg = ProjectorConfig {
                in_width: 3,
                width: 4,
                llm_width: 6,
                tokens: rng.random_range(1..=4),
                capacity: n + vocab + rng.random_range(0..=1),
                heads: 2,
                tower_depth: 1,
                ffn_mult: 2,
            };
            let mut store = ParamStore::new();
            let proj = PerceiverProjector::new(&mut store, "proj", cfg.clone(), &mut rng)?;
            store.insert("x", Tensor::randn(&[n, 3], 1.0, &mut rng));
            store.insert("words", Tensor::randn(&[vocab, 6], 1.0, &mut rng));
            let r = Tensor::randn(&[cfg.tokens, 6], 1.0, &mut rng);
            check_store(
                &mut store,
                |t| project(t, proj.project(t, t.param("x")?, t.param("words")?)?, &r),
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn tiny_decoder(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, vocab_size: usize) -> Result<TinyDecoder> {
    TinyDecoder::new(
        store,
        "decoder",
        "heads",
        DecoderConfig {
            vocab_size,
            width: 4,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            max_positions: 16,
        },
        rng,
    )
}

fn check_generation_loss(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/decoder_generation",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "decoder_generation", c);
            let mut store = ParamStore::new();
            let dec = tiny_decoder(&mut store, &mut rng, 8)?;
            let n = dim(&mut rng);
            store.insert("ctx", Tensor::randn(&[n, 4], 1.0, &mut rng));
            let mut target: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(3..8)).collect();
            target.push(EOS);
            check_store(
                &mut store,
                |t| {
                    let ctx = ContextTokens {
                        tokens: t.param("ctx")?,
                        mask: vec![true; n],
                    };
                    let state = dec.forward_context(t, &ctx)?;
                    dec.generation_loss(t, &state, &target)
                },
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn check_classification_loss(opts: &SuiteOptions) -> Result<CheckOutcome> {
    merge(
        "module/slot_classification",
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, "slot_classification", c);
            let mut store = ParamStore::new();
            let dec = tiny_decoder(&mut store, &mut rng, 8)?;
            let sizes = [0; 5].map(|_| rng.random_range(1..=4));
            let heads = SlotHeads::new(&mut store, "heads.slot", 4, sizes, &mut rng);
            let labels = sizes.map(|s| rng.random_range(0..s));
            let n = dim(&mut rng);
            store.insert("ctx", Tensor::randn(&[n, 4], 1.0, &mut rng));
            check_store(
                &mut store,
                |t| {
                    let ctx = ContextTokens {
                        tokens: t.param("ctx")?,
                        mask: vec![true; n],
                    };
                    let state = dec.forward_context(t, &ctx)?;
                    classification_loss(t, &heads, &state, &labels)
                },
                opts.samples,
                &mut rng,
            )
        }),
    )
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        width: 4,
        llm_width: 4,
        heads: 2,
        ffn_mult: 2,
        encoder_layers: 1,
        encoder_max_len: 40,
        graph_hidden: 4,
        graph_layers: 2,
        graph_out: 4,
        smiles_tokens: 4,
        graph_tokens: 3,
        tower_depth: 1,
        decoder_layers: 1,
        max_text_tokens: 6,
        max_target_tokens: 24,
    }
}

fn check_full_model(opts: &SuiteOptions, task: Task) -> Result<CheckOutcome> {
    let name = format!("model/{}", task.name());
    let grouping = Grouping::bundled();
    merge(
        &name,
        (0..opts.configs).map(|c| {
            let mut rng = config_rng(opts, &name, c);
            let recs = match task {
                Task::Classify => condition_records(4, rng.random())?,
                Task::Generate => joined_records(4, rng.random(), &grouping)?,
            };
            let examples = build_qa_dataset(&recs, &TemplateBank::bundled(), rng.random(), 1)?;
            let questions: Vec<String> = examples.iter().map(|e| e.question.clone()).collect();
            let (conds, tokens) = crate::dataset::build_vocabs(&recs, &recs, &questions)?;
            let cfg = tiny_model_config();
            let i = rng.random_range(0..recs.len());
            let ex = encode_example(&examples[i], &recs[i], &tokens, Some(&conds), &cfg)?;
            let mut store = ParamStore::new();
            let model = MmRcr::new(&cfg, task, tokens.len(), Some(conds.sizes()), &mut store, rng.random())?;
            check_store(&mut store, |t| model.loss(t, &ex), opts.samples, &mut rng)
        }),
    )
}

/// Every check, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for case in op_cases() {
        out.push(run_op(&case, opts)?);
    }
    out.push(check_linear(opts)?);
    out.push(check_attention(opts)?);
    out.push(check_block(opts)?);
    out.push(check_rgcn(opts)?);
    out.push(check_graph_encoder(opts)?);
    out.push(check_seq_encoder(opts)?);
    out.push(check_projector(opts)?);
    out.push(check_generation_loss(opts)?);
    out.push(check_classification_loss(opts)?);
    out.push(check_full_model(opts, Task::Classify)?);
    out.push(check_full_model(opts, Task::Generate)?);
    Ok(out)
}
