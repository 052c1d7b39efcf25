//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any failed.
//!
//! Optional: set `RXNCOND_USPTO_CONDITION` to the full USPTO-Condition CSV
//! to also check its per-slot sparsity counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};

use rxncond::autograd::Tape;
use rxncond::beam::{beam_search, BeamConfig};
use rxncond::dataset::{load_500mt_csv, load_condition_csv, sparsity_report, split_811, ColumnMap, LoadMode};
use rxncond::gradcheck::{run_suite, SuiteOptions, REL_TOL};
use rxncond::graph::{rgcn_forward, GraphEncoder, RelGraph};
use rxncond::metrics::{emit_report, partial_match, topk_sequence, topk_strict, Ranked};
use rxncond::model::{MmRcr, ModelConfig, Task};
use rxncond::params::ParamStore;
use rxncond::powerlaw::power_law_fit;
use rxncond::projector::{PerceiverProjector, ProjectorConfig};
use rxncond::prompts::{build_qa_dataset, write_jsonl, InstructionExample, TemplateBank};
use rxncond::reaction::{Grouping, ReactionRecord, SlotLabels};
use rxncond::smiles::parse_molecule;
use rxncond::synthetic::{condition_records, joined_records, write_condition_csv, write_joined_csv};
use rxncond::tensor::Tensor;
use rxncond::train::{encode_all, evaluate, prepare, train, train_on, SplitName, TrainConfig};
use rxncond::vocab::PAD;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Suite {
    failed: Vec<&'static str>,
    total: usize,
}

impl Suite {
    fn run(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        self.total += 1;
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {name:<22} {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {name:<22} {detail} [{secs:.1}s]");
                self.failed.push(name);
            }
        }
    }
}

fn fixture_model() -> ModelConfig {
    ModelConfig {
        width: 32,
        llm_width: 32,
        heads: 2,
        ffn_mult: 2,
        encoder_layers: 1,
        encoder_max_len: 64,
        graph_hidden: 32,
        graph_layers: 2,
        graph_out: 32,
        smiles_tokens: 128,
        graph_tokens: 3,
        tower_depth: 1,
        decoder_layers: 1,
        max_text_tokens: 16,
        max_target_tokens: 40,
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_suite(&SuiteOptions::default()).map_err(s)?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_err))
        .collect();
    ensure!(failed.is_empty(), "over {REL_TOL:e}: {failed:?}");
    let configs = results.iter().map(|r| r.configs).min().unwrap_or(0);
    ensure!(configs >= 20, "only {configs} configurations");
    ensure!(
        results.iter().filter(|r| r.name.starts_with("model/")).count() == 2,
        "composed model checks missing"
    );
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x {configs} configs, max rel err {worst:.2e} < {REL_TOL:e}",
        results.len()
    ))
}

fn distinct(records: &[ReactionRecord], slots: &[usize]) -> usize {
    let mut seen = BTreeSet::new();
    for r in records {
        let labels = r.conditions.slots().expect("slot records");
        for &i in slots {
            if let Some(l) = &labels[i] {
                seen.insert(l.clone());
            }
        }
    }
    seen.len()
}

fn overfit(task: Task) -> Outcome {
    let grouping = Grouping::bundled();
    let slot_records = condition_records(128, 1).map_err(s)?;
    let (records, epochs, target) = match task {
        Task::Classify => {
            let counts = [
                distinct(&slot_records, &[0]),
                distinct(&slot_records, &[1, 2]),
                distinct(&slot_records, &[3, 4]),
            ];
            ensure!(counts == [8, 6, 10], "fixture label pools {counts:?}");
            (slot_records, 300, 0.95)
        }
        Task::Generate => (joined_records(64, 2, &grouping).map_err(s)?, 500, 0.90),
    };
    let examples = build_qa_dataset(&records, &TemplateBank::bundled(), 1, 1).map_err(s)?;
    let dir = tempfile::tempdir().map_err(s)?;
    let cfg = TrainConfig {
        out_dir: dir.path().into(),
        task,
        target_accuracy: Some(target),
        seed: 1,
        epochs,
        batch_size: 16,
        max_lr: 3e-3,
        holdout: false,
        eval_every: 5,
        model: fixture_model(),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (trained, outcome) = train_on::<f32>(&cfg, examples.clone()).map_err(s)?;
    let elapsed = t.elapsed();

    let prep = prepare(examples, &grouping, cfg.seed, false).map_err(s)?;
    let set = encode_all(
        &prep,
        &prep.indices(SplitName::All),
        &trained.meta.tokens,
        trained.meta.conds.as_ref(),
        &cfg.model,
    )
    .map_err(s)?;
    ensure!(set.len() == records.len(), "{} encoded examples", set.len());
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    match task {
        Task::Classify => {
            let acc = trained.slot_accuracy(&set).map_err(s)?;
            let shown: Vec<String> = acc.iter().map(|a| format!("{:.1}%", 100.0 * a)).collect();
            ensure!(
                acc.iter().all(|&a| a >= target),
                "slot top-1 {shown:?} after {} epochs",
                outcome.epochs_run
            );
            Ok(format!("slot top-1 {shown:?} at epoch {} of {epochs}", outcome.epochs_run))
        }
        Task::Generate => {
            let acc = trained.exact_match(&set).map_err(s)?;
            ensure!(
                acc >= target,
                "greedy exact match {:.1}% after {} epochs",
                100.0 * acc,
                outcome.epochs_run
            );
            Ok(format!(
                "greedy exact match {:.1}% at epoch {} of {epochs}",
                100.0 * acc,
                outcome.epochs_run
            ))
        }
    }
}

// Brute force: for every slot and k, scan the first k entries.
fn strict_oracle(preds: &[Vec<Ranked>], truth: &[SlotLabels], ks: &[usize]) -> [BTreeMap<usize, f64>; 5] {
    std::array::from_fn(|slot| {
        ks.iter()
            .map(|&k| {
                let mut hits = 0usize;
                for (p, t) in preds.iter().zip(truth) {
                    let mut found = false;
                    for (rank, label) in p[slot].iter().enumerate() {
                        if rank < k && *label == t[slot] {
                            found = true;
                        }
                    }
                    if found {
                        hits += 1;
                    }
                }
                (k, hits as f64 / truth.len() as f64)
            })
            .collect()
    })
}

const SPECIES: [&[&str]; 9] = [
    &["O"],
    &["CO"],
    &["CCO"],
    &["[Pd]"],
    &["C1CCOC1"],
    &["ClCCl"],
    &["[Na+]", "[OH-]"],
    &["CC(=O)[O-]", "[Na+]"],
    &["[Cl-]", "[NH4+]"],
];

// A condition string with species and the fragments inside each grouped
// species in random order.
fn render(species: &[usize], rng: &mut ChaCha8Rng) -> String {
    let mut order = species.to_vec();
    order.shuffle(rng);
    order
        .iter()
        .map(|&i| {
            let mut frags = SPECIES[i].to_vec();
            frags.shuffle(rng);
            frags.join(".")
        })
        .collect::<Vec<_>>()
        .join(".")
}

fn counts(species: &[usize]) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &i in species {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

fn random_ks(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=7).filter(|_| rng.random_bool(0.4)).collect();
    if ks.is_empty() {
        ks.push(rng.random_range(1..=7));
    }
    ks
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grouping = Grouping::bundled();
    let labels: Vec<Option<String>> = std::iter::once(None)
        .chain(["A", "B", "C", "D", "E"].iter().map(|l| Some(l.to_string())))
        .collect();
    for case in 0..1000 {
        let n = rng.random_range(1..=20);
        let ks = random_ks(&mut rng);
        let mut preds = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            let p: Vec<Ranked> = (0..5)
                .map(|_| {
                    let mut pool = labels.clone();
                    pool.shuffle(&mut rng);
                    pool.truncate(rng.random_range(0..=pool.len()));
                    pool
                })
                .collect();
            let t: SlotLabels = std::array::from_fn(|_| labels[rng.random_range(0..labels.len())].clone());
            preds.push(p);
            truth.push(t);
        }
        let got = topk_strict(&preds, &truth, &ks).map_err(s)?;
        ensure!(got == strict_oracle(&preds, &truth, &ks), "topk_strict disagrees on case {case}");
    }
    for case in 0..1000 {
        let n = rng.random_range(1..=12);
        let ks = random_ks(&mut rng);
        let mut cands = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        let mut expected: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
        for _ in 0..n {
            let t: Vec<usize> = (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..SPECIES.len())).collect();
            let mut first = None;
            let mut list = Vec::new();
            for rank in 0..rng.random_range(0..=6) {
                let c: Vec<usize> = if rng.random_bool(0.3) {
                    t.clone()
                } else {
                    (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..SPECIES.len())).collect()
                };
                if first.is_none() && counts(&c) == counts(&t) {
                    first = Some(rank);
                }
                list.push(render(&c, &mut rng));
            }
            for (&k, hits) in expected.iter_mut() {
                if first.is_some_and(|r| r < k) {
                    *hits += 1;
                }
            }
            cands.push(list);
            truth.push(render(&t, &mut rng));
        }
        let want: BTreeMap<usize, f64> = expected.into_iter().map(|(k, h)| (k, h as f64 / n as f64)).collect();
        let got = topk_sequence(&cands, &truth, &ks, &grouping).map_err(s)?;
        ensure!(got == want, "topk_sequence disagrees on case {case}: {got:?} vs {want:?}");
    }

    let mut max_beams = 0;
    for model in 0..100u64 {
        let v = rng.random_range(2..=5usize);
        let max_len = rng.random_range(1..=4usize);
        let alpha = rng.random_range(0.0..1.5);
        let eos = rng.random_range(0..v);
        let bos = v;
        // next-token log-probs are a seeded function of the prefix
        let table = move |prefix: &[usize]| -> Vec<f64> {
            let mut h = model.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            for &t in prefix {
                h = (h ^ t as u64).wrapping_mul(0x100_0000_01b3).rotate_left(17);
            }
            let mut r = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f64> = (0..v).map(|_| r.random_range(-3.0..3.0)).collect();
            let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            logits.iter().map(|l| l - z).collect()
        };
        // every sequence of non-EOS tokens of length < max_len, then EOS
        let mut all: Vec<(Vec<usize>, f64, f64)> = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for body in &frontier {
                let mut seq = body.clone();
                seq.push(eos);
                let mut lp = 0.0;
                let mut prefix = vec![bos];
                for &t in &seq {
                    lp += table(&prefix)[t];
                    prefix.push(t);
                }
                let score = lp / (seq.len() as f64).powf(alpha);
                all.push((seq, lp, score));
                for t in (0..v).filter(|&t| t != eos) {
                    let mut b = body.clone();
                    b.push(t);
                    next.push(b);
                }
            }
            frontier = next;
        }
        all.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        let width = v.pow(max_len as u32);
        max_beams = max_beams.max(width);
        let cfg = BeamConfig {
            beam_width: width,
            max_len,
            length_alpha: alpha,
            bos,
            eos,
        };
        let mut scorer = |p: &[usize]| -> rxncond::error::Result<Vec<f64>> { Ok(table(p)) };
        let got = beam_search(&mut scorer, &cfg).map_err(s)?;
        ensure!(got.len() == all.len(), "model {model}: {} hypotheses, expected {}", got.len(), all.len());
        for (h, (seq, lp, score)) in got.iter().zip(&all) {
            ensure!(h.tokens == *seq, "model {model}: order differs at {seq:?}");
            ensure!(
                (h.log_prob - lp).abs() <= 1e-12 && (h.score - score).abs() <= 1e-12,
                "model {model}: score of {seq:?} differs"
            );
        }
    }
    Ok(format!(
        "1000 strict + 1000 sequence cases match brute force; beam = enumeration on 100 models (width up to {max_beams})"
    ))
}

// (prediction, truth, expected) labelled by hand against the bundled grouping.
const PARTIAL_CASES: [(&str, &str, bool); 20] = [
    ("CO", "CO.[Na+].CC(=O)O", true),
    ("CCO", "CO.[Na+].CC(=O)O", false),
    ("[Na+].[OH-]", "[Na+].[OH-].O", true),
    ("[OH-].[Na+]", "[Na+].[OH-].O", true),
    ("[Na+]", "[Na+].[OH-].O", false),
    ("[OH-]", "[Na+].[OH-]", false),
    ("O", "[Na+].[OH-].O", true),
    ("", "", true),
    ("", "CO", false),
    ("CO", "", false),
    ("CO.O", "O.CO.ClCCl", true),
    ("CO.CCO", "CO.O", false),
    ("[K+].[OH-]", "[Na+].[OH-]", false),
    ("O=C([O-])[O-].[K+].[K+]", "[K+].O=C([O-])[O-].[K+].CN(C)C=O", true),
    ("[K+]", "O=C([O-])[O-].[K+].[K+]", false),
    ("[Pd]", "[Pd].C1CCOC1", true),
    ("C1CCOC1", "C1CCOC1.C1CCOC1", true),
    ("[Cl-].[NH4+]", "[NH4+].[Cl-].[Zn]", true),
    ("[Na+].[Cl-].O", "[Na+].[OH-].O", false),
    ("CC(=O)[O-].[Na+]", "[Na+].CC(=O)[O-]", true),
];

fn partial_match_fixture() -> Outcome {
    let grouping = Grouping::bundled();
    let wrong: Vec<usize> = PARTIAL_CASES
        .iter()
        .enumerate()
        .filter(|(_, (p, t, want))| partial_match(p, t, &grouping, None) != *want)
        .map(|(i, _)| i + 1)
        .collect();
    ensure!(wrong.is_empty(), "discrepancies on cases {wrong:?}");
    Ok(format!("{} cases, 0 discrepancies", PARTIAL_CASES.len()))
}

fn rgcn_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let enc = GraphEncoder::new(&mut store, "graph", 16, 3, 16, &mut rng);
    let tape = Tape::inference(&store);
    let mut worst = 0.0f64;
    for smiles in ["CC(=O)Nc1ccc(O)cc1", "C#CC[N+](C)(C)C.[Cl-]", "O=C(O)C1=CC=CN1"] {
        let mol = parse_molecule(smiles).map_err(s)?;
        let g = RelGraph::<f64>::from_molecule(&mol).map_err(s)?;
        let base = rgcn_forward(&tape, &g, &enc.layers).map_err(s)?.mean_rows().value().to_f64_vec();
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure!(norm > 0.0, "zero embedding for {smiles}");
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..g.node_count()).collect();
            perm.shuffle(&mut rng);
            let e = rgcn_forward(&tape, &g.permuted(&perm), &enc.layers)
                .map_err(s)?
                .mean_rows()
                .value()
                .to_f64_vec();
            let diff = e.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(diff / norm);
        }
    }
    ensure!(worst <= 1e-6, "relative deviation {worst:.2e}");
    Ok(format!("3 molecules x 100 permutations, max relative deviation {worst:.2e}"))
}

fn projector_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (width, vocab) = (16, 20);
    for (tokens, capacity) in [(128, 128 + vocab), (3, 1 + vocab)] {
        let mut store = ParamStore::<f64>::new();
        let cfg = ProjectorConfig {
            in_width: width,
            width,
            llm_width: width,
            tokens,
            capacity,
            heads: 2,
            tower_depth: 1,
            ffn_mult: 2,
        };
        let proj = PerceiverProjector::new(&mut store, "p", cfg, &mut rng).map_err(s)?;
        let tape = Tape::inference(&store);
        let words = tape.constant(Tensor::randn(&[vocab, width], 1.0, &mut rng));
        for n in [4, 64, 128, 512] {
            let x = tape.constant(Tensor::randn(&[n, width], 1.0, &mut rng));
            let out = proj.project(&tape, x, words).map_err(s)?;
            ensure!(out.shape() == [tokens, width], "{n} inputs gave {:?}, expected {tokens} tokens", out.shape());
        }
    }

    // both projectors inside one model
    let records = condition_records(4, 2).map_err(s)?;
    let examples = build_qa_dataset(&records, &TemplateBank::bundled(), 0, 1).map_err(s)?;
    let prep = prepare(examples, &Grouping::bundled(), 0, false).map_err(s)?;
    let (conds, tokens) = prep.vocabs(Task::Classify).map_err(s)?;
    let mut mcfg = fixture_model();
    mcfg.width = 16;
    mcfg.llm_width = 16;
    mcfg.graph_out = 16;
    mcfg.graph_hidden = 16;
    let set = encode_all(&prep, &[0], &tokens, conds.as_ref(), &mcfg).map_err(s)?;
    let ex = &set[0];
    let mut store = ParamStore::<f64>::new();
    let model = MmRcr::new(&mcfg, Task::Classify, tokens.len(), conds.as_ref().map(|c| c.sizes()), &mut store, 4)
        .map_err(s)?;
    {
        let tape = Tape::inference(&store);
        let ctx = model.context(&tape, ex).map_err(s)?;
        ensure!(
            ctx.len() == 128 + 3 + ex.text_tokens.len(),
            "context of {} rows for {} text tokens",
            ctx.len(),
            ex.text_tokens.len()
        );
    }
    let outputs = |store: &ParamStore<f64>| -> Result<(Vec<f64>, Vec<f64>), String> {
        let tape = Tape::inference(store);
        let words = model.decoder.word_table(&tape).map_err(s)?;
        let x = model.encoder.encode(&tape, &ex.reaction_tokens, PAD).map_err(s)?;
        let sm = model.smiles_proj.project(&tape, x, words).map_err(s)?;
        let g = model.graph.reaction_embed(&tape, &ex.reactants, &ex.products).map_err(s)?;
        let gr = model.graph_proj.project(&tape, g, words).map_err(s)?;
        Ok((sm.value().to_f64_vec(), gr.value().to_f64_vec()))
    };
    let names = |prefix: &str| -> Vec<String> {
        store
            .names()
            .filter(|n| n.starts_with(&format!("{prefix}.")))
            .map(String::from)
            .collect()
    };
    let smiles_names = names("projector.smiles");
    let graph_names = names("projector.graph");
    ensure!(!smiles_names.is_empty() && !graph_names.is_empty(), "projector parameters missing");
    for a in &smiles_names {
        let ta = store.get(a).map_err(s)?;
        for b in &graph_names {
            ensure!(!Arc::ptr_eq(ta, store.get(b).map_err(s)?), "{a} and {b} share storage");
        }
    }
    let (sm0, gr0) = outputs(&store)?;
    for (mutated, other) in [(&smiles_names, "graph"), (&graph_names, "smiles")] {
        let mut m = store.clone();
        for n in mutated {
            for x in m.value_mut(n).map_err(s)?.data_mut() {
                *x += 0.25;
            }
        }
        let (sm, gr) = outputs(&m)?;
        let (changed, kept, kept0, changed0) = if other == "graph" {
            (&sm, &gr, &gr0, &sm0)
        } else {
            (&gr, &sm, &sm0, &gr0)
        };
        ensure!(kept == kept0, "mutating the other projector changed the {other} tokens");
        ensure!(changed != changed0, "mutation had no effect");
    }
    Ok(format!(
        "128 and 3 tokens for inputs of 4/64/128/512 rows; {} + {} disjoint parameters",
        smiles_names.len(),
        graph_names.len()
    ))
}

const RELEASE_COUNTS: [usize; 5] = [89_756, 673_634, 130_326, 504_169, 170_752];
const RELEASE_PERCENT: [u32; 5] = [13, 99, 19, 74, 25];

fn data_pipeline() -> Outcome {
    let n = 683_410usize;
    let roster: Vec<u32> = (0..n as u32).collect();
    let (tr, va, te) = split_811(&roster, 42).map_err(s)?;
    let sizes = (tr.len(), va.len(), te.len());
    ensure!(sizes == (546_728, 68_341, 68_341), "sizes {sizes:?}");
    let mut all: Vec<u32> = tr.into_iter().chain(va).chain(te).collect();
    all.sort_unstable();
    ensure!(all == roster, "splits are not a partition");
    Ok(format!("{} / {} / {} of {n}, disjoint and exhaustive", sizes.0, sizes.1, sizes.2))
}

fn sparsity_on_release(path: &Path) -> Outcome {
    let loaded = load_condition_csv(path, &ColumnMap::default(), LoadMode::Lenient).map_err(s)?;
    let rep = sparsity_report(&loaded.records).map_err(s)?;
    ensure!(rep.total == 683_410, "{} records", rep.total);
    let counts: Vec<usize> = rep.slots.iter().map(|d| d.non_empty).collect();
    let pct: Vec<u32> = rep.slots.iter().map(|d| (100.0 * d.density).round() as u32).collect();
    ensure!(counts == RELEASE_COUNTS, "non-empty counts {counts:?}");
    ensure!(pct == RELEASE_PERCENT, "densities {pct:?}%");
    Ok(format!("non-empty counts {counts:?}, densities {pct:?}%"))
}

fn power_law() -> Outcome {
    let mut fits = Vec::new();
    for (alpha, seed) in [(2.0, 21u64), (2.5, 22)] {
        let d = Pareto::new(1.0, alpha - 1.0).map_err(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let fit = power_law_fit(&xs).map_err(s)?;
        ensure!((fit.alpha - alpha).abs() <= 0.1, "alpha {alpha} estimated as {:.3}", fit.alpha);
        fits.push(format!("{alpha} -> {:.3}", fit.alpha));
    }
    Ok(fits.join(", "))
}

fn uniform_losses() -> Outcome {
    let mut cfg = fixture_model();
    cfg.width = 16;
    cfg.llm_width = 16;
    let grouping = Grouping::bundled();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for task in [Task::Classify, Task::Generate] {
        let records = match task {
            Task::Classify => condition_records(12, 3),
            Task::Generate => joined_records(12, 3, &grouping),
        }
        .map_err(s)?;
        let examples = build_qa_dataset(&records, &TemplateBank::bundled(), 0, 1).map_err(s)?;
        let prep = prepare(examples, &grouping, 0, false).map_err(s)?;
        let (conds, tokens) = prep.vocabs(task).map_err(s)?;
        let set = encode_all(&prep, &prep.train, &tokens, conds.as_ref(), &cfg).map_err(s)?;
        let sizes = conds.as_ref().map(|c| c.sizes());
        let mut store = ParamStore::<f64>::new();
        let model = MmRcr::new(&cfg, task, tokens.len(), sizes, &mut store, 9).map_err(s)?;
        // zero output layers give uniform logits
        let heads: Vec<String> = store.names().filter(|n| n.starts_with("heads.")).map(String::from).collect();
        for n in &heads {
            let shape = store.get(n).map_err(s)?.shape().to_vec();
            store.set(n, Tensor::zeros(&shape)).map_err(s)?;
        }
        let tape = Tape::inference(&store);
        for ex in &set {
            let loss = model.loss(&tape, ex).map_err(s)?.value().item().map_err(s)?;
            let (got, want) = match task {
                Task::Classify => (loss, sizes.unwrap().iter().map(|&v| (v as f64).ln()).sum::<f64>()),
                Task::Generate => (loss / ex.target.as_ref().unwrap().len() as f64, (tokens.len() as f64).ln()),
            };
            worst = worst.max((got - want).abs());
        }
        detail.push(match task {
            Task::Classify => format!("sum ln V_i over {:?}", sizes.unwrap()),
            Task::Generate => format!("ln {} per token", tokens.len()),
        });
    }
    ensure!(worst <= 1e-6, "max deviation {worst:.2e}");
    Ok(format!("{}; max deviation {worst:.1e}", detail.join(", ")))
}

fn end_to_end(dir: &Path, task: Task) -> Result<(Vec<u8>, Vec<u8>), String> {
    let grouping = Grouping::bundled();
    let csv = dir.join("input.csv");
    let map = ColumnMap::default();
    let records = match task {
        Task::Classify => {
            write_condition_csv(File::create(&csv).map_err(s)?, &condition_records(40, 6).map_err(s)?).map_err(s)?;
            load_condition_csv(&csv, &map, LoadMode::Strict)
        }
        Task::Generate => {
            write_joined_csv(File::create(&csv).map_err(s)?, &joined_records(40, 6, &grouping).map_err(s)?)
                .map_err(s)?;
            load_500mt_csv(&csv, &map, &grouping, LoadMode::Strict)
        }
    }
    .map_err(s)?
    .records;
    let examples: Vec<InstructionExample> =
        build_qa_dataset(&records, &TemplateBank::bundled(), 7, 2).map_err(s)?;
    let data = dir.join("data.jsonl");
    write_jsonl(File::create(&data).map_err(s)?, &examples).map_err(s)?;
    let cfg = TrainConfig {
        data,
        out_dir: dir.join("run"),
        task,
        seed: 7,
        epochs: 10,
        batch_size: 8,
        max_lr: 3e-3,
        model: fixture_model(),
        ..TrainConfig::default()
    };
    let outcome = train::<f32>(&cfg).map_err(s)?;
    let report = evaluate::<f32>(&outcome.checkpoint, SplitName::Test, &[1, 3, 5, 10], None).map_err(s)?;
    let (json, csv) = emit_report(&report, dir, "report-test").map_err(s)?;
    Ok((std::fs::read(json).map_err(s)?, std::fs::read(csv).map_err(s)?))
}

fn determinism() -> Outcome {
    let mut sizes = Vec::new();
    for task in [Task::Classify, Task::Generate] {
        let a = tempfile::tempdir().map_err(s)?;
        let b = tempfile::tempdir().map_err(s)?;
        let ra = end_to_end(a.path(), task)?;
        let rb = end_to_end(b.path(), task)?;
        ensure!(ra.0 == rb.0, "{} JSON reports differ", task.name());
        ensure!(ra.1 == rb.1, "{} CSV reports differ", task.name());
        sizes.push(format!("{} {}+{} bytes", task.name(), ra.0.len(), ra.1.len()));
    }
    Ok(format!("identical reports across two runs ({})", sizes.join(", ")))
}

fn main() -> ExitCode {
    let mut suite = Suite {
        failed: Vec::new(),
        total: 0,
    };
    suite.run("gradient-suite", gradients);
    suite.run("overfit-classification", || overfit(Task::Classify));
    suite.run("overfit-generation", || overfit(Task::Generate));
    suite.run("metric-oracles", metric_oracles);
    suite.run("partial-match", partial_match_fixture);
    suite.run("rgcn-invariance", rgcn_invariance);
    suite.run("projector-contract", projector_contract);
    suite.run("data-pipeline", data_pipeline);
    match std::env::var_os("RXNCOND_USPTO_CONDITION") {
        Some(p) => suite.run("release-sparsity", || sparsity_on_release(Path::new(&p))),
        None => println!("SKIP release-sparsity      RXNCOND_USPTO_CONDITION not set; needs the full USPTO-Condition CSV"),
    }
    suite.run("power-law", power_law);
    suite.run("loss-analytics", uniform_losses);
    suite.run("determinism", determinism);
    println!(
        "{} of {} criteria passed",
        suite.total - suite.failed.len(),
        suite.total
    );
    if suite.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", suite.failed.join(", "));
        ExitCode::FAILURE
    }
}
