//! Training loop, checkpoint metadata, evaluation and recommendation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::beam::{beam_search_topk, greedy_decode, log_softmax, normalized_score, BeamConfig};
use crate::checkpoint::{load_into, save_store};
use crate::dataset::{build_vocabs, split_811};
use crate::decoder::{rank_topk, DecoderScorer};
use crate::error::{Error, Result};
use crate::metrics::{partial_match, topk_sequence, topk_strict, Ranked, Report, COMMON_SOLVENTS};
use crate::model::{encode_example, EncodedExample, MmRcr, ModelConfig, Task};
use crate::optim::{Adam, AdamConfig, OneCycleSchedule};
use crate::params::ParamStore;
use crate::prompts::{load_jsonl, render_question, InstructionExample, TemplateBank};
use crate::reaction::{Conditions, Grouping, ReactionRecord, Slot, SlotLabels};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::vocab::{vocab_hash, CondVocab, TokenVocab, BOS, EOS, NONE_LABEL};

pub const CHECKPOINT_FILE: &str = "model.ntf";
pub const META_FILE: &str = "model.meta.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Instruction dataset (JSONL) produced by `build-data`.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub freeze: Vec<String>,
    /// Hold out validation and test thirds; when false everything trains.
    pub holdout: bool,
    /// Stop once train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
    pub beam_width: usize,
    pub length_alpha: f64,
    pub grouping: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/train.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            task: Task::Classify,
            seed: 0,
            epochs: 20,
            batch_size: 16,
            max_lr: 1e-3,
            freeze: Vec::new(),
            holdout: true,
            target_accuracy: None,
            eval_every: 1,
            beam_width: 10,
            length_alpha: 0.0,
            grouping: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // relative paths in a config file are relative to that file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(g) = cfg.grouping.as_mut() {
            if g.is_relative() {
                *g = base.join(&*g);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.beam_width == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every and beam_width must be positive".into()));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr {} must be positive", self.max_lr)));
        }
        self.model.validate()
    }
}

/// Everything needed to rebuild a trained model next to its weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Task,
    pub model: ModelConfig,
    pub seed: u64,
    pub holdout: bool,
    pub data: PathBuf,
    pub grouping: Option<PathBuf>,
    pub tokens: TokenVocab,
    pub conds: Option<CondVocab>,
    pub vocab_hash: String,
    pub epochs_run: usize,
    pub beam_width: usize,
    pub length_alpha: f64,
}

impl CheckpointMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let mut meta: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        meta.conds = meta.conds.map(CondVocab::reindexed);
        Ok(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Sidecar path of a checkpoint file.
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_file_name(META_FILE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
    All,
}

impl SplitName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "validation" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A dataset with records rebuilt and split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub examples: Vec<InstructionExample>,
    pub records: Vec<ReactionRecord>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Prepared {
    pub fn indices(&self, split: SplitName) -> Vec<usize> {
        match split {
            SplitName::Train => self.train.clone(),
            SplitName::Valid => self.valid.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => (0..self.examples.len()).collect(),
        }
    }

    pub fn records_of(&self, ix: &[usize]) -> Vec<ReactionRecord> {
        ix.iter().map(|&i| self.records[i].clone()).collect()
    }

    /// Slot vocabularies from the training split, tokens from everything.
    pub fn vocabs(&self, task: Task) -> Result<(Option<CondVocab>, TokenVocab)> {
        let questions: Vec<String> = self.examples.iter().map(|e| e.question.clone()).collect();
        let (cv, tv) = build_vocabs(&self.records_of(&self.train), &self.records, &questions)?;
        Ok((matches!(task, Task::Classify).then_some(cv), tv))
    }
}

/// Record key shared by every prompt expansion of one reaction.
fn base_id(id: &str) -> &str {
    match id.rsplit_once('#') {
        Some((base, e)) if !e.is_empty() && e.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => id,
    }
}

/// Rebuilds records and splits 8:1:1 by record, so prompt expansions of one
/// reaction always share a split.
pub fn prepare(examples: Vec<InstructionExample>, grouping: &Grouping, seed: u64, holdout: bool) -> Result<Prepared> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let records = examples
        .iter()
        .map(|e| e.to_record(grouping))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let key = base_id(&e.id);
        if !groups.contains_key(key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(i);
    }
    let (train, valid, test) = if holdout {
        let (tr, va, te) = split_811(&order, seed)?;
        let expand = |keys: Vec<&str>| {
            let mut ix: Vec<usize> = keys.iter().flat_map(|k| groups[k].iter().copied()).collect();
            ix.sort_unstable();
            ix
        };
        (expand(tr), expand(va), expand(te))
    } else {
        ((0..examples.len()).collect(), Vec::new(), Vec::new())
    };
    Ok(Prepared {
        examples,
        records,
        train,
        valid,
        test,
    })
}

pub fn load_grouping(path: Option<&Path>) -> Result<Grouping> {
    match path {
        Some(p) => Grouping::load(p),
        None => Ok(Grouping::bundled()),
    }
}

pub fn encode_all(
    prep: &Prepared,
    ix: &[usize],
    tokens: &TokenVocab,
    conds: Option<&CondVocab>,
    cfg: &ModelConfig,
) -> Result<Vec<EncodedExample>> {
    ix.iter()
        .map(|&i| encode_example(&prep.examples[i], &prep.records[i], tokens, conds, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Last measured train accuracy, when early stopping was configured.
    pub train_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
    pub meta: PathBuf,
    pub vocab_hash: String,
}

/// A model with its parameters and metadata.
pub struct Trained<T: Scalar> {
    pub model: MmRcr,
    pub store: ParamStore<T>,
    pub meta: CheckpointMeta,
}

impl<T: Scalar> Trained<T> {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let meta = CheckpointMeta::load(&CheckpointMeta::path_for(checkpoint))?;
        let mut store = ParamStore::new();
        let model = MmRcr::new(
            &meta.model,
            meta.task,
            meta.tokens.len(),
            meta.conds.as_ref().map(CondVocab::sizes),
            &mut store,
            meta.seed,
        )?;
        load_into(&mut store, checkpoint)?;
        Ok(Self { model, store, meta })
    }

    fn beam(&self, width: usize) -> BeamConfig {
        BeamConfig {
            beam_width: width,
            max_len: self.meta.model.max_target_tokens,
            length_alpha: self.meta.length_alpha,
            bos: BOS,
            eos: EOS,
        }
    }

    /// Slot labels ranked best first, `k` per slot.
    pub fn rank_slots(&self, ex: &EncodedExample, k: usize) -> Result<Vec<Ranked>> {
        let conds = self.conds()?;
        let tape = Tape::inference(&self.store);
        let state = self.model.context_state(&tape, ex)?;
        let logits = self.model.slot_logits(&tape, &state)?;
        Slot::ALL
            .iter()
            .zip(&logits)
            .map(|(&slot, l)| {
                let scores = l.value().to_f64_vec();
                Ok(rank_topk(&scores, k.min(scores.len()))?
                    .into_iter()
                    .map(|i| label_value(conds.label(slot, i).unwrap_or(NONE_LABEL)))
                    .collect())
            })
            .collect()
    }

    pub fn greedy(&self, ex: &EncodedExample) -> Result<String> {
        let tape = Tape::inference(&self.store);
        let state = self.model.context_state(&tape, ex)?;
        let mut scorer = DecoderScorer {
            decoder: &self.model.decoder,
            tape: &tape,
            state,
            vocab: &self.meta.tokens,
        };
        let toks = greedy_decode(&mut scorer, BOS, EOS, self.meta.model.max_target_tokens)?;
        Ok(self.meta.tokens.detokenize(&toks))
    }

    /// Distinct beam candidates with scores, best first.
    pub fn beam_topk(&self, ex: &EncodedExample, k: usize) -> Result<Vec<(String, f64)>> {
        let tape = Tape::inference(&self.store);
        let state = self.model.context_state(&tape, ex)?;
        let mut scorer = DecoderScorer {
            decoder: &self.model.decoder,
            tape: &tape,
            state,
            vocab: &self.meta.tokens,
        };
        let cfg = self.beam(self.meta.beam_width.max(k));
        let tokens = &self.meta.tokens;
        Ok(beam_search_topk(&mut scorer, &cfg, k, |t| tokens.detokenize(t))?.candidates)
    }

    /// Length-normalised log-probability of `cond` as the full answer.
    pub fn sequence_score(&self, ex: &EncodedExample, cond: &str) -> Result<f64> {
        let target = self.meta.tokens.encode_condition(cond)?;
        let tape = Tape::inference(&self.store);
        let state = self.model.context_state(&tape, ex)?;
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.model.decoder.forward_prefix(&tape, &state, &prefix)?.value();
        let mut lp = 0.0;
        for (i, &t) in target.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            lp += log_softmax(&row)[t];
        }
        Ok(normalized_score(lp, target.len(), self.meta.length_alpha))
    }

    fn conds(&self) -> Result<&CondVocab> {
        self.meta
            .conds
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no slot vocabulary".into()))
    }

    /// Per-slot top-1 accuracy.
    pub fn slot_accuracy(&self, examples: &[EncodedExample]) -> Result<[f64; 5]> {
        let mut hits = [0usize; 5];
        for ex in examples {
            let ranked = self.rank_slots(ex, 1)?;
            let truth = ex
                .truth_slots
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("example {} has no slot labels", ex.id)))?;
            for s in 0..5 {
                hits[s] += usize::from(ranked[s].first() == Some(&truth[s]));
            }
        }
        let n = examples.len().max(1) as f64;
        Ok(hits.map(|h| h as f64 / n))
    }

    /// Fraction of exact greedy matches.
    pub fn exact_match(&self, examples: &[EncodedExample]) -> Result<f64> {
        let mut hits = 0usize;
        for ex in examples {
            hits += usize::from(self.greedy(ex)? == ex.truth_joined);
        }
        Ok(hits as f64 / examples.len().max(1) as f64)
    }

    /// Train accuracy used for early stopping: the worst slot top-1 for
    /// classification, exact greedy match for generation.
    pub fn accuracy(&self, examples: &[EncodedExample]) -> Result<f64> {
        match self.meta.task {
            Task::Classify => Ok(self.slot_accuracy(examples)?.into_iter().fold(f64::INFINITY, f64::min)),
            Task::Generate => self.exact_match(examples),
        }
    }
}

fn label_value(l: &str) -> Option<String> {
    (l != NONE_LABEL).then(|| l.to_string())
}

/// Trains from `cfg`, writing the checkpoint, metadata and step log into
/// `cfg.out_dir`.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let examples = load_jsonl(&cfg.data)?;
    Ok(train_on::<T>(cfg, examples)?.1)
}

/// Trains on already loaded examples; also returns the final model.
pub fn train_on<T: Scalar>(cfg: &TrainConfig, examples: Vec<InstructionExample>) -> Result<(Trained<T>, TrainOutcome)> {
    cfg.validate()?;
    let grouping = load_grouping(cfg.grouping.as_deref())?;
    let prep = prepare(examples, &grouping, cfg.seed, cfg.holdout)?;
    if cfg.task == Task::Classify && prep.examples.iter().any(|e| e.slots.is_none()) {
        return Err(Error::Config("classification needs slot-labelled examples".into()));
    }
    let (conds, tokens) = prep.vocabs(cfg.task)?;
    let hash = vocab_hash(&tokens, conds.as_ref());
    let train_set = encode_all(&prep, &prep.train, &tokens, conds.as_ref(), &cfg.model)?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }

    let mut store = ParamStore::<T>::new();
    let model = MmRcr::new(
        &cfg.model,
        cfg.task,
        tokens.len(),
        conds.as_ref().map(CondVocab::sizes),
        &mut store,
        cfg.seed,
    )?;
    for prefix in &cfg.freeze {
        store.freeze(prefix)?;
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = OneCycleSchedule::new(cfg.max_lr, cfg.epochs * steps_per_epoch)?;
    let mut adam = Adam::<T>::new(AdamConfig::default());

    std::fs::create_dir_all(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    let meta_path = cfg.out_dir.join(META_FILE);
    let mut log = BufWriter::new(File::create(cfg.out_dir.join(LOG_FILE))?);
    let mut meta = CheckpointMeta {
        task: cfg.task,
        model: cfg.model.clone(),
        seed: cfg.seed,
        holdout: cfg.holdout,
        data: cfg.data.clone(),
        grouping: cfg.grouping.clone(),
        tokens,
        conds,
        vocab_hash: hash.clone(),
        epochs_run: 0,
        beam_width: cfg.beam_width,
        length_alpha: cfg.length_alpha,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    let mut train_accuracy = None;
    let mut trained: Option<Trained<T>> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch{epoch}"))));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                let grads = {
                    let tape = Tape::with_params(&store);
                    let loss = model.loss(&tape, ex)?;
                    let v = loss.value().item()?.to_f64_lossy();
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("loss at step {step}, epoch {epoch}, example {}", ex.id)));
                    }
                    batch_loss += v;
                    tape.backward(loss.scale(1.0 / batch.len() as f64))?
                };
                grads.accumulate_into(&mut store)?;
            }
            let lr = adam.step(&mut store, &schedule, step)?;
            let mean = batch_loss / batch.len() as f64;
            epoch_loss += batch_loss;
            serde_json::to_writer(
                &mut log,
                &StepLog {
                    step,
                    epoch,
                    loss: mean,
                    lr,
                },
            )?;
            log.write_all(b"\n")?;
            step += 1;
        }
        final_loss = epoch_loss / train_set.len() as f64;
        log::info!("epoch {epoch}: mean loss {final_loss:.5}");
        meta.epochs_run = epoch + 1;
        save_store(&store, &checkpoint)?;
        meta.save(&meta_path)?;

        if let Some(target) = cfg.target_accuracy {
            if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
                let t = trained.get_or_insert_with(|| Trained {
                    model: model.clone(),
                    store: ParamStore::new(),
                    meta: meta.clone(),
                });
                t.store = store.clone();
                t.meta = meta.clone();
                let acc = t.accuracy(&train_set)?;
                log::info!("epoch {epoch}: train accuracy {acc:.4}");
                train_accuracy = Some(acc);
                if acc >= target {
                    break;
                }
            }
        }
    }
    log.flush()?;
    let outcome = TrainOutcome {
        epochs_run: meta.epochs_run,
        steps: step,
        final_loss,
        train_accuracy,
        checkpoint,
        meta: meta_path,
        vocab_hash: hash,
    };
    Ok((Trained { model, store, meta }, outcome))
}

/// Evaluates a checkpoint on one split of its dataset (or of `data`).
pub fn evaluate<T: Scalar>(checkpoint: &Path, split: SplitName, ks: &[usize], data: Option<&Path>) -> Result<Report> {
    let trained = Trained::<T>::load(checkpoint)?;
    let examples = load_jsonl(data.unwrap_or(&trained.meta.data))?;
    evaluate_trained(&trained, examples, split, ks)
}

/// Evaluates an in-memory model. The dataset must rebuild the vocabularies
/// the model was trained with.
pub fn evaluate_trained<T: Scalar>(
    trained: &Trained<T>,
    examples: Vec<InstructionExample>,
    split: SplitName,
    ks: &[usize],
) -> Result<Report> {
    let meta = &trained.meta;
    let grouping = load_grouping(meta.grouping.as_deref())?;
    let prep = prepare(examples, &grouping, meta.seed, meta.holdout)?;
    let (conds, tokens) = prep.vocabs(meta.task)?;
    let found = vocab_hash(&tokens, conds.as_ref());
    if found != meta.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: meta.vocab_hash.clone(),
            found,
        });
    }
    let ix = prep.indices(split);
    let set = encode_all(&prep, &ix, &meta.tokens, meta.conds.as_ref(), &meta.model)?;
    let kmax = *ks.iter().max().ok_or_else(|| Error::Metric("empty k list".into()))?;
    if ks.contains(&0) {
        return Err(Error::Metric(format!("invalid k list {ks:?}")));
    }
    let mut report = Report {
        model: format!("mmrcr-{}", meta.task.name()),
        task: meta.task.name().into(),
        records: set.len(),
        ..Report::default()
    };
    if set.is_empty() {
        report.notes.push(format!("split {split:?} is empty"));
        return Ok(report);
    }
    match meta.task {
        Task::Classify => {
            let mut preds = Vec::with_capacity(set.len());
            let mut truth: Vec<SlotLabels> = Vec::with_capacity(set.len());
            for ex in &set {
                preds.push(trained.rank_slots(ex, kmax)?);
                truth.push(ex.truth_slots.clone().unwrap_or_default());
            }
            report.add_strict(&topk_strict(&preds, &truth, ks)?);
        }
        Task::Generate => {
            let mut cands = Vec::with_capacity(set.len());
            let mut truth = Vec::with_capacity(set.len());
            let (mut strict, mut lenient) = (0usize, 0usize);
            for ex in &set {
                let c: Vec<String> = trained.beam_topk(ex, kmax)?.into_iter().map(|(s, _)| s).collect();
                let top = c.first().cloned().unwrap_or_default();
                strict += usize::from(partial_match(&top, &ex.truth_joined, &grouping, None));
                lenient += usize::from(partial_match(&top, &ex.truth_joined, &grouping, Some(&COMMON_SOLVENTS)));
                cands.push(c);
                truth.push(ex.truth_joined.clone());
            }
            report.add_sequence(&topk_sequence(&cands, &truth, ks, &grouping)?);
            let n = set.len() as f64;
            report.summary.insert("partial_match_top1".into(), strict as f64 / n);
            report.summary.insert("partial_match_top1_lenient".into(), lenient as f64 / n);
            report
                .notes
                .push("lenient partial match ignores predicted common solvents".into());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub rank: usize,
    pub candidate: String,
    pub score: f64,
}

/// Ranks conditions for one reaction. Classification models rank the
/// labels of `role` (softmax restricted to `candidates` when given);
/// generation models run beam search, or score each candidate string by its
/// length-normalised sequence log-probability.
pub fn recommend<T: Scalar>(
    checkpoint: &Path,
    reaction: &str,
    role: Option<&str>,
    candidates: Option<&[String]>,
    k: usize,
) -> Result<Vec<Recommendation>> {
    recommend_with(&Trained::<T>::load(checkpoint)?, reaction, role, candidates, k)
}

pub fn recommend_with<T: Scalar>(
    trained: &Trained<T>,
    reaction: &str,
    role: Option<&str>,
    candidates: Option<&[String]>,
    k: usize,
) -> Result<Vec<Recommendation>> {
    let meta = &trained.meta;
    let bank = TemplateBank::bundled();
    let question = render_question(&bank.templates[0], reaction, "");
    let ex = InstructionExample {
        id: "query".into(),
        question,
        answer: String::new(),
        reaction_smiles: reaction.into(),
        corpus: String::new(),
        template_id: 0,
        slots: None,
        seed: 0,
    };
    let record = ReactionRecord::parse(
        "query",
        reaction,
        Conditions::Joined {
            joined: String::new(),
            species: Vec::new(),
        },
        None,
    )?;
    let mut enc = encode_example(&ex, &record, &meta.tokens, None, &meta.model)?;
    enc.target = None;
    if candidates.is_some_and(|c| c.is_empty()) {
        return Err(Error::Invalid("empty candidate list".into()));
    }

    let mut scored: Vec<(String, f64)> = match meta.task {
        Task::Classify => {
            let slot = parse_role(role.unwrap_or("catalyst"))?;
            let conds = trained.conds()?;
            let tape = Tape::inference(&trained.store);
            let state = trained.model.context_state(&tape, &enc)?;
            let logits = trained.model.slot_logits(&tape, &state)?[slot.index()].value().to_f64_vec();
            let ids: Vec<usize> = match candidates {
                Some(c) => c
                    .iter()
                    .map(|s| {
                        let label = (!s.is_empty() && s != NONE_LABEL).then_some(s.as_str());
                        conds
                            .lookup(slot, label)
                            .ok_or_else(|| Error::Invalid(format!("candidate {s:?} is not a known {slot} label")))
                    })
                    .collect::<Result<_>>()?,
                None => (0..logits.len()).collect(),
            };
            let restricted: Vec<f64> = ids.iter().map(|&i| logits[i]).collect();
            let probs: Vec<f64> = log_softmax(&restricted).into_iter().map(f64::exp).collect();
            ids.iter()
                .zip(probs)
                .map(|(&i, p)| (conds.label(slot, i).unwrap_or(NONE_LABEL).to_string(), p))
                .collect()
        }
        Task::Generate => {
            if let Some(r) = role {
                if r != "conditions" {
                    log::warn!("generation models rank whole condition strings; role {r:?} ignored");
                }
            }
            match candidates {
                Some(c) => c
                    .iter()
                    .map(|s| Ok((s.clone(), trained.sequence_score(&enc, s)?)))
                    .collect::<Result<_>>()?,
                None => trained.beam_topk(&enc, k)?,
            }
        }
    };
    // stable sort keeps the input order among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (candidate, score))| Recommendation {
            rank: i + 1,
            candidate,
            score,
        })
        .collect())
}

/// Slot names, plus `solvent` / `reagent` for the first of each.
pub fn parse_role(role: &str) -> Result<Slot> {
    match role {
        "solvent" => Ok(Slot::Solvent1),
        "reagent" => Ok(Slot::Reagent1),
        other => Slot::parse(other).ok_or_else(|| Error::Config(format!("unknown role {other:?}"))),
    }
}
