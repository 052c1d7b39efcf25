//! The composed model: sequence and graph encoders, two projectors, the
//! decoder, and the task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{classification_loss, pooled_state, ContextState, ContextTokens, DecoderConfig, SlotHeads, TinyDecoder};
use crate::error::{Error, Result};
use crate::graph::GraphEncoder;
use crate::params::ParamStore;
use crate::projector::{assemble_context, PerceiverProjector, ProjectorConfig};
use crate::prompts::InstructionExample;
use crate::reaction::{ReactionRecord, Slot, SlotLabels};
use crate::scalar::Scalar;
use crate::seq_encoder::{SeqEncoder, SeqEncoderConfig};
use crate::smiles::Molecule;
use crate::vocab::{CondVocab, TokenVocab, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Generate,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "generate" => Ok(Task::Generate),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder and projector width C.
    pub width: usize,
    /// Decoder width C_llm.
    pub llm_width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub encoder_layers: usize,
    pub encoder_max_len: usize,
    pub graph_hidden: usize,
    pub graph_layers: usize,
    pub graph_out: usize,
    pub smiles_tokens: usize,
    pub graph_tokens: usize,
    pub tower_depth: usize,
    pub decoder_layers: usize,
    pub max_text_tokens: usize,
    pub max_target_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            llm_width: 64,
            heads: 4,
            ffn_mult: 2,
            encoder_layers: 2,
            encoder_max_len: 128,
            graph_hidden: 64,
            graph_layers: 2,
            graph_out: 64,
            smiles_tokens: 128,
            graph_tokens: 3,
            tower_depth: 2,
            decoder_layers: 2,
            max_text_tokens: 96,
            max_target_tokens: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("llm_width", self.llm_width),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("encoder_max_len", self.encoder_max_len),
            ("graph_hidden", self.graph_hidden),
            ("graph_out", self.graph_out),
            ("smiles_tokens", self.smiles_tokens),
            ("graph_tokens", self.graph_tokens),
            ("max_target_tokens", self.max_target_tokens),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 || self.llm_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "widths {} / {} not divisible by {} heads",
                self.width, self.llm_width, self.heads
            )));
        }
        Ok(())
    }

    pub fn max_context(&self) -> usize {
        self.smiles_tokens + self.graph_tokens + self.max_text_tokens
    }
}

/// Model inputs for one example, already mapped to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub reaction_tokens: Vec<usize>,
    pub text_tokens: Vec<usize>,
    pub reactants: Vec<Molecule>,
    pub products: Vec<Molecule>,
    /// Slot label indices; `None` marks a label unseen in training.
    pub labels: Option<[Option<usize>; 5]>,
    pub target: Option<Vec<usize>>,
    pub truth_slots: Option<SlotLabels>,
    pub truth_joined: String,
}

pub fn encode_example(
    ex: &InstructionExample,
    record: &ReactionRecord,
    vocab: &TokenVocab,
    conds: Option<&CondVocab>,
    cfg: &ModelConfig,
) -> Result<EncodedExample> {
    let mut text_tokens = vocab.encode_text(&ex.question);
    text_tokens.truncate(cfg.max_text_tokens);
    let truth_slots = record.conditions.slots().cloned();
    let labels = match (conds, &truth_slots) {
        (Some(cv), Some(s)) => Some(Slot::ALL.map(|slot| cv.lookup(slot, s[slot.index()].as_deref()))),
        _ => None,
    };
    let truth_joined = record.conditions.joined();
    let mut target = vocab.encode_condition(&truth_joined)?;
    if target.len() > cfg.max_target_tokens {
        log::warn!("target of {} truncated to {} tokens", ex.id, cfg.max_target_tokens);
        target.truncate(cfg.max_target_tokens - 1);
        target.push(EOS);
    }
    Ok(EncodedExample {
        id: ex.id.clone(),
        reaction_tokens: vocab.encode_reaction(&record.raw)?,
        text_tokens,
        reactants: record.reactants.clone(),
        products: record.products.clone(),
        labels,
        target: Some(target),
        truth_slots,
        truth_joined,
    })
}

#[derive(Debug, Clone)]
pub struct MmRcr {
    pub config: ModelConfig,
    pub task: Task,
    pub encoder: SeqEncoder,
    pub graph: GraphEncoder,
    pub smiles_proj: PerceiverProjector,
    pub graph_proj: PerceiverProjector,
    pub decoder: TinyDecoder,
    pub slot_heads: Option<SlotHeads>,
}

impl MmRcr {
    /// Registers every parameter in `store`, initialised from `seed`.
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        task: Task,
        vocab_size: usize,
        slot_sizes: Option<[usize; 5]>,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.width;
        let encoder = SeqEncoder::new(
            store,
            "encoder",
            SeqEncoderConfig {
                vocab_size,
                max_len: config.encoder_max_len,
                width: c,
                heads: config.heads,
                layers: config.encoder_layers,
                ffn_mult: config.ffn_mult,
            },
            &mut rng,
        )?;
        let graph = GraphEncoder::new(store, "graph", config.graph_hidden, config.graph_layers, config.graph_out, &mut rng);
        let proj = |in_width: usize, tokens: usize, capacity: usize| ProjectorConfig {
            in_width,
            width: c,
            llm_width: config.llm_width,
            tokens,
            capacity,
            heads: config.heads,
            tower_depth: config.tower_depth,
            ffn_mult: config.ffn_mult,
        };
        let smiles_proj = PerceiverProjector::new(
            store,
            "projector.smiles",
            proj(c, config.smiles_tokens, config.encoder_max_len + vocab_size),
            &mut rng,
        )?;
        let graph_proj = PerceiverProjector::new(
            store,
            "projector.graph",
            proj(config.graph_out, config.graph_tokens, 1 + vocab_size),
            &mut rng,
        )?;
        let decoder = TinyDecoder::new(
            store,
            "decoder",
            "heads",
            DecoderConfig {
                vocab_size,
                width: config.llm_width,
                heads: config.heads,
                layers: config.decoder_layers,
                ffn_mult: config.ffn_mult,
                max_positions: config.max_context() + config.max_target_tokens + 1,
            },
            &mut rng,
        )?;
        let slot_heads = match (task, slot_sizes) {
            (Task::Classify, Some(sizes)) => Some(SlotHeads::new(store, "heads.slot", config.llm_width, sizes, &mut rng)),
            (Task::Classify, None) => return Err(Error::Config("classification needs slot vocabulary sizes".into())),
            (Task::Generate, _) => None,
        };
        Ok(Self {
            config: config.clone(),
            task,
            encoder,
            graph,
            smiles_proj,
            graph_proj,
            decoder,
            slot_heads,
        })
    }

    /// `[smiles tokens; graph tokens; text tokens]` for one example.
    pub fn context<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, ex: &EncodedExample) -> Result<ContextTokens<'a, T>> {
        let words = self.decoder.word_table(tape)?;
        let x = self.encoder.encode(tape, &ex.reaction_tokens, PAD)?;
        let smiles = self.smiles_proj.project(tape, x, words)?;
        let g = self.graph.reaction_embed(tape, &ex.reactants, &ex.products)?;
        let graph = self.graph_proj.project(tape, g, words)?;
        let text = if ex.text_tokens.is_empty() {
            None
        } else {
            Some(self.decoder.embed_tokens(tape, &ex.text_tokens)?)
        };
        assemble_context(smiles, graph, text)
    }

    pub fn context_state<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, ex: &EncodedExample) -> Result<ContextState<'a, T>> {
        let ctx = self.context(tape, ex)?;
        self.decoder.forward_context(tape, &ctx)
    }

    /// Slot logits `[1 × V_i]` for the five slots.
    pub fn slot_logits<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, state: &ContextState<'a, T>) -> Result<Vec<Var<'a, T>>> {
        let heads = self
            .slot_heads
            .as_ref()
            .ok_or_else(|| Error::Config("model has no slot heads".into()))?;
        heads.logits(tape, pooled_state(state))
    }

    /// The task loss for one example.
    pub fn loss<'a, T: Scalar>(&self, tape: &'a Tape<'a, T>, ex: &EncodedExample) -> Result<Var<'a, T>> {
        let state = self.context_state(tape, ex)?;
        match self.task {
            Task::Classify => {
                let heads = self
                    .slot_heads
                    .as_ref()
                    .ok_or_else(|| Error::Config("model has no slot heads".into()))?;
                let labels = ex
                    .labels
                    .ok_or_else(|| Error::Invalid(format!("example {} has no slot labels", ex.id)))?;
                let mut idx = [0usize; 5];
                for (i, l) in labels.iter().enumerate() {
                    idx[i] = l.ok_or_else(|| {
                        Error::Invalid(format!("example {} has a {} label outside the vocabulary", ex.id, Slot::ALL[i]))
                    })?;
                }
                classification_loss(tape, heads, &state, &idx)
            }
            Task::Generate => {
                let target = ex
                    .target
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("example {} has no target", ex.id)))?;
                self.decoder.generation_loss(tape, &state, target)
            }
        }
    }
}
