//! Sequence-to-sequence models: single transformer decoder, attention over
//! parameters, attention over representations, and the recurrent
//! mixture-of-experts baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{contract, Error, Result};
use crate::experts::{self, AttentionOutcome, ExpertBank};
use crate::graph::{Graph, Var};
use crate::gru::GruParams;
use crate::moe::{self, MoeParams};
use crate::optim::{init_glorot, init_uniform, ParamId, ParamStore};
use crate::tensor::{argmax, Tensor};
use crate::transformer::{
    self, embed_input, embed_target, encode, new_decoder, new_encoder_layer, output_distribution, CopyGate,
    DecoderParams, Dims, EmbeddingTables, EncoderLayer, GateMode, ModelInput, OutputInputs,
};
use crate::vocab::{Encoded, EOS_ID, SOS_ID, UNK_ID};

pub const EMBEDDING_INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Trs,
    TrsUniversal,
    Moe,
    Aor,
    Aop,
    AopUniversal,
    AopNoSkillLoss,
    AopOracle,
}

/// How expert decoders are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    Single,
    Parameters,
    Representations,
    Recurrent,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Trs,
        Variant::TrsUniversal,
        Variant::Moe,
        Variant::Aor,
        Variant::Aop,
        Variant::AopUniversal,
        Variant::AopNoSkillLoss,
        Variant::AopOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Trs => "TRS",
            Variant::TrsUniversal => "TRS+U",
            Variant::Moe => "MoE",
            Variant::Aor => "AoR",
            Variant::Aop => "AoP",
            Variant::AopUniversal => "AoP+U",
            Variant::AopNoSkillLoss => "AoP-noLV",
            Variant::AopOracle => "AoP-O",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let alias = match s {
            "AoP w/o LV" | "AoP-noL_V" => "AoP-noLV",
            "AoP+O" => "AoP-O",
            other => other,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(alias))
            .ok_or_else(|| Error::Lookup(String::from(s)))
    }

    pub fn mixing(self) -> Mixing {
        match self {
            Variant::Trs | Variant::TrsUniversal => Mixing::Single,
            Variant::Moe => Mixing::Recurrent,
            Variant::Aor => Mixing::Representations,
            _ => Mixing::Parameters,
        }
    }

    /// Learns `alpha` from the input with the key matrix and query GRU.
    pub fn has_router(self) -> bool {
        matches!(self, Variant::Aor | Variant::Aop | Variant::AopUniversal | Variant::AopNoSkillLoss)
    }

    pub fn uses_skill_loss(self) -> bool {
        matches!(self, Variant::Aor | Variant::Aop | Variant::AopUniversal)
    }

    pub fn is_universal(self) -> bool {
        matches!(self, Variant::TrsUniversal | Variant::AopUniversal)
    }

    pub fn is_oracle(self) -> bool {
        self == Variant::AopOracle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub tag_size: usize,
    pub dims: Dims,
    /// Encoder layers, and decoder layers for non-universal variants.
    pub layers: usize,
    /// Repetitions of the single shared decoder layer (universal variants).
    pub hops: usize,
    pub skills: Vec<String>,
    /// Divide oracle/manual weights by the number of active skills.
    pub normalize_oracle: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn experts(&self) -> usize {
        match self.variant.mixing() {
            Mixing::Single => 1,
            _ => self.skills.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.d_model == 0 || d.heads == 0 || d.depth == 0 || d.filter == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        if self.layers == 0 || self.hops == 0 {
            return Err(contract("layers and hops must be at least 1"));
        }
        if self.skills.is_empty() {
            return Err(contract("at least one skill is required"));
        }
        if self.vocab_size <= UNK_ID || self.tag_size == 0 {
            return Err(contract("vocabulary must include the special tokens"));
        }
        Ok(())
    }
}

/// Supplies the skill weights for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaMode {
    /// `softmax(q K)` from the router.
    Learned,
    /// Externally chosen weights (oracle, manual or forced one-hot).
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Router {
    keys: ParamId,
    query: GruParams<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    tables: EmbeddingTables<ParamId>,
    encoder: Vec<EncoderLayer<ParamId>>,
    experts: Vec<DecoderParams<ParamId>>,
    router: Option<Router>,
    output: ParamId,
    gate: CopyGate<ParamId>,
    moe: Option<MoeParams<ParamId>>,
}

enum DecoderPlan {
    Mixed(DecoderParams<Var>),
    Each(Vec<DecoderParams<Var>>),
    Recurrent(MoeParams<Var>),
}

/// Everything computed from the source side, reusable across decoding steps.
pub struct Prepared {
    pub memory: Var,
    pub logits: Option<Var>,
    pub alpha: Var,
    plan: DecoderPlan,
    words: Var,
    w_out: Var,
    gate: CopyGate<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub probs: Var,
    pub logits: Option<Var>,
    pub alpha: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dims.d_model;
        let tables = EmbeddingTables {
            word: store.insert("emb.word", init_uniform(&mut rng, config.vocab_size, d, EMBEDDING_INIT_BOUND))?,
            tag: store.insert("emb.tag", init_uniform(&mut rng, config.tag_size, d, EMBEDDING_INIT_BOUND))?,
        };
        let variant = config.variant;
        let mut encoder = Vec::new();
        let mut experts = Vec::new();
        let mut router = None;
        let mut moe = None;
        if variant.mixing() == Mixing::Recurrent {
            moe = Some(MoeParams::new(&mut store, &mut rng, d, config.experts())?);
        } else {
            for l in 0..config.layers {
                encoder.push(new_encoder_layer(&mut store, &mut rng, &format!("enc.layer{l}"), &config.dims)?);
            }
            let decoder_layers = if variant.is_universal() { 1 } else { config.layers };
            for i in 0..config.experts() {
                experts.push(new_decoder(&mut store, &mut rng, &format!("expert{i}"), &config.dims, decoder_layers)?);
            }
            if variant.has_router() {
                router = Some(Router {
                    keys: store.insert("router.keys", init_glorot(&mut rng, d, config.experts()))?,
                    query: GruParams::new(&mut store, &mut rng, "router.query", d, d)?,
                });
            }
        }
        let output = store.insert("out.w", init_glorot(&mut rng, d, config.vocab_size))?;
        let gate = CopyGate::new(&mut store, &mut rng, d)?;
        Ok(Model { config, store, tables, encoder, experts, router, output, gate, moe })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_experts(&self) -> usize {
        self.config.experts()
    }

    /// Expert bank view (transformer variants with a router only).
    pub fn bank(&self) -> Option<ExpertBank<ParamId>> {
        self.router.as_ref().map(|r| ExpertBank {
            experts: self.experts.clone(),
            keys: r.keys,
            skills: self.config.skills.clone(),
        })
    }

    pub fn expert_params(&self) -> &[DecoderParams<ParamId>] {
        &self.experts
    }

    pub fn query_encoder(&self) -> Option<&GruParams<ParamId>> {
        self.router.as_ref().map(|r| &r.query)
    }

    /// Default weights for `ex`: the gold skills in oracle mode, learned otherwise.
    pub fn alpha_for(&self, ex: &Encoded) -> Result<AlphaMode> {
        if self.variant().is_oracle() {
            Ok(AlphaMode::Fixed(experts::oracle_attention(&ex.skills, self.config.normalize_oracle)?))
        } else {
            Ok(AlphaMode::Learned)
        }
    }

    fn decode_once(&self, g: &mut Graph, theta: &DecoderParams<Var>, y: Var, h: Var) -> Result<(Var, Var)> {
        if self.variant().is_universal() {
            transformer::universal_decode(g, theta, y, h, &self.config.dims, self.config.hops)
        } else {
            transformer::decode(g, theta, y, h, &self.config.dims)
        }
    }

    /// Source-side computation with the variant's own mixing.
    pub fn prepare(&self, g: &mut Graph, input: &ModelInput, alpha: &AlphaMode) -> Result<Prepared> {
        self.prepare_with(g, input, alpha, self.variant().mixing())
    }

    /// Source-side computation with an explicit mixing strategy, so one bank
    /// can be run both as AoP and as AoR.
    pub fn prepare_with(&self, g: &mut Graph, input: &ModelInput, alpha: &AlphaMode, mixing: Mixing) -> Result<Prepared> {
        let tables = EmbeddingTables { word: g.param(&self.store, self.tables.word), tag: g.param(&self.store, self.tables.tag) };
        let x = embed_input(g, &tables, input)?;
        let r = self.num_experts();
        let w_out = g.param(&self.store, self.output);
        let gate = self.gate.bind(g, &self.store);

        if let Some(moe_params) = &self.moe {
            if mixing != Mixing::Recurrent {
                return Err(contract("recurrent model only supports recurrent mixing"));
            }
            let p = moe_params.bind(g, &self.store);
            let fixed = match alpha {
                AlphaMode::Fixed(w) => Some(w.as_slice()),
                AlphaMode::Learned => None,
            };
            let memory = moe::moe_encode(g, &p, x, fixed)?;
            let alpha = g.constant(Tensor::row(fixed.map(|w| w.to_vec()).unwrap_or_else(|| vec![1.0 / r as f64; r])));
            return Ok(Prepared { memory, logits: None, alpha, plan: DecoderPlan::Recurrent(p), words: tables.word, w_out, gate });
        }

        let layers: Vec<EncoderLayer<Var>> = self
            .encoder
            .iter()
            .map(|l| bind_encoder_layer(g, &self.store, l))
            .collect();
        let memory = encode(g, &layers, x, &self.config.dims)?;

        let (logits, alpha) = match alpha {
            AlphaMode::Fixed(w) => {
                if w.len() != r {
                    return Err(contract(format!("{} weights for {r} experts", w.len())));
                }
                (None, g.constant(Tensor::row(w.clone())))
            }
            AlphaMode::Learned => match &self.router {
                Some(router) => {
                    let query = router.query.bind(g, &self.store);
                    let keys = g.param(&self.store, router.keys);
                    let q = experts::compute_query(g, &query, memory)?;
                    let (logits, alpha) = experts::attention_scores(g, q, keys)?;
                    (Some(logits), alpha)
                }
                None => (None, g.constant(Tensor::row(vec![1.0 / r as f64; r]))),
            },
        };

        let bound: Vec<DecoderParams<Var>> = self.experts.iter().map(|e| e.bind(g, &self.store)).collect();
        let plan = match mixing {
            Mixing::Single => DecoderPlan::Mixed(bound.into_iter().next().ok_or_else(|| contract("no decoder"))?),
            Mixing::Parameters => DecoderPlan::Mixed(experts::mix_parameters(g, &bound, alpha)?),
            Mixing::Representations => DecoderPlan::Each(bound),
            Mixing::Recurrent => return Err(contract("transformer model cannot use recurrent mixing")),
        };
        Ok(Prepared { memory, logits, alpha, plan, words: tables.word, w_out, gate })
    }

    /// Distribution over the extended vocabulary for every decoder position.
    pub fn distribution(
        &self,
        g: &mut Graph,
        prep: &Prepared,
        decoder_input: &[usize],
        source_ext: &[usize],
        extended_vocab: usize,
        gate_mode: GateMode,
    ) -> Result<Var> {
        let (y, y_words) = embed_target(g, prep.words, decoder_input)?;
        let (states, attention) = match &prep.plan {
            DecoderPlan::Mixed(theta) => self.decode_once(g, theta, y, prep.memory)?,
            DecoderPlan::Each(thetas) => {
                let mut outs = Vec::with_capacity(thetas.len());
                let mut attns = Vec::with_capacity(thetas.len());
                for theta in thetas {
                    let (o, a) = self.decode_once(g, theta, y, prep.memory)?;
                    outs.push(o);
                    attns.push(a);
                }
                (
                    experts::mix_representations(g, &outs, prep.alpha)?,
                    experts::mix_representations(g, &attns, prep.alpha)?,
                )
            }
            DecoderPlan::Recurrent(p) => moe::moe_decode(g, p, y, prep.memory)?,
        };
        output_distribution(
            g,
            prep.w_out,
            &prep.gate,
            gate_mode,
            &OutputInputs { states, memory: prep.memory, attention, input_words: y_words, source_ids: source_ext, extended_vocab },
        )
    }

    /// Teacher-forced forward pass over `ex` with the variant's mixing.
    pub fn forward(&self, g: &mut Graph, ex: &Encoded, alpha: &AlphaMode) -> Result<Forward> {
        self.forward_with(g, ex, alpha, self.variant().mixing(), GateMode::Learned)
    }

    pub fn forward_with(&self, g: &mut Graph, ex: &Encoded, alpha: &AlphaMode, mixing: Mixing, gate: GateMode) -> Result<Forward> {
        let prep = self.prepare_with(g, &ex.input, alpha, mixing)?;
        let probs = self.distribution(g, &prep, &ex.decoder_input, &ex.source_ext, self.vocab_len() + ex.oov.len(), gate)?;
        Ok(Forward { probs, logits: prep.logits, alpha: prep.alpha })
    }

    /// Parameter mixing: encode, query, attend, mix, decode once.
    pub fn aop_forward(&self, g: &mut Graph, ex: &Encoded, alpha: &AlphaMode) -> Result<Forward> {
        self.forward_with(g, ex, alpha, Mixing::Parameters, GateMode::Learned)
    }

    /// Representation mixing: decode with every expert, mix the outputs.
    pub fn aor_forward(&self, g: &mut Graph, ex: &Encoded, alpha: &AlphaMode) -> Result<Forward> {
        self.forward_with(g, ex, alpha, Mixing::Representations, GateMode::Learned)
    }

    /// Recurrent mixture-of-experts forward; `gate` optionally fixes the expert gate.
    pub fn moe_forward(&self, g: &mut Graph, ex: &Encoded, gate: Option<Vec<f64>>) -> Result<Forward> {
        let alpha = gate.map(AlphaMode::Fixed).unwrap_or(AlphaMode::Learned);
        self.forward_with(g, ex, &alpha, Mixing::Recurrent, GateMode::Learned)
    }

    /// Runs expert `i` on its own, without any mixing.
    pub fn expert_forward(&self, g: &mut Graph, ex: &Encoded, i: usize) -> Result<Var> {
        let theta = self.experts.get(i).ok_or_else(|| contract(format!("no expert {i}")))?;
        let tables = EmbeddingTables { word: g.param(&self.store, self.tables.word), tag: g.param(&self.store, self.tables.tag) };
        let x = embed_input(g, &tables, &ex.input)?;
        let layers: Vec<EncoderLayer<Var>> = self.encoder.iter().map(|l| bind_encoder_layer(g, &self.store, l)).collect();
        let memory = encode(g, &layers, x, &self.config.dims)?;
        let theta = theta.bind(g, &self.store);
        let alpha = g.constant(Tensor::scalar(1.0));
        let prep = Prepared {
            memory,
            logits: None,
            alpha,
            plan: DecoderPlan::Mixed(theta),
            words: tables.word,
            w_out: g.param(&self.store, self.output),
            gate: self.gate.bind(g, &self.store),
        };
        self.distribution(g, &prep, &ex.decoder_input, &ex.source_ext, self.vocab_len() + ex.oov.len(), GateMode::Learned)
    }

    pub fn vocab_len(&self) -> usize {
        self.config.vocab_size
    }

    /// Appends the argmax token until `<EOS>` or `max_len` tokens. Returns
    /// extended ids (without `<EOS>`) and the skill weights used.
    pub fn greedy_decode(&self, ex: &Encoded, alpha: &AlphaMode, max_len: usize) -> Result<(Vec<usize>, AttentionOutcome)> {
        let mut g = Graph::new();
        let prep = self.prepare(&mut g, &ex.input, alpha)?;
        let ext = self.vocab_len() + ex.oov.len();
        let mut out = Vec::new();
        let mut dec_in = vec![SOS_ID];
        while out.len() < max_len {
            let probs = self.distribution(&mut g, &prep, &dec_in, &ex.source_ext, ext, GateMode::Learned)?;
            let p = g.value(probs);
            let next = argmax(p.row_slice(p.rows() - 1));
            if next == EOS_ID {
                break;
            }
            out.push(next);
            dec_in.push(if next < self.vocab_len() { next } else { UNK_ID });
        }
        let outcome = AttentionOutcome {
            alpha: g.value(prep.alpha).data().to_vec(),
            logits: prep.logits.map(|l| g.value(l).data().to_vec()),
        };
        Ok((out, outcome))
    }

    /// Skill weights (and scores) the model would use on `ex`.
    pub fn attention_outcome(&self, ex: &Encoded) -> Result<AttentionOutcome> {
        let mut g = Graph::new();
        let alpha = self.alpha_for(ex)?;
        let prep = self.prepare(&mut g, &ex.input, &alpha)?;
        Ok(AttentionOutcome {
            alpha: g.value(prep.alpha).data().to_vec(),
            logits: prep.logits.map(|l| g.value(l).data().to_vec()),
        })
    }
}

fn bind_encoder_layer(g: &mut Graph, store: &ParamStore, l: &EncoderLayer<ParamId>) -> EncoderLayer<Var> {
    use transformer::{AttentionParams, FeedForwardParams, NormParams};
    let mut p = |id: ParamId| g.param(store, id);
    EncoderLayer {
        attn: AttentionParams { wq: p(l.attn.wq), wk: p(l.attn.wk), wv: p(l.attn.wv), wo: p(l.attn.wo) },
        norm1: NormParams { gain: p(l.norm1.gain), bias: p(l.norm1.bias) },
        ff: FeedForwardParams { w1: p(l.ff.w1), b1: p(l.ff.b1), w2: p(l.ff.w2), b2: p(l.ff.b2) },
        norm2: NormParams { gain: p(l.norm2.gain), bias: p(l.norm2.bias) },
    }
}
