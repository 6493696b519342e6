//! Class-embedding construction: tokenisation, learnable context prompts,
//! the frozen text-encoder interface with a seeded stub, and the
//! anomaly-focus visual prompt.

use std::fmt;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, FeedForward, ParamGroup, ParamId, ParamStore, Session};

/// Token id of the end-of-word marker; ids `0..=255` are raw bytes.
pub const END_OF_WORD: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

/// Words of the fixed template used when the learnable prompt is disabled.
pub const HAND_CRAFTED_TEMPLATE: &str = "a video of";

/// Byte-level tokeniser. Each whitespace-separated word becomes its UTF-8
/// bytes followed by [`END_OF_WORD`], so a phrase tokenises to the
/// concatenation of its words and distinct word sequences never collide.
pub fn tokenize(label: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for word in label.split_whitespace() {
        out.extend(word.bytes().map(u32::from));
        out.push(END_OF_WORD);
    }
    if out.is_empty() {
        return Err(Error::EmptyLabel);
    }
    Ok(out)
}

/// A frozen, differentiable text encoder.
///
/// Implementations never expose their weights to the optimiser. `encode`
/// must be built from graph ops so gradients reach the input sequence.
pub trait TextEncoder: fmt::Debug + Send + Sync {
    fn token_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Frozen embedding lookup.
    fn embed_tokens(&self, ids: &[u32]) -> Array2<f64>;
    /// Frozen positional embeddings for the first `len` positions.
    fn positional(&self, len: usize) -> Array2<f64>;
    /// Maps a `len x token_dim` sequence (positions already added) to a
    /// `1 x output_dim` embedding.
    fn encode(&self, g: &mut Graph, seq: Var) -> Var;
    /// Serialized weights, used to verify that training leaves them untouched.
    fn parameter_bytes(&self) -> Vec<u8>;
    /// Seed the weights were generated from, if they are seed-derived.
    fn seed(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubEncoderConfig {
    pub seed: u64,
    pub token_dim: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for StubEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0x00c1_1b5e,
            token_dim: 64,
            layers: 2,
            max_len: 77,
        }
    }
}

#[derive(Debug, Clone)]
struct StubLayer {
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    output: Array2<f64>,
    up: Array2<f64>,
    down: Array2<f64>,
}

/// Seeded random pre-norm transformer encoder, mean-pooled and projected.
/// Stands in for a pretrained text tower.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    cfg: StubEncoderConfig,
    output_dim: usize,
    tokens: Array2<f64>,
    positions: Array2<f64>,
    layers: Vec<StubLayer>,
    projection: Array2<f64>,
}

impl StubTextEncoder {
    pub fn new(cfg: StubEncoderConfig, output_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.token_dim;
        let unit = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            normal_init(rng, (fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())
        };
        let tokens = normal_init(&mut rng, (VOCAB_SIZE, w), 0.02);
        let positions = normal_init(&mut rng, (cfg.max_len, w), 0.01);
        let layers = (0..cfg.layers)
            .map(|_| StubLayer {
                query: unit(&mut rng, w, w),
                key: unit(&mut rng, w, w),
                value: unit(&mut rng, w, w),
                output: unit(&mut rng, w, w),
                up: unit(&mut rng, w, 4 * w),
                down: unit(&mut rng, 4 * w, w),
            })
            .collect();
        let projection = unit(&mut rng, w, output_dim);
        Self {
            cfg,
            output_dim,
            tokens,
            positions,
            layers,
            projection,
        }
    }

    pub fn config(&self) -> &StubEncoderConfig {
        &self.cfg
    }
}

impl TextEncoder for StubTextEncoder {
    fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn embed_tokens(&self, ids: &[u32]) -> Array2<f64> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.tokens.select(ndarray::Axis(0), &rows)
    }

    fn positional(&self, len: usize) -> Array2<f64> {
        self.positions.slice(s![..len, ..]).to_owned()
    }

    fn encode(&self, g: &mut Graph, seq: Var) -> Var {
        let scale = 1.0 / (self.cfg.token_dim as f64).sqrt();
        let mut x = seq;
        for layer in &self.layers {
            let h = g.layer_norm_rows(x);
            let (wq, wk, wv, wo) = (
                g.constant(layer.query.clone()),
                g.constant(layer.key.clone()),
                g.constant(layer.value.clone()),
                g.constant(layer.output.clone()),
            );
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let scores = g.matmul_nt(q, k);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let mixed = g.matmul(attn, v);
            let out = g.matmul(mixed, wo);
            x = g.add(x, out);

            let h = g.layer_norm_rows(x);
            let (up, down) = (g.constant(layer.up.clone()), g.constant(layer.down.clone()));
            let h = g.matmul(h, up);
            let h = g.gelu(h);
            let h = g.matmul(h, down);
            x = g.add(x, h);
        }
        let x = g.layer_norm_rows(x);
        let pooled = g.mean_rows(x);
        let proj = g.constant(self.projection.clone());
        g.matmul(pooled, proj)
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |a: &Array2<f64>| a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        push(&self.tokens);
        push(&self.positions);
        for l in &self.layers {
            for m in [&l.query, &l.key, &l.value, &l.output, &l.up, &l.down] {
                push(m);
            }
        }
        push(&self.projection);
        out
    }

    fn seed(&self) -> Option<u64> {
        Some(self.cfg.seed)
    }
}

/// One slot of a prompted token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSlot {
    Context(usize),
    Token(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Learnable,
    HandCrafted,
}

/// Shared learnable context tokens wrapped around each class token sequence.
#[derive(Debug, Clone)]
pub struct PromptBank {
    mode: PromptMode,
    context_length: usize,
    context: Option<ParamId>,
    label_tokens: Vec<Vec<u32>>,
    template: Vec<u32>,
}

impl PromptBank {
    /// `context_length = 0` falls back to the hand-crafted template.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        labels: &[String],
        mode: PromptMode,
        context_length: usize,
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        let mode = if context_length == 0 {
            PromptMode::HandCrafted
        } else {
            mode
        };
        let context = (mode == PromptMode::Learnable).then(|| {
            store.add(
                "prompt.context",
                ParamGroup::PromptContext,
                normal_init(rng, (context_length, encoder.token_dim()), 0.02),
            )
        });
        let bank = Self {
            mode,
            context_length: if mode == PromptMode::Learnable { context_length } else { 0 },
            context,
            label_tokens: labels.iter().map(|l| tokenize(l)).collect::<Result<_>>()?,
            template: tokenize(HAND_CRAFTED_TEMPLATE)?,
        };
        for i in 0..labels.len() {
            let len = bank.layout(i).len();
            if len > encoder.max_len() {
                return Err(Error::InvalidConfig(format!(
                    "prompt for {:?} has {len} tokens, encoder accepts {}",
                    labels[i],
                    encoder.max_len()
                )));
            }
        }
        Ok(bank)
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn context_param(&self) -> Option<ParamId> {
        self.context
    }

    pub fn num_labels(&self) -> usize {
        self.label_tokens.len()
    }

    /// Slot order for label `index`: the first `ceil(l/2)` context tokens,
    /// the class tokens, then the remaining context tokens. In hand-crafted
    /// mode the template precedes the class tokens.
    pub fn layout(&self, index: usize) -> Vec<TokenSlot> {
        let label = self.label_tokens[index].iter().map(|&t| TokenSlot::Token(t));
        match self.mode {
            PromptMode::HandCrafted => self
                .template
                .iter()
                .map(|&t| TokenSlot::Token(t))
                .chain(label)
                .collect(),
            PromptMode::Learnable => {
                let l = self.context_length;
                let head = l.div_ceil(2);
                (0..head)
                    .map(TokenSlot::Context)
                    .chain(label)
                    .chain((head..l).map(TokenSlot::Context))
                    .collect()
            }
        }
    }

    /// Token sequence for label `index`, positional embeddings added.
    pub fn build_prompted_sequence(&self, s: &mut Session<'_>, encoder: &dyn TextEncoder, index: usize) -> Var {
        let layout = self.layout(index);
        let mut pieces = Vec::new();
        let mut run: Vec<u32> = Vec::new();
        let mut ctx_run: Option<(usize, usize)> = None;
        let flush_tokens = |s: &mut Session<'_>, run: &mut Vec<u32>, pieces: &mut Vec<Var>| {
            if !run.is_empty() {
                let emb = encoder.embed_tokens(run);
                pieces.push(s.graph.constant(emb));
                run.clear();
            }
        };
        let flush_ctx = |s: &mut Session<'_>, ctx_run: &mut Option<(usize, usize)>, pieces: &mut Vec<Var>| {
            if let Some((lo, hi)) = ctx_run.take() {
                let ctx = s.param(self.context.expect("learnable mode has context"));
                let rows = (lo..hi).collect();
                pieces.push(s.graph.gather_rows(ctx, rows));
            }
        };
        for slot in layout.iter() {
            match *slot {
                TokenSlot::Token(t) => {
                    flush_ctx(s, &mut ctx_run, &mut pieces);
                    run.push(t);
                }
                TokenSlot::Context(i) => {
                    flush_tokens(s, &mut run, &mut pieces);
                    ctx_run = match ctx_run {
                        Some((lo, hi)) if hi == i => Some((lo, i + 1)),
                        _ => Some((i, i + 1)),
                    };
                }
            }
        }
        flush_tokens(s, &mut run, &mut pieces);
        flush_ctx(s, &mut ctx_run, &mut pieces);
        let seq = if pieces.len() == 1 {
            pieces[0]
        } else {
            s.graph.concat_rows(&pieces)
        };
        let pos = s.graph.constant(encoder.positional(layout.len()));
        s.graph.add(seq, pos)
    }

    /// Encodes every label; returns the `m x d` matrix `t_out`.
    pub fn encode_classes(&self, s: &mut Session<'_>, encoder: &dyn TextEncoder) -> Var {
        let rows: Vec<Var> = (0..self.num_labels())
            .map(|i| {
                let seq = self.build_prompted_sequence(s, encoder, i);
                encoder.encode(&mut s.graph, seq)
            })
            .collect();
        s.graph.concat_rows(&rows)
    }
}

/// Value-level class encoding, for inspection and tests.
pub fn encode_classes(store: &ParamStore, bank: &PromptBank, encoder: &dyn TextEncoder) -> Array2<f64> {
    let mut s = Session::new(store, false);
    let t = bank.encode_classes(&mut s, encoder);
    s.graph.value(t).clone()
}

/// Attention-sum guard for the visual prompt normaliser.
pub const VISUAL_PROMPT_EPS: f64 = 1e-8;

/// `V = l2norm(A^T X / (sum(A) + eps))`, a `1 x d` row.
pub fn anomaly_focus_prompt(g: &mut Graph, attention: Var, x: Var) -> Var {
    let at = g.transpose(attention);
    let pooled = g.matmul(at, x);
    let total = g.sum_all(attention);
    let eps = g.scalar(VISUAL_PROMPT_EPS);
    let denom = g.add(total, eps);
    let v = g.div_scalar(pooled, denom);
    g.l2_normalize_rows(v)
}

/// `T = FFN(t_out + V) + t_out`, `V` broadcast across class rows.
pub fn visual_prompt(s: &mut Session<'_>, ffn: &FeedForward, attention: Var, x: Var, t_out: Var) -> Var {
    let v = anomaly_focus_prompt(&mut s.graph, attention, x);
    let added = s.graph.add_row(t_out, v);
    let refined = ffn.forward(s, added);
    s.graph.add(refined, t_out)
}
