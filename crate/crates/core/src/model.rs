//! The dual-branch detector: temporal adapter, a projection to the final
//! visual features, the classification branch producing per-frame anomaly
//! confidence, and the alignment branch matching frames against class
//! embeddings.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, LgtAdapter};
use crate::autograd::{Graph, Var};
use crate::data::LabelVocabulary;
use crate::error::{Error, Result};
use crate::params::{FeedForward, Linear, ParamGroup, ParamStore, Session};
use crate::text::{visual_prompt, PromptBank, PromptMode, StubEncoderConfig, StubTextEncoder, TextEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualPromptMode {
    /// Anomaly confidences weight the frames.
    AnomalyFocus,
    /// Every frame weighs `1/n`.
    AverageFrame,
}

/// Branch and prompt switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub c_branch: bool,
    pub a_branch: bool,
    pub learnable_prompt: bool,
    pub visual_prompt: bool,
    pub visual_prompt_mode: VisualPromptMode,
    /// Stop gradients from the visual prompt into the anomaly confidences.
    pub detach_visual_prompt: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            c_branch: true,
            a_branch: true,
            learnable_prompt: true,
            visual_prompt: true,
            visual_prompt_mode: VisualPromptMode::AnomalyFocus,
            detach_visual_prompt: false,
        }
    }
}

impl BranchConfig {
    /// The six branch/prompt combinations of the dual-branch ablation, in
    /// table order, with a short name for each.
    pub fn ablation_rows() -> Vec<(&'static str, BranchConfig)> {
        let row = |c, a, l, v| BranchConfig {
            c_branch: c,
            a_branch: a,
            learnable_prompt: l,
            visual_prompt: v,
            ..Default::default()
        };
        vec![
            ("c_branch_only", row(true, false, false, false)),
            ("a_branch_only", row(false, true, false, false)),
            ("c_a", row(true, true, false, false)),
            ("c_a_learnable_prompt", row(true, true, true, false)),
            ("c_a_visual_prompt", row(true, true, false, true)),
            ("full", row(true, true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_prompt && !self.c_branch {
            return Err(Error::InvalidConfig(
                "the visual prompt needs the classification branch".into(),
            ));
        }
        if !self.c_branch && !self.a_branch {
            return Err(Error::InvalidConfig("both branches disabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    /// Number of learnable context tokens.
    pub context_length: usize,
    pub encoder: StubEncoderConfig,
    /// Optional VADF file holding precomputed class embeddings (`m x d`).
    /// Disables the learnable prompt.
    pub class_embeddings_file: Option<std::path::PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            context_length: 20,
            encoder: StubEncoderConfig::default(),
            class_embeddings_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub adapter: AdapterConfig,
    pub text: TextConfig,
    pub branches: BranchConfig,
    /// Hidden width multiplier of the FFN layers.
    pub ffn_multiplier: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            text: TextConfig::default(),
            branches: BranchConfig::default(),
            ffn_multiplier: 4,
            init_seed: 0,
        }
    }
}

/// Source of the class embeddings `t_out`.
#[derive(Debug, Clone)]
pub enum ClassSource {
    Prompted {
        bank: PromptBank,
        encoder: Arc<dyn TextEncoder>,
    },
    Precomputed(Array2<f64>),
}

/// Forward-pass values for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Anomaly confidence per frame, `n x 1`, in `[0, 1]`.
    pub anomaly: Array2<f64>,
    /// Cosine alignment map, `n x m`.
    pub alignment: Array2<f64>,
    /// Final visual features, `n x d`.
    pub features: Array2<f64>,
    /// Final class embeddings, `m x d`.
    pub class_embeddings: Array2<f64>,
}

impl ModelOutput {
    pub fn len(&self) -> usize {
        self.anomaly.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly.nrows() == 0
    }

    pub fn anomaly_scores(&self) -> Vec<f64> {
        self.anomaly.column(0).to_vec()
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub anomaly: Var,
    pub alignment: Var,
    pub features: Var,
    pub class_embeddings: Var,
}

/// Cosine similarity between every row of `x` and every row of `t`.
pub fn alignment_graph(g: &mut Graph, x: Var, t: Var) -> Var {
    let xn = g.l2_normalize_rows(x);
    let tn = g.l2_normalize_rows(t);
    g.matmul_nt(xn, tn)
}

/// Value-level alignment map.
pub fn alignment_similarity(x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let (xv, tv) = (g.constant(x.clone()), g.constant(t.clone()));
    let m = alignment_graph(&mut g, xv, tv);
    g.value(m).clone()
}

#[derive(Debug, Clone)]
pub struct VadClip {
    config: ModelConfig,
    vocab: LabelVocabulary,
    dim: usize,
    pub store: ParamStore,
    adapter: LgtAdapter,
    visual_fc: Linear,
    head_ffn: FeedForward,
    head_fc: Linear,
    prompt_ffn: FeedForward,
    classes: ClassSource,
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl VadClip {
    /// Builds a model with the seeded stub text encoder, or with precomputed
    /// class embeddings when the config names a file.
    pub fn new(config: ModelConfig, vocab: LabelVocabulary, dim: usize) -> Result<Self> {
        match &config.text.class_embeddings_file {
            Some(path) => {
                let t = crate::io::read_matrix(path)?.mapv(f64::from);
                Self::with_class_embeddings(config, vocab, dim, t)
            }
            None => {
                let encoder = Arc::new(StubTextEncoder::new(config.text.encoder.clone(), dim));
                Self::with_encoder(config, vocab, dim, encoder)
            }
        }
    }

    pub fn with_encoder(
        config: ModelConfig,
        vocab: LabelVocabulary,
        dim: usize,
        encoder: Arc<dyn TextEncoder>,
    ) -> Result<Self> {
        if encoder.output_dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "text encoder emits {} dims, visual features have {dim}",
                encoder.output_dim()
            )));
        }
        let (mut model, mut store) = Self::visual_parts(config, vocab, dim, ClassSource::Precomputed(Array2::zeros((0, 0))))?;
        let mode = if model.config.branches.learnable_prompt {
            PromptMode::Learnable
        } else {
            PromptMode::HandCrafted
        };
        let mut rng = component_rng(model.config.init_seed, 5);
        let bank = PromptBank::new(
            &mut store,
            &mut rng,
            model.vocab.labels(),
            mode,
            model.config.text.context_length,
            encoder.as_ref(),
        )?;
        model.classes = ClassSource::Prompted { bank, encoder };
        model.store = store;
        Ok(model)
    }

    pub fn with_class_embeddings(
        config: ModelConfig,
        vocab: LabelVocabulary,
        dim: usize,
        t_out: Array2<f64>,
    ) -> Result<Self> {
        if config.branches.learnable_prompt {
            return Err(Error::InvalidConfig(
                "precomputed class embeddings cannot use the learnable prompt".into(),
            ));
        }
        if t_out.dim() != (vocab.len(), dim) {
            return Err(Error::ShapeMismatch(format!(
                "class embeddings {:?}, expected ({}, {dim})",
                t_out.dim(),
                vocab.len()
            )));
        }
        let (mut model, store) = Self::visual_parts(config, vocab, dim, ClassSource::Precomputed(t_out))?;
        model.store = store;
        Ok(model)
    }

    fn visual_parts(
        config: ModelConfig,
        vocab: LabelVocabulary,
        dim: usize,
        classes: ClassSource,
    ) -> Result<(Self, ParamStore)> {
        config.branches.validate()?;
        config.adapter.validate(dim)?;
        let hidden = dim * config.ffn_multiplier.max(1);
        let seed = config.init_seed;
        let mut store = ParamStore::new();
        let adapter = LgtAdapter::new(&mut store, &mut component_rng(seed, 1), config.adapter.clone(), dim);
        let visual_fc = Linear::new(&mut store, &mut component_rng(seed, 2), "visual.fc", ParamGroup::VisualFc, dim, dim, true);
        let mut rng = component_rng(seed, 3);
        let head_ffn = FeedForward::new(&mut store, &mut rng, "c_branch.ffn", ParamGroup::ClassifierHead, dim, hidden);
        let head_fc = Linear::new(&mut store, &mut rng, "c_branch.fc", ParamGroup::ClassifierHead, dim, 1, true);
        let prompt_ffn = FeedForward::new(
            &mut store,
            &mut component_rng(seed, 4),
            "visual_prompt.ffn",
            ParamGroup::VisualPromptFfn,
            dim,
            hidden,
        );
        let model = Self {
            config,
            vocab,
            dim,
            store: ParamStore::new(),
            adapter,
            visual_fc,
            head_ffn,
            head_fc,
            prompt_ffn,
            classes,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &ClassSource {
        &self.classes
    }

    pub fn text_encoder(&self) -> Option<&Arc<dyn TextEncoder>> {
        match &self.classes {
            ClassSource::Prompted { encoder, .. } => Some(encoder),
            ClassSource::Precomputed(_) => None,
        }
    }

    pub fn prompt_bank(&self) -> Option<&PromptBank> {
        match &self.classes {
            ClassSource::Prompted { bank, .. } => Some(bank),
            ClassSource::Precomputed(_) => None,
        }
    }

    pub fn adapter(&self) -> &LgtAdapter {
        &self.adapter
    }

    /// Class embeddings `t_out` (`m x d`) on the session graph.
    pub fn class_embeddings(&self, s: &mut Session<'_>) -> Var {
        match &self.classes {
            ClassSource::Prompted { bank, encoder } => bank.encode_classes(s, encoder.as_ref()),
            ClassSource::Precomputed(t) => s.graph.constant(t.clone()),
        }
    }

    /// Value of `t_out` under the current parameters.
    pub fn class_embedding_values(&self) -> Array2<f64> {
        let mut s = Session::new(&self.store, false);
        let t = self.class_embeddings(&mut s);
        s.graph.value(t).clone()
    }

    /// Builds the forward pass for one video's valid frames.
    pub fn forward_graph(&self, s: &mut Session<'_>, x_clip: &Array2<f64>, t_out: Var) -> Result<ForwardVars> {
        if x_clip.ncols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "features have {} dims, model expects {}",
                x_clip.ncols(),
                self.dim
            )));
        }
        if x_clip.nrows() == 0 {
            return Err(Error::InvalidSequence("no valid frames".into()));
        }
        let n = x_clip.nrows();
        let x0 = s.graph.constant(x_clip.clone());
        let xg = self.adapter.forward(s, x0);
        let x = self.visual_fc.forward(s, xg);

        // Classification branch: sigmoid(fc(ffn(x) + x)).
        let h = self.head_ffn.forward(s, x);
        let h = s.graph.add(h, x);
        let logit = self.head_fc.forward(s, h);
        let anomaly = s.graph.sigmoid(logit);

        let b = &self.config.branches;
        let class_embeddings = if b.visual_prompt {
            let attention = match b.visual_prompt_mode {
                VisualPromptMode::AverageFrame => {
                    s.graph.constant(Array2::from_elem((n, 1), 1.0 / n as f64))
                }
                VisualPromptMode::AnomalyFocus if b.detach_visual_prompt => s.graph.detach(anomaly),
                VisualPromptMode::AnomalyFocus => anomaly,
            };
            visual_prompt(s, &self.prompt_ffn, attention, x, t_out)
        } else {
            t_out
        };
        let alignment = alignment_graph(&mut s.graph, x, class_embeddings);
        Ok(ForwardVars {
            anomaly,
            alignment,
            features: x,
            class_embeddings,
        })
    }

    /// Inference on a full `n x d` feature matrix.
    pub fn forward(&self, x_clip: &Array2<f64>) -> Result<ModelOutput> {
        let t_out = self.class_embedding_values();
        self.forward_with_classes(x_clip, &t_out)
    }

    /// Inference reusing precomputed `t_out`.
    pub fn forward_with_classes(&self, x_clip: &Array2<f64>, t_out: &Array2<f64>) -> Result<ModelOutput> {
        let mut s = Session::new(&self.store, false);
        let t = s.graph.constant(t_out.clone());
        let v = self.forward_graph(&mut s, x_clip, t)?;
        Ok(ModelOutput {
            anomaly: s.graph.value(v.anomaly).clone(),
            alignment: s.graph.value(v.alignment).clone(),
            features: s.graph.value(v.features).clone(),
            class_embeddings: s.graph.value(v.class_embeddings).clone(),
        })
    }
}
