//! Named learnable parameters and their binding onto a [`Graph`].

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};

/// Parameter groups reported separately by gradient checks and kept apart
/// from the frozen text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AdapterAttention,
    AdapterGcn,
    VisualFc,
    ClassifierHead,
    PromptContext,
    VisualPromptFfn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::AdapterAttention,
        ParamGroup::AdapterGcn,
        ParamGroup::VisualFc,
        ParamGroup::ClassifierHead,
        ParamGroup::PromptContext,
        ParamGroup::VisualPromptFfn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::AdapterAttention => "adapter_attention",
            ParamGroup::AdapterGcn => "adapter_gcn",
            ParamGroup::VisualFc => "visual_fc",
            ParamGroup::ClassifierHead => "classifier_head",
            ParamGroup::PromptContext => "prompt_context",
            ParamGroup::VisualPromptFfn => "visual_prompt_ffn",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Rounds every entry to the nearest `f32`, so stored parameters are exactly
/// representable in the checkpoint payload.
pub(crate) fn round_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut value: Array2<f64>) -> ParamId {
        round_f32(&mut value);
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// PyTorch-style `Linear` initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

/// Affine map `x W + b`, `W` stored as `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(rng, (fan_in, fan_out), fan_in),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                group,
                uniform_init(rng, (1, fan_out), fan_in),
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Transformer-style position-wise FFN: linear, GELU, linear.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), group, dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), group, hidden, dim, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let h = self.up.forward(s, x);
        let h = s.graph.gelu(h);
        self.down.forward(s, h)
    }
}

/// A graph plus the lazily bound parameters of one [`ParamStore`].
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'s> Session<'s> {
    /// `track_grads = false` binds parameters as constants (inference).
    pub fn new(store: &'s ParamStore, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = if self.track_grads {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients aligned with the store; unbound or unreached
    /// parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Array2<f64>> {
        self.store
            .iter()
            .map(|(id, p)| {
                self.bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(p.value.dim()))
            })
            .collect()
    }
}
