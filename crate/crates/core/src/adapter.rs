//! Local-and-global temporal adapter: windowed self-attention over frames
//! followed by a single graph convolution that mixes a feature-similarity
//! adjacency with a temporal-distance adjacency. Both stages are residual.

use std::ops::Range;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Linear, ParamGroup, ParamId, ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Window length in frames.
    pub window_length: usize,
    /// Fraction of a window shared with the next one.
    pub window_overlap: f64,
    pub heads: usize,
    /// Cosine similarities below this are dropped from the similarity graph.
    pub sim_threshold: f64,
    /// Temperature of the distance adjacency.
    pub sigma: f64,
    pub local_attention: bool,
    /// Attend over the whole sequence instead of windows.
    pub global_attention: bool,
    pub gcn: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self::xd_violence()
    }
}

impl AdapterConfig {
    pub fn xd_violence() -> Self {
        Self {
            window_length: 64,
            window_overlap: 0.5,
            heads: 1,
            sim_threshold: 0.7,
            sigma: 1.0,
            local_attention: true,
            global_attention: false,
            gcn: true,
        }
    }

    pub fn ucf_crime() -> Self {
        Self {
            window_length: 8,
            ..Self::xd_violence()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window_length == 0 {
            return bad("window_length must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return bad(format!("window_overlap {} not in [0, 1)", self.window_overlap));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        if !(0.0..1.0).contains(&self.sim_threshold) {
            return bad(format!("sim_threshold {} not in [0, 1)", self.sim_threshold));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return bad(format!("{} heads do not divide dimension {dim}", self.heads));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.window_length as f64 * (1.0 - self.window_overlap)).round() as usize).max(1)
    }

    /// Attention windows over `n` frames. The last window is cut at `n`,
    /// which is equivalent to right-padding it and masking the padding.
    pub fn windows(&self, n: usize) -> Vec<Range<usize>> {
        let w = self.window_length;
        if self.global_attention || n <= w {
            return vec![0..n];
        }
        let stride = self.stride();
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            out.push(start..(start + w).min(n));
            if start + w >= n {
                break;
            }
            start += stride;
        }
        out
    }
}

/// Row-stochastic similarity and distance adjacencies.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPair {
    pub sim: Array2<f64>,
    pub dis: Array2<f64>,
}

/// Pre-softmax distance adjacency `-|i - j| / sigma`.
pub fn distance_logits(n: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| -(i.abs_diff(j) as f64) / sigma)
}

/// Cosine-similarity adjacency with thresholding, built on the graph so
/// gradients reach the features. Returns the post-softmax matrix.
pub fn similarity_adjacency(g: &mut Graph, x: Var, threshold: f64) -> Var {
    let n = g.shape(x).0;
    let normed = g.l2_normalize_rows(x);
    let mut sim = g.matmul_nt(normed, normed);
    // Degenerate rows: similarity 0 to others, 1 to self.
    let zero_rows: Vec<usize> = g
        .value(normed)
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|v| *v == 0.0))
        .map(|(i, _)| i)
        .collect();
    if !zero_rows.is_empty() {
        let mut eye = Array2::zeros((n, n));
        for &i in &zero_rows {
            eye[[i, i]] = 1.0;
        }
        let eye = g.constant(eye);
        sim = g.add(sim, eye);
    }
    let mask = g
        .value(sim)
        .mapv(|v| if v < threshold { f64::NEG_INFINITY } else { 0.0 });
    let mask = g.constant(mask);
    let masked = g.add(sim, mask);
    g.softmax_rows(masked)
}

/// `x + gelu([H_sim x ; H_dis x] W)` on the graph.
pub fn gcn_layer(g: &mut Graph, x: Var, h_sim: Var, h_dis: Var, w: Var) -> Var {
    let a = g.matmul(h_sim, x);
    let b = g.matmul(h_dis, x);
    let cat = g.concat_cols(&[a, b]);
    let proj = g.matmul(cat, w);
    let act = g.gelu(proj);
    g.add(x, act)
}

/// Value-level adjacency construction.
pub fn build_adjacency(x_l: &Array2<f64>, cfg: &AdapterConfig) -> AdjacencyPair {
    let mut g = Graph::new();
    let x = g.constant(x_l.clone());
    let sim = similarity_adjacency(&mut g, x, cfg.sim_threshold);
    AdjacencyPair {
        sim: g.value(sim).clone(),
        dis: softmax_rows(&distance_logits(x_l.nrows(), cfg.sigma)),
    }
}

/// Value-level graph convolution with a given adjacency pair and weight
/// (`2d x d`).
pub fn gcn_forward(x_l: &Array2<f64>, adj: &AdjacencyPair, w: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x_l.dim();
    if adj.sim.dim() != (n, n) || adj.dis.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?}/{:?} for {n} frames",
            adj.sim.dim(),
            adj.dis.dim()
        )));
    }
    if w.dim() != (2 * d, d) {
        return Err(Error::ShapeMismatch(format!(
            "gcn weight {:?}, expected ({}, {d})",
            w.dim(),
            2 * d
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(x_l.clone());
    let hs = g.constant(adj.sim.clone());
    let hd = g.constant(adj.dis.clone());
    let w = g.constant(w.clone());
    let out = gcn_layer(&mut g, x, hs, hd, w);
    Ok(g.value(out).clone())
}

/// Learnable part of the adapter.
#[derive(Debug, Clone)]
pub struct LgtAdapter {
    pub cfg: AdapterConfig,
    dim: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    gcn_weight: ParamId,
}

impl LgtAdapter {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: AdapterConfig, dim: usize) -> Self {
        let group = ParamGroup::AdapterAttention;
        let query = Linear::new(store, rng, "adapter.attn.query", group, dim, dim, true);
        let key = Linear::new(store, rng, "adapter.attn.key", group, dim, dim, true);
        let value = Linear::new(store, rng, "adapter.attn.value", group, dim, dim, true);
        let output = Linear::new(store, rng, "adapter.attn.output", group, dim, dim, true);
        let gcn_weight = store.add(
            "adapter.gcn.weight",
            ParamGroup::AdapterGcn,
            uniform_init(rng, (2 * dim, dim), 2 * dim),
        );
        Self {
            cfg,
            dim,
            query,
            key,
            value,
            output,
            gcn_weight,
        }
    }

    pub fn gcn_weight(&self) -> ParamId {
        self.gcn_weight
    }

    /// `x + attention(x)` with attention confined to windows; frames in
    /// several windows take the mean of their window outputs.
    pub fn local_attention(&self, s: &mut Session<'_>, x: Var) -> Var {
        let n = s.graph.shape(x).0;
        let heads = self.cfg.heads;
        let head_dim = self.dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q = self.query.forward(s, x);
        let k = self.key.forward(s, x);
        let v = self.value.forward(s, x);

        let windows = self.cfg.windows(n);
        let mut count = vec![0usize; n];
        for w in &windows {
            for c in &mut count[w.clone()] {
                *c += 1;
            }
        }
        let weights: Vec<f64> = count.iter().map(|&c| 1.0 / c as f64).collect();

        let g = &mut s.graph;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let mut parts = Vec::with_capacity(windows.len());
            for w in &windows {
                let rows: Vec<usize> = w.clone().collect();
                let (qw, kw, vw) = if windows.len() == 1 {
                    (qh, kh, vh)
                } else {
                    (
                        g.gather_rows(qh, rows.clone()),
                        g.gather_rows(kh, rows.clone()),
                        g.gather_rows(vh, rows.clone()),
                    )
                };
                let scores = g.matmul_nt(qw, kw);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                parts.push((g.matmul(attn, vw), rows));
            }
            let merged = if parts.len() == 1 {
                parts[0].0
            } else {
                g.merge_rows(parts, weights.clone())
            };
            head_outputs.push(merged);
        }
        let attended = if heads == 1 {
            head_outputs[0]
        } else {
            s.graph.concat_cols(&head_outputs)
        };
        let projected = self.output.forward(s, attended);
        s.graph.add(x, projected)
    }

    pub fn gcn(&self, s: &mut Session<'_>, x: Var) -> Var {
        let n = s.graph.shape(x).0;
        let h_sim = similarity_adjacency(&mut s.graph, x, self.cfg.sim_threshold);
        let h_dis = s
            .graph
            .constant(softmax_rows(&distance_logits(n, self.cfg.sigma)));
        let w = s.param(self.gcn_weight);
        gcn_layer(&mut s.graph, x, h_sim, h_dis, w)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let x = if self.cfg.local_attention {
            self.local_attention(s, x)
        } else {
            x
        };
        if self.cfg.gcn {
            self.gcn(s, x)
        } else {
            x
        }
    }
}
