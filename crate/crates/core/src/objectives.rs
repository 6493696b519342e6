//! Training objectives: Top-K binary cross-entropy on anomaly confidences,
//! MIL-Align cross-entropy on the alignment map, and the hinge contrastive
//! term between normal and abnormal class embeddings.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{top_k_indices, Graph, Var};
use crate::error::{Error, Result};

/// How `K` is derived from the number of valid frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum TopKRule {
    /// `K = floor(n / divisor) + 1`.
    Fraction(usize),
    Fixed(usize),
}

impl TopKRule {
    pub fn k(self, n: usize) -> usize {
        let k = match self {
            TopKRule::Fraction(div) => n / div.max(1) + 1,
            TopKRule::Fixed(k) => k.max(1),
        };
        if k > n {
            log::debug!("top-k {k} exceeds {n} frames, clamped");
        }
        k.min(n).max(1)
    }
}

/// Which axis of the alignment map MIL-Align pools over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilPooling {
    /// Per class, mean of the `K` most similar frames.
    Column,
    /// Per frame, keep the `K` most similar classes; a class score is the
    /// sum of its kept entries divided by `n`.
    Row,
}

/// Which class embeddings the contrastive term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveTarget {
    /// After the visual prompt.
    Final,
    /// Encoder output before the visual prompt.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub top_k: TopKRule,
    pub temperature: f64,
    pub lambda: f64,
    pub mil_pooling: MilPooling,
    pub contrastive_on: ContrastiveTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::xd_violence()
    }
}

impl LossConfig {
    pub fn xd_violence() -> Self {
        Self {
            top_k: TopKRule::Fraction(16),
            temperature: 0.07,
            lambda: 1e-4,
            mil_pooling: MilPooling::Column,
            contrastive_on: ContrastiveTarget::Final,
        }
    }

    pub fn ucf_crime() -> Self {
        Self {
            lambda: 1e-1,
            ..Self::xd_violence()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if let TopKRule::Fraction(0) | TopKRule::Fixed(0) = self.top_k {
            return Err(Error::InvalidConfig("top-k rule yields K = 0".into()));
        }
        Ok(())
    }
}

/// Video-level BCE of the mean of the `K` largest confidences (`n x 1`).
pub fn topk_bce_graph(g: &mut Graph, anomaly: Var, label: f64, k: usize) -> Var {
    let pred = g.top_k_mean_cols(anomaly, k);
    g.bce(pred, label)
}

/// Per-class video similarities `S` (`1 x m`) from the alignment map.
pub fn mil_scores_graph(g: &mut Graph, alignment: Var, k: usize, pooling: MilPooling) -> Var {
    match pooling {
        MilPooling::Column => g.top_k_mean_cols(alignment, k),
        MilPooling::Row => {
            let m = g.value(alignment);
            let (n, classes) = m.dim();
            let keep = k.min(classes);
            let mut mask = Array2::zeros((n, classes));
            for (i, row) in m.rows().into_iter().enumerate() {
                for j in top_k_indices(row.iter().cloned(), keep) {
                    mask[[i, j]] = 1.0;
                }
            }
            let mask = g.constant(mask);
            let kept = g.mul(alignment, mask);
            g.mean_rows(kept)
        }
    }
}

/// Mean over `targets` of `-log softmax(S / tau)[target]`.
pub fn mil_align_loss_graph(g: &mut Graph, scores: Var, targets: &[usize], temperature: f64) -> Var {
    let logits = g.scale(scores, 1.0 / temperature);
    let terms: Vec<Var> = targets
        .iter()
        .map(|&t| g.softmax_cross_entropy(logits, t))
        .collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    if terms.len() > 1 {
        g.scale(total, 1.0 / terms.len() as f64)
    } else {
        total
    }
}

/// `sum_j max(0, cos(t_n, t_aj))` over the abnormal rows of `t`.
pub fn contrastive_graph(g: &mut Graph, t: Var, normal: usize) -> Var {
    let m = g.shape(t).0;
    let normed = g.l2_normalize_rows(t);
    let tn = g.gather_rows(normed, vec![normal]);
    let ta = g.gather_rows(normed, (0..m).filter(|&j| j != normal).collect());
    let cos = g.matmul_nt(tn, ta);
    let hinge = g.relu(cos);
    g.sum_all(hinge)
}

pub fn topk_bce(anomaly: &[f64], label: f64, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Array2::from_shape_vec((anomaly.len(), 1), anomaly.to_vec()).unwrap());
    let k = cfg.top_k.k(anomaly.len());
    let l = topk_bce_graph(&mut g, a, label, k);
    g.item(l)
}

pub fn mil_align_scores(alignment: &Array2<f64>, cfg: &LossConfig) -> Vec<f64> {
    let mut g = Graph::new();
    let m = g.constant(alignment.clone());
    let k = cfg.top_k.k(alignment.nrows());
    let s = mil_scores_graph(&mut g, m, k, cfg.mil_pooling);
    g.value(s).row(0).to_vec()
}

/// Class probabilities `softmax(S / tau)`.
pub fn mil_align_probabilities(scores: &[f64], temperature: f64) -> Vec<f64> {
    let z = Array2::from_shape_vec((1, scores.len()), scores.iter().map(|s| s / temperature).collect()).unwrap();
    crate::autograd::softmax_rows(&z).row(0).to_vec()
}

pub fn mil_align_loss(scores: &[f64], targets: &[usize], cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(Array2::from_shape_vec((1, scores.len()), scores.to_vec()).unwrap());
    let l = mil_align_loss_graph(&mut g, s, targets, cfg.temperature);
    g.item(l)
}

pub fn contrastive_loss(class_embeddings: &Array2<f64>, normal: usize) -> f64 {
    let mut g = Graph::new();
    let t = g.constant(class_embeddings.clone());
    let l = contrastive_graph(&mut g, t, normal);
    g.item(l)
}

/// `L_bce + L_nce + lambda * L_cts`; any non-finite component is an error.
pub fn total_loss(bce: f64, nce: f64, cts: f64, cfg: &LossConfig, batch: usize) -> Result<f64> {
    if !(bce.is_finite() && nce.is_finite() && cts.is_finite()) {
        return Err(Error::NonFiniteLoss { batch, bce, nce, cts });
    }
    Ok(bce + nce + cfg.lambda * cts)
}
