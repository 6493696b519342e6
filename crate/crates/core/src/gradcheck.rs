//! Finite-difference verification of every learnable parameter group on a
//! tiny instance.

use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::model::VadClip;
use crate::params::{ParamGroup, Session};
use crate::train::{batch_loss, PreparedVideo, RunConfig};
use crate::data::LabelVocabulary;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NoGradient,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::NoGradient => "no gradient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub scalars: usize,
    pub rel_error: Option<f64>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != Status::Fail)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>8} {:>12}  status", "group", "scalars", "rel_error")?;
        for r in &self.rows {
            let err = r.rel_error.map_or("-".to_string(), |e| format!("{e:.3e}"));
            writeln!(f, "{:<22} {:>8} {:>12}  {}", r.group, r.scalars, err, r.status)?;
        }
        Ok(())
    }
}

/// The tiny instance: 2 videos of 6 frames, `d = 8`, normal plus two
/// abnormal classes, 4 context tokens of width 8, window length 4. Branch
/// and loss settings come from `base`.
pub fn tiny_instance(base: &RunConfig) -> Result<(VadClip, Vec<PreparedVideo>, RunConfig)> {
    let mut cfg = base.clone();
    cfg.model.adapter.window_length = 4;
    cfg.model.text.context_length = 4;
    cfg.model.text.class_embeddings_file = None;
    cfg.model.text.encoder.token_dim = 8;
    let vocab = LabelVocabulary::with_normal_first("normal", &["riot".into(), "abuse".into()])?;
    let (n, d) = (6, 8);
    let model = VadClip::new(cfg.model.clone(), vocab, d)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.4).unwrap();
    let mut clip = |centre: &Array2<f64>| {
        Array2::from_shape_fn((n, d), |(i, j)| {
            centre[[(i >= n / 2) as usize, j]] + noise.sample(&mut rng)
        })
    };
    let normal_centre = Array2::from_shape_fn((2, d), |(r, j)| if j == r { 1.0 } else { 0.1 });
    let abnormal_centre = Array2::from_shape_fn((2, d), |(r, j)| if j == 4 + r { 1.0 } else { -0.1 });
    let videos = vec![
        PreparedVideo {
            video_id: "normal".into(),
            features: clip(&normal_centre),
            label: 0.0,
            targets: vec![0],
        },
        PreparedVideo {
            video_id: "riot".into(),
            features: clip(&abnormal_centre),
            label: 1.0,
            targets: vec![1],
        },
    ];
    Ok((model, videos, cfg))
}

fn loss_value(model: &VadClip, videos: &[PreparedVideo], cfg: &RunConfig) -> Result<f64> {
    let batch: Vec<&PreparedVideo> = videos.iter().collect();
    let mut s = Session::new(&model.store, false);
    let vars = batch_loss(model, &mut s, &batch, &cfg.loss)?;
    Ok(s.graph.item(vars.total))
}

/// Analytic gradients of the batch loss for every parameter.
pub fn analytic_gradients(model: &VadClip, videos: &[PreparedVideo], cfg: &RunConfig) -> Result<Vec<Array2<f64>>> {
    let batch: Vec<&PreparedVideo> = videos.iter().collect();
    let mut s = Session::new(&model.store, true);
    let vars = batch_loss(model, &mut s, &batch, &cfg.loss)?;
    let grads = s.graph.backward(vars.total);
    Ok(s.param_grads(&grads))
}

/// Central differences against backprop, aggregated per parameter group.
pub fn gradcheck(base: &RunConfig) -> Result<GradcheckReport> {
    let (mut model, videos, cfg) = tiny_instance(base)?;
    let analytic = analytic_gradients(&model, &videos, &cfg)?;
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.group)).collect();
    let mut numeric: Vec<Array2<f64>> = analytic.iter().map(|a| Array2::zeros(a.dim())).collect();
    for (k, &(id, _)) in ids.iter().enumerate() {
        let shape = model.store.get(id).value.dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id).value[[r, c]];
                model.store.get_mut(id).value[[r, c]] = orig + STEP;
                let plus = loss_value(&model, &videos, &cfg)?;
                model.store.get_mut(id).value[[r, c]] = orig - STEP;
                let minus = loss_value(&model, &videos, &cfg)?;
                model.store.get_mut(id).value[[r, c]] = orig;
                numeric[k][[r, c]] = (plus - minus) / (2.0 * STEP);
            }
        }
    }

    let mut rows = Vec::new();
    for group in ParamGroup::ALL {
        let members: Vec<usize> = (0..ids.len()).filter(|&k| ids[k].1 == group).collect();
        if members.is_empty() {
            continue;
        }
        let (mut diff, mut na, mut nn, mut scalars) = (0.0, 0.0, 0.0, 0);
        for &k in &members {
            for (a, n) in analytic[k].iter().zip(numeric[k].iter()) {
                diff += (a - n).powi(2);
                na += a * a;
                nn += n * n;
                scalars += 1;
            }
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        let (rel, status) = if na == 0.0 && nn == 0.0 {
            (None, Status::NoGradient)
        } else {
            let rel = diff / (na + nn);
            (Some(rel), if rel < TOLERANCE { Status::Pass } else { Status::Fail })
        };
        rows.push(GroupResult {
            group: group.as_str().to_string(),
            scalars,
            rel_error: rel,
            status,
        });
    }
    if let Some(enc) = model.text_encoder() {
        rows.push(GroupResult {
            group: "text_encoder (frozen)".into(),
            scalars: enc.parameter_bytes().len() / 8,
            rel_error: None,
            status: Status::NoGradient,
        });
    }
    Ok(GradcheckReport { rows })
}

/// Norm of the classifier-head gradient coming only from the alignment
/// loss, with the visual-prompt detach flag set as given.
pub fn classifier_grad_through_alignment(base: &RunConfig, detach: bool) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.model.branches.visual_prompt = true;
    cfg.model.branches.c_branch = true;
    cfg.model.branches.a_branch = true;
    cfg.model.branches.detach_visual_prompt = detach;
    let (model, videos, cfg) = tiny_instance(&cfg)?;
    let batch: Vec<&PreparedVideo> = videos.iter().collect();
    let mut s = Session::new(&model.store, true);
    let vars = batch_loss(&model, &mut s, &batch, &cfg.loss)?;
    let grads = s.graph.backward(vars.nce);
    let per_param = s.param_grads(&grads);
    Ok(model
        .store
        .iter()
        .zip(&per_param)
        .filter(|((_, p), _)| p.group == ParamGroup::ClassifierHead)
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt())
}
