//! Run configuration, batching, the AdamW loop and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::data::{Dataset, DetectionSegment, FeatureSequence, LabelVocabulary, Video};
use crate::error::{Error, Result};
use crate::inference::{coarse_scores, extract_segments, predict_frames, unit_to_cosine, InferencePath};
use crate::metrics::{ano_auc, frame_ap, frame_auc, map_at_iou, pr_curve, MapResult, VideoFrames, DEFAULT_IOU_THRESHOLDS};
use crate::model::{ModelConfig, VadClip};
use crate::objectives::{
    contrastive_graph, mil_align_loss_graph, mil_scores_graph, topk_bce_graph, total_loss, ContrastiveTarget,
    LossConfig,
};
use crate::params::{round_f32, ParamStore, Session};
use crate::synthetic::{generate_synthetic_dataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Generate data instead of reading it; ignored when `train_dir` is set.
    pub synthetic: Option<SyntheticSpec>,
    pub synthetic_seed: u64,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Abnormal class names in vocabulary order. Derived from the training
    /// annotations when empty.
    pub classes: Vec<String>,
    pub normal_label: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::default()),
            synthetic_seed: 0,
            train_dir: None,
            test_dir: None,
            classes: Vec::new(),
            normal_label: "normal".into(),
        }
    }
}

/// Training and test splits with their vocabulary.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub vocab: LabelVocabulary,
}

impl DataConfig {
    pub fn load(&self) -> Result<LoadedData> {
        if let Some(dir) = &self.train_dir {
            let train = crate::io::load_dataset(dir)?;
            let test = match &self.test_dir {
                Some(t) => crate::io::load_dataset(t)?,
                None => Dataset::default(),
            };
            let classes = if self.classes.is_empty() {
                let mut seen: Vec<String> = train
                    .videos
                    .iter()
                    .flat_map(|v| v.annotation.classes.iter().cloned())
                    .filter(|c| *c != self.normal_label)
                    .collect();
                seen.sort();
                seen.dedup();
                seen
            } else {
                self.classes.clone()
            };
            let vocab = LabelVocabulary::with_normal_first(&self.normal_label, &classes)?;
            return Ok(LoadedData { train, test, vocab });
        }
        let spec = self
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no training data configured".into()))?;
        let (train, test) = generate_synthetic_dataset(spec, self.synthetic_seed)?;
        Ok(LoadedData {
            train,
            test,
            vocab: spec.vocabulary()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Maximum number of frames per training video.
    pub input_cap: usize,
    pub seed: u64,
}

/// Desk-scale defaults for small synthetic runs; the dataset presets on
/// [`RunConfig`] carry the full-scale values.
impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            input_cap: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub path: InferencePath,
    /// Segment threshold on the `[0, 1]` similarity scale.
    pub segment_threshold: f64,
    pub min_length: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            path: InferencePath::CBranch,
            segment_threshold: 0.55,
            min_length: 2,
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn xd_violence() -> Self {
        Self {
            optim: OptimConfig {
                learning_rate: 2e-5,
                batch_size: 64,
                epochs: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn ucf_crime() -> Self {
        Self {
            model: ModelConfig {
                adapter: AdapterConfig::ucf_crime(),
                ..Default::default()
            },
            loss: LossConfig::ucf_crime(),
            optim: OptimConfig {
                learning_rate: 1e-5,
                batch_size: 64,
                epochs: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.branches.validate()?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || o.batch_size == 0 || o.input_cap == 0 {
            return Err(Error::InvalidConfig(
                "learning rate, batch size and input cap must be positive".into(),
            ));
        }
        let i = &self.inference;
        if !(0.0..1.0).contains(&i.segment_threshold) || i.segment_threshold == 0.0 || i.min_length == 0 {
            return Err(Error::InvalidConfig(format!(
                "segment threshold {} must lie in (0, 1) and min_length >= 1",
                i.segment_threshold
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Fixes a sequence to `cap` rows: uniform temporal sampling when longer,
/// zero padding when shorter. The mask marks real frames.
pub fn pad_or_sample(seq: &FeatureSequence, cap: usize) -> Result<(FeatureSequence, Vec<bool>)> {
    let cap = cap.max(1);
    let (n, d) = (seq.len(), seq.dim());
    let src = seq.features();
    let mut out = ndarray::Array2::<f32>::zeros((cap, d));
    let mut mask = vec![false; cap];
    if n > cap {
        for i in 0..cap {
            out.row_mut(i).assign(&src.row(i * n / cap));
            mask[i] = true;
        }
    } else {
        out.slice_mut(ndarray::s![..n, ..]).assign(src);
        mask[..n].fill(true);
    }
    Ok((FeatureSequence::new(seq.video_id(), out)?, mask))
}

/// A training video reduced to what the loss needs.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    /// Valid frames only.
    pub features: Array2<f64>,
    pub label: f64,
    pub targets: Vec<usize>,
}

pub fn prepare(video: &Video, vocab: &LabelVocabulary, cap: usize) -> Result<PreparedVideo> {
    let (seq, mask) = pad_or_sample(&video.features, cap)?;
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let features = seq.to_f64().select(ndarray::Axis(0), &valid);
    Ok(PreparedVideo {
        video_id: video.annotation.video_id.clone(),
        features,
        label: if video.annotation.is_abnormal() { 1.0 } else { 0.0 },
        targets: vocab.targets_for(&video.annotation)?,
    })
}

/// Loss components of one batch, each averaged over its videos.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub bce: crate::autograd::Var,
    pub nce: crate::autograd::Var,
    pub cts: crate::autograd::Var,
    pub total: crate::autograd::Var,
}

/// Builds the batch loss on `s`.
pub fn batch_loss(model: &VadClip, s: &mut Session<'_>, batch: &[&PreparedVideo], loss: &LossConfig) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let branches = model.config().branches.clone();
    let normal = model.vocab().normal_index();
    let t_out = model.class_embeddings(s);
    let mut bce = Vec::new();
    let mut nce = Vec::new();
    let mut cts = Vec::new();
    for v in batch {
        let fv = model.forward_graph(s, &v.features, t_out)?;
        let k = loss.top_k.k(v.features.nrows());
        if branches.c_branch {
            bce.push(topk_bce_graph(&mut s.graph, fv.anomaly, v.label, k));
        }
        if branches.a_branch {
            let scores = mil_scores_graph(&mut s.graph, fv.alignment, k, loss.mil_pooling);
            nce.push(mil_align_loss_graph(&mut s.graph, scores, &v.targets, loss.temperature));
            if loss.contrastive_on == ContrastiveTarget::Final {
                cts.push(contrastive_graph(&mut s.graph, fv.class_embeddings, normal));
            }
        }
    }
    if branches.a_branch && loss.contrastive_on == ContrastiveTarget::Encoder {
        cts.push(contrastive_graph(&mut s.graph, t_out, normal));
    }
    let g = &mut s.graph;
    let mut mean = |terms: Vec<crate::autograd::Var>| -> crate::autograd::Var {
        if terms.is_empty() {
            return g.scalar(0.0);
        }
        let n = terms.len() as f64;
        let sum = g.concat_rows(&terms);
        let sum = g.sum_all(sum);
        g.scale(sum, 1.0 / n)
    };
    let (bce, nce, cts) = (mean(bce), mean(nce), mean(cts));
    let weighted = g.scale(cts, loss.lambda);
    let total = g.add(bce, nce);
    let total = g.add(total, weighted);
    Ok(LossVars { bce, nce, cts, total })
}

/// Decoupled-weight-decay Adam over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; parameters stay `f32`-representable.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], cfg: &OptimConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let lr = cfg.learning_rate;
            ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * cfg.weight_decay * *w;
                *w -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            });
            round_f32(&mut p.value);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub bce: f64,
    pub nce: f64,
    pub cts: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub bce: f64,
    pub nce: f64,
    pub cts: f64,
    pub total: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: VadClip,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub step_losses: Vec<StepLoss>,
    videos: Vec<PreparedVideo>,
}

impl Trainer {
    pub fn new(config: RunConfig, train: &Dataset, vocab: LabelVocabulary) -> Result<Self> {
        config.validate()?;
        let dim = train
            .dim()
            .ok_or_else(|| Error::InvalidConfig("empty training set".into()))?;
        let model = VadClip::new(config.model.clone(), vocab, dim)?;
        Self::with_model(config, model, train)
    }

    /// Continues from an existing model, e.g. a restored checkpoint.
    pub fn with_model(config: RunConfig, model: VadClip, train: &Dataset) -> Result<Self> {
        let videos = train
            .videos
            .iter()
            .map(|v| prepare(v, model.vocab(), config.optim.input_cap))
            .collect::<Result<Vec<_>>>()?;
        if videos.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        let optimizer = AdamW::new(&model.store);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
            videos,
        })
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.optim.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on the given videos.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepLoss> {
        let batch: Vec<&PreparedVideo> = indices.iter().map(|&i| &self.videos[i]).collect();
        let (loss, grads) = {
            let mut s = Session::new(&self.model.store, true);
            let vars = batch_loss(&self.model, &mut s, &batch, &self.config.loss)?;
            let g = &s.graph;
            let (bce, nce, cts) = (g.item(vars.bce), g.item(vars.nce), g.item(vars.cts));
            let total = total_loss(bce, nce, cts, &self.config.loss, self.optimizer.step as usize)?;
            let grads = g.backward(vars.total);
            (StepLoss { bce, nce, cts, total }, s.param_grads(&grads))
        };
        self.optimizer.update(&mut self.model.store, &grads, &self.config.optim);
        self.step_losses.push(loss);
        Ok(loss)
    }

    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let order = self.epoch_order(self.epoch);
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for chunk in order.chunks(self.config.optim.batch_size) {
            let l = self.step(chunk)?;
            for (s, v) in sums.iter_mut().zip([l.bce, l.nce, l.cts, l.total]) {
                *s += v;
            }
            steps += 1;
        }
        self.epoch += 1;
        let k = steps as f64;
        let log = EpochLog {
            epoch: self.epoch,
            steps,
            bce: sums[0] / k,
            nce: sums[1] / k,
            cts: sums[2] / k,
            total: sums[3] / k,
        };
        log::info!(
            "epoch {} loss {:.5} (bce {:.5} nce {:.5} cts {:.5})",
            log.epoch,
            log.total,
            log.bce,
            log.nce,
            log.cts
        );
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains until `epochs` epochs are complete.
    pub fn train_until(&mut self, epochs: usize) -> Result<()> {
        while self.epoch < epochs {
            self.train_epoch()?;
        }
        Ok(())
    }
}

/// Builds a trainer from `config` and runs every configured epoch.
pub fn train(config: &RunConfig) -> Result<(Trainer, LoadedData)> {
    let data = config.data.load()?;
    let mut trainer = Trainer::new(config.clone(), &data.train, data.vocab.clone())?;
    trainer.train_until(config.optim.epochs)?;
    Ok((trainer, data))
}

/// Frame-level metrics of one scoring path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseMetrics {
    pub ap: f64,
    pub auc: Option<f64>,
    pub ano_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// The configured path; `ap`, `auc` and `ano_auc` belong to it.
    pub path: InferencePath,
    pub ap: f64,
    pub auc: Option<f64>,
    pub ano_auc: Option<f64>,
    /// Both paths.
    pub paths: BTreeMap<String, CoarseMetrics>,
    /// Segment-level detection on abnormal videos, when segments are annotated.
    pub detection: Option<MapResult>,
}

impl EvaluationReport {
    pub fn avg_map(&self) -> Option<f64> {
        self.detection.as_ref().map(|d| d.average)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Per-video prediction dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub label: u8,
    pub c_branch: Vec<f64>,
    pub a_branch: Vec<f64>,
    pub segments: Vec<DetectionSegment>,
}

/// Scores every video of `data` in chunks of `chunk` frames.
pub fn predict_dataset(model: &VadClip, data: &Dataset, cfg: &InferenceConfig, chunk: usize) -> Result<Vec<PredictionRecord>> {
    if let Some(d) = data.dim() {
        if d != model.dim() {
            return Err(Error::ShapeMismatch(format!(
                "dataset features have {d} dims, model expects {}",
                model.dim()
            )));
        }
    }
    let t_out = model.class_embedding_values();
    let vocab = model.vocab();
    let threshold = unit_to_cosine(cfg.segment_threshold);
    data.videos
        .iter()
        .map(|v| {
            let out = predict_frames(model, &t_out, &v.features.to_f64(), chunk)?;
            Ok(PredictionRecord {
                video_id: v.annotation.video_id.clone(),
                label: v.annotation.label,
                c_branch: coarse_scores(&out, vocab.normal_index(), InferencePath::CBranch),
                a_branch: coarse_scores(&out, vocab.normal_index(), InferencePath::ABranch),
                segments: extract_segments(&out.alignment, vocab, threshold, cfg.min_length),
            })
        })
        .collect()
}

fn coarse_metrics(records: &[PredictionRecord], labels: &[Vec<bool>], path: InferencePath) -> Result<CoarseMetrics> {
    let pick = |r: &PredictionRecord| match path {
        InferencePath::CBranch => r.c_branch.clone(),
        InferencePath::ABranch => r.a_branch.clone(),
    };
    let per_video: Vec<Vec<f64>> = records.iter().map(pick).collect();
    let scores: Vec<f64> = per_video.iter().flatten().copied().collect();
    let flat: Vec<bool> = labels.iter().flatten().copied().collect();
    let frames: Vec<VideoFrames<'_>> = per_video
        .iter()
        .zip(labels)
        .zip(records)
        .map(|((s, l), r)| VideoFrames {
            scores: s,
            labels: l,
            abnormal: r.label == 1,
        })
        .collect();
    Ok(CoarseMetrics {
        ap: frame_ap(&scores, &flat)?,
        auc: frame_auc(&scores, &flat).ok(),
        ano_auc: ano_auc(&frames).ok(),
    })
}

/// Scores `data` and computes the full report. The prediction records are
/// returned for dumping.
pub fn evaluate(
    model: &VadClip,
    data: &Dataset,
    cfg: &InferenceConfig,
    chunk: usize,
) -> Result<(EvaluationReport, Vec<PredictionRecord>)> {
    let records = predict_dataset(model, data, cfg, chunk)?;
    let labels: Vec<Vec<bool>> = data
        .videos
        .iter()
        .map(|v| v.annotation.frame_labels(v.features.len()))
        .collect();
    let mut paths = BTreeMap::new();
    for path in InferencePath::ALL {
        paths.insert(path.as_str().to_string(), coarse_metrics(&records, &labels, path)?);
    }
    let selected = paths[cfg.path.as_str()].clone();

    let abnormal: Vec<usize> = (0..data.len()).filter(|&i| data.videos[i].annotation.is_abnormal()).collect();
    let gts: Vec<_> = abnormal.iter().map(|&i| data.videos[i].annotation.segments.clone()).collect();
    let detection = if gts.iter().any(|g| !g.is_empty()) {
        let preds: Vec<_> = abnormal.iter().map(|&i| records[i].segments.clone()).collect();
        Some(map_at_iou(&preds, &gts, &cfg.iou_thresholds)?)
    } else {
        None
    };
    let report = EvaluationReport {
        path: cfg.path,
        ap: selected.ap,
        auc: selected.auc,
        ano_auc: selected.ano_auc,
        paths,
        detection,
    };
    Ok((report, records))
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-frame score curves of every video as one CSV.
pub fn write_score_csv(path: impl AsRef<Path>, records: &[PredictionRecord], data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("video_id,frame,c_branch,a_branch,label\n");
    for (r, v) in records.iter().zip(&data.videos) {
        let labels = v.annotation.frame_labels(r.c_branch.len());
        for (i, (c, a)) in r.c_branch.iter().zip(&r.a_branch).enumerate() {
            out.push_str(&format!("{},{i},{c},{a},{}\n", r.video_id, u8::from(labels[i])));
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Precision-recall curve of the selected path as CSV.
pub fn write_pr_csv(path: impl AsRef<Path>, records: &[PredictionRecord], data: &Dataset, which: InferencePath) -> Result<()> {
    let path = path.as_ref();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (r, v) in records.iter().zip(&data.videos) {
        let s = match which {
            InferencePath::CBranch => &r.c_branch,
            InferencePath::ABranch => &r.a_branch,
        };
        scores.extend_from_slice(s);
        labels.extend(v.annotation.frame_labels(s.len()));
    }
    let mut out = String::from("threshold,precision,recall\n");
    for p in pr_curve(&scores, &labels)? {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,steps,bce,nce,cts,total\n");
    for h in history {
        out.push_str(&format!("{},{},{},{},{},{}\n", h.epoch, h.steps, h.bce, h.nce, h.cts, h.total));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
