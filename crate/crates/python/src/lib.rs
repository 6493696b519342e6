//! Python bindings for `vadclip-core`.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vadclip_core::checkpoint;
use vadclip_core::data::{DetectionSegment, FeatureSequence, GtSegment};
use vadclip_core::inference::{coarse_scores, extract_segments, predict_frames, unit_to_cosine};
use vadclip_core::io::{load_dataset, save_dataset};
use vadclip_core::metrics;
use vadclip_core::synthetic::generate_synthetic_dataset;
use vadclip_core::train::{self, evaluate};
use vadclip_core::{Error, InferencePath, RunConfig, VadClip};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config_from(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(text) => RunConfig::from_toml(text).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

type Segment = (String, usize, usize, f64);

fn segment_tuple(s: &DetectionSegment) -> Segment {
    (s.class.clone(), s.start, s.end, s.confidence)
}

/// Frame-level average precision.
#[pyfunction]
fn frame_ap(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::frame_ap(&scores, &labels).map_err(to_py)
}

/// Frame-level ROC AUC.
#[pyfunction]
fn frame_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::frame_auc(&scores, &labels).map_err(to_py)
}

/// Detection mAP per IoU threshold.
///
/// `predictions[v]` holds `(class, start, end, confidence)` tuples and
/// `ground_truth[v]` holds `(class, start, end)` tuples for video `v`.
/// Returns `(per_threshold_map, average)`.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, thresholds=None))]
fn map_at_iou(
    predictions: Vec<Vec<Segment>>,
    ground_truth: Vec<Vec<(String, usize, usize)>>,
    thresholds: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, f64)> {
    let preds: Vec<Vec<DetectionSegment>> = predictions
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|(class, start, end, confidence)| DetectionSegment { class, start, end, confidence })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<GtSegment>> = ground_truth
        .into_iter()
        .map(|v| v.into_iter().map(|(class, start, end)| GtSegment { class, start, end }).collect())
        .collect();
    let thr = thresholds.unwrap_or_else(|| metrics::DEFAULT_IOU_THRESHOLDS.to_vec());
    let r = metrics::map_at_iou(&preds, &gts, &thr).map_err(to_py)?;
    Ok((r.map, r.average))
}

/// TOML text of a configuration preset: "default", "xd" or "ucf".
#[pyfunction]
#[pyo3(signature = (preset="default"))]
fn default_config(preset: &str) -> PyResult<String> {
    let cfg = match preset {
        "default" => RunConfig::default(),
        "xd" => RunConfig::xd_violence(),
        "ucf" => RunConfig::ucf_crime(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    cfg.to_toml().map_err(to_py)
}

/// Writes synthetic `train/` and `test/` splits under `out_dir`.
/// Returns the number of training and test videos.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, seed=None))]
fn generate_synthetic(out_dir: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<(usize, usize)> {
    let cfg = config_from(config)?;
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| PyValueError::new_err("configuration has no synthetic section"))?;
    let (tr, te) = generate_synthetic_dataset(spec, seed.unwrap_or(cfg.data.synthetic_seed)).map_err(to_py)?;
    save_dataset(out_dir.join("train"), &tr).map_err(to_py)?;
    save_dataset(out_dir.join("test"), &te).map_err(to_py)?;
    Ok((tr.len(), te.len()))
}

/// Trains from a TOML configuration, optionally saves a checkpoint, and
/// returns the test-split report as JSON.
#[pyfunction]
#[pyo3(signature = (config=None, epochs=None, checkpoint_path=None))]
fn train_model(
    py: Python<'_>,
    config: Option<&str>,
    epochs: Option<usize>,
    checkpoint_path: Option<PathBuf>,
) -> PyResult<String> {
    let mut cfg = config_from(config)?;
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    py.detach(|| {
        let (trainer, data) = train::train(&cfg)?;
        if let Some(p) = &checkpoint_path {
            checkpoint::save_trainer(p, &trainer)?;
        }
        let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
        let (report, _) = evaluate(&trainer.model, eval_set, &cfg.inference, cfg.optim.input_cap)?;
        report.to_json()
    })
    .map_err(to_py)
}

/// Finite-difference gradient check. Returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gradcheck(config: Option<&str>) -> PyResult<(bool, String)> {
    let cfg = config_from(config)?;
    let report = vadclip_core::gradcheck::gradcheck(&cfg).map_err(to_py)?;
    Ok((report.passed(), report.to_string()))
}

/// A trained model restored from a checkpoint.
#[pyclass(unsendable)]
struct Model {
    config: RunConfig,
    model: VadClip,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let r = checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { config: r.config, model: r.model })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.model.vocab().labels().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Scores an `n x d` feature matrix given as nested lists.
    /// Returns `(c_branch, a_branch, segments)`.
    fn predict(&self, features: Vec<Vec<f32>>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Segment>)> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged feature rows"));
        }
        let flat: Vec<f32> = features.into_iter().flatten().collect();
        let m = Array2::from_shape_vec((n, d), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let seq = FeatureSequence::new("input", m).map_err(to_py)?;
        let t_out = self.model.class_embedding_values();
        let frames = predict_frames(&self.model, &t_out, &seq.to_f64(), self.config.optim.input_cap).map_err(to_py)?;
        let normal = self.model.vocab().normal_index();
        let segments = extract_segments(
            &frames.alignment,
            self.model.vocab(),
            unit_to_cosine(self.config.inference.segment_threshold),
            self.config.inference.min_length,
        );
        Ok((
            coarse_scores(&frames, normal, InferencePath::CBranch),
            coarse_scores(&frames, normal, InferencePath::ABranch),
            segments.iter().map(segment_tuple).collect(),
        ))
    }

    /// Evaluates on a dataset directory (default: the configured test split)
    /// and returns the report as JSON.
    #[pyo3(signature = (data_dir=None, path=None))]
    fn evaluate(&self, data_dir: Option<PathBuf>, path: Option<&str>) -> PyResult<String> {
        let mut inf = self.config.inference.clone();
        if let Some(p) = path {
            inf.path = p.parse().map_err(to_py)?;
        }
        let data = match data_dir {
            Some(d) => load_dataset(d).map_err(to_py)?,
            None => self.config.data.load().map_err(to_py)?.test,
        };
        let (report, _) = evaluate(&self.model, &data, &inf, self.config.optim.input_cap).map_err(to_py)?;
        report.to_json().map_err(to_py)
    }
}

#[pymodule]
fn vadclip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(frame_ap, m)?)?;
    m.add_function(wrap_pyfunction!(frame_auc, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_iou, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
