//! Seeded synthetic datasets: Gaussian clusters per class, abnormal videos
//! built from normal background with inserted class-specific bursts.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSequence, GtSegment, LabelVocabulary, Video, VideoAnnotation};
use crate::error::{Error, Result};

const DEFAULT_CLASS_NAMES: [&str; 6] = [
    "fighting",
    "shooting",
    "riot",
    "abuse",
    "car accident",
    "explosion",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Number of abnormal classes (the normal class comes on top).
    pub num_classes: usize,
    /// Explicit class names; defaults are used when empty.
    pub class_names: Vec<String>,
    pub normal_label: String,
    pub videos_per_class: usize,
    pub normal_videos: usize,
    pub test_videos_per_class: usize,
    pub test_normal_videos: usize,
    pub frames: usize,
    pub dim: usize,
    pub burst_min: usize,
    pub burst_max: usize,
    pub max_bursts: usize,
    /// Distance between the normal centre and each class centre.
    pub margin: f64,
    /// Expected norm of the per-frame noise vector.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            class_names: Vec::new(),
            normal_label: "normal".into(),
            videos_per_class: 8,
            normal_videos: 24,
            test_videos_per_class: 4,
            test_normal_videos: 12,
            frames: 64,
            dim: 32,
            burst_min: 8,
            burst_max: 16,
            max_bursts: 2,
            margin: 2.0,
            noise: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSyntheticSpec(msg));
        if self.num_classes == 0 {
            return bad("zero anomaly classes".into());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if self.frames == 0 || self.dim == 0 {
            return bad("frames and dim must be positive".into());
        }
        if self.burst_min == 0 || self.burst_min > self.burst_max {
            return bad(format!(
                "burst length range [{}, {}] is empty",
                self.burst_min, self.burst_max
            ));
        }
        if self.burst_max > self.frames {
            return bad(format!(
                "{} frames too short for bursts of up to {}",
                self.frames, self.burst_max
            ));
        }
        if self.max_bursts == 0 {
            return bad("max_bursts must be at least 1".into());
        }
        if !(self.margin >= 0.0 && self.noise >= 0.0) {
            return bad("margin and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        if !self.class_names.is_empty() {
            return self.class_names.clone();
        }
        (0..self.num_classes)
            .map(|i| match DEFAULT_CLASS_NAMES.get(i) {
                Some(name) => (*name).to_string(),
                None => format!("anomaly{i}"),
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        LabelVocabulary::with_normal_first(&self.normal_label, &self.class_names())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| StandardNormal.sample(rng)))
}

/// Cluster centres: row 0 is the normal centre, row `c + 1` the centre of
/// abnormal class `c`, at distance `margin` from the normal centre.
fn centres(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = spec.dim;
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut unit = |rng: &mut ChaCha8Rng| loop {
        let mut v = gaussian(rng, d);
        // Gram-Schmidt against previous directions while d leaves room.
        if basis.len() < d {
            for b in &basis {
                let p = v.dot(b);
                v.scaled_add(-p, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            v /= norm;
            basis.push(v.clone());
            return v;
        }
    };
    let normal = unit(rng);
    let mut out = Array2::zeros((spec.num_classes + 1, d));
    out.row_mut(0).assign(&normal);
    for c in 0..spec.num_classes {
        let dir = unit(rng);
        out.row_mut(c + 1).assign(&(&normal + &(dir * spec.margin)));
    }
    out
}

/// Non-overlapping bursts separated by at least one background frame.
fn place_bursts(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = spec.frames;
    let count = rng.random_range(1..=spec.max_bursts);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count * 50 {
        if placed.len() == count {
            break;
        }
        let len = rng.random_range(spec.burst_min..=spec.burst_max);
        let start = rng.random_range(0..=n - len);
        let end = start + len;
        let clear = placed
            .iter()
            .all(|&(s, e)| end + 1 <= s || e + 1 <= start);
        if clear {
            placed.push((start, end));
        }
    }
    placed.sort_unstable();
    placed
}

fn make_video(
    spec: &SyntheticSpec,
    centres: &Array2<f64>,
    class: Option<(usize, &str)>,
    video_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Video> {
    let (n, d) = (spec.frames, spec.dim);
    let scale = spec.noise / (d as f64).sqrt();
    let mut rows = Array2::<f32>::zeros((n, d));
    let bursts = match class {
        Some(_) => place_bursts(spec, rng),
        None => Vec::new(),
    };
    let mut which = vec![0usize; n];
    if let Some((c, _)) = class {
        for &(s, e) in &bursts {
            which[s..e].iter_mut().for_each(|w| *w = c + 1);
        }
    }
    for (i, &centre) in which.iter().enumerate() {
        let noise = gaussian(rng, d);
        for j in 0..d {
            rows[[i, j]] = (centres[[centre, j]] + scale * noise[j]) as f32;
        }
    }
    let annotation = match class {
        Some((_, name)) => VideoAnnotation {
            video_id: video_id.clone(),
            label: 1,
            classes: vec![name.to_string()],
            segments: bursts
                .iter()
                .map(|&(start, end)| GtSegment {
                    start,
                    end,
                    class: name.to_string(),
                })
                .collect(),
        },
        None => VideoAnnotation {
            video_id: video_id.clone(),
            label: 0,
            classes: Vec::new(),
            segments: Vec::new(),
        },
    };
    Ok(Video {
        features: FeatureSequence::new(video_id, rows)?,
        annotation,
    })
}

fn make_split(
    spec: &SyntheticSpec,
    centres: &Array2<f64>,
    prefix: &str,
    per_class: usize,
    normals: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let names = spec.class_names();
    let mut videos = Vec::with_capacity(per_class * names.len() + normals);
    for i in 0..normals {
        videos.push(make_video(spec, centres, None, format!("{prefix}_n{i:03}"), rng)?);
    }
    for (c, name) in names.iter().enumerate() {
        for i in 0..per_class {
            let id = format!("{prefix}_a{c}_{i:03}");
            videos.push(make_video(spec, centres, Some((c, name)), id, rng)?);
        }
    }
    Dataset::new(videos)
}

/// Generates `(train, test)` splits. A pure function of `(spec, seed)`.
///
/// Both splits carry frame-level segments; training only ever reads the
/// video-level labels.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = centres(spec, &mut rng);
    let train = make_split(
        spec,
        &centres,
        "train",
        spec.videos_per_class,
        spec.normal_videos,
        &mut rng,
    )?;
    let test = make_split(
        spec,
        &centres,
        "test",
        spec.test_videos_per_class,
        spec.test_normal_videos,
        &mut rng,
    )?;
    Ok((train, test))
}
