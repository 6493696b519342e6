use vadclip_core::checkpoint;
use vadclip_core::synthetic::{generate_synthetic_dataset, SyntheticSpec};
use vadclip_core::train::{evaluate, LoadedData};
use vadclip_core::{Error, RunConfig, Trainer};

fn small() -> (RunConfig, LoadedData) {
    let mut cfg = RunConfig::default();
    if let Some(spec) = cfg.data.synthetic.as_mut() {
        spec.videos_per_class = 2;
        spec.normal_videos = 4;
        spec.test_videos_per_class = 2;
        spec.test_normal_videos = 3;
        spec.frames = 32;
        spec.dim = 16;
        spec.burst_min = 4;
        spec.burst_max = 8;
    }
    cfg.optim.batch_size = 4;
    let data = cfg.data.load().unwrap();
    (cfg, data)
}

fn weights(t: &Trainer) -> Vec<u64> {
    t.model
        .store
        .iter()
        .flat_map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (cfg, data) = small();
    let mut straight = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).unwrap();
    straight.train_until(4).unwrap();

    let mut first = Trainer::new(cfg, &data.train, data.vocab.clone()).unwrap();
    first.train_until(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.vadc");
    checkpoint::save_trainer(&path, &first).unwrap();
    let mut resumed = checkpoint::load(&path).unwrap().into_trainer(&data.train).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.train_until(4).unwrap();

    assert_eq!(resumed.optimizer.step, straight.optimizer.step);
    assert_eq!(weights(&resumed), weights(&straight));
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn zero_lambda_and_default_both_train() {
    let (cfg, data) = small();
    for lambda in [0.0, cfg.loss.lambda] {
        let mut c = cfg.clone();
        c.loss.lambda = lambda;
        let mut t = Trainer::new(c, &data.train, data.vocab.clone()).unwrap();
        t.train_until(2).unwrap();
        assert!(t.history.iter().all(|h| h.total.is_finite()));
        if lambda == 0.0 {
            let h = &t.history[0];
            assert!((h.total - h.bce - h.nce).abs() < 1e-9);
        }
    }
}

#[test]
fn nan_weight_stops_training() {
    let (cfg, data) = small();
    let mut t = Trainer::new(cfg, &data.train, data.vocab.clone()).unwrap();
    t.model.store.iter_mut().next().unwrap().value[[0, 0]] = f64::NAN;
    match t.step(&[0, 1]) {
        Err(Error::NonFiniteLoss { .. }) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn evaluation_is_repeatable_from_a_checkpoint() {
    let (cfg, data) = small();
    let mut t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).unwrap();
    t.train_until(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vadc");
    checkpoint::save_trainer(&path, &t).unwrap();
    let a = checkpoint::load(&path).unwrap();
    let b = checkpoint::load(&path).unwrap();
    let (ra, pa) = evaluate(&a.model, &data.test, &cfg.inference, cfg.optim.input_cap).unwrap();
    let (rb, pb) = evaluate(&b.model, &data.test, &cfg.inference, cfg.optim.input_cap).unwrap();
    assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
    assert_eq!(pa.len(), pb.len());
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.c_branch == y.c_branch && x.segments == y.segments));
}

#[test]
fn untrained_model_scores_are_valid() {
    let (cfg, data) = small();
    let t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).unwrap();
    let (report, records) = evaluate(&t.model, &data.test, &cfg.inference, cfg.optim.input_cap).unwrap();
    assert!((0.0..=1.0).contains(&report.ap));
    for r in &records {
        assert!(r.c_branch.iter().chain(&r.a_branch).all(|v| (0.0..=1.0).contains(v)));
    }
    let labels: Vec<bool> = data
        .test
        .videos
        .iter()
        .flat_map(|v| v.annotation.frame_labels(v.features.len()))
        .collect();
    let prevalence = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    // A random head should not be far above chance.
    assert!(report.ap < prevalence + 0.5, "ap {} prevalence {}", report.ap, prevalence);
}

#[test]
fn feature_width_mismatch_is_rejected() {
    let (cfg, data) = small();
    let t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).unwrap();
    let spec = SyntheticSpec {
        dim: 8,
        ..cfg.data.synthetic.clone().unwrap()
    };
    let (_, other) = generate_synthetic_dataset(&spec, 1).unwrap();
    assert!(evaluate(&t.model, &other, &cfg.inference, cfg.optim.input_cap).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    let (cfg, data) = small();
    let empty = vadclip_core::Dataset::default();
    assert!(Trainer::new(cfg, &empty, data.vocab).is_err());
}
