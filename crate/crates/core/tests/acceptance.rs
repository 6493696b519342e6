//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vadclip_core::adapter::{build_adjacency, distance_logits, AdapterConfig, LgtAdapter};
use vadclip_core::checkpoint;
use vadclip_core::data::{DetectionSegment, FeatureSequence, GtSegment};
use vadclip_core::gradcheck::{classifier_grad_through_alignment, gradcheck, Status};
use vadclip_core::io::{decode_matrix, encode_matrix, read_feature_file, write_feature_file};
use vadclip_core::metrics::{frame_ap, frame_auc, iou, map_at_iou, DEFAULT_IOU_THRESHOLDS};
use vadclip_core::model::BranchConfig;
use vadclip_core::objectives::{mil_align_loss, mil_align_probabilities, mil_align_scores, LossConfig, TopKRule};
use vadclip_core::params::{ParamGroup, ParamStore, Session};
use vadclip_core::train::{evaluate, RunConfig, Trainer};
use vadclip_core::InferencePath;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

// 1. Finite-difference gradient suite.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck(&RunConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    print!("{report}");
    for r in &report.rows {
        if r.group.starts_with("text_encoder") {
            check(r.status == Status::NoGradient, "frozen encoder not reported as no gradient")?;
        } else {
            check(r.status == Status::Pass, format!("group {} at {:?}", r.group, r.rel_error))?;
        }
    }
    let groups: Vec<_> = report.rows.iter().map(|r| r.group.as_str()).collect();
    for g in ParamGroup::ALL {
        check(groups.contains(&g.as_str()), format!("group {} missing", g.as_str()))?;
    }
    let base = RunConfig::default();
    let detached = classifier_grad_through_alignment(&base, true).map_err(|e| e.to_string())?;
    let attached = classifier_grad_through_alignment(&base, false).map_err(|e| e.to_string())?;
    check(detached == 0.0 && attached > 0.0, "detach flag does not isolate the classifier")?;
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    let worst = report.rows.iter().filter_map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(format!("{} groups, worst rel. error {worst:.2e}, {elapsed:.1?}", ParamGroup::ALL.len()))
}

// 2. Adjacency invariants.
fn adjacency_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = AdapterConfig::default();
    for trial in 0..500 {
        let n = rng.random_range(1..=24);
        let d = rng.random_range(1..=8);
        let mut x = random_matrix(&mut rng, n, d);
        if trial % 5 == 0 {
            // Clustered rows so the similarity threshold keeps off-diagonal edges.
            let base = x.row(0).to_owned();
            for mut r in x.rows_mut() {
                r.scaled_add(3.0, &base);
            }
        }
        if trial % 7 == 0 {
            x.row_mut(n - 1).fill(0.0);
        }
        let sigma = rng.random_range(0.2..4.0);
        let adj = build_adjacency(&x, &AdapterConfig { sigma, ..cfg.clone() });
        for (name, h) in [("sim", &adj.sim), ("dis", &adj.dis)] {
            for (i, row) in h.rows().into_iter().enumerate() {
                let s: f64 = row.sum();
                check((s - 1.0).abs() <= 1e-6, format!("trial {trial}: {name} row {i} sums to {s}"))?;
            }
        }
        let raw = distance_logits(n, sigma);
        check(raw == raw.t(), format!("trial {trial}: raw distance matrix not symmetric"))?;
    }
    let one = build_adjacency(&Array2::from_elem((1, 4), 0.3), &cfg);
    check(one.sim == ndarray::array![[1.0]] && one.dis == ndarray::array![[1.0]], "n = 1 is not [[1.0]]")?;
    Ok("500 random inputs".into())
}

// 3. Locality of windowed attention.
fn locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut trials = 0;
    while trials < 100 {
        let n = rng.random_range(6..=40);
        let w = rng.random_range(2..=8);
        let overlap = [0.0, 0.25, 0.5][rng.random_range(0..3)];
        let d = 4;
        let cfg = AdapterConfig {
            window_length: w,
            window_overlap: overlap,
            ..Default::default()
        };
        let windows = cfg.windows(n);
        let i = rng.random_range(0..n);
        let far: Vec<usize> = (0..n)
            .filter(|&j| !windows.iter().any(|r| r.contains(&i) && r.contains(&j)))
            .collect();
        if far.is_empty() {
            continue;
        }
        let mut store = ParamStore::new();
        let adapter = LgtAdapter::new(&mut store, &mut ChaCha8Rng::seed_from_u64(trials), cfg, d);
        let x = random_matrix(&mut rng, n, d);
        let mut y = x.clone();
        y.row_mut(i).mapv_inplace(|v| v + rng.random_range(0.5..5.0));
        let run = |x: &Array2<f64>| {
            let mut s = Session::new(&store, false);
            let v = s.graph.constant(x.clone());
            let out = adapter.local_attention(&mut s, v);
            s.graph.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for &j in &far {
            let same = a.row(j).iter().zip(b.row(j).iter()).all(|(p, q)| p.to_bits() == q.to_bits());
            check(same, format!("n={n} w={w}: frame {j} changed when frame {i} was perturbed"))?;
        }
        trials += 1;
    }
    Ok("100 random trials bit-unchanged".into())
}

fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| labels[i]).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * tp / sel.len() as f64;
        prev_r = r;
    }
    ap
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

type Pred = (usize, usize, usize, usize, f64);
type Gt = (usize, usize, usize, usize);

/// Enumerates every injective assignment of predictions to compatible GT
/// segments and keeps the one a confidence-ordered, best-IoU-first matcher
/// prefers (lexicographic over predictions by descending confidence).
fn map_oracle(preds: &[Pred], gts: &[Gt], t: f64) -> f64 {
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.1).collect();
    let mut total = 0.0;
    for &class in &classes {
        let mut p: Vec<Pred> = preds.iter().copied().filter(|p| p.1 == class).collect();
        p.sort_by(|a, b| b.4.total_cmp(&a.4));
        let g: Vec<Gt> = gts.iter().copied().filter(|g| g.1 == class).collect();
        let mut best: Option<(Vec<(f64, i64)>, Vec<bool>)> = None;
        let mut assign = vec![None; p.len()];
        fn rec(
            k: usize,
            p: &[Pred],
            g: &[Gt],
            t: f64,
            used: &mut Vec<bool>,
            assign: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<(f64, i64)>, Vec<bool>)>,
        ) {
            if k == p.len() {
                let key: Vec<(f64, i64)> = assign
                    .iter()
                    .enumerate()
                    .map(|(pi, a)| match a {
                        Some(gi) => (iou((p[pi].2, p[pi].3), (g[*gi].2, g[*gi].3)), -(*gi as i64)),
                        None => (-1.0, 0),
                    })
                    .collect();
                let better = match best {
                    None => true,
                    Some((b, _)) => key.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
                };
                if better {
                    *best = Some((key, assign.iter().map(|a| a.is_some()).collect()));
                }
                return;
            }
            assign[k] = None;
            rec(k + 1, p, g, t, used, assign, best);
            for gi in 0..g.len() {
                if !used[gi] && g[gi].0 == p[k].0 && iou((p[k].2, p[k].3), (g[gi].2, g[gi].3)) >= t {
                    used[gi] = true;
                    assign[k] = Some(gi);
                    rec(k + 1, p, g, t, used, assign, best);
                    assign[k] = None;
                    used[gi] = false;
                }
            }
        }
        rec(0, &p, &g, t, &mut vec![false; g.len()], &mut assign, &mut best);
        let matched = best.map(|b| b.1).unwrap_or_default();
        let (mut tp, mut ap) = (0.0, 0.0);
        for (rank, &m) in matched.iter().enumerate() {
            if m {
                tp += 1.0;
                ap += tp / (rank + 1) as f64;
            }
        }
        total += ap / g.len() as f64;
    }
    total / classes.len() as f64
}

// 4. Metric kernels against brute-force oracles.
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=64);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..6) as f64 / 5.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == n {
            continue;
        }
        let ap = frame_ap(&scores, &labels).map_err(|e| e.to_string())?;
        let auc = frame_auc(&scores, &labels).map_err(|e| e.to_string())?;
        check((ap - ap_oracle(&scores, &labels)).abs() <= 1e-9, format!("AP mismatch on {scores:?}"))?;
        check((auc - auc_oracle(&scores, &labels)).abs() <= 1e-9, format!("AUC mismatch on {scores:?}"))?;
        done += 1;
    }

    let names = ["a", "b"];
    let mut cases = 0;
    for _ in 0..3000 {
        let videos = rng.random_range(1..=2);
        let n_gt = rng.random_range(1..=3);
        let n_pred = rng.random_range(0..=5);
        let interval = |rng: &mut ChaCha8Rng| {
            let s = rng.random_range(0..16);
            (s, s + rng.random_range(1..=8))
        };
        let gts: Vec<Gt> = (0..n_gt)
            .map(|_| {
                let (s, e) = interval(&mut rng);
                (rng.random_range(0..videos), rng.random_range(0..2), s, e)
            })
            .collect();
        let preds: Vec<Pred> = (0..n_pred)
            .map(|i| {
                let (s, e) = interval(&mut rng);
                (rng.random_range(0..videos), rng.random_range(0..2), s, e, 1.0 - i as f64 * 0.1 - rng.random_range(0.0..0.05))
            })
            .collect();
        let mut pv: Vec<Vec<DetectionSegment>> = vec![Vec::new(); videos];
        for &(v, c, s, e, conf) in &preds {
            pv[v].push(DetectionSegment { class: names[c].into(), start: s, end: e, confidence: conf });
        }
        let mut gv: Vec<Vec<GtSegment>> = vec![Vec::new(); videos];
        for &(v, c, s, e) in &gts {
            gv[v].push(GtSegment { start: s, end: e, class: names[c].into() });
        }
        let r = map_at_iou(&pv, &gv, &DEFAULT_IOU_THRESHOLDS).map_err(|e| e.to_string())?;
        for (k, &t) in DEFAULT_IOU_THRESHOLDS.iter().enumerate() {
            let want = map_oracle(&preds, &gts, t);
            check((r.map[k] - want).abs() <= 1e-12, format!("mAP@{t}: {} vs oracle {want} on {preds:?} / {gts:?}", r.map[k]))?;
        }
        cases += 1;
    }

    let auc = frame_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    check(auc == 0.75, format!("worked AUC example gave {auc}"))?;
    check(iou((0, 10), (5, 15)) == 1.0 / 3.0, "IoU([0,10),[5,15)) != 1/3")?;
    Ok(format!("1000 AP/AUC instances, {cases} mAP cases, worked examples exact"))
}

// 5. MIL-Align contracts.
fn mil_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.random_range(1..=40);
        let m = rng.random_range(2..=6);
        let map = random_matrix(&mut rng, n, m);
        let cfg = LossConfig {
            temperature: rng.random_range(0.01..2.0),
            ..Default::default()
        };
        let k = TopKRule::Fraction(16).k(n);
        let scores = mil_align_scores(&map, &cfg);
        for j in 0..m {
            let mut col = map.column(j).to_vec();
            col.sort_by(|a, b| b.total_cmp(a));
            let want = col[..k].iter().sum::<f64>() / k as f64;
            check((scores[j] - want).abs() <= 1e-12, format!("trial {trial}: column {j} score"))?;
        }
        let p = mil_align_probabilities(&scores, cfg.temperature);
        let sum: f64 = p.iter().sum();
        check((sum - 1.0).abs() <= 1e-6, format!("trial {trial}: p sums to {sum}"))?;
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
        check(argmax(&p) == argmax(&scores), format!("trial {trial}: argmax differs"))?;
    }
    for m in 2..=8 {
        let loss = mil_align_loss(&vec![0.3; m], &[0], &LossConfig::default());
        check((loss - (m as f64).ln()).abs() <= 1e-9, format!("uniform loss {loss} for m={m}"))?;
    }
    Ok("1000 random (S, tau) draws".into())
}

// 6. Overfit on the seeded synthetic set.
fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let spec = cfg.data.synthetic.clone().unwrap();
    let abnormal = data.train.videos.iter().filter(|v| v.annotation.is_abnormal()).count();
    check(
        spec.num_classes == 3 && spec.margin == 2.0 && spec.frames == 64 && spec.dim == 32,
        "synthetic defaults drifted",
    )?;
    check(abnormal == 24 && data.train.len() - abnormal == 24, "train split is not 24 + 24")?;
    let mut trainer = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
    let mut last = (0.0, 0.0);
    while trainer.epoch < 200 {
        trainer.train_until(trainer.epoch + 10).map_err(|e| e.to_string())?;
        let (report, _) = evaluate(&trainer.model, &data.train, &cfg.inference, cfg.optim.input_cap).map_err(|e| e.to_string())?;
        last = (report.ap, report.avg_map().unwrap_or(0.0));
        if last.0 >= 0.95 && last.1 >= 0.5 {
            break;
        }
    }
    let elapsed = start.elapsed();
    let msg = format!(
        "lr {:e}, epoch {}: train AP {:.4}, AVG mAP {:.4}, {elapsed:.1?}",
        cfg.optim.learning_rate, trainer.epoch, last.0, last.1
    );
    check(last.0 >= 0.95 && last.1 >= 0.5 && elapsed < Duration::from_secs(600), msg.clone())?;

    // Report-only: the full-scale learning rate on the same budget.
    let slow = RunConfig {
        optim: vadclip_core::train::OptimConfig {
            learning_rate: RunConfig::xd_violence().optim.learning_rate,
            ..cfg.optim.clone()
        },
        ..cfg.clone()
    };
    let mut t = Trainer::new(slow.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
    t.train_until(200).map_err(|e| e.to_string())?;
    let (r, _) = evaluate(&t.model, &data.train, &slow.inference, slow.optim.input_cap).map_err(|e| e.to_string())?;
    println!(
        "  info: lr {:e} after 200 epochs: train AP {:.4}, AVG mAP {:.4}",
        slow.optim.learning_rate,
        r.ap,
        r.avg_map().unwrap_or(0.0)
    );
    Ok(msg)
}

// 7. Dual-branch ablation rows.
fn ablation() -> Outcome {
    let base = RunConfig::default();
    let data = base.data.load().map_err(|e| e.to_string())?;
    let mut table = BTreeMap::new();
    println!("  {:<22} {:>8} {:>8} {:>8}", "row", "c-ap", "a-ap", "ap");
    for (name, branches) in BranchConfig::ablation_rows() {
        let mut cfg = base.clone();
        cfg.model.branches = branches.clone();
        cfg.inference.path = if branches.c_branch {
            InferencePath::CBranch
        } else {
            InferencePath::ABranch
        };
        let mut trainer = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
        trainer.train_until(100).map_err(|e| e.to_string())?;
        let (report, _) = evaluate(&trainer.model, &data.test, &cfg.inference, cfg.optim.input_cap).map_err(|e| e.to_string())?;
        println!(
            "  {:<22} {:>8.4} {:>8.4} {:>8.4}",
            name, report.paths["c-branch"].ap, report.paths["a-branch"].ap, report.ap
        );
        table.insert(name, report.ap);
    }
    check(table.len() == 6, "not all rows ran")?;
    let (full, a_only) = (table["full"], table["a_branch_only"]);
    check(full >= a_only, format!("full AP {full:.4} < A-branch-only AP {a_only:.4}"))?;
    Ok(format!("6 rows, full {full:.4} >= a_branch_only {a_only:.4}"))
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    if let Some(spec) = cfg.data.synthetic.as_mut() {
        spec.videos_per_class = 3;
        spec.normal_videos = 6;
        spec.test_videos_per_class = 2;
        spec.test_normal_videos = 3;
    }
    cfg
}

// 8. Determinism and persistence.
fn determinism() -> Outcome {
    let cfg = small_config();
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let run = || -> Result<Vec<f64>, String> {
        let mut t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
        while t.step_losses.len() < 5 {
            t.train_epoch().map_err(|e| e.to_string())?;
        }
        Ok(t.step_losses[..5].iter().map(|l| l.total).collect())
    };
    let (a, b) = (run()?, run()?);
    check(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "first 5 step losses differ")?;

    let mut t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
    t.train_until(3).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.vadc");
    checkpoint::save_trainer(&path, &t).map_err(|e| e.to_string())?;
    let restored = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let (r1, p1) = evaluate(&t.model, &data.test, &cfg.inference, cfg.optim.input_cap).map_err(|e| e.to_string())?;
    let (r2, p2) = evaluate(&restored.model, &data.test, &cfg.inference, cfg.optim.input_cap).map_err(|e| e.to_string())?;
    check(r1 == r2 && p1 == p2, "restored checkpoint changes the evaluation")?;
    check(
        r1.to_json().map_err(|e| e.to_string())? == r2.to_json().map_err(|e| e.to_string())?,
        "serialized reports differ",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let (n, d) = (rng.random_range(1..40), rng.random_range(1..40));
        let mut m = Array2::from_shape_fn((n, d), |_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff));
        m[[0, 0]] = if trial % 2 == 0 { -0.0 } else { f32::MIN_POSITIVE / 4.0 };
        let seq = FeatureSequence::new(format!("v{trial}"), m.clone()).map_err(|e| e.to_string())?;
        let bytes = encode_matrix(&m).map_err(|e| e.to_string())?;
        let back = decode_matrix(&bytes).map_err(|e| e.to_string())?;
        let file = dir.path().join(format!("v{trial}.vadf"));
        write_feature_file(&file, &seq).map_err(|e| e.to_string())?;
        let read = read_feature_file(&file).map_err(|e| e.to_string())?;
        let bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        check(bits(&back) == bits(&m) && bits(read.features()) == bits(&m), format!("trial {trial}: round trip not bit-exact"))?;
    }
    Ok("identical step losses, bit-exact report and feature round trips".into())
}

// 9. Frozen text encoder, trainable context.
fn frozen_contract() -> Outcome {
    let cfg = small_config();
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let mut t = Trainer::new(cfg.clone(), &data.train, data.vocab.clone()).map_err(|e| e.to_string())?;
    let encoder = t.model.text_encoder().cloned().ok_or("model has no text encoder")?;
    let before = encoder.parameter_bytes();
    let ctx = t.model.prompt_bank().and_then(|b| b.context_param()).ok_or("no context tokens")?;
    let ctx_before = t.model.store.get(ctx).value.clone();
    let loss = t.step(&[0, data.train.len() - 1]).map_err(|e| e.to_string())?;
    check(loss.total > 0.0, "loss was zero")?;
    let ctx_after = t.model.store.get(ctx).value.clone();
    let changed = ctx_before.iter().zip(ctx_after.iter()).filter(|(a, b)| a != b).count();
    check(changed > 0, "context tokens unchanged after one step")?;
    t.train_until(2).map_err(|e| e.to_string())?;
    let after = t.model.text_encoder().ok_or("encoder lost")?.parameter_bytes();
    check(before == after, "text encoder weights changed")?;
    Ok(format!("{} encoder bytes unchanged, {changed} context entries moved", before.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("adjacency invariants", adjacency_invariants),
        ("locality", locality),
        ("metric oracles", metric_oracles),
        ("MIL contracts", mil_contracts),
        ("overfit check", overfit),
        ("ablation direction", ablation),
        ("determinism and persistence", determinism),
        ("frozen contract", frozen_contract),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} [PASS] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} [FAIL] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
