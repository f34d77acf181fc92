//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmtcn::backbone::{Encoder, EncoderConfig, ModalInput, Predictor, Radar3dConfig, TcnConfig};
use mmtcn::data::{load_session, save_session, ClassId, GestureSegment, LabelSequence, LogitSequence, MealSession};
use mmtcn::evaluation::{class_segments, cohen_kappa, evaluate_fold, iou, match_segments, EvalConfig, FoldReport};
use mmtcn::experiment::{run_experiment, Condition, ExperimentConfig, Profile};
use mmtcn::fusion::{cma_forward, Cma, CmaConfig, FusionConfig, FusionHead, FusionMethod};
use mmtcn::losses::{
    adaptation, align, align_loss, ce_loss, cls_from_logits, cls_logp, tmse_logp, tmse_loss, total_loss, LossComponents,
    LossConfig, TmseGrad,
};
use mmtcn::mae::{Direction, Mae, MaeConfig};
use mmtcn::nn::gradcheck::{input_fd, param_fd, rel_error, worst_rel_error};
use mmtcn::nn::layers::Vol;
use mmtcn::nn::{hash_module, log_softmax_cols, Mat, Module, Tensor};
use mmtcn::preprocess::{window_session, WindowSpec};
use mmtcn::synth::{dataset_hash, generate_dataset, generate_session, generate_sessions, SynthConfig};
use mmtcn::trainer::{FusionCheckpoint, UnimodalCheckpoint};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    Mat::from_vec(rows, cols, Tensor::<f64>::uniform(&[rows * cols], 1.0, &mut rng(seed)).data)
}

fn rand_labels(n: usize, seed: u64) -> Vec<ClassId> {
    let mut r = rng(seed);
    (0..n).map(|_| ClassId::ALL[r.random_range(0..3)]).collect()
}

fn criterion_1() -> Outcome {
    for (n, seed) in [(1, 1), (5, 2), (40, 3)] {
        let y = LabelSequence::new(rand_labels(n, seed), 25.0);
        let uniform = LogitSequence::from_columns(&vec![[1.0 / 3.0; 3]; n]).unwrap();
        let l = ce_loss(&y, &uniform).unwrap();
        ensure!((l - 3f64.ln()).abs() < 1e-9, "ce on uniform = {l}");
    }

    // one class pair over two frames, weighted back by N * C
    let e = std::f64::consts::E;
    let contribution = |a: f64, b: f64| {
        let lp = Mat::from_vec(3, 2, vec![a.ln(), b.ln(), 0.0, 0.0, 0.0, 0.0]);
        tmse_logp(&lp, 4.0, TmseGrad::Detached).unwrap().0 * 6.0
    };
    let (c1, c2) = (contribution(e.powi(-1), e.powi(-3)), contribution(e.powi(-1), e.powi(-6)));
    ensure!((c1 - 4.0).abs() < 1e-9, "tmse contribution {c1}, expected 4");
    ensure!((c2 - 16.0).abs() < 1e-9, "clipped tmse contribution {c2}, expected 16");
    // a proper probability sequence where every class moves by 2 in log space
    let x = 1.0 / (1.0 + e * e);
    let p = LogitSequence::from_columns(&[[x, (1.0 - x) / 2.0, (1.0 - x) / 2.0], [x * e * e, (1.0 - x) / 2.0 / (e * e), (1.0 - x) / 2.0 / (e * e)]])
        .unwrap();
    let t = tmse_loss(&p, 4.0).unwrap();
    ensure!((t - 3.0 * 4.0 / 6.0).abs() < 1e-9, "tmse of full probability case {t}");

    let m = rand_mat(64, 9, 4);
    let shifted = Mat::from_vec(64, 9, m.data.iter().map(|v| v + 1.0).collect());
    let al = align_loss(&shifted, &m).unwrap();
    ensure!(al == 1.0, "unit-offset alignment {al}");

    let cfg = LossConfig::default();
    let y = rand_labels(9, 5);
    let (cls_fuse, _) = cls_logp(&y, &log_softmax_cols(&rand_mat(3, 9, 6)), &cfg).unwrap();
    let pred_r = Predictor::<f64>::new(64, &mut rng(7));
    let pred_i = Predictor::<f64>::new(64, &mut rng(8));
    let i2r = adaptation(&rand_mat(64, 9, 9), &m, &y, &pred_r, &cfg).unwrap();
    let r2i = adaptation(&rand_mat(64, 9, 10), &shifted, &y, &pred_i, &cfg).unwrap();
    ensure!(i2r.loss == i2r.align + 0.35 * i2r.cls, "adaptation recomposition");
    let c = LossComponents { cls_fuse, i2r: i2r.loss, r2i: r2i.loss };
    let total = total_loss(&c);
    ensure!(total == cls_fuse + r2i.loss + i2r.loss, "total {total} is not the sum of its parts");
    Ok(format!("ln3, 4, 16, 1 reproduced; total {total:.6} = sum of parts"))
}

fn criterion_2() -> Outcome {
    let full = LossConfig { tmse_grad: TmseGrad::Full, ..Default::default() };
    let n = 6;
    let y = rand_labels(n, 20);

    let z = rand_mat(3, n, 21);
    let (_, dz) = cls_from_logits(&y, &z, &full).unwrap();
    let fd = input_fd(&z.data, 1e-6, |v| cls_from_logits(&y, &Mat::from_vec(3, n, v.to_vec()), &full).unwrap().0);
    let e_cls = rel_error(&dz.data, &fd);

    let (a, b) = (rand_mat(8, n, 22), rand_mat(8, n, 23));
    let (_, da) = align(&a, &b).unwrap();
    let fd = input_fd(&a.data, 1e-6, |v| align(&Mat::from_vec(8, n, v.to_vec()), &b).unwrap().0);
    let e_al = rel_error(&da.data, &fd);

    // total = cls(head(m_r, m_i)) + adaptation(m'_r) + adaptation(m'_i)
    let cma = CmaConfig { n_heads: 2, head_dim: 4, model_dim: 8 };
    let head = FusionHead::<f64>::new(&FusionConfig { method: FusionMethod::Cma, cma }, &mut rng(24)).unwrap();
    let pred_r = Predictor::<f64>::new(8, &mut rng(25));
    let pred_i = Predictor::<f64>::new(8, &mut rng(26));
    let (m_r, m_i) = (rand_mat(8, n, 27), rand_mat(8, n, 28));
    let (mp_r, mp_i) = (rand_mat(8, n, 29), rand_mat(8, n, 30));
    let total = |h: &FusionHead<f64>, r: &Mat<f64>, i: &Mat<f64>| -> f64 {
        let (logp, _) = h.forward(&m_r, &m_i).unwrap();
        cls_logp(&y, &logp, &full).unwrap().0
            + adaptation(r, &m_r, &y, &pred_r, &full).unwrap().loss
            + adaptation(i, &m_i, &y, &pred_i, &full).unwrap().loss
    };
    let (logp, cache) = head.forward(&m_r, &m_i).unwrap();
    let (_, dlogp) = cls_logp(&y, &logp, &full).unwrap();
    let mut g_head = head.zeros_like();
    head.backward(&cache, &dlogp, Some(&mut g_head));
    let g_r = adaptation(&mp_r, &m_r, &y, &pred_r, &full).unwrap().grad;
    let g_i = adaptation(&mp_i, &m_i, &y, &pred_i, &full).unwrap().grad;
    let (name, e_head) = worst_rel_error(&g_head, &param_fd(&head, 1e-6, |h| total(h, &mp_r, &mp_i)));
    let fd_r = input_fd(&mp_r.data, 1e-6, |v| total(&head, &Mat::from_vec(8, n, v.to_vec()), &mp_i));
    let fd_i = input_fd(&mp_i.data, 1e-6, |v| total(&head, &mp_r, &Mat::from_vec(8, n, v.to_vec())));
    let e_total = e_head.max(rel_error(&g_r.data, &fd_r)).max(rel_error(&g_i.data, &fd_i));

    let params = Cma::<f64>::new(&cma, &mut rng(31)).unwrap();
    let w = rand_mat(16, n, 32);
    let weighted = |c: &Cma<f64>, a: &Mat<f64>, b: &Mat<f64>| -> f64 {
        cma_forward(a, b, c, &cma).unwrap().data.iter().zip(&w.data).map(|(x, y)| x * y).sum()
    };
    let (_, cc) = params.forward(&m_r, &m_i).unwrap();
    let mut g = params.zeros_like();
    let (dr, di) = params.backward(&cc, &w, Some(&mut g));
    let (cname, e_cma_p) = worst_rel_error(&g, &param_fd(&params, 1e-6, |c| weighted(c, &m_r, &m_i)));
    let fd_a = input_fd(&m_r.data, 1e-6, |v| weighted(&params, &Mat::from_vec(8, n, v.to_vec()), &m_i));
    let fd_b = input_fd(&m_i.data, 1e-6, |v| weighted(&params, &m_r, &Mat::from_vec(8, n, v.to_vec())));
    let e_cma = e_cma_p.max(rel_error(&dr.data, &fd_a)).max(rel_error(&di.data, &fd_b));

    let detail = format!("cls {e_cls:.1e}, align {e_al:.1e}, total {e_total:.1e} (worst head tensor {name}), cma {e_cma:.1e} (worst {cname})");
    ensure!(e_cls < 1e-4 && e_al < 1e-4 && e_total < 1e-4 && e_cma < 1e-4, "{detail}");
    Ok(detail)
}

fn random_segments(r: &mut ChaCha8Rng, class: ClassId) -> Vec<GestureSegment> {
    let count = r.random_range(0..=6);
    let mut out = Vec::with_capacity(count);
    let mut t = r.random_range(0..4);
    for _ in 0..count {
        let len = r.random_range(1..=8);
        out.push(GestureSegment::new(t, t + len, class));
        t += len + r.random_range(0..4);
    }
    out
}

/// Exhaustive maximum one-to-one matching over IoU-eligible pairs.
fn brute_force(gt: &[GestureSegment], pred: &[GestureSegment], k: f64) -> usize {
    fn go(g: usize, gt: &[GestureSegment], pred: &[GestureSegment], k: f64, used: &mut Vec<bool>) -> usize {
        if g == gt.len() {
            return 0;
        }
        let mut best = go(g + 1, gt, pred, k, used);
        for p in 0..pred.len() {
            if !used[p] && iou(&gt[g], &pred[p]) >= k {
                used[p] = true;
                best = best.max(1 + go(g + 1, gt, pred, k, used));
                used[p] = false;
            }
        }
        best
    }
    go(0, gt, pred, k, &mut vec![false; pred.len()])
}

fn criterion_3() -> Outcome {
    let mut r = rng(300);
    let mut matched = 0;
    for i in 0..1000 {
        let class = ClassId::GESTURES[i % 2];
        let gt = random_segments(&mut r, class);
        let pred = random_segments(&mut r, class);
        let k = match i % 4 {
            0 => 0.1,
            1 => 0.5,
            _ => r.random_range(0.05..=1.0),
        };
        let greedy = match_segments(&gt, &pred, k).unwrap().tp;
        let exact = brute_force(&gt, &pred, k);
        ensure!(greedy == exact, "instance {i}: greedy {greedy} vs exhaustive {exact} (k={k}, gt {gt:?}, pred {pred:?})");
        matched += exact;
    }
    Ok(format!("1000 instances agree ({matched} true positives in total)"))
}

/// Ground truth with boundaries jittered, some segments dropped and some
/// spurious runs inserted.
fn corrupt(labels: &[ClassId], r: &mut ChaCha8Rng) -> Vec<ClassId> {
    let mut out = labels.to_vec();
    let n = out.len();
    for t in 1..n {
        if labels[t] != labels[t - 1] && r.random_bool(0.7) {
            let shift = r.random_range(1..12usize);
            let c = labels[t - 1];
            for v in out.iter_mut().skip(t).take(shift) {
                *v = c;
            }
        }
    }
    for _ in 0..r.random_range(0..6) {
        let start = r.random_range(0..n - 1);
        let len = r.random_range(1..40).min(n - start);
        let c = ClassId::ALL[r.random_range(0..3)];
        out[start..start + len].iter_mut().for_each(|v| *v = c);
    }
    out
}

fn check_report(report: &FoldReport, preds: &BTreeMap<String, LabelSequence>, gt: &[MealSession]) -> Result<(), String> {
    for (s, score) in gt.iter().zip(&report.sessions) {
        for c in &score.scores {
            let class = ClassId::GESTURES.into_iter().find(|g| g.name() == c.class).unwrap();
            let n_pred = class_segments(&preds[&s.session_id].labels, class).len();
            let n_gt = class_segments(&s.labels.labels, class).len();
            ensure!(c.tp + c.fp == n_pred, "{}: tp+fp {} != #pred {n_pred}", s.session_id, c.tp + c.fp);
            ensure!(c.tp + c.fn_ == n_gt, "{}: tp+fn {} != #gt {n_gt}", s.session_id, c.tp + c.fn_);
        }
        for class in ClassId::GESTURES {
            let f1 = |k: f64| score.scores.iter().find(|c| c.class == class.name() && c.k == k).unwrap().f1;
            ensure!(f1(0.5) <= f1(0.1), "{}: F1(0.5) > F1(0.1)", s.session_id);
        }
    }
    for class in ClassId::GESTURES {
        ensure!(report.f1(class, 0.5).unwrap() <= report.f1(class, 0.1).unwrap(), "pooled F1(0.5) > F1(0.1)");
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let hand = [
        (GestureSegment::new(0, 10, ClassId::Eating), GestureSegment::new(0, 10, ClassId::Eating), 1.0),
        (GestureSegment::new(0, 10, ClassId::Eating), GestureSegment::new(10, 20, ClassId::Eating), 0.0),
        (GestureSegment::new(0, 10, ClassId::Eating), GestureSegment::new(5, 15, ClassId::Eating), 1.0 / 3.0),
    ];
    for (a, b, want) in hand {
        ensure!(iou(&a, &b) == want, "iou({a:?}, {b:?}) = {}", iou(&a, &b));
    }
    let mut template = SynthConfig::default();
    template.duration_s = 60.0;
    let sessions = generate_sessions(&template, 12, 400).unwrap();
    let mut r = rng(401);
    let cfg = EvalConfig::default();
    let mut n_reports = 0;
    for fold in 0..4 {
        let gt = &sessions[fold * 3..fold * 3 + 3];
        let mut preds = BTreeMap::new();
        for s in gt {
            let k = cohen_kappa(&s.labels, &s.labels).unwrap();
            ensure!(k == 1.0, "kappa(y, y) = {k}");
            preds.insert(s.session_id.clone(), LabelSequence::new(corrupt(&s.labels.labels, &mut r), 25.0));
        }
        let report = evaluate_fold(&preds, gt, &cfg, fold, "both").unwrap();
        check_report(&report, &preds, gt)?;
        n_reports += 1;
    }
    Ok(format!("hand IoUs exact; invariants hold on {n_reports} reports / 12 sessions"))
}

fn criterion_5() -> Outcome {
    let sessions = generate_sessions(&SynthConfig::default(), 6, 0).unwrap();
    let cfg = ExperimentConfig::profile(Profile::Smoke);
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run_experiment::<f32>(&sessions, &cfg, dir.path(), false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut ratios = Vec::new();
    for f in &out.folds {
        ensure!(f.frozen_hash_at_start == f.frozen_hash_at_end, "fold {}: frozen hash changed", f.fold);
        let fold_dir = dir.path().join(format!("fold_{}", f.fold));
        let fused = FusionCheckpoint::<f32>::load(&fold_dir.join("fusion")).unwrap();
        let imu = UnimodalCheckpoint::<f32>::load(&fold_dir.join("imu")).unwrap();
        let radar = UnimodalCheckpoint::<f32>::load(&fold_dir.join("radar")).unwrap();
        ensure!(hash_module(&fused.imu) == hash_module(&imu.model), "fold {}: IMU model differs from its checkpoint", f.fold);
        ensure!(hash_module(&fused.radar) == hash_module(&radar.model), "fold {}: radar model differs from its checkpoint", f.fold);
        for col in ["al_i2r", "al_r2i"] {
            let v = f.fusion_history.column(col).unwrap();
            ratios.push((f.fold, col, v[0], *v.last().unwrap()));
        }
    }
    let detail = ratios
        .iter()
        .map(|(f, c, a, b)| format!("fold {f} {c} {a:.4}->{b:.4} ({:.1}x)", a / b))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(elapsed < Duration::from_secs(600), "smoke profile took {elapsed:?}");
    ensure!(
        ratios.iter().all(|(_, _, a, b)| *b * 10.0 <= *a),
        "frozen hashes unchanged, but alignment did not fall 10x: {detail}"
    );
    Ok(format!("frozen hashes unchanged; {detail}; {elapsed:.0?}"))
}

fn criterion_6() -> Outcome {
    let sessions = generate_sessions(&SynthConfig::complementary(), 52, 0).unwrap();
    let cfg = ExperimentConfig::profile(Profile::Desk);
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run_experiment::<f32>(&sessions, &cfg, dir.path(), false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let f1 = |c: Condition, class: ClassId| out.row(c, class, 0.5).unwrap().f1;
    let kappa = out.row(Condition::Fusion, ClassId::Eating, 0.5).unwrap().kappa;
    let mut failures = Vec::new();
    let mut detail = vec![format!("fusion kappa {kappa:.3}")];
    if kappa < 0.60 {
        failures.push(format!("fusion kappa {kappa:.3} < 0.60"));
    }
    for class in ClassId::GESTURES {
        let (fu, ui, ur) = (f1(Condition::Fusion, class), f1(Condition::UniImu, class), f1(Condition::UniRadar, class));
        let (mi, mr) = (f1(Condition::FusionMissingImu, class), f1(Condition::FusionMissingRadar, class));
        detail.push(format!(
            "{}: fusion {fu:.3}, uni-imu {ui:.3}, uni-radar {ur:.3}, missing-imu {mi:.3}, missing-radar {mr:.3}",
            class.name()
        ));
        if fu < ui.max(ur) {
            failures.push(format!("{} fusion F1 below best unimodal", class.name()));
        }
        if mi < ur - 0.02 {
            failures.push(format!("{} missing-IMU F1 below Uni-Radar - 0.02", class.name()));
        }
        if mr < ui - 0.02 {
            failures.push(format!("{} missing-radar F1 below Uni-IMU - 0.02", class.name()));
        }
    }
    if elapsed > Duration::from_secs(3600) {
        failures.push(format!("took {elapsed:?}"));
    }
    detail.push(format!("{elapsed:.0?}"));
    let detail = detail.join("; ");
    ensure!(failures.is_empty(), "{}; {detail}", failures.join(", "));
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let tcn = TcnConfig::default();
    let configs = [
        ("imu 12ch", EncoderConfig::Tcn { in_channels: 12, tcn: tcn.clone() }),
        ("imu 6ch", EncoderConfig::Tcn { in_channels: 6, tcn: tcn.clone() }),
        ("radar desk", EncoderConfig::Radar3d(Radar3dConfig::desk())),
        ("radar full", EncoderConfig::Radar3d(Radar3dConfig::default())),
    ];
    let input = |cfg: &EncoderConfig, n: usize| -> ModalInput<f32> {
        match cfg {
            EncoderConfig::Tcn { in_channels, .. } => {
                ModalInput::Imu(Mat::from_vec(*in_channels, n, (0..in_channels * n).map(|i| (i as f32 * 0.37).sin()).collect()))
            }
            EncoderConfig::Radar3d(_) => {
                let mut v = Vol::zeros(1, n, 32, 64);
                v.data.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32 * 0.013).sin());
                ModalInput::Radar(v)
            }
        }
    };
    let mut checked = Vec::new();
    for (name, cfg) in &configs {
        let enc = Encoder::<f32>::new(cfg, &mut rng(700)).unwrap();
        let mae = match cfg {
            EncoderConfig::Tcn { in_channels: 12, .. } => Some(Direction::I2R),
            EncoderConfig::Radar3d(_) => Some(Direction::R2I),
            _ => None,
        }
        .map(|d| Mae::<f32>::new(&MaeConfig::new(d, cfg.clone()).unwrap(), &mut rng(701)).unwrap());
        for n in [1, 7, 1000] {
            let x = input(cfg, n);
            let (y, _) = enc.forward(&x).unwrap();
            ensure!((y.rows, y.cols) == (64, n), "{name} N={n}: output {}x{}", y.rows, y.cols);
            if let Some(m) = &mae {
                let (y, _) = m.forward(&x).unwrap();
                ensure!((y.rows, y.cols) == (64, n), "{name} adaptation N={n}: output {}x{}", y.rows, y.cols);
            }
        }
        checked.push(*name);
    }
    let cma = CmaConfig::default();
    let params = Cma::<f32>::new(&cma, &mut rng(702)).unwrap();
    for n in [1, 7, 1000] {
        let m = Mat::from_vec(64, n, (0..64 * n).map(|i| (i as f32 * 0.11).cos()).collect());
        let y = cma_forward(&m, &m, &params, &cma).unwrap();
        ensure!((y.rows, y.cols) == (128, n), "cma N={n}: {}x{}", y.rows, y.cols);
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::default();
    cfg.duration_s = 20.0;
    let session = generate_session(&cfg).unwrap();
    save_session(&session, &dir.path().join("a")).unwrap();
    let loaded = load_session(&dir.path().join("a")).unwrap();
    ensure!(loaded == session, "session changed through save/load");
    save_session(&loaded, &dir.path().join("b")).unwrap();
    for f in ["radar.rdt", "imu.bin", "labels.csv", "meta.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        ensure!(a == b, "{f} differs after a second save");
    }
    cfg.duration_s = 8.0;
    let h1 = {
        generate_dataset(&cfg, 3, 77, &dir.path().join("d1")).unwrap();
        dataset_hash(&dir.path().join("d1")).unwrap()
    };
    generate_dataset(&cfg, 3, 77, &dir.path().join("d2")).unwrap();
    let h2 = dataset_hash(&dir.path().join("d2")).unwrap();
    ensure!(h1 == h2, "dataset hash {h1} vs {h2}");
    Ok(format!("N->N for {}, both adaptation encoders and CMA (128xN); bit-exact session I/O; hash {}", checked.join(", "), &h1[..12]))
}

fn criterion_8() -> Outcome {
    let mut cfg = SynthConfig::default();
    cfg.duration_s = 100.0;
    let session = generate_session(&cfg).unwrap();
    ensure!(session.n_frames() == 2500, "session has {} frames", session.n_frames());
    let (windows, map) = window_session(&session, &WindowSpec::new(1000, 1000).unwrap()).unwrap();
    ensure!(windows.len() == 3, "{} windows", windows.len());
    let coverage = map.coverage();
    ensure!(coverage.iter().all(|&c| c == 1), "coverage {:?}", coverage.iter().filter(|&&c| c != 1).count());
    // each window reports the absolute frame index it believes it holds
    let outputs: Vec<Mat<f64>> = map
        .spans
        .iter()
        .map(|s| Mat::from_vec(1, 1000, (0..1000).map(|i| (s.start + i) as f64).collect()))
        .collect();
    let stitched = map.stitch(&outputs).unwrap();
    ensure!(stitched.cols == 2500, "stitched length {}", stitched.cols);
    ensure!(stitched.data.iter().enumerate().all(|(t, &v)| v == t as f64), "stitched frames out of place");
    Ok("3 windows, 2500 stitched frames, each written once".into())
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("criterion 1 (loss oracles)", criterion_1),
        ("criterion 2 (gradient checks)", criterion_2),
        ("criterion 3 (matcher vs brute force)", criterion_3),
        ("criterion 4 (evaluation invariants)", criterion_4),
        ("criterion 5 (freeze contract)", criterion_5),
        ("criterion 6 (desk-scale experiment)", criterion_6),
        ("criterion 7 (shapes and formats)", criterion_7),
        ("criterion 8 (windowing)", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
