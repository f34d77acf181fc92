//! Sample-wise Cohen's kappa, IoU-matched segmental F1, error breakdowns by
//! eating style and a paired signed-rank test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{runs, ClassId, GestureSegment, LabelSequence, MealSession, N_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: vec![0.1, 0.5] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::config("thresholds", "every k must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn same_len(a: &LabelSequence, b: &LabelSequence) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} frames", a.len()), format!("{} frames", b.len())));
    }
    Ok(())
}

pub fn confusion(y_true: &LabelSequence, y_pred: &LabelSequence) -> Result<[[u64; N_CLASSES]; N_CLASSES]> {
    same_len(y_true, y_pred)?;
    let mut m = [[0u64; N_CLASSES]; N_CLASSES];
    for (t, p) in y_true.labels.iter().zip(&y_pred.labels) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Cohen's kappa of a confusion matrix; 1 for an empty one.
pub fn kappa_from(m: &[[u64; N_CLASSES]; N_CLASSES]) -> f64 {
    let n: u64 = m.iter().flatten().sum();
    if n == 0 {
        return 1.0;
    }
    let n = n as f64;
    let po = (0..N_CLASSES).map(|i| m[i][i] as f64).sum::<f64>() / n;
    let pe = (0..N_CLASSES)
        .map(|i| {
            let row: u64 = m[i].iter().sum();
            let col: u64 = m.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        // both sequences constant: full agreement or none
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

pub fn cohen_kappa(y_true: &LabelSequence, y_pred: &LabelSequence) -> Result<f64> {
    Ok(kappa_from(&confusion(y_true, y_pred)?))
}

/// Intersection over union of two half-open frame intervals.
pub fn iou(a: &GestureSegment, b: &GestureSegment) -> f64 {
    let inter = a.end_frame.min(b.end_frame).saturating_sub(a.start_frame.max(b.start_frame));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SegmentCounts {
    pub fn add(&mut self, o: &SegmentCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }
}

fn ratio(num: usize, den: usize, empty_is_perfect: bool) -> f64 {
    match den {
        0 if empty_is_perfect => 1.0,
        0 => 0.0,
        d => num as f64 / d as f64,
    }
}

fn check_sorted(segs: &[GestureSegment], what: &str) -> Result<()> {
    for w in segs.windows(2) {
        if w[1].start_frame < w[0].end_frame {
            return Err(Error::validation(what, "segments must be sorted and non-overlapping"));
        }
    }
    if segs.iter().any(|s| s.class_id != segs[0].class_id) {
        return Err(Error::validation(what, "segments of more than one class"));
    }
    Ok(())
}

/// One-to-one matching of same-class segments. Predictions are visited in
/// temporal order; each claims the earliest unmatched ground-truth segment
/// with IoU >= k, or counts as a false positive.
pub fn match_segments(gt: &[GestureSegment], pred: &[GestureSegment], k: f64) -> Result<SegmentCounts> {
    check_sorted(gt, "ground truth")?;
    check_sorted(pred, "predictions")?;
    if let (Some(g), Some(p)) = (gt.first(), pred.first()) {
        if g.class_id != p.class_id {
            return Err(Error::validation("segments", "ground truth and predictions differ in class"));
        }
    }
    let mut used = vec![false; gt.len()];
    let mut first_open = 0;
    let mut tp = 0;
    for p in pred {
        // ground truth ending before this prediction starts can never match again
        while first_open < gt.len() && gt[first_open].end_frame <= p.start_frame {
            first_open += 1;
        }
        let hit = (first_open..gt.len())
            .take_while(|&g| gt[g].start_frame < p.end_frame)
            .find(|&g| !used[g] && iou(&gt[g], p) >= k);
        if let Some(g) = hit {
            used[g] = true;
            tp += 1;
        }
    }
    Ok(SegmentCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    })
}

pub fn segmental_f1(c: &SegmentCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / den as f64
    }
}

pub fn class_segments(labels: &[ClassId], class: ClassId) -> Vec<GestureSegment> {
    runs(labels).into_iter().filter(|s| s.class_id == class).collect()
}

/// Counts for Eating and Drinking, in that order.
pub fn match_labels(y_true: &LabelSequence, y_pred: &LabelSequence, k: f64) -> Result<[SegmentCounts; 2]> {
    same_len(y_true, y_pred)?;
    let mut out = [SegmentCounts::default(); 2];
    for (o, class) in out.iter_mut().zip(ClassId::GESTURES) {
        *o = match_segments(
            &class_segments(&y_true.labels, class),
            &class_segments(&y_pred.labels, class),
            k,
        )?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub k: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassScore {
    fn new(class: ClassId, k: f64, c: &SegmentCounts) -> Self {
        ClassScore {
            class: class.name().to_string(),
            k,
            precision: c.precision(),
            recall: c.recall(),
            f1: segmental_f1(c),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub eating_style: String,
    pub kappa: f64,
    pub scores: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleErrors {
    pub style: String,
    pub class: String,
    pub k: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub availability: String,
    /// Pooled over every frame of the fold's sessions.
    pub kappa: f64,
    pub n_frames: usize,
    /// Frame confusion matrix, rows ground truth.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    /// Counts pooled over sessions, per class and threshold.
    pub scores: Vec<ClassScore>,
    pub sessions: Vec<SessionScore>,
    pub style_errors: Vec<StyleErrors>,
}

impl FoldReport {
    pub fn score(&self, class: ClassId, k: f64) -> Option<&ClassScore> {
        self.scores.iter().find(|s| s.class == class.name() && s.k == k)
    }

    pub fn f1(&self, class: ClassId, k: f64) -> Option<f64> {
        self.score(class, k).map(|s| s.f1)
    }
}

/// Scores predictions for a set of sessions. `preds` is keyed by session id
/// and must cover every ground-truth session.
pub fn evaluate_fold(
    preds: &BTreeMap<String, LabelSequence>,
    gt: &[MealSession],
    cfg: &EvalConfig,
    fold: usize,
    availability: &str,
) -> Result<FoldReport> {
    cfg.validate()?;
    let mut conf = [[0u64; N_CLASSES]; N_CLASSES];
    let mut pooled = vec![[SegmentCounts::default(); 2]; cfg.thresholds.len()];
    let mut styles: BTreeMap<String, Vec<[SegmentCounts; 2]>> = BTreeMap::new();
    let mut sessions = Vec::with_capacity(gt.len());
    let mut n_frames = 0;
    for s in gt {
        let p = preds
            .get(&s.session_id)
            .ok_or_else(|| Error::validation(&s.session_id, "no prediction for session"))?;
        let m = confusion(&s.labels, p)?;
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                conf[i][j] += m[i][j];
            }
        }
        n_frames += s.n_frames();
        let style = s.eating_style().map_or_else(|| "unknown".to_string(), |e| e.to_string());
        let per_style = styles
            .entry(style.clone())
            .or_insert_with(|| vec![[SegmentCounts::default(); 2]; cfg.thresholds.len()]);
        let mut scores = Vec::new();
        for (ki, &k) in cfg.thresholds.iter().enumerate() {
            let counts = match_labels(&s.labels, p, k)?;
            for c in 0..2 {
                pooled[ki][c].add(&counts[c]);
                per_style[ki][c].add(&counts[c]);
                scores.push(ClassScore::new(ClassId::GESTURES[c], k, &counts[c]));
            }
        }
        sessions.push(SessionScore {
            session_id: s.session_id.clone(),
            eating_style: style,
            kappa: kappa_from(&m),
            scores,
        });
    }
    let mut scores = Vec::new();
    for (ki, &k) in cfg.thresholds.iter().enumerate() {
        for c in 0..2 {
            scores.push(ClassScore::new(ClassId::GESTURES[c], k, &pooled[ki][c]));
        }
    }
    let mut style_errors = Vec::new();
    for (style, per_k) in &styles {
        for (ki, &k) in cfg.thresholds.iter().enumerate() {
            for c in 0..2 {
                style_errors.push(StyleErrors {
                    style: style.clone(),
                    class: ClassId::GESTURES[c].name().to_string(),
                    k,
                    fp: per_k[ki][c].fp,
                    fn_: per_k[ki][c].fn_,
                });
            }
        }
    }
    Ok(FoldReport {
        fold,
        availability: availability.to_string(),
        kappa: kappa_from(&conf),
        n_frames,
        confusion: conf,
        scores,
        sessions,
        style_errors,
    })
}

/// Two-sided p-value of the Wilcoxon signed-rank test, normal approximation
/// with tie correction and no continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", a.len()), format!("{} values", b.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n < 6 {
        return Err(Error::InvalidArgument(format!("{n} nonzero differences; at least 6 are required")));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        w_plus += d[i..=j].iter().filter(|v| **v > 0.0).count() as f64 * rank;
        i = j + 1;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::InvalidArgument("zero variance in signed ranks".into()));
    }
    let z = (w_plus - mean) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((2.0 * (1.0 - std_normal.cdf(z.abs()))).min(1.0))
}

/// Writes `report.json`, `report.csv` and `style_errors.csv` into `dir`.
pub fn write_reports(reports: &[FoldReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::format("report.json", e.to_string()))?;
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("report.csv");
    std::fs::write(&path, report_csv(reports)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("style_errors.csv");
    std::fs::write(&path, style_csv(reports)).map_err(|e| Error::io(&path, e))
}

pub fn report_csv(reports: &[FoldReport]) -> String {
    let mut s = String::from("fold,availability,class,k,precision,recall,f1,kappa\n");
    for r in reports {
        for c in &r.scores {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.fold, r.availability, c.class, c.k, c.precision, c.recall, c.f1, r.kappa
            );
        }
    }
    s
}

pub fn style_csv(reports: &[FoldReport]) -> String {
    let mut s = String::from("fold,availability,style,class,k,fp,fn\n");
    for r in reports {
        for e in &r.style_errors {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.fold, r.availability, e.style, e.class, e.k, e.fp, e.fn_);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::paint_segments;
    use proptest::prelude::*;

    fn ls(v: &[usize]) -> LabelSequence {
        LabelSequence::new(v.iter().map(|&i| ClassId::from_index(i).unwrap()).collect(), 25.0)
    }

    fn seg(a: usize, b: usize) -> GestureSegment {
        GestureSegment::new(a, b, ClassId::Eating)
    }

    #[test]
    fn kappa_hand_cases() {
        assert_eq!(cohen_kappa(&ls(&[0, 1, 2, 1]), &ls(&[0, 1, 2, 1])).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&ls(&[0, 0, 1, 1]), &ls(&[0, 1, 0, 1])).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&ls(&[0, 0, 1, 1]), &ls(&[1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&ls(&[2, 2]), &ls(&[2, 2])).unwrap(), 1.0);
        assert!(cohen_kappa(&ls(&[0]), &ls(&[0, 1])).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        assert_eq!(iou(&seg(3, 9), &seg(3, 9)), 1.0);
        assert_eq!(iou(&seg(0, 5), &seg(5, 9)), 0.0);
        assert_eq!(iou(&seg(10, 20), &seg(15, 25)), 1.0 / 3.0);
    }

    #[test]
    fn matching_hand_cases() {
        // over-segmentation: the second fragment is a false positive
        let c = match_segments(&[seg(0, 20)], &[seg(0, 12), seg(13, 20)], 0.1).unwrap();
        assert_eq!(c, SegmentCounts { tp: 1, fp: 1, fn_: 0 });
        let gt = [seg(0, 10), seg(20, 30), seg(40, 50)];
        let c = match_segments(&gt, &gt, 0.5).unwrap();
        assert_eq!(c, SegmentCounts { tp: 3, fp: 0, fn_: 0 });
        let pred = [seg(1, 10), seg(21, 30), seg(47, 60)];
        let c = match_segments(&gt, &pred, 0.5).unwrap();
        assert_eq!(c, SegmentCounts { tp: 2, fp: 1, fn_: 1 });
        assert!((segmental_f1(&c) - 4.0 / 6.0).abs() < 1e-15);
        assert!(match_segments(&[seg(5, 9), seg(0, 3)], &[], 0.1).is_err());
    }

    #[test]
    fn best_iou_choice_is_not_needed_for_maximum_matching() {
        let gt = [seg(0, 9), seg(10, 14)];
        let pred = [seg(7, 12), seg(12, 13)];
        assert_eq!(match_segments(&gt, &pred, 0.1).unwrap().tp, 2);
    }

    #[test]
    fn f1_conventions() {
        assert_eq!(segmental_f1(&SegmentCounts::default()), 1.0);
        assert_eq!(segmental_f1(&SegmentCounts { tp: 0, fp: 2, fn_: 1 }), 0.0);
        assert_eq!(segmental_f1(&SegmentCounts { tp: 4, fp: 0, fn_: 0 }), 1.0);
    }

    #[test]
    fn cross_class_overlap_counts_as_error() {
        let c = match_labels(&ls(&[0, 1, 1, 1, 0]), &ls(&[0, 2, 2, 2, 0]), 0.1).unwrap();
        assert_eq!(c[0], SegmentCounts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(c[1], SegmentCounts { tp: 0, fp: 1, fn_: 0 });
    }

    fn session(id: &str, style: &str, labels: LabelSequence) -> MealSession {
        let n = labels.len();
        let mut meta = BTreeMap::new();
        meta.insert("eating_style".to_string(), style.to_string());
        let imu = crate::data::ImuSequence::new(crate::data::hand_channels(crate::data::Hand::Right), n, 25.0, vec![0.0; 6 * n]).unwrap();
        MealSession::new(id, None, Some(imu), labels, meta).unwrap()
    }

    #[test]
    fn fold_report_pools_counts_and_styles_partition_errors() {
        let gt1 = paint_segments(&[GestureSegment::new(5, 20, ClassId::Eating), GestureSegment::new(30, 50, ClassId::Drinking)], 60, 25.0);
        let gt2 = paint_segments(&[GestureSegment::new(10, 25, ClassId::Eating)], 40, 25.0);
        let p1 = paint_segments(&[GestureSegment::new(6, 19, ClassId::Eating), GestureSegment::new(40, 55, ClassId::Eating)], 60, 25.0);
        let gts = vec![session("a", "spoon", gt1.clone()), session("b", "hand", gt2.clone())];
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), p1);
        preds.insert("b".to_string(), gt2);
        let r = evaluate_fold(&preds, &gts, &EvalConfig::default(), 0, "both").unwrap();
        let e = r.score(ClassId::Eating, 0.1).unwrap();
        assert_eq!((e.tp, e.fp, e.fn_), (2, 1, 0));
        let d = r.score(ClassId::Drinking, 0.5).unwrap();
        assert_eq!((d.tp, d.fp, d.fn_), (0, 0, 1));
        for &k in &[0.1, 0.5] {
            for class in ClassId::GESTURES {
                let s = r.score(class, k).unwrap();
                let (fp, fn_) = r
                    .style_errors
                    .iter()
                    .filter(|x| x.k == k && x.class == class.name())
                    .fold((0, 0), |a, x| (a.0 + x.fp, a.1 + x.fn_));
                assert_eq!((fp, fn_), (s.fp, s.fn_));
            }
        }
        assert_eq!(r.n_frames, 100);
        assert!(evaluate_fold(&BTreeMap::new(), &gts, &EvalConfig::default(), 0, "both").is_err());
        let csv = report_csv(&[r.clone()]);
        assert_eq!(csv.lines().count(), 5);
        let tmp = tempfile::tempdir().unwrap();
        write_reports(&[r], tmp.path()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json[0]["scores"][0]["fn"], 0);
    }

    #[test]
    fn wilcoxon_cases() {
        let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.3).collect();
        let p = wilcoxon_signed_rank(&b, &a).unwrap();
        assert!(p < 0.001, "{p}");
        assert_eq!(p, wilcoxon_signed_rank(&a, &b).unwrap());
        assert!(wilcoxon_signed_rank(&a, &a).is_err());
        // n=8 distinct magnitudes: W+ = 27 against a null mean of 18 and variance 51
        let x = [1.0, 2.0, -3.0, 4.0, 5.0, -6.0, 7.0, 8.0];
        let zeros = [0.0; 8];
        let z: f64 = (27.0 - 18.0) / 51f64.sqrt();
        let expected = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z));
        assert!((wilcoxon_signed_rank(&x, &zeros).unwrap() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn counts_balance_and_f1_is_monotone_in_k(
            t in proptest::collection::vec(0usize..3, 1..120),
            p in proptest::collection::vec(0usize..3, 1..120),
        ) {
            let n = t.len().min(p.len());
            let (yt, yp) = (ls(&t[..n]), ls(&p[..n]));
            let lo = match_labels(&yt, &yp, 0.1).unwrap();
            let hi = match_labels(&yt, &yp, 0.5).unwrap();
            for (c, class) in ClassId::GESTURES.into_iter().enumerate() {
                let n_gt = class_segments(&yt.labels, class).len();
                let n_pred = class_segments(&yp.labels, class).len();
                for counts in [lo[c], hi[c]] {
                    prop_assert_eq!(counts.tp + counts.fp, n_pred);
                    prop_assert_eq!(counts.tp + counts.fn_, n_gt);
                }
                prop_assert!(segmental_f1(&hi[c]) <= segmental_f1(&lo[c]));
            }
        }

        #[test]
        fn kappa_is_invariant_under_consistent_relabelling(
            t in proptest::collection::vec(0usize..3, 2..80),
            p in proptest::collection::vec(0usize..3, 2..80),
            perm in Just([0usize, 1, 2]).prop_shuffle(),
        ) {
            let n = t.len().min(p.len());
            let k = cohen_kappa(&ls(&t[..n]), &ls(&p[..n])).unwrap();
            let tr: Vec<usize> = t[..n].iter().map(|&i| perm[i]).collect();
            let pr: Vec<usize> = p[..n].iter().map(|&i| perm[i]).collect();
            prop_assert!((cohen_kappa(&ls(&tr), &ls(&pr)).unwrap() - k).abs() < 1e-12);
            prop_assert_eq!(cohen_kappa(&ls(&t[..n]), &ls(&t[..n])).unwrap(), 1.0);
        }
    }
}
