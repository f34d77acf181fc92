//! Cross-validated comparison of the unimodal, fused and missing-modality
//! conditions, with the consolidated table, significance tests and plots.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::Modality;
use crate::data::mmgf::DType;
use crate::data::{ClassId, LabelSequence, MealSession};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_fold, kappa_from, wilcoxon_signed_rank, write_reports, EvalConfig, FoldReport, SegmentCounts};
use crate::inference::{predict_session, predict_unimodal, predictions_csv, Availability};
use crate::kv::{join_list, KvDoc};
use crate::nn::Scalar;
use crate::plots::{bar_chart_svg, box_plot_svg};
use crate::trainer::{
    make_folds, train_fusion, train_unimodal, FusionCheckpoint, LossHistory, ModelConfig, TrainConfig, UnimodalCheckpoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    UniImu,
    UniRadar,
    Fusion,
    FusionMissingImu,
    FusionMissingRadar,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::UniImu,
        Condition::UniRadar,
        Condition::Fusion,
        Condition::FusionMissingImu,
        Condition::FusionMissingRadar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::UniImu => "Uni-IMU",
            Condition::UniRadar => "Uni-Radar",
            Condition::Fusion => "Fusion",
            Condition::FusionMissingImu => "Fusion-missing-IMU",
            Condition::FusionMissingRadar => "Fusion-missing-Radar",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Condition::UniImu => "uni_imu",
            Condition::UniRadar => "uni_radar",
            Condition::Fusion => "fusion",
            Condition::FusionMissingImu => "fusion_missing_imu",
            Condition::FusionMissingRadar => "fusion_missing_radar",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s) || c.slug() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Smoke,
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::InvalidArgument(format!("unknown profile `{s}`; expected smoke|desk|full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Keep only the first sessions in id order.
    pub max_sessions: Option<usize>,
    pub n_folds: usize,
    pub fold_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::profile(Profile::Full)
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 4] = ["max_sessions", "n_folds", "fold_seed", "eval.thresholds"];

    pub fn profile(p: Profile) -> Self {
        let (max_sessions, n_folds, epochs) = match p {
            Profile::Smoke => (Some(6), 2, 3),
            Profile::Desk => (None, 2, 30),
            Profile::Full => (None, 5, 100),
        };
        ExperimentConfig {
            max_sessions,
            n_folds,
            fold_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig { epochs, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        match self.max_sessions {
            Some(n) => doc.set("max_sessions", n),
            None => doc.set("max_sessions", "all"),
        }
        doc.set("n_folds", self.n_folds);
        doc.set("fold_seed", self.fold_seed);
        doc.set("eval.thresholds", join_list(&self.eval.thresholds));
        self.train.write_kv(doc);
        self.model.write_kv(doc);
    }

    /// Keys in `doc` override `base`; unknown keys are rejected by name.
    pub fn read_kv_over(doc: &KvDoc, base: &ExperimentConfig) -> Result<Self> {
        for key in doc.keys() {
            let known = Self::KEYS.contains(&key)
                || TrainConfig::KEYS.contains(&key)
                || ModelConfig::is_model_key(key)
                || key == "precision";
            if !known {
                return Err(Error::config(key, "unknown configuration key"));
            }
        }
        let mut merged = KvDoc::new();
        base.write_kv(&mut merged);
        for (k, v) in doc.iter() {
            merged.set(k, v);
        }
        // a new window without a stride means non-overlapping windows
        if doc.get("window_frames").is_some() && doc.get("stride_frames").is_none() {
            merged.remove("stride_frames");
        }
        let max_sessions = match merged.get("max_sessions") {
            None | Some("all") => None,
            Some(_) => Some(merged.require_value::<usize>("max_sessions")?),
        };
        let cfg = ExperimentConfig {
            max_sessions,
            n_folds: merged.require_value("n_folds")?,
            fold_seed: merged.require_value("fold_seed")?,
            model: ModelConfig::read_kv(&merged)?,
            train: TrainConfig::read_kv(&merged)?,
            eval: EvalConfig {
                thresholds: merged.parse_list("eval.thresholds")?.unwrap_or_default(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::config("n_folds", "need at least 2 folds"));
        }
        if self.max_sessions == Some(0) {
            return Err(Error::config("max_sessions", "must be positive"));
        }
        self.train.validate()?;
        self.eval.validate()
    }
}

/// Outputs of one fold's training, kept for inspection.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub imu_history: LossHistory,
    pub radar_history: LossHistory,
    pub fusion_history: LossHistory,
    pub frozen_hash_at_start: [String; 2],
    pub frozen_hash_at_end: [String; 2],
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<FoldReport>,
    pub folds: Vec<FoldArtifacts>,
    pub table: Vec<TableRow>,
    pub significance: Vec<SignificanceRow>,
}

impl ExperimentOutcome {
    pub fn row(&self, condition: Condition, class: ClassId, k: f64) -> Option<&TableRow> {
        self.table
            .iter()
            .find(|r| r.condition == condition.name() && r.class == class.name() && r.k == k)
    }
}

enum Stage<C> {
    Done(C),
    Train(PathBuf),
}

/// Finished checkpoints are reused with `resume`; anything else already in
/// place is an error so that a stale run is never silently mixed in.
fn stage<C>(dir: &Path, resume: bool, load: impl Fn(&Path) -> Result<C>) -> Result<Stage<C>> {
    let partial = dir.with_extension("partial");
    if dir.exists() {
        if !resume {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} already exists; pass --resume to reuse it or choose a fresh output directory",
                dir.display()
            )));
        }
        info!("resuming from {}", dir.display());
        return Ok(Stage::Done(load(dir)?));
    }
    if partial.exists() {
        if !resume {
            return Err(Error::InvalidArgument(format!(
                "partial checkpoint {} found; pass --resume to retrain it",
                partial.display()
            )));
        }
        std::fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    Ok(Stage::Train(partial))
}

fn commit(partial: &Path, dir: &Path) -> Result<()> {
    std::fs::rename(partial, dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_echo(out: &Path, cfg: &ExperimentConfig, precision: &str, resume: bool) -> Result<()> {
    let mut doc = KvDoc::new();
    cfg.write_kv(&mut doc);
    doc.set("precision", precision);
    let path = out.join("experiment.txt");
    if path.exists() {
        let old = KvDoc::read(&path)?;
        if resume && old != doc {
            return Err(Error::config("experiment.txt", "configuration differs from the run being resumed"));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    doc.write(&path)
}

/// Trains and evaluates every fold, writing checkpoints, predictions and
/// summaries below `out`.
pub fn run_experiment<T: Scalar>(
    sessions: &[MealSession],
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut sessions: Vec<&MealSession> = sessions.iter().collect();
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    if let Some(n) = cfg.max_sessions {
        sessions.truncate(n);
    }
    let by_id: BTreeMap<&str, &MealSession> = sessions.iter().map(|s| (s.session_id.as_str(), *s)).collect();
    if by_id.len() != sessions.len() {
        return Err(Error::InvalidArgument("duplicate session ids".into()));
    }
    let precision = match T::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    };
    check_echo(out, cfg, precision, resume)?;
    let ids: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
    let plan = make_folds(&ids, cfg.n_folds, cfg.fold_seed)?;
    let pick = |ids: &[String]| -> Vec<MealSession> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };

    let mut reports = Vec::new();
    let mut folds = Vec::new();
    for fold in &plan.folds {
        let dir = out.join(format!("fold_{}", fold.index));
        let train = pick(&fold.train);
        let test = pick(&fold.test);
        info!("fold {}: {} train, {} test sessions", fold.index, train.len(), test.len());

        let mut unimodal = Vec::new();
        for (name, m) in [("imu", Modality::Imu), ("radar", Modality::Radar)] {
            let target = dir.join(name);
            let ckpt = match stage(&target, resume, UnimodalCheckpoint::<T>::load)? {
                Stage::Done(c) => c,
                Stage::Train(partial) => {
                    let c = train_unimodal::<T>(m, &train, &cfg.model, &cfg.train)?;
                    c.save(&partial)?;
                    commit(&partial, &target)?;
                    c
                }
            };
            unimodal.push(ckpt);
        }
        let (imu, radar) = (&unimodal[0], &unimodal[1]);
        let target = dir.join("fusion");
        let fusion = match stage(&target, resume, FusionCheckpoint::<T>::load)? {
            Stage::Done(c) => c,
            Stage::Train(partial) => {
                let c = train_fusion::<T>(imu, radar, &train, &cfg.model.fusion, &cfg.train)?;
                c.save(&partial)?;
                commit(&partial, &target)?;
                c
            }
        };

        for condition in Condition::ALL {
            let mut preds: BTreeMap<String, LabelSequence> = BTreeMap::new();
            for s in &test {
                let (p, labels) = match condition {
                    Condition::UniImu => predict_unimodal(s, imu)?,
                    Condition::UniRadar => predict_unimodal(s, radar)?,
                    Condition::Fusion => predict_session(s, &fusion, Availability::Both)?,
                    Condition::FusionMissingImu => predict_session(s, &fusion, Availability::RadarOnly)?,
                    Condition::FusionMissingRadar => predict_session(s, &fusion, Availability::ImuOnly)?,
                };
                let path = dir
                    .join("predictions")
                    .join(condition.slug())
                    .join(format!("{}.csv", s.session_id));
                write_file(&path, &predictions_csv(&p, &labels))?;
                preds.insert(s.session_id.clone(), labels);
            }
            let report = evaluate_fold(&preds, &test, &cfg.eval, fold.index, condition.name())?;
            info!("fold {} {condition}: kappa {:.3}", fold.index, report.kappa);
            reports.push(report);
        }
        folds.push(FoldArtifacts {
            fold: fold.index,
            train: fold.train.clone(),
            test: fold.test.clone(),
            imu_history: imu.history.clone(),
            radar_history: radar.history.clone(),
            fusion_history: fusion.history.clone(),
            frozen_hash_at_start: fusion.frozen_hash_at_start.clone(),
            frozen_hash_at_end: fusion.frozen_hash(),
        });
    }
    write_reports(&reports, out)?;
    let (table, significance) = write_summary(&reports, out)?;
    Ok(ExperimentOutcome {
        reports,
        folds,
        table,
        significance,
    })
}

/// One line of the consolidated results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub condition: String,
    pub class: String,
    pub k: f64,
    /// From segment counts pooled over every fold.
    pub f1: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// From the frame confusion matrix pooled over every fold.
    pub kappa: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub n_folds: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Conditions in canonical order first, then any others as they appear.
fn condition_order(reports: &[FoldReport]) -> Vec<String> {
    let mut names: Vec<String> = Condition::ALL
        .iter()
        .map(|c| c.name().to_string())
        .filter(|n| reports.iter().any(|r| &r.availability == n))
        .collect();
    for r in reports {
        if !names.contains(&r.availability) {
            names.push(r.availability.clone());
        }
    }
    names
}

fn thresholds(reports: &[FoldReport]) -> Vec<f64> {
    let mut ks: Vec<f64> = reports.iter().flat_map(|r| r.scores.iter().map(|s| s.k)).collect();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    ks
}

pub fn summarize(reports: &[FoldReport]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    let ks = thresholds(reports);
    for cond in condition_order(reports) {
        let rs: Vec<&FoldReport> = reports.iter().filter(|r| r.availability == cond).collect();
        let mut conf = [[0u64; 3]; 3];
        for r in &rs {
            for (row, add) in conf.iter_mut().zip(&r.confusion) {
                for (a, b) in row.iter_mut().zip(add) {
                    *a += b;
                }
            }
        }
        let kappas: Vec<f64> = rs.iter().map(|r| r.kappa).collect();
        let (kappa_mean, kappa_std) = mean_std(&kappas);
        for class in ClassId::GESTURES {
            for &k in &ks {
                let scores: Vec<_> = rs.iter().filter_map(|r| r.score(class, k)).collect();
                let mut pooled = SegmentCounts::default();
                for s in &scores {
                    pooled.add(&SegmentCounts {
                        tp: s.tp,
                        fp: s.fp,
                        fn_: s.fn_,
                    });
                }
                let f1s: Vec<f64> = scores.iter().map(|s| s.f1).collect();
                let (f1_mean, f1_std) = mean_std(&f1s);
                rows.push(TableRow {
                    condition: cond.clone(),
                    class: class.name().to_string(),
                    k,
                    f1: crate::evaluation::segmental_f1(&pooled),
                    f1_mean,
                    f1_std,
                    kappa: kappa_from(&conf),
                    kappa_mean,
                    kappa_std,
                    n_folds: rs.len(),
                });
            }
        }
    }
    rows
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("condition,class,k,f1,f1_mean,f1_std,kappa,kappa_mean,kappa_std,n_folds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.condition, r.class, r.k, r.f1, r.f1_mean, r.f1_std, r.kappa, r.kappa_mean, r.kappa_std, r.n_folds
        );
    }
    s
}

pub fn table_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from("| Condition | Class | k | F1 (pooled) | F1 (fold mean ± std) | Kappa (pooled) | Kappa (fold mean ± std) |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.3} ± {:.3} | {:.3} | {:.3} ± {:.3} |",
            r.condition, r.class, r.k, r.f1, r.f1_mean, r.f1_std, r.kappa, r.kappa_mean, r.kappa_std
        );
    }
    s
}

/// Paired per-session comparison of the fused model against one other
/// condition. `p_value` is absent when the test is undefined (fewer than
/// six non-zero differences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub reference: String,
    pub other: String,
    pub class: String,
    pub k: f64,
    pub n_sessions: usize,
    pub mean_difference: f64,
    pub p_value: Option<f64>,
}

/// Per-session F1 of `condition` keyed by session id.
pub fn session_f1(reports: &[FoldReport], condition: &str, class: ClassId, k: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in reports.iter().filter(|r| r.availability == condition) {
        for s in &r.sessions {
            if let Some(c) = s.scores.iter().find(|c| c.class == class.name() && c.k == k) {
                out.insert(s.session_id.clone(), c.f1);
            }
        }
    }
    out
}

pub fn significance(reports: &[FoldReport]) -> Vec<SignificanceRow> {
    let reference = Condition::Fusion.name();
    let mut rows = Vec::new();
    for &k in &thresholds(reports) {
        for class in ClassId::GESTURES {
            let a = session_f1(reports, reference, class, k);
            if a.is_empty() {
                continue;
            }
            for other in condition_order(reports).into_iter().filter(|c| c != reference) {
                let b = session_f1(reports, &other, class, k);
                let (xa, xb): (Vec<f64>, Vec<f64>) =
                    a.iter().filter_map(|(id, fa)| b.get(id).map(|fb| (*fa, *fb))).unzip();
                if xa.is_empty() {
                    continue;
                }
                let diff = xa.iter().zip(&xb).map(|(x, y)| x - y).sum::<f64>() / xa.len() as f64;
                rows.push(SignificanceRow {
                    reference: reference.to_string(),
                    other,
                    class: class.name().to_string(),
                    k,
                    n_sessions: xa.len(),
                    mean_difference: diff,
                    p_value: wilcoxon_signed_rank(&xa, &xb).ok(),
                });
            }
        }
    }
    rows
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut s = String::from("reference,other,class,k,n_sessions,mean_difference,p_value\n");
    for r in rows {
        let p = r.p_value.map_or_else(|| "NA".to_string(), |p| format!("{p:.6}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{p}",
            r.reference, r.other, r.class, r.k, r.n_sessions, r.mean_difference
        );
    }
    s
}

fn write_plots(reports: &[FoldReport], rows: &[TableRow], dir: &Path) -> Result<()> {
    let conditions = condition_order(reports);
    let mut bars = String::from("condition,class,k,f1\n");
    for r in rows {
        let _ = writeln!(bars, "{},{},{},{:.6}", r.condition, r.class, r.k, r.f1);
    }
    write_file(&dir.join("f1_bars.csv"), &bars)?;
    let mut boxes = String::from("condition,session_id,eating_style,class,k,f1\n");
    for r in reports {
        for s in &r.sessions {
            for c in &s.scores {
                let _ = writeln!(boxes, "{},{},{},{},{},{:.6}", r.availability, s.session_id, s.eating_style, c.class, c.k, c.f1);
            }
        }
    }
    write_file(&dir.join("session_f1.csv"), &boxes)?;
    for &k in &thresholds(reports) {
        let series: Vec<(String, Vec<f64>)> = ClassId::GESTURES
            .iter()
            .map(|class| {
                let vals = conditions
                    .iter()
                    .map(|c| {
                        rows.iter()
                            .find(|r| &r.condition == c && r.class == class.name() && r.k == k)
                            .map_or(0.0, |r| r.f1)
                    })
                    .collect();
                (class.name().to_string(), vals)
            })
            .collect();
        let svg = bar_chart_svg(&format!("Segmental F1, k = {k}"), "F1", &conditions, &series);
        write_file(&dir.join(format!("f1_bars_k{k}.svg")), &svg)?;
        for class in ClassId::GESTURES {
            let groups: Vec<(String, Vec<f64>)> = conditions
                .iter()
                .map(|c| (c.clone(), session_f1(reports, c, class, k).into_values().collect()))
                .collect();
            let svg = box_plot_svg(&format!("Per-session F1, {}, k = {k}", class.name()), "F1", &groups);
            write_file(&dir.join(format!("session_f1_{}_k{k}.svg", class.name())), &svg)?;
        }
    }
    Ok(())
}

/// Writes `results_table.{csv,md}`, `significance.csv` and `plots/`.
pub fn write_summary(reports: &[FoldReport], out: &Path) -> Result<(Vec<TableRow>, Vec<SignificanceRow>)> {
    let rows = summarize(reports);
    let sig = significance(reports);
    write_file(&out.join("results_table.csv"), &table_csv(&rows))?;
    write_file(&out.join("results_table.md"), &table_markdown(&rows))?;
    write_file(&out.join("significance.csv"), &significance_csv(&sig))?;
    write_plots(reports, &rows, &out.join("plots"))?;
    Ok((rows, sig))
}

pub fn read_reports(path: &Path) -> Result<Vec<FoldReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
