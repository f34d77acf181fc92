use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mmtcn::backbone::Modality;
use mmtcn::data::{load_dataset, load_session, save_session, LabelSequence, MealSession};
use mmtcn::evaluation::{evaluate_fold, write_reports, EvalConfig};
use mmtcn::experiment::{read_reports, run_experiment, write_summary, ExperimentConfig, Profile};
use mmtcn::inference::{labels_from_predictions_csv, predict_session, predict_unimodal, predictions_csv, Availability};
use mmtcn::kv::{join_list, KvDoc};
use mmtcn::nn::Scalar;
use mmtcn::preprocess::{remove_clutter, window_session};
use mmtcn::synth::{dataset_hash, generate_dataset, SynthConfig};
use mmtcn::trainer::{train_fusion, train_unimodal, FusionCheckpoint, Precision, UnimodalCheckpoint};

/// Multimodal radar + IMU intake gesture detection.
#[derive(Parser)]
#[command(name = "mmtcn", version)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed; takes precedence over the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of paired radar + IMU meal sessions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sessions: Option<usize>,
        /// default | complementary
        #[arg(long)]
        preset: Option<String>,
    },
    /// Remove static radar clutter and report the window layout of a session.
    Preprocess {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one modality's encoder and predictor.
    TrainUnimodal {
        #[arg(long)]
        data: PathBuf,
        /// imu | radar
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adaptation encoders and fusion head on frozen unimodal models.
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        radar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict per-frame classes for one session.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        session: PathBuf,
        /// both | imu_only | radar_only (fusion checkpoints only)
        #[arg(long, default_value = "both")]
        availability: Availability,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of `<session_id>.csv` predictions against a dataset.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value = "both")]
        condition: String,
    },
    /// Cross-validated comparison of all five conditions.
    RunExperiment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// smoke | desk | full
        #[arg(long, default_value = "full")]
        profile: Profile,
        /// Reuse finished checkpoints and retrain partial ones.
        #[arg(long)]
        resume: bool,
    },
    /// Rebuild the results table, significance tests and plots from report.json.
    Report {
        /// Experiment output directory containing report.json.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_doc(cli: &Cli) -> Result<KvDoc> {
    let mut doc = match &cli.config {
        Some(p) => KvDoc::read(p)?,
        None => KvDoc::new(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        doc.set(k.trim(), v.trim());
    }
    Ok(doc)
}

fn precision(doc: &mut KvDoc) -> Result<Precision> {
    Ok(match doc.remove("precision").as_deref() {
        None => Precision::from_env(),
        Some("f32") => Precision::F32,
        Some("f64") => Precision::F64,
        Some(other) => bail!(mmtcn::Error::Config {
            key: "precision".into(),
            message: format!("expected f32|f64, got `{other}`"),
        }),
    })
}

/// Training configuration: every experiment key except the fold layout.
fn train_config(doc: &KvDoc, seed: Option<u64>) -> Result<ExperimentConfig> {
    for key in ExperimentConfig::KEYS {
        if doc.get(key).is_some() {
            bail!(mmtcn::Error::Config {
                key: key.into(),
                message: "only valid for run-experiment".into(),
            });
        }
    }
    let mut cfg = ExperimentConfig::read_kv_over(doc, &ExperimentConfig::default())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_echo(path: &Path, doc: &KvDoc) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    doc.write(path)?;
    Ok(())
}

fn cmd_synth(cli: &Cli, out: &Path, sessions: Option<usize>, preset: Option<&str>) -> Result<()> {
    let mut doc = config_doc(cli)?;
    if let Some(p) = preset {
        doc.set("preset", p);
    }
    let n = match sessions {
        Some(n) => n,
        None => doc.parse_value("sessions")?.unwrap_or(52),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => doc.parse_value("dataset_seed")?.unwrap_or(0),
    };
    let template = SynthConfig::read_kv(&doc)?;
    let dirs = generate_dataset(&template, n, seed, out)?;
    info!("wrote {} sessions to {}", dirs.len(), out.display());
    println!("{}", dataset_hash(out)?);
    Ok(())
}

fn cmd_preprocess(cli: &Cli, session_dir: &Path, out: &Path) -> Result<()> {
    let doc = config_doc(cli)?;
    let cfg = train_config(&doc, cli.seed)?;
    let mut session = load_session(session_dir)?;
    if cfg.train.remove_clutter {
        if let Some(r) = &session.radar {
            session.radar = Some(remove_clutter(r)?);
        }
    }
    let (windows, map) = window_session(&session, &cfg.train.window)?;
    save_session(&session, out)?;
    let mut csv = String::from("window,start,valid\n");
    for w in &windows {
        csv.push_str(&format!("{},{},{}\n", w.index, w.span.start, w.span.valid));
    }
    std::fs::write(out.join("windows.csv"), csv).with_context(|| format!("writing {}", out.display()))?;
    let mut echo = KvDoc::new();
    echo.set("source", session_dir.display());
    echo.set("remove_clutter", cfg.train.remove_clutter);
    echo.set("window_frames", cfg.train.window.window_frames);
    echo.set("stride_frames", cfg.train.window.stride_frames);
    echo.set("coverage_min", map.coverage().iter().min().copied().unwrap_or(0));
    write_echo(&out.join("preprocess.txt"), &echo)
}

fn cmd_train_unimodal<T: Scalar>(cfg: &ExperimentConfig, data: &Path, modality: Modality, out: &Path) -> Result<()> {
    let sessions = load_dataset(data)?;
    let ckpt = train_unimodal::<T>(modality, &sessions, &cfg.model, &cfg.train)?;
    ckpt.save(out)?;
    let losses = ckpt.history.column("loss").unwrap_or_default();
    info!("{modality}: loss {:?} -> {:?}", losses.first(), losses.last());
    Ok(())
}

fn cmd_train_fusion<T: Scalar>(cfg: &ExperimentConfig, data: &Path, imu: &Path, radar: &Path, out: &Path) -> Result<()> {
    let sessions = load_dataset(data)?;
    let imu = UnimodalCheckpoint::<T>::load(imu)?;
    let radar = UnimodalCheckpoint::<T>::load(radar)?;
    let ckpt = train_fusion::<T>(&imu, &radar, &sessions, &cfg.model.fusion, &cfg.train)?;
    ckpt.save(out)?;
    if ckpt.frozen_hash() != ckpt.frozen_hash_at_start {
        info!("unimodal models were updated (end-to-end training)");
    }
    Ok(())
}

fn cmd_predict<T: Scalar>(kind: &str, checkpoint: &Path, session_dir: &Path, availability: Availability, out: &Path) -> Result<()> {
    let session = load_session(session_dir)?;
    let (p, labels) = if kind == "fusion" {
        predict_session(&session, &FusionCheckpoint::<T>::load(checkpoint)?, availability)?
    } else {
        predict_unimodal(&session, &UnimodalCheckpoint::<T>::load(checkpoint)?)?
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("predictions.csv"), predictions_csv(&p, &labels))
        .with_context(|| format!("writing {}", out.display()))?;
    let mut echo = KvDoc::new();
    echo.set("checkpoint", checkpoint.display());
    echo.set("session", session_dir.display());
    echo.set("availability", if kind == "fusion" { availability.name() } else { "unimodal" });
    echo.set("frames", labels.len());
    write_echo(&out.join("predict.txt"), &echo)
}

fn cmd_evaluate(cli: &Cli, predictions: &Path, data: &Path, out: &Path, fold: usize, condition: &str) -> Result<()> {
    let doc = config_doc(cli)?;
    doc.check_keys(&["eval.thresholds"])?;
    let cfg = EvalConfig {
        thresholds: doc.parse_list("eval.thresholds")?.unwrap_or_else(|| EvalConfig::default().thresholds),
    };
    let sessions = load_dataset(data)?;
    let mut preds: BTreeMap<String, LabelSequence> = BTreeMap::new();
    let mut gt: Vec<MealSession> = Vec::new();
    for s in sessions {
        let flat = predictions.join(format!("{}.csv", s.session_id));
        let nested = predictions.join(&s.session_id).join("predictions.csv");
        let path = if flat.is_file() { flat } else { nested };
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        preds.insert(s.session_id.clone(), labels_from_predictions_csv(&text)?);
        gt.push(s);
    }
    if gt.is_empty() {
        bail!(mmtcn::Error::InvalidArgument(format!(
            "no predictions in {} match sessions of {}",
            predictions.display(),
            data.display()
        )));
    }
    let report = evaluate_fold(&preds, &gt, &cfg, fold, condition)?;
    write_reports(std::slice::from_ref(&report), out)?;
    let mut echo = KvDoc::new();
    echo.set("predictions", predictions.display());
    echo.set("data", data.display());
    echo.set("sessions", gt.len());
    echo.set("eval.thresholds", join_list(&cfg.thresholds));
    write_echo(&out.join("evaluate.txt"), &echo)?;
    println!("kappa {:.4}", report.kappa);
    Ok(())
}

fn cmd_run_experiment<T: Scalar>(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let sessions = load_dataset(data)?;
    let outcome = run_experiment::<T>(&sessions, cfg, out, resume)?;
    print!("{}", mmtcn::experiment::table_markdown(&outcome.table));
    Ok(())
}

fn cmd_report(input: &Path, out: Option<&Path>) -> Result<()> {
    let path = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let reports = read_reports(&path)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let (table, _) = write_summary(&reports, &out)?;
    print!("{}", mmtcn::experiment::table_markdown(&table));
    Ok(())
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out, sessions, preset } => cmd_synth(cli, out, *sessions, preset.as_deref()),
        Command::Preprocess { session, out } => cmd_preprocess(cli, session, out),
        Command::TrainUnimodal { data, modality, out } => {
            let mut doc = config_doc(cli)?;
            let p = precision(&mut doc)?;
            let cfg = train_config(&doc, cli.seed)?;
            with_precision!(p, cmd_train_unimodal(&cfg, data, *modality, out))
        }
        Command::TrainFusion { data, imu, radar, out } => {
            let mut doc = config_doc(cli)?;
            let p = precision(&mut doc)?;
            let cfg = train_config(&doc, cli.seed)?;
            with_precision!(p, cmd_train_fusion(&cfg, data, imu, radar, out))
        }
        Command::Predict { checkpoint, session, availability, out } => {
            let manifest = KvDoc::read(&checkpoint.join("manifest.txt"))?;
            let kind = manifest.require("kind")?.to_string();
            let p = match manifest.get("precision") {
                Some("f64") => Precision::F64,
                _ => Precision::F32,
            };
            with_precision!(p, cmd_predict(&kind, checkpoint, session, *availability, out))
        }
        Command::Evaluate { predictions, data, out, fold, condition } => {
            cmd_evaluate(cli, predictions, data, out, *fold, condition)
        }
        Command::RunExperiment { data, out, profile, resume } => {
            let mut doc = config_doc(cli)?;
            let p = precision(&mut doc)?;
            let mut cfg = ExperimentConfig::read_kv_over(&doc, &ExperimentConfig::profile(*profile))?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
                cfg.fold_seed = s;
            }
            with_precision!(p, cmd_run_experiment(&cfg, data, out, *resume))
        }
        Command::Report { input, out } => cmd_report(input, out.as_deref()),
    }
}

/// 2 for I/O and numerical failures, 1 for everything the caller can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mmtcn::Error>() {
            return if e.is_runtime() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
