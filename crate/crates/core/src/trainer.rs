//! Two-step training. Step one fits each modality's encoder and predictor
//! on its own; step two freezes them and fits both adaptation encoders,
//! the fusion block and the multimodal predictor on the total loss.

use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Encoder, EncoderCache, EncoderConfig, ModalInput, Modality, Predictor, Radar3dConfig, TcnConfig};
use crate::data::mmgf::{read_record, write_record, RawTensor};
use crate::data::{ClassId, MealSession, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionHead};
use crate::kv::{join_list, KvDoc};
use crate::losses::{adaptation_with_grad, cls_from_logits, cls_logp, LossConfig, TmseGrad};
use crate::mae::{Direction, Mae, MaeConfig};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{hash_module, join_name, Mat, Module, Scalar, Tensor};
use crate::preprocess::{remove_clutter, window_session, Normalizer, SessionWindow, StitchMap, WindowSpec};

/// Numeric precision of a run. Double precision is selected by
/// `MMGF_DETERMINISTIC=1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_env() -> Self {
        match std::env::var("MMGF_DETERMINISTIC") {
            Ok(v) if v == "1" => Precision::F64,
            _ => Precision::F32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: WindowSpec,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossConfig,
    /// Train every parameter in the fusion step instead of freezing the
    /// unimodal encoders and predictors.
    pub end_to_end: bool,
    pub remove_clutter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            epochs: 100,
            batch_size: 4,
            window: WindowSpec::default(),
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            loss: LossConfig::default(),
            end_to_end: false,
            remove_clutter: true,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "lr",
        "epochs",
        "batch_size",
        "window_frames",
        "stride_frames",
        "seed",
        "adam.beta1",
        "adam.beta2",
        "adam.eps",
        "loss.tau",
        "loss.lambda",
        "loss.beta",
        "loss.tmse_grad",
        "loss.class_weights",
        "end_to_end",
        "remove_clutter",
        "precision",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        self.window.validate()?;
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("lr", self.lr);
        doc.set("epochs", self.epochs);
        doc.set("batch_size", self.batch_size);
        doc.set("window_frames", self.window.window_frames);
        doc.set("stride_frames", self.window.stride_frames);
        doc.set("seed", self.seed);
        doc.set("adam.beta1", self.beta1);
        doc.set("adam.beta2", self.beta2);
        doc.set("adam.eps", self.eps);
        doc.set("loss.tau", self.loss.tau);
        doc.set("loss.lambda", self.loss.lambda);
        doc.set("loss.beta", self.loss.beta);
        doc.set(
            "loss.tmse_grad",
            match self.loss.tmse_grad {
                TmseGrad::Detached => "detached",
                TmseGrad::Full => "full",
            },
        );
        match self.loss.class_weights {
            Some(w) => doc.set("loss.class_weights", join_list(&w)),
            None => doc.set("loss.class_weights", "none"),
        }
        doc.set("end_to_end", self.end_to_end);
        doc.set("remove_clutter", self.remove_clutter);
    }

    /// Missing keys keep their defaults.
    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        let d = TrainConfig::default();
        let window_frames = doc.parse_value("window_frames")?.unwrap_or(d.window.window_frames);
        let stride_frames = doc.parse_value("stride_frames")?.unwrap_or(window_frames);
        let tmse_grad = match doc.get("loss.tmse_grad") {
            None | Some("detached") => TmseGrad::Detached,
            Some("full") => TmseGrad::Full,
            Some(other) => return Err(Error::config("loss.tmse_grad", format!("expected detached|full, got `{other}`"))),
        };
        let class_weights = match doc.get("loss.class_weights") {
            None | Some("none") => None,
            Some(_) => match doc.parse_list::<f64>("loss.class_weights")? {
                Some(w) if w.len() == 3 => Some([w[0], w[1], w[2]]),
                _ => return Err(Error::config("loss.class_weights", "expected three values or `none`")),
            },
        };
        let cfg = TrainConfig {
            lr: doc.parse_value("lr")?.unwrap_or(d.lr),
            epochs: doc.parse_value("epochs")?.unwrap_or(d.epochs),
            batch_size: doc.parse_value("batch_size")?.unwrap_or(d.batch_size),
            window: WindowSpec { window_frames, stride_frames, ..d.window },
            seed: doc.parse_value("seed")?.unwrap_or(d.seed),
            beta1: doc.parse_value("adam.beta1")?.unwrap_or(d.beta1),
            beta2: doc.parse_value("adam.beta2")?.unwrap_or(d.beta2),
            eps: doc.parse_value("adam.eps")?.unwrap_or(d.eps),
            loss: LossConfig {
                tau: doc.parse_value("loss.tau")?.unwrap_or(d.loss.tau),
                lambda: doc.parse_value("loss.lambda")?.unwrap_or(d.loss.lambda),
                beta: doc.parse_value("loss.beta")?.unwrap_or(d.loss.beta),
                tmse_grad,
                class_weights,
            },
            end_to_end: doc.parse_value("end_to_end")?.unwrap_or(d.end_to_end),
            remove_clutter: doc.parse_value("remove_clutter")?.unwrap_or(d.remove_clutter),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Architecture of every network in the system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub imu_channels: usize,
    pub imu_tcn: TcnConfig,
    pub radar: Radar3dConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            imu_channels: IMU_CHANNELS.len(),
            imu_tcn: TcnConfig::default(),
            radar: Radar3dConfig::desk(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, modality: Modality) -> EncoderConfig {
        match modality {
            Modality::Imu => EncoderConfig::Tcn {
                in_channels: self.imu_channels,
                tcn: self.imu_tcn.clone(),
            },
            Modality::Radar => EncoderConfig::Radar3d(self.radar.clone()),
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("imu.in_channels", self.imu_channels);
        self.imu_tcn.write_kv(doc, "imu.tcn");
        self.radar.write_kv(doc, "radar");
        self.fusion.write_kv(doc);
    }

    /// Missing keys keep their defaults.
    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            imu_channels: doc.parse_value("imu.in_channels")?.unwrap_or(d.imu_channels),
            imu_tcn: TcnConfig::read_kv(doc, "imu.tcn")?,
            radar: Radar3dConfig::read_kv_over(doc, "radar", &d.radar)?,
            fusion: FusionConfig::read_kv(doc)?,
        })
    }

    pub fn is_model_key(key: &str) -> bool {
        key.starts_with("imu.") || key.starts_with("radar.") || key.starts_with("cma.") || key == "fusion"
    }
}

/// One model-ready window.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub session_id: String,
    pub window: usize,
    pub imu: Option<ModalInput<T>>,
    pub radar: Option<ModalInput<T>>,
    pub labels: Vec<ClassId>,
    /// Leading frames that belong to the session; the rest is padding.
    pub valid: usize,
}

impl<T> Sample<T> {
    pub fn input(&self, modality: Modality) -> Result<&ModalInput<T>> {
        match modality {
            Modality::Imu => self.imu.as_ref(),
            Modality::Radar => self.radar.as_ref(),
        }
        .ok_or_else(|| Error::validation(&self.session_id, format!("no {modality} stream")))
    }

    pub fn valid_labels(&self) -> &[ClassId] {
        &self.labels[..self.valid]
    }
}

/// Clutter removal (when enabled) followed by windowing.
pub fn session_windows(session: &MealSession, cfg: &TrainConfig) -> Result<(Vec<SessionWindow>, StitchMap)> {
    if cfg.remove_clutter && session.radar.is_some() {
        let mut s = session.clone();
        s.radar = Some(remove_clutter(session.radar.as_ref().expect("checked"))?);
        window_session(&s, &cfg.window)
    } else {
        window_session(session, &cfg.window)
    }
}

pub fn fit_normalizer(sessions: &[MealSession], cfg: &TrainConfig) -> Result<Normalizer> {
    let mut windows = Vec::new();
    for s in sessions {
        windows.extend(session_windows(s, cfg)?.0);
    }
    Ok(Normalizer::fit(&windows))
}

pub fn window_samples<T: Scalar>(windows: Vec<SessionWindow>, norm: &Normalizer, modalities: &[Modality]) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let imu = match (&w.imu, modalities.contains(&Modality::Imu)) {
            (Some(m), true) => Some(ModalInput::Imu(norm.imu(m)?)),
            (None, true) => return Err(Error::validation(&w.session_id, "no imu stream")),
            _ => None,
        };
        let radar = match (&w.radar, modalities.contains(&Modality::Radar)) {
            (Some(v), true) => Some(ModalInput::Radar(norm.radar(v))),
            (None, true) => return Err(Error::validation(&w.session_id, "no radar stream")),
            _ => None,
        };
        out.push(Sample {
            session_id: w.session_id,
            window: w.index,
            imu,
            radar,
            valid: w.span.valid,
            labels: w.labels,
        });
    }
    Ok(out)
}

pub fn make_samples<T: Scalar>(
    sessions: &[MealSession],
    cfg: &TrainConfig,
    norm: &Normalizer,
    modalities: &[Modality],
) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(window_samples(session_windows(s, cfg)?.0, norm, modalities)?);
    }
    Ok(out)
}

/// Modality encoder plus its per-frame predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalModel<T> {
    pub modality: Modality,
    pub encoder: Encoder<T>,
    pub predictor: Predictor<T>,
}

impl<T: Scalar> UnimodalModel<T> {
    pub fn new(modality: Modality, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(&cfg.encoder(modality), rng)?;
        let predictor = Predictor::new(encoder.out_channels(), rng);
        Ok(UnimodalModel { modality, encoder, predictor })
    }

    pub fn features(&self, x: &ModalInput<T>) -> Result<Mat<T>> {
        Ok(self.encoder.forward(x)?.0)
    }

    pub fn logits(&self, x: &ModalInput<T>) -> Result<Mat<T>> {
        Ok(self.predictor.logits(&self.features(x)?)?.0)
    }
}

impl<T: Scalar> Module<T> for UnimodalModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(&join_name(prefix, "encoder"), f);
        self.predictor.visit(&join_name(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join_name(prefix, "encoder"), f);
        self.predictor.visit_mut(&join_name(prefix, "predictor"), f);
    }
}

/// Everything trained in the second step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub i2r: Mae<T>,
    pub r2i: Mae<T>,
    pub head: FusionHead<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let i2r = Mae::new(&MaeConfig::new(Direction::I2R, cfg.encoder(Modality::Imu))?, rng)?;
        let r2i = Mae::new(&MaeConfig::new(Direction::R2I, cfg.encoder(Modality::Radar))?, rng)?;
        let head = FusionHead::new(&cfg.fusion, rng)?;
        Ok(FusionModel { i2r, r2i, head })
    }
}

impl<T: Scalar> Module<T> for FusionModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.i2r.visit(&join_name(prefix, "mae_i2r"), f);
        self.r2i.visit(&join_name(prefix, "mae_r2i"), f);
        self.head.visit(&join_name(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.i2r.visit_mut(&join_name(prefix, "mae_i2r"), f);
        self.r2i.visit_mut(&join_name(prefix, "mae_r2i"), f);
        self.head.visit_mut(&join_name(prefix, "head"), f);
    }
}

/// Per-epoch means of named loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(columns: &[&str]) -> Self {
        LossHistory {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", self.columns.join(","));
        for (e, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{e},{}", vals.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("loss.csv", "empty file"))?;
        let columns: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format("loss.csv", format!("bad number on line {}", i + 2)))?;
            if row.len() != columns.len() {
                return Err(Error::format("loss.csv", format!("wrong field count on line {}", i + 2)));
            }
            rows.push(row);
        }
        Ok(LossHistory { columns, rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalCheckpoint<T> {
    pub model: UnimodalModel<T>,
    pub normalizer: Normalizer,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub history: LossHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCheckpoint<T> {
    pub imu: UnimodalModel<T>,
    pub radar: UnimodalModel<T>,
    pub fusion: FusionModel<T>,
    pub normalizer: Normalizer,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub history: LossHistory,
    /// Hashes of the unimodal IMU and radar models when fusion training began.
    pub frozen_hash_at_start: [String; 2],
}

impl<T: Scalar> FusionCheckpoint<T> {
    pub fn frozen_hash(&self) -> [String; 2] {
        [hash_module(&self.imu), hash_module(&self.radar)]
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn valid_cols<T: Scalar>(m: &Mat<T>, valid: usize) -> Mat<T> {
    if valid == m.cols {
        m.clone()
    } else {
        m.slice_cols(0, valid)
    }
}

/// Zero-pads `g` to `cols` columns and multiplies by `scale`.
fn pad_scaled<T: Scalar>(g: &Mat<T>, cols: usize, scale: f64) -> Mat<T> {
    let s = T::of(scale);
    let mut out = Mat::zeros(g.rows, cols);
    for r in 0..g.rows {
        for (o, &v) in out.row_mut(r)[..g.cols].iter_mut().zip(g.row(r)) {
            *o = v * s;
        }
    }
    out
}

fn check_finite(loss: f64, epoch: usize, sample_id: &str, window: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what} loss is {loss} at epoch {epoch} on {sample_id} window {window}"
        )))
    }
}

fn check_values<T: Scalar>(m: &Mat<T>, epoch: usize, sample_id: &str, window: usize, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "non-finite {what} outputs at epoch {epoch} on {sample_id} window {window}"
        )))
    }
}

struct Streams {
    init: ChaCha8Rng,
    order: ChaCha8Rng,
}

/// Independent generators for initialisation and sample order, both split
/// off the run seed.
fn streams(seed: u64) -> Streams {
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    Streams {
        init: ChaCha8Rng::seed_from_u64(root.random()),
        order: ChaCha8Rng::seed_from_u64(root.random()),
    }
}

fn require_modality(sessions: &[MealSession], modality: Modality) -> Result<()> {
    for s in sessions {
        let present = match modality {
            Modality::Imu => s.imu.is_some(),
            Modality::Radar => s.radar.is_some(),
        };
        if !present {
            return Err(Error::validation(&s.session_id, format!("session lacks the {modality} stream")));
        }
    }
    if sessions.is_empty() {
        return Err(Error::InvalidArgument("no training sessions".into()));
    }
    Ok(())
}

/// Step one for a single modality: minimise the classification loss.
pub fn train_unimodal<T: Scalar>(
    modality: Modality,
    sessions: &[MealSession],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<UnimodalCheckpoint<T>> {
    cfg.validate()?;
    require_modality(sessions, modality)?;
    let normalizer = fit_normalizer(sessions, cfg)?;
    let samples: Vec<Sample<T>> = make_samples(sessions, cfg, &normalizer, &[modality])?;
    let mut rngs = streams(cfg.seed);
    let mut model = UnimodalModel::new(modality, model_config, &mut rngs.init)?;
    let history = fit_unimodal(&mut model, &samples, cfg, &mut rngs.order)?;
    Ok(UnimodalCheckpoint {
        model,
        normalizer,
        model_config: model_config.clone(),
        train_config: cfg.clone(),
        history,
    })
}

/// The optimisation loop of [`train_unimodal`] on prepared samples.
pub fn fit_unimodal<T: Scalar>(
    model: &mut UnimodalModel<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    order_rng: &mut ChaCha8Rng,
) -> Result<LossHistory> {
    let mut adam = Adam::new(cfg.adam());
    let mut history = LossHistory::new(&["loss"]);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in shuffled(samples.len(), order_rng).chunks(cfg.batch_size) {
            let mut grad = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                let (m, enc_cache) = model.encoder.forward(s.input(model.modality)?)?;
                let (z, pred_cache) = model.predictor.logits(&m)?;
                check_values(&z, epoch, &s.session_id, s.window, "classification")?;
                let (loss, dz) = cls_from_logits(s.valid_labels(), &valid_cols(&z, s.valid), &cfg.loss)?;
                check_finite(loss, epoch, &s.session_id, s.window, "classification")?;
                total += loss;
                let dz = pad_scaled(&dz, z.cols, scale);
                let dm = model.predictor.backward(&pred_cache, &dz, Some(&mut grad.predictor));
                model.encoder.backward(&enc_cache, &dm, Some(&mut grad.encoder));
            }
            adam.step(model, &grad);
        }
        let mean = total / samples.len() as f64;
        info!("{} epoch {epoch}: loss {mean:.5}", model.modality);
        history.rows.push(vec![mean]);
    }
    Ok(history)
}

pub const FUSION_COLUMNS: [&str; 8] = ["total", "cls_fuse", "i2r", "al_i2r", "cls_i2r", "r2i", "al_r2i", "cls_r2i"];

/// Step two: adaptation encoders, fusion block and multimodal predictor on
/// top of the unimodal models, which stay frozen unless `end_to_end` is set.
pub fn train_fusion<T: Scalar>(
    imu: &UnimodalCheckpoint<T>,
    radar: &UnimodalCheckpoint<T>,
    sessions: &[MealSession],
    fusion: &FusionConfig,
    cfg: &TrainConfig,
) -> Result<FusionCheckpoint<T>> {
    cfg.validate()?;
    if imu.model.modality != Modality::Imu {
        return Err(Error::InvalidArgument("first checkpoint must be the IMU model".into()));
    }
    if radar.model.modality != Modality::Radar {
        return Err(Error::InvalidArgument("second checkpoint must be the radar model".into()));
    }
    require_modality(sessions, Modality::Imu)?;
    require_modality(sessions, Modality::Radar)?;
    let model_config = ModelConfig {
        imu_channels: imu.model_config.imu_channels,
        imu_tcn: imu.model_config.imu_tcn.clone(),
        radar: radar.model_config.radar.clone(),
        fusion: fusion.clone(),
    };
    // each frozen encoder keeps seeing inputs scaled as in its own training
    let normalizer = Normalizer {
        imu_mean: imu.normalizer.imu_mean.clone(),
        imu_std: imu.normalizer.imu_std.clone(),
        radar_mean: radar.normalizer.radar_mean,
        radar_std: radar.normalizer.radar_std,
    };
    let samples: Vec<Sample<T>> = make_samples(sessions, cfg, &normalizer, &[Modality::Imu, Modality::Radar])?;
    let mut rngs = streams(cfg.seed);
    let mut ckpt = FusionCheckpoint {
        imu: imu.model.clone(),
        radar: radar.model.clone(),
        fusion: FusionModel::new(&model_config, &mut rngs.init)?,
        normalizer,
        model_config,
        train_config: cfg.clone(),
        history: LossHistory::new(&FUSION_COLUMNS),
        frozen_hash_at_start: [hash_module(&imu.model), hash_module(&radar.model)],
    };
    ckpt.history = fit_fusion(&mut ckpt.imu, &mut ckpt.radar, &mut ckpt.fusion, &samples, cfg, &mut rngs.order)?;
    Ok(ckpt)
}

/// The optimisation loop of [`train_fusion`]. The unimodal models are only
/// borrowed mutably in end-to-end mode.
pub fn fit_fusion<T: Scalar>(
    imu: &mut UnimodalModel<T>,
    radar: &mut UnimodalModel<T>,
    fusion: &mut FusionModel<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    order_rng: &mut ChaCha8Rng,
) -> Result<LossHistory> {
    // frozen features never change, so they are computed once
    let cached: Vec<(Mat<T>, Mat<T>)> = if cfg.end_to_end {
        Vec::new()
    } else {
        samples
            .iter()
            .map(|s| Ok((imu.features(s.input(Modality::Imu)?)?, radar.features(s.input(Modality::Radar)?)?)))
            .collect::<Result<_>>()?
    };
    let mut adam = Adam::new(cfg.adam());
    let mut adam_imu = Adam::new(cfg.adam());
    let mut adam_radar = Adam::new(cfg.adam());
    let mut history = LossHistory::new(&FUSION_COLUMNS);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; FUSION_COLUMNS.len()];
        for batch in shuffled(samples.len(), order_rng).chunks(cfg.batch_size) {
            let mut grad = fusion.zeros_like();
            let mut g_imu = cfg.end_to_end.then(|| imu.zeros_like());
            let mut g_radar = cfg.end_to_end.then(|| radar.zeros_like());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                let (x_i, x_r) = (s.input(Modality::Imu)?, s.input(Modality::Radar)?);
                let mut enc_caches: Option<(EncoderCache<T>, EncoderCache<T>)> = None;
                let (m_i, m_r) = if cfg.end_to_end {
                    let (m_i, ci) = imu.encoder.forward(x_i)?;
                    let (m_r, cr) = radar.encoder.forward(x_r)?;
                    enc_caches = Some((ci, cr));
                    (m_i, m_r)
                } else {
                    cached[i].clone()
                };
                let labels = s.valid_labels();
                let n = m_i.cols;

                let (logp, fc) = fusion.head.forward(&m_r, &m_i)?;
                check_values(&logp, epoch, &s.session_id, s.window, "fusion classification")?;
                let (l_cls, g) = cls_logp(labels, &valid_cols(&logp, s.valid), &cfg.loss)?;
                check_finite(l_cls, epoch, &s.session_id, s.window, "fusion classification")?;
                let (dm_r, dm_i) = fusion.head.backward(&fc, &pad_scaled(&g, n, scale), Some(&mut grad.head));

                let (mp_r, c_i2r) = fusion.i2r.forward(x_i)?;
                check_values(&mp_r, epoch, &s.session_id, s.window, "i2r adaptation")?;
                let t_i2r = adaptation_with_grad(
                    &valid_cols(&mp_r, s.valid),
                    &valid_cols(&m_r, s.valid),
                    labels,
                    &radar.predictor,
                    &cfg.loss,
                    g_radar.as_mut().map(|g| &mut g.predictor),
                )?;
                check_finite(t_i2r.loss, epoch, &s.session_id, s.window, "i2r adaptation")?;
                fusion.i2r.backward(&c_i2r, &pad_scaled(&t_i2r.grad, n, scale), Some(&mut grad.i2r));

                let (mp_i, c_r2i) = fusion.r2i.forward(x_r)?;
                check_values(&mp_i, epoch, &s.session_id, s.window, "r2i adaptation")?;
                let t_r2i = adaptation_with_grad(
                    &valid_cols(&mp_i, s.valid),
                    &valid_cols(&m_i, s.valid),
                    labels,
                    &imu.predictor,
                    &cfg.loss,
                    g_imu.as_mut().map(|g| &mut g.predictor),
                )?;
                check_finite(t_r2i.loss, epoch, &s.session_id, s.window, "r2i adaptation")?;
                fusion.r2i.backward(&c_r2i, &pad_scaled(&t_r2i.grad, n, scale), Some(&mut grad.r2i));

                if let (Some((ci, cr)), Some(gi), Some(gr)) = (&enc_caches, g_imu.as_mut(), g_radar.as_mut()) {
                    imu.encoder.backward(ci, &dm_i, Some(&mut gi.encoder));
                    radar.encoder.backward(cr, &dm_r, Some(&mut gr.encoder));
                }

                let row = [
                    l_cls + t_i2r.loss + t_r2i.loss,
                    l_cls,
                    t_i2r.loss,
                    t_i2r.align,
                    t_i2r.cls,
                    t_r2i.loss,
                    t_r2i.align,
                    t_r2i.cls,
                ];
                sums.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            adam.step(fusion, &grad);
            if let (Some(gi), Some(gr)) = (g_imu, g_radar) {
                adam_imu.step(imu, &gi);
                adam_radar.step(radar, &gr);
            }
        }
        let row: Vec<f64> = sums.iter().map(|v| v / samples.len() as f64).collect();
        info!(
            "fusion epoch {epoch}: total {:.5} cls {:.5} al_i2r {:.5} al_r2i {:.5}",
            row[0], row[1], row[3], row[6]
        );
        history.rows.push(row);
    }
    Ok(history)
}

/// Train/test partition of session ids for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Seeded session-level partition. With `n` sessions the first folds get
/// `n / n_folds` test sessions and the last `n % n_folds` folds one more.
pub fn make_folds(session_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if session_ids.len() < n_folds {
        return Err(Error::InvalidArgument(format!(
            "{} sessions are too few for {n_folds} folds",
            session_ids.len()
        )));
    }
    let mut ids = session_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != session_ids.len() {
        return Err(Error::InvalidArgument("duplicate session ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / n_folds, ids.len() % n_folds);
    let mut start = 0;
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let size = base + usize::from(f >= n_folds - extra);
        let mut test: Vec<String> = ids[start..start + size].to_vec();
        let mut train: Vec<String> = ids[..start].iter().chain(&ids[start + size..]).cloned().collect();
        test.sort();
        train.sort();
        folds.push(Fold { index: f, train, test });
        start += size;
    }
    Ok(FoldPlan { folds })
}

const MANIFEST: &str = "manifest.txt";
const PARAMS: &str = "params.mmgf";
const LOSS_CSV: &str = "loss.csv";

fn write_normalizer(doc: &mut KvDoc, n: &Normalizer) {
    doc.set("norm.imu_mean", join_list(&n.imu_mean));
    doc.set("norm.imu_std", join_list(&n.imu_std));
    doc.set("norm.radar_mean", n.radar_mean);
    doc.set("norm.radar_std", n.radar_std);
}

fn read_normalizer(doc: &KvDoc) -> Result<Normalizer> {
    Ok(Normalizer {
        imu_mean: doc.parse_list("norm.imu_mean")?.unwrap_or_default(),
        imu_std: doc.parse_list("norm.imu_std")?.unwrap_or_default(),
        radar_mean: doc.require_value("norm.radar_mean")?,
        radar_std: doc.require_value("norm.radar_std")?,
    })
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes the manifest (config echo, normaliser, tensor inventory), the
/// parameter records and the loss history.
fn save_dir<T: Scalar>(
    dir: &Path,
    mut doc: KvDoc,
    groups: &[(&str, Vec<(String, Tensor<T>)>, bool)],
    history: &LossHistory,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    doc.set("precision", if T::of(0.1).f64() == 0.1 { "f64" } else { "f32" });
    let mut k = 0;
    for (prefix, params, frozen) in groups {
        for (name, t) in params {
            doc.set(
                &format!("tensor.{k}"),
                format!("{} {} {}", join_name(prefix, name), shape_str(&t.shape), if *frozen { "frozen" } else { "trainable" }),
            );
            k += 1;
        }
    }
    doc.set("tensors", k);
    doc.write(&dir.join(MANIFEST))?;
    let path = dir.join(PARAMS);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (_, params, _) in groups {
        for (_, t) in params {
            write_record(&mut w, &t.to_raw()).map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let loss = dir.join(LOSS_CSV);
    std::fs::write(&loss, history.to_csv()).map_err(|e| Error::io(&loss, e))
}

/// Manifest plus `(name, tensor)` records in manifest order.
fn load_dir(dir: &Path) -> Result<(KvDoc, Vec<(String, RawTensor)>, LossHistory)> {
    let doc = KvDoc::read(&dir.join(MANIFEST))?;
    let count: usize = doc.require_value("tensors")?;
    let path = dir.join(PARAMS);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let entry = doc.require(&format!("tensor.{k}"))?;
        let name = entry.split_whitespace().next().unwrap_or_default().to_string();
        let raw = read_record(&mut r, &path.display().to_string())?
            .ok_or_else(|| Error::format(path.display().to_string(), format!("missing record for `{name}`")))?;
        if shape_str(&raw.dims) != entry.split_whitespace().nth(1).unwrap_or_default() {
            return Err(Error::format(path.display().to_string(), format!("shape of `{name}` disagrees with manifest")));
        }
        out.push((name, raw));
    }
    let loss = dir.join(LOSS_CSV);
    let history = match std::fs::read_to_string(&loss) {
        Ok(text) => LossHistory::from_csv(&text)?,
        Err(e) => return Err(Error::io(&loss, e)),
    };
    Ok((doc, out, history))
}

fn with_prefix(params: &[(String, RawTensor)], prefix: &str) -> Vec<(String, RawTensor)> {
    let p = format!("{prefix}.");
    params
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn config_doc(kind: &str, model: &ModelConfig, train: &TrainConfig, norm: &Normalizer) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("kind", kind);
    model.write_kv(&mut doc);
    train.write_kv(&mut doc);
    write_normalizer(&mut doc, norm);
    doc
}

fn read_configs(doc: &KvDoc) -> Result<(ModelConfig, TrainConfig)> {
    let model = ModelConfig::read_kv(doc)?;
    let mut train_doc = KvDoc::new();
    for (k, v) in doc.iter() {
        if TrainConfig::KEYS.contains(&k) {
            train_doc.set(k, v);
        }
    }
    Ok((model, TrainConfig::read_kv(&train_doc)?))
}

fn expect_kind(doc: &KvDoc, kind: &str, dir: &Path) -> Result<()> {
    let found = doc.require("kind")?;
    if found != kind {
        return Err(Error::format(
            dir.display().to_string(),
            format!("expected a {kind} checkpoint, found {found}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> UnimodalCheckpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut doc = config_doc("unimodal", &self.model_config, &self.train_config, &self.normalizer);
        doc.set("modality", self.model.modality);
        save_dir(dir, doc, &[("model", self.model.named_params(), false)], &self.history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (doc, params, history) = load_dir(dir)?;
        expect_kind(&doc, "unimodal", dir)?;
        let (model_config, train_config) = read_configs(&doc)?;
        let modality: Modality = doc.require("modality")?.parse()?;
        let mut model = UnimodalModel::new(modality, &model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_named(&with_prefix(&params, "model"))?;
        Ok(UnimodalCheckpoint {
            model,
            normalizer: read_normalizer(&doc)?,
            model_config,
            train_config,
            history,
        })
    }
}

impl<T: Scalar> FusionCheckpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut doc = config_doc("fusion", &self.model_config, &self.train_config, &self.normalizer);
        doc.set("frozen_hash.imu", &self.frozen_hash_at_start[0]);
        doc.set("frozen_hash.radar", &self.frozen_hash_at_start[1]);
        let frozen = !self.train_config.end_to_end;
        save_dir(
            dir,
            doc,
            &[
                ("imu", self.imu.named_params(), frozen),
                ("radar", self.radar.named_params(), frozen),
                ("fusion", self.fusion.named_params(), false),
            ],
            &self.history,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (doc, params, history) = load_dir(dir)?;
        expect_kind(&doc, "fusion", dir)?;
        let (model_config, train_config) = read_configs(&doc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut imu = UnimodalModel::new(Modality::Imu, &model_config, &mut rng)?;
        let mut radar = UnimodalModel::new(Modality::Radar, &model_config, &mut rng)?;
        let mut fusion = FusionModel::new(&model_config, &mut rng)?;
        imu.load_named(&with_prefix(&params, "imu"))?;
        radar.load_named(&with_prefix(&params, "radar"))?;
        fusion.load_named(&with_prefix(&params, "fusion"))?;
        Ok(FusionCheckpoint {
            imu,
            radar,
            fusion,
            normalizer: read_normalizer(&doc)?,
            model_config,
            train_config,
            history,
            frozen_hash_at_start: [
                doc.require("frozen_hash.imu")?.to_string(),
                doc.require("frozen_hash.radar")?.to_string(),
            ],
        })
    }
}
