//! Modality-specific feature encoders and per-frame class predictors.
//!
//! The IMU encoder is a dilated residual TCN over `[channels, frames]`. The
//! radar encoder runs 3D convolution stages over `[1, frames, range, doppler]`,
//! averages out the spatial axes and hands the result to a temporal TCN.
//! Both produce `[64, frames]` features with the frame count preserved.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::nn::layers::{Conv1d, Conv1dCache, Conv3dCache, Conv3dStage, ResidualBlock, ResidualCache, Vol};
use crate::nn::{join_name, softmax_cols, Mat, Module, Scalar, Tensor};

/// Width of every intermediate feature sequence.
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TcnConfig {
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub causal: bool,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            n_blocks: 5,
            kernel_size: 3,
            channels: FEATURE_DIM,
            dilations: vec![1, 2, 4, 8, 16],
            causal: false,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.n_blocks {
            return Err(Error::config(
                "tcn.dilations",
                format!("{} dilations for {} blocks", self.dilations.len(), self.n_blocks),
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config("tcn.kernel_size", "must be odd"));
        }
        if self.channels == 0 || self.dilations.contains(&0) {
            return Err(Error::config("tcn", "channels and dilations must be positive"));
        }
        Ok(())
    }

    /// Frames that can influence one output frame.
    ///
    /// Each block holds one dilated convolution, so the span grows by
    /// `(k - 1) * d` per block.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(&format!("{prefix}.n_blocks"), self.n_blocks);
        doc.set(&format!("{prefix}.kernel_size"), self.kernel_size);
        doc.set(&format!("{prefix}.channels"), self.channels);
        doc.set(&format!("{prefix}.dilations"), join_list(&self.dilations));
        doc.set(&format!("{prefix}.causal"), self.causal);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let d = TcnConfig::default();
        let cfg = TcnConfig {
            n_blocks: doc.parse_value(&format!("{prefix}.n_blocks"))?.unwrap_or(d.n_blocks),
            kernel_size: doc.parse_value(&format!("{prefix}.kernel_size"))?.unwrap_or(d.kernel_size),
            channels: doc.parse_value(&format!("{prefix}.channels"))?.unwrap_or(d.channels),
            dilations: doc.parse_list(&format!("{prefix}.dilations"))?.unwrap_or(d.dilations),
            causal: doc.parse_value(&format!("{prefix}.causal"))?.unwrap_or(d.causal),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One 3D stage: output channels, kernel (range, doppler, time), pool (range, doppler).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub pool: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Radar3dConfig {
    pub n_range: usize,
    pub n_doppler: usize,
    /// Spatial average pooling applied to the raw cube before the stages.
    pub input_pool: [usize; 2],
    pub stages: Vec<StageSpec>,
    pub tcn: TcnConfig,
}

impl Default for Radar3dConfig {
    fn default() -> Self {
        let stage = |c| StageSpec {
            out_channels: c,
            kernel: [3, 3, 3],
            pool: [2, 2],
        };
        Radar3dConfig {
            n_range: crate::data::N_RANGE,
            n_doppler: crate::data::N_DOPPLER,
            input_pool: [1, 1],
            stages: vec![stage(16), stage(32), stage(32), stage(64)],
            tcn: TcnConfig::default(),
        }
    }
}

impl Radar3dConfig {
    /// Reduced encoder sized for single-core CPU training on 32x64 cubes.
    pub fn desk() -> Self {
        Radar3dConfig {
            input_pool: [2, 2],
            stages: vec![
                StageSpec { out_channels: 4, kernel: [3, 3, 1], pool: [2, 2] },
                StageSpec { out_channels: 8, kernel: [3, 3, 3], pool: [2, 2] },
                StageSpec { out_channels: 16, kernel: [3, 3, 3], pool: [2, 2] },
                StageSpec { out_channels: 32, kernel: [3, 3, 1], pool: [2, 2] },
            ],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tcn.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("radar.stages", "at least one stage required"));
        }
        let (mut h, mut w) = (self.n_range / self.input_pool[0], self.n_doppler / self.input_pool[1]);
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel.iter().any(|k| k % 2 == 0) {
                return Err(Error::config(&format!("radar.stage{i}.kernel"), "extents must be odd"));
            }
            h /= s.pool[0];
            w /= s.pool[1];
            if h == 0 || w == 0 {
                return Err(Error::config(
                    &format!("radar.stage{i}.pool"),
                    "pooling reduces a spatial axis below one bin",
                ));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(&format!("{prefix}.n_range"), self.n_range);
        doc.set(&format!("{prefix}.n_doppler"), self.n_doppler);
        doc.set(&format!("{prefix}.input_pool"), join_list(&self.input_pool));
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                format!(
                    "{}:{}x{}x{}:{}x{}",
                    s.out_channels, s.kernel[0], s.kernel[1], s.kernel[2], s.pool[0], s.pool[1]
                )
            })
            .collect();
        doc.set(&format!("{prefix}.stages"), stages.join(";"));
        self.tcn.write_kv(doc, &format!("{prefix}.tcn"));
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        Self::read_kv_over(doc, prefix, &Radar3dConfig::default())
    }

    /// Like [`Radar3dConfig::read_kv`] with missing keys taken from `d`.
    pub fn read_kv_over(doc: &KvDoc, prefix: &str, d: &Radar3dConfig) -> Result<Self> {
        let key = format!("{prefix}.stages");
        let stages = match doc.get(&key) {
            None => d.stages.clone(),
            Some(raw) => raw
                .split(';')
                .map(|s| parse_stage(s).ok_or_else(|| Error::config(&key, format!("bad stage `{s}`"))))
                .collect::<Result<Vec<_>>>()?,
        };
        let input_pool: Vec<usize> = doc
            .parse_list(&format!("{prefix}.input_pool"))?
            .unwrap_or(d.input_pool.to_vec());
        if input_pool.len() != 2 {
            return Err(Error::config(&format!("{prefix}.input_pool"), "expected two values"));
        }
        let cfg = Radar3dConfig {
            n_range: doc.parse_value(&format!("{prefix}.n_range"))?.unwrap_or(d.n_range),
            n_doppler: doc.parse_value(&format!("{prefix}.n_doppler"))?.unwrap_or(d.n_doppler),
            input_pool: [input_pool[0], input_pool[1]],
            stages,
            tcn: TcnConfig::read_kv(doc, &format!("{prefix}.tcn"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_stage(s: &str) -> Option<StageSpec> {
    let mut parts = s.trim().split(':');
    let out_channels = parts.next()?.parse().ok()?;
    let k: Vec<usize> = parts.next()?.split('x').map(|v| v.parse().ok()).collect::<Option<_>>()?;
    let p: Vec<usize> = parts.next()?.split('x').map(|v| v.parse().ok()).collect::<Option<_>>()?;
    if k.len() != 3 || p.len() != 2 || parts.next().is_some() {
        return None;
    }
    Some(StageSpec {
        out_channels,
        kernel: [k[0], k[1], k[2]],
        pool: [p[0], p[1]],
    })
}

/// Input projection followed by dilated residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnEncoder<T> {
    pub in_proj: Conv1d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

pub struct TcnCache<T> {
    in_proj: Conv1dCache<T>,
    blocks: Vec<ResidualCache<T>>,
}

impl<T: Scalar> TcnEncoder<T> {
    pub fn new(in_channels: usize, cfg: &TcnConfig, rng: &mut ChaCha8Rng) -> Self {
        let blocks = cfg
            .dilations
            .iter()
            .map(|&d| {
                let mut b = ResidualBlock::new(cfg.channels, cfg.kernel_size, d, rng);
                b.dilated.causal = cfg.causal;
                b
            })
            .collect();
        TcnEncoder {
            in_proj: Conv1d::pointwise(in_channels, cfg.channels, rng),
            blocks,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_proj.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.in_proj.out_ch
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, TcnCache<T>) {
        let (mut h, in_cache) = self.in_proj.forward(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h);
            caches.push(c);
            h = next;
        }
        (
            h,
            TcnCache {
                in_proj: in_cache,
                blocks: caches,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &TcnCache<T>,
        dy: &Mat<T>,
        grad: Option<&mut TcnEncoder<T>>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        let mut grad = grad;
        let mut d = dy.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let g = grad.as_deref_mut().map(|g| &mut g.blocks[i]);
            d = b.backward(&cache.blocks[i], &d, g, true).expect("dx requested");
        }
        let g = grad.map(|g| &mut g.in_proj);
        self.in_proj.backward(&cache.in_proj, &d, g, need_dx)
    }
}

impl<T: Scalar> Module<T> for TcnEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.in_proj.visit(&join_name(prefix, "in_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.in_proj.visit_mut(&join_name(prefix, "in_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("block{i}")), f);
        }
    }
}

/// 3D convolution stages, spatial averaging and a temporal TCN.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarEncoder<T> {
    pub config: Radar3dConfig,
    pub stages: Vec<Conv3dStage<T>>,
    pub tcn: TcnEncoder<T>,
}

pub struct RadarCache<T> {
    stages: Vec<Conv3dCache<T>>,
    last_hw: (usize, usize),
    tcn: TcnCache<T>,
}

impl<T: Scalar> RadarEncoder<T> {
    pub fn new(cfg: &Radar3dConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut in_ch = 1;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            stages.push(Conv3dStage::new(in_ch, s.out_channels, s.kernel, s.pool, rng));
            in_ch = s.out_channels;
        }
        Ok(RadarEncoder {
            config: cfg.clone(),
            stages,
            tcn: TcnEncoder::new(in_ch, &cfg.tcn, rng),
        })
    }

    fn check_input(&self, x: &Vol<T>) -> Result<()> {
        if x.channels != 1 || x.height != self.config.n_range || x.width != self.config.n_doppler {
            return Err(Error::shape(
                format!("1x{}x{}xN radar input", self.config.n_range, self.config.n_doppler),
                format!("{}x{}x{}x{}", x.channels, x.height, x.width, x.frames),
            ));
        }
        if x.frames == 0 {
            return Err(Error::shape("N >= 1 frames", "0 frames"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Vol<T>) -> Result<(Mat<T>, RadarCache<T>)> {
        self.check_input(x)?;
        let mut h = x.avg_pool_spatial(self.config.input_pool[0], self.config.input_pool[1]);
        let mut caches = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (next, c) = s.forward(&h);
            caches.push(c);
            h = next;
        }
        let last_hw = (h.height, h.width);
        let pooled = h.spatial_mean();
        let (m, tcn) = self.tcn.forward(&pooled);
        Ok((
            m,
            RadarCache {
                stages: caches,
                last_hw,
                tcn,
            },
        ))
    }

    /// Parameter gradients only; the raw cube never needs a gradient.
    pub fn backward(&self, cache: &RadarCache<T>, dy: &Mat<T>, grad: Option<&mut RadarEncoder<T>>) {
        let mut grad = grad;
        let dpool = self
            .tcn
            .backward(&cache.tcn, dy, grad.as_deref_mut().map(|g| &mut g.tcn), true)
            .expect("dx requested");
        let mut d = Vol::spatial_mean_backward(&dpool, cache.last_hw.0, cache.last_hw.1);
        for (i, s) in self.stages.iter().enumerate().rev() {
            let g = grad.as_deref_mut().map(|g| &mut g.stages[i]);
            match s.backward(&cache.stages[i], &d, g, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

impl<T: Scalar> Module<T> for RadarEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join_name(prefix, &format!("stage{i}")), f);
        }
        self.tcn.visit(&join_name(prefix, "tcn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join_name(prefix, &format!("stage{i}")), f);
        }
        self.tcn.visit_mut(&join_name(prefix, "tcn"), f);
    }
}

/// Model input for one window of one modality.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalInput<T> {
    /// `[channels, frames]`
    Imu(Mat<T>),
    /// `[1, frames, range, doppler]`
    Radar(Vol<T>),
}

impl<T: Scalar> ModalInput<T> {
    pub fn n_frames(&self) -> usize {
        match self {
            ModalInput::Imu(m) => m.cols,
            ModalInput::Radar(v) => v.frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Imu,
    Radar,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Imu => "imu",
            Modality::Radar => "radar",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Imu => Modality::Radar,
            Modality::Radar => Modality::Imu,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "imu" => Ok(Modality::Imu),
            "radar" => Ok(Modality::Radar),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

/// Architecture choice for one encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderConfig {
    Tcn { in_channels: usize, tcn: TcnConfig },
    Radar3d(Radar3dConfig),
}

impl EncoderConfig {
    pub fn modality(&self) -> Modality {
        match self {
            EncoderConfig::Tcn { .. } => Modality::Imu,
            EncoderConfig::Radar3d(_) => Modality::Radar,
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        match self {
            EncoderConfig::Tcn { in_channels, tcn } => {
                doc.set(&format!("{prefix}.kind"), "tcn");
                doc.set(&format!("{prefix}.in_channels"), in_channels);
                tcn.write_kv(doc, &format!("{prefix}.tcn"));
            }
            EncoderConfig::Radar3d(cfg) => {
                doc.set(&format!("{prefix}.kind"), "radar3d");
                cfg.write_kv(doc, &format!("{prefix}.radar"));
            }
        }
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let key = format!("{prefix}.kind");
        match doc.require(&key)? {
            "tcn" => Ok(EncoderConfig::Tcn {
                in_channels: doc.require_value(&format!("{prefix}.in_channels"))?,
                tcn: TcnConfig::read_kv(doc, &format!("{prefix}.tcn"))?,
            }),
            "radar3d" => Ok(EncoderConfig::Radar3d(Radar3dConfig::read_kv(
                doc,
                &format!("{prefix}.radar"),
            )?)),
            other => Err(Error::config(key, format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// Either encoder family behind one interface; used for the modality
/// encoders and for the adaptation encoders that mirror them.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder<T> {
    Tcn(TcnEncoder<T>),
    Radar(RadarEncoder<T>),
}

pub enum EncoderCache<T> {
    Tcn(TcnCache<T>),
    Radar(RadarCache<T>),
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        match cfg {
            EncoderConfig::Tcn { in_channels, tcn } => {
                tcn.validate()?;
                Ok(Encoder::Tcn(TcnEncoder::new(*in_channels, tcn, rng)))
            }
            EncoderConfig::Radar3d(r) => Ok(Encoder::Radar(RadarEncoder::new(r, rng)?)),
        }
    }

    pub fn input_modality(&self) -> Modality {
        match self {
            Encoder::Tcn(_) => Modality::Imu,
            Encoder::Radar(_) => Modality::Radar,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Encoder::Tcn(e) => e.out_channels(),
            Encoder::Radar(e) => e.tcn.out_channels(),
        }
    }

    pub fn forward(&self, x: &ModalInput<T>) -> Result<(Mat<T>, EncoderCache<T>)> {
        match (self, x) {
            (Encoder::Tcn(e), ModalInput::Imu(m)) => {
                if m.rows != e.in_channels() {
                    return Err(Error::shape(
                        format!("{} IMU channels", e.in_channels()),
                        format!("{} channels", m.rows),
                    ));
                }
                if m.cols == 0 {
                    return Err(Error::shape("N >= 1 frames", "0 frames"));
                }
                let (y, c) = e.forward(m);
                Ok((y, EncoderCache::Tcn(c)))
            }
            (Encoder::Radar(e), ModalInput::Radar(v)) => {
                let (y, c) = e.forward(v)?;
                Ok((y, EncoderCache::Radar(c)))
            }
            (enc, _) => Err(Error::shape(
                format!("{} input", enc.input_modality()),
                "input of the other modality",
            )),
        }
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dy: &Mat<T>, grad: Option<&mut Encoder<T>>) {
        match (self, cache) {
            (Encoder::Tcn(e), EncoderCache::Tcn(c)) => {
                let g = match grad {
                    Some(Encoder::Tcn(g)) => Some(g),
                    None => None,
                    Some(_) => panic!("gradient holder of a different architecture"),
                };
                e.backward(c, dy, g, false);
            }
            (Encoder::Radar(e), EncoderCache::Radar(c)) => {
                let g = match grad {
                    Some(Encoder::Radar(g)) => Some(g),
                    None => None,
                    Some(_) => panic!("gradient holder of a different architecture"),
                };
                e.backward(c, dy, g);
            }
            _ => panic!("cache from a different architecture"),
        }
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Encoder::Tcn(e) => e.visit(prefix, f),
            Encoder::Radar(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Encoder::Tcn(e) => e.visit_mut(prefix, f),
            Encoder::Radar(e) => e.visit_mut(prefix, f),
        }
    }
}

/// Pointwise linear map to class logits; probabilities via column softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T> {
    pub proj: Conv1d<T>,
}

pub struct PredictorCache<T> {
    proj: Conv1dCache<T>,
}

impl<T: Scalar> Predictor<T> {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Predictor {
            proj: Conv1d::pointwise(in_channels, crate::data::N_CLASSES, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.proj.in_ch
    }

    pub fn logits(&self, m: &Mat<T>) -> Result<(Mat<T>, PredictorCache<T>)> {
        if m.rows != self.proj.in_ch {
            return Err(Error::shape(
                format!("{} feature channels", self.proj.in_ch),
                format!("{}", m.rows),
            ));
        }
        let (z, c) = self.proj.forward(m);
        Ok((z, PredictorCache { proj: c }))
    }

    pub fn probabilities(&self, m: &Mat<T>) -> Result<Mat<T>> {
        Ok(softmax_cols(&self.logits(m)?.0))
    }

    /// Gradient w.r.t. the input features given the gradient w.r.t. logits.
    pub fn backward(&self, cache: &PredictorCache<T>, dlogits: &Mat<T>, grad: Option<&mut Predictor<T>>) -> Mat<T> {
        self.proj
            .backward(&cache.proj, dlogits, grad.map(|g| &mut g.proj), true)
            .expect("dx requested")
    }
}

impl<T: Scalar> Module<T> for Predictor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj.visit(&join_name(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.proj.visit_mut(&join_name(prefix, "proj"), f);
    }
}

/// IMU modality encoder forward pass.
pub fn msfe_imu_forward<T: Scalar>(x: &Mat<T>, params: &TcnEncoder<T>) -> Result<Mat<T>> {
    if x.rows != params.in_channels() {
        return Err(Error::shape(
            format!("{} IMU channels", params.in_channels()),
            format!("{} channels", x.rows),
        ));
    }
    Ok(params.forward(x).0)
}

/// Radar modality encoder forward pass.
pub fn msfe_radar_forward<T: Scalar>(x: &Vol<T>, params: &RadarEncoder<T>) -> Result<Mat<T>> {
    Ok(params.forward(x)?.0)
}

/// Per-frame class probabilities.
pub fn predictor_forward<T: Scalar>(m: &Mat<T>, params: &Predictor<T>) -> Result<Mat<T>> {
    params.probabilities(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        Mat::from_vec(rows, cols, Tensor::<f64>::uniform(&[rows * cols], 1.0, &mut rng(seed)).data)
    }

    fn rand_cube(r: usize, d: usize, n: usize, seed: u64) -> Vol<f64> {
        let mut v = Vol::zeros(1, n, r, d);
        v.data = Tensor::<f64>::uniform(&[v.data.len()], 1.0, &mut rng(seed)).data;
        v.data.iter_mut().for_each(|x| *x = x.abs());
        v
    }

    #[test]
    fn imu_encoder_shapes() {
        let enc = TcnEncoder::<f32>::new(12, &TcnConfig::default(), &mut rng(1));
        let x = Mat::zeros(12, 1000);
        assert_eq!(msfe_imu_forward(&x, &enc).unwrap().rows, 64);
        assert_eq!(msfe_imu_forward(&x, &enc).unwrap().cols, 1000);
        let one_hand = TcnEncoder::<f32>::new(6, &TcnConfig::default(), &mut rng(1));
        let y = msfe_imu_forward(&Mat::zeros(6, 37), &one_hand).unwrap();
        assert_eq!((y.rows, y.cols), (64, 37));
        assert!(msfe_imu_forward(&Mat::zeros(6, 5), &enc).is_err());
    }

    #[test]
    fn zero_input_and_bias_free_zero_params_give_zero() {
        let mut enc = TcnEncoder::<f64>::new(12, &TcnConfig::default(), &mut rng(1));
        enc.visit_mut("", &mut |_, t| t.fill_zero());
        let y = msfe_imu_forward(&Mat::zeros(12, 50), &enc).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radar_encoder_shapes_default_config() {
        let enc = RadarEncoder::<f32>::new(&Radar3dConfig::default(), &mut rng(2)).unwrap();
        for n in [1, 7] {
            let y = msfe_radar_forward(&Vol::zeros(1, n, 32, 64), &enc).unwrap();
            assert_eq!((y.rows, y.cols), (64, n));
        }
        assert!(msfe_radar_forward(&Vol::zeros(1, 4, 16, 64), &enc).is_err());
    }

    #[test]
    fn radar_encoder_is_time_shift_equivariant_away_from_edges() {
        let cfg = Radar3dConfig {
            n_range: 8,
            n_doppler: 8,
            input_pool: [1, 1],
            stages: vec![
                StageSpec { out_channels: 3, kernel: [3, 3, 3], pool: [2, 2] },
                StageSpec { out_channels: 4, kernel: [3, 3, 3], pool: [2, 2] },
            ],
            tcn: TcnConfig { n_blocks: 2, kernel_size: 3, channels: 8, dilations: vec![1, 2], causal: false },
        };
        let enc = RadarEncoder::<f64>::new(&cfg, &mut rng(5)).unwrap();
        let n = 40;
        let s = 5;
        let x = rand_cube(8, 8, n, 9);
        let mut shifted = x.clone();
        for t in 0..n {
            for r in 0..8 {
                for d in 0..8 {
                    let dst = shifted.idx(0, (t + s) % n, r, d);
                    shifted.data[dst] = x.data[x.idx(0, t, r, d)];
                }
            }
        }
        let y = msfe_radar_forward(&x, &enc).unwrap();
        let ys = msfe_radar_forward(&shifted, &enc).unwrap();
        // temporal halo: two 3-tap stages plus the TCN span
        let halo = 2 + cfg.tcn.receptive_field();
        for t in halo..n - halo - s {
            for c in 0..8 {
                assert!((y.at(c, t) - ys.at(c, t + s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn receptive_field_matches_impulse_response() {
        let cfg = TcnConfig { n_blocks: 3, kernel_size: 3, channels: 4, dilations: vec![1, 2, 4], causal: false };
        let mut enc = TcnEncoder::<f64>::new(1, &cfg, &mut rng(3));
        // positive weights keep every path active so the support is exact
        enc.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = v.abs() + 0.1));
        let n = 41;
        let base = enc.forward(&Mat::zeros(1, n)).0;
        let mut x = Mat::zeros(1, n);
        *x.at_mut(0, 20) = 1.0;
        let y = enc.forward(&x).0;
        let touched: Vec<usize> = (0..n).filter(|&t| (y.at(0, t) - base.at(0, t)).abs() > 0.0).collect();
        assert_eq!(touched.len(), cfg.receptive_field());
        assert_eq!(cfg.receptive_field(), 1 + 2 * 7);
    }

    #[test]
    fn predictor_columns_are_distributions() {
        let p = Predictor::<f64>::new(64, &mut rng(4));
        let probs = predictor_forward(&rand_mat(64, 1000, 11), &p).unwrap();
        assert_eq!((probs.rows, probs.cols), (3, 1000));
        for t in 0..probs.cols {
            let s: f64 = (0..3).map(|c| probs.at(c, t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut zero = p.clone();
        zero.visit_mut("", &mut |_, t| t.fill_zero());
        let u = predictor_forward(&Mat::zeros(64, 3), &zero).unwrap();
        assert!(u.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn encoder_config_kv_round_trip() {
        let cfg = EncoderConfig::Radar3d(Radar3dConfig::desk());
        let mut doc = KvDoc::new();
        cfg.write_kv(&mut doc, "enc");
        assert_eq!(EncoderConfig::read_kv(&doc, "enc").unwrap(), cfg);
        let cfg = EncoderConfig::Tcn { in_channels: 6, tcn: TcnConfig::default() };
        let mut doc = KvDoc::new();
        cfg.write_kv(&mut doc, "enc");
        assert_eq!(EncoderConfig::read_kv(&doc, "enc").unwrap(), cfg);
    }

    #[test]
    fn causal_encoder_ignores_future_frames() {
        let cfg = TcnConfig { causal: true, ..TcnConfig::default() };
        let enc = TcnEncoder::<f64>::new(2, &cfg, &mut rng(8));
        let x = rand_mat(2, 30, 1);
        let mut x2 = x.clone();
        *x2.at_mut(0, 20) += 1.0;
        let (a, b) = (enc.forward(&x).0, enc.forward(&x2).0);
        for t in 0..20 {
            for c in 0..64 {
                assert_eq!(a.at(c, t), b.at(c, t));
            }
        }
    }

    fn weighted_sum(y: &Mat<f64>, w: &[f64]) -> f64 {
        y.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn tcn_encoder_gradients_match_finite_differences() {
        let cfg = TcnConfig { n_blocks: 2, kernel_size: 3, channels: 4, dilations: vec![1, 2], causal: false };
        let enc = TcnEncoder::<f64>::new(3, &cfg, &mut rng(21));
        let x = rand_mat(3, 8, 22);
        let w = Tensor::<f64>::uniform(&[32], 1.0, &mut rng(23)).data;
        let (_, cache) = enc.forward(&x);
        let mut g = enc.zeros_like();
        enc.backward(&cache, &Mat::from_vec(4, 8, w.clone()), Some(&mut g), false);
        let fd = crate::nn::gradcheck::param_fd(&enc, 1e-6, |e| weighted_sum(&e.forward(&x).0, &w));
        let (name, err) = crate::nn::gradcheck::worst_rel_error(&g, &fd);
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn radar_encoder_gradients_match_finite_differences() {
        let cfg = Radar3dConfig {
            n_range: 4,
            n_doppler: 8,
            input_pool: [1, 2],
            stages: vec![
                StageSpec { out_channels: 2, kernel: [3, 3, 3], pool: [2, 2] },
                StageSpec { out_channels: 3, kernel: [3, 1, 3], pool: [2, 1] },
            ],
            tcn: TcnConfig { n_blocks: 1, kernel_size: 3, channels: 4, dilations: vec![1], causal: false },
        };
        let enc = RadarEncoder::<f64>::new(&cfg, &mut rng(31)).unwrap();
        let x = rand_cube(4, 8, 6, 32);
        let w = Tensor::<f64>::uniform(&[24], 1.0, &mut rng(33)).data;
        let (_, cache) = enc.forward(&x).unwrap();
        let mut g = enc.zeros_like();
        enc.backward(&cache, &Mat::from_vec(4, 6, w.clone()), Some(&mut g));
        let fd = crate::nn::gradcheck::param_fd(&enc, 1e-6, |e| weighted_sum(&e.forward(&x).unwrap().0, &w));
        let (name, err) = crate::nn::gradcheck::worst_rel_error(&g, &fd);
        assert!(err < 1e-4, "{name}: {err}");
    }
}
