//! Session-level prediction with complete or single-modality input,
//! window stitching and label decoding.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::{ModalInput, Modality};
use crate::data::{ClassId, LabelSequence, LogitSequence, MealSession, N_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_cols, Mat, Scalar};
use crate::preprocess::WindowSpec;
use crate::trainer::{session_windows, window_samples, FusionCheckpoint, TrainConfig, UnimodalCheckpoint};

/// Which streams the model may use for a whole session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Availability {
    Both,
    /// Radar missing: radar-side features come from the IMU adaptation encoder.
    ImuOnly,
    /// IMU missing: IMU-side features come from the radar adaptation encoder.
    RadarOnly,
}

impl Availability {
    pub const ALL: [Availability; 3] = [Availability::Both, Availability::ImuOnly, Availability::RadarOnly];

    pub fn name(self) -> &'static str {
        match self {
            Availability::Both => "both",
            Availability::ImuOnly => "imu_only",
            Availability::RadarOnly => "radar_only",
        }
    }

    fn required(self) -> &'static [Modality] {
        match self {
            Availability::Both => &[Modality::Imu, Modality::Radar],
            Availability::ImuOnly => &[Modality::Imu],
            Availability::RadarOnly => &[Modality::Radar],
        }
    }
}

impl std::fmt::Display for Availability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Availability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Availability::Both),
            "imu_only" => Ok(Availability::ImuOnly),
            "radar_only" => Ok(Availability::RadarOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown availability `{other}` (expected both|imu_only|radar_only)"
            ))),
        }
    }
}

/// Per-frame argmax; ties go to the lower class index.
pub fn decode_labels(p: &LogitSequence) -> LabelSequence {
    let labels = (0..p.n_frames())
        .map(|t| {
            let col = p.column(t);
            let best = (1..N_CLASSES).fold(0, |b, c| if col[c] > col[b] { c } else { b });
            ClassId::from_index(best).expect("class index in range")
        })
        .collect();
    LabelSequence::new(labels, crate::data::FRAME_RATE_HZ)
}

fn has(session: &MealSession, m: Modality) -> bool {
    match m {
        Modality::Imu => session.imu.is_some(),
        Modality::Radar => session.radar.is_some(),
    }
}

fn check_routing(session: &MealSession, availability: Availability) -> Result<()> {
    for &m in availability.required() {
        if !has(session, m) {
            return Err(Error::Routing(format!(
                "availability {availability} needs the {m} stream, which session {} lacks",
                session.session_id
            )));
        }
    }
    Ok(())
}

/// Runs `window_logp` on every window of `session` and stitches the
/// probabilities back to session length.
fn predict_windows<T: Scalar>(
    session: &MealSession,
    train: &TrainConfig,
    window: &WindowSpec,
    normalizer: &crate::preprocess::Normalizer,
    modalities: &[Modality],
    mut window_logp: impl FnMut(&ModalInputs<T>) -> Result<Mat<f64>>,
) -> Result<(LogitSequence, LabelSequence)> {
    let cfg = TrainConfig { window: *window, ..train.clone() };
    let (windows, map) = session_windows(session, &cfg)?;
    let samples = window_samples::<T>(windows, normalizer, modalities)?;
    let mut outputs = Vec::with_capacity(samples.len());
    for s in &samples {
        let mut p = window_logp(&ModalInputs { imu: s.imu.as_ref(), radar: s.radar.as_ref() })?;
        p.data.iter_mut().for_each(|v| *v = v.exp());
        outputs.push(p);
    }
    let probs = map.stitch(&outputs)?;
    let seq = LogitSequence::new(session.n_frames(), probs.data, true)?;
    let labels = decode_labels(&seq);
    Ok((seq, labels))
}

struct ModalInputs<'a, T> {
    imu: Option<&'a ModalInput<T>>,
    radar: Option<&'a ModalInput<T>>,
}

impl<'a, T> ModalInputs<'a, T> {
    fn get(&self, m: Modality) -> &'a ModalInput<T> {
        match m {
            Modality::Imu => self.imu,
            Modality::Radar => self.radar,
        }
        .expect("stream selected for this availability")
    }
}

/// Multimodal prediction. With `Both` only the modality encoders feed the
/// fusion head; otherwise the missing side is reconstructed by the
/// adaptation encoder of the present modality.
pub fn predict_session<T: Scalar>(
    session: &MealSession,
    ckpt: &FusionCheckpoint<T>,
    availability: Availability,
) -> Result<(LogitSequence, LabelSequence)> {
    predict_session_with(session, ckpt, availability, &ckpt.train_config.window)
}

/// As [`predict_session`] with an explicit window layout; overlapping
/// windows have their probabilities averaged.
pub fn predict_session_with<T: Scalar>(
    session: &MealSession,
    ckpt: &FusionCheckpoint<T>,
    availability: Availability,
    window: &WindowSpec,
) -> Result<(LogitSequence, LabelSequence)> {
    check_routing(session, availability)?;
    // streams outside the availability are dropped before preprocessing
    let mut s = session.clone();
    if availability == Availability::ImuOnly {
        s.radar = None;
    }
    if availability == Availability::RadarOnly {
        s.imu = None;
    }
    predict_windows(&s, &ckpt.train_config, window, &ckpt.normalizer, availability.required(), |x| {
        let (m_r, m_i) = match availability {
            Availability::Both => (
                ckpt.radar.features(x.get(Modality::Radar))?,
                ckpt.imu.features(x.get(Modality::Imu))?,
            ),
            Availability::ImuOnly => {
                let xi = x.get(Modality::Imu);
                (ckpt.fusion.i2r.forward(xi)?.0, ckpt.imu.features(xi)?)
            }
            Availability::RadarOnly => {
                let xr = x.get(Modality::Radar);
                (ckpt.radar.features(xr)?, ckpt.fusion.r2i.forward(xr)?.0)
            }
        };
        Ok(ckpt.fusion.head.forward(&m_r, &m_i)?.0)
    })
}

/// Prediction from a single-modality model.
pub fn predict_unimodal<T: Scalar>(session: &MealSession, ckpt: &UnimodalCheckpoint<T>) -> Result<(LogitSequence, LabelSequence)> {
    let m = ckpt.model.modality;
    if !has(session, m) {
        return Err(Error::Routing(format!("session {} lacks the {m} stream", session.session_id)));
    }
    predict_windows(session, &ckpt.train_config, &ckpt.train_config.window, &ckpt.normalizer, &[m], |x| {
        let z = ckpt.model.logits(x.get(m))?;
        Ok(log_softmax_cols(&Mat::from_vec(z.rows, z.cols, z.to_f64())))
    })
}

/// `frame,p_other,p_eat,p_drink,label`
pub fn predictions_csv(p: &LogitSequence, labels: &LabelSequence) -> String {
    let mut s = String::from("frame,p_other,p_eat,p_drink,label\n");
    for t in 0..p.n_frames() {
        let c = p.column(t);
        let _ = writeln!(s, "{t},{:.6},{:.6},{:.6},{}", c[0], c[1], c[2], labels.labels[t]);
    }
    s
}

/// Labels column of a predictions file.
pub fn labels_from_predictions_csv(text: &str) -> Result<LabelSequence> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "frame,p_other,p_eat,p_drink,label" => {}
        _ => return Err(Error::format("predictions.csv", "unexpected header")),
    }
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 || fields[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::format("predictions.csv", format!("bad row {}", i + 2)));
        }
        labels.push(fields[4].trim().parse::<ClassId>()?);
    }
    Ok(LabelSequence::new(labels, crate::data::FRAME_RATE_HZ))
}
