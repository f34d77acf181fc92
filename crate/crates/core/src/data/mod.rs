//! Domain types shared by every stage of the pipeline.
//!
//! Frames are the canonical time unit. Sensor payloads are stored as `f32`
//! regardless of the precision used for training.

pub mod mmgf;
mod session_io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use session_io::{load_dataset, load_session, save_session};

/// Default radar frame rate and the rate IMU streams are resampled to.
pub const FRAME_RATE_HZ: f64 = 25.0;
pub const N_RANGE: usize = 32;
pub const N_DOPPLER: usize = 64;
pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(u8)]
pub enum ClassId {
    #[default]
    Other = 0,
    Eating = 1,
    Drinking = 2,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::Other, ClassId::Eating, ClassId::Drinking];
    pub const GESTURES: [ClassId; 2] = [ClassId::Eating, ClassId::Drinking];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Other => "other",
            ClassId::Eating => "eating",
            ClassId::Drinking => "drinking",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "other" | "0" => Ok(ClassId::Other),
            "eating" | "eat" | "1" => Ok(ClassId::Eating),
            "drinking" | "drink" | "2" => Ok(ClassId::Drinking),
            other => Err(Error::validation("label", format!("unknown class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EatingStyle {
    ForkKnife,
    Spoon,
    Chopsticks,
    Hand,
}

impl EatingStyle {
    pub const ALL: [EatingStyle; 4] = [
        EatingStyle::ForkKnife,
        EatingStyle::Spoon,
        EatingStyle::Chopsticks,
        EatingStyle::Hand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EatingStyle::ForkKnife => "fork_knife",
            EatingStyle::Spoon => "spoon",
            EatingStyle::Chopsticks => "chopsticks",
            EatingStyle::Hand => "hand",
        }
    }
}

impl fmt::Display for EatingStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EatingStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::validation("eating_style", format!("unknown style `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn name(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }
}

impl fmt::Display for Hand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Hand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left" => Ok(Hand::Left),
            "right" => Ok(Hand::Right),
            other => Err(Error::validation("dominant_hand", format!("unknown hand `{other}`"))),
        }
    }
}

/// Canonical channel order of a two-hand IMU stream.
pub const IMU_CHANNELS: [&str; 12] = [
    "left_acc_x",
    "left_acc_y",
    "left_acc_z",
    "left_gyr_x",
    "left_gyr_y",
    "left_gyr_z",
    "right_acc_x",
    "right_acc_y",
    "right_acc_z",
    "right_gyr_x",
    "right_gyr_y",
    "right_gyr_z",
];

pub fn hand_channels(hand: Hand) -> Vec<String> {
    let range = match hand {
        Hand::Left => 0..6,
        Hand::Right => 6..12,
    };
    IMU_CHANNELS[range].iter().map(|s| s.to_string()).collect()
}

pub fn two_hand_channels() -> Vec<String> {
    IMU_CHANNELS.iter().map(|s| s.to_string()).collect()
}

fn check_finite(field: &str, data: &[f32]) -> Result<()> {
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(field, format!("non-finite value at flat index {i}")));
    }
    Ok(())
}

/// Range-Doppler-time magnitude cube, stored `[range][doppler][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdtCube {
    n_range: usize,
    n_doppler: usize,
    n_frames: usize,
    frame_rate: f64,
    data: Vec<f32>,
}

impl RdtCube {
    pub fn new(
        n_range: usize,
        n_doppler: usize,
        n_frames: usize,
        frame_rate: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if n_range == 0 || n_doppler == 0 || n_frames == 0 {
            return Err(Error::validation("radar", "all cube dimensions must be >= 1"));
        }
        if data.len() != n_range * n_doppler * n_frames {
            return Err(Error::shape(
                format!("{} values", n_range * n_doppler * n_frames),
                format!("{} values", data.len()),
            ));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::validation("radar.frame_rate", "must be positive"));
        }
        check_finite("radar", &data)?;
        Ok(RdtCube {
            n_range,
            n_doppler,
            n_frames,
            frame_rate,
            data,
        })
    }

    pub fn zeros(n_range: usize, n_doppler: usize, n_frames: usize, frame_rate: f64) -> Self {
        Self::new(
            n_range,
            n_doppler,
            n_frames,
            frame_rate,
            vec![0.0; n_range * n_doppler * n_frames],
        )
        .expect("valid zero cube")
    }

    pub fn n_range(&self) -> usize {
        self.n_range
    }
    pub fn n_doppler(&self) -> usize {
        self.n_doppler
    }
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, r: usize, d: usize, t: usize) -> usize {
        (r * self.n_doppler + d) * self.n_frames + t
    }

    #[inline]
    pub fn at(&self, r: usize, d: usize, t: usize) -> f32 {
        self.data[self.index(r, d, t)]
    }

    /// Time series of one range-Doppler bin.
    pub fn bin(&self, r: usize, d: usize) -> &[f32] {
        let start = self.index(r, d, 0);
        &self.data[start..start + self.n_frames]
    }

    pub fn bin_mut(&mut self, r: usize, d: usize) -> &mut [f32] {
        let start = self.index(r, d, 0);
        let n = self.n_frames;
        &mut self.data[start..start + n]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Multichannel inertial stream stored `[channel][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSequence {
    n_channels: usize,
    n_frames: usize,
    sample_rate: f64,
    channel_layout: Vec<String>,
    data: Vec<f32>,
}

impl ImuSequence {
    pub fn new(
        channel_layout: Vec<String>,
        n_frames: usize,
        sample_rate: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n_channels = channel_layout.len();
        if n_channels != 6 && n_channels != 12 {
            return Err(Error::validation(
                "imu.channels",
                format!("expected 6 or 12 channels, got {n_channels}"),
            ));
        }
        if n_frames == 0 {
            return Err(Error::validation("imu", "at least one frame required"));
        }
        if data.len() != n_channels * n_frames {
            return Err(Error::shape(
                format!("{} values", n_channels * n_frames),
                format!("{} values", data.len()),
            ));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::validation("imu.sample_rate", "must be positive"));
        }
        check_finite("imu", &data)?;
        Ok(ImuSequence {
            n_channels,
            n_frames,
            sample_rate,
            channel_layout,
            data,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }
    pub fn channel_layout(&self) -> &[String] {
        &self.channel_layout
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_frames..(c + 1) * self.n_frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_frames;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Keeps only the channels of one hand (one-hand mode).
    pub fn select_hand(&self, hand: Hand) -> Result<ImuSequence> {
        let wanted = hand_channels(hand);
        let mut data = Vec::with_capacity(6 * self.n_frames);
        for name in &wanted {
            let c = self
                .channel_layout
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::validation("imu.channels", format!("missing {name}")))?;
            data.extend_from_slice(self.channel(c));
        }
        ImuSequence::new(wanted, self.n_frames, self.sample_rate, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub labels: Vec<ClassId>,
    pub frame_rate: f64,
}

impl LabelSequence {
    pub fn new(labels: Vec<ClassId>, frame_rate: f64) -> Self {
        LabelSequence { labels, frame_rate }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-frame class scores, stored `[class][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSequence {
    n_frames: usize,
    values: Vec<f64>,
    is_probability: bool,
}

impl LogitSequence {
    pub fn new(n_frames: usize, values: Vec<f64>, is_probability: bool) -> Result<Self> {
        if values.len() != N_CLASSES * n_frames {
            return Err(Error::shape(
                format!("3x{n_frames}"),
                format!("{} values", values.len()),
            ));
        }
        let seq = LogitSequence {
            n_frames,
            values,
            is_probability,
        };
        if is_probability {
            seq.check_simplex(1e-5)?;
        }
        Ok(seq)
    }

    /// Builds a probability sequence from per-frame columns.
    pub fn from_columns(columns: &[[f64; 3]]) -> Result<Self> {
        let n = columns.len();
        let mut values = vec![0.0; 3 * n];
        for (t, col) in columns.iter().enumerate() {
            for c in 0..3 {
                values[c * n + t] = col[c];
            }
        }
        Self::new(n, values, true)
    }

    fn check_simplex(&self, tol: f64) -> Result<()> {
        for t in 0..self.n_frames {
            let col = self.column(t);
            if col.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::validation("probabilities", format!("negative entry at frame {t}")));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::validation(
                    "probabilities",
                    format!("column {t} sums to {s}"),
                ));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    pub fn is_probability(&self) -> bool {
        self.is_probability
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, class: usize, t: usize) -> f64 {
        self.values[class * self.n_frames + t]
    }

    pub fn column(&self, t: usize) -> [f64; 3] {
        [self.get(0, t), self.get(1, t), self.get(2, t)]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.n_frames..(class + 1) * self.n_frames]
    }
}

/// Half-open frame interval `[start_frame, end_frame)` carrying one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GestureSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub class_id: ClassId,
}

impl GestureSegment {
    pub fn new(start_frame: usize, end_frame: usize, class_id: ClassId) -> Self {
        debug_assert!(start_frame < end_frame);
        GestureSegment {
            start_frame,
            end_frame,
            class_id,
        }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }
}

/// Maximal runs of identical non-background labels, in temporal order.
pub fn labels_to_segments(labels: &LabelSequence) -> Vec<GestureSegment> {
    runs(&labels.labels)
        .into_iter()
        .filter(|s| s.class_id != ClassId::Other)
        .collect()
}

/// All maximal runs, including background.
pub fn runs(labels: &[ClassId]) -> Vec<GestureSegment> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push(GestureSegment::new(start, t, labels[start]));
            start = t;
        }
    }
    out
}

/// Paints segments onto an all-`Other` background of length `n`.
pub fn paint_segments(segments: &[GestureSegment], n: usize, frame_rate: f64) -> LabelSequence {
    let mut labels = vec![ClassId::Other; n];
    for s in segments {
        for l in &mut labels[s.start_frame.min(n)..s.end_frame.min(n)] {
            *l = s.class_id;
        }
    }
    LabelSequence::new(labels, frame_rate)
}

/// One recorded meal with optional sensor streams and frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MealSession {
    pub session_id: String,
    pub radar: Option<RdtCube>,
    pub imu: Option<ImuSequence>,
    pub labels: LabelSequence,
    pub meta: BTreeMap<String, String>,
}

impl MealSession {
    pub fn new(
        session_id: impl Into<String>,
        radar: Option<RdtCube>,
        imu: Option<ImuSequence>,
        labels: LabelSequence,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let s = MealSession {
            session_id: session_id.into(),
            radar,
            imu,
            labels,
            meta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radar.is_none() && self.imu.is_none() {
            return Err(Error::validation("session", "at least one of radar/imu required"));
        }
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::validation("labels", "empty label sequence"));
        }
        if let Some(r) = &self.radar {
            if r.n_frames() != n {
                return Err(Error::validation(
                    "radar",
                    format!("shape mismatch: radar has {} frames, labels {n}", r.n_frames()),
                ));
            }
        }
        if let Some(i) = &self.imu {
            if i.n_frames() != n {
                return Err(Error::validation(
                    "imu",
                    format!("shape mismatch: imu has {} frames, labels {n}", i.n_frames()),
                ));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn eating_style(&self) -> Option<EatingStyle> {
        self.meta.get("eating_style").and_then(|s| s.parse().ok())
    }

    pub fn segments(&self) -> Vec<GestureSegment> {
        labels_to_segments(&self.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ClassId::*;

    fn seq(v: &[ClassId]) -> LabelSequence {
        LabelSequence::new(v.to_vec(), FRAME_RATE_HZ)
    }

    #[test]
    fn segments_of_mixed_sequence() {
        let s = labels_to_segments(&seq(&[Other, Other, Eating, Eating, Eating, Other, Drinking, Drinking]));
        assert_eq!(
            s,
            vec![
                GestureSegment::new(2, 5, Eating),
                GestureSegment::new(6, 8, Drinking)
            ]
        );
    }

    #[test]
    fn all_other_has_no_segments() {
        assert!(labels_to_segments(&seq(&[Other; 9])).is_empty());
    }

    #[test]
    fn all_eating_is_one_segment() {
        assert_eq!(
            labels_to_segments(&seq(&[Eating; 11])),
            vec![GestureSegment::new(0, 11, Eating)]
        );
    }

    #[test]
    fn probability_sequence_rejects_bad_columns() {
        assert!(LogitSequence::from_columns(&[[0.5, 0.5, 0.1]]).is_err());
        assert!(LogitSequence::from_columns(&[[0.2, 0.5, 0.3]]).is_ok());
    }

    #[test]
    fn imu_rejects_odd_channel_counts() {
        let err = ImuSequence::new(vec!["a".into(); 5], 2, 25.0, vec![0.0; 10]).unwrap_err();
        assert!(err.to_string().contains("imu.channels"));
    }

    #[test]
    fn session_requires_a_stream() {
        let err = MealSession::new("s", None, None, seq(&[Other]), BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    fn arb_labels() -> impl Strategy<Value = Vec<ClassId>> {
        proptest::collection::vec(0usize..3, 1..200)
            .prop_map(|v| v.into_iter().map(|i| ClassId::from_index(i).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn paint_inverts_segmentation(labels in arb_labels()) {
            let y = seq(&labels);
            let segs = labels_to_segments(&y);
            prop_assert_eq!(paint_segments(&segs, y.len(), y.frame_rate), y);
        }

        #[test]
        fn segments_sorted_disjoint_and_maximal(labels in arb_labels()) {
            let segs = labels_to_segments(&seq(&labels));
            for w in segs.windows(2) {
                prop_assert!(w[0].end_frame <= w[1].start_frame);
                if w[0].class_id == w[1].class_id {
                    prop_assert!(w[0].end_frame < w[1].start_frame);
                }
            }
            for s in &segs {
                prop_assert!(s.start_frame < s.end_frame);
                prop_assert!(s.class_id != Other);
            }
        }
    }
}
