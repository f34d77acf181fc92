//! Stream conditioning and fixed-length windowing.

use crate::data::{ClassId, Hand, ImuSequence, MealSession, RdtCube, hand_channels, two_hand_channels};
use crate::error::{Error, Result};
use crate::nn::layers::Vol;
use crate::nn::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResampleFilter {
    #[default]
    None,
    /// Windowed-sinc low-pass at the target Nyquist rate before interpolation.
    Fir,
}

const FIR_HALF_TAPS: usize = 15;

/// Linear-interpolation resampling onto a uniform grid at `target_hz`
/// starting at the first source sample.
pub fn resample_imu(seq: &ImuSequence, target_hz: f64) -> Result<ImuSequence> {
    resample_imu_with(seq, target_hz, ResampleFilter::None)
}

pub fn resample_imu_with(seq: &ImuSequence, target_hz: f64, filter: ResampleFilter) -> Result<ImuSequence> {
    let src = seq.sample_rate();
    if !(target_hz > 0.0) {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_hz > src {
        return Err(Error::InvalidArgument(format!(
            "upsampling from {src} Hz to {target_hz} Hz is not supported"
        )));
    }
    if target_hz == src {
        return Ok(seq.clone());
    }
    let n_in = seq.n_frames();
    let n_out = ((n_in - 1) as f64 * target_hz / src + 1e-9).floor() as usize + 1;
    let ratio = src / target_hz;
    let kernel = match filter {
        ResampleFilter::None => None,
        ResampleFilter::Fir => Some(lowpass_kernel(0.5 * target_hz / src)),
    };
    let mut data = Vec::with_capacity(seq.n_channels() * n_out);
    for c in 0..seq.n_channels() {
        let filtered;
        let x: &[f32] = match &kernel {
            Some(k) => {
                filtered = convolve_clamped(seq.channel(c), k);
                &filtered
            }
            None => seq.channel(c),
        };
        for k in 0..n_out {
            let pos = k as f64 * ratio;
            let i = (pos.floor() as usize).min(n_in - 1);
            let frac = pos - i as f64;
            let v = if i + 1 < n_in {
                x[i] as f64 * (1.0 - frac) + x[i + 1] as f64 * frac
            } else {
                x[i] as f64
            };
            data.push(v as f32);
        }
    }
    ImuSequence::new(seq.channel_layout().to_vec(), n_out, target_hz, data)
}

/// Hamming-windowed sinc with unit DC gain; `cutoff` in cycles per sample.
fn lowpass_kernel(cutoff: f64) -> Vec<f64> {
    let m = FIR_HALF_TAPS as isize;
    let mut k: Vec<f64> = (-m..=m)
        .map(|i| {
            let x = i as f64;
            let sinc = if i == 0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let w = 0.54 + 0.46 * (std::f64::consts::PI * x / m as f64).cos();
            sinc * w
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_clamped(x: &[f32], k: &[f64]) -> Vec<f32> {
    let half = (k.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            k.iter()
                .enumerate()
                .map(|(j, w)| {
                    let idx = (t + j as isize - half).clamp(0, n - 1);
                    w * x[idx as usize] as f64
                })
                .sum::<f64>() as f32
        })
        .collect()
}

/// Stacks a left-hand and a right-hand stream into the 12-channel layout.
pub fn concat_hands(left: &ImuSequence, right: &ImuSequence) -> Result<ImuSequence> {
    if left.n_frames() != right.n_frames() {
        return Err(Error::shape(
            format!("{} frames", left.n_frames()),
            format!("{} frames", right.n_frames()),
        ));
    }
    if left.sample_rate() != right.sample_rate() {
        return Err(Error::validation(
            "imu.sample_rate",
            format!("{} Hz vs {} Hz", left.sample_rate(), right.sample_rate()),
        ));
    }
    for (seq, hand) in [(left, Hand::Left), (right, Hand::Right)] {
        if seq.channel_layout() != hand_channels(hand).as_slice() {
            return Err(Error::validation(
                "imu.channels",
                format!("expected the six {hand} hand channels"),
            ));
        }
    }
    let mut data = left.data().to_vec();
    data.extend_from_slice(right.data());
    ImuSequence::new(two_hand_channels(), left.n_frames(), left.sample_rate(), data)
}

/// Subtracts each bin's temporal mean and clips at zero.
pub fn remove_clutter(cube: &RdtCube) -> Result<RdtCube> {
    let n = cube.n_frames();
    if n < 2 {
        return Err(Error::validation("radar", "clutter removal needs at least two frames"));
    }
    let mut out = cube.clone();
    for r in 0..cube.n_range() {
        for d in 0..cube.n_doppler() {
            let bin = out.bin_mut(r, d);
            let mean = bin.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            for v in bin.iter_mut() {
                *v = ((*v as f64 - mean).max(0.0)) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    RepeatEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window_frames: usize,
    pub stride_frames: usize,
    pub pad_mode: PadMode,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            window_frames: 1000,
            stride_frames: 1000,
            pad_mode: PadMode::RepeatEdge,
        }
    }
}

impl WindowSpec {
    pub fn new(window_frames: usize, stride_frames: usize) -> Result<Self> {
        let s = WindowSpec {
            window_frames,
            stride_frames,
            pad_mode: PadMode::RepeatEdge,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_frames == 0 || self.stride_frames > self.window_frames {
            return Err(Error::config(
                "window.stride_frames",
                format!("must satisfy 1 <= stride <= window ({})", self.window_frames),
            ));
        }
        Ok(())
    }

    /// Start frames of the windows covering `n` frames.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        let extra = n.saturating_sub(self.window_frames);
        let count = 1 + extra.div_ceil(self.stride_frames);
        (0..count).map(|i| i * self.stride_frames).collect()
    }
}

/// Frames `start..start + valid` of the session live at window offsets `0..valid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StitchMap {
    pub n_frames: usize,
    pub window_frames: usize,
    pub spans: Vec<WindowSpan>,
}

impl StitchMap {
    pub fn new(n: usize, spec: &WindowSpec) -> Self {
        let spans = spec
            .starts(n)
            .into_iter()
            .map(|start| WindowSpan {
                start,
                valid: spec.window_frames.min(n - start),
            })
            .collect();
        StitchMap {
            n_frames: n,
            window_frames: spec.window_frames,
            spans,
        }
    }

    /// Source frame for every window offset, edge-repeated past the end.
    pub fn source_frames(&self, w: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.spans[w];
        (0..self.window_frames).map(move |o| s.start + o.min(s.valid - 1))
    }

    /// Reassembles per-window `[rows, window]` outputs into `[rows, N]`,
    /// averaging frames covered by more than one window.
    pub fn stitch(&self, outputs: &[Mat<f64>]) -> Result<Mat<f64>> {
        if outputs.len() != self.spans.len() {
            return Err(Error::shape(
                format!("{} windows", self.spans.len()),
                format!("{} windows", outputs.len()),
            ));
        }
        let rows = outputs.first().map_or(0, |m| m.rows);
        let mut acc = Mat::zeros(rows, self.n_frames);
        let mut count = vec![0u32; self.n_frames];
        for (span, out) in self.spans.iter().zip(outputs) {
            if out.rows != rows || out.cols < span.valid {
                return Err(Error::shape(
                    format!("{rows}x{} window output", self.window_frames),
                    format!("{}x{}", out.rows, out.cols),
                ));
            }
            for o in 0..span.valid {
                let t = span.start + o;
                count[t] += 1;
                for r in 0..rows {
                    *acc.at_mut(r, t) += out.at(r, o);
                }
            }
        }
        for (t, &c) in count.iter().enumerate() {
            debug_assert!(c > 0, "frame {t} not covered");
            for r in 0..rows {
                *acc.at_mut(r, t) /= c as f64;
            }
        }
        Ok(acc)
    }

    /// How many windows write each frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_frames];
        for s in &self.spans {
            c[s.start..s.start + s.valid].iter_mut().for_each(|v| *v += 1);
        }
        c
    }
}

/// One model-ready window in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionWindow {
    pub session_id: String,
    pub index: usize,
    pub span: WindowSpan,
    /// `[channels, window]`
    pub imu: Option<Mat<f32>>,
    /// `[1, window, range, doppler]`
    pub radar: Option<Vol<f32>>,
    pub labels: Vec<ClassId>,
}

pub fn window_session(session: &MealSession, spec: &WindowSpec) -> Result<(Vec<SessionWindow>, StitchMap)> {
    spec.validate()?;
    let map = StitchMap::new(session.n_frames(), spec);
    let w = spec.window_frames;
    let mut windows = Vec::with_capacity(map.spans.len());
    for (i, span) in map.spans.iter().enumerate() {
        let frames: Vec<usize> = map.source_frames(i).collect();
        let imu = session.imu.as_ref().map(|imu| {
            let mut m = Mat::zeros(imu.n_channels(), w);
            for c in 0..imu.n_channels() {
                let ch = imu.channel(c);
                for (o, &t) in frames.iter().enumerate() {
                    *m.at_mut(c, o) = ch[t];
                }
            }
            m
        });
        let radar = session.radar.as_ref().map(|cube| {
            let (nr, nd) = (cube.n_range(), cube.n_doppler());
            let mut v = Vol::zeros(1, w, nr, nd);
            for r in 0..nr {
                for d in 0..nd {
                    let bin = cube.bin(r, d);
                    for (o, &t) in frames.iter().enumerate() {
                        v.data[(o * nr + r) * nd + d] = bin[t];
                    }
                }
            }
            v
        });
        windows.push(SessionWindow {
            session_id: session.session_id.clone(),
            index: i,
            span: *span,
            imu,
            radar,
            labels: frames.iter().map(|&t| session.labels.labels[t]).collect(),
        });
    }
    Ok((windows, map))
}

/// Per-channel IMU and global radar standardisation, fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub imu_mean: Vec<f64>,
    pub imu_std: Vec<f64>,
    pub radar_mean: f64,
    pub radar_std: f64,
}

impl Normalizer {
    pub fn identity(imu_channels: usize) -> Self {
        Normalizer {
            imu_mean: vec![0.0; imu_channels],
            imu_std: vec![1.0; imu_channels],
            radar_mean: 0.0,
            radar_std: 1.0,
        }
    }

    /// Statistics over the valid frames of the given windows.
    pub fn fit(windows: &[SessionWindow]) -> Self {
        let channels = windows.iter().find_map(|w| w.imu.as_ref().map(|m| m.rows)).unwrap_or(0);
        let mut s = vec![(0.0f64, 0.0f64, 0usize); channels];
        let (mut rs, mut rss, mut rn) = (0.0f64, 0.0f64, 0usize);
        for w in windows {
            if let Some(m) = &w.imu {
                for (c, acc) in s.iter_mut().enumerate().take(m.rows) {
                    for &v in &m.row(c)[..w.span.valid] {
                        acc.0 += v as f64;
                        acc.1 += (v as f64).powi(2);
                        acc.2 += 1;
                    }
                }
            }
            if let Some(v) = &w.radar {
                let per_frame = v.height * v.width;
                for &x in &v.data[..w.span.valid * per_frame] {
                    rs += x as f64;
                    rss += (x as f64).powi(2);
                    rn += 1;
                }
            }
        }
        let stats = |sum: f64, sq: f64, n: usize| -> (f64, f64) {
            if n == 0 {
                return (0.0, 1.0);
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            (mean, if std > 1e-8 { std } else { 1.0 })
        };
        let (imu_mean, imu_std) = s.iter().map(|&(a, b, n)| stats(a, b, n)).unzip();
        let (radar_mean, radar_std) = stats(rs, rss, rn);
        Normalizer {
            imu_mean,
            imu_std,
            radar_mean,
            radar_std,
        }
    }

    pub fn imu<T: Scalar>(&self, m: &Mat<f32>) -> Result<Mat<T>> {
        if m.rows != self.imu_mean.len() {
            return Err(Error::shape(
                format!("{} IMU channels", self.imu_mean.len()),
                format!("{} channels", m.rows),
            ));
        }
        let mut out = Mat::zeros(m.rows, m.cols);
        for c in 0..m.rows {
            let (mu, sd) = (self.imu_mean[c], self.imu_std[c]);
            for (o, &v) in out.row_mut(c).iter_mut().zip(m.row(c)) {
                *o = T::of((v as f64 - mu) / sd);
            }
        }
        Ok(out)
    }

    pub fn radar<T: Scalar>(&self, v: &Vol<f32>) -> Vol<T> {
        let mut out = Vol::zeros(v.channels, v.frames, v.height, v.width);
        for (o, &x) in out.data.iter_mut().zip(&v.data) {
            *o = T::of((x as f64 - self.radar_mean) / self.radar_std);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSequence;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn imu(channels: Vec<String>, n: usize, rate: f64, f: impl Fn(usize, usize) -> f32) -> ImuSequence {
        let c = channels.len();
        let data = (0..c).flat_map(|ch| (0..n).map(move |t| (ch, t))).map(|(ch, t)| f(ch, t)).collect();
        ImuSequence::new(channels, n, rate, data).unwrap()
    }

    #[test]
    fn resample_lengths_and_identity() {
        let s = imu(two_hand_channels(), 640, 64.0, |_, t| t as f32);
        assert_eq!(resample_imu(&s, 25.0).unwrap().n_frames(), 250);
        let long = imu(two_hand_channels(), 2560, 64.0, |_, _| 0.0);
        assert_eq!(resample_imu(&long, 25.0).unwrap().n_frames(), 1000);
        assert_eq!(resample_imu(&s, 64.0).unwrap(), s);
        assert!(resample_imu(&s, 100.0).is_err());
    }

    #[test]
    fn ramp_is_reproduced_on_target_grid() {
        let s = imu(hand_channels(Hand::Left), 640, 64.0, |_, t| (t as f64 / 64.0) as f32);
        let r = resample_imu(&s, 25.0).unwrap();
        for (k, &v) in r.channel(3).iter().enumerate() {
            assert!((v as f64 - k as f64 / 25.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fir_resampling_keeps_constants_and_length() {
        let s = imu(hand_channels(Hand::Right), 640, 64.0, |c, _| c as f32 + 0.5);
        let r = resample_imu_with(&s, 25.0, ResampleFilter::Fir).unwrap();
        assert_eq!(r.n_frames(), 250);
        for c in 0..6 {
            assert!(r.channel(c).iter().all(|&v| (v - (c as f32 + 0.5)).abs() < 1e-5));
        }
    }

    proptest! {
        #[test]
        fn resampling_stays_within_source_envelope(vals in prop::collection::vec(-100.0f32..100.0, 20..200)) {
            let n = vals.len();
            let s = imu(hand_channels(Hand::Left), n, 64.0, |_, t| vals[t]);
            let r = resample_imu(&s, 25.0).unwrap();
            let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for &v in r.channel(0) {
                prop_assert!(v >= lo - 1e-4 && v <= hi + 1e-4);
            }
        }

        #[test]
        fn windows_cover_every_frame(n in 1usize..3000, window in 1usize..1200, stride_frac in 0.05f64..1.0) {
            let stride = ((window as f64 * stride_frac).ceil() as usize).clamp(1, window);
            let spec = WindowSpec::new(window, stride).unwrap();
            let map = StitchMap::new(n, &spec);
            let cov = map.coverage();
            prop_assert!(cov.iter().all(|&c| c >= 1));
            if stride == window {
                prop_assert!(cov.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn concat_orders_left_then_right() {
        let l = imu(hand_channels(Hand::Left), 100, 25.0, |c, t| (c * 1000 + t) as f32);
        let r = imu(hand_channels(Hand::Right), 100, 25.0, |c, t| -((c * 1000 + t) as f32));
        let both = concat_hands(&l, &r).unwrap();
        assert_eq!((both.n_channels(), both.n_frames()), (12, 100));
        assert_eq!(&both.data()[..600], l.data());
        assert_eq!(both.channel_layout(), two_hand_channels().as_slice());
        let short = imu(hand_channels(Hand::Right), 99, 25.0, |_, _| 0.0);
        assert!(concat_hands(&l, &short).is_err());
        assert!(concat_hands(&r, &l).is_err());
    }

    #[test]
    fn clutter_removal_cases() {
        let constant = RdtCube::new(2, 3, 5, 25.0, vec![4.0; 30]).unwrap();
        assert!(remove_clutter(&constant).unwrap().data().iter().all(|&v| v == 0.0));
        let n = 10;
        let mut data = vec![1.0f32; 2 * 3 * n];
        let cube0 = RdtCube::new(2, 3, n, 25.0, data.clone()).unwrap();
        let idx = cube0.index(1, 2, 4);
        data[idx] += 5.0;
        let cube = RdtCube::new(2, 3, n, 25.0, data).unwrap();
        let out = remove_clutter(&cube).unwrap();
        let expected = 5.0 * (1.0 - 1.0 / n as f64);
        assert!((out.at(1, 2, 4) as f64 - expected).abs() < 1e-5);
        assert!(remove_clutter(&RdtCube::zeros(2, 2, 1, 25.0)).is_err());
    }

    proptest! {
        #[test]
        fn clutter_removal_is_nearly_idempotent(vals in prop::collection::vec(0.0f32..10.0, 40)) {
            let cube = RdtCube::new(2, 2, 10, 25.0, vals).unwrap();
            let once = remove_clutter(&cube).unwrap();
            let twice = remove_clutter(&once).unwrap();
            // the second pass subtracts the (nonnegative) mean of the residuals
            for r in 0..2 {
                for d in 0..2 {
                    let mean = once.bin(r, d).iter().map(|&v| v as f64).sum::<f64>() / 10.0;
                    for (a, b) in once.bin(r, d).iter().zip(twice.bin(r, d)) {
                        prop_assert!(((*a as f64 - mean).max(0.0) - *b as f64).abs() < 1e-4);
                        prop_assert!(*b <= *a + 1e-6);
                    }
                }
            }
        }
    }

    fn session(n: usize) -> MealSession {
        let labels: Vec<ClassId> = (0..n).map(|t| ClassId::from_index((t / 7) % 3).unwrap()).collect();
        let imu = imu(two_hand_channels(), n, 25.0, |c, t| (c * 10_000 + t) as f32);
        let mut cube = RdtCube::zeros(4, 2, n, 25.0);
        for r in 0..4 {
            for d in 0..2 {
                cube.bin_mut(r, d).iter_mut().enumerate().for_each(|(t, v)| *v = (t * 8 + r * 2 + d) as f32);
            }
        }
        MealSession::new("s", Some(cube), Some(imu), LabelSequence::new(labels, 25.0), BTreeMap::new()).unwrap()
    }

    #[test]
    fn twenty_five_hundred_frames_make_three_windows() {
        let s = session(2500);
        let (w, map) = window_session(&s, &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(map.spans[2], WindowSpan { start: 2000, valid: 500 });
        let last = &w[2];
        let imu = last.imu.as_ref().unwrap();
        // padded tail repeats frame 2499
        assert!((500..1000).all(|o| imu.at(0, o) == 2499.0));
        assert!((500..1000).all(|o| last.labels[o] == s.labels.labels[2499]));
        let radar = last.radar.as_ref().unwrap();
        assert_eq!(radar.data[radar.idx(0, 10, 3, 1)], ((2010 * 8) + 3 * 2 + 1) as f32);
        let outputs: Vec<Mat<f64>> = w
            .iter()
            .map(|win| Mat::from_vec(1, 1000, (0..1000).map(|o| (win.span.start + o) as f64).collect()))
            .collect();
        let stitched = map.stitch(&outputs).unwrap();
        assert_eq!(stitched.cols, 2500);
        assert!(stitched.data.iter().enumerate().all(|(t, &v)| v == t as f64));
        assert!(map.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn exact_fit_has_no_padding() {
        let (w, map) = window_session(&session(1000), &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(map.spans[0], WindowSpan { start: 0, valid: 1000 });
    }

    #[test]
    fn overlapping_windows_average() {
        let spec = WindowSpec::new(4, 2).unwrap();
        let map = StitchMap::new(6, &spec);
        assert_eq!(map.spans.len(), 2);
        let a = Mat::from_vec(1, 4, vec![1.0; 4]);
        let b = Mat::from_vec(1, 4, vec![3.0; 4]);
        assert_eq!(map.stitch(&[a, b]).unwrap().data, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(WindowSpec::new(4, 5).is_err());
        assert!(WindowSpec::new(4, 0).is_err());
    }

    #[test]
    fn normalizer_standardises_training_windows() {
        let (w, _) = window_session(&session(300), &WindowSpec::new(100, 100).unwrap()).unwrap();
        let norm = Normalizer::fit(&w);
        let mut all = Vec::new();
        for win in &w {
            let m = norm.imu::<f64>(win.imu.as_ref().unwrap()).unwrap();
            all.extend_from_slice(m.row(5));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}
