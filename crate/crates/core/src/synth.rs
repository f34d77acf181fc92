//! Seeded generator of paired radar and dual-wrist IMU meal sessions.
//!
//! Gestures follow a renewal process with moment-matched lognormal
//! durations. The IMU renders each gesture as a raise/hold/lower rotation
//! of the acting wrist (gravity projection on the accelerometer, angular
//! rates on the gyroscope); the radar renders a Gaussian blob that moves
//! inward in range with positive-then-negative Doppler. Non-gesture
//! activity appears as low-amplitude coloured-noise bursts.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use sha2::{Digest, Sha256};

use crate::data::save_session;
use crate::data::{
    two_hand_channels, ClassId, EatingStyle, Hand, ImuSequence, LabelSequence, MealSession, RdtCube, FRAME_RATE_HZ,
    N_DOPPLER, N_RANGE,
};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::preprocess::resample_imu;

pub const IMU_SOURCE_HZ: f64 = 64.0;
const GRAVITY: f64 = 9.81;
const RANGE_BIN_M: f64 = 1.28 / N_RANGE as f64;
const DOPPLER_BIN_MPS: f64 = 2.56 / N_DOPPLER as f64;
/// Shortest Other stretch between consecutive gestures.
const MIN_GAP_S: f64 = 0.8;
const MIN_GESTURE_S: f64 = 1.0;

/// Per-class multipliers of gesture amplitude, indexed by class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degradation {
    pub radar_gain: [f64; 3],
    pub imu_gain: [f64; 3],
    /// Replace the channels of the wrist that eats less often with zeros.
    pub zero_non_dominant_imu: bool,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation {
            radar_gain: [1.0; 3],
            imu_gain: [1.0; 3],
            zero_non_dominant_imu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Gestures per minute.
    pub eat_rate: f64,
    pub drink_rate: f64,
    pub eat_dur_mean: f64,
    pub eat_dur_std: f64,
    pub drink_dur_mean: f64,
    pub drink_dur_std: f64,
    pub imu_noise_std: f64,
    pub radar_noise_std: f64,
    /// Bursts of non-gesture movement per minute.
    pub other_rate: f64,
    pub eating_style: EatingStyle,
    pub dominant_hand: Hand,
    pub degradation: Degradation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            duration_s: 120.0,
            eat_rate: 6.0,
            drink_rate: 1.5,
            eat_dur_mean: 3.07,
            eat_dur_std: 1.42,
            drink_dur_mean: 5.32,
            drink_dur_std: 2.42,
            imu_noise_std: 0.15,
            radar_noise_std: 0.1,
            other_rate: 3.0,
            eating_style: EatingStyle::ForkKnife,
            dominant_hand: Hand::Right,
            degradation: Degradation::default(),
        }
    }
}

impl SynthConfig {
    /// Radar loses most of its drinking signal and only the dominant wrist
    /// is instrumented, so each modality misses gestures the other sees.
    pub fn complementary() -> Self {
        SynthConfig {
            duration_s: 80.0,
            eat_rate: 6.0,
            drink_rate: 3.0,
            degradation: Degradation {
                radar_gain: [1.0, 1.0, 0.05],
                imu_gain: [1.0; 3],
                zero_non_dominant_imu: true,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration_s", self.duration_s),
            ("eat_dur_mean", self.eat_dur_mean),
            ("eat_dur_std", self.eat_dur_std),
            ("drink_dur_mean", self.drink_dur_mean),
            ("drink_dur_std", self.drink_dur_std),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        let nonneg = [
            ("eat_rate", self.eat_rate),
            ("drink_rate", self.drink_rate),
            ("imu_noise_std", self.imu_noise_std),
            ("radar_noise_std", self.radar_noise_std),
            ("other_rate", self.other_rate),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be nonnegative"));
            }
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 19] = [
        "seed",
        "duration_s",
        "eat_rate",
        "drink_rate",
        "eat_dur_mean",
        "eat_dur_std",
        "drink_dur_mean",
        "drink_dur_std",
        "imu_noise_std",
        "radar_noise_std",
        "other_rate",
        "eating_style",
        "dominant_hand",
        "radar_gain",
        "imu_gain",
        "zero_non_dominant_imu",
        "preset",
        "sessions",
        "dataset_seed",
    ];

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("seed", self.seed);
        doc.set("duration_s", self.duration_s);
        doc.set("eat_rate", self.eat_rate);
        doc.set("drink_rate", self.drink_rate);
        doc.set("eat_dur_mean", self.eat_dur_mean);
        doc.set("eat_dur_std", self.eat_dur_std);
        doc.set("drink_dur_mean", self.drink_dur_mean);
        doc.set("drink_dur_std", self.drink_dur_std);
        doc.set("imu_noise_std", self.imu_noise_std);
        doc.set("radar_noise_std", self.radar_noise_std);
        doc.set("other_rate", self.other_rate);
        doc.set("eating_style", self.eating_style);
        doc.set("dominant_hand", self.dominant_hand);
        doc.set("radar_gain", join_list(&self.degradation.radar_gain));
        doc.set("imu_gain", join_list(&self.degradation.imu_gain));
        doc.set("zero_non_dominant_imu", self.degradation.zero_non_dominant_imu);
    }

    /// Reads overrides on top of `preset` (`default` or `complementary`).
    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        doc.check_keys(&Self::KEYS)?;
        let base = match doc.get("preset").unwrap_or("default") {
            "default" => SynthConfig::default(),
            "complementary" => SynthConfig::complementary(),
            other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        let gains = |key: &str, d: [f64; 3]| -> Result<[f64; 3]> {
            match doc.parse_list::<f64>(key)? {
                None => Ok(d),
                Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                Some(_) => Err(Error::config(key, "expected three per-class values")),
            }
        };
        let cfg = SynthConfig {
            seed: doc.parse_value("seed")?.unwrap_or(base.seed),
            duration_s: doc.parse_value("duration_s")?.unwrap_or(base.duration_s),
            eat_rate: doc.parse_value("eat_rate")?.unwrap_or(base.eat_rate),
            drink_rate: doc.parse_value("drink_rate")?.unwrap_or(base.drink_rate),
            eat_dur_mean: doc.parse_value("eat_dur_mean")?.unwrap_or(base.eat_dur_mean),
            eat_dur_std: doc.parse_value("eat_dur_std")?.unwrap_or(base.eat_dur_std),
            drink_dur_mean: doc.parse_value("drink_dur_mean")?.unwrap_or(base.drink_dur_mean),
            drink_dur_std: doc.parse_value("drink_dur_std")?.unwrap_or(base.drink_dur_std),
            imu_noise_std: doc.parse_value("imu_noise_std")?.unwrap_or(base.imu_noise_std),
            radar_noise_std: doc.parse_value("radar_noise_std")?.unwrap_or(base.radar_noise_std),
            other_rate: doc.parse_value("other_rate")?.unwrap_or(base.other_rate),
            eating_style: doc.parse_value("eating_style")?.unwrap_or(base.eating_style),
            dominant_hand: doc.parse_value("dominant_hand")?.unwrap_or(base.dominant_hand),
            degradation: Degradation {
                radar_gain: gains("radar_gain", base.degradation.radar_gain)?,
                imu_gain: gains("imu_gain", base.degradation.imu_gain)?,
                zero_non_dominant_imu: doc
                    .parse_value("zero_non_dominant_imu")?
                    .unwrap_or(base.degradation.zero_non_dominant_imu),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(mu, sigma)` of the lognormal with the given mean and standard deviation.
pub fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let s2 = (1.0 + (std * std) / (mean * mean)).ln();
    (mean.ln() - 0.5 * s2, s2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    start_s: f64,
    end_s: f64,
    class: ClassId,
    hand: Hand,
    gain: f64,
    /// Per-gesture variation of kinematics.
    jitter: f64,
}

/// Frame-aligned gesture schedule; gaps of at least `MIN_GAP_S` separate gestures.
fn schedule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let rate = cfg.eat_rate + cfg.drink_rate;
    if rate == 0.0 {
        return Vec::new();
    }
    let (em, es) = lognormal_params(cfg.eat_dur_mean, cfg.eat_dur_std);
    let (dm, ds) = lognormal_params(cfg.drink_dur_mean, cfg.drink_dur_std);
    let eat = LogNormal::new(em, es).expect("valid lognormal");
    let drink = LogNormal::new(dm, ds).expect("valid lognormal");
    let mean_dur = (cfg.eat_rate * cfg.eat_dur_mean + cfg.drink_rate * cfg.drink_dur_mean) / rate;
    let mean_gap = (60.0 / rate - mean_dur).max(MIN_GAP_S + 0.5);
    let gap = Exp::new(1.0 / (mean_gap - MIN_GAP_S).max(0.1)).expect("valid rate");
    let snap = |s: f64| (s * FRAME_RATE_HZ).round() / FRAME_RATE_HZ;
    let mut out = Vec::new();
    let mut t = snap(gap.sample(rng) * rng.random_range(0.2..1.0));
    loop {
        let drinking = rng.random_range(0.0..rate) < cfg.drink_rate;
        let dur = snap(if drinking { drink.sample(rng) } else { eat.sample(rng) }.max(MIN_GESTURE_S));
        if t + dur > cfg.duration_s - 0.2 {
            break;
        }
        let class = if drinking { ClassId::Drinking } else { ClassId::Eating };
        let hand = acting_hand(class, cfg.eating_style, cfg.dominant_hand, rng);
        out.push(Event {
            start_s: t,
            end_s: t + dur,
            class,
            hand,
            gain: rng.random_range(0.8..1.2),
            jitter: rng.random_range(-1.0..1.0),
        });
        t = snap(t + dur + MIN_GAP_S + gap.sample(rng));
    }
    out
}

fn acting_hand(class: ClassId, style: EatingStyle, dominant: Hand, rng: &mut ChaCha8Rng) -> Hand {
    let p_dominant = match (class, style) {
        (ClassId::Drinking, _) => 0.85,
        // the fork usually sits in the non-dominant hand
        (_, EatingStyle::ForkKnife) => 0.25,
        (_, EatingStyle::Hand) => 0.7,
        _ => 0.95,
    };
    if rng.random_bool(p_dominant) {
        dominant
    } else {
        dominant.other()
    }
}

/// Raise/hold/lower envelope in `[0, 1]` and its time derivative (1/s).
fn envelope(t: f64, start: f64, end: f64) -> (f64, f64) {
    let dur = end - start;
    let ramp = (0.3 * dur).min(0.8);
    let u = t - start;
    if u < 0.0 || u > dur {
        (0.0, 0.0)
    } else if u < ramp {
        let x = PI * u / ramp;
        (0.5 * (1.0 - x.cos()), 0.5 * PI / ramp * x.sin())
    } else if u > dur - ramp {
        let x = PI * (u - (dur - ramp)) / ramp;
        (0.5 * (1.0 + x.cos()), -0.5 * PI / ramp * x.sin())
    } else {
        (1.0, 0.0)
    }
}

/// Wrist orientation angles (roll, pitch, yaw) in degrees for one gesture.
fn gesture_angles(ev: &Event, style: EatingStyle, t: f64) -> [f64; 3] {
    let (b, _) = envelope(t, ev.start_s, ev.end_s);
    if b == 0.0 {
        return [0.0; 3];
    }
    let u = t - ev.start_s;
    let k = 1.0 + 0.15 * ev.jitter;
    match ev.class {
        ClassId::Drinking => {
            // lift the cup, then tilt it during the hold
            let hold = ((b - 0.6) / 0.4).clamp(0.0, 1.0);
            [65.0 * k * hold, 45.0 * k * b, -10.0 * b]
        }
        _ => {
            let wobble = match style {
                EatingStyle::Chopsticks => 8.0 * (2.0 * PI * 4.0 * u).sin(),
                EatingStyle::Spoon => 12.0 * (2.0 * PI * 1.2 * u).sin(),
                EatingStyle::Hand => 15.0 * (2.0 * PI * 0.8 * u).sin(),
                EatingStyle::ForkKnife => 6.0 * (2.0 * PI * 2.0 * u).sin(),
            };
            [wobble * b, 80.0 * k * b, 25.0 * k * b]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Burst {
    start_s: f64,
    end_s: f64,
    range_m: f64,
    amp: f64,
    /// Slow sway per axis: (frequency Hz, phase).
    sway: [(f64, f64); 3],
}

impl Burst {
    fn sway(&self, t: f64, k: usize) -> f64 {
        let (f, p) = self.sway[k];
        (2.0 * PI * f * (t - self.start_s) + p).sin()
    }
}

/// Non-gesture movement bursts placed inside the gaps between gestures.
fn other_bursts(cfg: &SynthConfig, events: &[Event], rng: &mut ChaCha8Rng) -> Vec<Burst> {
    let mut out = Vec::new();
    if cfg.other_rate == 0.0 {
        return out;
    }
    let mut edges = vec![0.0];
    for e in events {
        edges.push(e.start_s);
        edges.push(e.end_s);
    }
    edges.push(cfg.duration_s);
    for gap in edges.chunks(2) {
        let (a, b) = (gap[0] + 0.3, gap[1] - 0.3);
        if b - a < 1.0 {
            continue;
        }
        let expected = (b - a) / 60.0 * cfg.other_rate;
        if rng.random_bool(expected.min(0.9)) {
            let len = rng.random_range(1.0..=(b - a).min(4.0));
            let start = rng.random_range(a..=(b - len));
            out.push(Burst {
                start_s: start,
                end_s: start + len,
                range_m: rng.random_range(0.4..0.9),
                amp: rng.random_range(0.15..0.3),
                sway: std::array::from_fn(|_| (rng.random_range(0.3..1.0), rng.random_range(0.0..2.0 * PI))),
            });
        }
    }
    out
}

fn render_imu(cfg: &SynthConfig, events: &[Event], bursts: &[Burst], rng: &mut ChaCha8Rng) -> Result<ImuSequence> {
    let n = (cfg.duration_s * IMU_SOURCE_HZ).round() as usize;
    let dt = 1.0 / IMU_SOURCE_HZ;
    let noise = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut data = vec![0f32; 12 * n];
    for (h, hand) in [Hand::Left, Hand::Right].into_iter().enumerate() {
        let mine: Vec<&Event> = events.iter().filter(|e| e.hand == hand).collect();
        let theirs: Vec<&Event> = events.iter().filter(|e| e.hand != hand).collect();
        let mut prev = [0.0f64; 3];
        for i in 0..n {
            let t = i as f64 * dt;
            let mut ang = [0.0f64; 3];
            for e in &mine {
                if t >= e.start_s && t <= e.end_s {
                    let g = e.gain * cfg.degradation.imu_gain[e.class.index()];
                    let a = gesture_angles(e, cfg.eating_style, t);
                    (0..3).for_each(|k| ang[k] += g * a[k]);
                }
            }
            // the idle hand still moves a little (cutting, steadying the plate)
            for e in &theirs {
                if t >= e.start_s && t <= e.end_s && e.class == ClassId::Eating {
                    let (b, _) = envelope(t, e.start_s, e.end_s);
                    ang[1] += 8.0 * b * (2.0 * PI * 1.5 * (t - e.start_s)).sin();
                }
            }
            for bu in bursts {
                if t >= bu.start_s && t <= bu.end_s {
                    let (b, _) = envelope(t, bu.start_s, bu.end_s);
                    (0..3).for_each(|k| ang[k] += 40.0 * bu.amp * b * bu.sway(t, k));
                }
            }
            let (roll, pitch) = (ang[0].to_radians(), ang[1].to_radians());
            let acc = [
                GRAVITY * pitch.sin(),
                GRAVITY * pitch.cos() * roll.sin(),
                GRAVITY * pitch.cos() * roll.cos(),
            ];
            let gyr: [f64; 3] = std::array::from_fn(|k| if i == 0 { 0.0 } else { (ang[k] - prev[k]) / dt });
            prev = ang;
            for k in 0..3 {
                let a = acc[k] + cfg.imu_noise_std * noise.sample(rng);
                let g = gyr[k] + 10.0 * cfg.imu_noise_std * noise.sample(rng);
                data[(h * 6 + k) * n + i] = a as f32;
                data[(h * 6 + 3 + k) * n + i] = g as f32;
            }
        }
    }
    if cfg.degradation.zero_non_dominant_imu {
        // the hand that eats more often counts as dominant here
        let eats = |hand: Hand| events.iter().filter(|e| e.hand == hand && e.class == ClassId::Eating).count();
        let dominant = match eats(Hand::Left).cmp(&eats(Hand::Right)) {
            std::cmp::Ordering::Greater => Hand::Left,
            std::cmp::Ordering::Less => Hand::Right,
            std::cmp::Ordering::Equal => cfg.dominant_hand,
        };
        let h = match dominant {
            Hand::Left => 1,
            Hand::Right => 0,
        };
        data[h * 6 * n..(h + 1) * 6 * n].iter_mut().for_each(|v| *v = 0.0);
    }
    let raw = ImuSequence::new(two_hand_channels(), n, IMU_SOURCE_HZ, data)?;
    resample_imu(&raw, FRAME_RATE_HZ)
}

fn render_radar(cfg: &SynthConfig, events: &[Event], bursts: &[Burst], n: usize, rng: &mut ChaCha8Rng) -> Result<RdtCube> {
    let (nr, nd) = (N_RANGE, N_DOPPLER);
    let mut cube = RdtCube::zeros(nr, nd, n, FRAME_RATE_HZ);
    let noise = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    // static reflectors: table edge, plate, torso
    let clutter: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(2.0..30.0), rng.random_range(1.0..3.0)))
        .collect();
    let d0 = nd as f64 / 2.0;
    let mut frame = vec![0f64; nr * nd];
    let blob = |frame: &mut [f64], range_m: f64, v_mps: f64, amp: f64, sr: f64, sd: f64| {
        let rc = range_m / RANGE_BIN_M;
        let dc = d0 + v_mps / DOPPLER_BIN_MPS;
        for r in 0..nr {
            let wr = (-0.5 * ((r as f64 - rc) / sr).powi(2)).exp();
            if wr < 1e-4 {
                continue;
            }
            for d in 0..nd {
                let wd = (-0.5 * ((d as f64 - dc) / sd).powi(2)).exp();
                frame[r * nd + d] += amp * wr * wd;
            }
        }
    };
    for t in 0..n {
        let ts = t as f64 / FRAME_RATE_HZ;
        frame.iter_mut().for_each(|v| *v = 0.0);
        for &(r, a) in &clutter {
            blob(&mut frame, r * RANGE_BIN_M, 0.0, a, 0.8, 0.7);
        }
        for e in events {
            if ts < e.start_s || ts > e.end_s {
                continue;
            }
            let (b, db) = envelope(ts, e.start_s, e.end_s);
            let ramp = (0.3 * (e.end_s - e.start_s)).min(0.8);
            let db_max = 0.5 * PI / ramp;
            let amp = 1.5 * e.gain * cfg.degradation.radar_gain[e.class.index()] * (0.3 + 0.7 * b);
            let u = ts - e.start_s;
            let (depth, micro, width) = match e.class {
                ClassId::Drinking => (0.30 + 0.03 * e.jitter, 0.0, 2.2),
                _ => (0.23 + 0.03 * e.jitter, 0.12 * (2.0 * PI * 2.0 * u).sin() * b, 1.2),
            };
            let range = 0.55 - depth * b;
            let v = 0.4 * db / db_max + micro;
            blob(&mut frame, range, v, amp, width, 1.5);
            if e.class == ClassId::Drinking && b > 0.6 {
                // tilted cup and head: a weaker, wider return nearer the sensor
                blob(&mut frame, range - 0.08, -0.05, 0.5 * amp, 3.0, 3.0);
            }
        }
        for bu in bursts {
            if ts >= bu.start_s && ts <= bu.end_s {
                let (b, _) = envelope(ts, bu.start_s, bu.end_s);
                let v = 0.3 * bu.sway(ts, 0);
                blob(&mut frame, bu.range_m, v, 2.0 * bu.amp * b, 1.5, 2.5);
            }
        }
        for r in 0..nr {
            for d in 0..nd {
                let v = frame[r * nd + d] + cfg.radar_noise_std * noise.sample(rng).abs();
                let idx = cube.index(r, d, t);
                cube.data_mut()[idx] = v as f32;
            }
        }
    }
    Ok(cube)
}

pub fn generate_session(cfg: &SynthConfig) -> Result<MealSession> {
    generate_named(cfg, &format!("synth_{:016x}", cfg.seed))
}

fn generate_named(cfg: &SynthConfig, session_id: &str) -> Result<MealSession> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sched_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut imu_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut radar_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let events = schedule(cfg, &mut sched_rng);
    if events.is_empty() && cfg.eat_rate + cfg.drink_rate > 0.0 {
        warn!(
            "session {session_id}: {} s is too short to fit a gesture at the configured rates",
            cfg.duration_s
        );
    }
    let bursts = other_bursts(cfg, &events, &mut sched_rng);
    let imu = render_imu(cfg, &events, &bursts, &mut imu_rng)?;
    let n = imu.n_frames();
    let radar = render_radar(cfg, &events, &bursts, n, &mut radar_rng)?;
    let mut labels = vec![ClassId::Other; n];
    for e in &events {
        let a = (e.start_s * FRAME_RATE_HZ).round() as usize;
        let b = ((e.end_s * FRAME_RATE_HZ).round() as usize).min(n);
        labels[a..b].iter_mut().for_each(|l| *l = e.class);
    }
    let mut meta = BTreeMap::new();
    meta.insert("eating_style".to_string(), cfg.eating_style.to_string());
    meta.insert("dominant_hand".to_string(), cfg.dominant_hand.to_string());
    meta.insert("participant_id".to_string(), session_id.to_string());
    meta.insert("synth_seed".to_string(), cfg.seed.to_string());
    MealSession::new(session_id, Some(radar), Some(imu), LabelSequence::new(labels, FRAME_RATE_HZ), meta)
}

/// Per-session configs for a dataset: seeds derived from the master seed,
/// eating styles cycled, dominant hand drawn (mostly right).
pub fn dataset_configs(template: &SynthConfig, n_sessions: usize, seed: u64) -> Vec<(String, SynthConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sessions)
        .map(|i| {
            let mut cfg = template.clone();
            cfg.seed = rng.random();
            cfg.eating_style = EatingStyle::ALL[i % EatingStyle::ALL.len()];
            cfg.dominant_hand = if rng.random_bool(0.85) { Hand::Right } else { Hand::Left };
            (format!("meal_{:03}", i + 1), cfg)
        })
        .collect()
}

/// In-memory dataset.
pub fn generate_sessions(template: &SynthConfig, n_sessions: usize, seed: u64) -> Result<Vec<MealSession>> {
    if n_sessions == 0 {
        return Err(Error::InvalidArgument("n_sessions must be at least 1".into()));
    }
    dataset_configs(template, n_sessions, seed)
        .iter()
        .map(|(id, cfg)| generate_named(cfg, id))
        .collect()
}

/// Writes one directory per session under `out_dir` plus `dataset.txt`.
pub fn generate_dataset(template: &SynthConfig, n_sessions: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if n_sessions == 0 {
        return Err(Error::InvalidArgument("n_sessions must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut dirs = Vec::with_capacity(n_sessions);
    for (id, cfg) in dataset_configs(template, n_sessions, seed) {
        let session = generate_named(&cfg, &id)?;
        let dir = out_dir.join(&id);
        save_session(&session, &dir)?;
        dirs.push(dir);
    }
    let mut manifest = KvDoc::new();
    manifest.set("dataset_seed", seed);
    manifest.set("sessions", n_sessions);
    template.write_kv(&mut manifest);
    manifest.remove("seed");
    manifest.remove("eating_style");
    manifest.remove("dominant_hand");
    manifest.write(&out_dir.join("dataset.txt"))?;
    Ok(dirs)
}

/// SHA-256 over every file below `dir`, in sorted relative-path order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("child of root").to_path_buf());
        }
    }
    Ok(())
}
