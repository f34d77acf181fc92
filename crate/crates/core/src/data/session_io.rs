//! Session directory layout: `radar.rdt`, `imu.bin`, `labels.csv`, `meta.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use super::mmgf::{self, RawTensor};
use super::{runs, ClassId, ImuSequence, LabelSequence, MealSession, RdtCube};
use crate::error::{Error, Result};
use crate::kv::KvDoc;

pub const RADAR_FILE: &str = "radar.rdt";
pub const IMU_FILE: &str = "imu.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.txt";

const KEY_SESSION_ID: &str = "session_id";
const KEY_FRAME_RATE: &str = "frame_rate";
const KEY_RADAR_RATE: &str = "radar_frame_rate";
const KEY_IMU_RATE: &str = "imu_sample_rate";
const KEY_IMU_CHANNELS: &str = "imu_channels";
const RESERVED: [&str; 5] = [
    KEY_SESSION_ID,
    KEY_FRAME_RATE,
    KEY_RADAR_RATE,
    KEY_IMU_RATE,
    KEY_IMU_CHANNELS,
];

// Seconds are written with 3 decimals; this slack absorbs the decimal
// round-off before floor/ceil so that frame boundaries survive a round trip.
const FRAME_EPS: f64 = 1e-6;

pub fn save_session(session: &MealSession, dir: &Path) -> Result<()> {
    session.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let radar_path = dir.join(RADAR_FILE);
    match &session.radar {
        Some(cube) => {
            let raw = RawTensor::f32(
                vec![cube.n_range(), cube.n_doppler(), cube.n_frames()],
                cube.data().to_vec(),
            );
            mmgf::write_file(&radar_path, &raw)?;
        }
        None => remove_if_exists(&radar_path)?,
    }

    let imu_path = dir.join(IMU_FILE);
    match &session.imu {
        Some(imu) => {
            let raw = RawTensor::f32(vec![imu.n_channels(), imu.n_frames()], imu.data().to_vec());
            mmgf::write_file(&imu_path, &raw)?;
        }
        None => remove_if_exists(&imu_path)?,
    }

    let labels_path = dir.join(LABELS_FILE);
    std::fs::write(&labels_path, labels_to_csv(&session.labels))
        .map_err(|e| Error::io(&labels_path, e))?;

    let mut meta = KvDoc::new();
    meta.set(KEY_SESSION_ID, &session.session_id);
    meta.set(KEY_FRAME_RATE, session.labels.frame_rate);
    if let Some(cube) = &session.radar {
        meta.set(KEY_RADAR_RATE, cube.frame_rate());
    }
    if let Some(imu) = &session.imu {
        meta.set(KEY_IMU_RATE, imu.sample_rate());
        meta.set(KEY_IMU_CHANNELS, imu.channel_layout().join(","));
    }
    for (k, v) in &session.meta {
        if RESERVED.contains(&k.as_str()) {
            return Err(Error::validation("meta", format!("key `{k}` is reserved")));
        }
        meta.set(k, v);
    }
    meta.write(&dir.join(META_FILE))
}

/// Every immediate subdirectory holding a `labels.csv`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<MealSession>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(LABELS_FILE).is_file() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::validation(dir.display().to_string(), "no session directories found"));
    }
    dirs.sort();
    dirs.iter().map(|d| load_session(d)).collect()
}

pub fn load_session(dir: &Path) -> Result<MealSession> {
    let meta_path = dir.join(META_FILE);
    let mut meta = if meta_path.exists() {
        KvDoc::read(&meta_path)?
    } else {
        KvDoc::new()
    };
    let session_id = meta
        .remove(KEY_SESSION_ID)
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let frame_rate = meta
        .parse_value::<f64>(KEY_FRAME_RATE)?
        .unwrap_or(super::FRAME_RATE_HZ);
    let radar_rate = meta.parse_value::<f64>(KEY_RADAR_RATE)?.unwrap_or(frame_rate);
    let imu_rate = meta.parse_value::<f64>(KEY_IMU_RATE)?.unwrap_or(frame_rate);
    let imu_channels: Option<Vec<String>> = meta.parse_list(KEY_IMU_CHANNELS)?;
    for k in RESERVED {
        meta.remove(k);
    }

    let labels_path = dir.join(LABELS_FILE);
    if !labels_path.exists() {
        return Err(Error::validation(
            "labels",
            format!("missing {}", labels_path.display()),
        ));
    }
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let labels = labels_from_csv(&text, frame_rate)?;

    let radar_path = dir.join(RADAR_FILE);
    let radar = if radar_path.exists() {
        let raw = mmgf::read_file(&radar_path)?;
        if raw.dims.len() != 3 {
            return Err(Error::format(RADAR_FILE, format!("expected rank 3, got {}", raw.dims.len())));
        }
        Some(
            RdtCube::new(raw.dims[0], raw.dims[1], raw.dims[2], radar_rate, raw.data.into_f32())
                .map_err(|e| prefix_field("radar", e))?,
        )
    } else {
        None
    };

    let imu_path = dir.join(IMU_FILE);
    let imu = if imu_path.exists() {
        let raw = mmgf::read_file(&imu_path)?;
        if raw.dims.len() != 2 {
            return Err(Error::format(IMU_FILE, format!("expected rank 2, got {}", raw.dims.len())));
        }
        let layout = match imu_channels {
            Some(l) => l,
            None if raw.dims[0] == 12 => super::two_hand_channels(),
            None => super::hand_channels(super::Hand::Left),
        };
        if layout.len() != raw.dims[0] {
            return Err(Error::validation(
                "imu.channels",
                format!("layout lists {} channels, tensor has {}", layout.len(), raw.dims[0]),
            ));
        }
        Some(
            ImuSequence::new(layout, raw.dims[1], imu_rate, raw.data.into_f32())
                .map_err(|e| prefix_field("imu", e))?,
        )
    } else {
        None
    };

    let meta: BTreeMap<String, String> = meta
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    MealSession::new(session_id, radar, imu, labels, meta)
}

fn prefix_field(field: &str, e: Error) -> Error {
    match e {
        Error::Shape { expected, actual } => Error::validation(
            field,
            format!("shape mismatch: expected {expected}, got {actual}"),
        ),
        other => other,
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Every maximal run, background included, so the row ends cover `[0, N)`.
pub fn labels_to_csv(labels: &LabelSequence) -> String {
    let mut out = String::from("start_s,end_s,label\n");
    for run in runs(&labels.labels) {
        let _ = writeln!(
            out,
            "{:.3},{:.3},{}",
            run.start_frame as f64 / labels.frame_rate,
            run.end_frame as f64 / labels.frame_rate,
            run.class_id
        );
    }
    out
}

pub fn labels_from_csv(text: &str, frame_rate: f64) -> Result<LabelSequence> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("start")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::validation(
                "labels",
                format!("line {}: expected start_s,end_s,label", lineno + 1),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::validation("labels", format!("line {}: bad time `{s}`", lineno + 1)))
        };
        let start_s = parse(fields[0])?;
        let end_s = parse(fields[1])?;
        let class: ClassId = fields[2].parse()?;
        let start = (start_s * frame_rate + FRAME_EPS).floor() as usize;
        let end = (end_s * frame_rate - FRAME_EPS).ceil() as usize;
        if end <= start {
            return Err(Error::validation(
                "labels",
                format!("line {}: empty or reversed interval", lineno + 1),
            ));
        }
        rows.push((start, end, class));
    }
    let n = rows.iter().map(|r| r.1).max().ok_or_else(|| {
        Error::validation("labels", "no label rows")
    })?;

    let gestures: Vec<_> = rows.iter().filter(|r| r.2 != ClassId::Other).collect();
    for (i, a) in gestures.iter().enumerate() {
        for b in &gestures[i + 1..] {
            if a.0 < b.1 && b.0 < a.1 {
                if a.2 == b.2 {
                    return Err(Error::validation(
                        "labels",
                        format!("overlapping {} segments at frames {}..{} and {}..{}", a.2, a.0, a.1, b.0, b.1),
                    ));
                }
                warn!(
                    "overlapping {} and {} segments at frames {}..{} / {}..{}; later row wins",
                    a.2, b.2, a.0, a.1, b.0, b.1
                );
            }
        }
    }

    let mut labels = vec![ClassId::Other; n];
    for &(start, end, class) in &rows {
        if class != ClassId::Other {
            for l in &mut labels[start..end] {
                *l = class;
            }
        }
    }
    Ok(LabelSequence::new(labels, frame_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{two_hand_channels, FRAME_RATE_HZ};
    use sha2::{Digest, Sha256};

    fn sample(n: usize, with_radar: bool) -> MealSession {
        let mut labels = vec![ClassId::Other; n];
        for l in &mut labels[n / 10..n / 3] {
            *l = ClassId::Eating;
        }
        labels[n / 2] = ClassId::Drinking;
        let radar = with_radar.then(|| {
            let data = (0..4 * 8 * n).map(|i| (i as f32 * 0.37).sin().abs()).collect();
            RdtCube::new(4, 8, n, FRAME_RATE_HZ, data).unwrap()
        });
        let imu_data = (0..12 * n).map(|i| (i as f32 * 1.3).cos() * 9.81).collect();
        let imu = ImuSequence::new(two_hand_channels(), n, FRAME_RATE_HZ, imu_data).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("eating_style".into(), "spoon".into());
        meta.insert("participant".into(), "p07".into());
        MealSession::new("s07", radar, Some(imu), LabelSequence::new(labels, FRAME_RATE_HZ), meta)
            .unwrap()
    }

    fn dir_hash(dir: &Path) -> String {
        let mut h = Sha256::new();
        for f in [RADAR_FILE, IMU_FILE, LABELS_FILE, META_FILE] {
            if let Ok(b) = std::fs::read(dir.join(f)) {
                h.update(f.as_bytes());
                h.update(&b);
            }
        }
        hex::encode(h.finalize())
    }

    #[test]
    fn round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sample(100, true);
        save_session(&s, tmp.path()).unwrap();
        for f in [RADAR_FILE, IMU_FILE, LABELS_FILE, META_FILE] {
            assert!(tmp.path().join(f).exists(), "{f}");
        }
        assert_eq!(load_session(tmp.path()).unwrap(), s);
    }

    #[test]
    fn absent_radar_stays_absent() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sample(60, false);
        save_session(&s, tmp.path()).unwrap();
        assert!(!tmp.path().join(RADAR_FILE).exists());
        assert_eq!(load_session(tmp.path()).unwrap().radar, None);
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = sample(80, true);
        save_session(&s, a.path()).unwrap();
        save_session(&s, b.path()).unwrap();
        assert_eq!(dir_hash(a.path()), dir_hash(b.path()));
    }

    #[test]
    fn label_length_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        save_session(&sample(100, true), tmp.path()).unwrap();
        // 99 frames of labels against 100 radar frames
        std::fs::write(tmp.path().join(LABELS_FILE), "start_s,end_s,label\n0.000,3.960,other\n").unwrap();
        let err = load_session(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        save_session(&sample(20, true), tmp.path()).unwrap();
        let p = tmp.path().join(RADAR_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_session(tmp.path()).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn nan_payload_names_field() {
        let tmp = tempfile::tempdir().unwrap();
        save_session(&sample(20, true), tmp.path()).unwrap();
        let raw = RawTensor::f32(vec![12, 20], vec![f32::NAN; 240]);
        mmgf::write_file(&tmp.path().join(IMU_FILE), &raw).unwrap();
        let err = load_session(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("imu"), "{err}");
    }

    #[test]
    fn missing_labels_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        save_session(&sample(20, true), tmp.path()).unwrap();
        std::fs::remove_file(tmp.path().join(LABELS_FILE)).unwrap();
        assert!(load_session(tmp.path()).unwrap_err().to_string().contains("labels"));
    }

    #[test]
    fn csv_rounding_rule() {
        // floor(start*fps), ceil(end*fps)
        let y = labels_from_csv("start_s,end_s,label\n0.050,0.130,eating\n0.130,0.200,other\n", 25.0).unwrap();
        assert_eq!(y.len(), 5);
        assert_eq!(y.labels[..4], [ClassId::Other, ClassId::Eating, ClassId::Eating, ClassId::Eating]);
    }

    #[test]
    fn overlapping_same_class_rows_rejected() {
        let err = labels_from_csv("0.0,1.0,eating\n0.5,1.5,eating\n", 25.0).unwrap_err();
        assert!(err.to_string().contains("overlapping"));
        let ok = labels_from_csv("0.0,1.0,eating\n0.5,1.5,drinking\n", 25.0).unwrap();
        assert_eq!(ok.labels[20], ClassId::Drinking);
    }
}
