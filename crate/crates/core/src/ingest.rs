//! SHL-style frame loading, reframing and label policies.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_MODES: usize = 8;

/// Native SHL challenge sampling rate.
pub const SHL_SAMPLE_RATE_HZ: f64 = 100.0;

/// The eight transportation modes, ids 1..=8 in SHL order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Still = 1,
    Walk = 2,
    Run = 3,
    Bike = 4,
    Car = 5,
    Bus = 6,
    Train = 7,
    Subway = 8,
}

impl Mode {
    pub const ALL: [Mode; NUM_MODES] = [
        Mode::Still,
        Mode::Walk,
        Mode::Run,
        Mode::Bike,
        Mode::Car,
        Mode::Bus,
        Mode::Train,
        Mode::Subway,
    ];

    pub fn from_id(id: u8) -> Option<Mode> {
        match id {
            1..=8 => Some(Mode::ALL[id as usize - 1]),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Still => "Still",
            Mode::Walk => "Walk",
            Mode::Run => "Run",
            Mode::Bike => "Bike",
            Mode::Car => "Car",
            Mode::Bus => "Bus",
            Mode::Train => "Train",
            Mode::Subway => "Subway",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sensor {
    Accelerometer,
    Gyroscope,
    Magnetometer,
}

impl Sensor {
    pub const ALL: [Sensor; 3] = [Sensor::Accelerometer, Sensor::Gyroscope, Sensor::Magnetometer];

    /// File prefix used by the SHL challenge distribution.
    pub fn shl_prefix(self) -> &'static str {
        match self {
            Sensor::Accelerometer => "Acc",
            Sensor::Gyroscope => "Gyr",
            Sensor::Magnetometer => "Mag",
        }
    }

    /// One-letter tag used in channel names.
    pub fn tag(self) -> &'static str {
        match self {
            Sensor::Accelerometer => "A",
            Sensor::Gyroscope => "G",
            Sensor::Magnetometer => "M",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn suffix(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    SubTrain,
    SubValidation,
    Test,
}

/// One fixed-length window of multi-axis samples with per-sample mode ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    samples: BTreeMap<(Sensor, Axis), Vec<f64>>,
    sample_rate_hz: f64,
    labels: Vec<u8>,
}

impl RawFrame {
    pub fn new(
        samples: BTreeMap<(Sensor, Axis), Vec<f64>>,
        sample_rate_hz: f64,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if samples.is_empty() {
            return Err(Error::invalid("frame has no sensor axes"));
        }
        let len = labels.len();
        if len == 0 {
            return Err(Error::invalid("frame has no samples"));
        }
        for (key, axis) in &samples {
            if axis.len() != len {
                return Err(Error::invalid(format!(
                    "axis {key:?} has {} samples but labels have {len}",
                    axis.len()
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| Mode::from_id(l).is_none()) {
            return Err(Error::invalid(format!("mode id {bad} outside 1..=8")));
        }
        Ok(RawFrame {
            samples,
            sample_rate_hz,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn axis(&self, sensor: Sensor, axis: Axis) -> Option<&[f64]> {
        self.samples.get(&(sensor, axis)).map(Vec::as_slice)
    }

    pub fn has_sensor(&self, sensor: Sensor) -> bool {
        Axis::ALL.iter().all(|&a| self.samples.contains_key(&(sensor, a)))
    }

    pub fn samples(&self) -> &BTreeMap<(Sensor, Axis), Vec<f64>> {
        &self.samples
    }

    /// Majority label of the whole frame.
    pub fn frame_label(&self) -> u8 {
        majority_label(&self.labels).expect("frames are never empty")
    }

    pub fn is_transition(&self) -> bool {
        self.labels.windows(2).any(|w| w[0] != w[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    frames: Vec<RawFrame>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(frames: Vec<RawFrame>, split: SplitTag) -> Result<Self> {
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate() {
                if f.len() != first.len() || f.sample_rate_hz != first.sample_rate_hz {
                    return Err(Error::invalid(format!(
                        "frame {i} has {} samples at {} Hz, expected {} at {} Hz",
                        f.len(),
                        f.sample_rate_hz,
                        first.len(),
                        first.sample_rate_hz
                    )));
                }
            }
        }
        Ok(Dataset { frames, split })
    }

    pub fn frames(&self) -> &[RawFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RawFrame> {
        self.frames
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_len(&self) -> Option<usize> {
        self.frames.first().map(RawFrame::len)
    }

    pub fn sample_rate_hz(&self) -> Option<f64> {
        self.frames.first().map(RawFrame::sample_rate_hz)
    }

    pub fn frame_labels(&self) -> Vec<u8> {
        self.frames.iter().map(RawFrame::frame_label).collect()
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }
}

/// Overrides for the SHL file names, keyed by `"Acc_x"`-style stems.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShlManifest {
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub sample_rate_hz: f64,
    pub require_labels: bool,
    #[serde(default)]
    pub manifest: ShlManifest,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            sample_rate_hz: SHL_SAMPLE_RATE_HZ,
            require_labels: true,
            manifest: ShlManifest::default(),
        }
    }
}

fn stem(sensor: Sensor, axis: Axis) -> String {
    format!("{}_{}", sensor.shl_prefix(), axis.suffix())
}

fn file_for(dir: &Path, manifest: &ShlManifest, stem: &str) -> PathBuf {
    match manifest.files.get(stem) {
        Some(name) => dir.join(name),
        None => dir.join(format!("{stem}.txt")),
    }
}

fn label_file(dir: &Path, manifest: &ShlManifest) -> PathBuf {
    dir.join(manifest.labels.as_deref().unwrap_or("Label.txt"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .enumerate()
            .map(|(tok, s)| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: ln + 1,
                    token: tok + 1,
                    message: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn check_geometry(path: &Path, rows: &[Vec<f64>], n_frames: usize, frame_len: usize) -> Result<()> {
    if rows.len() != n_frames {
        return Err(Error::Structure {
            path: path.to_path_buf(),
            line: None,
            message: format!("{} frames, expected {n_frames}", rows.len()),
        });
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != frame_len {
            return Err(Error::Structure {
                path: path.to_path_buf(),
                line: Some(i + 1),
                message: format!("{} values, expected {frame_len}", r.len()),
            });
        }
    }
    Ok(())
}

/// Load an SHL challenge style directory: one text file per sensor axis
/// (`Acc_x.txt`, ..., `Mag_z.txt`) holding one frame per line, plus
/// `Label.txt` in the same geometry.
///
/// Sensors whose three axis files are all absent are skipped; a partially
/// present sensor is a structure error.
pub fn load_shl(dir: &Path, split: SplitTag, opts: &LoadOptions) -> Result<Dataset> {
    if !(opts.sample_rate_hz > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let mut axes: BTreeMap<(Sensor, Axis), Vec<Vec<f64>>> = BTreeMap::new();
    let mut geometry: Option<(PathBuf, usize, usize)> = None;
    for sensor in Sensor::ALL {
        let paths: Vec<_> = Axis::ALL
            .iter()
            .map(|&a| (a, file_for(dir, &opts.manifest, &stem(sensor, a))))
            .collect();
        let present = paths.iter().filter(|(_, p)| p.is_file()).count();
        if present == 0 {
            continue;
        }
        if present != 3 {
            let missing = paths.iter().find(|(_, p)| !p.is_file()).unwrap();
            return Err(Error::Structure {
                path: missing.1.clone(),
                line: None,
                message: format!("missing axis file for {sensor:?}"),
            });
        }
        for (axis, path) in paths {
            let rows = parse_matrix(&path)?;
            match &geometry {
                None => {
                    let len = rows.first().map(Vec::len).unwrap_or(0);
                    if rows.is_empty() || len == 0 {
                        return Err(Error::Structure {
                            path: path.clone(),
                            line: None,
                            message: "file holds no frames".into(),
                        });
                    }
                    check_geometry(&path, &rows, rows.len(), len)?;
                    geometry = Some((path.clone(), rows.len(), len));
                }
                Some((_, n, len)) => check_geometry(&path, &rows, *n, *len)?,
            }
            axes.insert((sensor, axis), rows);
        }
    }
    let Some((_, n_frames, frame_len)) = geometry else {
        return Err(Error::Structure {
            path: dir.to_path_buf(),
            line: None,
            message: "no sensor files found".into(),
        });
    };

    let lpath = label_file(dir, &opts.manifest);
    let labels: Option<Vec<Vec<u8>>> = if lpath.is_file() {
        let rows = parse_matrix(&lpath)?;
        check_geometry(&lpath, &rows, n_frames, frame_len)?;
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let mut ids = Vec::with_capacity(row.len());
            for (j, v) in row.into_iter().enumerate() {
                if v.fract() != 0.0 || !(1.0..=8.0).contains(&v) {
                    return Err(Error::Parse {
                        path: lpath.clone(),
                        line: i + 1,
                        token: j + 1,
                        message: format!("label {v} is not a mode id in 1..=8"),
                    });
                }
                ids.push(v as u8);
            }
            out.push(ids);
        }
        Some(out)
    } else if opts.require_labels {
        return Err(Error::Structure {
            path: lpath,
            line: None,
            message: "label file missing".into(),
        });
    } else {
        None
    };

    let mut per_axis: Vec<((Sensor, Axis), std::vec::IntoIter<Vec<f64>>)> =
        axes.into_iter().map(|(k, v)| (k, v.into_iter())).collect();
    let mut label_rows = labels.map(Vec::into_iter);
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let samples = per_axis
            .iter_mut()
            .map(|(k, it)| (*k, it.next().expect("geometry checked")))
            .collect();
        // Unlabeled test data gets a placeholder label that is never scored.
        let lab = match label_rows.as_mut() {
            Some(it) => it.next().expect("geometry checked"),
            None => vec![Mode::Still.id(); frame_len],
        };
        frames.push(RawFrame::new(samples, opts.sample_rate_hz, lab)?);
    }
    Dataset::new(frames, split)
}

/// Write a dataset in the layout [`load_shl`] reads. Values use the shortest
/// representation that round-trips exactly.
pub fn write_shl(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let Some(first) = ds.frames.first() else {
        return Err(Error::invalid("cannot write an empty dataset"));
    };
    let keys: Vec<(Sensor, Axis)> = first.samples.keys().copied().collect();
    for key in keys {
        let path = dir.join(format!("{}.txt", stem(key.0, key.1)));
        write_rows(&path, ds.frames.iter().map(|f| f.samples[&key].iter().map(|v| v.to_string())))?;
    }
    write_rows(
        &dir.join("Label.txt"),
        ds.frames.iter().map(|f| f.labels.iter().map(|v| v.to_string())),
    )
}

fn write_rows<R, I>(path: &Path, rows: R) -> Result<()>
where
    R: Iterator<Item = I>,
    I: Iterator<Item = String>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = row.collect::<Vec<_>>().join(" ");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Window lengths (seconds) that split a frame of `frame_len` samples exactly,
/// longest first, excluding the full frame.
pub fn valid_windows(frame_len: usize, sample_rate_hz: f64) -> Vec<f64> {
    (1..frame_len)
        .rev()
        .filter(|d| frame_len % d == 0)
        .map(|d| d as f64 / sample_rate_hz)
        .collect()
}

/// Samples per window when `window_s` splits a `frame_len` frame exactly
/// (the whole frame included).
pub fn window_samples(frame_len: usize, sample_rate_hz: f64, window_s: f64) -> Result<usize> {
    let samples = window_s * sample_rate_hz;
    let win = samples.round() as usize;
    if !(window_s > 0.0) || (samples - win as f64).abs() > 1e-9 || win == 0 || frame_len % win != 0 {
        return Err(Error::InvalidWindow {
            window_s,
            frame_s: frame_len as f64 / sample_rate_hz,
            valid: valid_windows(frame_len, sample_rate_hz),
        });
    }
    Ok(win)
}

/// Split every frame into consecutive non-overlapping sub-frames of
/// `window_s` seconds.
pub fn reframe(ds: &Dataset, window_s: f64) -> Result<Dataset> {
    let (Some(len), Some(rate)) = (ds.frame_len(), ds.sample_rate_hz()) else {
        return Ok(ds.clone());
    };
    let win = window_samples(len, rate, window_s)?;
    let pieces = len / win;
    let mut frames = Vec::with_capacity(ds.len() * pieces);
    for f in &ds.frames {
        for p in 0..pieces {
            let range = p * win..(p + 1) * win;
            let samples = f
                .samples
                .iter()
                .map(|(k, v)| (*k, v[range.clone()].to_vec()))
                .collect();
            frames.push(RawFrame {
                samples,
                sample_rate_hz: rate,
                labels: f.labels[range].to_vec(),
            });
        }
    }
    Dataset::new(frames, ds.split)
}

/// Most frequent mode id; ties go to the smallest id.
pub fn majority_label(labels: &[u8]) -> Result<u8> {
    if labels.is_empty() {
        return Err(Error::invalid("majority label of an empty sequence"));
    }
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut best = 0usize;
    for id in 1..256 {
        if counts[id] > counts[best] {
            best = id;
        }
    }
    // `best` is the first index reaching the maximum, i.e. the smallest id.
    Ok(best as u8)
}

/// Percentage of frames holding two or more distinct mode ids.
pub fn transition_ratio(ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("transition ratio of an empty dataset"));
    }
    let mixed = ds.frames.iter().filter(|f| f.is_transition()).count();
    Ok(100.0 * mixed as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(labels: Vec<u8>, rate: f64) -> RawFrame {
        let n = labels.len();
        let mut samples = BTreeMap::new();
        for s in Sensor::ALL {
            for a in Axis::ALL {
                let v = (0..n).map(|i| i as f64 * 0.5 + s as u8 as f64 - a as u8 as f64).collect();
                samples.insert((s, a), v);
            }
        }
        RawFrame::new(samples, rate, labels).unwrap()
    }

    #[test]
    fn mode_ids_are_a_bijection() {
        let names = ["Still", "Walk", "Run", "Bike", "Car", "Bus", "Train", "Subway"];
        for (i, name) in names.iter().enumerate() {
            let m = Mode::from_id(i as u8 + 1).unwrap();
            assert_eq!(m.name(), *name);
            assert_eq!(m.index(), i);
        }
        assert!(Mode::from_id(0).is_none());
        assert!(Mode::from_id(9).is_none());
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[3, 3, 3]).unwrap(), 3);
        assert_eq!(majority_label(&[1, 1, 2, 2, 2]).unwrap(), 2);
        assert_eq!(majority_label(&[1, 1, 2, 2]).unwrap(), 1);
        assert_eq!(majority_label(&[2, 2, 1, 1]).unwrap(), 1);
        assert!(majority_label(&[]).is_err());
    }

    #[test]
    fn rejects_bad_labels_and_rates() {
        let mut samples = BTreeMap::new();
        samples.insert((Sensor::Accelerometer, Axis::X), vec![0.0; 2]);
        assert!(RawFrame::new(samples.clone(), 100.0, vec![0, 1]).is_err());
        assert!(RawFrame::new(samples.clone(), 0.0, vec![1, 1]).is_err());
        assert!(RawFrame::new(samples, 100.0, vec![1, 1, 1]).is_err());
    }

    #[test]
    fn reframe_halves_and_errors_list_divisors() {
        let ds = Dataset::new(vec![frame(vec![1; 6000], 100.0); 3], SplitTag::Train).unwrap();
        let half = reframe(&ds, 30.0).unwrap();
        assert_eq!(half.len(), 6);
        let five = reframe(&ds, 5.0).unwrap();
        assert_eq!(five.len(), 36);
        assert!(five.frames().iter().all(|f| f.len() == 500));

        match reframe(&ds, 7.0) {
            Err(Error::InvalidWindow { valid, .. }) => {
                assert_eq!(&valid[..5], &[30.0, 20.0, 15.0, 12.0, 10.0]);
                assert!(valid.contains(&5.0));
            }
            other => panic!("expected InvalidWindow, got {other:?}"),
        }
    }

    #[test]
    fn transition_ratio_counts_mixed_frames() {
        let single = Dataset::new(vec![frame(vec![2; 10], 2.0); 4], SplitTag::Train).unwrap();
        assert_eq!(transition_ratio(&single).unwrap(), 0.0);
        let mut frames = vec![frame(vec![2; 10], 2.0); 3];
        frames.push(frame(vec![2, 2, 2, 2, 2, 5, 5, 5, 5, 5], 2.0));
        let ds = Dataset::new(frames, SplitTag::Train).unwrap();
        assert_eq!(transition_ratio(&ds).unwrap(), 25.0);
        assert!(transition_ratio(&Dataset::new(vec![], SplitTag::Test).unwrap()).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_geometry() {
        let frames = vec![frame(vec![1; 10], 2.0), frame(vec![1; 12], 2.0)];
        assert!(Dataset::new(frames, SplitTag::Train).is_err());
    }

    proptest! {
        #[test]
        fn majority_is_order_free(labels in proptest::collection::vec(1u8..=8, 1..60)) {
            let mut rev = labels.clone();
            rev.reverse();
            prop_assert_eq!(majority_label(&labels).unwrap(), majority_label(&rev).unwrap());
        }

        #[test]
        fn reframe_preserves_label_sequence(
            labels in proptest::collection::vec(1u8..=8, 12),
            win in prop_oneof![Just(1usize), Just(2), Just(3), Just(4), Just(6), Just(12)],
        ) {
            let ds = Dataset::new(vec![frame(labels.clone(), 1.0)], SplitTag::Train).unwrap();
            let sub = reframe(&ds, win as f64).unwrap();
            let joined: Vec<u8> = sub.frames().iter().flat_map(|f| f.labels().to_vec()).collect();
            prop_assert_eq!(joined, labels);
        }

        #[test]
        fn transition_ratio_is_shuffle_invariant(
            kinds in proptest::collection::vec(any::<bool>(), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let frames: Vec<RawFrame> = kinds
                .iter()
                .map(|&mixed| if mixed { frame(vec![1, 1, 3, 3], 1.0) } else { frame(vec![4; 4], 1.0) })
                .collect();
            let a = transition_ratio(&Dataset::new(frames.clone(), SplitTag::Train).unwrap()).unwrap();
            let mut shuffled = frames;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = transition_ratio(&Dataset::new(shuffled, SplitTag::Train).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
