//! Data-loader transforms: centered moving-average smoothing, block-mean
//! downsampling, per-point magnitude and finite-difference jerk, plus the
//! assembly of per-frame model input channels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{majority_label, Axis, RawFrame, Sensor, NUM_MODES};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    values: Vec<f64>,
    dt_s: f64,
}

impl Series {
    pub fn new(values: Vec<f64>, dt_s: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("series must hold at least one value"));
        }
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::invalid(format!("sampling period must be positive, got {dt_s}")));
        }
        Ok(Series { values, dt_s })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriAxis {
    pub x: Series,
    pub y: Series,
    pub z: Series,
}

impl TriAxis {
    pub fn new(x: Series, y: Series, z: Series) -> Result<Self> {
        if x.len() != y.len() || x.len() != z.len() {
            return Err(Error::invalid(format!(
                "axis lengths differ: {} / {} / {}",
                x.len(),
                y.len(),
                z.len()
            )));
        }
        if x.dt_s != y.dt_s || x.dt_s != z.dt_s {
            return Err(Error::invalid("axis sampling periods differ"));
        }
        Ok(TriAxis { x, y, z })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dt_s(&self) -> f64 {
        self.x.dt_s
    }

    pub fn map(&self, f: impl Fn(&Series) -> Result<Series>) -> Result<TriAxis> {
        TriAxis::new(f(&self.x)?, f(&self.y)?, f(&self.z)?)
    }

    /// Interleave as `[x0, y0, z0, x1, ...]`.
    pub fn interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 3);
        for i in 0..self.len() {
            out.extend([self.x.values[i], self.y.values[i], self.z.values[i]]);
        }
        out
    }
}

/// Centered moving average over `m` points (odd). Near the edges the window
/// shrinks symmetrically: point t (1-indexed) averages the first 2t-1 points
/// at the head and the last 2(T-t)+1 points at the tail.
pub fn smooth(s: &Series, m: usize) -> Result<Series> {
    if m == 0 || m % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window must be odd and positive, got {m}")));
    }
    let n = s.len();
    if m > n {
        return Err(Error::invalid(format!("smoothing window {m} exceeds series length {n}")));
    }
    let half = m / 2;
    let v = &s.values;
    let out = (0..n)
        .map(|i| {
            let k = half.min(i).min(n - 1 - i);
            let window = &v[i - k..=i + k];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect();
    Ok(Series {
        values: out,
        dt_s: s.dt_s,
    })
}

/// Non-overlapping block means of `factor` points; a trailing partial block
/// is dropped.
pub fn downsample(s: &Series, factor: usize) -> Result<Series> {
    if factor == 0 {
        return Err(Error::invalid("downsampling factor must be positive"));
    }
    if factor > s.len() {
        return Err(Error::invalid(format!(
            "downsampling factor {factor} exceeds series length {}",
            s.len()
        )));
    }
    let values = s
        .values
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect();
    Ok(Series {
        values,
        dt_s: s.dt_s * factor as f64,
    })
}

/// Per-point Euclidean norm of the three axes.
pub fn magnitude(t: &TriAxis) -> Series {
    let values = t
        .x
        .values
        .iter()
        .zip(&t.y.values)
        .zip(&t.z.values)
        .map(|((x, y), z)| (x * x + y * y + z * z).sqrt())
        .collect();
    Series {
        values,
        dt_s: t.dt_s(),
    }
}

fn jerk_axis(s: &Series) -> Series {
    let v = &s.values;
    let mut out: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / s.dt_s).collect();
    // Repeat the final difference so the length stays T.
    out.push(*out.last().expect("length checked"));
    Series {
        values: out,
        dt_s: s.dt_s,
    }
}

/// Forward difference divided by the sampling period, per axis; the last
/// value is repeated to keep the input length.
pub fn jerk(t: &TriAxis) -> Result<TriAxis> {
    if t.len() < 2 {
        return Err(Error::invalid("jerk needs at least two points"));
    }
    Ok(TriAxis {
        x: jerk_axis(&t.x),
        y: jerk_axis(&t.y),
        z: jerk_axis(&t.z),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    Xyz,
    Magnitude,
    Jerk,
}

impl Feature {
    pub fn width(self) -> usize {
        match self {
            Feature::Magnitude => 1,
            Feature::Xyz | Feature::Jerk => 3,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Feature::Xyz => "xyz",
            Feature::Magnitude => "mag",
            Feature::Jerk => "jerk",
        }
    }
}

/// One selectable input channel, e.g. `A_jerk`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelKind {
    pub sensor: Sensor,
    pub feature: Feature,
}

impl ChannelKind {
    /// Stable channel order: sensors accelerometer, magnetometer, gyroscope;
    /// within a sensor jerk, xyz, magnitude.
    pub const ORDER: [ChannelKind; 9] = {
        use Feature::*;
        use Sensor::*;
        [
            ChannelKind { sensor: Accelerometer, feature: Jerk },
            ChannelKind { sensor: Accelerometer, feature: Xyz },
            ChannelKind { sensor: Accelerometer, feature: Magnitude },
            ChannelKind { sensor: Magnetometer, feature: Jerk },
            ChannelKind { sensor: Magnetometer, feature: Xyz },
            ChannelKind { sensor: Magnetometer, feature: Magnitude },
            ChannelKind { sensor: Gyroscope, feature: Jerk },
            ChannelKind { sensor: Gyroscope, feature: Xyz },
            ChannelKind { sensor: Gyroscope, feature: Magnitude },
        ]
    };

    pub fn name(self) -> String {
        format!("{}_{}", self.sensor.tag(), self.feature.tag())
    }

    pub fn width(self) -> usize {
        self.feature.width()
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorFeatures {
    #[serde(default)]
    pub xyz: bool,
    #[serde(default)]
    pub magnitude: bool,
    #[serde(default)]
    pub jerk: bool,
}

impl SensorFeatures {
    pub const NONE: SensorFeatures = SensorFeatures {
        xyz: false,
        magnitude: false,
        jerk: false,
    };

    fn has(&self, f: Feature) -> bool {
        match f {
            Feature::Xyz => self.xyz,
            Feature::Magnitude => self.magnitude,
            Feature::Jerk => self.jerk,
        }
    }

    fn any(&self) -> bool {
        self.xyz || self.magnitude || self.jerk
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub accelerometer: SensorFeatures,
    pub gyroscope: SensorFeatures,
    pub magnetometer: SensorFeatures,
    /// Moving-average window (odd).
    pub smoothing_m: usize,
    /// Block size of the downsampling mean.
    pub downsample_s: usize,
}

impl Default for FeatureConfig {
    /// Accelerometer magnitude + jerk, gyroscope xyz + magnitude,
    /// magnetometer jerk; m = 5, S = 5 (100 Hz to 20 Hz).
    fn default() -> Self {
        FeatureConfig {
            accelerometer: SensorFeatures {
                xyz: false,
                magnitude: true,
                jerk: true,
            },
            gyroscope: SensorFeatures {
                xyz: true,
                magnitude: true,
                jerk: false,
            },
            magnetometer: SensorFeatures {
                xyz: false,
                magnitude: false,
                jerk: true,
            },
            smoothing_m: 5,
            downsample_s: 5,
        }
    }
}

impl FeatureConfig {
    /// Config selecting exactly one channel.
    pub fn single(kind: ChannelKind) -> Self {
        let mut cfg = FeatureConfig {
            accelerometer: SensorFeatures::NONE,
            gyroscope: SensorFeatures::NONE,
            magnetometer: SensorFeatures::NONE,
            ..FeatureConfig::default()
        };
        let flags = cfg.sensor_mut(kind.sensor);
        match kind.feature {
            Feature::Xyz => flags.xyz = true,
            Feature::Magnitude => flags.magnitude = true,
            Feature::Jerk => flags.jerk = true,
        }
        cfg
    }

    /// Config from an explicit channel list (order is normalised).
    pub fn from_channels(kinds: &[ChannelKind]) -> Self {
        let mut cfg = FeatureConfig {
            accelerometer: SensorFeatures::NONE,
            gyroscope: SensorFeatures::NONE,
            magnetometer: SensorFeatures::NONE,
            ..FeatureConfig::default()
        };
        for k in kinds {
            let flags = cfg.sensor_mut(k.sensor);
            match k.feature {
                Feature::Xyz => flags.xyz = true,
                Feature::Magnitude => flags.magnitude = true,
                Feature::Jerk => flags.jerk = true,
            }
        }
        cfg
    }

    pub fn sensor(&self, s: Sensor) -> &SensorFeatures {
        match s {
            Sensor::Accelerometer => &self.accelerometer,
            Sensor::Gyroscope => &self.gyroscope,
            Sensor::Magnetometer => &self.magnetometer,
        }
    }

    pub fn sensor_mut(&mut self, s: Sensor) -> &mut SensorFeatures {
        match s {
            Sensor::Accelerometer => &mut self.accelerometer,
            Sensor::Gyroscope => &mut self.gyroscope,
            Sensor::Magnetometer => &mut self.magnetometer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.accelerometer.any() || self.gyroscope.any() || self.magnetometer.any()) {
            return Err(Error::Config("feature config selects no channel".into()));
        }
        if self.smoothing_m == 0 || self.smoothing_m % 2 == 0 {
            return Err(Error::Config(format!(
                "smoothing_m must be odd and positive, got {}",
                self.smoothing_m
            )));
        }
        if self.downsample_s == 0 {
            return Err(Error::Config("downsample_s must be positive".into()));
        }
        Ok(())
    }

    /// Selected channels in the stable order.
    pub fn channels(&self) -> Vec<ChannelKind> {
        ChannelKind::ORDER
            .iter()
            .copied()
            .filter(|k| self.sensor(k.sensor).has(k.feature))
            .collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channels().iter().map(|k| k.width()).collect()
    }
}

/// One preprocessed channel: `len` time steps of `width` interleaved values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: ChannelKind,
    pub width: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Channel {
    pub fn name(&self) -> String {
        self.kind.name()
    }
}

/// Model input for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub channels: Vec<Channel>,
    pub frame_label: u8,
    /// Per-mode sample counts of the source frame, used to score per sample.
    pub label_counts: [u32; NUM_MODES],
}

impl ChannelSet {
    pub fn len(&self) -> usize {
        self.channels.first().map(|c| c.len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.width).collect()
    }
}

fn tri_axis(frame: &RawFrame, sensor: Sensor) -> Result<TriAxis> {
    let dt = 1.0 / frame.sample_rate_hz();
    let get = |a: Axis| -> Result<Series> {
        let v = frame
            .axis(sensor, a)
            .ok_or_else(|| Error::invalid(format!("frame lacks {sensor:?} {a:?}")))?;
        Series::new(v.to_vec(), dt)
    };
    TriAxis::new(get(Axis::X)?, get(Axis::Y)?, get(Axis::Z)?)
}

/// Smooth at the native rate, downsample, then derive the selected features.
pub fn build_channels(frame: &RawFrame, cfg: &FeatureConfig) -> Result<ChannelSet> {
    cfg.validate()?;
    let kinds = cfg.channels();
    let mut prepared: Vec<(Sensor, TriAxis)> = Vec::new();
    for k in &kinds {
        if prepared.iter().any(|(s, _)| *s == k.sensor) {
            continue;
        }
        let raw = tri_axis(frame, k.sensor)?;
        let ds = raw.map(|s| downsample(&smooth(s, cfg.smoothing_m)?, cfg.downsample_s))?;
        prepared.push((k.sensor, ds));
    }
    let mut channels = Vec::with_capacity(kinds.len());
    for k in kinds {
        let tri = &prepared.iter().find(|(s, _)| *s == k.sensor).expect("prepared above").1;
        let data = match k.feature {
            Feature::Xyz => tri.interleaved(),
            Feature::Magnitude => magnitude(tri).into_values(),
            Feature::Jerk => jerk(tri)?.interleaved(),
        };
        channels.push(Channel {
            kind: k,
            width: k.width(),
            len: tri.len(),
            data,
        });
    }
    let mut label_counts = [0u32; NUM_MODES];
    for &l in frame.labels() {
        label_counts[l as usize - 1] += 1;
    }
    Ok(ChannelSet {
        channels,
        frame_label: majority_label(frame.labels())?,
        label_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[f64]) -> Series {
        Series::new(v.to_vec(), 0.01).unwrap()
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(smooth(&s(&[1., 2., 3., 4., 5.]), 3).unwrap().values(), &[1., 2., 3., 4., 5.]);
        assert_eq!(smooth(&s(&[0., 0., 6., 0., 0.]), 3).unwrap().values(), &[0., 2., 2., 2., 0.]);
        assert_eq!(smooth(&s(&[4.5; 9]), 7).unwrap().values(), &[4.5; 9]);
        assert!(smooth(&s(&[1., 2.]), 2).is_err());
        assert!(smooth(&s(&[1., 2.]), 0).is_err());
        assert!(smooth(&s(&[1., 2.]), 3).is_err());
    }

    #[test]
    fn downsample_examples() {
        let x = s(&[1., 2., 3., 4., 5.]);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        let d = downsample(&x, 2).unwrap();
        assert_eq!(d.values(), &[1.5, 3.5]);
        assert!((1.0 / d.dt_s() - 50.0).abs() < 1e-9);
        assert!(downsample(&x, 6).is_err());
        assert!(downsample(&x, 0).is_err());
    }

    #[test]
    fn magnitude_and_jerk_examples() {
        let t = TriAxis::new(s(&[0., 1.]), s(&[0., 2.]), s(&[0., 2.])).unwrap();
        assert_eq!(magnitude(&t).values(), &[0., 3.]);

        let a = Series::new(vec![0., 1., 3.], 0.05).unwrap();
        let t = TriAxis::new(a.clone(), a.clone(), a).unwrap();
        let j = jerk(&t).unwrap();
        for (got, want) in j.x.values().iter().zip([20., 40., 40.]) {
            assert!((got - want).abs() < 1e-12);
        }
        let one = TriAxis::new(s(&[1.]), s(&[1.]), s(&[1.])).unwrap();
        assert!(jerk(&one).is_err());
    }

    #[test]
    fn default_channel_order_and_widths() {
        let cfg = FeatureConfig::default();
        let names: Vec<String> = cfg.channels().iter().map(|k| k.name()).collect();
        assert_eq!(names, ["A_jerk", "A_mag", "M_jerk", "G_xyz", "G_mag"]);
        assert_eq!(cfg.widths(), [3, 1, 3, 3, 1]);
    }

    #[test]
    fn invalid_feature_configs() {
        let mut cfg = FeatureConfig::default();
        cfg.smoothing_m = 4;
        assert!(cfg.validate().is_err());
        let empty = FeatureConfig::from_channels(&[]);
        assert!(empty.validate().is_err());
    }

    proptest! {
        #[test]
        fn downsample_composes(v in proptest::collection::vec(-100.0f64..100.0, 1..8), a in 1usize..5, b in 1usize..5) {
            // Build a length that a*b divides exactly.
            let n = a * b * v.len();
            let vals: Vec<f64> = (0..n).map(|i| v[i % v.len()] + i as f64 * 0.1).collect();
            let x = Series::new(vals, 0.01).unwrap();
            let two = downsample(&downsample(&x, a).unwrap(), b).unwrap();
            let one = downsample(&x, a * b).unwrap();
            prop_assert_eq!(two.len(), one.len());
            for (p, q) in two.values().iter().zip(one.values()) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn jerk_ignores_offsets(v in proptest::collection::vec(-10.0f64..10.0, 2..50), c in -1e3f64..1e3) {
            let base = TriAxis::new(s(&v), s(&v), s(&v)).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let moved = TriAxis::new(s(&shifted), s(&v), s(&v)).unwrap();
            let (j0, j1) = (jerk(&base).unwrap(), jerk(&moved).unwrap());
            for (p, q) in j0.x.values().iter().zip(j1.x.values()) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn magnitude_is_rotation_invariant(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..40),
            angles in (0.0f64..6.283, 0.0f64..6.283, 0.0f64..6.283),
        ) {
            let (a, b, c) = angles;
            let rz = [[a.cos(), -a.sin(), 0.], [a.sin(), a.cos(), 0.], [0., 0., 1.]];
            let ry = [[b.cos(), 0., b.sin()], [0., 1., 0.], [-b.sin(), 0., b.cos()]];
            let rx = [[1., 0., 0.], [0., c.cos(), -c.sin()], [0., c.sin(), c.cos()]];
            let mul = |m: [[f64; 3]; 3], p: [f64; 3]| {
                [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
            };
            let rotated: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| mul(rx, mul(ry, mul(rz, [x, y, z])))).collect();
            let tri = |p: &[[f64; 3]]| TriAxis::new(
                s(&p.iter().map(|q| q[0]).collect::<Vec<_>>()),
                s(&p.iter().map(|q| q[1]).collect::<Vec<_>>()),
                s(&p.iter().map(|q| q[2]).collect::<Vec<_>>()),
            ).unwrap();
            let orig: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let m0 = magnitude(&tri(&orig));
            let m1 = magnitude(&tri(&rotated));
            for (p, q) in m0.values().iter().zip(m1.values()) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn smooth_keeps_length(v in proptest::collection::vec(-10.0f64..10.0, 1..80), half in 0usize..10) {
            let m = (2 * half + 1).min(if v.len() % 2 == 1 { v.len() } else { v.len() - 1 });
            let out = smooth(&s(&v), m).unwrap();
            prop_assert_eq!(out.len(), v.len());
            if m == 1 {
                prop_assert_eq!(out.values(), &v[..]);
            }
        }
    }
}
