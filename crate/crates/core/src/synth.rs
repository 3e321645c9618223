//! Synthetic IMU frames with per-mode signatures, used as a desk-scale
//! stand-in for SHL data.
//!
//! Signatures: Still is low-variance noise; Walk, Run and Bike are periodic
//! gaits at ~2, ~2.8 and ~1.2 Hz with distinct amplitudes; Car and Bus are
//! low-frequency drift with different magnetometer bias; Train and Subway
//! share one low-frequency profile and differ only in noise floor, so they are
//! the hardest pair to separate.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Axis, Dataset, Mode, RawFrame, Sensor, SplitTag, NUM_MODES};

const GRAVITY: f64 = 9.81;

/// Generative parameters for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSignature {
    /// Base oscillation frequency of the accelerometer / gyroscope signal.
    pub freq_hz: f64,
    /// Accelerometer oscillation amplitude (m/s^2).
    pub acc_amp: f64,
    /// Relative amplitude of the second harmonic.
    pub harmonic: f64,
    pub acc_noise: f64,
    /// Gyroscope oscillation amplitude (rad/s).
    pub gyro_amp: f64,
    pub gyro_noise: f64,
    /// Magnitude of the static magnetic field (uT).
    pub mag_bias: f64,
    pub mag_noise: f64,
}

impl ModeSignature {
    pub fn default_for(mode: Mode) -> Self {
        let sig = |freq_hz, acc_amp, harmonic, acc_noise, gyro_amp, gyro_noise, mag_bias, mag_noise| {
            ModeSignature {
                freq_hz,
                acc_amp,
                harmonic,
                acc_noise,
                gyro_amp,
                gyro_noise,
                mag_bias,
                mag_noise,
            }
        };
        match mode {
            Mode::Still => sig(0.5, 0.02, 0.0, 0.02, 0.005, 0.005, 45.0, 0.2),
            Mode::Walk => sig(2.0, 2.5, 0.4, 0.3, 0.8, 0.05, 45.0, 0.5),
            Mode::Run => sig(2.8, 8.0, 0.5, 0.6, 2.0, 0.1, 45.0, 0.8),
            Mode::Bike => sig(1.2, 1.5, 0.2, 0.4, 0.6, 0.08, 45.0, 0.6),
            Mode::Car => sig(0.3, 0.6, 0.0, 0.15, 0.1, 0.02, 38.0, 1.0),
            Mode::Bus => sig(0.2, 0.9, 0.0, 0.2, 0.15, 0.03, 55.0, 1.0),
            Mode::Train => sig(0.15, 0.4, 0.0, 0.04, 0.05, 0.008, 30.0, 1.5),
            Mode::Subway => sig(0.3, 0.4, 0.0, 0.08, 0.05, 0.016, 30.0, 1.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sample_rate_hz: f64,
    /// Samples per frame.
    pub frame_len: usize,
    pub frames_per_mode: usize,
    /// Fraction of frames that switch to a second mode part-way through.
    #[serde(default)]
    pub transition_fraction: f64,
    /// One signature per mode, in mode-id order.
    pub modes: Vec<ModeSignature>,
}

impl Default for SynthSpec {
    /// 8 modes x 50 frames of 5 s at 100 Hz, no transitions.
    fn default() -> Self {
        SynthSpec {
            sample_rate_hz: 100.0,
            frame_len: 500,
            frames_per_mode: 50,
            transition_fraction: 0.0,
            modes: Mode::ALL.iter().map(|&m| ModeSignature::default_for(m)).collect(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("synthetic sample rate must be positive"));
        }
        if self.frame_len == 0 || self.frames_per_mode == 0 {
            return Err(Error::invalid("synthetic frame length and count must be positive"));
        }
        if self.modes.len() != NUM_MODES {
            return Err(Error::invalid(format!(
                "synthetic spec needs {NUM_MODES} mode signatures, got {}",
                self.modes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.transition_fraction) {
            return Err(Error::invalid("transition_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-frame random draws shared by both segments of a transition frame so
/// the phone orientation stays fixed across the switch.
struct Pose {
    gravity_dir: [f64; 3],
    motion_dir: [f64; 3],
    field_dir: [f64; 3],
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn fill_segment(
    out: &mut BTreeMap<(Sensor, Axis), Vec<f64>>,
    sig: &ModeSignature,
    pose: &Pose,
    range: std::ops::Range<usize>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) {
    let freq = sig.freq_hz * rng.gen_range(0.9..1.1);
    let amp = sig.acc_amp * rng.gen_range(0.8..1.2);
    let phase = rng.gen_range(0.0..TAU);
    let gyro_phase = rng.gen_range(0.0..TAU);
    let acc_noise = Normal::new(0.0, sig.acc_noise).unwrap();
    let gyro_noise = Normal::new(0.0, sig.gyro_noise).unwrap();
    let mag_noise = Normal::new(0.0, sig.mag_noise).unwrap();
    let drift = rng.gen_range(-1.0..1.0);
    for i in range {
        let t = i as f64 / rate;
        let w = TAU * freq * t + phase;
        let motion = amp * (w.sin() + sig.harmonic * (2.0 * w).sin());
        let gyro = sig.gyro_amp * (TAU * freq * t + gyro_phase).sin();
        let mag_scale = sig.mag_bias + 0.5 * sig.mag_noise * drift * (TAU * 0.02 * t).sin();
        for (k, axis) in Axis::ALL.into_iter().enumerate() {
            let acc = GRAVITY * pose.gravity_dir[k] + motion * pose.motion_dir[k] + acc_noise.sample(rng);
            let gyr = gyro * pose.motion_dir[(k + 1) % 3] + gyro_noise.sample(rng);
            let mag = mag_scale * pose.field_dir[k] + mag_noise.sample(rng);
            out.get_mut(&(Sensor::Accelerometer, axis)).unwrap()[i] = acc;
            out.get_mut(&(Sensor::Gyroscope, axis)).unwrap()[i] = gyr;
            out.get_mut(&(Sensor::Magnetometer, axis)).unwrap()[i] = mag;
        }
    }
}

/// Deterministic synthetic dataset: `frames_per_mode` frames for each of the
/// eight modes, ordered by mode then frame index.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.frame_len;
    let mut frames = Vec::with_capacity(NUM_MODES * spec.frames_per_mode);
    for mode in Mode::ALL {
        for _ in 0..spec.frames_per_mode {
            let pose = Pose {
                gravity_dir: unit(&mut rng),
                motion_dir: unit(&mut rng),
                field_dir: unit(&mut rng),
            };
            let mut samples: BTreeMap<(Sensor, Axis), Vec<f64>> = BTreeMap::new();
            for s in Sensor::ALL {
                for a in Axis::ALL {
                    samples.insert((s, a), vec![0.0; n]);
                }
            }
            let mut labels = vec![mode.id(); n];
            let transition = n >= 2 && rng.gen_bool(spec.transition_fraction);
            if transition {
                let other = loop {
                    let m = Mode::ALL[rng.gen_range(0..NUM_MODES)];
                    if m != mode {
                        break m;
                    }
                };
                let switch = rng.gen_range(1..n);
                // Either the frame's own mode leads or trails the switch.
                let (first, second) = if rng.gen_bool(0.5) { (mode, other) } else { (other, mode) };
                fill_segment(&mut samples, &spec.modes[first.index()], &pose, 0..switch, spec.sample_rate_hz, &mut rng);
                fill_segment(&mut samples, &spec.modes[second.index()], &pose, switch..n, spec.sample_rate_hz, &mut rng);
                labels[..switch].fill(first.id());
                labels[switch..].fill(second.id());
            } else {
                fill_segment(&mut samples, &spec.modes[mode.index()], &pose, 0..n, spec.sample_rate_hz, &mut rng);
            }
            frames.push(RawFrame::new(samples, spec.sample_rate_hz, labels)?);
        }
    }
    Dataset::new(frames, SplitTag::Train)
}
