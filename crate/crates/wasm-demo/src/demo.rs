use fpbilstm::config::downsample_factor;
use fpbilstm::dsp::{build_channels, magnitude, FeatureConfig, Series, TriAxis};
use fpbilstm::ingest::{Axis, Mode, Sensor, NUM_MODES};
use fpbilstm::metrics::{ConfusionMatrix, EvalReport, Unit};
use fpbilstm::model::{summarize, ModelConfig};
use fpbilstm::synth::{synth_generate, SynthSpec};
use serde::Serialize;

const NATIVE_HZ: f64 = 100.0;

#[derive(Serialize)]
struct Curve {
    name: String,
    width: usize,
    /// `width` interleaved values per step.
    data: Vec<f64>,
}

#[derive(Serialize)]
struct Preview {
    mode: &'static str,
    native_hz: f64,
    target_hz: f64,
    raw_acc_magnitude: Vec<f64>,
    channels: Vec<Curve>,
}

pub fn mode_names() -> String {
    let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
    serde_json::to_string(&names).expect("strings serialize")
}

pub fn preview_frame(mode_id: u8, seed: u64, window_s: f64, target_hz: f64) -> Result<String, String> {
    let mode = Mode::from_id(mode_id).ok_or_else(|| format!("mode id {mode_id} is not in 1..={NUM_MODES}"))?;
    if !(window_s > 0.0 && window_s <= 600.0) {
        return Err(format!("window must lie in (0, 600] s, got {window_s}"));
    }
    let frame_len = (window_s * NATIVE_HZ).round() as usize;
    let features = FeatureConfig {
        downsample_s: downsample_factor(NATIVE_HZ, target_hz).map_err(|e| e.to_string())?,
        ..FeatureConfig::default()
    };
    let spec = SynthSpec { frame_len, frames_per_mode: 1, sample_rate_hz: NATIVE_HZ, ..SynthSpec::default() };
    let ds = synth_generate(&spec, seed).map_err(|e| e.to_string())?;
    let frame = &ds.frames()[mode.index()];
    let axis = |a| Series::new(frame.axis(Sensor::Accelerometer, a).expect("synthetic frames hold all sensors").to_vec(), 1.0 / NATIVE_HZ);
    let acc = TriAxis::new(axis(Axis::X).map_err(|e| e.to_string())?, axis(Axis::Y).map_err(|e| e.to_string())?, axis(Axis::Z).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let set = build_channels(frame, &features).map_err(|e| e.to_string())?;
    let preview = Preview {
        mode: mode.name(),
        native_hz: NATIVE_HZ,
        target_hz,
        raw_acc_magnitude: magnitude(&acc).into_values(),
        channels: set
            .channels
            .into_iter()
            .map(|c| Curve { name: c.name(), width: c.width, data: c.data })
            .collect(),
    };
    serde_json::to_string(&preview).map_err(|e| e.to_string())
}

fn parse_taps(taps: &str) -> Result<Vec<usize>, String> {
    taps.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| format!("tap {t:?} is not a pool index")))
        .collect()
}

pub fn model_summary(depth: usize, taps: &str, units: usize, input_len: usize) -> Result<String, String> {
    let base = ModelConfig::default();
    if depth == 0 || depth > base.conv_stack.len() {
        return Err(format!("depth must lie in 1..={}", base.conv_stack.len()));
    }
    let mut cfg = base.with_depth(depth);
    let taps = parse_taps(taps)?;
    if !taps.is_empty() {
        cfg = cfg.with_taps(taps);
    }
    cfg.bilstm_units = units;
    let s = summarize(&cfg, input_len).map_err(|e| e.to_string())?;
    serde_json::to_string(&s).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Scored {
    report: serde_json::Value,
    table: String,
}

pub fn score_confusion(counts_json: &str) -> Result<String, String> {
    let counts: [[u64; NUM_MODES]; NUM_MODES] =
        serde_json::from_str(counts_json).map_err(|e| format!("expected an 8x8 array of counts: {e}"))?;
    let report = EvalReport::from_confusion(ConfusionMatrix::from_counts(counts), Unit::Frame).map_err(|e| e.to_string())?;
    let json = report.to_json().map_err(|e| e.to_string())?;
    let scored = Scored {
        report: serde_json::from_str(&json).map_err(|e| e.to_string())?,
        table: report.to_table(),
    };
    serde_json::to_string(&scored).map_err(|e| e.to_string())
}
