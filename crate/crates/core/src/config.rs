//! Run configuration: one TOML file, layered over built-in defaults, with
//! `dotted.key=value` overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Pipeline;
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::ingest::{window_samples, LoadOptions, SHL_SAMPLE_RATE_HZ};
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Shl {
        train_dir: PathBuf,
        test_dir: Option<PathBuf>,
        #[serde(default)]
        load: LoadOptions,
    },
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default = "default_train_seed")]
        train_seed: u64,
        #[serde(default = "default_test_seed")]
        test_seed: u64,
    },
}

fn default_train_seed() -> u64 {
    1
}

fn default_test_seed() -> u64 {
    2
}

impl DataSource {
    pub fn sample_rate_hz(&self) -> f64 {
        match self {
            DataSource::Shl { load, .. } => load.sample_rate_hz,
            DataSource::Synth { spec, .. } => spec.sample_rate_hz,
        }
    }

    /// Native frame duration in seconds, when known without reading data.
    pub fn frame_s(&self) -> Option<f64> {
        match self {
            DataSource::Shl { .. } => None,
            DataSource::Synth { spec, .. } => Some(spec.frame_len as f64 / spec.sample_rate_hz),
        }
    }
}

impl Default for DataSource {
    /// Synthetic frames of 60 s at the native SHL rate.
    fn default() -> Self {
        DataSource::Synth {
            spec: SynthSpec {
                frame_len: 6000,
                sample_rate_hz: SHL_SAMPLE_RATE_HZ,
                ..SynthSpec::default()
            },
            train_seed: default_train_seed(),
            test_seed: default_test_seed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub window_s: f64,
    /// Rate after downsampling; `features.downsample_s` is derived from it.
    pub target_hz: f64,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Training seeds; every run is reported.
    pub seeds: Vec<u64>,
    /// Preprocessed-channel cache; `None` keeps everything in memory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::default(),
            window_s: 60.0,
            target_hz: 20.0,
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            cache_dir: None,
        }
    }
}

/// Integer downsampling factor taking `native_hz` to `target_hz`.
pub fn downsample_factor(native_hz: f64, target_hz: f64) -> Result<usize> {
    if !(target_hz > 0.0 && target_hz <= native_hz) {
        return Err(Error::Config(format!(
            "target rate {target_hz} Hz must lie in (0, {native_hz}] Hz"
        )));
    }
    let s = native_hz / target_hz;
    let r = s.round();
    if (s - r).abs() > 1e-9 * s {
        return Err(Error::Config(format!(
            "target rate {target_hz} Hz does not divide the native {native_hz} Hz"
        )));
    }
    Ok(r as usize)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = toml::from_str(&text)?;
            merge(&mut value, layer);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into()?;
        cfg.resolved()
    }

    /// Derive the downsampling factor and channel widths, then validate.
    pub fn resolved(mut self) -> Result<Self> {
        let native = self.data.sample_rate_hz();
        self.features.downsample_s = downsample_factor(native, self.target_hz)?;
        self.features.validate()?;
        self.model.channel_widths = self.features.widths();
        self.model.validate()?;
        self.train.validate()?;
        if !(self.window_s > 0.0) {
            return Err(Error::Config(format!("window_s must be positive, got {}", self.window_s)));
        }
        if let Some(frame_s) = self.data.frame_s() {
            window_samples((frame_s * native).round() as usize, native, self.window_s)?;
        }
        let samples = self.window_s * native;
        if (samples - samples.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("window {} s is not a whole number of samples", self.window_s)));
        }
        let input_len = samples.round() as usize / self.features.downsample_s;
        self.model.pool_lengths(input_len)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if let DataSource::Synth { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(self)
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            features: self.features.clone(),
            window_s: self.window_s,
            sample_rate_hz: self.data.sample_rate_hz(),
        }
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    // a data source of another kind replaces the whole table
                    Some(slot) if k != "data" || same_kind(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = coerce(slot, v),
    }
}

/// Integers written where the default is a float stay floats.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn same_kind(a: &toml::Value, b: &toml::Value) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Set `a.b.c=value`. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let value = parse_literal(raw.trim());
    let mut path: Vec<&str> = key.split('.').collect();
    let last = path.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {assignment:?}")))?;
    let mut node = root;
    for part in path {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a table")))?;
    let value = match table.get(last) {
        Some(old) => coerce(old, value),
        None => value,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_headline_setting() {
        let cfg = RunConfig::default().resolved().unwrap();
        assert_eq!(cfg.features.downsample_s, 5);
        assert_eq!(cfg.model.channel_widths, [3, 1, 3, 3, 1]);
        assert_eq!(cfg.pipeline().input_len(), 1200);
        assert_eq!(cfg.train.batch_size, 50);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default().resolved().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "window_s = 5.0\n[train]\nlr = 1e-3\n[data.spec]\nframe_len = 500\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.batch_size=25".into(), "target_hz=25".into()]).unwrap();
        assert_eq!(cfg.window_s, 5.0);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 25);
        assert_eq!(cfg.train.max_epochs, 100);
        assert_eq!(cfg.features.downsample_s, 4);
        assert_eq!(cfg.pipeline().input_len(), 125);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(RunConfig::load(None, &["target_hz=30".into()]).is_err());
        assert!(matches!(RunConfig::load(None, &["window_s=7".into()]), Err(Error::InvalidWindow { .. })));
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
        // 5 s at 1 Hz is too short for five pooling stages
        assert!(RunConfig::load(None, &["window_s=5".into(), "target_hz=1".into()]).is_err());
    }

    #[test]
    fn shl_source_parses() {
        let cfg = RunConfig::from_toml_str("[data]\nkind = \"shl\"\ntrain_dir = \"/data/train\"\n").unwrap();
        match cfg.data {
            DataSource::Shl { train_dir, test_dir, load } => {
                assert_eq!(train_dir, PathBuf::from("/data/train"));
                assert!(test_dir.is_none());
                assert_eq!(load.sample_rate_hz, 100.0);
            }
            _ => panic!("expected shl source"),
        }
    }

    #[test]
    fn downsample_factors() {
        assert_eq!(downsample_factor(100.0, 20.0).unwrap(), 5);
        assert_eq!(downsample_factor(100.0, 100.0).unwrap(), 1);
        assert_eq!(downsample_factor(100.0, 1.0).unwrap(), 100);
        assert!(downsample_factor(100.0, 30.0).is_err());
        assert!(downsample_factor(100.0, 0.0).is_err());
    }
}
