//! Data preparation with an on-disk channel cache, and the training /
//! evaluation drivers behind the sweep and ablation commands.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::dsp::{build_channels, Channel, ChannelKind, ChannelSet, Feature, FeatureConfig};
use crate::error::{Error, Result};
use crate::ingest::{load_shl, reframe, window_samples, Dataset, Sensor, SplitTag};
use crate::metrics::{evaluate_sets, EvalReport, Unit};
use crate::model::{batch_inputs, predict, summarize, FpBiLstm, ModelConfig};
use crate::nn::Graph;
use crate::synth::synth_generate;
use crate::train::{fit, stratified_split_sets, FitResult, TrainConfig};

/// Raw train and (optional) test datasets for a source.
pub fn load_source(source: &DataSource) -> Result<(Dataset, Option<Dataset>)> {
    match source {
        DataSource::Shl { train_dir, test_dir, load } => {
            let train = load_shl(train_dir, SplitTag::Train, load)?;
            let test = test_dir.as_ref().map(|d| load_shl(d, SplitTag::Test, load)).transpose()?;
            Ok((train, test))
        }
        DataSource::Synth { spec, train_seed, test_seed } => {
            let train = synth_generate(spec, *train_seed)?;
            let test = synth_generate(spec, *test_seed)?.with_split(SplitTag::Test);
            Ok((train, Some(test)))
        }
    }
}

/// Reframe to `window_s` (when it differs from the frame length) and
/// derive the feature channels of every frame.
pub fn channels_for(ds: &Dataset, features: &FeatureConfig, window_s: f64) -> Result<Vec<ChannelSet>> {
    let (Some(len), Some(rate)) = (ds.frame_len(), ds.sample_rate_hz()) else {
        return Ok(Vec::new());
    };
    let frame_s = len as f64 / rate;
    let framed;
    let ds = if (frame_s - window_s).abs() > 1e-9 {
        framed = reframe(ds, window_s)?;
        &framed
    } else {
        ds
    };
    ds.frames().iter().map(|f| build_channels(f, features)).collect()
}

/// What a cache entry was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheDescriptor {
    pub data_hash: String,
    pub split: String,
    pub features: FeatureConfig,
    pub window_s: f64,
    pub target_hz: f64,
}

impl CacheDescriptor {
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("descriptor serialises");
        hex(&Sha256::digest(&json)[..16])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Content hash of a data source: every file of an SHL directory, or the
/// generator spec plus seed.
pub fn source_hash(source: &DataSource, split: SplitTag) -> Result<String> {
    let mut h = Sha256::new();
    match (source, split) {
        (DataSource::Shl { train_dir, test_dir, load }, _) => {
            let dir = match split {
                SplitTag::Test => test_dir.as_ref().ok_or_else(|| Error::invalid("no test directory configured"))?,
                _ => train_dir,
            };
            h.update(serde_json::to_vec(load)?);
            hash_dir(&mut h, dir)?;
        }
        (DataSource::Synth { spec, train_seed, test_seed }, _) => {
            h.update(serde_json::to_vec(spec)?);
            let seed = if split == SplitTag::Test { test_seed } else { train_seed };
            h.update(seed.to_le_bytes());
        }
    }
    Ok(hex(&h.finalize()))
}

fn hash_dir(h: &mut Sha256, dir: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut buf = vec![0u8; 1 << 16];
    for path in entries {
        h.update(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let mut f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        loop {
            let n = f.read(&mut buf).map_err(|e| Error::io(&path, e))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"FPBCACHE";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    descriptor: CacheDescriptor,
    sets: Vec<SetMeta>,
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    frame_label: u8,
    label_counts: [u32; 8],
    channels: Vec<(ChannelKind, usize, usize)>,
}

/// Directory of preprocessed channel sets keyed by [`CacheDescriptor`].
#[derive(Clone, Debug)]
pub struct ChannelCache {
    dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / n as f64
        }
    }
}

impl ChannelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ChannelCache { dir })
    }

    pub fn path_for(&self, d: &CacheDescriptor) -> PathBuf {
        self.dir.join(format!("{}.bin", d.key()))
    }

    /// Cached sets for `d`, or `None` when absent. An entry whose stored
    /// descriptor differs from `d` is refused.
    pub fn get(&self, d: &CacheDescriptor) -> Result<Option<Vec<ChannelSet>>> {
        let path = self.path_for(d);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let stale = |detail: &str| Error::StaleCache { key: d.key(), detail: detail.to_string() };
        if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
            return Err(stale("unrecognised file contents"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header: CacheHeader = bytes
            .get(16..16 + hlen)
            .and_then(|h| serde_json::from_slice(h).ok())
            .ok_or_else(|| stale("unreadable header"))?;
        if header.descriptor != *d {
            return Err(stale("stored descriptor differs"));
        }
        let mut data = bytes[16 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut sets = Vec::with_capacity(header.sets.len());
        for meta in header.sets {
            let mut channels = Vec::with_capacity(meta.channels.len());
            for (kind, width, len) in meta.channels {
                let values: Vec<f64> = data.by_ref().take(width * len).collect();
                if values.len() != width * len {
                    return Err(stale("truncated data"));
                }
                channels.push(Channel { kind, width, len, data: values });
            }
            sets.push(ChannelSet { channels, frame_label: meta.frame_label, label_counts: meta.label_counts });
        }
        if data.next().is_some() {
            return Err(stale("trailing data"));
        }
        Ok(Some(sets))
    }

    pub fn put(&self, d: &CacheDescriptor, sets: &[ChannelSet]) -> Result<()> {
        let header = CacheHeader {
            descriptor: d.clone(),
            sets: sets
                .iter()
                .map(|s| SetMeta {
                    frame_label: s.frame_label,
                    label_counts: s.label_counts,
                    channels: s.channels.iter().map(|c| (c.kind, c.width, c.len)).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in sets {
            for c in &s.channels {
                for v in &c.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let path = self.path_for(d);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Channel sets for the train and test splits of a resolved config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<ChannelSet>,
    pub test: Option<Vec<ChannelSet>>,
    pub stats: CacheStats,
}

/// Load (or reuse) raw data and produce channel sets for `cfg`. `raw` lets
/// callers that iterate over many settings load the source once.
pub fn prepare(cfg: &RunConfig, raw: Option<&(Dataset, Option<Dataset>)>) -> Result<Prepared> {
    let loaded;
    let raw = match raw {
        Some(r) => r,
        None => {
            loaded = load_source(&cfg.data)?;
            &loaded
        }
    };
    let cache = cfg.cache_dir.as_ref().map(ChannelCache::new).transpose()?;
    let mut stats = CacheStats::default();
    let mut one = |ds: &Dataset, split: SplitTag| -> Result<Vec<ChannelSet>> {
        let Some(cache) = &cache else {
            return channels_for(ds, &cfg.features, cfg.window_s);
        };
        let d = CacheDescriptor {
            data_hash: source_hash(&cfg.data, split)?,
            split: format!("{split:?}"),
            features: cfg.features.clone(),
            window_s: cfg.window_s,
            target_hz: cfg.target_hz,
        };
        if let Some(sets) = cache.get(&d)? {
            stats.hits += 1;
            return Ok(sets);
        }
        stats.misses += 1;
        let sets = channels_for(ds, &cfg.features, cfg.window_s)?;
        cache.put(&d, &sets)?;
        Ok(sets)
    };
    let train = one(&raw.0, SplitTag::Train)?;
    let test = raw.1.as_ref().map(|t| one(t, SplitTag::Test)).transpose()?;
    Ok(Prepared { train, test, stats })
}

/// One trained model and its scores.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub fit: FitResult,
    pub frame: EvalReport,
    pub sample: EvalReport,
    pub train_seconds: f64,
}

/// Split, train and score one seed. Without a test set the sub-validation
/// split is scored instead.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[ChannelSet],
    test: Option<&[ChannelSet]>,
    seed: u64,
    on_epoch: impl FnMut(&crate::train::EpochRecord),
) -> Result<RunOutcome> {
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let (sub_train, sub_val) = stratified_split_sets(train, cfg.split_ratio, seed)?;
    let start = Instant::now();
    let fit = fit(&sub_train, &sub_val, model_cfg, &cfg, on_epoch)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let eval_on = match test {
        Some(t) => t,
        None => {
            log::warn!("no test split; scoring the sub-validation split");
            &sub_val
        }
    };
    let refs: Vec<&ChannelSet> = eval_on.iter().collect();
    let pred = predict(&fit.model.predict_proba(&refs, cfg.batch_size)?);
    let (frame, sample) = evaluate_sets(eval_on, &pred)?;
    Ok(RunOutcome { seed, fit, frame, sample, train_seconds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_s: f64,
    pub target_hz: f64,
    pub seed: u64,
    pub unit: Unit,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub const SWEEP_CSV_HEADER: &str = "window_s,target_hz,seed,unit,accuracy,macro_f1";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3}",
            self.window_s, self.target_hz, self.seed, self.unit, self.accuracy, self.macro_f1
        )
    }
}

/// A grid cell that was not run, and why.
#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub label: String,
    pub reason: String,
}

/// Train and score every (window, rate) pair. Invalid pairs are skipped
/// with a logged reason; `sink` sees each row as soon as it exists.
pub fn sweep(
    base: &RunConfig,
    windows: &[f64],
    rates: &[f64],
    mut sink: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<(Vec<SweepRow>, Vec<Skipped>)> {
    if windows.is_empty() || rates.is_empty() {
        return Err(Error::invalid("sweep needs at least one window and one rate"));
    }
    let raw = load_source(&base.data)?;
    let (Some(frame_len), Some(rate)) = (raw.0.frame_len(), raw.0.sample_rate_hz()) else {
        return Err(Error::invalid("training data has no frames"));
    };
    let (mut rows, mut skipped) = (Vec::new(), Vec::new());
    for &w in windows {
        for &r in rates {
            let label = format!("{w} s / {r} Hz");
            let cell = window_samples(frame_len, rate, w)
                .and_then(|_| RunConfig { window_s: w, target_hz: r, ..base.clone() }.resolved());
            let cfg = match cell {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("skipping {label}: {e}");
                    skipped.push(Skipped { label, reason: e.to_string() });
                    continue;
                }
            };
            let prepared = prepare(&cfg, Some(&raw))?;
            for &seed in &cfg.seeds {
                log::info!("sweep cell {label}, seed {seed}");
                let out = train_and_evaluate(&cfg.model, &cfg.train, &prepared.train, prepared.test.as_deref(), seed, |_| {})?;
                for rep in [&out.frame, &out.sample] {
                    let row = SweepRow {
                        window_s: w,
                        target_hz: r,
                        seed,
                        unit: rep.unit,
                        accuracy: rep.accuracy,
                        macro_f1: rep.macro_f1,
                    };
                    sink(&row)?;
                    rows.push(row);
                }
            }
        }
    }
    Ok((rows, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    ConvDepth,
    PyramidTaps,
    Features,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_depth" | "conv-depth" => Ok(AblationMode::ConvDepth),
            "pyramid_taps" | "pyramid-taps" => Ok(AblationMode::PyramidTaps),
            "features" => Ok(AblationMode::Features),
            _ => Err(Error::invalid(format!(
                "unknown ablation mode {s:?}; expected conv_depth, pyramid_taps or features"
            ))),
        }
    }
}

fn kind(sensor: Sensor, feature: Feature) -> ChannelKind {
    ChannelKind { sensor, feature }
}

/// Named configurations of an ablation grid, derived from `base`.
pub fn ablation_grid(mode: AblationMode, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with_model = |m: ModelConfig| RunConfig { model: m, ..base.clone() };
    match mode {
        AblationMode::ConvDepth => (1..=base.model.num_conv_layers)
            .map(|d| (format!("depth {d}"), with_model(base.model.clone().with_depth(d))))
            .collect(),
        AblationMode::PyramidTaps => {
            let taps: [(&str, &[usize]); 5] = [
                ("taps 2,3,5", &[2, 3, 5]),
                ("taps 3,5", &[3, 5]),
                ("taps 5", &[5]),
                ("taps 1,2,3,4,5", &[1, 2, 3, 4, 5]),
                ("taps 1,2,3,5", &[1, 2, 3, 5]),
            ];
            let mut rows: Vec<(String, RunConfig)> = taps
                .iter()
                .map(|(name, t)| (name.to_string(), with_model(base.model.clone().with_taps(t.iter().copied()))))
                .collect();
            rows.insert(4, ("cnn-bilstm".into(), with_model(base.model.clone().cnn_bilstm())));
            rows
        }
        AblationMode::Features => {
            use Feature::*;
            use Sensor::*;
            let mut rows = Vec::new();
            for s in [Accelerometer, Gyroscope, Magnetometer] {
                for f in [Xyz, Magnitude, Jerk] {
                    let k = kind(s, f);
                    rows.push((k.name(), FeatureConfig::single(k)));
                }
            }
            let combos: [&[ChannelKind]; 6] = [
                &[kind(Accelerometer, Magnitude), kind(Accelerometer, Jerk)],
                &[kind(Gyroscope, Xyz), kind(Gyroscope, Magnitude)],
                &[kind(Gyroscope, Xyz), kind(Accelerometer, Magnitude), kind(Gyroscope, Magnitude), kind(Accelerometer, Jerk)],
                &[kind(Accelerometer, Magnitude), kind(Accelerometer, Jerk), kind(Magnetometer, Jerk)],
                &[kind(Gyroscope, Xyz), kind(Gyroscope, Magnitude), kind(Magnetometer, Jerk)],
                &[
                    kind(Gyroscope, Xyz),
                    kind(Accelerometer, Magnitude),
                    kind(Gyroscope, Magnitude),
                    kind(Accelerometer, Jerk),
                    kind(Magnetometer, Jerk),
                ],
            ];
            for (i, c) in combos.iter().enumerate() {
                let names: Vec<String> = FeatureConfig::from_channels(c).channels().iter().map(|k| k.name()).collect();
                rows.push((format!("combo {}: {}", i + 1, names.join("+")), FeatureConfig::from_channels(c)));
            }
            rows.into_iter()
                .map(|(name, mut f)| {
                    f.smoothing_m = base.features.smoothing_m;
                    f.downsample_s = base.features.downsample_s;
                    let model = base.model.clone().with_widths(f.widths());
                    (name, RunConfig { features: f, model, ..base.clone() })
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub params: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub train_seconds: Option<f64>,
    pub inference_ms: Option<f64>,
    pub error: Option<String>,
}

pub const ABLATION_CSV_HEADER: &str = "name,seed,params,accuracy,macro_f1,train_seconds,inference_ms,error";

impl AblationRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        format!(
            "\"{}\",{},{},{},{},{},{},\"{}\"",
            self.name,
            self.seed,
            self.params,
            opt(self.accuracy),
            opt(self.macro_f1),
            opt(self.train_seconds),
            opt(self.inference_ms),
            self.error.as_deref().unwrap_or("").replace('"', "'")
        )
    }
}

/// Median wall time in milliseconds of `passes` single-frame inference
/// forward passes, after `passes / 10` (at least one) warm-up passes.
pub fn time_inference(model: &FpBiLstm, frames: &[ChannelSet], passes: usize) -> Result<f64> {
    if frames.is_empty() || passes == 0 {
        return Err(Error::invalid("timing needs at least one frame and one pass"));
    }
    let warmup = (passes / 10).max(1);
    let mut times = Vec::with_capacity(passes);
    for i in 0..warmup + passes {
        let frame = &frames[i % frames.len()];
        let inputs = batch_inputs(&[frame])?;
        let start = Instant::now();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, inputs, false)?;
        std::hint::black_box(g.value(fwd.probs));
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

/// Train every grid row; failures are recorded in the row, not raised.
pub fn ablate(
    base: &RunConfig,
    mode: AblationMode,
    timing_passes: usize,
    mut sink: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let raw = load_source(&base.data)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_grid(mode, base) {
        let input_len = cfg.pipeline().input_len();
        let params = summarize(&cfg.model, input_len).map(|s| s.parameter_count).unwrap_or(0);
        for &seed in &base.seeds {
            log::info!("ablation row {name}, seed {seed}");
            let result = cfg.clone().resolved().and_then(|cfg| {
                let prepared = prepare(&cfg, Some(&raw))?;
                let out = train_and_evaluate(&cfg.model, &cfg.train, &prepared.train, prepared.test.as_deref(), seed, |_| {})?;
                let timing_set = prepared.test.as_deref().unwrap_or(&prepared.train);
                let ms = time_inference(&out.fit.model, timing_set, timing_passes)?;
                Ok((out, ms))
            });
            let row = match result {
                Ok((out, ms)) => AblationRow {
                    name: name.clone(),
                    seed,
                    params,
                    accuracy: Some(out.frame.accuracy),
                    macro_f1: Some(out.frame.macro_f1),
                    train_seconds: Some(out.train_seconds),
                    inference_ms: Some(ms),
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation row {name} failed: {e}");
                    AblationRow {
                        name: name.clone(),
                        seed,
                        params,
                        accuracy: None,
                        macro_f1: None,
                        train_seconds: None,
                        inference_ms: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}
