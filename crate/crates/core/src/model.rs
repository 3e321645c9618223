//! Feature-pyramid CNN + biLSTM classifier.
//!
//! Every input channel runs through its own conv/pool stack. At each tapped
//! pool level the per-channel feature maps are concatenated along the feature
//! axis and summarised by a dedicated biLSTM; the biLSTM summaries are
//! concatenated and classified by a ReLU dense layer and a softmax layer.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::ChannelSet;
use crate::error::{Error, Result};
use crate::ingest::NUM_MODES;
use crate::nn::{
    bilstm, dense, init, pooled_len, Activation, BatchStats, BiLstmParams, BufferId, Graph, LstmParams,
    ParamId, ParamStore, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    /// Batch norm on this layer's input.
    pub batch_norm_before: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_stack: Vec<ConvLayer>,
    pub pool: PoolConfig,
    /// 1-based pool indices feeding a biLSTM.
    pub pyramid_taps: BTreeSet<usize>,
    pub bilstm_units: usize,
    pub dense_sizes: Vec<usize>,
    /// Width (1 or 3) of each input channel, in channel order.
    pub channel_widths: Vec<usize>,
    /// Leading conv layers actually used.
    pub num_conv_layers: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let conv = |filters, kernel, batch_norm_before| ConvLayer {
            filters,
            kernel,
            batch_norm_before,
        };
        ModelConfig {
            conv_stack: vec![
                conv(32, 15, true),
                conv(64, 10, false),
                conv(64, 10, true),
                conv(128, 5, true),
                conv(128, 5, true),
            ],
            pool: PoolConfig { size: 4, stride: 2 },
            pyramid_taps: [1, 2, 3, 5].into(),
            bilstm_units: 128,
            dense_sizes: vec![128, NUM_MODES],
            channel_widths: vec![3, 1, 3, 3, 1],
            num_conv_layers: 5,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.channel_widths = widths;
        self
    }

    pub fn with_taps(mut self, taps: impl IntoIterator<Item = usize>) -> Self {
        self.pyramid_taps = taps.into_iter().collect();
        self
    }

    /// Keep the first `depth` conv layers. Default taps beyond the new depth
    /// are dropped and the last pool is always tapped.
    pub fn with_depth(mut self, depth: usize) -> Self {
        self.num_conv_layers = depth;
        let mut taps: BTreeSet<usize> = self.pyramid_taps.iter().copied().filter(|&t| t < depth).collect();
        taps.insert(depth);
        self.pyramid_taps = taps;
        self
    }

    /// Single tap on the last pool: the plain CNN-biLSTM wiring.
    pub fn cnn_bilstm(self) -> Self {
        let last = self.num_conv_layers;
        self.with_taps([last])
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.conv_stack[..self.num_conv_layers.min(self.conv_stack.len())]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_conv_layers == 0 || self.num_conv_layers > self.conv_stack.len() {
            return fail(format!(
                "num_conv_layers {} outside 1..={}",
                self.num_conv_layers,
                self.conv_stack.len()
            ));
        }
        if self.conv_stack.iter().any(|c| c.filters == 0 || c.kernel == 0) {
            return fail("conv filters and kernels must be positive".into());
        }
        if self.pool.size == 0 || self.pool.stride == 0 {
            return fail("pool size and stride must be positive".into());
        }
        if self.pyramid_taps.is_empty() {
            return fail("at least one pyramid tap is required".into());
        }
        if let Some(&t) = self.pyramid_taps.iter().find(|&&t| t == 0 || t > self.num_conv_layers) {
            return fail(format!("pyramid tap {t} outside pools 1..={}", self.num_conv_layers));
        }
        if self.bilstm_units == 0 {
            return fail("bilstm_units must be positive".into());
        }
        if self.dense_sizes.last() != Some(&NUM_MODES) || self.dense_sizes.contains(&0) {
            return fail(format!("dense sizes must be positive and end in {NUM_MODES}"));
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return fail("at least one input channel of positive width is required".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return fail("batch norm momentum must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    /// Sequence length after each used pool, or an error naming the first
    /// pool whose input is shorter than the window.
    pub fn pool_lengths(&self, input_len: usize) -> Result<Vec<usize>> {
        let mut len = input_len;
        let mut out = Vec::with_capacity(self.num_conv_layers);
        for i in 0..self.num_conv_layers {
            len = pooled_len(len, self.pool.size, self.pool.stride).ok_or_else(|| {
                Error::Config(format!(
                    "input of length {input_len} is too short: pool {} sees {len} steps, needs {}",
                    i + 1,
                    self.pool.size
                ))
            })?;
            out.push(len);
        }
        Ok(out)
    }

    /// Feature width at pool level `level` (1-based), summed over channels.
    pub fn tap_width(&self, level: usize) -> usize {
        self.channel_widths.len() * self.conv_stack[level - 1].filters
    }

    /// Width of the concatenated biLSTM summaries.
    pub fn summary_width(&self) -> usize {
        self.pyramid_taps.len() * 2 * self.bilstm_units
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapShape {
    pub pool: usize,
    pub length: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub output: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// All scalars including batch-norm running statistics.
    pub parameter_count: usize,
    pub trainable_count: usize,
    pub taps: Vec<TapShape>,
    /// Multiply-accumulates of one single-frame forward pass (conv, LSTM and
    /// dense products only).
    pub macs: u64,
    pub layers: Vec<LayerRow>,
}

fn lstm_params(input: usize, units: usize) -> usize {
    2 * 4 * units * (input + units + 1)
}

/// Parameter count and shape table for `cfg` at `input_len` time steps.
pub fn summarize(cfg: &ModelConfig, input_len: usize) -> Result<ModelSummary> {
    cfg.validate()?;
    let lens = cfg.pool_lengths(input_len)?;
    let mut total = 0usize;
    let mut buffers = 0usize;
    let mut macs = 0u64;
    let mut layers = Vec::new();
    for (s, &w) in cfg.channel_widths.iter().enumerate() {
        let mut cin = w;
        let mut len = input_len;
        for (i, layer) in cfg.layers().iter().enumerate() {
            if layer.batch_norm_before {
                total += 4 * cin;
                buffers += 2 * cin;
                layers.push(LayerRow {
                    name: format!("s{s}.bn{}", i + 1),
                    output: vec![len, cin],
                    params: 4 * cin,
                });
            }
            let p = layer.kernel * cin * layer.filters + layer.filters;
            total += p;
            macs += (len * layer.kernel * cin * layer.filters) as u64;
            layers.push(LayerRow {
                name: format!("s{s}.conv{}", i + 1),
                output: vec![len, layer.filters],
                params: p,
            });
            len = lens[i];
            layers.push(LayerRow {
                name: format!("s{s}.pool{}", i + 1),
                output: vec![len, layer.filters],
                params: 0,
            });
            cin = layer.filters;
        }
    }
    let mut taps = Vec::new();
    for &t in &cfg.pyramid_taps {
        let (length, width) = (lens[t - 1], cfg.tap_width(t));
        let p = lstm_params(width, cfg.bilstm_units);
        total += p;
        macs += (2 * length * 4 * cfg.bilstm_units * (width + cfg.bilstm_units)) as u64;
        layers.push(LayerRow {
            name: format!("tap{t}.bilstm"),
            output: vec![2 * cfg.bilstm_units],
            params: p,
        });
        taps.push(TapShape { pool: t, length, width });
    }
    let mut fin = cfg.summary_width();
    for (i, &out) in cfg.dense_sizes.iter().enumerate() {
        let p = fin * out + out;
        total += p;
        macs += (fin * out) as u64;
        layers.push(LayerRow {
            name: format!("dense{i}"),
            output: vec![out],
            params: p,
        });
        fin = out;
    }
    Ok(ModelSummary {
        parameter_count: total,
        trainable_count: total - buffers,
        taps,
        macs,
        layers,
    })
}

#[derive(Clone, Copy, Debug)]
struct BnHandles {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Clone, Copy, Debug)]
struct ConvHandles {
    bn: Option<BnHandles>,
    weight: ParamId,
    bias: ParamId,
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats,
}

pub struct Forward {
    pub probs: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Model weights plus the handles that wire them together.
#[derive(Clone, Debug)]
pub struct FpBiLstm {
    cfg: ModelConfig,
    store: ParamStore,
    streams: Vec<Vec<ConvHandles>>,
    taps: Vec<(usize, BiLstmParams)>,
    dense: Vec<(ParamId, ParamId)>,
}

impl FpBiLstm {
    /// Fresh model with seeded Glorot-uniform weights, LSTM forget bias 1,
    /// batch norm at identity.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut streams = Vec::new();
        for (s, &w) in cfg.channel_widths.iter().enumerate() {
            let mut cin = w;
            let mut convs = Vec::new();
            for (i, layer) in cfg.layers().iter().enumerate() {
                let l = i + 1;
                let bn = if layer.batch_norm_before {
                    Some(BnHandles {
                        gamma: store.add_param(format!("s{s}.bn{l}.gamma"), Tensor::full(&[cin], 1.0))?,
                        beta: store.add_param(format!("s{s}.bn{l}.beta"), Tensor::zeros(&[cin]))?,
                        mean: store.add_buffer(format!("s{s}.bn{l}.running_mean"), Tensor::zeros(&[cin]))?,
                        var: store.add_buffer(format!("s{s}.bn{l}.running_var"), Tensor::full(&[cin], 1.0))?,
                    })
                } else {
                    None
                };
                let k = layer.kernel;
                let weight = store.add_param(
                    format!("s{s}.conv{l}.weight"),
                    init::glorot_uniform(&mut rng, &[k, cin, layer.filters], k * cin, k * layer.filters),
                )?;
                let bias = store.add_param(format!("s{s}.conv{l}.bias"), Tensor::zeros(&[layer.filters]))?;
                convs.push(ConvHandles { bn, weight, bias });
                cin = layer.filters;
            }
            streams.push(convs);
        }
        let h = cfg.bilstm_units;
        let mut taps = Vec::new();
        for &t in &cfg.pyramid_taps {
            let f = cfg.tap_width(t);
            let mut dir = |name: &str| -> Result<LstmParams> {
                Ok(LstmParams {
                    wx: store.add_param(format!("tap{t}.{name}.wx"), init::glorot_uniform(&mut rng, &[f, 4 * h], f, 4 * h))?,
                    wh: store.add_param(format!("tap{t}.{name}.wh"), init::glorot_uniform(&mut rng, &[h, 4 * h], h, 4 * h))?,
                    bias: store.add_param(format!("tap{t}.{name}.bias"), init::lstm_bias(h))?,
                })
            };
            let forward = dir("fw")?;
            let backward = dir("bw")?;
            taps.push((t, BiLstmParams { forward, backward }));
        }
        let mut dense_ids = Vec::new();
        let mut fin = cfg.summary_width();
        for (i, &out) in cfg.dense_sizes.iter().enumerate() {
            let w = store.add_param(format!("dense{i}.weight"), init::glorot_uniform(&mut rng, &[fin, out], fin, out))?;
            let b = store.add_param(format!("dense{i}.bias"), Tensor::zeros(&[out]))?;
            dense_ids.push((w, b));
            fin = out;
        }
        Ok(FpBiLstm {
            cfg,
            store,
            streams,
            taps,
            dense: dense_ids,
        })
    }

    /// Rebuild from a config and a populated store (e.g. a checkpoint).
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = FpBiLstm::new(cfg, 0)?;
        if model.store.params().len() != store.params().len() || model.store.buffers().len() != store.buffers().len() {
            return Err(Error::Checkpoint("parameter set does not match the model config".into()));
        }
        for (a, b) in model.store.params().iter().zip(store.params()).chain(model.store.buffers().iter().zip(store.buffers())) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weights of the first dense layer, the only L2-regularised tensor.
    pub fn l2_params(&self) -> BTreeSet<ParamId> {
        self.dense.first().map(|&(w, _)| w).into_iter().collect()
    }

    /// Record the forward pass. `inputs` holds one `[batch, length, width]`
    /// tensor per channel.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, inputs: Vec<Tensor>, training: bool) -> Result<Forward> {
        if inputs.len() != self.cfg.channel_widths.len() {
            return Err(Error::invalid(format!(
                "model expects {} channels, got {}",
                self.cfg.channel_widths.len(),
                inputs.len()
            )));
        }
        let (batch, len) = (inputs[0].dim(0), inputs[0].dim(1));
        for (t, &w) in inputs.iter().zip(&self.cfg.channel_widths) {
            if t.shape() != [batch, len, w] {
                return Err(Error::Shape {
                    op: "model input",
                    lhs: t.shape().to_vec(),
                    rhs: vec![batch, len, w],
                });
            }
        }
        self.cfg.pool_lengths(len)?;
        let store = &self.store;
        let eps = self.cfg.bn_eps;
        let mut bn_updates = Vec::new();
        let n_levels = self.cfg.num_conv_layers;
        let mut levels: Vec<Vec<Var>> = vec![Vec::new(); n_levels];
        for (input, convs) in inputs.into_iter().zip(&self.streams) {
            let mut x = g.input(input);
            for (i, h) in convs.iter().enumerate() {
                if let Some(bn) = h.bn {
                    let (gamma, beta) = (g.param(store, bn.gamma), g.param(store, bn.beta));
                    x = if training {
                        let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                        bn_updates.push(BnUpdate {
                            mean: bn.mean,
                            var: bn.var,
                            stats,
                        });
                        y
                    } else {
                        g.batch_norm_infer(x, gamma, beta, store.buffer(bn.mean).data(), store.buffer(bn.var).data(), eps)?
                    };
                }
                let (w, b) = (g.param(store, h.weight), g.param(store, h.bias));
                x = g.conv1d(x, w, b)?;
                x = g.maxpool1d(x, self.cfg.pool.size, self.cfg.pool.stride)?;
                levels[i].push(x);
            }
        }
        let mut summaries = Vec::with_capacity(self.taps.len());
        for (t, p) in &self.taps {
            let fused = if levels[t - 1].len() == 1 {
                levels[t - 1][0]
            } else {
                g.concat_last(&levels[t - 1])?
            };
            let (_, last) = bilstm(g, store, fused, p)?;
            summaries.push(last);
        }
        let mut x = if summaries.len() == 1 { summaries[0] } else { g.concat_last(&summaries)? };
        let n_dense = self.dense.len();
        for (i, &(w, b)) in self.dense.iter().enumerate() {
            let act = if i + 1 == n_dense { Activation::Softmax } else { Activation::Relu };
            x = dense(g, store, x, w, b, act)?;
        }
        Ok(Forward { probs: x, bn_updates })
    }

    /// Fold training-batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        let m = self.cfg.bn_momentum;
        for u in updates {
            for (r, b) in self.store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Inference-mode class probabilities, `batch_size` frames at a time.
    pub fn predict_proba(&self, sets: &[&ChannelSet], batch_size: usize) -> Result<Vec<[f64; NUM_MODES]>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, batch_inputs(chunk)?, false)?;
            for row in g.value(fwd.probs).data().chunks_exact(NUM_MODES) {
                out.push(row.try_into().expect("8 columns"));
            }
        }
        Ok(out)
    }
}

/// Stack channel sets into one `[batch, length, width]` tensor per channel.
pub fn batch_inputs(sets: &[&ChannelSet]) -> Result<Vec<Tensor>> {
    let first = sets.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (len, widths) = (first.len(), first.widths());
    let mut out = Vec::with_capacity(widths.len());
    for (k, &w) in widths.iter().enumerate() {
        let mut data = Vec::with_capacity(sets.len() * len * w);
        for s in sets {
            let ch = s.channels.get(k).ok_or_else(|| Error::invalid("channel sets disagree on channel count"))?;
            if ch.len != len || ch.width != w {
                return Err(Error::invalid("channel sets in a batch must share length and widths"));
            }
            data.extend_from_slice(&ch.data);
        }
        out.push(Tensor::new(vec![sets.len(), len, w], data)?);
    }
    Ok(out)
}

/// One-hot `[batch, 8]` targets from mode ids.
pub fn one_hot(labels: &[u8]) -> Tensor {
    let mut data = vec![0.0; labels.len() * NUM_MODES];
    for (i, &l) in labels.iter().enumerate() {
        data[i * NUM_MODES + l as usize - 1] = 1.0;
    }
    Tensor::new(vec![labels.len(), NUM_MODES], data).expect("non-empty labels")
}

/// Arg-max mode id per row; ties go to the smallest id.
pub fn predict(probs: &[[f64; NUM_MODES]]) -> Vec<u8> {
    probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..NUM_MODES {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8 + 1
        })
        .collect()
}

/// MSE of `probs` against one-hot `labels`, as a plain number.
pub fn mse_of(probs: &[[f64; NUM_MODES]], labels: &[u8]) -> f64 {
    let mut sum = 0.0;
    for (row, &l) in probs.iter().zip(labels) {
        for (k, p) in row.iter().enumerate() {
            let t = if k + 1 == l as usize { 1.0 } else { 0.0 };
            sum += (p - t) * (p - t);
        }
    }
    sum / (probs.len() * NUM_MODES) as f64
}

/// Record forward pass plus MSE against the frames' one-hot labels.
pub fn batch_loss<'a>(model: &'a FpBiLstm, g: &mut Graph<'a>, sets: &[&ChannelSet], training: bool) -> Result<(Var, Forward)> {
    let fwd = model.forward(g, batch_inputs(sets)?, training)?;
    let labels: Vec<u8> = sets.iter().map(|s| s.frame_label).collect();
    let target = g.input(one_hot(&labels));
    let loss = g.mse(fwd.probs, target)?;
    Ok((loss, fwd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tap_geometry() {
        let s = summarize(&ModelConfig::default(), 1200).unwrap();
        let lens: Vec<usize> = s.taps.iter().map(|t| t.length).collect();
        let widths: Vec<usize> = s.taps.iter().map(|t| t.width).collect();
        assert_eq!(lens, [599, 298, 148, 35]);
        assert_eq!(widths, [160, 320, 320, 640]);
        assert_eq!(ModelConfig::default().summary_width(), 1024);
        assert_eq!(ModelConfig::default().pool_lengths(1200).unwrap(), [599, 298, 148, 73, 35]);
    }

    #[test]
    fn summary_matches_instantiated_store() {
        let cfg = ModelConfig {
            conv_stack: vec![
                ConvLayer { filters: 4, kernel: 5, batch_norm_before: true },
                ConvLayer { filters: 6, kernel: 4, batch_norm_before: false },
                ConvLayer { filters: 6, kernel: 3, batch_norm_before: true },
            ],
            num_conv_layers: 3,
            pyramid_taps: [1, 3].into(),
            bilstm_units: 5,
            dense_sizes: vec![7, 8],
            channel_widths: vec![3, 1],
            ..ModelConfig::default()
        };
        let s = summarize(&cfg, 40).unwrap();
        let m = FpBiLstm::new(cfg, 1).unwrap();
        assert_eq!(s.parameter_count, m.store().total_count());
        assert_eq!(s.trainable_count, m.store().trainable_count());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::default();
        cfg.pyramid_taps = [6].into();
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::default().with_depth(2).with_taps([3]);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.dense_sizes = vec![128, 7];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().pool_lengths(90).is_err());
    }

    #[test]
    fn depth_ablation_keeps_last_pool_tapped() {
        let taps: Vec<Vec<usize>> = (1..=5)
            .map(|d| ModelConfig::default().with_depth(d).pyramid_taps.into_iter().collect())
            .collect();
        assert_eq!(taps, vec![vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4], vec![1, 2, 3, 5]]);
    }

    #[test]
    fn argmax_prefers_smallest_id() {
        let mut one_hot_row = [0.0; 8];
        one_hot_row[3] = 1.0;
        assert_eq!(predict(&[one_hot_row, [0.125; 8]]), vec![4, 1]);
    }
}
