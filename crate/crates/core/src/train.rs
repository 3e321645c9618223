//! Training protocol: stratified split, shuffled mini-batches, Adam with L2
//! on the first dense layer, plateau learning-rate decay, early stopping on
//! validation loss, best-epoch weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::ChannelSet;
use crate::error::{Error, Result};
use crate::ingest::{Dataset, SplitTag};
use crate::model::{batch_loss, mse_of, predict, FpBiLstm, ModelConfig};
use crate::nn::{Adam, AdamConfig, Graph, PlateauScheduler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2: f64,
    pub early_stop_patience: usize,
    pub lr_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fraction of each class kept for sub-training.
    pub split_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            lr: 1e-4,
            min_lr: 1e-5,
            lr_factor: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 0.001,
            early_stop_patience: 5,
            lr_patience: 3,
            max_epochs: 100,
            seed: 0,
            split_ratio: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open("split_ratio", self.split_ratio)?;
        open("lr_factor", self.lr_factor)?;
        open("beta1", self.beta1)?;
        open("beta2", self.beta2)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 || self.lr_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("need 0 <= min_lr <= lr and lr > 0, got lr {} min_lr {}", self.lr, self.min_lr)));
        }
        if !(self.l2 >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("l2 must be non-negative and adam_eps positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
            );
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }

    /// Epochs where the learning rate dropped relative to the previous one.
    pub fn lr_decays(&self) -> Vec<usize> {
        self.epochs.windows(2).filter(|w| w[1].lr < w[0].lr).map(|w| w[1].epoch).collect()
    }

    /// Ignores wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                (a.epoch, a.train_loss, a.train_acc, a.val_loss, a.val_acc, a.lr)
                    == (b.epoch, b.train_loss, b.train_acc, b.val_loss, b.val_acc, b.lr)
            })
    }
}

/// Per-class split of frame indices. Each class's `n * ratio` is rounded by
/// largest remainder (ties go to the training side), then clamped so both
/// sides keep at least one frame.
pub fn stratified_split_indices(labels: &[u8], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        let n = idx.len();
        if n < 2 {
            return Err(Error::ClassTooSmall { class, count: n });
        }
        let n_train = split_count(n, ratio);
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn split_count(n: usize, ratio: f64) -> usize {
    let exact_train = n as f64 * ratio;
    let exact_val = n as f64 - exact_train;
    let (mut t, v) = (exact_train.floor() as usize, exact_val.floor() as usize);
    if t + v < n {
        // one unit left over; the larger remainder wins, ties to training
        if exact_train.fract() >= exact_val.fract() {
            t += 1;
        }
    }
    t.clamp(1, n - 1)
}

/// Stratified split of a raw dataset into sub-train and sub-validation.
pub fn stratified_split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (ti, vi) = stratified_split_indices(&ds.frame_labels(), ratio, seed)?;
    let pick = |idx: &[usize], tag| Dataset::new(idx.iter().map(|&i| ds.frames()[i].clone()).collect(), tag);
    Ok((pick(&ti, SplitTag::SubTrain)?, pick(&vi, SplitTag::SubValidation)?))
}

/// Same split over preprocessed frames.
pub fn stratified_split_sets(sets: &[ChannelSet], ratio: f64, seed: u64) -> Result<(Vec<ChannelSet>, Vec<ChannelSet>)> {
    let labels: Vec<u8> = sets.iter().map(|s| s.frame_label).collect();
    let (ti, vi) = stratified_split_indices(&labels, ratio, seed)?;
    Ok((ti.iter().map(|&i| sets[i].clone()).collect(), vi.iter().map(|&i| sets[i].clone()).collect()))
}

/// Visiting order for `epoch`, a function of (seed, epoch) only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    /// Weights from the epoch with the lowest validation loss.
    pub model: FpBiLstm,
    pub best_epoch: usize,
    /// Optimizer state after the final epoch.
    pub optimizer: Adam,
    pub log: TrainLog,
}

/// Validation loss and accuracy (percent) in inference mode.
pub fn evaluate_loss(model: &FpBiLstm, sets: &[ChannelSet], batch_size: usize) -> Result<(f64, f64)> {
    let refs: Vec<&ChannelSet> = sets.iter().collect();
    let probs = model.predict_proba(&refs, batch_size)?;
    let labels: Vec<u8> = sets.iter().map(|s| s.frame_label).collect();
    let correct = predict(&probs).iter().zip(&labels).filter(|(p, t)| p == t).count();
    Ok((mse_of(&probs, &labels), 100.0 * correct as f64 / sets.len() as f64))
}

/// Train a fresh model. `on_epoch` sees every record as it is produced.
pub fn fit(
    train: &[ChannelSet],
    val: &[ChannelSet],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let widths = train[0].widths();
    if widths != model_cfg.channel_widths {
        return Err(Error::Config(format!(
            "model expects channel widths {:?}, data has {:?}",
            model_cfg.channel_widths, widths
        )));
    }
    let mut model = FpBiLstm::new(model_cfg.clone(), cfg.seed)?;
    let l2_set = model.l2_params();
    let mut adam = Adam::new(cfg.adam(), model.store());
    let mut sched = PlateauScheduler::new(cfg.lr_factor, cfg.lr_patience, cfg.min_lr)?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, FpBiLstm)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ChannelSet> = chunk.iter().map(|&i| &train[i]).collect();
            let (grads, updates, loss, hits) = {
                let mut g = Graph::new();
                let (loss, fwd) = batch_loss(&model, &mut g, &batch, true)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: b + 1,
                        what: format!("training loss {value}"),
                    });
                }
                let probs: Vec<[f64; 8]> = g
                    .value(fwd.probs)
                    .data()
                    .chunks_exact(8)
                    .map(|r| r.try_into().expect("8 columns"))
                    .collect();
                let hits = predict(&probs).iter().zip(&batch).filter(|(p, s)| **p == s.frame_label).count();
                g.backward(loss)?;
                (g.param_grads(), fwd.bn_updates, value, hits)
            };
            adam.step(model.store_mut(), &grads, &l2_set, cfg.l2).map_err(|e| Error::NonFinite {
                epoch,
                batch: b + 1,
                what: e.to_string(),
            })?;
            model.apply_bn_updates(updates);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let (val_loss, val_acc) = evaluate_loss(&model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                what: format!("validation loss {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: 100.0 * correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            lr: adam.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} acc {:.1} val_loss {:.5} val_acc {:.1} lr {:.1e}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc,
            record.lr
        );
        on_epoch(&record);
        log.epochs.push(record);

        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        adam.lr = sched.observe(val_loss, adam.lr);
        if since_best >= cfg.early_stop_patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(FitResult {
        model,
        best_epoch,
        optimizer: adam,
        log,
    })
}
