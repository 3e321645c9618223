mod common;

use common::{model_grad_check, narrow_model, synth_sets};
use fpbilstm::model::FpBiLstm;
use fpbilstm::nn::reduce_lr_on_plateau;
use fpbilstm::train::{fit, TrainConfig};

#[test]
fn full_model_gradients_match_finite_differences() {
    let sets = synth_sets(1, 5);
    let batch: Vec<_> = sets.iter().step_by(2).collect();
    let mut model = FpBiLstm::new(narrow_model(), 3).unwrap();
    let (worst, checked) = model_grad_check(&mut model, &batch, 6, 11);
    eprintln!("{checked} sampled gradients, worst relative error {worst:.2e}");
    assert!(checked > 100);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn overfits_ten_frames() {
    let sets = synth_sets(2, 7);
    let ten: Vec<_> = sets.iter().step_by(2).chain(sets.iter().skip(1).step_by(8)).cloned().collect();
    assert_eq!(ten.len(), 10);
    let cfg = TrainConfig {
        lr: 1e-2,
        min_lr: 1e-2,
        batch_size: 10,
        max_epochs: 400,
        early_stop_patience: 400,
        l2: 0.0,
        ..TrainConfig::default()
    };
    let res = fit(&ten, &ten, &narrow_model(), &cfg, |_| {}).unwrap();
    let last = res.log.epochs.last().unwrap();
    let best = res.log.best().unwrap();
    eprintln!("final train loss {:.2e}, best val loss {:.2e} at epoch {}", last.train_loss, best.val_loss, best.epoch);
    assert!(best.val_loss < 1e-3);
    assert_eq!(best.val_acc, 100.0);
}

#[test]
fn same_seed_same_trajectory() {
    let sets = synth_sets(3, 8);
    let (train, val) = sets.split_at(16);
    let cfg = TrainConfig { lr: 1e-3, batch_size: 8, max_epochs: 3, seed: 42, ..TrainConfig::default() };
    let a = fit(train, val, &narrow_model(), &cfg, |_| {}).unwrap();
    let b = fit(train, val, &narrow_model(), &cfg, |_| {}).unwrap();
    assert!(a.log.same_trajectory(&b.log));
    assert_eq!(a.model.store().params(), b.model.store().params());
    let c = fit(train, val, &narrow_model(), &TrainConfig { seed: 43, ..cfg }, |_| {}).unwrap();
    assert!(!a.log.same_trajectory(&c.log));
}

#[test]
fn schedule_and_stopping_follow_validation_loss() {
    let sets = synth_sets(4, 9);
    let (train, val) = sets.split_at(24);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        max_epochs: 12,
        lr_patience: 1,
        early_stop_patience: 3,
        ..TrainConfig::default()
    };
    let res = fit(train, val, &narrow_model(), &cfg, |_| {}).unwrap();
    let epochs = &res.log.epochs;
    let losses: Vec<f64> = epochs.iter().map(|r| r.val_loss).collect();
    eprintln!("val losses {losses:?}, decays at {:?}", res.log.lr_decays());
    // each epoch's rate is the scheduler's answer to the losses before it
    for (i, r) in epochs.iter().enumerate() {
        let want = reduce_lr_on_plateau(&losses[..i], cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr).unwrap();
        assert_eq!(r.lr, want, "epoch {}", r.epoch);
    }
    // rates only change after an epoch without improvement
    for e in res.log.lr_decays() {
        let i = e - 1;
        let best_before = losses[..i - 1].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(losses[i - 1] >= best_before);
    }
    let best = res.log.best().unwrap();
    assert_eq!(res.best_epoch, best.epoch);
    assert!(epochs.len() == cfg.max_epochs || epochs.len() == best.epoch + cfg.early_stop_patience);
}
