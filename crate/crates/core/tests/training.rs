//! Short training runs: logging, clamp invariant, loss wiring, frozen
//! networks and determinism.

use tod_core::networks::build_segmenter;
use tod_core::phantom::{generate_dataset, Dataset, DatasetConfig};
use tod_core::training::{
    pretrain_segmenter, train_denoiser, EpochRecord, SegmenterConfig, StepRecord, TrainObserver,
};
use tod_core::{Error, LossVariant, Network, SegmenterKind, TrainConfig};

fn tiny_data() -> Dataset {
    generate_dataset(&DatasetConfig { size: 32, n_train: 8, n_val: 2, n_test: 2, seed: 5, ..DatasetConfig::default() })
        .unwrap()
}

fn frozen_segmenter() -> Network<f32> {
    let mut s = build_segmenter::<f32>(SegmenterKind::UnetSmall, 3);
    s.freeze();
    s
}

fn cfg(variant: LossVariant, steps: usize) -> TrainConfig {
    TrainConfig {
        loss_variant: variant,
        batch_size: 2,
        epochs: 100,
        max_steps: Some(steps),
        denoiser_channels: vec![8, 1],
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, r: &StepRecord) -> tod_core::Result<()> {
        self.steps.push(*r);
        Ok(())
    }

    fn on_epoch(&mut self, r: &EpochRecord, _: &Network<f32>, _: bool) -> tod_core::Result<()> {
        self.epochs.push(*r);
        Ok(())
    }
}

#[test]
fn ten_step_tod_smoke_run() {
    let data = tiny_data();
    let seg = frozen_segmenter();
    let mut rec = Recorder::default();
    let c = TrainConfig { epochs: 5, ..cfg(LossVariant::Tod, 10) };
    let out = train_denoiser(&data, Some(&seg), &c, &mut rec).unwrap();
    assert_eq!(out.log.steps.len(), 10);
    assert_eq!(rec.steps, out.log.steps);
    assert_eq!(out.task_loss_calls, 10);
    for (i, s) in out.log.steps.iter().enumerate() {
        assert_eq!(s.step, i + 1);
        for v in [s.loss_d, s.loss_gan, s.loss_t, s.loss_mse, s.loss_g] {
            assert!(v.is_finite());
        }
        let want = s.loss_gan + s.loss_t + 0.5 * s.loss_mse;
        assert!((s.loss_g - want).abs() < 1e-5 * want.abs().max(1.0), "{s:?}");
        assert!((0.0..=1.0).contains(&s.loss_t));
    }
    // 8 cases in batches of 2: two full epochs and a partial third.
    assert_eq!(out.log.epochs.len(), 3);
    assert_eq!(rec.epochs.len(), 3);
    assert_eq!(out.log.steps.last().unwrap().epoch, 3);
    assert!(out.half_trained.is_some());
}

#[test]
fn critic_stays_clamped_every_step() {
    let data = tiny_data();
    let seg = frozen_segmenter();
    let c = TrainConfig { critic_steps_per_gen_step: 2, ..cfg(LossVariant::Tod, 40) };
    let out = train_denoiser(&data, Some(&seg), &c, &mut ()).unwrap();
    for s in &out.log.steps {
        assert!(s.critic_max_abs <= 0.01, "step {}: {}", s.step, s.critic_max_abs);
    }
    let max = out.critic.params().iter().map(|p| p.value.max_abs()).fold(0.0f32, f32::max);
    assert!(max <= 0.01f32);
}

#[test]
fn mse_only_never_calls_task_loss_or_critic() {
    let data = tiny_data();
    let out = train_denoiser(&data, None, &cfg(LossVariant::MseOnly, 8), &mut ()).unwrap();
    assert_eq!(out.task_loss_calls, 0);
    for s in &out.log.steps {
        assert_eq!((s.loss_d, s.loss_gan, s.loss_t), (0.0, 0.0, 0.0));
        assert!((s.loss_g - 0.5 * s.loss_mse).abs() < 1e-9);
    }
}

#[test]
fn l1_and_perceptual_fill_the_task_slot() {
    let data = tiny_data();
    for v in [LossVariant::L1, LossVariant::Perceptual] {
        let out = train_denoiser(&data, None, &cfg(v, 3), &mut ()).unwrap();
        assert_eq!(out.task_loss_calls, 0);
        assert!(out.log.steps.iter().all(|s| s.loss_t > 0.0), "{v}");
    }
}

#[test]
fn segmenter_is_untouched_by_denoiser_training() {
    let data = tiny_data();
    let seg = frozen_segmenter();
    let before = seg.checkpoint_bytes();
    train_denoiser(&data, Some(&seg), &cfg(LossVariant::Tod, 6), &mut ()).unwrap();
    assert_eq!(seg.checkpoint_bytes(), before);
    assert!(seg.params().iter().all(|p| p.grad.is_none()));
}

#[test]
fn unfrozen_or_missing_segmenter_is_rejected() {
    let data = tiny_data();
    let live = build_segmenter::<f32>(SegmenterKind::PlainCnn, 1);
    let err = train_denoiser(&data, Some(&live), &cfg(LossVariant::Tod, 1), &mut ()).unwrap_err();
    assert!(matches!(err, Error::NotFrozen(_)), "{err}");
    assert!(train_denoiser(&data, None, &cfg(LossVariant::Tod, 1), &mut ()).is_err());
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let seg = frozen_segmenter();
    let a = train_denoiser(&data, Some(&seg), &cfg(LossVariant::Tod, 6), &mut ()).unwrap();
    let b = train_denoiser(&data, Some(&seg), &cfg(LossVariant::Tod, 6), &mut ()).unwrap();
    assert_eq!(a.generator.checkpoint_bytes(), b.generator.checkpoint_bytes());
    assert_eq!(a.critic.checkpoint_bytes(), b.critic.checkpoint_bytes());
    assert_eq!(a.log.steps, b.log.steps);
    assert_eq!(a.log.epoch_metrics(), b.log.epoch_metrics());
}

#[test]
fn segmenter_pretraining_reports_dice() {
    let data = tiny_data();
    let c = SegmenterConfig { epochs: 2, batch_size: 4, ..SegmenterConfig::default() };
    let out = pretrain_segmenter(SegmenterKind::PlainCnn, &data, &c, &mut ()).unwrap();
    assert_eq!(out.val_dice.len(), 2);
    assert!((1..=2).contains(&out.best_epoch));
    for d in [out.test_dice_ndct, out.test_dice_ldct] {
        assert!((0.0..=1.0).contains(&d));
    }
}
