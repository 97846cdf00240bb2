//! Segmenter pretraining and the alternating denoiser/critic loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::evaluation::{binarize, hard_dice, psnr};
use crate::losses::{
    critic_loss, generator_gan_loss, l1_loss, mse_loss, perceptual_loss, soft_dice_loss,
    task_oriented_loss, weighted_total, LossValue,
};
use crate::networks::{
    build_denoiser, build_discriminator, build_perceptual_net, build_segmenter, Network,
    SegmenterKind, DEFAULT_DENOISER_CHANNELS,
};
use crate::phantom::{Case, Dataset, Image};
use crate::rng::rng_for;
use crate::tensor::{clamp_parameters, RmsProp, Tape, Tensor};

pub const LOG_HEADER: &str = "step,epoch,loss_d,loss_gan,loss_t,loss_mse,loss_g";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    /// `gan + task + λ·mse`.
    Tod,
    /// `λ·mse`; no critic, no task term.
    MseOnly,
    /// `gan + perceptual + λ·mse`.
    Perceptual,
    /// `gan + l1 + λ·mse`.
    L1,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Tod,
        LossVariant::MseOnly,
        LossVariant::Perceptual,
        LossVariant::L1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Tod => "tod",
            LossVariant::MseOnly => "mse_only",
            LossVariant::Perceptual => "perceptual",
            LossVariant::L1 => "l1",
        }
    }

    pub fn uses_critic(self) -> bool {
        self != LossVariant::MseOnly
    }

    pub fn default_metric(self) -> CheckpointMetric {
        match self {
            LossVariant::Tod => CheckpointMetric::ValDice,
            _ => CheckpointMetric::ValPsnr,
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointMetric {
    ValDice,
    ValPsnr,
}

impl CheckpointMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointMetric::ValDice => "val_dice",
            CheckpointMetric::ValPsnr => "val_psnr",
        }
    }
}

impl fmt::Display for CheckpointMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckpointMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_dice" => Ok(CheckpointMetric::ValDice),
            "val_psnr" => Ok(CheckpointMetric::ValPsnr),
            _ => Err(Error::InvalidArgument(format!("unknown checkpoint metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_mse: f64,
    pub clamp_eps: f64,
    pub critic_steps_per_gen_step: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    /// `None` picks the variant's default.
    pub checkpoint_metric: Option<CheckpointMetric>,
    pub denoiser_channels: Vec<usize>,
    pub denoiser_kernel: usize,
    /// Stop after this many generator steps (smoke runs); the interrupted
    /// epoch is still validated.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch_size: 4,
            epochs: 50,
            lambda_mse: 0.5,
            clamp_eps: 0.01,
            critic_steps_per_gen_step: 1,
            seed: 2021,
            loss_variant: LossVariant::Tod,
            checkpoint_metric: None,
            denoiser_channels: DEFAULT_DENOISER_CHANNELS.to_vec(),
            denoiser_kernel: 3,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn metric(&self) -> CheckpointMetric {
        self.checkpoint_metric
            .unwrap_or_else(|| self.loss_variant.default_metric())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.critic_steps_per_gen_step == 0 {
            return bad("batch_size, epochs and critic_steps_per_gen_step must be positive".into());
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_mse.is_finite()) {
            return bad(format!("lambda_mse must be non-negative, got {}", self.lambda_mse));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps.is_finite()) {
            return bad(format!("clamp_eps must be positive, got {}", self.clamp_eps));
        }
        Ok(())
    }

    /// Epoch whose end-of-epoch generator is kept as the half-trained
    /// snapshot (20% of the run, at least the first epoch).
    pub fn half_trained_epoch(&self) -> usize {
        ((self.epochs as f64 * 0.2).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            lr: 0.0001,
            batch_size: 4,
            epochs: 30,
            seed: 2021,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_gan: f64,
    pub loss_t: f64,
    pub loss_mse: f64,
    pub loss_g: f64,
    /// Largest critic parameter magnitude after this step's critic updates.
    pub critic_max_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metric: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv_header(mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{LOG_HEADER}")
    }

    pub fn write_csv_row(mut out: impl Write, r: &StepRecord) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.loss_d, r.loss_gan, r.loss_t, r.loss_mse, r.loss_g
        )
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        Self::write_csv_header(&mut out)?;
        for r in &self.steps {
            Self::write_csv_row(&mut out, r)?;
        }
        Ok(())
    }

    pub fn epoch_metrics(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.metric).collect()
    }
}

/// 1-based epoch with the highest metric; ties go to the earliest.
pub fn select_checkpoint(metrics: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i + 1).ok_or(Error::EmptyBatch("epoch log"))
}

/// Hooks called while training; both default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after validation with the current network and whether it is
    /// the best so far.
    fn on_epoch(&mut self, _record: &EpochRecord, _net: &Network<f32>, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Stacks single-channel images into an `N×1×H×W` tensor.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::EmptyBatch("image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::shape("image batch", &[h, w], &[im.height, im.width]));
        }
        data.extend(im.data.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Splits an `N×1×H×W` tensor back into images.
pub fn batch_images(t: &Tensor<f32>) -> Vec<Image> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    t.data()
        .chunks(h * w)
        .map(|c| Image::new(h, w, c.iter().map(|&v| v as f64).collect()).expect("chunk size"))
        .collect()
}

fn mask_batch(cases: &[&Case]) -> Result<Tensor<f32>> {
    let masks: Vec<Image> = cases.iter().map(|c| c.mask.to_image()).collect();
    image_batch(&masks.iter().collect::<Vec<_>>())
}

/// Shuffled minibatches for one epoch; the last batch may be short.
fn epoch_batches(n: usize, batch: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stream));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Runs `net` in its current mode over `images` in chunks.
pub fn infer_images(net: &Network<f32>, images: &[&Image], chunk: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        out.extend(batch_images(&net.infer(&image_batch(part)?)?));
    }
    Ok(out)
}

/// Denoises images with `G` in eval mode and clamps to `[0, 1]`.
pub fn denoise(g: &Network<f32>, images: &[&Image]) -> Result<Vec<Image>> {
    let mut g = g.clone();
    g.set_training(false);
    Ok(infer_images(&g, images, 8)?.iter().map(Image::clamped).collect())
}

/// Mean hard Dice of a segmenter over `(input, case)` pairs.
pub fn mean_dice(seg: &Network<f32>, inputs: &[&Image], cases: &[&Case]) -> Result<f64> {
    let per = case_dice(seg, inputs, cases)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn case_dice(seg: &Network<f32>, inputs: &[&Image], cases: &[&Case]) -> Result<Vec<f64>> {
    let mut seg = seg.clone();
    seg.set_training(false);
    let probs = infer_images(&seg, inputs, 8)?;
    probs
        .iter()
        .zip(cases)
        .map(|(p, c)| hard_dice(&binarize(p), &c.mask))
        .collect()
}

fn nonfinite(e: Error, step: usize) -> Error {
    match e {
        Error::NonFiniteLoss(what) => Error::NonFinite {
            what: what.to_string(),
            step,
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterOutcome {
    pub network: Network<f32>,
    pub best_epoch: usize,
    pub val_dice: Vec<f64>,
    pub test_dice_ndct: f64,
    pub test_dice_ldct: f64,
}

/// Trains a segmenter with soft Dice on clean NDCT and keeps the epoch with
/// the best validation hard Dice.
pub fn pretrain_segmenter(
    kind: SegmenterKind,
    data: &Dataset,
    cfg: &SegmenterConfig,
    observer: &mut dyn TrainObserver,
) -> Result<SegmenterOutcome> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyBatch("segmenter training data"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("segmenter config must be positive".into()));
    }
    let mut net = build_segmenter::<f32>(kind, cfg.seed);
    let opt = RmsProp::new(cfg.lr);
    let val_cases: Vec<&Case> = data.val.iter().collect();
    let val_inputs: Vec<&Image> = val_cases.iter().map(|c| &c.ndct).collect();
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    let mut val_dice = Vec::new();
    let mut step = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, 0x5345_0000 + epoch as u64) {
            step += 1;
            let cases: Vec<&Case> = idx.iter().map(|&i| &data.train[i]).collect();
            let inputs: Vec<&Image> = cases.iter().map(|c| &c.ndct).collect();
            let mut tape = Tape::new();
            let b = net.bind(&mut tape, true);
            let x = tape.constant(image_batch(&inputs)?);
            let m = tape.constant(mask_batch(&cases)?);
            let probs = net.forward(&mut tape, &b, x)?.output;
            let loss = soft_dice_loss(&mut tape, probs, m).map_err(|e| nonfinite(e, step))?;
            tape.backward(loss.var)?;
            net.collect_grads(&tape, &b);
            net.optimizer_step(opt);
            observer.on_step(&StepRecord {
                step,
                epoch,
                loss_d: 0.0,
                loss_gan: 0.0,
                loss_t: loss.value(&tape),
                loss_mse: 0.0,
                loss_g: loss.value(&tape),
                critic_max_abs: 0.0,
            })?;
        }
        let d = mean_dice(&net, &val_inputs, &val_cases)?;
        val_dice.push(d);
        let is_best = best.as_ref().is_none_or(|(_, b, _)| d > *b);
        if is_best {
            best = Some((epoch, d, net.clone()));
        }
        let rec = EpochRecord {
            epoch,
            metric: d,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&rec, &net, is_best)?;
    }
    let (best_epoch, _, network) = best.expect("at least one epoch");
    let (test_dice_ndct, test_dice_ldct) = if data.test.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let cases: Vec<&Case> = data.test.iter().collect();
        let ndct: Vec<&Image> = cases.iter().map(|c| &c.ndct).collect();
        let ldct: Vec<&Image> = cases.iter().map(|c| &c.ldct).collect();
        (mean_dice(&network, &ndct, &cases)?, mean_dice(&network, &ldct, &cases)?)
    };
    Ok(SegmenterOutcome {
        network,
        best_epoch,
        val_dice,
        test_dice_ndct,
        test_dice_ldct,
    })
}

#[derive(Debug, Clone)]
pub struct DenoiserOutcome {
    /// Generator from the selected epoch.
    pub generator: Network<f32>,
    pub critic: Network<f32>,
    pub log: TrainingLog,
    pub best_epoch: usize,
    /// Generator at [`TrainConfig::half_trained_epoch`].
    pub half_trained: Option<Network<f32>>,
    /// Number of task-oriented loss evaluations.
    pub task_loss_calls: usize,
}

/// Alternating WGAN training of the denoiser.
///
/// Each iteration runs `critic_steps_per_gen_step` critic updates on
/// `(NDCT, detached G(LDCT))`, clamping the critic after each, followed by
/// one generator update. At the end of every epoch the configured
/// validation metric is computed and the best generator kept.
pub fn train_denoiser(
    data: &Dataset,
    segmenter: Option<&Network<f32>>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<DenoiserOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyBatch("denoiser training data"));
    }
    let variant = cfg.loss_variant;
    let metric = cfg.metric();
    let needs_t = variant == LossVariant::Tod || metric == CheckpointMetric::ValDice;
    let seg = match segmenter {
        Some(t) if !t.is_frozen() => return Err(Error::NotFrozen(t.spec().to_string())),
        Some(t) => Some(t),
        None if needs_t => {
            return Err(Error::InvalidArgument(format!(
                "variant {variant} with metric {metric} needs a frozen segmenter"
            )))
        }
        None => None,
    };
    let perceptual = (variant == LossVariant::Perceptual).then(|| build_perceptual_net::<f32>(cfg.seed));

    let mut g = build_denoiser::<f32>(&cfg.denoiser_channels, cfg.denoiser_kernel, cfg.seed)?;
    let mut d = build_discriminator::<f32>(cfg.seed);
    let opt = RmsProp::new(cfg.lr);
    let eps = cfg.clamp_eps as f32;
    let lambda = cfg.lambda_mse;

    let val_cases: Vec<&Case> = data.val.iter().collect();
    let val_ldct: Vec<&Image> = val_cases.iter().map(|c| &c.ldct).collect();

    let mut log = TrainingLog::default();
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    let mut half_trained = None;
    let mut task_loss_calls = 0;
    let mut step = 0;
    let mut stop = false;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, 0x4445_0000 + epoch as u64) {
            if stop {
                break;
            }
            step += 1;
            let cases: Vec<&Case> = idx.iter().map(|&i| &data.train[i]).collect();
            let ldct = image_batch(&cases.iter().map(|c| &c.ldct).collect::<Vec<_>>())?;
            let ndct = image_batch(&cases.iter().map(|c| &c.ndct).collect::<Vec<_>>())?;

            // The generator forward is shared: its (detached) value is the
            // critic's fake batch, since θ_G does not change in between.
            let mut tape = Tape::new();
            let b = g.bind(&mut tape, true);
            let x = tape.constant(ldct);
            let x_star = tape.constant(ndct.clone());
            let x_hat = g.forward(&mut tape, &b, x)?.output;

            let mut loss_d = 0.0;
            if variant.uses_critic() {
                let fake = tape.value(x_hat).clone();
                for _ in 0..cfg.critic_steps_per_gen_step {
                    let mut ct = Tape::new();
                    let cb = d.bind(&mut ct, true);
                    let real = ct.constant(ndct.clone());
                    let fk = ct.constant(fake.clone());
                    let (l, stats) = critic_loss(&mut ct, &d, &cb, real, fk).map_err(|e| nonfinite(e, step))?;
                    loss_d = l.value(&ct);
                    ct.backward(l.var)?;
                    d.collect_grads(&ct, &cb);
                    d.optimizer_step(opt);
                    clamp_parameters(d.trainable_params_mut(), eps);
                    let per_pass = stats.len() / 2;
                    for s in stats.chunks(per_pass.max(1)) {
                        d.apply_batch_stats(s);
                    }
                }
            }
            let critic_max_abs = d
                .params()
                .iter()
                .map(|p| p.value.max_abs() as f64)
                .fold(0.0, f64::max);

            let step_err = |e| nonfinite(e, step);
            let mse = mse_loss(&mut tape, x_hat, x_star).map_err(step_err)?;
            let mut terms: Vec<(LossValue, f64)> = Vec::new();
            let mut gan_v = 0.0;
            if variant.uses_critic() {
                let gan = generator_gan_loss(&mut tape, &d, x_hat).map_err(step_err)?;
                gan_v = gan.value(&tape);
                terms.push((gan, 1.0));
            }
            let slot = match variant {
                LossVariant::Tod => {
                    task_loss_calls += 1;
                    let m = tape.constant(mask_batch(&cases)?);
                    let t = seg.expect("checked above");
                    Some(task_oriented_loss(&mut tape, t, x_hat, m).map_err(step_err)?)
                }
                LossVariant::Perceptual => {
                    let f = perceptual.as_ref().expect("built for this variant");
                    Some(perceptual_loss(&mut tape, f, x_hat, x_star).map_err(step_err)?)
                }
                LossVariant::L1 => Some(l1_loss(&mut tape, x_hat, x_star).map_err(step_err)?),
                LossVariant::MseOnly => None,
            };
            let slot_v = slot.map_or(0.0, |l| l.value(&tape));
            terms.extend(slot.map(|l| (l, 1.0)));
            terms.push((mse, lambda));
            let total = weighted_total(&mut tape, &terms).map_err(step_err)?;
            tape.backward(total.var)?;
            g.collect_grads(&tape, &b);
            g.optimizer_step(opt);

            let rec = StepRecord {
                step,
                epoch,
                loss_d,
                loss_gan: gan_v,
                loss_t: slot_v,
                loss_mse: mse.value(&tape),
                loss_g: total.value(&tape),
                critic_max_abs,
            };
            observer.on_step(&rec)?;
            log.steps.push(rec);
            stop = cfg.max_steps.is_some_and(|m| step >= m);
        }

        let m = match metric {
            CheckpointMetric::ValDice => {
                let den = denoise(&g, &val_ldct)?;
                mean_dice(seg.expect("checked above"), &den.iter().collect::<Vec<_>>(), &val_cases)?
            }
            CheckpointMetric::ValPsnr => {
                let den = denoise(&g, &val_ldct)?;
                let mut s = 0.0;
                for (x, c) in den.iter().zip(&val_cases) {
                    s += psnr(x, &c.ndct, None, 1.0)?;
                }
                s / val_cases.len() as f64
            }
        };
        if !m.is_finite() {
            return Err(Error::NonFinite {
                what: metric.to_string(),
                step,
            });
        }
        let rec = EpochRecord {
            epoch,
            metric: m,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log.epochs.push(rec);
        let is_best = best.as_ref().is_none_or(|(_, b, _)| m > *b);
        if is_best {
            best = Some((epoch, m, g.clone()));
        }
        if epoch == cfg.half_trained_epoch() {
            half_trained = Some(g.clone());
        }
        observer.on_epoch(&rec, &g, is_best)?;
        if stop {
            break;
        }
    }

    let (best_epoch, generator) = match best {
        Some((e, _, net)) => (e, net),
        None => return Err(Error::EmptyBatch("completed epochs")),
    };
    debug_assert_eq!(select_checkpoint(&log.epoch_metrics()).ok(), Some(best_epoch));
    Ok(DenoiserOutcome {
        generator,
        critic: d,
        log,
        best_epoch,
        half_trained,
        task_loss_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_checkpoint_examples() {
        assert_eq!(select_checkpoint(&[0.7, 0.9, 0.8]).unwrap(), 2);
        assert_eq!(select_checkpoint(&[0.9, 0.9]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[0.4]).unwrap(), 1);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.epochs), (0.0005, 4, 50));
        assert_eq!((c.lambda_mse, c.clamp_eps, c.critic_steps_per_gen_step), (0.5, 0.01, 1));
        assert_eq!(c.metric(), CheckpointMetric::ValDice);
        assert_eq!(c.half_trained_epoch(), 10);
        c.validate().unwrap();
        let bad = TrainConfig { lambda_mse: -1.0, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
        }
        assert!("gan".parse::<LossVariant>().is_err());
    }

    #[test]
    fn log_csv_layout() {
        let mut log = TrainingLog::default();
        log.steps.push(StepRecord {
            step: 1,
            epoch: 1,
            loss_d: -0.5,
            loss_gan: 0.25,
            loss_t: 0.125,
            loss_mse: 0.0625,
            loss_g: 1.0,
            critic_max_abs: 0.01,
        });
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "step,epoch,loss_d,loss_gan,loss_t,loss_mse,loss_g\n1,1,-0.5,0.25,0.125,0.0625,1\n"
        );
    }

    #[test]
    fn batches_cover_every_case_once() {
        let b = epoch_batches(10, 4, 7, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 7, 1));
    }
}
