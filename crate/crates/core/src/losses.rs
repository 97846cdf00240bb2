//! Training and analysis losses.
//!
//! Every loss is returned in "minimize me" form and reduces with a mean over
//! elements. The two Wasserstein terms are unbounded; all others are
//! non-negative.

use std::fmt;

use crate::error::{Error, Result};
use crate::networks::{Binding, Network};
use crate::tensor::{BatchStats, Real, Tape, Var};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1e-5;
pub const DEFAULT_LAMBDA_MSE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossName {
    Critic,
    Gan,
    Mse,
    L1,
    Task,
    Perceptual,
    TotalG,
}

impl LossName {
    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Critic => "critic",
            LossName::Gan => "gan",
            LossName::Mse => "mse",
            LossName::L1 => "l1",
            LossName::Task => "task",
            LossName::Perceptual => "perceptual",
            LossName::TotalG => "total_g",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar node on the tape, tagged with the loss it represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossValue {
    pub var: Var,
    pub name: LossName,
}

impl LossValue {
    pub fn value<T: Real>(&self, tape: &Tape<T>) -> f64 {
        tape.value(self.var).data()[0].to_f64()
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn finite<T: Real>(tape: &Tape<T>, v: Var, name: LossName) -> Result<LossValue> {
    let x = tape.value(v).data()[0];
    if !x.is_finite() {
        return Err(Error::NonFiniteLoss(name.as_str()));
    }
    Ok(LossValue { var: v, name })
}

/// `−(mean s_real − mean s_fake)` from precomputed critic scores.
pub fn critic_loss_from_scores<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<LossValue> {
    let mr = tape.mean(real);
    let mf = tape.mean(fake);
    let diff = tape.sub(mf, mr)?;
    finite(tape, diff, LossName::Critic)
}

/// Critic objective on a real batch and a (detached) generated batch.
/// Also returns the batch-norm statistics of both forward passes.
pub fn critic_loss<T: Real>(
    tape: &mut Tape<T>,
    critic: &Network<T>,
    binding: &Binding,
    real: Var,
    fake: Var,
) -> Result<(LossValue, Vec<BatchStats<T>>)> {
    if tape.requires_grad(fake) {
        return Err(Error::InvalidArgument(
            "critic_loss needs a detached fake batch".into(),
        ));
    }
    let r = critic.forward(tape, binding, real)?;
    let f = critic.forward(tape, binding, fake)?;
    let mut stats = r.batch_stats;
    stats.extend(f.batch_stats);
    Ok((critic_loss_from_scores(tape, r.output, f.output)?, stats))
}

/// `−mean s_fake` from precomputed critic scores.
pub fn generator_gan_loss_from_scores<T: Real>(tape: &mut Tape<T>, fake: Var) -> Result<LossValue> {
    let m = tape.mean(fake);
    let v = tape.neg(m);
    finite(tape, v, LossName::Gan)
}

/// Generator adversarial term. The critic is bound without gradients so
/// only the generator's graph receives them.
pub fn generator_gan_loss<T: Real>(tape: &mut Tape<T>, critic: &Network<T>, fake: Var) -> Result<LossValue> {
    let b = critic.bind(tape, false);
    let scores = critic.forward(tape, &b, fake)?.output;
    generator_gan_loss_from_scores(tape, scores)
}

/// `½·mean (x̂ − x*)²`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, x_hat: Var, x_star: Var) -> Result<LossValue> {
    same_shape(tape, x_hat, x_star, "mse_loss")?;
    let d = tape.sub(x_hat, x_star)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    let v = tape.scale(m, T::from_f64(0.5));
    finite(tape, v, LossName::Mse)
}

/// `mean |x̂ − x*|`.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, x_hat: Var, x_star: Var) -> Result<LossValue> {
    same_shape(tape, x_hat, x_star, "l1_loss")?;
    let d = tape.sub(x_hat, x_star)?;
    let a = tape.abs(d);
    let v = tape.mean(a);
    finite(tape, v, LossName::L1)
}

/// `1 − (2Σpm + s)/(Σp + Σm + s)` per sample, averaged over the batch.
pub fn soft_dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, mask: Var) -> Result<LossValue> {
    same_shape(tape, probs, mask, "soft_dice_loss")?;
    let s = T::from_f64(DICE_SMOOTHING);
    let pm = tape.mul(probs, mask)?;
    let inter = tape.sum_per_sample(pm);
    let num = tape.scale(inter, T::from_f64(2.0));
    let num = tape.add_scalar(num, s);
    let sp = tape.sum_per_sample(probs);
    let sm = tape.sum_per_sample(mask);
    let den = tape.add(sp, sm)?;
    let den = tape.add_scalar(den, s);
    let dice = tape.div(num, den)?;
    let m = tape.mean(dice);
    let neg = tape.neg(m);
    let v = tape.add_scalar(neg, T::ONE);
    finite(tape, v, LossName::Task)
}

/// Soft Dice of a frozen segmenter's prediction on `x_hat`. Gradients reach
/// `x_hat` but never the segmenter.
pub fn task_oriented_loss<T: Real>(
    tape: &mut Tape<T>,
    segmenter: &Network<T>,
    x_hat: Var,
    mask: Var,
) -> Result<LossValue> {
    if !segmenter.is_frozen() {
        return Err(Error::NotFrozen(segmenter.spec().to_string()));
    }
    let b = segmenter.bind(tape, false);
    let probs = segmenter.forward(tape, &b, x_hat)?.output;
    soft_dice_loss(tape, probs, mask)
}

/// `½·mean (f(x̂) − f(x*))²` through a fixed feature network.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    features: &Network<T>,
    x_hat: Var,
    x_star: Var,
) -> Result<LossValue> {
    same_shape(tape, x_hat, x_star, "perceptual_loss")?;
    let b = features.bind(tape, false);
    let fa = features.forward(tape, &b, x_hat)?.output;
    let fb = features.forward(tape, &b, x_star)?.output;
    let LossValue { var, .. } = mse_loss(tape, fa, fb)?;
    finite(tape, var, LossName::Perceptual)
}

/// `gan + task + λ·mse`.
pub fn generator_total_loss<T: Real>(
    tape: &mut Tape<T>,
    gan: LossValue,
    task: LossValue,
    mse: LossValue,
    lambda: f64,
) -> Result<LossValue> {
    weighted_total(tape, &[(gan, 1.0), (task, 1.0), (mse, lambda)])
}

/// `Σ wᵢ·Lᵢ`, tagged as the total generator loss.
pub fn weighted_total<T: Real>(tape: &mut Tape<T>, terms: &[(LossValue, f64)]) -> Result<LossValue> {
    let mut acc: Option<Var> = None;
    for &(l, w) in terms {
        let t = tape.scale(l.var, T::from_f64(w));
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    let v = acc.ok_or(Error::EmptyBatch("generator loss terms"))?;
    finite(tape, v, LossName::TotalG)
}
