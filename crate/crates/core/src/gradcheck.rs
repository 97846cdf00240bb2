//! Central finite-difference checks of tape gradients in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    critic_loss, generator_gan_loss, generator_total_loss, l1_loss, mse_loss, perceptual_loss,
    soft_dice_loss, task_oriented_loss,
};
use crate::networks::{
    build_denoiser, build_discriminator, build_perceptual_net, build_segmenter, Binding, Network,
    SegmenterKind,
};
use crate::rng::rng_for;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor so vanishing gradients compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
/// Largest share of probes a check may skip before it counts as vacuous.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates whose `±h` probe crossed a branch of a non-smooth op,
    /// where a central difference does not estimate the derivative.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE && self.checked > 0
    }

    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    fn record(&mut self, analytic: f64, probe: Probe, base: &[u8]) {
        if probe.up.1 != base || probe.down.1 != base {
            self.skipped += 1;
            return;
        }
        let numeric = (probe.up.0 - probe.down.0) / (2.0 * FD_STEP);
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
    }

    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

const EMPTY: GradCheck = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };

/// Loss value and branch pattern at one point.
type Eval = (f64, Vec<u8>);

struct Probe {
    up: Eval,
    down: Eval,
}

fn evaluated(tape: &Tape<f64>, v: Var) -> Result<Eval> {
    Ok((tape.value(v).item()?, tape.branch_pattern()))
}

/// Compares the gradient of the scalar built by `f` with respect to each of
/// `inputs` against central differences, on every coordinate.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>]| -> Result<Eval> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        evaluated(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.branch_pattern();
    tape.backward(out)?;
    let mut res = EMPTY;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let g = tape
            .grad(v)
            .map_or_else(|| vec![0.0; inputs[k].len()], |g| g.data().to_vec());
        for (i, &analytic) in g.iter().enumerate() {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = x0;
            res.record(analytic, Probe { up, down }, &base);
        }
    }
    Ok(res)
}

/// Like [`check_inputs`], additionally checking the listed
/// `(parameter, element)` coordinates of a trainable `net`.
pub fn check_network(
    net: &mut Network<f64>,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    f: impl Fn(&mut Tape<f64>, &Network<f64>, &Binding, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    if net.is_frozen() && !coords.is_empty() {
        return Err(Error::InvalidArgument(format!("{} is frozen; its parameters have no gradient", net.spec())));
    }
    let eval = |net: &Network<f64>, xs: &[Tensor<f64>], rg: bool| -> Result<(Tape<f64>, Binding, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, rg);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), rg)).collect();
        let out = f(&mut tape, net, &b, &vars)?;
        Ok((tape, b, vars, out))
    };

    let input_check = check_inputs(inputs, |tape, vars| {
        let b = net.bind(tape, false);
        f(tape, net, &b, vars)
    })?;

    let (mut tape, b, _, out) = eval(net, inputs, true)?;
    let base = tape.branch_pattern();
    tape.backward(out)?;
    let grads: Vec<f64> = coords
        .iter()
        .map(|&(p, i)| tape.grad(b.vars()[p]).map_or(0.0, |g| g.data()[i]))
        .collect();
    let mut res = EMPTY;
    for (&(p, i), &analytic) in coords.iter().zip(&grads) {
        let mut at = |delta: f64| -> Result<Eval> {
            let param = net.trainable_params_mut().nth(p).expect("coordinate in range");
            let x0 = param.value.data()[i];
            param.value.data_mut()[i] = x0 + delta;
            let r = eval(net, inputs, false);
            let param = net.trainable_params_mut().nth(p).expect("coordinate in range");
            param.value.data_mut()[i] = x0;
            let (tape, _, _, out) = r?;
            evaluated(&tape, out)
        };
        let probe = Probe { up: at(FD_STEP)?, down: at(-FD_STEP)? };
        res.record(analytic, probe, &base);
    }
    Ok(input_check.merge(res))
}

/// Result of one suite entry over all its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub check: GradCheck,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ out ⊙ w` with fixed random weights, turning any output into a scalar
/// whose gradient exercises every element.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_for(seed, 0x5052_4f4a);
    let w = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: OpFn,
}

fn shape_1(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..5)]
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = shape_1(rng);
    vec![signed(rng, &s), signed(rng, &s)]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = shape_1(rng);
    vec![signed(rng, &s)]
}

fn image(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (n, c) = (rng.random_range(1..3), rng.random_range(1..3));
    let h = 2 * rng.random_range(1..4);
    let w = 2 * rng.random_range(1..4);
    vec![signed(rng, &[n, c, h, w])]
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: two_same, f: |t, v, s| { let o = t.add(v[0], v[1])?; project(t, o, s) } },
        OpCase {
            name: "add_broadcast",
            inputs: |r| {
                let s = shape_1(r);
                vec![signed(r, &s), signed(r, &[1, s[1], 1])]
            },
            f: |t, v, s| { let o = t.add(v[0], v[1])?; project(t, o, s) },
        },
        OpCase { name: "sub", inputs: two_same, f: |t, v, s| { let o = t.sub(v[0], v[1])?; project(t, o, s) } },
        OpCase { name: "mul", inputs: two_same, f: |t, v, s| { let o = t.mul(v[0], v[1])?; project(t, o, s) } },
        OpCase {
            name: "div",
            inputs: |r| {
                let s = shape_1(r);
                vec![signed(r, &s), uniform(r, &s, 0.5, 1.5)]
            },
            f: |t, v, s| { let o = t.div(v[0], v[1])?; project(t, o, s) },
        },
        OpCase { name: "square", inputs: one, f: |t, v, s| { let o = t.square(v[0]); project(t, o, s) } },
        OpCase { name: "abs", inputs: one, f: |t, v, s| { let o = t.abs(v[0]); project(t, o, s) } },
        OpCase { name: "sigmoid", inputs: one, f: |t, v, s| { let o = t.sigmoid(v[0]); project(t, o, s) } },
        OpCase { name: "leaky_relu", inputs: one, f: |t, v, s| { let o = t.leaky_relu(v[0], 0.2); project(t, o, s) } },
        OpCase { name: "scale", inputs: one, f: |t, v, s| { let o = t.scale(v[0], -1.7); project(t, o, s) } },
        OpCase { name: "neg", inputs: one, f: |t, v, s| { let o = t.neg(v[0]); project(t, o, s) } },
        OpCase { name: "add_scalar", inputs: one, f: |t, v, s| { let o = t.add_scalar(v[0], 0.3); project(t, o, s) } },
        OpCase {
            name: "clamp_values",
            inputs: |r| {
                let s = shape_1(r);
                vec![uniform(r, &s, -0.45, 0.45)]
            },
            f: |t, v, s| { let o = t.clamp_values(v[0], -0.5, 0.5); project(t, o, s) },
        },
        OpCase { name: "sum", inputs: one, f: |t, v, _| { let q = t.square(v[0]); Ok(t.sum(q)) } },
        OpCase { name: "mean", inputs: one, f: |t, v, _| { let q = t.square(v[0]); Ok(t.mean(q)) } },
        OpCase { name: "sum_per_sample", inputs: one, f: |t, v, s| { let o = t.sum_per_sample(v[0]); project(t, o, s) } },
        OpCase {
            name: "reshape",
            inputs: one,
            f: |t, v, s| {
                let n = t.value(v[0]).len();
                let o = t.reshape(v[0], &[n])?;
                project(t, o, s)
            },
        },
        OpCase {
            name: "conv2d",
            inputs: |r| {
                let (n, ci, co) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..3));
                let k = [1, 3][r.random_range(0..2)];
                let hw = r.random_range(4..7);
                vec![signed(r, &[n, ci, hw, hw]), signed(r, &[co, ci, k, k]), signed(r, &[co])]
            },
            f: |t, v, s| {
                let k = t.shape(v[1])[2];
                let geom = match s % 3 {
                    0 => ConvGeometry::new(1, k / 2),
                    1 => ConvGeometry::new(2, 1),
                    _ => ConvGeometry::dilated(k / 2 * 2, 2),
                };
                let o = t.conv2d(v[0], v[1], Some(v[2]), geom)?;
                project(t, o, s)
            },
        },
        OpCase {
            name: "batch_norm_train",
            inputs: |r| {
                let c = r.random_range(1..3);
                vec![signed(r, &[2, c, 3, 3]), uniform(r, &[c], 0.5, 1.5), signed(r, &[c])]
            },
            f: |t, v, s| {
                let (o, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                project(t, o, s)
            },
        },
        OpCase {
            name: "batch_norm_eval",
            inputs: |r| {
                let c = r.random_range(1..3);
                vec![signed(r, &[2, c, 3, 3]), uniform(r, &[c], 0.5, 1.5), signed(r, &[c])]
            },
            f: |t, v, s| {
                let c = t.shape(v[1])[0];
                let (m, var) = (vec![0.1; c], vec![0.8; c]);
                let (o, _) = t.batch_norm(v[0], v[1], v[2], Some((&m, &var)), 1e-5)?;
                project(t, o, s)
            },
        },
        OpCase {
            name: "dense",
            inputs: |r| {
                let (n, f, o) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
                vec![signed(r, &[n, f]), signed(r, &[f, o]), signed(r, &[o])]
            },
            f: |t, v, s| { let o = t.dense(v[0], v[1], v[2])?; project(t, o, s) },
        },
        OpCase { name: "avg_pool2", inputs: image, f: |t, v, s| { let o = t.avg_pool2(v[0])?; project(t, o, s) } },
        OpCase { name: "upsample2", inputs: image, f: |t, v, s| { let o = t.upsample2(v[0])?; project(t, o, s) } },
        OpCase {
            name: "concat_channels",
            inputs: |r| {
                let (n, h) = (r.random_range(1..3), r.random_range(2..4));
                vec![signed(r, &[n, 1, h, h]), signed(r, &[n, 2, h, h])]
            },
            f: |t, v, s| { let o = t.concat_channels(v[0], v[1])?; project(t, o, s) },
        },
        OpCase { name: "global_avg_pool", inputs: image, f: |t, v, s| { let o = t.global_avg_pool(v[0])?; project(t, o, s) } },
    ]
}

fn random_coords(net: &mut Network<f64>, rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = net.trainable_params_mut().map(|p| p.value.len()).collect();
    (0..n)
        .map(|_| {
            let p = rng.random_range(0..sizes.len());
            (p, rng.random_range(0..sizes[p]))
        })
        .collect()
}

fn frozen<T>(mut n: Network<T>) -> Network<T>
where
    T: crate::tensor::Real,
{
    n.freeze();
    n
}

fn batch_of(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
    uniform(rng, &[n, 1, size, size], 0.0, 1.0)
}

fn mask_of(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
    let mut t = uniform(rng, &[n, 1, size, size], 0.0, 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = if *v > 0.6 { 1.0 } else { 0.0 });
    t
}

fn loss_entries(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    const SIZE: usize = 8;
    // The critic downsamples three times; 16 keeps its last batch norm
    // well conditioned.
    const CRITIC_SIZE: usize = 16;
    const PARAM_COORDS: usize = 6;
    let mut acc: Vec<(&'static str, GradCheck)> = Vec::new();
    let mut add = |name: &'static str, c: GradCheck| match acc.iter_mut().find(|(n, _)| *n == name) {
        Some((_, g)) => *g = g.merge(c),
        None => acc.push((name, c)),
    };
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let mut rng = rng_for(s, 0x4c4f_5353);
        let kind = SegmenterKind::ALL[i % SegmenterKind::ALL.len()];
        let x = batch_of(&mut rng, 2, SIZE);
        let y = batch_of(&mut rng, 2, SIZE);
        let m = mask_of(&mut rng, 2, SIZE);

        let real = batch_of(&mut rng, 2, CRITIC_SIZE);
        let fake = batch_of(&mut rng, 2, CRITIC_SIZE);
        let single = batch_of(&mut rng, 1, CRITIC_SIZE);
        let single_target = batch_of(&mut rng, 1, CRITIC_SIZE);
        let single_mask = mask_of(&mut rng, 1, CRITIC_SIZE);

        let mut critic = build_discriminator::<f64>(s);
        let coords = random_coords(&mut critic, &mut rng, PARAM_COORDS);
        add(
            "critic_loss",
            check_network(&mut critic, &[real], &coords, |t, net, b, v| {
                let f = t.constant(fake.clone());
                Ok(critic_loss(t, net, b, v[0], f)?.0.var)
            })?,
        );

        add(
            "generator_gan_loss",
            check_inputs(&[single.clone()], |t, v| Ok(generator_gan_loss(t, &critic, v[0])?.var))?,
        );

        add("mse_loss", check_inputs(&[x.clone(), y.clone()], |t, v| Ok(mse_loss(t, v[0], v[1])?.var))?);

        let mut far = y.clone();
        far.data_mut().iter_mut().zip(x.data()).for_each(|(b, &a)| {
            if (a - *b).abs() < 1e-2 {
                *b = a + 0.05;
            }
        });
        add("l1_loss", check_inputs(&[x.clone(), far], |t, v| Ok(l1_loss(t, v[0], v[1])?.var))?);

        let probs = uniform(&mut rng, &[2, 1, SIZE, SIZE], 0.05, 0.95);
        add(
            "soft_dice_loss",
            check_inputs(&[probs, m.clone()], |t, v| Ok(soft_dice_loss(t, v[0], v[1])?.var))?,
        );

        let seg = frozen(build_segmenter::<f64>(kind, s));
        add(
            "task_oriented_loss",
            check_inputs(&[x.clone()], |t, v| {
                let mk = t.constant(m.clone());
                Ok(task_oriented_loss(t, &seg, v[0], mk)?.var)
            })?,
        );

        let feat = build_perceptual_net::<f64>(s);
        add(
            "perceptual_loss",
            check_inputs(&[x.clone(), y.clone()], |t, v| Ok(perceptual_loss(t, &feat, v[0], v[1])?.var))?,
        );

        let mut g = build_denoiser::<f64>(&[4, 1], 3, s)?;
        let coords = random_coords(&mut g, &mut rng, PARAM_COORDS);
        add(
            "generator_total_loss",
            check_network(&mut g, &[single], &coords, |t, net, b, v| {
                let x_hat = net.forward(t, b, v[0])?.output;
                let gan = generator_gan_loss(t, &critic, x_hat)?;
                let mk = t.constant(single_mask.clone());
                let task = task_oriented_loss(t, &seg, x_hat, mk)?;
                let target = t.constant(single_target.clone());
                let mse = mse_loss(t, x_hat, target)?;
                Ok(generator_total_loss(t, gan, task, mse, 0.5)?.var)
            })?,
        );
    }
    Ok(acc
        .into_iter()
        .map(|(name, check)| SuiteEntry { name, instances, check })
        .collect())
}

/// Finite-difference checks of every tape operation and of the composite
/// losses, each over `instances` random instances.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (k, case) in op_cases().into_iter().enumerate() {
        let mut total = EMPTY;
        for i in 0..instances {
            let s = seed.wrapping_add((k * 1000 + i) as u64);
            let mut rng = rng_for(s, 0x4f50);
            let inputs = (case.inputs)(&mut rng);
            let f = case.f;
            total = total.merge(check_inputs(&inputs, |t, v| f(t, v, s))?);
        }
        out.push(SuiteEntry { name: case.name, instances, check: total });
    }
    out.extend(loss_entries(instances, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_inputs(&[x], |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // x·c with c read off the tape as a constant: the tape sees slope c,
        // the function is x².
        let x = Tensor::new(vec![1], vec![2.0]).unwrap();
        let r = check_inputs(&[x], |t, v| {
            let c = t.value(v[0]).data()[0];
            Ok(t.scale(v[0], c))
        })
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
        assert!(!r.passed());
    }

    #[test]
    fn probes_straddling_a_kink_are_skipped() {
        let x = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let r = check_inputs(&[x], |t, v| {
            let c = t.clamp_values(v[0], 0.0, 1.0);
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
