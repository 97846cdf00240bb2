//! Forward/backward kernels for the non-convolution tape operations.

use crate::error::{Error, Result};

use super::Real;

/// Result shape of broadcasting `a` against `b`, aligning trailing dimensions.
/// A dimension broadcasts when it is 1 or absent.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast operand.
pub(crate) fn broadcast_offsets(input: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    if input.iter().product::<usize>() == total {
        return (0..total).collect();
    }
    let lead = out.len() - input.len();
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[lead + i] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let mut idx = vec![0usize; out.len()];
    let mut offsets = Vec::with_capacity(total);
    let mut cur = 0usize;
    for _ in 0..total {
        offsets.push(cur);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// `(n, c, h·w)` of an NCHW shape.
pub(crate) fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects an NCHW tensor, got shape {shape:?}"
        ))),
    }
}

pub(crate) struct BatchNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel normalisation. With `stats = None` the batch statistics are
/// used (biased variance); otherwise the supplied running mean/variance.
pub(crate) fn batch_norm_forward<T: Real>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> BatchNormOut<T> {
    let m = T::from_f64((n * hw) as f64);
    let (mean, var) = match stats {
        Some((mu, var)) => (mu.to_vec(), var.to_vec()),
        None => {
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ch in 0..c {
                let mut s = T::ZERO;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / m;
                let mut q = T::ZERO;
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / m;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.len()];
    let mut y = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    BatchNormOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)`. In training mode `dx` includes the terms
/// flowing through the batch mean and variance.
pub(crate) fn batch_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    (n, c, hw): (usize, usize, usize),
    training: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::ZERO; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = if training {
                    k * (dy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn avg_pool2_forward<T: Real>(x: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = vec![T::ZERO; nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = s * quarter;
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward<T: Real>(dy: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; nc * h * w];
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[p * ho * wo + i * wo + j] * quarter;
                let base = p * h * w;
                dx[base + 2 * i * w + 2 * j] = g;
                dx[base + 2 * i * w + 2 * j + 1] = g;
                dx[base + (2 * i + 1) * w + 2 * j] = g;
                dx[base + (2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2_forward<T: Real>(x: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::ZERO; nc * ho * wo];
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                y[p * ho * wo + i * wo + j] = x[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Real>(dy: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; nc * h * w];
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                dx[p * h * w + (i / 2) * w + j / 2] += dy[p * ho * wo + i * wo + j];
            }
        }
    }
    dx
}
