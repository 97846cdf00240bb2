//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and a single reverse sweep visits each node once.
//! Leaves created with `requires_grad = false` (frozen or detached values)
//! stop gradient flow: no backward work is done for subgraphs that only
//! depend on them.

use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward, ConvDims};
use super::ops::{self, broadcast_offsets, broadcast_shape, nchw, sigmoid};
use super::{conv2d_output_size, ConvGeometry, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running
/// average updates by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Branch taken by every element of every non-smooth op (leaky ReLU,
    /// abs, clamp). Two evaluations with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::LeakyRelu(a, _) | Op::Abs(a) => {
                    out.extend(self.value(a).data().iter().map(|&v| u8::from(v >= T::ZERO)));
                }
                Op::Clamp(a, lo, hi) => {
                    out.extend(self.value(a).data().iter().map(|&v| {
                        if v <= lo {
                            0
                        } else if v >= hi {
                            2
                        } else {
                            1
                        }
                    }));
                }
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Copies the value of `v` into a new leaf that does not require grad.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).map_err(|_| Error::Broadcast {
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&sa, &shape);
            let ob = broadcast_offsets(&sb, &shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.abs(), Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |v| if v >= T::ZERO { v } else { slope * v },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::ONE)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a))
    }

    /// Clamps values to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp_values(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |v| v.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums everything but the leading axis: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.shape()[0];
        let inner = v.len() / n;
        let data: Vec<T> = v.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n], data).expect("n > 0"), Op::SumPerSample(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2-D cross-correlation of an NCHW input with an OIKK kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        let (o, k) = match ws[..] {
            [o, i, k1, k2] if i == c && k1 == k2 => (o, k1),
            _ => return Err(Error::shape("conv2d", self.shape(x), &ws)),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let (ho, wo) = match (
            conv2d_output_size(h, k, geom),
            conv2d_output_size(wd, k, geom),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", self.shape(x), &ws)),
        };
        let dims = ConvDims {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            ho,
            wo,
        };
        let y = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], y)?,
            Op::Conv2d { x, w, b, dims, geom },
            rg,
        ))
    }

    /// Batch normalisation over an NCHW input. `running = None` selects
    /// training mode (batch statistics, returned for running-average
    /// updates); otherwise the given `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm running stats", &[c], &[m.len()]));
            }
        }
        let training = running.is_none();
        if training && n * h * w < 2 {
            return Err(Error::ZeroVariance);
        }
        let out = ops::batch_norm_forward(
            self.value(x).data(),
            (n, c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            eps,
        );
        let stats = training.then(|| BatchStats {
            mean: out.mean.clone(),
            var: out.var.clone(),
            count: n * h * w,
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(vec![n, c, h, w], out.y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                training,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `x · w + b` for `x: N×F`, `w: F×O`, `b: O`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, f, o) = match (xs, ws, bs) {
            ([n, f], [f2, o], [o2]) if f == f2 && o == o2 => (*n, *f, *o),
            _ => return Err(Error::shape("dense", xs, ws)),
        };
        let mut y = vec![T::ZERO; n * o];
        for row in y.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        // SAFETY: x is n×f, w is f×o, y is n×o, all row-major.
        unsafe {
            T::gemm(
                n,
                f,
                o,
                T::ONE,
                self.value(x).data(),
                f as isize,
                1,
                self.value(w).data(),
                o as isize,
                1,
                T::ONE,
                &mut y,
                o as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Dense { x, w, b }, rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2 needs even spatial extents, got {h}×{w}"
            )));
        }
        let y = ops::avg_pool2_forward(self.value(x).data(), (n * c, h, w));
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, h / 2, w / 2], y)?, Op::AvgPool2(x), rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "upsample2")?;
        let y = ops::upsample2_forward(self.value(x).data(), (n * c, h, w));
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], y)?, Op::Upsample2(x), rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = nchw(self.shape(a), "concat_channels")?;
        let (n2, cb, h2, w2) = nchw(self.shape(b), "concat_channels")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * (ca + cb) * hw);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for s in 0..n {
            y.extend_from_slice(&va[s * ca * hw..(s + 1) * ca * hw]);
            y.extend_from_slice(&vb[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], y)?, Op::Concat(a, b), rg))
    }

    /// Mean over spatial positions: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "global_avg_pool")?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], y)?, Op::GlobalAvgPool(x), rg))
    }

    /// Propagates d`loss`/d(node) back to every leaf that requires grad and
    /// adds the result to the leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            for (input, contribution) in self.node_backward(i, &g) {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn reduce_broadcast(&self, g: &[T], operand: Var, out_shape: &[usize], local: impl Fn(usize) -> T) -> Vec<T> {
        let shape = self.shape(operand);
        if shape == out_shape {
            return g.iter().enumerate().map(|(i, &gi)| gi * local(i)).collect();
        }
        let mut acc = vec![T::ZERO; self.value(operand).len()];
        for (i, off) in broadcast_offsets(shape, out_shape).into_iter().enumerate() {
            acc[off] += g[i] * local(i);
        }
        acc
    }

    /// Gradient contributions of node `i` to its inputs given its output grad.
    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Add(a, b) => vec![
                (a, self.reduce_broadcast(g, a, out_shape, |_| T::ONE)),
                (b, self.reduce_broadcast(g, b, out_shape, |_| T::ONE)),
            ],
            &Op::Sub(a, b) => vec![
                (a, self.reduce_broadcast(g, a, out_shape, |_| T::ONE)),
                (b, self.reduce_broadcast(g, b, out_shape, |_| -T::ONE)),
            ],
            &Op::Mul(a, b) | &Op::Div(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let oa = broadcast_offsets(sa, out_shape);
                let ob = broadcast_offsets(sb, out_shape);
                let (va, vb) = (self.data(a), self.data(b));
                let is_div = matches!(node.op, Op::Div(..));
                let mut out = Vec::new();
                if self.rg(a) {
                    out.push((
                        a,
                        self.reduce_broadcast(g, a, out_shape, |k| {
                            if is_div {
                                T::ONE / vb[ob[k]]
                            } else {
                                vb[ob[k]]
                            }
                        }),
                    ));
                }
                if self.rg(b) {
                    out.push((
                        b,
                        self.reduce_broadcast(g, b, out_shape, |k| {
                            if is_div {
                                -va[oa[k]] / (vb[ob[k]] * vb[ob[k]])
                            } else {
                                va[oa[k]]
                            }
                        }),
                    ));
                }
                out
            }
            &Op::Square(a) => {
                let two = T::from_f64(2.0);
                let x = self.data(a);
                vec![(a, g.iter().zip(x).map(|(&gi, &xi)| gi * two * xi).collect())]
            }
            &Op::Abs(a) => {
                let x = self.data(a);
                let sign = |v: T| {
                    if v > T::ZERO {
                        T::ONE
                    } else if v < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    }
                };
                vec![(a, g.iter().zip(x).map(|(&gi, &xi)| gi * sign(xi)).collect())]
            }
            &Op::Sigmoid(a) => vec![(
                a,
                g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::ONE - s)).collect(),
            )],
            &Op::LeakyRelu(a, slope) => {
                let x = self.data(a);
                vec![(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi >= T::ZERO { gi } else { gi * slope })
                        .collect(),
                )]
            }
            &Op::Scale(a, c) => vec![(a, g.iter().map(|&gi| gi * c).collect())],
            &Op::AddScalar(a) | &Op::Reshape(a) => vec![(a, g.to_vec())],
            &Op::Clamp(a, lo, hi) => {
                let x = self.data(a);
                vec![(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { T::ZERO })
                        .collect(),
                )]
            }
            &Op::Sum(a) => vec![(a, vec![g[0]; self.value(a).len()])],
            &Op::Mean(a) => {
                let n = self.value(a).len();
                vec![(a, vec![g[0] / T::from_f64(n as f64); n])]
            }
            &Op::SumPerSample(a) => {
                let v = self.value(a);
                let inner = v.len() / v.shape()[0];
                vec![(a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, inner)).collect())]
            }
            &Op::Conv2d {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                let grads = conv2d_backward(
                    self.data(x),
                    self.data(w),
                    g,
                    &dims,
                    geom,
                    [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))],
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((x, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.bias) {
                    out.push((b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = nchw(out_shape, "batch_norm").expect("checked in forward");
                let (dx, dgamma, dbeta) = ops::batch_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.data(*gamma),
                    (n, c, h * w),
                    *training,
                );
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            &Op::Dense { x, w, b } => {
                let (n, f) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[1];
                let mut out = Vec::new();
                if self.rg(x) {
                    let mut dx = vec![T::ZERO; n * f];
                    // SAFETY: g is n×o, w viewed transposed as o×f.
                    unsafe {
                        T::gemm(
                            n, o, f, T::ONE, g, o as isize, 1, self.data(w), 1, o as isize, T::ZERO,
                            &mut dx, f as isize, 1,
                        );
                    }
                    out.push((x, dx));
                }
                if self.rg(w) {
                    let mut dw = vec![T::ZERO; f * o];
                    // SAFETY: x viewed transposed as f×n, g is n×o.
                    unsafe {
                        T::gemm(
                            f, n, o, T::ONE, self.data(x), 1, f as isize, g, o as isize, 1, T::ZERO,
                            &mut dw, o as isize, 1,
                        );
                    }
                    out.push((w, dw));
                }
                if self.rg(b) {
                    let mut db = vec![T::ZERO; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::AvgPool2(a) => {
                let (n, c, h, w) = nchw(self.shape(a), "avg_pool2").expect("checked");
                vec![(a, ops::avg_pool2_backward(g, (n * c, h, w)))]
            }
            &Op::Upsample2(a) => {
                let (n, c, h, w) = nchw(self.shape(a), "upsample2").expect("checked");
                vec![(a, ops::upsample2_backward(g, (n * c, h, w)))]
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = nchw(self.shape(a), "concat").expect("checked");
                let cb = self.shape(b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = nchw(self.shape(a), "global_avg_pool").expect("checked");
                let inv = T::from_f64(1.0 / (h * w) as f64);
                vec![(
                    a,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi * inv, h * w))
                        .collect(),
                )]
            }
        }
    }
}
