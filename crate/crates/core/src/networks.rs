//! Network builders: denoiser, Wasserstein critic, segmenters and the fixed
//! perceptual feature extractor.
//!
//! A [`Network`] is an ordered list of layers over a flat parameter list.
//! Skip connections use an explicit stack (`Push` / `ConcatPop` / `AddPop`),
//! which is enough to express the U-Net and residual segmenters.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchStats, ConvGeometry, Parameter, Real, RmsProp, Tape,
    Tensor, Var,
};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_DENOISER_CHANNELS: [usize; 5] = [32, 64, 64, 32, 1];
pub const CRITIC_CHANNELS: [usize; 3] = [32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmenterKind {
    UnetSmall,
    PlainCnn,
    ResidualCnn,
    DilatedCnn,
}

impl SegmenterKind {
    pub const ALL: [SegmenterKind; 4] = [
        SegmenterKind::UnetSmall,
        SegmenterKind::PlainCnn,
        SegmenterKind::ResidualCnn,
        SegmenterKind::DilatedCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SegmenterKind::UnetSmall => "unet_small",
            SegmenterKind::PlainCnn => "plain_cnn",
            SegmenterKind::ResidualCnn => "residual_cnn",
            SegmenterKind::DilatedCnn => "dilated_cnn",
        }
    }
}

impl fmt::Display for SegmenterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmenterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SegmenterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown segmenter kind `{s}`")))
    }
}

/// Architecture description; enough to rebuild a network before loading
/// its weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetSpec {
    Denoiser { channels: Vec<usize>, kernel: usize },
    Critic,
    Segmenter(SegmenterKind),
    Perceptual,
    /// Parameter-free pass-through.
    Identity,
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetSpec::Denoiser { channels, kernel } => {
                let ch: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
                write!(f, "denoiser:{}:{}", ch.join(","), kernel)
            }
            NetSpec::Critic => f.write_str("critic"),
            NetSpec::Segmenter(k) => write!(f, "segmenter:{k}"),
            NetSpec::Perceptual => f.write_str("perceptual"),
            NetSpec::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for NetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown architecture `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts[..] {
            ["critic"] => Ok(NetSpec::Critic),
            ["perceptual"] => Ok(NetSpec::Perceptual),
            ["identity"] => Ok(NetSpec::Identity),
            ["segmenter", kind] => Ok(NetSpec::Segmenter(kind.parse()?)),
            ["denoiser", channels, kernel] => Ok(NetSpec::Denoiser {
                channels: channels
                    .split(',')
                    .map(|c| c.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
                kernel: kernel.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    LeakyRelu,
    AvgPool2,
    Upsample2,
    Push,
    ConcatPop,
    AddPop,
    GlobalAvgPool,
    Dense {
        weight: usize,
        bias: usize,
    },
    Sigmoid,
    /// Adds the network input (global residual).
    AddInput,
}

#[derive(Debug, Clone)]
struct RunningStats<T> {
    name: String,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Parameters of a network placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of a forward pass plus the batch statistics gathered by
/// training-mode batch-norm layers.
#[derive(Debug)]
pub struct Forward<T> {
    pub output: Var,
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetSpec,
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
    training: bool,
    frozen: bool,
}

struct Builder<T> {
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
    rng: rand_chacha::ChaCha8Rng,
    n_conv: usize,
    n_bn: usize,
}

impl<T: Real> Builder<T> {
    fn new(seed: u64, stream: u64) -> Self {
        Self {
            layers: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            rng: rng_for(seed, stream),
            n_conv: 0,
            n_bn: 0,
        }
    }

    fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, geom: ConvGeometry) -> &mut Self {
        let i = self.n_conv;
        self.n_conv += 1;
        let w = self.kaiming(vec![cout, cin, k, k], cin * k * k);
        let weight = self.param(format!("conv{i}.weight"), w);
        let bias = self.param(format!("conv{i}.bias"), Tensor::zeros(vec![cout]));
        self.layers.push(Layer::Conv { weight, bias, geom });
        self
    }

    fn same_conv(&mut self, cin: usize, cout: usize, k: usize) -> &mut Self {
        self.conv(cin, cout, k, ConvGeometry::new(1, k / 2))
    }

    fn batch_norm(&mut self, c: usize) -> &mut Self {
        let i = self.n_bn;
        self.n_bn += 1;
        let gamma = self.param(format!("bn{i}.gamma"), Tensor::full(vec![c], T::ONE));
        let beta = self.param(format!("bn{i}.beta"), Tensor::zeros(vec![c]));
        self.running.push(RunningStats {
            name: format!("bn{i}"),
            mean: vec![T::ZERO; c],
            var: vec![T::ONE; c],
        });
        self.layers.push(Layer::BatchNorm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        });
        self
    }

    fn dense(&mut self, fin: usize, fout: usize) -> &mut Self {
        let w = self.kaiming(vec![fin, fout], fin);
        let weight = self.param("dense.weight".into(), w);
        let bias = self.param("dense.bias".into(), Tensor::zeros(vec![fout]));
        self.layers.push(Layer::Dense { weight, bias });
        self
    }

    fn layer(&mut self, l: Layer) -> &mut Self {
        self.layers.push(l);
        self
    }

    fn finish(self, spec: NetSpec) -> Network<T> {
        Network {
            spec,
            layers: self.layers,
            params: self.params,
            running: self.running,
            training: true,
            frozen: false,
        }
    }
}

/// Residual CNN: `output = input + net(input)`, leaky ReLU between convs.
/// The last entry of `channels` is the output channel count and must be 1.
pub fn build_denoiser<T: Real>(channels: &[usize], kernel: usize, seed: u64) -> Result<Network<T>> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("denoiser kernel must be odd, got {kernel}")));
    }
    if channels.last() != Some(&1) || channels.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "denoiser channels must be positive and end with 1, got {channels:?}"
        )));
    }
    let mut b = Builder::new(seed, 0x4445_4e4f);
    let mut cin = 1;
    for (i, &c) in channels.iter().enumerate() {
        b.same_conv(cin, c, kernel);
        if i + 1 < channels.len() {
            b.layer(Layer::LeakyRelu);
        }
        cin = c;
    }
    b.layer(Layer::AddInput);
    Ok(b.finish(NetSpec::Denoiser {
        channels: channels.to_vec(),
        kernel,
    }))
}

/// Critic: three stride-2 convs (32, 64, 128 channels) each followed by
/// batch norm and leaky ReLU, global average pooling and a linear unit.
/// The score is unbounded.
pub fn build_discriminator<T: Real>(seed: u64) -> Network<T> {
    let mut b = Builder::new(seed, 0x4352_4954);
    let mut cin = 1;
    for c in CRITIC_CHANNELS {
        b.conv(cin, c, 3, ConvGeometry::new(2, 1))
            .batch_norm(c)
            .layer(Layer::LeakyRelu);
        cin = c;
    }
    b.layer(Layer::GlobalAvgPool).dense(cin, 1);
    b.finish(NetSpec::Critic)
}

/// Per-pixel foreground probability maps.
pub fn build_segmenter<T: Real>(kind: SegmenterKind, seed: u64) -> Network<T> {
    let mut b = Builder::new(seed, 0x5345_4700 + kind as u64);
    let relu = Layer::LeakyRelu;
    match kind {
        SegmenterKind::UnetSmall => {
            b.same_conv(1, 16, 3).layer(relu).same_conv(16, 16, 3).layer(relu);
            b.layer(Layer::Push).layer(Layer::AvgPool2);
            b.same_conv(16, 32, 3).layer(relu).same_conv(32, 32, 3).layer(relu);
            b.layer(Layer::Push).layer(Layer::AvgPool2);
            b.same_conv(32, 64, 3).layer(relu);
            b.layer(Layer::Upsample2).layer(Layer::ConcatPop);
            b.same_conv(96, 32, 3).layer(relu);
            b.layer(Layer::Upsample2).layer(Layer::ConcatPop);
            b.same_conv(48, 16, 3).layer(relu);
            b.same_conv(16, 1, 3);
        }
        SegmenterKind::PlainCnn => {
            b.same_conv(1, 24, 3).layer(relu);
            for _ in 0..4 {
                b.same_conv(24, 24, 3).layer(relu);
            }
            b.same_conv(24, 1, 3);
        }
        SegmenterKind::ResidualCnn => {
            b.same_conv(1, 16, 3).layer(relu);
            for _ in 0..3 {
                b.layer(Layer::Push)
                    .same_conv(16, 16, 3)
                    .layer(relu)
                    .same_conv(16, 16, 3)
                    .layer(Layer::AddPop)
                    .layer(relu);
            }
            b.same_conv(16, 1, 3);
        }
        SegmenterKind::DilatedCnn => {
            b.same_conv(1, 16, 3).layer(relu);
            for d in [2, 4, 8] {
                b.conv(16, 16, 3, ConvGeometry::dilated(d, d)).layer(relu);
            }
            b.same_conv(16, 1, 3);
        }
    }
    b.layer(Layer::Sigmoid);
    b.finish(NetSpec::Segmenter(kind))
}

/// Fixed random feature extractor (three conv + leaky ReLU layers), frozen.
pub fn build_perceptual_net<T: Real>(seed: u64) -> Network<T> {
    let mut b = Builder::new(seed, 0x5045_5243);
    b.same_conv(1, 8, 3)
        .layer(Layer::LeakyRelu)
        .same_conv(8, 16, 3)
        .layer(Layer::LeakyRelu)
        .same_conv(16, 16, 3)
        .layer(Layer::LeakyRelu);
    let mut net = b.finish(NetSpec::Perceptual);
    net.freeze();
    net
}

pub fn build_from_spec<T: Real>(spec: &NetSpec, seed: u64) -> Result<Network<T>> {
    Ok(match spec {
        NetSpec::Denoiser { channels, kernel } => build_denoiser(channels, *kernel, seed)?,
        NetSpec::Critic => build_discriminator(seed),
        NetSpec::Segmenter(kind) => build_segmenter(*kind, seed),
        NetSpec::Perceptual => build_perceptual_net(seed),
        NetSpec::Identity => Network::identity(),
    })
}

impl<T: Real> Network<T> {
    pub fn identity() -> Self {
        Builder::new(0, 0).finish(NetSpec::Identity)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    /// Parameters an optimizer may update; empty for frozen networks.
    pub fn trainable_params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        let frozen = self.frozen;
        self.params.iter_mut().filter(move |_| !frozen)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Output channels of every convolution, in layer order.
    pub fn conv_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { weight, .. } => Some(self.params[*weight].value.shape()[0]),
                _ => None,
            })
            .collect()
    }

    /// True when the last layer applies a saturating nonlinearity.
    pub fn has_output_nonlinearity(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Sigmoid | Layer::LeakyRelu))
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the network frozen and switches it to evaluation mode.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.training = false;
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Places the parameters on `tape`; they require grad only when
    /// `trainable` is set and the network is not frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        let rg = trainable && !self.frozen;
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), rg))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, binding: &Binding, input: Var) -> Result<Forward<T>> {
        let p = &binding.vars;
        let slope = T::from_f64(LEAKY_SLOPE);
        let eps = T::from_f64(BN_EPSILON);
        let mut x = input;
        let mut stack = Vec::new();
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { weight, bias, geom } => tape.conv2d(x, p[weight], Some(p[bias]), geom)?,
                Layer::BatchNorm { gamma, beta, stats } => {
                    let r = &self.running[stats];
                    let running = (!self.training).then_some((&r.mean[..], &r.var[..]));
                    let (y, s) = tape.batch_norm(x, p[gamma], p[beta], running, eps)?;
                    batch_stats.extend(s);
                    y
                }
                Layer::LeakyRelu => tape.leaky_relu(x, slope),
                Layer::AvgPool2 => tape.avg_pool2(x)?,
                Layer::Upsample2 => tape.upsample2(x)?,
                Layer::Push => {
                    stack.push(x);
                    x
                }
                Layer::ConcatPop => {
                    let skip = stack.pop().expect("balanced skip stack");
                    tape.concat_channels(x, skip)?
                }
                Layer::AddPop => {
                    let skip = stack.pop().expect("balanced skip stack");
                    tape.add(x, skip)?
                }
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Dense { weight, bias } => tape.dense(x, p[weight], p[bias])?,
                Layer::Sigmoid => tape.sigmoid(x),
                Layer::AddInput => tape.add(x, input)?,
            };
        }
        Ok(Forward {
            output: x,
            batch_stats,
        })
    }

    /// Exponential running-average update from a training-mode forward.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        if self.frozen {
            return;
        }
        let m = T::from_f64(BN_MOMENTUM);
        for (r, s) in self.running.iter_mut().zip(stats) {
            let unbias = T::from_f64(s.count as f64 / (s.count as f64 - 1.0).max(1.0));
            for c in 0..r.mean.len() {
                r.mean[c] = (T::ONE - m) * r.mean[c] + m * s.mean[c];
                r.var[c] = (T::ONE - m) * r.var[c] + m * s.var[c] * unbias;
            }
        }
    }

    /// Adds the tape gradients of bound parameters into `Parameter::grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        if self.frozen {
            return;
        }
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    /// One RMSprop step over accumulated gradients; no-op when frozen.
    pub fn optimizer_step(&mut self, opt: RmsProp) {
        crate::tensor::rmsprop_step(self.trainable_params_mut(), opt);
    }

    /// Forward without gradient tracking in the current mode. Running
    /// statistics are not updated.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &b, x)?.output;
        Ok(tape.value(out).clone())
    }

    /// Named tensors (parameters, then batch-norm running statistics) in
    /// checkpoint order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for r in &self.running {
            let c = r.mean.len();
            out.push((
                format!("{}.running_mean", r.name),
                Tensor::new(vec![c], r.mean.clone()).expect("c > 0"),
            ));
            out.push((
                format!("{}.running_var", r.name),
                Tensor::new(vec![c], r.var.clone()).expect("c > 0"),
            ));
        }
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        let expected = self.params.len() + 2 * self.running.len();
        if entries.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                entries.len()
            )));
        }
        for p in &mut self.params {
            let data = find(&p.name, p.value.shape())?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for r in &mut self.running {
            let c = [r.mean.len()];
            r.mean = find(&format!("{}.running_mean", r.name), &c)?;
            r.var = find(&format!("{}.running_var", r.name), &c)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let state = self.state();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, state.iter().map(|(n, t)| (n.as_str(), t)))
            .expect("writing to memory");
        buf
    }

    /// Writes the checkpoint and its `.arch` sidecar. The checkpoint is
    /// written to a temporary file and renamed, so an interrupted save
    /// never leaves a truncated file behind.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = |p: &Path, bytes: &[u8]| -> Result<()> {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            f.write_all(bytes).map_err(|e| Error::io(p, e))?;
            f.sync_all().map_err(|e| Error::io(p, e))
        };
        write(&tmp, &self.checkpoint_bytes())?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let sidecar = format!("arch={}\nconfig_hash={}\n", self.spec, config_hash);
        write(&sidecar_path(path), sidecar.as_bytes())
    }

    /// Rebuilds a network from a checkpoint and its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let spec: NetSpec = text
            .lines()
            .find_map(|l| l.strip_prefix("arch="))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no arch line", side.display())))?
            .parse()?;
        let mut net = build_from_spec(&spec, 0)?;
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        net.load_state(&read_checkpoint(std::io::BufReader::new(f))?)?;
        Ok(net)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch");
    PathBuf::from(s)
}
