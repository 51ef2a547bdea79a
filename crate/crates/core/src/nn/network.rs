use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::arch::{ArchSpec, Family, Penultimate};
use crate::autograd::{out_extent, BatchStats, Pool, Tape, Var};
use crate::math::sqrt;
use crate::rng::{self, Rng};
use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Running statistics of one batchnorm layer; used in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked.
    Train,
    /// Running statistics, no gradients.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

#[derive(Debug, Clone)]
enum Layer {
    Flatten,
    Linear { weight: usize, bias: usize },
    Relu,
    Conv(Conv),
    BatchNorm(Bn),
    MaxPool { kernel: usize, stride: usize, pad: usize },
    AvgPool(Pool),
    Residual(Block),
}

/// Result of a forward pass recorded on a tape.
pub struct NetworkOutput {
    /// Penultimate representation (classifier input).
    pub features: Var,
    pub logits: Var,
    /// Tape leaf of every parameter, in [`Network::params`] order.
    pub param_vars: Vec<Var>,
    /// Batch statistics of each batchnorm layer (training mode only),
    /// indexed like [`Network::running_stats`].
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// A realised architecture: parameters, batchnorm buffers and the layer
/// sequence, followed by a growable linear classifier.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    params: Vec<Param>,
    running: Vec<BnRunning>,
    body: Vec<Layer>,
    head: Option<(usize, usize)>,
    init_rng: Rng,
}

impl Network {
    /// Builds `spec` with weights drawn from a stream derived from `seed`.
    ///
    /// Conv weights are He-normal (fan-out), linear weights and biases are
    /// uniform in `±1/sqrt(fan_in)`, batchnorm starts at scale 1, shift 0.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut net = Network {
            spec: spec.clone(),
            params: Vec::new(),
            running: Vec::new(),
            body: Vec::new(),
            head: None,
            init_rng: rng::stream(seed, &[0x1417]),
        };
        match spec.family {
            Family::Mlp => net.build_mlp(),
            Family::Resnet => net.build_resnet(),
        }
        let f = spec.feature_dim()?;
        let head = net.linear_params("fc", f, spec.num_classes);
        net.head = Some(head);
        Ok(net)
    }

    /// A bare linear classifier `input_dim -> num_classes`.
    pub fn linear(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let spec = ArchSpec::mlp(1, input_dim, input_dim, num_classes);
        let mut net = Network {
            spec,
            params: Vec::new(),
            running: Vec::new(),
            body: vec![Layer::Flatten],
            head: None,
            init_rng: rng::stream(seed, &[0x1417]),
        };
        net.head = Some(net.linear_params("fc", input_dim, num_classes));
        net
    }

    /// A network with no layers; its output is its (flattened) input.
    pub fn empty() -> Self {
        Network {
            spec: ArchSpec::mlp(0, 0, 0, 0),
            params: Vec::new(),
            running: Vec::new(),
            body: Vec::new(),
            head: None,
            init_rng: rng::stream(0, &[0x1417]),
        }
    }

    fn add_param(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    fn linear_params(&mut self, name: &str, fan_in: usize, out: usize) -> (usize, usize) {
        let bound = 1.0 / sqrt(fan_in.max(1) as Real);
        let w: Vec<Real> = (0..out * fan_in).map(|_| self.init_rng.random_range(-bound..=bound)).collect();
        let b: Vec<Real> = (0..out).map(|_| self.init_rng.random_range(-bound..=bound)).collect();
        let wi = self.add_param(format!("{}.weight", name), Tensor::new(vec![out, fan_in], w).expect("sized"));
        let bi = self.add_param(format!("{}.bias", name), Tensor::from_vec(b));
        (wi, bi)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let std = sqrt(2.0 / (cout * k * k) as Real);
        let w: Vec<Real> = (0..cout * cin * k * k)
            .map(|_| {
                let z: Real = StandardNormal.sample(&mut self.init_rng);
                z * std
            })
            .collect();
        let weight = self.add_param(format!("{}.weight", name), Tensor::new(vec![cout, cin, k, k], w).expect("sized"));
        Conv { weight, stride, pad }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.add_param(format!("{}.weight", name), Tensor::full(&[c], 1.0));
        let beta = self.add_param(format!("{}.bias", name), Tensor::zeros(&[c]));
        self.running.push(BnRunning { name: String::from(name), mean: vec![0.0; c], var: vec![1.0; c] });
        Bn { gamma, beta, running: self.running.len() - 1 }
    }

    fn build_mlp(&mut self) {
        let spec = self.spec.clone();
        let mut fan_in: usize = spec.input_shape.iter().product();
        self.body.push(Layer::Flatten);
        for i in 0..spec.depth - 1 {
            let (weight, bias) = self.linear_params(&format!("fc{}", i + 1), fan_in, spec.width);
            self.body.push(Layer::Linear { weight, bias });
            self.body.push(Layer::Relu);
            fan_in = spec.width;
        }
    }

    fn build_resnet(&mut self) {
        let spec = self.spec.clone();
        let w = spec.width;
        let in_ch = spec.input_shape[0];
        if spec.small_image_stem {
            let c = self.conv("conv1", in_ch, w, 3, 1, 1);
            self.body.push(Layer::Conv(c));
        } else {
            let c = self.conv("conv1", in_ch, w, 7, 2, 3);
            self.body.push(Layer::Conv(c));
        }
        let b = self.bn("bn1", w);
        self.body.push(Layer::BatchNorm(b));
        self.body.push(Layer::Relu);
        if !spec.small_image_stem {
            self.body.push(Layer::MaxPool { kernel: 3, stride: 2, pad: 1 });
        }
        let blocks = spec.blocks_per_stage().expect("validated");
        let mut cin = w;
        for stage in 0..4 {
            let cout = w << stage;
            for bi in 0..blocks {
                let stride = if stage > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("layer{}.{}", stage + 1, bi);
                let conv1 = self.conv(&format!("{}.conv1", name), cin, cout, 3, stride, 1);
                let bn1 = self.bn(&format!("{}.bn1", name), cout);
                let conv2 = self.conv(&format!("{}.conv2", name), cout, cout, 3, 1, 1);
                let bn2 = self.bn(&format!("{}.bn2", name), cout);
                let down = (stride != 1 || cin != cout).then(|| {
                    let c = self.conv(&format!("{}.downsample.0", name), cin, cout, 1, stride, 0);
                    let b = self.bn(&format!("{}.downsample.1", name), cout);
                    (c, b)
                });
                self.body.push(Layer::Residual(Block { conv1, bn1, conv2, bn2, down }));
                cin = cout;
            }
        }
        let pool = match spec.penultimate {
            Penultimate::Gap => Pool::Adaptive { out_h: 1, out_w: 1 },
            Penultimate::Gap2x2 => Pool::Adaptive { out_h: 2, out_w: 2 },
            Penultimate::AvgPool4x4S3 => Pool::Window { kernel: 4, stride: 3 },
        };
        self.body.push(Layer::AvgPool(pool));
        self.body.push(Layer::Flatten);
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BnRunning] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [BnRunning] {
        &mut self.running
    }

    pub fn num_classes(&self) -> usize {
        self.head.map_or(0, |(w, _)| self.params[w].tensor.shape()[0])
    }

    pub fn feature_dim(&self) -> usize {
        self.head.map_or(0, |(w, _)| self.params[w].tensor.shape()[1])
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Classifier weight `[classes, features]`, one row per class.
    pub fn head_weight(&self) -> Option<&Tensor> {
        self.head.map(|(w, _)| &self.params[w].tensor)
    }

    pub fn head_bias(&self) -> Option<&Tensor> {
        self.head.map(|(_, b)| &self.params[b].tensor)
    }

    /// Multiplies classifier rows `rows` (weights only) by `factor`.
    pub fn scale_head_rows(&mut self, rows: core::ops::Range<usize>, factor: Real) {
        if let Some((w, _)) = self.head {
            let f = self.params[w].tensor.shape()[1];
            for v in &mut self.params[w].tensor.data_mut()[rows.start * f..rows.end * f] {
                *v *= factor;
            }
        }
    }

    /// Appends `new_classes` freshly initialised classifier rows. Existing
    /// rows and biases are left untouched.
    pub fn grow_classifier(&mut self, new_classes: usize) {
        let Some((wi, bi)) = self.head else { return };
        if new_classes == 0 {
            return;
        }
        let f = self.params[wi].tensor.shape()[1];
        let old = self.params[wi].tensor.shape()[0];
        let bound = 1.0 / sqrt(f.max(1) as Real);
        let mut w = core::mem::replace(&mut self.params[wi].tensor, Tensor::zeros(&[0])).into_data();
        w.extend((0..new_classes * f).map(|_| self.init_rng.random_range(-bound..=bound)));
        let mut b = core::mem::replace(&mut self.params[bi].tensor, Tensor::zeros(&[0])).into_data();
        b.extend((0..new_classes).map(|_| self.init_rng.random_range(-bound..=bound)));
        self.params[wi].tensor = Tensor::new(vec![old + new_classes, f], w).expect("sized");
        self.params[bi].tensor = Tensor::from_vec(b);
        self.spec.num_classes = old + new_classes;
    }

    /// Records a forward pass of `x` (`[N, ...input_shape]`) on `tape`.
    ///
    /// In [`Mode::Train`] parameters are tracked leaves and batchnorm uses
    /// batch statistics (returned, not applied; see
    /// [`Network::apply_batch_stats`]). In [`Mode::Eval`] parameters are
    /// constants and batchnorm uses running statistics.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<NetworkOutput> {
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => tape.param(&p.tensor),
                Mode::Eval => tape.constant_ref(&p.tensor),
            })
            .collect();
        let mut stats = Vec::new();
        let mut h = x;
        for layer in &self.body {
            h = self.apply(layer, tape, h, &param_vars, mode, &mut stats)?;
        }
        let features = h;
        let logits = match self.head {
            Some((w, b)) => tape.linear(features, param_vars[w], Some(param_vars[b]))?,
            None => features,
        };
        Ok(NetworkOutput { features, logits, param_vars, batch_stats: stats })
    }

    fn apply_bn<'a>(
        &'a self,
        bn: &Bn,
        tape: &mut Tape<'a>,
        x: Var,
        pv: &[Var],
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, s) = tape.batchnorm(x, pv[bn.gamma], pv[bn.beta], BN_EPS)?;
                stats.push((bn.running, s));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[bn.running];
                tape.batchnorm_eval(x, pv[bn.gamma], pv[bn.beta], &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn apply<'a>(
        &'a self,
        layer: &Layer,
        tape: &mut Tape<'a>,
        x: Var,
        pv: &[Var],
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        match layer {
            Layer::Flatten => tape.flatten(x),
            Layer::Linear { weight, bias } => tape.linear(x, pv[*weight], Some(pv[*bias])),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Conv(c) => tape.conv2d(x, pv[c.weight], c.stride, c.pad),
            Layer::BatchNorm(bn) => self.apply_bn(bn, tape, x, pv, mode, stats),
            Layer::MaxPool { kernel, stride, pad } => tape.maxpool(x, *kernel, *stride, *pad),
            Layer::AvgPool(p) => tape.avgpool(x, *p),
            Layer::Residual(b) => {
                let h = tape.conv2d(x, pv[b.conv1.weight], b.conv1.stride, b.conv1.pad)?;
                let h = self.apply_bn(&b.bn1, tape, h, pv, mode, stats)?;
                let h = tape.relu(h);
                let h = tape.conv2d(h, pv[b.conv2.weight], b.conv2.stride, b.conv2.pad)?;
                let h = self.apply_bn(&b.bn2, tape, h, pv, mode, stats)?;
                let shortcut = match &b.down {
                    Some((c, bn)) => {
                        let s = tape.conv2d(x, pv[c.weight], c.stride, c.pad)?;
                        self.apply_bn(bn, tape, s, pv, mode, stats)?
                    }
                    None => x,
                };
                let sum = tape.add(h, shortcut)?;
                Ok(tape.relu(sum))
            }
        }
    }

    /// Folds training-mode batch statistics into the running statistics
    /// (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            let r = &mut self.running[*idx];
            let unbias = if s.count > 1 { s.count as Real / (s.count - 1) as Real } else { 1.0 };
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * s.mean[c];
                r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expect = &self.spec.input_shape;
        let ok = x.ndim() >= 1 && numel(&x.shape()[1..]) == numel(expect) && (self.spec.family == Family::Mlp || &x.shape()[1..] == expect.as_slice());
        if !ok && !self.body.is_empty() {
            return Err(Error::ShapeMismatch { op: "network input", lhs: x.shape().to_vec(), rhs: expect.clone() });
        }
        Ok(())
    }

    /// Evaluation-mode `(features, logits)` without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant_ref(x);
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.1)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.0)
    }

    /// Floating-point operations of one forward pass over `input_shape`
    /// (`[N, ...]`), counting each multiply-add of a convolution or linear
    /// layer as 2 FLOPs. Normalisation, activations, pooling, additions and
    /// biases are not counted.
    pub fn flops_estimate(&self, input_shape: &[usize]) -> Result<u64> {
        let Some((&n, per)) = input_shape.split_first() else {
            return Err(Error::InvalidArgument("input shape needs a batch axis".into()));
        };
        let mut shape: Vec<usize> = per.to_vec();
        let mut macs: u64 = 0;
        let conv_out = |shape: &[usize], c: &Conv, params: &[Param], macs: &mut u64| -> Result<Vec<usize>> {
            let w = params[c.weight].tensor.shape();
            if shape.len() != 3 || shape[0] != w[1] {
                return Err(Error::ShapeMismatch { op: "flops_estimate", lhs: shape.to_vec(), rhs: w.to_vec() });
            }
            let oh = out_extent(shape[1], w[2], c.stride, c.pad).ok_or_else(|| Error::InvalidArgument("conv does not fit".into()))?;
            let ow = out_extent(shape[2], w[3], c.stride, c.pad).ok_or_else(|| Error::InvalidArgument("conv does not fit".into()))?;
            *macs += (w[0] * w[1] * w[2] * w[3] * oh * ow) as u64;
            Ok(vec![w[0], oh, ow])
        };
        for layer in &self.body {
            shape = match layer {
                Layer::Flatten => vec![numel(&shape)],
                Layer::Linear { weight, .. } => {
                    let w = self.params[*weight].tensor.shape();
                    macs += (w[0] * w[1]) as u64;
                    vec![w[0]]
                }
                Layer::Relu | Layer::BatchNorm(_) => shape,
                Layer::Conv(c) => conv_out(&shape, c, &self.params, &mut macs)?,
                Layer::MaxPool { kernel, stride, pad } => {
                    let oh = out_extent(shape[1], *kernel, *stride, *pad).unwrap_or(0);
                    let ow = out_extent(shape[2], *kernel, *stride, *pad).unwrap_or(0);
                    vec![shape[0], oh, ow]
                }
                Layer::AvgPool(p) => match p {
                    Pool::Adaptive { out_h, out_w } => vec![shape[0], *out_h, *out_w],
                    Pool::Window { kernel, stride } => {
                        let oh = out_extent(shape[1], *kernel, *stride, 0).unwrap_or(0);
                        let ow = out_extent(shape[2], *kernel, *stride, 0).unwrap_or(0);
                        vec![shape[0], oh, ow]
                    }
                },
                Layer::Residual(b) => {
                    let h = conv_out(&shape, &b.conv1, &self.params, &mut macs)?;
                    let h = conv_out(&h, &b.conv2, &self.params, &mut macs)?;
                    if let Some((c, _)) = &b.down {
                        conv_out(&shape, c, &self.params, &mut macs)?;
                    }
                    h
                }
            };
        }
        if let Some((w, _)) = self.head {
            let s = self.params[w].tensor.shape();
            macs += (s[0] * s[1]) as u64;
        }
        Ok(2 * macs * n as u64)
    }

    /// One line per layer, for reports.
    pub fn layer_summary(&self) -> Vec<String> {
        let mut out = Vec::new();
        let pshape = |i: usize| self.params[i].tensor.shape().to_vec();
        for layer in &self.body {
            out.push(match layer {
                Layer::Flatten => String::from("flatten"),
                Layer::Linear { weight, .. } => format!("linear {:?}", pshape(*weight)),
                Layer::Relu => String::from("relu"),
                Layer::Conv(c) => format!("conv {:?} stride {} pad {}", pshape(c.weight), c.stride, c.pad),
                Layer::BatchNorm(b) => format!("batchnorm {}", self.params[b.gamma].tensor.len()),
                Layer::MaxPool { kernel, stride, pad } => format!("maxpool {}x{} stride {} pad {}", kernel, kernel, stride, pad),
                Layer::AvgPool(Pool::Adaptive { out_h, out_w }) => format!("adaptive avgpool {}x{}", out_h, out_w),
                Layer::AvgPool(Pool::Window { kernel, stride }) => format!("avgpool {}x{} stride {}", kernel, kernel, stride),
                Layer::Residual(b) => format!(
                    "residual block {:?} stride {}{}",
                    pshape(b.conv1.weight),
                    b.conv1.stride,
                    if b.down.is_some() { " +downsample" } else { "" }
                ),
            });
        }
        if let Some((w, _)) = self.head {
            out.push(format!("classifier {:?}", pshape(w)));
        }
        out
    }

    /// Number of weight layers (convolutions and linear layers on the main
    /// path, excluding shortcut projections), the conventional "depth".
    pub fn weight_layer_depth(&self) -> usize {
        let body: usize = self
            .body
            .iter()
            .map(|l| match l {
                Layer::Linear { .. } | Layer::Conv(_) => 1,
                Layer::Residual(_) => 2,
                _ => 0,
            })
            .sum();
        body + usize::from(self.head.is_some())
    }

    /// Named tensors for serialisation: parameters followed by batchnorm
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for r in &self.running {
            out.push((format!("{}.running_mean", r.name), Tensor::from_vec(r.mean.clone())));
            out.push((format!("{}.running_var", r.name), Tensor::from_vec(r.var.clone())));
        }
        out
    }

    /// Inverse of [`Network::named_tensors`]; every name must be present
    /// with a matching shape. The classifier may have grown, so its rows are
    /// taken from the stored tensor.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor `{}`", name)))
        };
        let head = self.head;
        for (i, p) in self.params.iter_mut().enumerate() {
            let t = find(&p.name)?;
            let is_head = head.is_some_and(|(w, b)| i == w || i == b);
            if t.shape() != p.tensor.shape() && !(is_head && t.shape().get(1..) == p.tensor.shape().get(1..)) {
                return Err(Error::ShapeMismatch { op: "load", lhs: p.tensor.shape().to_vec(), rhs: t.shape().to_vec() });
            }
            p.tensor = t.clone();
        }
        if let Some((w, _)) = self.head {
            self.spec.num_classes = self.params[w].tensor.shape()[0];
        }
        for r in &mut self.running {
            let m = find(&format!("{}.running_mean", r.name))?;
            let v = find(&format!("{}.running_var", r.name))?;
            if m.len() != r.mean.len() || v.len() != r.var.len() {
                return Err(Error::ShapeMismatch { op: "load", lhs: vec![r.mean.len()], rhs: vec![m.len()] });
            }
            r.mean = m.data().to_vec();
            r.var = v.data().to_vec();
        }
        Ok(())
    }
}
