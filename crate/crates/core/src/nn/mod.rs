//! Declarative layer graphs and the sequential model that executes them.

mod layers;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use layers::{Conv2d, Dense};

use crate::error::{Error, Result};
use crate::norms::{BatchStats, NormCache, NormKind, NormLayer, RunningStats, DEFAULT_MOMENTUM};
pub use crate::norms::Mode;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Parts-per-million encoding of the default batch-norm momentum; model specs
/// carry no floating-point fields.
pub const DEFAULT_MOMENTUM_PPM: u32 = (DEFAULT_MOMENTUM * 1e6) as u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// 3×3, stride 1, zero padding 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    Norm {
        norm: NormKind,
        channels: usize,
        groups: usize,
        momentum_ppm: u32,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Norm { .. } => "norm",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Input geometry plus an ordered layer list. The last layer must be the
/// dense classification head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Geometry {
    Image(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// Conv → norm → ReLU stages, then flatten and a dense head.
    pub fn conv_net(input: [usize; 3], stages: &[usize], norm: NormKind, groups: Option<usize>, classes: usize) -> Self {
        let [c, h, w] = input;
        let mut layers = Vec::new();
        let mut prev = c;
        for &ch in stages {
            layers.push(LayerSpec::Conv2d {
                in_channels: prev,
                out_channels: ch,
            });
            layers.push(LayerSpec::Norm {
                norm,
                channels: ch,
                groups: match norm {
                    NormKind::Group => groups.unwrap_or_else(|| crate::norms::default_groups(ch)),
                    _ => 1,
                },
                momentum_ppm: DEFAULT_MOMENTUM_PPM,
            });
            layers.push(LayerSpec::Relu);
            prev = ch;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            inputs: prev * h * w,
            outputs: classes,
        });
        Self {
            input_channels: c,
            input_height: h,
            input_width: w,
            layers,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    pub fn head_index(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Check shape compatibility of adjacent layers and the head rule.
    pub fn validate(&self) -> Result<()> {
        let err = |index: usize, kind: &'static str, message: String| Error::Layer { index, kind, message };
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Spec("input dimensions must be positive".into()));
        }
        let mut geo = Geometry::Image(self.input_channels, self.input_height, self.input_width);
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind_name();
            geo = match (layer, geo) {
                (LayerSpec::Conv2d { in_channels, out_channels }, Geometry::Image(c, h, w)) => {
                    if *in_channels != c || *out_channels == 0 {
                        return Err(err(i, kind, format!("expects {in_channels} input channels, receives {c}")));
                    }
                    Geometry::Image(*out_channels, h, w)
                }
                (LayerSpec::Conv2d { .. }, Geometry::Flat(_)) => {
                    return Err(err(i, kind, "needs an image-shaped input".into()))
                }
                (LayerSpec::Norm { norm, channels, groups, momentum_ppm }, g) => {
                    let c = match g {
                        Geometry::Image(c, _, _) => c,
                        Geometry::Flat(f) => f,
                    };
                    if *channels != c {
                        return Err(err(i, kind, format!("configured for {channels} channels, receives {c}")));
                    }
                    if *norm == NormKind::Group && (*groups == 0 || c % groups != 0) {
                        return Err(err(i, kind, format!("{c} channels not divisible into {groups} groups")));
                    }
                    if *momentum_ppm == 0 || *momentum_ppm > 1_000_000 {
                        return Err(err(i, kind, "momentum must be in (0, 1]".into()));
                    }
                    g
                }
                (LayerSpec::Relu, g) => g,
                (LayerSpec::Flatten, Geometry::Image(c, h, w)) => Geometry::Flat(c * h * w),
                (LayerSpec::Flatten, g) => g,
                (LayerSpec::Dense { inputs, outputs }, Geometry::Flat(f)) => {
                    if *inputs != f || *outputs == 0 {
                        return Err(err(i, kind, format!("expects {inputs} features, receives {f}")));
                    }
                    Geometry::Flat(*outputs)
                }
                (LayerSpec::Dense { .. }, Geometry::Image(..)) => {
                    return Err(err(i, kind, "needs a flattened input".into()))
                }
            };
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) if *outputs >= 1 => Ok(()),
            _ => Err(Error::Spec("the final layer must be the dense head".into())),
        }
    }

    /// Same body with the head resized to `classes` outputs.
    pub fn with_head(&self, classes: usize) -> Self {
        let mut spec = self.clone();
        if let Some(LayerSpec::Dense { outputs, .. }) = spec.layers.last_mut() {
            *outputs = classes;
        }
        spec
    }
}

#[derive(Clone, Debug)]
enum Layer<T: Scalar> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    Relu,
    Norm(NormLayer<T>),
    Flatten,
}

/// Per-layer state saved by a caching forward pass.
#[derive(Debug)]
pub enum LayerCache<T: Scalar> {
    Dense { input: Tensor<T> },
    Conv { input_shape: Vec<usize>, cols: Vec<T> },
    Relu { mask: Vec<bool> },
    Norm(NormCache<T>),
    Flatten { input_shape: Vec<usize> },
}

/// Output of a caching forward pass.
pub struct ForwardTrace<T: Scalar> {
    pub logits: Tensor<T>,
    pub caches: Vec<LayerCache<T>>,
    batch_stats: Vec<(usize, BatchStats)>,
}

/// Named reference to a learnable tensor.
pub struct ParamRef<'a, T: Scalar> {
    pub name: String,
    pub layer: usize,
    pub tensor: &'a Tensor<T>,
}

/// Sequential network built from a [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

fn kaiming(t: &mut Tensor<impl Scalar>, fan_in: usize, rng: &mut impl rand::Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = Scalar::from_f64(z * std);
    }
}

impl<T: Scalar> Model<T> {
    /// Build the layer graph with fresh parameters: fan-in scaled Gaussian
    /// weights (variance 2/fan_in), zero biases, unit gamma, zero beta.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            layers.push(match ls {
                LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense::new(*inputs, *outputs)),
                LayerSpec::Conv2d { in_channels, out_channels } => {
                    Layer::Conv(Conv2d::new(*in_channels, *out_channels))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Norm { norm, channels, groups, momentum_ppm } => Layer::Norm(NormLayer::new(
                    *norm,
                    *channels,
                    Some(*groups),
                    *momentum_ppm as f64 / 1e6,
                )?),
                LayerSpec::Flatten => Layer::Flatten,
            });
        }
        let mut model = Self { spec, layers };
        for i in 0..model.layers.len() {
            model.init_layer(i, &mut rng::stream(seed, &[rng::NS_INIT, i as u64]));
        }
        Ok(model)
    }

    fn init_layer(&mut self, index: usize, rng: &mut impl rand::Rng) {
        match &mut self.layers[index] {
            Layer::Dense(d) => {
                kaiming(&mut d.weight, d.inputs, rng);
                d.bias = Tensor::zeros(&[d.outputs]);
            }
            Layer::Conv(c) => {
                kaiming(&mut c.weight, c.in_channels * layers::KERNEL * layers::KERNEL, rng);
                c.bias = Tensor::zeros(&[c.out_channels]);
            }
            _ => {}
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn head_index(&self) -> usize {
        self.spec.head_index()
    }

    /// Replace the head with a freshly initialized one of `classes` outputs.
    /// Every other parameter and buffer is kept verbatim.
    pub fn replace_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::Domain(format!("a classifier head needs at least 2 classes, got {classes}")));
        }
        let head = self.head_index();
        let inputs = match &self.layers[head] {
            Layer::Dense(d) => d.inputs,
            _ => return Err(Error::Spec("the final layer must be the dense head".into())),
        };
        self.spec = self.spec.with_head(classes);
        self.layers[head] = Layer::Dense(Dense::new(inputs, classes));
        self.init_layer(head, &mut rng::stream(seed, &[rng::NS_HEAD, head as u64]));
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expect = self.spec.input_shape();
        match x.shape() {
            [_, c, h, w] if [*c, *h, *w] == expect => Ok(()),
            s => Err(Error::Shape(format!(
                "model input must be [N,{},{},{}], got {s:?}",
                expect[0], expect[1], expect[2]
            ))),
        }
    }

    fn layer_err(&self, index: usize, e: Error) -> Error {
        match e {
            Error::Shape(message) | Error::Spec(message) => Error::Layer {
                index,
                kind: self.spec.layers[index].kind_name(),
                message,
            },
            other => other,
        }
    }

    /// Inference forward pass; no state is touched.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Dense(d) => d.forward(&h),
                Layer::Conv(c) => c.forward(&h, false).map(|(y, _)| y),
                Layer::Relu => {
                    let mut y = h;
                    y.data_mut().iter_mut().for_each(|v| {
                        if *v < T::ZERO {
                            *v = T::ZERO
                        }
                    });
                    Ok(y)
                }
                Layer::Norm(n) => n.forward(&h, mode).map(|(y, _, _)| y),
                Layer::Flatten => {
                    let n = h.shape()[0];
                    let f = h.len() / n;
                    h.reshape(&[n, f])
                }
            }
            .map_err(|e| self.layer_err(i, e))?;
        }
        if !h.all_finite() {
            return Err(Error::Domain("non-finite logits".into()));
        }
        Ok(h)
    }

    /// Forward pass that keeps what backward needs. Running statistics are
    /// not updated here; see [`Model::commit_stats`].
    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode, keep_from: usize) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let keep = i >= keep_from;
            let (y, cache) = match layer {
                Layer::Dense(d) => {
                    let y = d.forward(&h).map_err(|e| self.layer_err(i, e))?;
                    (y, LayerCache::Dense { input: if keep { h } else { Tensor::zeros(&[1]) } })
                }
                Layer::Conv(c) => {
                    let shape = h.shape().to_vec();
                    let (y, cols) = c.forward(&h, keep).map_err(|e| self.layer_err(i, e))?;
                    (y, LayerCache::Conv { input_shape: shape, cols: cols.unwrap_or_default() })
                }
                Layer::Relu => {
                    let mut y = h;
                    let mut mask = Vec::with_capacity(if keep { y.len() } else { 0 });
                    for v in y.data_mut() {
                        let on = *v > T::ZERO;
                        if !on {
                            *v = T::ZERO;
                        }
                        if keep {
                            mask.push(on);
                        }
                    }
                    (y, LayerCache::Relu { mask })
                }
                Layer::Norm(n) => {
                    let (y, cache, stats) = n.forward(&h, mode).map_err(|e| self.layer_err(i, e))?;
                    if let Some(s) = stats {
                        batch_stats.push((i, s));
                    }
                    (y, LayerCache::Norm(cache))
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let n = shape[0];
                    let f = h.len() / n;
                    (h.reshape(&[n, f])?, LayerCache::Flatten { input_shape: shape })
                }
            };
            caches.push(cache);
            h = y;
        }
        if !h.all_finite() {
            return Err(Error::Domain("non-finite logits".into()));
        }
        Ok(ForwardTrace {
            logits: h,
            caches,
            batch_stats,
        })
    }

    /// Fold the batch statistics of a train-mode trace into the running stats.
    pub fn commit_stats(&mut self, trace: &ForwardTrace<T>) {
        for (i, stats) in &trace.batch_stats {
            if let Layer::Norm(n) = &mut self.layers[*i] {
                n.update_running(stats);
            }
        }
    }

    /// Backpropagate `dlogits` through layers `stop_at..`, accumulating
    /// parameter gradients. Earlier layers are left untouched.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, dlogits: Tensor<T>, stop_at: usize) -> Result<()> {
        let mut g = dlogits;
        for i in (stop_at..self.layers.len()).rev() {
            let need_dx = i > stop_at;
            let cache = &trace.caches[i];
            let next = match (&mut self.layers[i], cache) {
                (Layer::Dense(d), LayerCache::Dense { input }) => d.backward(input, &g, need_dx)?,
                (Layer::Conv(c), LayerCache::Conv { input_shape, cols }) => {
                    c.backward(input_shape, cols, &g, need_dx)?
                }
                (Layer::Relu, LayerCache::Relu { mask }) => {
                    let mut d = g;
                    for (v, &on) in d.data_mut().iter_mut().zip(mask) {
                        if !on {
                            *v = T::ZERO;
                        }
                    }
                    Some(d)
                }
                (Layer::Norm(n), LayerCache::Norm(c)) => Some(n.backward(c, &g)?),
                (Layer::Flatten, LayerCache::Flatten { input_shape }) => Some(g.reshape(input_shape)?),
                _ => return Err(Error::Domain(format!("cache mismatch at layer {i}"))),
            };
            match next {
                Some(n) => g = n,
                None => break,
            }
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over the batch, with gradients accumulated
    /// into every parameter of layers `stop_at..`. Running statistics are
    /// updated when `mode` is train.
    pub fn loss_backward(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode, stop_at: usize) -> Result<LossOutput> {
        let trace = self.forward_trace(x, mode, stop_at)?;
        let (loss, dlogits, correct) = softmax_cross_entropy(&trace.logits, labels)?;
        if mode == Mode::Train {
            self.commit_stats(&trace);
        }
        self.backward(&trace, dlogits, stop_at)?;
        Ok(LossOutput { loss, correct })
    }

    pub fn zero_grad(&mut self) {
        for t in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Learnable tensors in canonical order with their names.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pair: [(&str, &Tensor<T>); 2] = match layer {
                Layer::Dense(d) => [("weight", &d.weight), ("bias", &d.bias)],
                Layer::Conv(c) => [("weight", &c.weight), ("bias", &c.bias)],
                Layer::Norm(n) => [("gamma", &n.gamma), ("beta", &n.beta)],
                _ => continue,
            };
            for (suffix, tensor) in pair {
                out.push(ParamRef {
                    name: format!("layers.{i}.{suffix}"),
                    layer: i,
                    tensor,
                });
            }
        }
        out
    }

    /// Same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Norm(n) => {
                    out.push(&mut n.gamma);
                    out.push(&mut n.beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Layer index owning each entry of [`Model::params_mut`].
    pub fn param_layers(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.layer).collect()
    }

    /// Running statistics of every batch-norm layer, keyed by layer index.
    pub fn running_stats(&self) -> Vec<(usize, Option<&RunningStats<T>>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Norm(n) if n.kind() == NormKind::Batch => Some((i, n.running())),
                _ => None,
            })
            .collect()
    }

    pub fn set_running_stats(&mut self, layer: usize, stats: Option<RunningStats<T>>) -> Result<()> {
        match self.layers.get_mut(layer) {
            Some(Layer::Norm(n)) => n.set_running(stats),
            _ => Err(Error::Spec(format!("layer {layer} is not a norm layer"))),
        }
    }

    /// Channel count of the norm layer at `layer`.
    pub fn norm_channels(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer) {
            Some(Layer::Norm(n)) => Some(n.channels()),
            _ => None,
        }
    }

    /// Enable or disable running-statistics updates on every batch-norm layer.
    pub fn freeze_norm_stats(&mut self, frozen: bool) {
        for l in &mut self.layers {
            if let Layer::Norm(n) = l {
                n.freeze_stats = frozen;
            }
        }
    }

    /// Order-sensitive FNV-1a digest over the bits of the selected parameters.
    pub fn param_checksum(&self, include: impl Fn(usize) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            if !include(p.layer) {
                continue;
            }
            for v in p.tensor.data() {
                for b in v.to_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                }),
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Flatten => Layer::Flatten,
                Layer::Norm(n) => {
                    let mut m = NormLayer::new(n.kind(), n.channels(), Some(n.groups()), n.momentum())
                        .expect("validated norm layer");
                    m.gamma = n.gamma.cast();
                    m.beta = n.beta.cast();
                    m.freeze_stats = n.freeze_stats;
                    m.set_running(n.running().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                        var: r.var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    }))
                    .expect("same shape");
                    Layer::Norm(m)
                }
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Samples whose argmax logit equals the label.
    pub correct: usize,
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, usize)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::Shape(format!("logits must be [N,K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grad = vec![T::ZERO; n * k];
    let mut total = 0.0f64;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Label { label: y, classes: k });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        if argmax(row) == y {
            correct += 1;
        }
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[y].to_f64();
        for j in 0..k {
            let p = exps[j] / z - if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = T::from_f64(p / n as f64);
        }
    }
    Ok((total / n as f64, Tensor::from_vec(&[n, k], grad)?, correct))
}

#[cfg(test)]
mod tests;
