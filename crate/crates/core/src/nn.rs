//! Layers, declarative model specs, and the classification loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, GradMode, Var};
use crate::optim::Adam;
use crate::rng::{self, Purpose};
use crate::tensor::{ConvGeom, Tensor};

/// Numerical floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        ch: usize,
        eps: f64,
    },
    Relu,
    AvgPool {
        k: usize,
    },
    MaxPool {
        k: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// An ordered layer list plus the input shape `C×H×W` and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    pub input: [usize; 3],
    pub classes: usize,
}

/// Named reference architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Two conv blocks.
    Tiny,
    /// One conv block.
    Tinier,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "tinier" => Ok(Preset::Tinier),
            other => Err(Error::InvalidSpec(format!("unknown preset `{other}`"))),
        }
    }
}

impl ModelSpec {
    pub fn preset(preset: Preset, input: [usize; 3], classes: usize) -> Result<Self> {
        let [c, h, w] = input;
        let conv = |in_ch, out_ch| Layer::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let bn = |ch| Layer::BatchNorm { ch, eps: BN_EPS };
        let mut layers = vec![conv(c, 8), bn(8), Layer::Relu, Layer::AvgPool { k: 2 }];
        let (ch, fh, fw) = match preset {
            Preset::Tinier => (8, h / 2, w / 2),
            Preset::Tiny => {
                layers.extend([conv(8, 16), bn(16), Layer::Relu, Layer::AvgPool { k: 2 }]);
                (16, h / 4, w / 4)
            }
        };
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear {
            in_features: ch * fh * fw,
            out_features: classes,
        });
        let spec = ModelSpec {
            layers,
            input,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that shapes chain and returns the per-sample output shape of
    /// every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.input.iter().any(|&d| d == 0) || self.classes == 0 {
            return bad(format!("degenerate input {:?} or class count {}", self.input, self.classes));
        }
        let mut shape = self.input.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != in_ch || out_ch == 0 || kernel == 0 {
                        return bad(format!("layer {i}: conv expects {in_ch} channels, input is {shape:?}"));
                    }
                    let geom = ConvGeom { stride, pad };
                    match (geom.out_len(shape[1], kernel), geom.out_len(shape[2], kernel)) {
                        (Some(h), Some(w)) => vec![out_ch, h, w],
                        _ => return bad(format!("layer {i}: conv kernel {kernel} does not fit {shape:?}")),
                    }
                }
                Layer::BatchNorm { ch, eps } => {
                    if shape[0] != ch || eps <= 0.0 {
                        return bad(format!("layer {i}: batchnorm over {ch} channels, input is {shape:?}"));
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::AvgPool { k } | Layer::MaxPool { k } => {
                    if shape.len() != 3 || k == 0 || shape[1] < k || shape[2] < k {
                        return bad(format!("layer {i}: cannot pool {shape:?} by {k}"));
                    }
                    vec![shape[0], shape[1] / k, shape[2] / k]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape != [in_features] {
                        return bad(format!("layer {i}: linear expects [{in_features}], input is {shape:?}"));
                    }
                    vec![out_features]
                }
            };
            shapes.push(shape.clone());
        }
        match self.layers.last() {
            Some(Layer::Linear { out_features, .. }) if *out_features == self.classes => {}
            _ => return bad(format!("final layer must be linear with {} outputs", self.classes)),
        }
        // the classifier input must be non-negative: walk back through
        // shape-only layers and pooling to the activation
        let before_fc = &self.layers[..self.layers.len() - 1];
        let feeder = before_fc
            .iter()
            .rev()
            .find(|l| !matches!(l, Layer::Flatten | Layer::AvgPool { .. } | Layer::MaxPool { .. }));
        if !matches!(feeder, Some(Layer::Relu)) {
            return bad("the layer feeding the final linear layer must produce non-negative outputs (ReLU, optionally pooled)".into());
        }
        Ok(shapes)
    }

    /// Conv layers directly followed by batch norm carry no bias.
    fn conv_has_bias(&self, i: usize) -> bool {
        !matches!(self.layers.get(i + 1), Some(Layer::BatchNorm { .. }))
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, usize, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    out.push((format!("l{i}.weight"), i, vec![out_ch, in_ch, kernel, kernel]));
                    if self.conv_has_bias(i) {
                        out.push((format!("l{i}.bias"), i, vec![out_ch]));
                    }
                }
                Layer::BatchNorm { ch, .. } => {
                    out.push((format!("l{i}.scale"), i, vec![ch]));
                    out.push((format!("l{i}.shift"), i, vec![ch]));
                }
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    out.push((format!("l{i}.weight"), i, vec![in_features, out_features]));
                    out.push((format!("l{i}.bias"), i, vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    /// Channel counts of the batch-norm layers, in order.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { ch, .. } => Some(*ch),
                _ => None,
            })
            .collect()
    }

    /// Index of the final fully connected layer's weight in
    /// [`ModelSpec::param_layout`].
    pub fn classifier_weight_index(&self) -> usize {
        let layout = self.param_layout();
        let last = self.layers.len() - 1;
        layout
            .iter()
            .position(|(_, layer, _)| *layer == last)
            .expect("validated spec ends in a linear layer")
    }

    /// Line-oriented text form used inside bundle files.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input;
        let _ = writeln!(s, "input {c} {h} {w}");
        let _ = writeln!(s, "classes {}", self.classes);
        for layer in &self.layers {
            let _ = match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => writeln!(s, "conv {in_ch} {out_ch} {kernel} {stride} {pad}"),
                Layer::BatchNorm { ch, eps } => writeln!(s, "batchnorm {ch} {eps:?}"),
                Layer::Relu => writeln!(s, "relu"),
                Layer::AvgPool { k } => writeln!(s, "avgpool {k}"),
                Layer::MaxPool { k } => writeln!(s, "maxpool {k}"),
                Layer::Flatten => writeln!(s, "flatten"),
                Layer::Linear {
                    in_features,
                    out_features,
                } => writeln!(s, "linear {in_features} {out_features}"),
            };
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let words: Vec<&str> = line.split_whitespace().collect();
            let Some((&head, rest)) = words.split_first() else { continue };
            let nums = |count: usize| -> Result<Vec<usize>> {
                if rest.len() != count {
                    return Err(Error::InvalidSpec(format!("line {}: `{head}` takes {count} values", n + 1)));
                }
                rest.iter()
                    .map(|w| {
                        w.parse::<usize>()
                            .map_err(|_| Error::InvalidSpec(format!("line {}: bad number `{w}`", n + 1)))
                    })
                    .collect()
            };
            match head {
                "input" => {
                    let v = nums(3)?;
                    input = Some([v[0], v[1], v[2]]);
                }
                "classes" => classes = Some(nums(1)?[0]),
                "conv" => {
                    let v = nums(5)?;
                    layers.push(Layer::Conv {
                        in_ch: v[0],
                        out_ch: v[1],
                        kernel: v[2],
                        stride: v[3],
                        pad: v[4],
                    });
                }
                "batchnorm" => {
                    if rest.len() != 2 {
                        return Err(Error::InvalidSpec(format!("line {}: `batchnorm` takes 2 values", n + 1)));
                    }
                    let ch = rest[0]
                        .parse()
                        .map_err(|_| Error::InvalidSpec(format!("line {}: bad channel count", n + 1)))?;
                    let eps = rest[1]
                        .parse()
                        .map_err(|_| Error::InvalidSpec(format!("line {}: bad epsilon", n + 1)))?;
                    layers.push(Layer::BatchNorm { ch, eps });
                }
                "relu" => layers.push(Layer::Relu),
                "avgpool" => layers.push(Layer::AvgPool { k: nums(1)?[0] }),
                "maxpool" => layers.push(Layer::MaxPool { k: nums(1)?[0] }),
                "flatten" => layers.push(Layer::Flatten),
                "linear" => {
                    let v = nums(2)?;
                    layers.push(Layer::Linear {
                        in_features: v[0],
                        out_features: v[1],
                    });
                }
                other => return Err(Error::InvalidSpec(format!("line {}: unknown layer `{other}`", n + 1))),
            }
        }
        let spec = ModelSpec {
            layers,
            input: input.ok_or_else(|| Error::InvalidSpec("missing `input` line".into()))?,
            classes: classes.ok_or_else(|| Error::InvalidSpec("missing `classes` line".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// How batch norm picks its normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training behaviour).
    Batch,
    /// The model's stored running statistics.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    /// Parameter values in [`ModelSpec::param_layout`] order.
    pub params: Vec<Tensor>,
    pub bn_running: Vec<BnStats>,
}

/// Forward outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `K×N` logits.
    pub logits: Tensor,
    /// `K×M` input of the final linear layer.
    pub features: Tensor,
    /// Per batch-norm layer, the current batch's mean and population
    /// variance of that layer's input.
    pub bn_stats: Vec<BnStats>,
}

/// Forward outputs as graph nodes.
#[derive(Clone, Debug)]
pub struct GraphTrace<'g> {
    pub logits: Var<'g>,
    pub features: Var<'g>,
    /// `(mean, variance)` per batch-norm layer, each of shape `[C]`.
    pub bn_stats: Vec<(Var<'g>, Var<'g>)>,
}

impl Model {
    /// Kaiming-style initialization: weights drawn from `N(0, 2 / fan_in)`,
    /// zero biases, unit batch-norm scale, zero shift, running stats (0, 1).
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, Purpose::ModelInit, 0);
        let params = spec
            .param_layout()
            .into_iter()
            .map(|(name, _, shape)| {
                if name.ends_with(".weight") {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut t = rng::gaussian(&shape, &mut rng);
                    t.data_mut().iter_mut().for_each(|v| *v *= std);
                    t
                } else if name.ends_with(".scale") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        let bn_running = spec
            .bn_channels()
            .into_iter()
            .map(|ch| BnStats {
                mean: Tensor::zeros(&[ch]),
                var: Tensor::full(&[ch], 1.0),
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            params,
            bn_running,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_layout().into_iter().map(|(n, _, _)| n).collect()
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| graph.variable(p.clone())).collect()
    }

    /// Runs the network on `x` (`K×C×H×W`) using `params` bound to the same
    /// graph.
    pub fn forward_graph<'g>(&self, x: Var<'g>, params: &[Var<'g>], mode: BnMode) -> Result<GraphTrace<'g>> {
        let [c, h, w] = self.spec.input;
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape("model_forward", &xs, &[0, c, h, w]));
        }
        let graph = x.graph();
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or_else(|| Error::invalid("model_forward", "too few parameters"));
        let mut act = x;
        let mut features = None;
        let mut bn_stats = Vec::new();
        let last = self.spec.layers.len() - 1;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            act = match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let out = act.conv2d(next()?, ConvGeom { stride, pad })?;
                    if self.spec.conv_has_bias(i) {
                        let bias = next()?;
                        let shape = out.shape();
                        out.add(bias.reshape(&[1, shape[1], 1, 1])?.expand(&shape)?)?
                    } else {
                        out
                    }
                }
                Layer::BatchNorm { eps, .. } => {
                    let scale = next()?;
                    let shift = next()?;
                    let (mean, var) = batch_moments(act)?;
                    let (norm_mean, norm_var) = match mode {
                        BnMode::Batch => (mean, var),
                        BnMode::Running => {
                            let r = &self.bn_running[bn_stats.len()];
                            (graph.constant(r.mean.clone()), graph.constant(r.var.clone()))
                        }
                    };
                    bn_stats.push((mean, var));
                    normalize(act, norm_mean, norm_var, eps)?.channel_affine(scale, shift)?
                }
                Layer::Relu => act.relu()?,
                Layer::AvgPool { k } => act.avg_pool(k)?,
                Layer::MaxPool { k } => act.max_pool(k)?,
                Layer::Flatten => act.flatten()?,
                Layer::Linear { .. } => {
                    let weight = next()?;
                    let bias = next()?;
                    if i == last {
                        features = Some(act);
                    }
                    act.matmul(weight)?.add(bias)?
                }
            };
        }
        Ok(GraphTrace {
            logits: act,
            features: features.expect("validated spec ends in a linear layer"),
            bn_stats,
        })
    }

    /// Plain forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<ForwardTrace> {
        let graph = Graph::new();
        graph.set_mode(GradMode::NoGrad);
        let params: Vec<Var<'_>> = self.params.iter().map(|p| graph.constant(p.clone())).collect();
        let trace = self.forward_graph(graph.constant(x.clone()), &params, mode)?;
        Ok(ForwardTrace {
            logits: trace.logits.tensor(),
            features: trace.features.tensor(),
            bn_stats: trace
                .bn_stats
                .iter()
                .map(|(m, v)| BnStats {
                    mean: m.tensor(),
                    var: v.tensor(),
                })
                .collect(),
        })
    }

    /// Predicted classes under running-statistics batch norm.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x, BnMode::Running)?.logits;
        let n = self.spec.classes;
        Ok(logits
            .data()
            .chunks(n)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Per-channel mean and population variance over every axis except the
/// channel axis (axis 1).
pub fn batch_moments(x: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let shape = x.shape();
    let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
    let mean = x.mean_keep(&axes)?;
    let centered = x.sub(mean.expand(&shape)?)?;
    let var = centered.square()?.mean_keep(&axes)?;
    let ch = [shape[1]];
    Ok((mean.reshape(&ch)?, var.reshape(&ch)?))
}

/// `(x - mean) / sqrt(var + eps)` with per-channel `[C]` statistics.
pub fn normalize<'g>(x: Var<'g>, mean: Var<'g>, var: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let shape = x.shape();
    let mut per_channel = vec![1; shape.len()];
    per_channel[1] = shape[1];
    let mean = mean.reshape(&per_channel)?.expand(&shape)?;
    let std = var.add_scalar(eps)?.sqrt()?.reshape(&per_channel)?.expand(&shape)?;
    x.sub(mean)?.div(std)
}

/// Mean over the batch of `-log softmax(z)[y]`, stabilized by subtracting
/// each row's maximum.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let (k, n) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let graph = logits.graph();
    let value = logits.value();
    let row_max = Tensor::from_fn(&[k, 1], |r| {
        value.data()[r * n..(r + 1) * n]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let shifted = logits.sub(graph.constant(row_max).expand(&shape)?)?;
    let log_sum_exp = shifted.exp()?.sum_axes(&[1])?.ln()?;
    let one_hot = Tensor::from_fn(&shape, |i| if labels[i / n] == i % n { 1.0 } else { 0.0 });
    let picked = shifted.mul(graph.constant(one_hot))?.sum_axes(&[1])?;
    log_sum_exp.sub(picked)?.mean()
}

/// Plain softmax of each row.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let n = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch_size: 32,
            lr: 0.01,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

/// Trains `model` with Adam on random mini-batches and updates its running
/// batch-norm statistics. Returns the loss of the last step.
pub fn train(model: &mut Model, images: &Tensor, labels: &[usize], opts: &TrainOptions) -> Result<f64> {
    use rand::Rng;
    let count = images.shape()[0];
    if count != labels.len() || count == 0 {
        return Err(Error::shape("train", images.shape(), &[labels.len()]));
    }
    let mut rng = rng::stream(opts.seed, Purpose::Training, 0);
    let mut adams: Vec<Adam> = model.params.iter().map(|p| Adam::new(p.len())).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..opts.steps {
        let picks: Vec<usize> = (0..opts.batch_size.min(count)).map(|_| rng.random_range(0..count)).collect();
        let batch = Tensor::stack(&picks.iter().map(|&i| images.index_outer(i)).collect::<Vec<_>>())?;
        let batch_labels: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
        let graph = Graph::new();
        let params = model.bind(&graph);
        let x = graph.constant(batch);
        let trace = model.forward_graph(x, &params, BnMode::Batch)?;
        let loss = cross_entropy(trace.logits, &batch_labels)?;
        last_loss = loss.item();
        let grads = graph.grad(loss, &params)?;
        for ((p, g), adam) in model.params.iter_mut().zip(&grads).zip(&mut adams) {
            adam.step(p.data_mut(), g.data(), opts.lr);
        }
        for (running, (mean, var)) in model.bn_running.iter_mut().zip(&trace.bn_stats) {
            let m = opts.bn_momentum;
            let blend = |r: &mut Tensor, b: &Tensor| {
                for (rv, bv) in r.data_mut().iter_mut().zip(b.data()) {
                    *rv = (1.0 - m) * *rv + m * bv;
                }
            };
            blend(&mut running.mean, &mean.value());
            blend(&mut running.var, &var.value());
        }
    }
    Ok(last_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tinier() -> ModelSpec {
        ModelSpec::preset(Preset::Tinier, [1, 8, 8], 4).unwrap()
    }

    #[test]
    fn presets_validate_and_chain() {
        for preset in [Preset::Tiny, Preset::Tinier] {
            for input in [[1, 16, 16], [3, 32, 32]] {
                let spec = ModelSpec::preset(preset, input, 10).unwrap();
                assert_eq!(spec.validate().unwrap().last().unwrap(), &vec![10]);
            }
        }
    }

    #[test]
    fn rejects_signed_classifier_input() {
        let mut spec = tinier();
        // swap ReLU for an identity-like layer order: BN feeding the pool
        spec.layers.remove(2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_broken_chain() {
        let mut spec = tinier();
        spec.layers[0] = Layer::Conv {
            in_ch: 3,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn text_round_trip() {
        let spec = ModelSpec::preset(Preset::Tiny, [1, 16, 16], 10).unwrap();
        assert_eq!(ModelSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(ModelSpec::from_text("input 1 2\n").is_err());
    }

    #[test]
    fn init_statistics_and_determinism() {
        let spec = ModelSpec {
            layers: vec![
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    in_features: 2,
                    out_features: 3,
                },
            ],
            input: [2, 1, 1],
            classes: 3,
        };
        let mut draws = Vec::new();
        for seed in 0..1700 {
            let m = Model::init(&spec, seed).unwrap();
            draws.extend_from_slice(m.params[0].data());
        }
        assert!(draws.len() >= 10_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.2, "std {std}");
        assert_eq!(Model::init(&spec, 7).unwrap(), Model::init(&spec, 7).unwrap());
    }

    #[test]
    fn batchnorm_init_and_conv_bias_rule() {
        let spec = tinier();
        let model = Model::init(&spec, 1).unwrap();
        let names = model.param_names();
        assert_eq!(names, ["l0.weight", "l1.scale", "l1.shift", "l5.weight", "l5.bias"]);
        assert!(model.params[1].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batch_mode_normalizes_each_channel() {
        let graph = Graph::new();
        let x = graph.constant(Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37) % 17) as f64 * 3.0 - 20.0));
        let (mean, var) = batch_moments(x).unwrap();
        let y = normalize(x, mean, var, BN_EPS).unwrap();
        let (m2, v2) = batch_moments(y).unwrap();
        for c in 0..2 {
            assert!(m2.value().data()[c].abs() < 1e-9);
            // var / (var + eps) with var of order 100
            assert!((v2.value().data()[c] - 1.0).abs() < 1e-6, "{}", v2.value().data()[c]);
        }
    }

    #[test]
    fn batch_and_running_modes_agree_when_stats_match() {
        let spec = ModelSpec::preset(Preset::Tiny, [1, 16, 16], 10).unwrap();
        let mut model = Model::init(&spec, 3).unwrap();
        let x = Tensor::from_fn(&[3, 1, 16, 16], |i| ((i * 13) % 29) as f64 / 29.0);
        let batch = model.forward(&x, BnMode::Batch).unwrap();
        model.bn_running = batch.bn_stats.clone();
        let running = model.forward(&x, BnMode::Running).unwrap();
        assert!(batch.logits.max_abs_diff(&running.logits) < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let graph = Graph::new();
        let uniform = graph.constant(Tensor::zeros(&[1, 10]));
        let loss = cross_entropy(uniform, &[3]).unwrap().item();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let confident = graph.constant(Tensor::from_fn(&[1, 3], |i| if i == 1 { 40.0 } else { 0.0 }));
        assert!(cross_entropy(confident, &[1]).unwrap().item() < 1e-6);
        assert!(matches!(
            cross_entropy(confident, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y_over_k() {
        let graph = Graph::new();
        let logits_t = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.7).sin());
        let z = graph.variable(logits_t.clone());
        let labels = [2, 0];
        let loss = cross_entropy(z, &labels).unwrap();
        let grad = graph.grad(loss, &[z]).unwrap().remove(0);
        let p = softmax_rows(&logits_t);
        for i in 0..6 {
            let y = if labels[i / 3] == i % 3 { 1.0 } else { 0.0 };
            assert!((grad.data()[i] - (p.data()[i] - y) / 2.0).abs() < 1e-12);
        }
    }
}
