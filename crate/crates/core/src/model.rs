//! Reference convolutional network, trainable-parameter policies, SGD with
//! momentum, source pretraining and checkpoint files.
//!
//! Architecture:
//! `Conv(in->8,3x3,pad 1) -> Norm -> ReLU -> AvgPool 2x2 -> Conv(8->16,3x3,pad 1)
//! -> Norm -> ReLU -> GlobalAvgPool -> Linear(16->classes)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::ndgrad::{kernels, Axes, Gradients, NodeId, RngStream, Tape, Tensor, BN_EPS};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Interception points for the feature-statistics transform.
pub const STYLE_LAYER_BLOCK1: usize = 1;
pub const STYLE_LAYER_POOL1: usize = 2;
pub const STYLE_LAYER_BLOCK2: usize = 3;

const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub num_classes: usize,
    pub in_channels: usize,
    pub widths: [usize; 2],
    pub kernel: usize,
}

impl Architecture {
    pub fn reference(num_classes: usize, in_channels: usize) -> Self {
        Architecture {
            num_classes,
            in_channels,
            widths: [8, 16],
            kernel: 3,
        }
    }

    /// Expected parameter shapes by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let [w1, w2] = self.widths;
        let k = self.kernel;
        [
            ("conv1.weight", vec![w1, self.in_channels, k, k]),
            ("conv1.bias", vec![w1]),
            ("norm1.gamma", vec![w1]),
            ("norm1.beta", vec![w1]),
            ("conv2.weight", vec![w2, w1, k, k]),
            ("conv2.bias", vec![w2]),
            ("norm2.gamma", vec![w2]),
            ("norm2.beta", vec![w2]),
            ("fc.weight", vec![w2, self.num_classes]),
            ("fc.bias", vec![self.num_classes]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect()
    }

    pub fn buffer_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let [w1, w2] = self.widths;
        [
            ("norm1.running_mean", vec![w1]),
            ("norm1.running_var", vec![w1]),
            ("norm2.running_mean", vec![w2]),
            ("norm2.running_var", vec![w2]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    BatchStats,
    /// Normalize with running statistics accumulated during pretraining.
    RunningStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPolicy {
    #[default]
    NormAffineOnly,
    AllParameters,
}

impl FromStr for ParamPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_affine_only" => Ok(ParamPolicy::NormAffineOnly),
            "all_parameters" => Ok(ParamPolicy::AllParameters),
            _ => Err(Error::Config(format!("unknown parameter policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub norm_mode: NormMode,
    pub style_layer_index: usize,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Replaces the captured feature map; must return the same shape.
pub type StyleInjection<'a> = &'a mut dyn FnMut(&Tensor) -> Result<Tensor>;

/// A recorded forward pass. The tape can be consumed by [`ForwardGraph::backward`].
pub struct ForwardGraph {
    pub tape: Tape,
    pub logits: NodeId,
    pub probs: NodeId,
    pub param_ids: BTreeMap<String, NodeId>,
    /// Feature map at the style layer, before any injection.
    pub features: Tensor,
    /// Per-norm-layer batch (mean, biased variance) of the pre-normalization activations.
    pub norm_moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardGraph {
    pub fn probs(&self) -> &Tensor {
        self.tape.value(self.probs)
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Backpropagates `loss` and returns gradients for the named parameters.
    pub fn backward(self, loss: NodeId, names: &[String]) -> Result<ParamGrads> {
        let ids: Vec<NodeId> = names
            .iter()
            .map(|n| {
                self.param_ids
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::UnknownParam(n.clone()))
            })
            .collect::<Result<_>>()?;
        let grads: Gradients = self.tape.backward(loss, &ids)?;
        Ok(names
            .iter()
            .zip(&ids)
            .map(|(n, id)| (n.clone(), grads.get(*id).expect("requested").clone()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub features: Tensor,
}

/// Builds the reference network with He-normal weights, zero biases, unit
/// scales and zero shifts.
pub fn build_reference_net(num_classes: usize, in_channels: usize, seed: u64) -> Result<ModelState> {
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if in_channels < 1 {
        return Err(Error::Config("in_channels must be at least 1".into()));
    }
    let arch = Architecture::reference(num_classes, in_channels);
    let init = RngStream::new(seed).split("init");
    let mut params = BTreeMap::new();
    for (name, shape) in arch.param_shapes() {
        let t = if name.ends_with(".weight") {
            let fan_in: usize = if name.starts_with("fc") {
                shape[0]
            } else {
                shape[1..].iter().product()
            };
            let std = (2.0 / fan_in as f64).sqrt();
            init.split(&name).gaussian_tensor(&shape).map(|v| v * std)
        } else if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    let buffers = arch
        .buffer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let v = if name.ends_with("var") { 1.0 } else { 0.0 };
            (name, Tensor::full(&shape, v))
        })
        .collect();
    Ok(ModelState {
        arch,
        params,
        buffers,
        norm_mode: NormMode::BatchStats,
        style_layer_index: STYLE_LAYER_BLOCK1,
    })
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn with_norm_mode(mut self, mode: NormMode) -> Self {
        self.norm_mode = mode;
        self
    }

    pub fn set_style_layer(&mut self, index: usize) -> Result<()> {
        if !(STYLE_LAYER_BLOCK1..=STYLE_LAYER_BLOCK2).contains(&index) {
            return Err(Error::Config(format!(
                "style layer index must be in 1..=3, got {index}"
            )));
        }
        self.style_layer_index = index;
        Ok(())
    }


    /// Forward pass that keeps the tape for differentiation.
    pub fn forward_graph(
        &self,
        batch: &Tensor,
        injection: Option<StyleInjection<'_>>,
    ) -> Result<ForwardGraph> {
        let (_, c, _, _) = batch.dims4("forward")?;
        if c != self.arch.in_channels {
            return Err(Error::shape(
                "forward",
                format!("batch has {c} channels, model expects {}", self.arch.in_channels),
            ));
        }
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), tape.leaf(t.clone()));
        }
        let (logits, probs, features, norm_moments) = self.forward_on(&mut tape, &ids, batch, injection)?;
        Ok(ForwardGraph {
            tape,
            logits,
            probs,
            param_ids: ids,
            features,
            norm_moments,
        })
    }

    /// Records the forward pass on `tape`, reading parameters from the
    /// given leaf nodes instead of the stored values.
    ///
    /// Returns logits, probabilities, the style-layer feature map and the
    /// per-norm-layer batch moments.
    #[allow(clippy::type_complexity)]
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        batch: &Tensor,
        mut injection: Option<StyleInjection<'_>>,
    ) -> Result<(NodeId, NodeId, Tensor, Vec<(Vec<f64>, Vec<f64>)>)> {
        for name in self.params.keys() {
            if !ids.contains_key(name) {
                return Err(Error::UnknownParam(name.clone()));
            }
        }
        let p = |n: &str| ids[n];
        let mut norm_moments = Vec::new();
        let mut features = None;

        let x = tape.leaf(batch.clone());
        let z = tape.conv2d(x, p("conv1.weight"), Some(p("conv1.bias")), 1)?;
        let z = self.norm(tape, z, "norm1", ids, &mut norm_moments)?;
        let mut h = tape.relu(z)?;
        h = self.intercept(tape, h, STYLE_LAYER_BLOCK1, &mut injection, &mut features)?;
        h = tape.avg_pool2d(h)?;
        h = self.intercept(tape, h, STYLE_LAYER_POOL1, &mut injection, &mut features)?;
        let z = tape.conv2d(h, p("conv2.weight"), Some(p("conv2.bias")), 1)?;
        let z = self.norm(tape, z, "norm2", ids, &mut norm_moments)?;
        h = tape.relu(z)?;
        h = self.intercept(tape, h, STYLE_LAYER_BLOCK2, &mut injection, &mut features)?;
        let g = tape.global_avg_pool(h)?;
        let logits = tape.matmul(g, p("fc.weight"))?;
        let logits = tape.add(logits, p("fc.bias"))?;
        let logp = tape.log_softmax(logits)?;
        let probs = tape.exp(logp)?;
        let features = features.ok_or_else(|| {
            Error::Config(format!("style layer index {} is invalid", self.style_layer_index))
        })?;
        Ok((logits, probs, features, norm_moments))
    }

    /// Forward pass returning values only.
    pub fn forward(&self, batch: &Tensor, injection: Option<StyleInjection<'_>>) -> Result<ForwardOutput> {
        let g = self.forward_graph(batch, injection)?;
        Ok(ForwardOutput {
            logits: g.logits().clone(),
            probs: g.probs().clone(),
            features: g.features,
        })
    }

    fn intercept(
        &self,
        tape: &mut Tape,
        h: NodeId,
        layer: usize,
        injection: &mut Option<StyleInjection<'_>>,
        features: &mut Option<Tensor>,
    ) -> Result<NodeId> {
        if layer != self.style_layer_index {
            return Ok(h);
        }
        let z = tape.value(h).clone();
        let out = match injection {
            Some(f) => {
                let replaced = f(&z)?;
                if replaced.shape() != z.shape() {
                    return Err(Error::Contract(format!(
                        "style injection changed shape {:?} -> {:?}",
                        z.shape(),
                        replaced.shape()
                    )));
                }
                tape.leaf(replaced)
            }
            None => h,
        };
        *features = Some(z);
        Ok(out)
    }

    fn norm(
        &self,
        tape: &mut Tape,
        z: NodeId,
        layer: &str,
        ids: &BTreeMap<String, NodeId>,
        moments: &mut Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<NodeId> {
        moments.push(kernels::channel_moments(tape.value(z))?);
        let normalized = match self.norm_mode {
            NormMode::BatchStats => tape.batch_normalize(z)?,
            NormMode::RunningStats => {
                let mean = &self.buffers[&format!("{layer}.running_mean")];
                let var = &self.buffers[&format!("{layer}.running_var")];
                let scale: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = mean.data().iter().zip(&scale).map(|(m, s)| -m * s).collect();
                let s = tape.leaf(Tensor::from_vec(scale));
                let b = tape.leaf(Tensor::from_vec(shift));
                tape.channel_affine(z, s, b)?
            }
        };
        tape.channel_affine(
            normalized,
            ids[&format!("{layer}.gamma")],
            ids[&format!("{layer}.beta")],
        )
    }

    /// Names of the parameters a policy makes trainable.
    pub fn resolve_trainables(&self, policy: ParamPolicy) -> Result<Vec<String>> {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| match policy {
                ParamPolicy::AllParameters => true,
                ParamPolicy::NormAffineOnly => {
                    n.starts_with("norm") && (n.ends_with(".gamma") || n.ends_with(".beta"))
                }
            })
            .cloned()
            .collect();
        if names.is_empty() {
            return Err(Error::Config(format!("policy {policy:?} selects no parameters")));
        }
        Ok(names)
    }

    pub fn trainable_scalar_count(&self, names: &[String]) -> usize {
        names.iter().filter_map(|n| self.params.get(n)).map(Tensor::len).sum()
    }

    /// Blends batch moments into the running statistics.
    pub fn update_running_stats(&mut self, moments: &[(Vec<f64>, Vec<f64>)]) {
        for (layer, (mean, var)) in ["norm1", "norm2"].iter().zip(moments) {
            for (key, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self.buffers.get_mut(&format!("{layer}.{key}")).expect("buffer");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
                }
            }
        }
    }

    /// Predicted class per row of `batch`.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch, None)?.probs))
    }

    /// Accuracy on a labeled split, evaluated in chunks of `batch_size`.
    pub fn accuracy(&self, split: &Split, batch_size: usize) -> Result<f64> {
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(batch_size.max(2)) {
            let images = split.images.select_rows(chunk)?;
            let pred = self.predict(&images)?;
            correct += pred
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == split.labels[i])
                .count();
        }
        Ok(correct as f64 / split.len() as f64)
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.rows().map(argmax).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `v <- momentum * v + g; p <- p - lr * v` for every parameter in `grads`.
    pub fn step(&mut self, model: &mut ModelState, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            let p = model
                .params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(v) = self.velocity.get(name) {
                if v.shape() != g.shape() {
                    return Err(Error::Contract(format!("velocity for {name} has wrong shape")));
                }
            }
        }
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = model.params.get_mut(name).expect("checked above");
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SgdMomentum::step`].
pub fn sgd_step(model: &mut ModelState, grads: &ParamGrads, opt: &mut SgdMomentum) -> Result<()> {
    opt.step(model, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean cross-entropy on the training split before any update.
    pub initial_loss: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Source-validation accuracy with running statistics.
    pub val_accuracy: f64,
}

/// Mean cross-entropy of `labels` under the model's prediction, on the tape.
pub fn cross_entropy(graph: &mut ForwardGraph, labels: &[usize]) -> Result<NodeId> {
    let (b, k) = graph.logits().dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{b} rows, {} labels", labels.len())));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        onehot[i * k + y] = 1.0;
    }
    let tape = &mut graph.tape;
    let logp = tape.log_softmax(graph.logits)?;
    let mask = tape.leaf(Tensor::new(vec![b, k], onehot)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.reduce_sum(picked, Axes::All)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Supervised training on the source split with cross-entropy and SGD.
///
/// Training uses batch statistics and accumulates running statistics;
/// the returned model is left in running-statistics mode.
pub fn pretrain(
    model: &ModelState,
    train: &Split,
    val: &Split,
    cfg: &PretrainConfig,
) -> Result<(ModelState, PretrainReport)> {
    let mut m = model.clone();
    if cfg.epochs == 0 {
        let val_accuracy = m.accuracy(val, cfg.batch_size)?;
        return Ok((
            m,
            PretrainReport {
                initial_loss: f64::NAN,
                epoch_losses: Vec::new(),
                val_accuracy,
            },
        ));
    }
    let names = m.resolve_trainables(ParamPolicy::AllParameters)?;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let rng = RngStream::new(cfg.seed).split("pretrain");
    m.norm_mode = NormMode::BatchStats;
    let initial_loss = mean_loss(&m, train, cfg.batch_size)?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.split_index(epoch as u64).permutation(train.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let sub = train.subset(chunk)?;
            let mut graph = m.forward_graph(&sub.images, None)?;
            let moments = graph.norm_moments.clone();
            let loss = cross_entropy(&mut graph, &sub.labels)?;
            let value = graph.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "pretrain loss" });
            }
            let grads = graph.backward(loss, &names)?;
            opt.step(&mut m, &grads)?;
            m.update_running_stats(&moments);
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    m.norm_mode = NormMode::RunningStats;
    let val_accuracy = m.accuracy(val, cfg.batch_size)?;
    Ok((
        m,
        PretrainReport {
            initial_loss,
            epoch_losses,
            val_accuracy,
        },
    ))
}

fn mean_loss(m: &ModelState, split: &Split, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in idx.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let sub = split.subset(chunk)?;
        let mut graph = m.forward_graph(&sub.images, None)?;
        let loss = cross_entropy(&mut graph, &sub.labels)?;
        total += graph.tape.value(loss).data()[0];
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    architecture: Architecture,
    params: BTreeMap<String, StoredTensor>,
    buffers: BTreeMap<String, StoredTensor>,
    norm_mode: NormMode,
    style_layer_index: usize,
}

fn store(map: &BTreeMap<String, Tensor>) -> BTreeMap<String, StoredTensor> {
    map.iter()
        .map(|(n, t)| {
            (
                n.clone(),
                StoredTensor {
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                },
            )
        })
        .collect()
}

fn restore(
    kind: &str,
    stored: BTreeMap<String, StoredTensor>,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, Tensor>> {
    if stored.len() != expected.len() || stored.keys().any(|k| !expected.contains_key(k)) {
        return Err(Error::Checkpoint(format!(
            "{kind} names {:?} do not match the architecture",
            stored.keys().collect::<Vec<_>>()
        )));
    }
    stored
        .into_iter()
        .map(|(name, st)| {
            if st.shape != expected[&name] {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, architecture expects {:?}",
                    st.shape, expected[&name]
                )));
            }
            let t = Tensor::new(st.shape, st.values)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

/// Serializes a model as JSON text. `f64` values use the shortest decimal
/// form that parses back to the identical bits.
pub fn checkpoint_to_string(model: &ModelState) -> String {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        architecture: model.arch.clone(),
        params: store(&model.params),
        buffers: store(&model.buffers),
        norm_mode: model.norm_mode,
        style_layer_index: model.style_layer_index,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelState> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("checkpoint: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v}, expected {CHECKPOINT_FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Malformed("checkpoint: missing format_version".into())),
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| Error::Malformed(format!("checkpoint: {e}")))?;
    let arch = file.architecture;
    let params = restore("parameter", file.params, &arch.param_shapes())?;
    let buffers = restore("buffer", file.buffers, &arch.buffer_shapes())?;
    let mut model = ModelState {
        arch,
        params,
        buffers,
        norm_mode: file.norm_mode,
        style_layer_index: STYLE_LAYER_BLOCK1,
    };
    model.set_style_layer(file.style_layer_index)?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
