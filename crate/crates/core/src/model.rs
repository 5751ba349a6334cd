//! Small pixel-to-pixel encoder-decoder models.
//!
//! Models are sequential layer stacks over CxHxW tensors. Downsampling
//! happens through stride-2 convolutions, upsampling through bilinear
//! doubling, and the counts must balance so output extents equal input
//! extents. Named taps expose post-normalization, post-ReLU feature
//! maps for the feature-space ensembles.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::mae_node;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    /// Per-channel learned gain/bias (inference-mode normalization).
    Norm,
    Relu,
    Sigmoid,
    /// Bilinear doubling of both spatial extents.
    Upsample2x,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    /// Index into `layers`; the tap exposes that layer's output.
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub input_channels: usize,
    pub output_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<TapSpec>,
    pub seed: u64,
}

impl ModelSpec {
    /// Channel count flowing out of each layer.
    fn channel_trace(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                if let LayerSpec::Conv { out_channels, .. } = l {
                    c = *out_channels;
                }
                c
            })
            .collect()
    }

    pub fn channels_at(&self, layer: usize) -> usize {
        self.channel_trace()[layer]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        let mut downs = 0usize;
        let mut ups = 0usize;
        for l in &self.layers {
            match l {
                LayerSpec::Conv { out_channels, kernel, stride, dilation } => {
                    if *out_channels == 0 {
                        return Err(Error::InvalidArgument("conv with zero output channels".into()));
                    }
                    if *kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "conv kernels must be odd so padding can preserve extents, got {kernel}"
                        )));
                    }
                    if !matches!(stride, 1 | 2) {
                        return Err(Error::InvalidArgument(format!("conv stride must be 1 or 2, got {stride}")));
                    }
                    if *dilation == 0 {
                        return Err(Error::InvalidArgument("conv dilation must be >= 1".into()));
                    }
                    if *stride == 2 {
                        downs += 1;
                    }
                }
                LayerSpec::Upsample2x => ups += 1,
                _ => {}
            }
        }
        if downs != ups {
            return Err(Error::InvalidArgument(format!(
                "{downs} stride-2 convs vs {ups} upsamples; output extents would differ from input"
            )));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Sigmoid)) {
            return Err(Error::InvalidArgument("models must end in a sigmoid output layer".into()));
        }
        let trace = self.channel_trace();
        if *trace.last().unwrap() != self.output_channels {
            return Err(Error::shape(
                "model output channels",
                format!("{}", self.output_channels),
                format!("{}", trace.last().unwrap()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for tap in &self.taps {
            if tap.layer >= self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "tap `{}` points past the last layer",
                    tap.name
                )));
            }
            if !seen.insert(tap.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tap name `{}`", tap.name)));
            }
            let c = trace[tap.layer];
            if !c.is_power_of_two() {
                return Err(Error::InvalidArgument(format!(
                    "tap `{}` has {c} channels; tap channel counts must be powers of two",
                    tap.name
                )));
            }
        }
        Ok(())
    }

    pub fn tap(&self, name: &str) -> Result<&TapSpec> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn tap_channels(&self, name: &str) -> Result<usize> {
        Ok(self.channels_at(self.tap(name)?.layer))
    }

    /// Declared depth of a tap (its layer index), used to order sweeps.
    pub fn tap_depth(&self, name: &str) -> Result<usize> {
        Ok(self.tap(name)?.layer)
    }

    /// Spatial resolution at a tap for a given input resolution.
    pub fn tap_hw(&self, name: &str, input_hw: (usize, usize)) -> Result<(usize, usize)> {
        let tap = self.tap(name)?;
        let (mut h, mut w) = input_hw;
        for l in &self.layers[..=tap.layer] {
            match l {
                LayerSpec::Conv { stride: 2, .. } => {
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Upsample2x => {
                    h *= 2;
                    w *= 2;
                }
                _ => {}
            }
        }
        Ok((h, w))
    }

    /// Shapes of the trainable tensors, in forward order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c = self.input_channels;
        for l in &self.layers {
            match l {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    shapes.push(vec![*out_channels, c, *kernel, *kernel]);
                    shapes.push(vec![*out_channels]);
                    c = *out_channels;
                }
                LayerSpec::Norm => {
                    shapes.push(vec![c]);
                    shapes.push(vec![c]);
                }
                _ => {}
            }
        }
        shapes
    }
}

/// Result of laying a model's forward pass into a graph.
pub struct ForwardPass {
    pub output: NodeId,
    pub tap_nodes: Vec<NodeId>,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    frozen: bool,
    backward_count: Arc<AtomicU64>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            params: self.params.clone(),
            frozen: self.frozen,
            backward_count: Arc::new(AtomicU64::new(0)),
        }
    }
}

/// Seeded fan-in-scaled uniform init.
pub fn build_model(spec: ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = Vec::new();
    let mut c = spec.input_channels;
    for l in &spec.layers {
        match l {
            LayerSpec::Conv { out_channels, kernel, .. } => {
                let fan_in = c * kernel * kernel;
                let a = 1.0 / (fan_in as f64).sqrt();
                let n = out_channels * c * kernel * kernel;
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                params.push(Tensor::new(vec![*out_channels, c, *kernel, *kernel], data)?);
                params.push(Tensor::zeros(vec![*out_channels]));
                c = *out_channels;
            }
            LayerSpec::Norm => {
                params.push(Tensor::filled(vec![c], 1.0));
                params.push(Tensor::zeros(vec![c]));
            }
            _ => {}
        }
    }
    let model = Model {
        spec,
        params,
        frozen: false,
        backward_count: Arc::new(AtomicU64::new(0)),
    };
    // Dry-run the pixel-to-pixel contract on a small even extent.
    let probe = Tensor::zeros(vec![model.spec.input_channels, 32, 32]);
    let out = model.predict(&probe)?;
    if out.shape() != [model.spec.output_channels, 32, 32] {
        return Err(Error::shape(
            "model output",
            format!("[{}, 32, 32]", model.spec.output_channels),
            format!("{:?}", out.shape()),
        ));
    }
    Ok(model)
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Reopen a frozen model for further fine-tuning (zoo build only).
    pub(crate) fn thaw(&mut self) {
        self.frozen = false;
    }

    /// Set the final conv bias so initial predictions sit at `level`
    /// after the sigmoid. Starting calibrated keeps the first training
    /// epoch from driving the net into dead-ReLU collapse.
    pub fn init_output_level(&mut self, level: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        let level = level.clamp(0.01, 0.99);
        let logit = (level / (1.0 - level)).ln();
        let mut cursor = 0usize;
        let mut last_conv_bias = None;
        for l in &self.spec.layers {
            match l {
                LayerSpec::Conv { .. } => {
                    last_conv_bias = Some(cursor + 1);
                    cursor += 2;
                }
                LayerSpec::Norm => cursor += 2,
                _ => {}
            }
        }
        let idx = last_conv_bias
            .ok_or_else(|| Error::InvalidArgument("model has no conv layer".into()))?;
        let shape = self.params[idx].shape().to_vec();
        self.params[idx] = Tensor::filled(shape, logit);
        Ok(())
    }

    /// How many backward passes this model has participated in.
    pub fn backward_count(&self) -> u64 {
        self.backward_count.load(Ordering::Relaxed)
    }

    /// Lay the forward pass into `g`. With `trainable`, parameters enter
    /// as gradient-carrying leaves and are reported in `param_nodes`.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        input: NodeId,
        taps: &[&str],
        trainable: bool,
    ) -> Result<ForwardPass> {
        let tap_layers: Vec<usize> = taps
            .iter()
            .map(|name| self.spec.tap(name).map(|t| t.layer))
            .collect::<Result<_>>()?;

        g.register_participant(self.backward_count.clone());

        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut next_param = {
            let mut idx = 0usize;
            move |g: &mut Graph, params: &[Tensor]| {
                let node = g.leaf(params[idx].clone(), trainable);
                idx += 1;
                node
            }
        };

        let mut cur = input;
        let mut layer_outputs = Vec::with_capacity(self.spec.layers.len());
        for l in &self.spec.layers {
            cur = match l {
                LayerSpec::Conv { kernel, stride, dilation, .. } => {
                    let k = next_param(g, &self.params);
                    let b = next_param(g, &self.params);
                    param_nodes.push(k);
                    param_nodes.push(b);
                    let padding = dilation * (kernel - 1) / 2;
                    g.conv2d(cur, k, b, *stride, padding, *dilation)?
                }
                LayerSpec::Norm => {
                    let gain = next_param(g, &self.params);
                    let bias = next_param(g, &self.params);
                    param_nodes.push(gain);
                    param_nodes.push(bias);
                    g.channel_affine(cur, gain, bias)?
                }
                LayerSpec::Relu => g.relu(cur),
                LayerSpec::Sigmoid => g.sigmoid(cur),
                LayerSpec::Upsample2x => {
                    let shape = g.value(cur).shape();
                    let (h, w) = (shape[1], shape[2]);
                    g.bilinear_resize(cur, h * 2, w * 2)?
                }
            };
            layer_outputs.push(cur);
        }
        let tap_nodes = tap_layers.iter().map(|&i| layer_outputs[i]).collect();
        Ok(ForwardPass { output: cur, tap_nodes, param_nodes })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pass = self.forward_nodes(&mut g, x, &[], false)?;
        Ok(g.value(pass.output).clone())
    }

    /// Prediction plus post-norm, post-ReLU feature maps at the named taps.
    pub fn forward_with_features(&self, image: &Tensor, taps: &[&str]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pass = self.forward_nodes(&mut g, x, taps, false)?;
        let features = pass.tap_nodes.iter().map(|&n| g.value(n).clone()).collect();
        Ok((g.value(pass.output).clone(), features))
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape().len() != 3 || image.shape()[0] != self.spec.input_channels {
            return Err(Error::shape(
                "model input",
                format!("[{}, H, W]", self.spec.input_channels),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Mean MAE of predictions against targets.
    pub fn mean_mae(&self, inputs: &[Tensor], targets: &[Tensor]) -> Result<f64> {
        let mut acc = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            acc += crate::losses::mae(&self.predict(x)?, y)?;
        }
        Ok(acc / inputs.len() as f64)
    }

    /// Mean MSE of predictions against targets.
    pub fn mean_mse(&self, inputs: &[Tensor], targets: &[Tensor]) -> Result<f64> {
        let mut acc = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            acc += crate::losses::mse_eval(&self.predict(x)?, y)?;
        }
        Ok(acc / inputs.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Adam on MAE. Freezes the model afterwards and reports the final
/// epoch's mean loss (the initial dataset loss when `epochs == 0`).
pub fn train_model(
    model: &mut Model,
    inputs: &[Tensor],
    targets: &[Tensor],
    epochs: usize,
    lr: f64,
) -> Result<TrainStats> {
    if model.frozen {
        return Err(Error::FrozenModel);
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::EmptyDataset);
    }
    for x in inputs {
        model.check_input(x)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.spec.seed ^ 0x7472_6169_6e00_0001);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut v: Vec<Tensor> = m.clone();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let x = g.constant(inputs[i].clone());
            let y = g.constant(targets[i].clone());
            let pass = model.forward_nodes(&mut g, x, &[], true)?;
            let loss = mae_node(&mut g, pass.output, y)?;
            epoch_loss += g.value(loss).scalar_value();
            g.backward(loss)?;

            step += 1;
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            for (pi, &node) in pass.param_nodes.iter().enumerate() {
                let grad = g.grad(node).unwrap();
                let md = m[pi].data_mut();
                let vd = v[pi].data_mut();
                let pd = model.params[pi].data_mut();
                for ((p, (mm, vv)), &gv) in pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())).zip(grad.data()) {
                    *mm = beta1 * *mm + (1.0 - beta1) * gv;
                    *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    let mh = *mm / bc1;
                    let vh = *vv / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        epoch_losses.push(epoch_loss / inputs.len() as f64);
    }

    let final_loss = match epoch_losses.last() {
        Some(&l) => l,
        None => model.mean_mae(inputs, targets)?,
    };
    model.frozen = true;
    Ok(TrainStats { epoch_losses, final_loss })
}

/// Derive a dilated variant: every interior convolution (all convs but
/// the first and the last) switches to dilation 2 with padding adjusted
/// to preserve extents, then the variant is briefly fine-tuned on the
/// same data (a fifth of the original epochs).
pub fn augment_dilated(
    model: &Model,
    inputs: &[Tensor],
    targets: &[Tensor],
    original_epochs: usize,
    lr: f64,
) -> Result<Model> {
    if !model.frozen {
        return Err(Error::InvalidArgument("augment_dilated requires a trained model".into()));
    }
    let conv_indices: Vec<usize> = model
        .spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
        .map(|(i, _)| i)
        .collect();

    let mut spec = model.spec.clone();
    spec.id = format!("{}d", spec.id);
    for (pos, &li) in conv_indices.iter().enumerate() {
        if pos == 0 || pos == conv_indices.len() - 1 {
            continue;
        }
        if let LayerSpec::Conv { dilation, kernel, .. } = &mut spec.layers[li] {
            if *kernel > 1 {
                *dilation = 2;
            }
        }
    }

    let mut variant = Model {
        spec,
        params: model.params.clone(),
        frozen: false,
        backward_count: Arc::new(AtomicU64::new(0)),
    };
    let ft_epochs = (original_epochs / 5).max(1);
    train_model(&mut variant, inputs, targets, ft_epochs, lr)?;
    Ok(variant)
}

// ── Serialization ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    spec: ModelSpec,
    params: Vec<String>,
    frozen: bool,
}

/// Write manifest.json plus one TSR1 file per parameter tensor.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        let name = format!("p{i:03}.tsr");
        p.save_tsr(dir.join(&name))?;
        names.push(name);
    }
    let manifest = ModelManifest {
        spec: model.spec.clone(),
        params: names,
        frozen: model.frozen,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.spec.validate()?;
    let expected = manifest.spec.param_shapes();
    if expected.len() != manifest.params.len() {
        return Err(Error::bad_format(
            "model manifest",
            format!("{} parameter files for {} expected tensors", manifest.params.len(), expected.len()),
        ));
    }
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in manifest.params.iter().zip(&expected) {
        let t = Tensor::load_tsr(dir.join(name))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(
                format!("parameter {name}"),
                format!("{shape:?}"),
                format!("{:?}", t.shape()),
            ));
        }
        params.push(t);
    }
    Ok(Model {
        spec: manifest.spec,
        params,
        frozen: manifest.frozen,
        backward_count: Arc::new(AtomicU64::new(0)),
    })
}
