//! Layer sequences, parameter storage and the model forward pass.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, BnRunningStats, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, Purpose};
use crate::tensor::Tensor;
use crate::tsb::{self, InsertionPlan, TsbBlock};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::config(format!("layer {self:?} cannot take input shape {input:?}"));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::config(format!("degenerate conv layer {self:?}")));
                }
                let [c, h, w] = input else { return Err(bad()) };
                if *c != in_channels || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad());
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features && out_features > 0 => Ok(vec![out_features]),
                _ => Err(bad()),
            },
            LayerSpec::BatchNorm2d { channels } => match input {
                [c, _, _] if *c == channels => Ok(input.to_vec()),
                _ => Err(bad()),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                let [c, h, w] = input else { return Err(bad()) };
                if kernel == 0 || stride == 0 || *h < kernel || *w < kernel {
                    return Err(bad());
                }
                Ok(vec![*c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Which parameters a retraining baseline may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainScope {
    LastLayer,
    LastLayers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VggProfile {
    /// 128/256/512 channels, 1024 hidden units.
    Full,
    /// Half the channels and hidden units.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Layers retrained by the "last layers" baseline.
    pub last_layers: Vec<usize>,
}

impl Architecture {
    /// Two 5×5 convolutions with 5 and 10 output channels (padding 2), each
    /// followed by batch norm, ReLU and 2×2 max-pooling, then one
    /// fully-connected layer to 10 classes.
    pub fn lenet3() -> Self {
        let layers = vec![
            LayerSpec::conv(1, 5, 5, 2),
            LayerSpec::BatchNorm2d { channels: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            LayerSpec::conv(5, 10, 5, 2),
            LayerSpec::BatchNorm2d { channels: 10 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 490,
                out_features: 10,
            },
        ];
        Architecture {
            name: "lenet3".into(),
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            layers,
            last_layers: vec![4, 9],
        }
    }

    /// Six 3×3 convolutions in pairs, max-pooling after each pair, then two
    /// fully-connected layers.
    pub fn vgg8(profile: VggProfile) -> Self {
        let (c, hidden) = match profile {
            VggProfile::Full => ([128, 256, 512], 1024),
            VggProfile::Small => ([64, 128, 256], 512),
        };
        let mut layers = Vec::new();
        let mut prev = 3;
        for &ch in &c {
            for _ in 0..2 {
                layers.push(LayerSpec::conv(prev, ch, 3, 1));
                layers.push(LayerSpec::BatchNorm2d { channels: ch });
                layers.push(LayerSpec::Relu);
                prev = ch;
            }
            layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
        }
        layers.push(LayerSpec::Flatten);
        let fc1 = layers.len();
        layers.push(LayerSpec::Linear {
            in_features: c[2] * 16,
            out_features: hidden,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Linear {
            in_features: hidden,
            out_features: 10,
        });
        let name = match profile {
            VggProfile::Full => "vgg8",
            VggProfile::Small => "vgg8_small",
        };
        Architecture {
            name: name.into(),
            input_shape: vec![3, 32, 32],
            num_classes: 10,
            last_layers: vec![fc1, fc1 + 2],
            layers,
        }
    }

    /// Per-sample shapes after every layer; fails if the sequence does not type-check.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::config(format!(
                "network ends in shape {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(out)
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_conv())
            .collect()
    }

    /// The block after every convolution layer.
    pub fn default_insertion_plan(&self) -> InsertionPlan {
        InsertionPlan::new(self.conv_layers())
    }

    pub fn validate_plan(&self, plan: &InsertionPlan) -> Result<()> {
        for &p in &plan.positions {
            match self.layers.get(p) {
                Some(l) if l.is_conv() => {}
                Some(l) => {
                    return Err(Error::config(format!(
                        "TSB position {p} follows a non-convolution layer ({l:?})"
                    )))
                }
                None => return Err(Error::config(format!("TSB position {p} out of range"))),
            }
        }
        Ok(())
    }

    pub fn retrain_layers(&self, scope: RetrainScope) -> Result<Vec<usize>> {
        let last_linear = (0..self.layers.len())
            .rev()
            .find(|&i| matches!(self.layers[i], LayerSpec::Linear { .. }));
        match scope {
            RetrainScope::LastLayer => last_linear
                .map(|i| vec![i])
                .ok_or_else(|| Error::config(format!("{} has no classifier layer", self.name))),
            RetrainScope::LastLayers if !self.last_layers.is_empty() => Ok(self.last_layers.clone()),
            RetrainScope::LastLayers => Err(Error::config(format!(
                "last-layers scope undefined for {}",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    TsbWeight,
}

impl ParamKind {
    /// Stored as device conductances on a crossbar.
    pub fn on_devices(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::TsbWeight)
    }

    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    /// Backbone layer the entry belongs to; `None` for the shared block.
    pub layer: Option<usize>,
    pub tensor: Tensor,
}

/// Flat, ordered parameter list. Ids are indices and stay stable for the
/// life of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn set(&mut self, id: usize, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.entries[id].tensor.shape() {
            return Err(Error::config(format!(
                "replacing {} {:?} with {:?}",
                self.entries[id].name,
                self.entries[id].tensor.shape(),
                tensor.shape()
            )));
        }
        self.entries[id].tensor = tensor;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn ids_where(&self, mut pred: impl FnMut(&ParamEntry) -> bool) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| pred(&self.entries[i]))
            .collect()
    }

    fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    fn push(&mut self, name: String, kind: ParamKind, layer: Option<usize>, tensor: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name,
            kind,
            layer,
            tensor,
        });
        self.entries.len() - 1
    }

    /// Combined fingerprint of the given entries.
    pub fn hash_of(&self, ids: &[usize]) -> u64 {
        ids.iter().fold(0u64, |h, &i| {
            h.rotate_left(7) ^ self.entries[i].tensor.bits_hash()
        })
    }

    pub fn num_values(&self, ids: &[usize]) -> usize {
        ids.iter().map(|&i| self.entries[i].tensor.numel()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LayerParams {
    weight: Option<usize>,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    mean: Option<usize>,
    var: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsbAttachment {
    pub channels: usize,
    pub plan: InsertionPlan,
    /// One parameter id per stacked 1×1 layer.
    pub weight_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    params: ParamStore,
    layer_params: Vec<LayerParams>,
    tsb: Option<TsbAttachment>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    /// Parameter ids recorded as differentiable leaves.
    pub trainable: Vec<usize>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions {
            bn_mode: BnMode::Eval,
            trainable: Vec::new(),
        }
    }
}

pub struct Forward {
    pub output: Var,
    /// Graph variable of every parameter the pass touched, by id.
    pub param_vars: Vec<Option<Var>>,
    /// Updated running statistics `(mean id, var id, stats)` in train mode.
    pub bn_updates: Vec<(usize, usize, BnRunningStats)>,
}

impl Model {
    /// Randomly initialized model: Kaiming-normal conv/linear weights, zero
    /// biases, unit BN scale and identity running statistics.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shapes()?;
        let mut params = ParamStore::default();
        let mut layer_params = Vec::with_capacity(arch.layers.len());
        for (i, layer) in arch.layers.iter().enumerate() {
            let mut lp = LayerParams::default();
            let mut rng = stream(seed, Purpose::Init, i as u64, 0);
            let mut kaiming = |shape: &[usize], fan_in: usize| {
                let std = (2.0 / fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| std * standard_normal(&mut rng))
            };
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let w = kaiming(
                        &[out_channels, in_channels, kernel, kernel],
                        in_channels * kernel * kernel,
                    );
                    lp.weight =
                        Some(params.push(format!("layer{i}.conv.weight"), ParamKind::Weight, Some(i), w));
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let w = kaiming(&[out_features, in_features], in_features);
                    lp.weight =
                        Some(params.push(format!("layer{i}.linear.weight"), ParamKind::Weight, Some(i), w));
                    lp.bias = Some(params.push(
                        format!("layer{i}.linear.bias"),
                        ParamKind::Bias,
                        Some(i),
                        Tensor::zeros(&[out_features]),
                    ));
                }
                LayerSpec::BatchNorm2d { channels } => {
                    let c = [channels];
                    lp.gamma = Some(params.push(
                        format!("layer{i}.bn.gamma"),
                        ParamKind::BnGamma,
                        Some(i),
                        Tensor::full(&c, 1.0),
                    ));
                    lp.beta = Some(params.push(
                        format!("layer{i}.bn.beta"),
                        ParamKind::BnBeta,
                        Some(i),
                        Tensor::zeros(&c),
                    ));
                    lp.mean = Some(params.push(
                        format!("layer{i}.bn.running_mean"),
                        ParamKind::BnMean,
                        Some(i),
                        Tensor::zeros(&c),
                    ));
                    lp.var = Some(params.push(
                        format!("layer{i}.bn.running_var"),
                        ParamKind::BnVar,
                        Some(i),
                        Tensor::full(&c, 1.0),
                    ));
                }
                _ => {}
            }
            layer_params.push(lp);
        }
        Ok(Model {
            arch,
            params,
            layer_params,
            tsb: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tsb(&self) -> Option<&TsbAttachment> {
        self.tsb.as_ref()
    }

    /// Rewrites the model so the block follows every planned convolution.
    /// All positions share the block's single set of weights.
    pub fn insert_tsb(&mut self, plan: InsertionPlan, block: TsbBlock) -> Result<()> {
        if self.tsb.is_some() {
            return Err(Error::config("model already carries a TSB"));
        }
        self.arch.validate_plan(&plan)?;
        let channels = block.channels();
        let weight_ids = block
            .into_layers()
            .into_iter()
            .enumerate()
            .map(|(d, w)| {
                self.params
                    .push(format!("tsb.{d}.weight"), ParamKind::TsbWeight, None, w)
            })
            .collect();
        self.tsb = Some(TsbAttachment {
            channels,
            plan,
            weight_ids,
        });
        Ok(())
    }

    /// Drops the block and its parameters; the backbone is untouched.
    pub fn remove_tsb(&mut self) {
        if let Some(t) = self.tsb.take() {
            // the block's entries are always the last ones in the store
            if let Some(&first) = t.weight_ids.iter().min() {
                self.params.truncate(first);
            }
        }
    }

    pub fn tsb_block(&self) -> Option<TsbBlock> {
        let att = self.tsb.as_ref()?;
        let layers = att
            .weight_ids
            .iter()
            .map(|&id| self.params.get(id).clone())
            .collect();
        TsbBlock::from_layers(layers).ok()
    }

    pub fn tsb_ids(&self) -> Vec<usize> {
        self.tsb
            .as_ref()
            .map(|t| t.weight_ids.clone())
            .unwrap_or_default()
    }

    /// Ids of backbone conv/linear weights (everything on devices except the block).
    pub fn backbone_device_ids(&self) -> Vec<usize> {
        self.params.ids_where(|e| e.kind == ParamKind::Weight)
    }

    pub fn device_ids(&self) -> Vec<usize> {
        self.params.ids_where(|e| e.kind.on_devices())
    }

    /// Every non-buffer parameter of the backbone.
    pub fn backbone_trainable_ids(&self) -> Vec<usize> {
        self.params
            .ids_where(|e| e.layer.is_some() && !e.kind.is_buffer())
    }

    /// Weight and bias ids of the given layers.
    pub fn layer_param_ids(&self, layers: &[usize]) -> Vec<usize> {
        let mut ids: Vec<usize> = layers
            .iter()
            .flat_map(|&l| {
                let lp = &self.layer_params[l];
                [lp.weight, lp.bias, lp.gamma, lp.beta].into_iter().flatten()
            })
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn num_backbone_weights(&self) -> usize {
        self.params.num_values(&self.backbone_device_ids())
    }

    pub fn num_tsb_weights(&self) -> usize {
        self.params.num_values(&self.tsb_ids())
    }

    pub fn num_steps(&self) -> usize {
        self.arch.layers.len()
    }

    /// First forward step that reads any of `ids`; `num_steps()` if none.
    pub fn first_step_using(&self, ids: &[usize]) -> usize {
        let tsb_hit = self
            .tsb
            .as_ref()
            .filter(|t| t.weight_ids.iter().any(|w| ids.contains(w)))
            .and_then(|t| t.plan.positions.first().copied());
        let layer_hit = self
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(i, _)| ids.contains(i))
            .filter_map(|(_, e)| e.layer)
            .min();
        [tsb_hit, layer_hit]
            .into_iter()
            .flatten()
            .min()
            .unwrap_or(self.num_steps())
    }

    /// Per-sample shape entering step `step`.
    pub fn step_input_shape(&self, step: usize) -> Result<Vec<usize>> {
        if step == 0 {
            return Ok(self.arch.input_shape.clone());
        }
        Ok(self.arch.shapes()?[step - 1].clone())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: Var,
        weights: &ParamStore,
        opts: &ForwardOptions,
    ) -> Result<Forward> {
        self.forward_steps(g, input, weights, opts, 0..self.num_steps())
    }

    /// Runs steps `range` of the forward pass. Step `i` applies layer `i`
    /// and, if planned, the shared block right after it. `weights` must have
    /// the same layout as the model's own parameter store.
    pub fn forward_steps(
        &self,
        g: &mut Graph,
        input: Var,
        weights: &ParamStore,
        opts: &ForwardOptions,
        range: Range<usize>,
    ) -> Result<Forward> {
        if weights.len() != self.params.len() {
            return Err(Error::config(format!(
                "weight store has {} entries, model has {}",
                weights.len(),
                self.params.len()
            )));
        }
        let mut vars: Vec<Option<Var>> = vec![None; weights.len()];
        let mut var_for = |g: &mut Graph, id: usize| -> Var {
            *vars[id].get_or_insert_with(|| {
                let t = weights.get(id).clone();
                if opts.trainable.contains(&id) {
                    g.param(t)
                } else {
                    g.input(t)
                }
            })
        };
        let mut bn_updates = Vec::new();
        let mut x = input;
        for step in range {
            let lp = &self.layer_params[step];
            x = match self.arch.layers[step] {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let k = var_for(g, lp.weight.expect("conv weight"));
                    g.conv2d(x, k, stride, padding)?
                }
                LayerSpec::Linear { .. } => {
                    let w = var_for(g, lp.weight.expect("linear weight"));
                    let b = var_for(g, lp.bias.expect("linear bias"));
                    g.linear(x, w, Some(b))?
                }
                LayerSpec::BatchNorm2d { .. } => {
                    let (mean_id, var_id) = (lp.mean.expect("bn mean"), lp.var.expect("bn var"));
                    let gamma = var_for(g, lp.gamma.expect("bn gamma"));
                    let beta = var_for(g, lp.beta.expect("bn beta"));
                    let mut stats = BnRunningStats {
                        mean: weights.get(mean_id).data().to_vec(),
                        var: weights.get(var_id).data().to_vec(),
                    };
                    let y = g.batchnorm2d(x, gamma, beta, &mut stats, opts.bn_mode)?;
                    if opts.bn_mode == BnMode::Train {
                        bn_updates.push((mean_id, var_id, stats));
                    }
                    y
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::MaxPool2d { kernel, stride } => g.maxpool2d(x, kernel, stride)?,
                LayerSpec::AvgPool2d { kernel, stride } => g.avgpool2d(x, kernel, stride)?,
                LayerSpec::Flatten => g.flatten(x)?,
            };
            if let Some(att) = self.tsb.as_ref().filter(|t| t.plan.contains(step)) {
                let ws: Vec<Var> = att.weight_ids.iter().map(|&id| var_for(g, id)).collect();
                x = tsb::apply_in_graph(g, x, &ws)?;
            }
        }
        Ok(Forward {
            output: x,
            param_vars: vars,
            bn_updates,
        })
    }

    /// Noise-free eval-mode logits for a batch of inputs.
    pub fn logits(&self, weights: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x, weights, &ForwardOptions::inference())?;
        Ok(g.take_value(out.output))
    }
}

/// Index of the largest logit in every row; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}
