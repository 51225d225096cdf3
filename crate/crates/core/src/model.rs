//! A small configurable CNN whose convolutions are stored either spatially
//! (SP) or in interspace form over shared filter bases (IP), trained with
//! SGD + momentum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs;
use crate::error::{param_err, shape_err, Error, Result};
use crate::fbconv::{
    conv2d_backward, conv2d_masked, fb_backward, fb_forward_counted, ConvArgs, FbCoefficients,
    FilterBasis, FlopCounter, PruningMask,
};
use crate::init;
use crate::rng::Rng;
use crate::tensor::{normal_sample, Tensor};
use crate::data::Dataset;

/// Fixed substream ids so that every consumer of randomness is independent
/// of the others under a single experiment seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const SCORES: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const DATA_TRAIN: u64 = 10;
    pub const DATA_TEST: u64 = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sp,
    Ip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// One basis for every convolution with `K > 1`.
    Coarse,
    /// Bases shared by the `group` ids declared on each convolution.
    Medium,
    /// One basis per convolution.
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Standard,
    Onb,
    RandomFd,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        /// Basis group for medium sharing.
        #[serde(default)]
        group: Option<usize>,
        #[serde(default = "yes")]
        prunable: bool,
    },
    Relu,
    Maxpool {
        size: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
        #[serde(default = "yes")]
        prunable: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// conv(c->8, K3) - relu - pool - conv(8->16, K3) - relu - pool - flatten - linear(->classes)
    pub fn mini_vgg(channels: usize, size: usize, classes: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            group: Some(0),
            prunable: true,
        };
        ModelSpec {
            input: [channels, size, size],
            layers: vec![
                conv(8),
                LayerSpec::Relu,
                LayerSpec::Maxpool { size: 2 },
                conv(16),
                LayerSpec::Relu,
                LayerSpec::Maxpool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: classes, prunable: true },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildOptions {
    pub mode: Mode,
    pub sharing: Sharing,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    /// Elements per basis; defaults to `K^2`.
    #[serde(default)]
    pub basis_size: Option<usize>,
    #[serde(default = "yes")]
    pub train_basis: bool,
}

fn default_init() -> InitScheme {
    InitScheme::Standard
}

impl BuildOptions {
    pub fn new(mode: Mode, sharing: Sharing) -> Self {
        Self { mode, sharing, init: InitScheme::Standard, basis_size: None, train_basis: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor, args: ConvArgs, prunable: bool },
    FbConv { coeffs: FbCoefficients, bias: Tensor, basis: usize, args: ConvArgs, prunable: bool },
    Relu,
    MaxPool { size: usize },
    Flatten,
    Linear { weight: Tensor, bias: Tensor, prunable: bool },
}

impl Layer {
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            Layer::FbConv { coeffs, .. } => Some(&coeffs.values),
            _ => None,
        }
    }

    fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            Layer::FbConv { coeffs, .. } => Some(&mut coeffs.values),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv { bias, .. } | Layer::FbConv { bias, .. } | Layer::Linear { bias, .. } => Some(bias),
            _ => None,
        }
    }

    fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv { bias, .. } | Layer::FbConv { bias, .. } | Layer::Linear { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(
            self,
            Layer::Conv { prunable: true, .. }
                | Layer::FbConv { prunable: true, .. }
                | Layer::Linear { prunable: true, .. }
        )
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::FbConv { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight { layer: usize },
    Bias { layer: usize },
    Basis { index: usize },
}

/// One trainable tensor in the fixed parameter order: per layer weight then
/// bias, followed by the bases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
}

/// Gradients (or any per-parameter tensors) aligned with [`ModelState::slots`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

/// Geometry of one convolution for the cost models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub layer: usize,
    pub co: usize,
    pub ci: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub d1: usize,
    pub d2: usize,
    pub stride: usize,
    pub padding: usize,
    pub interspace: bool,
    /// Basis elements (`K^2` for SP layers).
    pub basis_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub options: BuildOptions,
    pub layers: Vec<Layer>,
    pub bases: Vec<FilterBasis>,
    /// Mask of each layer's weight tensor; `None` for layers without weights.
    pub masks: Vec<Option<PruningMask>>,
    /// Momentum buffers aligned with [`ModelState::slots`].
    pub velocity: Vec<Tensor>,
    /// Drives data order and randomized mask updates.
    pub rng: Rng,
    pub step: u64,
    /// Input shape of each layer, plus the output shape last.
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    Fb { x: Tensor, z: Tensor },
    Relu(Tensor),
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten(Vec<usize>),
}

/// Per-sample activations retained from [`ModelState::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    samples: Vec<Vec<Cache>>,
    pub logits: Vec<Tensor>,
}

impl ModelState {
    pub fn build(spec: &ModelSpec, options: &BuildOptions, seed: u64) -> Result<Self> {
        let mut init_rng = Rng::new(seed, streams::INIT);
        let shapes = propagate_shapes(spec)?;
        let ip = options.mode == Mode::Ip;

        // basis group of every convolution that gets an interspace form
        let mut group_of: Vec<Option<usize>> = vec![None; spec.layers.len()];
        let mut group_ids: Vec<usize> = Vec::new();
        let mut group_k: Vec<usize> = Vec::new();
        for (i, l) in spec.layers.iter().enumerate() {
            if let LayerSpec::Conv { kernel, group, .. } = l {
                if !ip || *kernel <= 1 {
                    continue;
                }
                let key = match options.sharing {
                    Sharing::Coarse => 0,
                    Sharing::Fine => i,
                    Sharing::Medium => group.ok_or_else(|| {
                        Error::Config(format!("layer {i}: medium sharing needs a `group` id"))
                    })?,
                };
                let g = match group_ids.iter().position(|&x| x == key) {
                    Some(g) => g,
                    None => {
                        group_ids.push(key);
                        group_k.push(*kernel);
                        group_ids.len() - 1
                    }
                };
                if group_k[g] != *kernel {
                    return Err(Error::Config(format!(
                        "layer {i}: kernel {kernel} cannot share a basis with kernel {}",
                        group_k[g]
                    )));
                }
                group_of[i] = Some(g);
            }
        }

        let mut bases: Vec<Option<FilterBasis>> = vec![None; group_ids.len()];
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut masks = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let layer = match l {
                LayerSpec::Conv { out_channels, kernel, stride, padding, prunable, .. } => {
                    let (co, ci, k) = (*out_channels, in_shape[0], *kernel);
                    let args = ConvArgs::new(*stride, *padding);
                    let bias = Tensor::zeros(&[co]);
                    match group_of[i] {
                        None => {
                            let weight = normal_sample(&mut init_rng, 0.0, init::kaiming_std(ci, k), &[co, ci, k, k])?;
                            Layer::Conv { weight, bias, args, prunable: *prunable }
                        }
                        Some(g) => {
                            let coeffs = match &bases[g] {
                                None => {
                                    let (mut basis, coeffs) = init_layer(options, &mut init_rng, k, co, ci)?;
                                    basis.id = g;
                                    basis.trainable = options.train_basis;
                                    bases[g] = Some(basis);
                                    coeffs
                                }
                                Some(basis) => init_coeffs_for(options, basis, &mut init_rng, co, ci)?,
                            };
                            Layer::FbConv { coeffs, bias, basis: g, args, prunable: *prunable }
                        }
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool { size } => Layer::MaxPool { size: *size },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear { out_features, prunable } => {
                    let fan_in = in_shape[0];
                    let weight = normal_sample(&mut init_rng, 0.0, (2.0 / fan_in as f64).sqrt(), &[*out_features, fan_in])?;
                    Layer::Linear { weight, bias: Tensor::zeros(&[*out_features]), prunable: *prunable }
                }
            };
            masks.push(layer.weight().map(|w| PruningMask::ones(w.shape())));
            layers.push(layer);
        }
        let bases: Vec<FilterBasis> = bases.into_iter().map(|b| b.expect("every group initialized")).collect();
        let mut model = ModelState {
            spec: spec.clone(),
            options: options.clone(),
            layers,
            bases,
            masks,
            velocity: Vec::new(),
            rng: Rng::new(seed, streams::TRAIN),
            step: 0,
            shapes,
        };
        model.velocity = model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight().is_some() {
                out.push(Slot { name: format!("layer{i}.weight"), kind: SlotKind::Weight { layer: i } });
                out.push(Slot { name: format!("layer{i}.bias"), kind: SlotKind::Bias { layer: i } });
            }
        }
        for j in 0..self.bases.len() {
            out.push(Slot { name: format!("basis{j}"), kind: SlotKind::Basis { index: j } });
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let (Some(w), Some(b)) = (l.weight(), l.bias()) {
                out.push(w);
                out.push(b);
            }
        }
        out.extend(self.bases.iter().map(|b| b.elements()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            if l.weight().is_none() {
                continue;
            }
            // split borrow of weight and bias
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::FbConv { coeffs, bias, .. } => {
                    out.push(&mut coeffs.values);
                    out.push(bias);
                }
                _ => unreachable!(),
            }
        }
        out.extend(self.bases.iter_mut().map(|b| b.elements_mut()));
        out
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer).and_then(|l| l.weight())
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.layers.get_mut(layer).and_then(|l| l.weight_mut())
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.layers.get_mut(layer).and_then(|l| l.bias_mut())
    }

    /// Layers whose weights take part in pruning, in ascending order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_prunable()).collect()
    }

    pub fn set_prunable(&mut self, layer: usize, value: bool) {
        match &mut self.layers[layer] {
            Layer::Conv { prunable, .. } | Layer::FbConv { prunable, .. } | Layer::Linear { prunable, .. } => {
                *prunable = value
            }
            _ => {}
        }
    }

    /// Slot index of a layer's weight tensor.
    pub fn weight_slot(&self, layer: usize) -> Option<usize> {
        self.slots().iter().position(|s| s.kind == SlotKind::Weight { layer })
    }

    pub fn mask(&self, layer: usize) -> Option<&PruningMask> {
        self.masks.get(layer).and_then(|m| m.as_ref())
    }

    /// Installs `mask` for `layer` and zeroes the masked weights and momentum.
    pub fn set_mask(&mut self, layer: usize, mask: PruningMask) -> Result<()> {
        let w = self.weight(layer).ok_or_else(|| Error::Param(format!("layer {layer} has no weights")))?;
        if w.shape() != mask.shape() {
            return shape_err(format!("mask {:?} vs weights {:?}", mask.shape(), w.shape()));
        }
        self.masks[layer] = Some(mask);
        self.apply_masks();
        Ok(())
    }

    /// Zeroes every masked weight and its momentum buffer.
    pub fn apply_masks(&mut self) {
        for i in 0..self.layers.len() {
            let Some(mask) = self.masks[i].clone() else { continue };
            if let Some(w) = self.layers[i].weight_mut() {
                mask.apply(w);
            }
            if let Some(s) = self.weight_slot(i) {
                mask.apply(&mut self.velocity[s]);
            }
        }
    }

    pub fn conv_geometry(&self) -> Vec<ConvGeometry> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (co, k, args, interspace, basis_len) = match l {
                Layer::Conv { weight, args, .. } => {
                    let k = weight.shape()[2];
                    (weight.shape()[0], k, *args, false, k * k)
                }
                Layer::FbConv { coeffs, basis, args, .. } => {
                    (coeffs.co(), self.bases[*basis].k(), *args, true, self.bases[*basis].len())
                }
                _ => continue,
            };
            let (ins, outs) = (&self.shapes[i], &self.shapes[i + 1]);
            out.push(ConvGeometry {
                layer: i,
                co,
                ci: ins[0],
                k,
                h: ins[1],
                w: ins[2],
                d1: outs[1],
                d2: outs[2],
                stride: args.stride,
                padding: args.padding,
                interspace,
                basis_len,
            });
        }
        out
    }

    // -----------------------------------------------------------------------
    // Forward / backward
    // -----------------------------------------------------------------------

    fn forward_sample(&self, x: &Tensor, counter: &mut FlopCounter) -> Result<(Tensor, Vec<Cache>)> {
        if x.shape() != self.input_shape() {
            return shape_err(format!("input {:?}, model expects {:?}", x.shape(), self.input_shape()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let next = match l {
                Layer::Conv { weight, bias, args, .. } => {
                    let mut y = conv2d_masked(weight, self.mask(i), &cur, *args, counter)?;
                    add_channel_bias(&mut y, bias);
                    caches.push(Cache::Input(cur));
                    y
                }
                Layer::FbConv { coeffs, bias, basis, args, .. } => {
                    let mask = self.mask(i).expect("fb layers carry masks");
                    let (mut y, z) = fb_forward_counted(&self.bases[*basis], coeffs, mask, &cur, *args, counter)?;
                    add_channel_bias(&mut y, bias);
                    caches.push(Cache::Fb { x: cur, z });
                    y
                }
                Layer::Relu => {
                    let mut y = cur;
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(Cache::Relu(y.clone()));
                    y
                }
                Layer::MaxPool { size } => {
                    let (y, argmax) = maxpool(&cur, *size);
                    caches.push(Cache::Pool { argmax, in_shape: cur.shape().to_vec() });
                    y
                }
                Layer::Flatten => {
                    let shape = cur.shape().to_vec();
                    let n = cur.len();
                    caches.push(Cache::Flatten(shape));
                    cur.reshape(&[n])?
                }
                Layer::Linear { weight, bias, .. } => {
                    let (o, n) = (weight.shape()[0], weight.shape()[1]);
                    let mut y = bias.clone();
                    counter.mac(self.mask(i).map_or(o * n, |m| m.popcount()));
                    for r in 0..o {
                        let row = &weight.data()[r * n..(r + 1) * n];
                        y.data_mut()[r] += match self.mask(i) {
                            Some(m) => {
                                let bits = &m.bits()[r * n..(r + 1) * n];
                                row.iter().zip(cur.data()).zip(bits).filter(|(_, k)| **k).map(|((a, b), _)| a * b).sum::<f64>()
                            }
                            None => row.iter().zip(cur.data()).map(|(a, b)| a * b).sum::<f64>(),
                        };
                    }
                    caches.push(Cache::Input(cur));
                    y
                }
            };
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Logits for every sample of `batch`, with activations kept for [`ModelState::backward`].
    pub fn forward(&self, batch: &[&Tensor]) -> Result<ForwardCache> {
        let mut samples = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        let mut counter = FlopCounter::default();
        for x in batch {
            let (y, c) = self.forward_sample(x, &mut counter)?;
            logits.push(y);
            samples.push(c);
        }
        Ok(ForwardCache { samples, logits })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_sample(x, &mut FlopCounter::default())?.0)
    }

    /// ReLU on/off states followed by max-pool winners for one sample. The
    /// network is smooth in its parameters wherever this pattern is constant.
    pub fn activation_pattern(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, caches) = self.forward_sample(x, &mut FlopCounter::default())?;
        let mut out = Vec::new();
        for c in caches {
            match c {
                Cache::Relu(y) => out.extend(y.data().iter().map(|v| (*v > 0.0) as usize)),
                Cache::Pool { argmax, .. } => out.extend(argmax),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Counted multiply-adds of one forward pass.
    pub fn forward_flops_measured(&self, x: &Tensor) -> Result<u64> {
        let mut c = FlopCounter::default();
        self.forward_sample(x, &mut c)?;
        Ok(c.flops)
    }

    /// Mean softmax cross-entropy over the cached batch and its gradients.
    /// With `dense`, weight gradients are also reported at masked positions
    /// (what the loss gradient would be if those weights were free).
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize], dense: bool) -> Result<(f64, Grads)> {
        if labels.len() != cache.logits.len() {
            return param_err("label count does not match batch");
        }
        let scale = 1.0 / labels.len().max(1) as f64;
        let mut loss = 0.0;
        let mut douts = Vec::with_capacity(labels.len());
        for (logits, &label) in cache.logits.iter().zip(labels) {
            if label >= logits.len() {
                return param_err(format!("label {label} out of range"));
            }
            let (l, mut dy) = softmax_xent(logits, label);
            loss += l;
            dy.scale(scale);
            douts.push(dy);
        }
        Ok((loss * scale, self.backward_from(cache, douts, dense)?))
    }

    /// Gradients of `sum_i <douts[i], output_i>` with respect to every parameter.
    pub fn backward_from(&self, cache: &ForwardCache, douts: Vec<Tensor>, dense: bool) -> Result<Grads> {
        if douts.len() != cache.logits.len() {
            return param_err("output gradient count does not match batch");
        }
        let slots = self.slots();
        let slot_of_weight: Vec<Option<usize>> =
            (0..self.layers.len()).map(|i| slots.iter().position(|s| s.kind == SlotKind::Weight { layer: i })).collect();
        let basis_slot0 = slots.len() - self.bases.len();
        let mut grads: Vec<Tensor> = self.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        // basis gradients per layer, reduced in ascending layer order at the end
        let mut basis_parts: Vec<Option<Tensor>> = vec![None; self.layers.len()];

        for (caches, mut dy) in cache.samples.iter().zip(douts) {
            for i in (0..self.layers.len()).rev() {
                dy = match (&self.layers[i], &caches[i]) {
                    (Layer::Conv { weight, .. }, Cache::Input(x)) => {
                        let args = match &self.layers[i] {
                            Layer::Conv { args, .. } => *args,
                            _ => unreachable!(),
                        };
                        // masked entries act as zeros even if a caller wrote into them
                        let masked;
                        let effective = match self.mask(i) {
                            Some(m) => {
                                let mut w = weight.clone();
                                m.apply(&mut w);
                                masked = w;
                                &masked
                            }
                            None => weight,
                        };
                        let (mut dh, dx) = conv2d_backward(effective, x, &dy, args)?;
                        if !dense {
                            if let Some(m) = self.mask(i) {
                                m.apply(&mut dh);
                            }
                        }
                        let s = slot_of_weight[i].unwrap();
                        grads[s].add_scaled(&dh, 1.0);
                        add_bias_grad(&mut grads[s + 1], &dy);
                        dx
                    }
                    (Layer::FbConv { coeffs, basis, args, .. }, Cache::Fb { x, z }) => {
                        let mask = self.mask(i).unwrap();
                        let g = fb_backward(&self.bases[*basis], coeffs, mask, x, z, &dy, *args)?;
                        let s = slot_of_weight[i].unwrap();
                        if dense {
                            grads[s].add_scaled(&dense_coeff_grad(z, &dy, coeffs.co()), 1.0);
                        } else {
                            grads[s].add_scaled(&g.d_lambda, 1.0);
                        }
                        add_bias_grad(&mut grads[s + 1], &dy);
                        match &mut basis_parts[i] {
                            Some(t) => t.add_scaled(&g.d_basis, 1.0),
                            slot @ None => *slot = Some(g.d_basis),
                        }
                        g.d_x
                    }
                    (Layer::Relu, Cache::Relu(y)) => {
                        let mut d = dy;
                        for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                            if *yv <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                        d
                    }
                    (Layer::MaxPool { .. }, Cache::Pool { argmax, in_shape }) => {
                        let mut dx = Tensor::zeros(in_shape);
                        for (o, &src) in argmax.iter().enumerate() {
                            dx.data_mut()[src] += dy.data()[o];
                        }
                        dx
                    }
                    (Layer::Flatten, Cache::Flatten(shape)) => dy.reshape(shape)?,
                    (Layer::Linear { weight, .. }, Cache::Input(x)) => {
                        let (o, n) = (weight.shape()[0], weight.shape()[1]);
                        let s = slot_of_weight[i].unwrap();
                        let mask = if dense { None } else { self.mask(i) };
                        let mut dx = Tensor::zeros(&[n]);
                        for r in 0..o {
                            let d = dy.data()[r];
                            let gw = &mut grads[s].data_mut()[r * n..(r + 1) * n];
                            for (c, (gv, xv)) in gw.iter_mut().zip(x.data()).enumerate() {
                                if mask.is_none_or(|m| m.bits()[r * n + c]) {
                                    *gv += d * xv;
                                }
                            }
                            let row = &weight.data()[r * n..(r + 1) * n];
                            let bits = self.mask(i).map(|m| &m.bits()[r * n..(r + 1) * n]);
                            for (c, (dxv, wv)) in dx.data_mut().iter_mut().zip(row).enumerate() {
                                if bits.is_none_or(|b| b[c]) {
                                    *dxv += d * wv;
                                }
                            }
                        }
                        grads[s + 1].add_scaled(&dy, 1.0);
                        dx
                    }
                    _ => return Err(Error::Numeric("forward cache does not match model".into())),
                };
            }
        }
        for (i, part) in basis_parts.into_iter().enumerate() {
            if let (Some(t), Layer::FbConv { basis, .. }) = (part, &self.layers[i]) {
                grads[basis_slot0 + basis].add_scaled(&t, 1.0);
            }
        }
        Ok(Grads { tensors: grads })
    }

    /// Mean loss, correct count and gradients over one batch.
    pub fn loss_and_grads(&self, batch: &[&Tensor], labels: &[usize], dense: bool) -> Result<(f64, usize, Grads)> {
        let cache = self.forward(batch)?;
        let correct = cache.logits.iter().zip(labels).filter(|(l, &y)| argmax(l.data()) == y).count();
        let (loss, g) = self.backward(&cache, labels, dense)?;
        Ok((loss, correct, g))
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut loss = 0.0;
        let mut correct = 0;
        for (x, &y) in data.images.iter().zip(&data.labels) {
            let logits = self.predict(x)?;
            loss += softmax_xent(&logits, y).0;
            if argmax(logits.data()) == y {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    // -----------------------------------------------------------------------
    // Optimizer
    // -----------------------------------------------------------------------

    /// `v <- m v + g + wd theta; theta <- theta - lr v`, then re-masks.
    pub fn sgd_step(&mut self, grads: &Grads, cfg: &SgdConfig) -> Result<()> {
        let slots = self.slots();
        if grads.tensors.len() != slots.len() {
            return shape_err("gradient registry does not match parameters");
        }
        let frozen: Vec<bool> = slots
            .iter()
            .map(|s| matches!(s.kind, SlotKind::Basis { index } if !self.bases[index].trainable))
            .collect();
        let masks: Vec<Option<PruningMask>> = slots
            .iter()
            .map(|s| match s.kind {
                SlotKind::Weight { layer } => self.masks[layer].clone(),
                _ => None,
            })
            .collect();
        let mut velocity = std::mem::take(&mut self.velocity);
        for (((theta, v), g), (slot, mask)) in self
            .params_mut()
            .into_iter()
            .zip(velocity.iter_mut())
            .zip(&grads.tensors)
            .zip(slots.iter().zip(&masks))
        {
            if frozen[slot_index(&slots, slot)] {
                continue;
            }
            let wd = match slot.kind {
                SlotKind::Basis { .. } if cfg.wd_on_fb => cfg.weight_decay,
                SlotKind::Basis { .. } => 0.0,
                _ if cfg.wd_on_coeffs => cfg.weight_decay,
                _ => 0.0,
            };
            for ((t, vv), gv) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + gv + wd * *t;
                *t -= cfg.lr * *vv;
            }
            if let Some(m) = mask {
                m.apply(theta);
                m.apply(v);
            }
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { step: self.step, state: Box::new(self.clone()) }
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        *self = (*snap.state).clone();
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(self, dir)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        checkpoint::load(dir)
    }
}

fn slot_index(slots: &[Slot], slot: &Slot) -> usize {
    slots.iter().position(|s| s == slot).expect("slot")
}

fn init_layer(opts: &BuildOptions, rng: &mut Rng, k: usize, co: usize, ci: usize) -> Result<(FilterBasis, FbCoefficients)> {
    let n = opts.basis_size.unwrap_or(k * k);
    match opts.init {
        InitScheme::Standard | InitScheme::Onb if n != k * k => Err(Error::Config(format!(
            "{:?} initialization needs N = K^2 = {}, got {n}",
            opts.init,
            k * k
        ))),
        InitScheme::Standard => init::init_standard(rng, k, co, ci),
        InitScheme::Onb => init::init_onb(rng, k, co, ci),
        InitScheme::RandomFd => init::init_random_fd(rng, n, k, co, ci),
    }
}

/// Coefficients for a further layer joining an already initialized basis.
fn init_coeffs_for(opts: &BuildOptions, basis: &FilterBasis, rng: &mut Rng, co: usize, ci: usize) -> Result<FbCoefficients> {
    let k = basis.k();
    let sigma = init::kaiming_std(ci, k);
    match opts.init {
        InitScheme::Onb => {
            let phi = normal_sample(rng, 0.0, sigma, &[co, ci, k * k])?;
            let lam = crate::fbconv::transform_gradient(&basis.psi(), phi.data())?;
            FbCoefficients::new(Tensor::from_vec(&[co, ci, basis.len()], lam)?)
        }
        _ => FbCoefficients::new(normal_sample(rng, 0.0, sigma, &[co, ci, basis.len()])?),
    }
}

fn propagate_shapes(spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![spec.input.to_vec()];
    if spec.input.contains(&0) {
        return Err(Error::Config(format!("input extents must be positive, got {:?}", spec.input)));
    }
    for (i, l) in spec.layers.iter().enumerate() {
        let cur = shapes.last().unwrap().clone();
        let next = match l {
            LayerSpec::Conv { out_channels, kernel, stride, padding, .. } => {
                if cur.len() != 3 {
                    return Err(Error::Config(format!("layer {i}: convolution needs a c x h x w input")));
                }
                let (d1, d2) = ConvArgs::new(*stride, *padding)
                    .output_dims(cur[1], cur[2], *kernel)
                    .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                vec![*out_channels, d1, d2]
            }
            LayerSpec::Relu => cur,
            LayerSpec::Maxpool { size } => {
                if cur.len() != 3 || *size == 0 || cur[1] < *size || cur[2] < *size {
                    return Err(Error::Config(format!("layer {i}: cannot pool {cur:?} by {size}")));
                }
                vec![cur[0], cur[1] / size, cur[2] / size]
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Linear { out_features, .. } => {
                if cur.len() != 1 {
                    return Err(Error::Config(format!("layer {i}: linear layer needs a flattened input")));
                }
                vec![*out_features]
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    let plane = y.len() / c.max(1);
    for (ch, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[ch];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn add_bias_grad(gb: &mut Tensor, dy: &Tensor) {
    let c = gb.len();
    let plane = dy.len() / c.max(1);
    for (ch, chunk) in dy.data().chunks(plane).enumerate() {
        gb.data_mut()[ch] += chunk.iter().sum::<f64>();
    }
}

fn dense_coeff_grad(z: &Tensor, dy: &Tensor, co: usize) -> Tensor {
    let (ci, nb) = (z.shape()[0], z.shape()[1]);
    let od = z.shape()[2] * z.shape()[3];
    let mut out = Tensor::zeros(&[co, ci, nb]);
    for a in 0..co {
        let dya = &dy.data()[a * od..(a + 1) * od];
        for bn in 0..ci * nb {
            let zb = &z.data()[bn * od..(bn + 1) * od];
            out.data_mut()[a * ci * nb + bn] = dya.iter().zip(zb).map(|(p, q)| p * q).sum();
        }
    }
    out
}

fn maxpool(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / size, w / size);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = (ch * h + i * size + di) * w + j * size + dj;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            at = idx;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                y.data_mut()[o] = best;
                argmax[o] = at;
            }
        }
    }
    (y, argmax)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of softmax(logits) against `label`, and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, label: usize) -> (f64, Tensor) {
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    let mut g = Tensor::zeros(logits.shape());
    for (i, gv) in g.data_mut().iter_mut().enumerate() {
        *gv = (z[i] - lse).exp() - if i == label { 1.0 } else { 0.0 };
    }
    (lse - z[label], g)
}

/// Mean absolute pairwise cosine similarity of the basis elements.
pub fn fb_cosine_similarity(basis: &FilterBasis) -> f64 {
    let n = basis.len();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..n).map(|i| crate::tensor::norm2(basis.element(i))).collect();
    let mut acc = 0.0;
    for j in 0..n {
        for k in j + 1..n {
            let d: f64 = basis.element(j).iter().zip(basis.element(k)).map(|(a, b)| a * b).sum();
            let denom = norms[j] * norms[k];
            if denom > 0.0 {
                acc += d.abs() / denom;
            }
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub wd_on_fb: bool,
    #[serde(default = "yes")]
    pub wd_on_coeffs: bool,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        Self { lr, momentum: 0.0, weight_decay: 0.0, wd_on_fb: false, wd_on_coeffs: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f64,
}

fn default_gamma() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.sgd.lr * self.lr_gamma.powi(drops as i32)
    }
}

/// Callbacks into the training loop; used by the pruning schedules.
pub trait TrainHook {
    /// Whether the step about to run needs gradients at masked positions.
    fn wants_dense_grads(&self, _model: &ModelState) -> bool {
        false
    }

    /// Called after every optimizer step (`model.step` already advanced).
    fn on_step(&mut self, _model: &mut ModelState, _grads: &Grads) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl TrainHook for NoHook {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub pruning_rate: f64,
    pub forward_flops: u64,
    pub fb_cosine_similarity: f64,
}

pub const METRICS_COLUMNS: [&str; 7] =
    ["epoch", "split", "loss", "accuracy", "pruning_rate", "forward_flops", "fb_cosine_similarity"];

/// Trains for `cfg.epochs` epochs and reports train (and test) metrics after each.
pub fn train(
    model: &mut ModelState,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<Vec<MetricsRow>> {
    if cfg.batch_size == 0 {
        return param_err("batch size must be positive");
    }
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let sgd = SgdConfig { lr: cfg.lr_at_epoch(epoch), ..cfg.sgd };
        let mut order: Vec<usize> = (0..data.len()).collect();
        model.rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let dense = hook.wants_dense_grads(model);
            let (loss, _, grads) = model.loss_and_grads(&batch, &labels, dense)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", model.step)));
            }
            model.sgd_step(&grads, &sgd)?;
            model.step += 1;
            hook.on_step(model, &grads)?;
        }
        let rate = costs::model_pruning_rate(model);
        let flops = costs::model_forward_flops(model);
        let cos = mean_cosine(model);
        let mut push = |split, (loss, accuracy): (f64, f64)| {
            history.push(MetricsRow {
                epoch: epoch + 1,
                split,
                loss,
                accuracy,
                pruning_rate: rate,
                forward_flops: flops,
                fb_cosine_similarity: cos,
            })
        };
        push(Split::Train, model.evaluate(data)?);
        if let Some(t) = test {
            push(Split::Test, model.evaluate(t)?);
        }
    }
    Ok(history)
}

fn mean_cosine(model: &ModelState) -> f64 {
    if model.bases.is_empty() {
        return 0.0;
    }
    model.bases.iter().map(fb_cosine_similarity).sum::<f64>() / model.bases.len() as f64
}

/// Deep copy of a model, optimizer buffers and generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    state: Box<ModelState>,
}

impl Snapshot {
    pub fn state(&self) -> &ModelState {
        &self.state
    }
}

pub mod checkpoint {
    //! Checkpoint directory: `manifest.json` plus `tensors.bin`, the
    //! concatenation of every tensor as little-endian `f64`, row-major.

    use std::fs;
    use std::io::Write;
    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::{BuildOptions, ModelSpec, ModelState};
    use crate::error::{Error, Result};
    use crate::fbconv::PruningMask;
    use crate::rng::Rng;

    pub const SCHEMA_VERSION: u32 = 1;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TensorEntry {
        pub name: String,
        pub shape: Vec<usize>,
        /// Byte offset into `tensors.bin`.
        pub offset: u64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Manifest {
        pub schema_version: u32,
        pub spec: ModelSpec,
        pub options: BuildOptions,
        pub step: u64,
        pub rng: Rng,
        pub prunable: Vec<bool>,
        pub tensors: Vec<TensorEntry>,
    }

    fn entries(model: &ModelState) -> Vec<(String, crate::tensor::Tensor)> {
        let mut out = Vec::new();
        for (slot, t) in model.slots().iter().zip(model.params()) {
            out.push((slot.name.clone(), t.clone()));
        }
        for (i, m) in model.masks.iter().enumerate() {
            if let Some(m) = m {
                out.push((format!("layer{i}.mask"), m.to_tensor()));
            }
        }
        for (slot, v) in model.slots().iter().zip(&model.velocity) {
            out.push((format!("{}.velocity", slot.name), v.clone()));
        }
        out
    }

    pub fn save(model: &ModelState, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in entries(model) {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: bin.len() as u64 });
            for v in t.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            spec: model.spec.clone(),
            options: model.options.clone(),
            step: model.step,
            rng: model.rng.clone(),
            prunable: model.layers.iter().map(|l| l.is_prunable()).collect(),
            tensors,
        };
        fs::File::create(dir.join("tensors.bin"))?.write_all(&bin)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelState> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint schema {}", manifest.schema_version)));
        }
        let bin = fs::read(dir.join("tensors.bin"))?;
        let mut model = ModelState::build(&manifest.spec, &manifest.options, 0)?;
        let read = |e: &TensorEntry| -> Result<Vec<f64>> {
            let len: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * len;
            if end > bin.len() {
                return Err(Error::Format { offset: bin.len() as u64, msg: format!("tensor {} truncated", e.name) });
            }
            Ok(bin[start..end].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let find = |name: &str| {
            manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))
        };
        let slots = model.slots();
        for (slot, t) in slots.iter().zip(model.params_mut()) {
            let e = find(&slot.name)?;
            if e.shape != t.shape() {
                return Err(Error::Shape(format!("tensor {} has shape {:?}", e.name, e.shape)));
            }
            t.data_mut().copy_from_slice(&read(e)?);
        }
        for (slot, v) in slots.iter().zip(model.velocity.iter_mut()) {
            let e = find(&format!("{}.velocity", slot.name))?;
            v.data_mut().copy_from_slice(&read(e)?);
        }
        for i in 0..model.masks.len() {
            if let Some(m) = &model.masks[i] {
                let e = find(&format!("layer{i}.mask"))?;
                let bits = read(e)?.iter().map(|v| *v != 0.0).collect();
                model.masks[i] = Some(PruningMask::from_bits(m.shape(), bits)?);
            }
        }
        for (i, p) in manifest.prunable.iter().enumerate() {
            model.set_prunable(i, *p);
        }
        model.step = manifest.step;
        model.rng = manifest.rng;
        Ok(model)
    }
}
