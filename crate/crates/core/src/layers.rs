//! Differentiable layers: convolution, batch normalization, ReLU, global
//! average pooling, fully connected and softmax.
//!
//! Feature maps use the `[batch, channel, height, width]` layout throughout.
//! Parameters live in a [`LayerParams`] store keyed by dotted names
//! (`stage1.block0.conv1.weight`) and are bound onto a tape as leaves for
//! each forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each training-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize and running statistics are updated.
    Train,
    /// Running statistics normalize; nothing is mutated.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, named parameter store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a named tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push(ParamEntry {
                    name,
                    value,
                    trainable,
                });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::contract("set_param", format!("no parameter named {name}")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{name}: {:?} vs {:?}",
                    self.entries[i].value.shape(),
                    value.shape()
                ),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    /// Mutable access to trainable tensors in store order.
    pub(crate) fn trainable_values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.value)
    }

    /// Total element count of the trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|e| e.value.len()).sum()
    }

    /// Records every trainable tensor on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        self.bind_with(tape, true)
    }

    /// Records every trainable tensor on `tape` as a constant, for passes
    /// that need no gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bindings> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bindings> {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for entry in self.trainable() {
            let var = tape.leaf(entry.value.clone().with_requires_grad(requires_grad))?;
            vars.insert(entry.name.clone(), var);
            order.push(var);
        }
        Ok(Bindings { vars, order })
    }
}

/// Tape handles for the trainable tensors of a [`LayerParams`] store.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("bind", format!("parameter {name} is not bound")))
    }

    /// Binds the trainable tensors of `params`, in store order, to handles
    /// already recorded on a tape.
    pub fn from_vars(params: &LayerParams, vars: &[Var]) -> Result<Self> {
        let names: Vec<&str> = params.trainable().map(|e| e.name.as_str()).collect();
        if names.len() != vars.len() {
            return Err(Error::contract(
                "bind",
                format!("{} trainable tensors, {} handles", names.len(), vars.len()),
            ));
        }
        Ok(Self {
            vars: names.iter().map(|n| n.to_string()).zip(vars.iter().copied()).collect(),
            order: vars.to_vec(),
        })
    }

    /// Handles in the store's trainable order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// 2-D convolution with square kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias { self.out_channels } else { 0 }
    }

    /// `floor((extent + 2·padding − kernel) / stride) + 1`, or `None` when
    /// the kernel does not fit.
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut LayerParams, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        params.insert(
            self.weight_name(),
            Tensor::randn(&self.weight_shape(), (2.0 / fan_in).sqrt(), rng),
            true,
        );
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]), true);
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let channels = tape.value(x).shape().get(1).copied();
        if channels != Some(self.in_channels) {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "{} expects {} input channels, got shape {:?}",
                    self.name,
                    self.in_channels,
                    tape.value(x).shape()
                ),
            ));
        }
        let y = tape.conv2d(x, bound.get(&self.weight_name())?, self.stride, self.padding)?;
        if self.bias {
            tape.add_channel(y, bound.get(&self.bias_name())?)
        } else {
            Ok(y)
        }
    }
}

/// Per-channel batch normalization followed by a learned affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init(&self, params: &mut LayerParams) {
        let c = [self.channels];
        params.insert(self.gamma_name(), Tensor::full(&c, 1.0), true);
        params.insert(self.beta_name(), Tensor::zeros(&c), true);
        params.insert(self.running_mean_name(), Tensor::zeros(&c), false);
        params.insert(self.running_var_name(), Tensor::full(&c, 1.0), false);
    }

    /// In [`Mode::Train`] normalizes with batch statistics and returns the
    /// running-statistics update they imply; in [`Mode::Eval`] normalizes
    /// with the stored running statistics and returns no update.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        params: &LayerParams,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStatsUpdate>)> {
        let (normalized, update) = match mode {
            Mode::Train => {
                if tape.value(x).shape().first().copied().unwrap_or(0) < 2 {
                    return Err(Error::contract(
                        "batch_norm",
                        format!(
                            "{}: training mode needs a batch of at least 2, got shape {:?}",
                            self.name,
                            tape.value(x).shape()
                        ),
                    ));
                }
                let (y, stats) = tape.batch_normalize(x, BN_EPSILON)?;
                let correction = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
                let update = RunningStatsUpdate {
                    mean_name: self.running_mean_name(),
                    var_name: self.running_var_name(),
                    batch_mean: stats.mean,
                    batch_var: stats.variance.iter().map(|v| v * correction).collect(),
                };
                (y, Some(update))
            }
            Mode::Eval => {
                let mean = stat(params, &self.running_mean_name())?;
                let var = stat(params, &self.running_var_name())?;
                (tape.normalize_with(x, mean, var, BN_EPSILON)?, None)
            }
        };
        let scaled = tape.mul_channel(normalized, bound.get(&self.gamma_name())?)?;
        Ok((tape.add_channel(scaled, bound.get(&self.beta_name())?)?, update))
    }
}

fn stat<'a>(params: &'a LayerParams, name: &str) -> Result<&'a [f64]> {
    params
        .get(name)
        .map(Tensor::data)
        .ok_or_else(|| Error::contract("batch_norm", format!("missing buffer {name}")))
}

/// Batch statistics waiting to be folded into a batch-norm layer's running
/// mean and (unbiased) variance.
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate {
    mean_name: String,
    var_name: String,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl RunningStatsUpdate {
    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn apply(&self, params: &mut LayerParams) -> Result<()> {
        for (name, batch) in [(&self.mean_name, &self.batch_mean), (&self.var_name, &self.batch_var)] {
            let old = stat(params, name)?;
            let blended = old
                .iter()
                .zip(batch)
                .map(|(o, b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
                .collect();
            params.set(name, Tensor::new(&[batch.len()], blended)?)?;
        }
        Ok(())
    }
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    /// Normal weights with variance `1/in`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut LayerParams, rng: &mut R) {
        params.insert(
            self.weight_name(),
            Tensor::randn(
                &[self.in_features, self.out_features],
                (1.0 / self.in_features as f64).sqrt(),
                rng,
            ),
            true,
        );
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_features]), true);
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.get(&self.weight_name())?)?;
        tape.add_channel(y, bound.get(&self.bias_name())?)
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}

pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x)
}

/// Row-wise softmax of plain values, for evaluation code paths that do not
/// need a tape.
pub fn softmax_values(logits: &Tensor) -> Result<Tensor> {
    match *logits.shape() {
        [_, k] if k > 0 => Tensor::new(
            logits.shape(),
            crate::autodiff::softmax_rows(logits.data(), k),
        ),
        ref s => Err(Error::shape("softmax", format!("expected [rows, classes], got {s:?}"))),
    }
}
