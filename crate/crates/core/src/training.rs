//! Losses, the momentum optimizer and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{class_frequencies, Dataset, Targets};
use crate::error::{Error, Result};
use crate::layers::{LayerParams, Mode};
use crate::metrics;
use crate::model::{clamp_prediction, Head, Network};
use crate::tensor::Tensor;

/// Diagonal class-weight matrix with `diag[i] = min(counts) / counts[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    diag: Vec<f64>,
    class_counts: Vec<usize>,
}

impl PenaltyMatrix {
    /// Unit weights for `classes` classes.
    pub fn identity(classes: usize) -> Self {
        Self {
            diag: vec![1.0; classes],
            class_counts: vec![1; classes],
        }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn classes(&self) -> usize {
        self.diag.len()
    }

    /// `H[row, col]`; zero off the diagonal.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.diag[row]
        } else {
            0.0
        }
    }
}

pub fn penalty_matrix(class_counts: &[usize]) -> Result<PenaltyMatrix> {
    if class_counts.is_empty() {
        return Err(Error::contract("penalty_matrix", "no classes"));
    }
    if let Some(i) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(
            "penalty_matrix",
            format!("class {i} has no samples and cannot be weighted"),
        ));
    }
    let min = *class_counts.iter().min().expect("non-empty") as f64;
    Ok(PenaltyMatrix {
        diag: class_counts.iter().map(|&c| min / c as f64).collect(),
        class_counts: class_counts.to_vec(),
    })
}

/// Batch mean of `−H[l,l] · ln softmax(logits)[l]` over true labels `l`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    penalty: &PenaltyMatrix,
) -> Result<Var> {
    let k = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    if penalty.classes() != k {
        return Err(Error::contract(
            "weighted_cross_entropy",
            format!("penalty matrix has {} classes, logits have {k}", penalty.classes()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(
            "weighted_cross_entropy",
            format!("label {bad} outside [0, {k})"),
        ));
    }
    let weights: Vec<f64> = labels.iter().map(|&l| penalty.diag[l]).collect();
    tape.cross_entropy(logits, labels, &weights)
}

/// Unweighted batch-mean cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels, &vec![1.0; labels.len()])
}

/// Mean of squared elementwise differences.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "prediction {:?} vs target {:?}",
                tape.value(pred).shape(),
                tape.value(target).shape()
            ),
        ));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Velocities for classical momentum with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: MomentumConfig,
    velocities: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero velocities shaped like `shapes`.
    pub fn new(config: MomentumConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            velocities: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Zero velocities for every trainable tensor of `params`.
    pub fn for_params(config: MomentumConfig, params: &LayerParams) -> Self {
        let shapes: Vec<&[usize]> = params.trainable().map(|e| e.value.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }
}

/// `v ← μ·v + (g + λ·θ)`, then `θ ← θ − lr·v`, for each tensor.
///
/// Nothing is modified when any gradient is non-finite or shapes disagree.
pub fn momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::contract(
            "momentum_step",
            format!(
                "{} parameters, {} gradients, {} velocities",
                params.len(),
                grads.len(),
                state.velocities.len()
            ),
        ));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocities).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "momentum_step",
                format!("tensor {i}: {:?} / {:?} / {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "momentum_step" });
        }
    }
    let MomentumConfig {
        learning_rate: lr,
        momentum: mu,
        weight_decay: lambda,
    } = state.config;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        let p = p.data_mut();
        for ((theta, &grad), vel) in p.iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = mu * *vel + (grad + lambda * *theta);
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Plain cross-entropy.
    Regular,
    /// Cross-entropy weighted by the penalty matrix of the training set.
    Weighted,
    /// Mean squared error on valence/arousal.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: MomentumConfig,
    /// Seeds batch shuffling.
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy (categorical) or mean RMSE over valence and arousal.
    pub train_metric: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    /// Penalty matrix used by the weighted loss.
    pub penalty: Option<PenaltyMatrix>,
}

impl TrainReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_metric,val_loss,val_metric\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_metric,
                opt(r.val_loss),
                opt(r.val_metric)
            );
        }
        out
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_csv())?;
        Ok(())
    }
}

/// Loss for a head/target pair.
enum Objective {
    Classes(PenaltyMatrix),
    Regression,
}

impl Objective {
    fn loss(&self, tape: &mut Tape, output: Var, targets: &BatchTargets) -> Result<Var> {
        match (self, targets) {
            (Objective::Classes(h), BatchTargets::Labels(labels)) => {
                weighted_cross_entropy(tape, output, labels, h)
            }
            (Objective::Regression, BatchTargets::Values(values)) => {
                let target = tape.constant(values.clone())?;
                mse_loss(tape, output, target)
            }
            _ => Err(Error::contract("train", "loss does not match the targets")),
        }
    }
}

enum BatchTargets {
    Labels(Vec<usize>),
    Values(Tensor),
}

fn batch_targets(data: &Dataset, indices: &[usize]) -> BatchTargets {
    match data.targets() {
        Targets::Categorical { labels, .. } => {
            BatchTargets::Labels(indices.iter().map(|&i| labels[i]).collect())
        }
        Targets::Dimensional(values) => BatchTargets::Values(
            Tensor::new(
                &[indices.len(), 2],
                indices.iter().flat_map(|&i| values[i]).collect(),
            )
            .expect("two values per sample"),
        ),
    }
}

fn check_compatible(net: &Network, data: &Dataset, loss: Option<LossKind>) -> Result<()> {
    let shape = data.image_shape();
    if shape != net.config().input_shape {
        return Err(Error::contract(
            "train",
            format!(
                "data images are {shape:?}, network expects {:?}",
                net.config().input_shape
            ),
        ));
    }
    match (net.head(), data.targets()) {
        (Head::Classification { classes }, Targets::Categorical { classes: k, .. }) if classes == *k => {}
        (Head::Regression, Targets::Dimensional(_)) => {}
        (head, targets) => {
            return Err(Error::contract(
                "train",
                format!("{head:?} head cannot be used with {:?} data", targets.task()),
            ))
        }
    }
    match (net.head(), loss) {
        (Head::Regression, Some(LossKind::Regular | LossKind::Weighted))
        | (Head::Classification { .. }, Some(LossKind::Mse)) => Err(Error::contract(
            "train",
            format!("loss {loss:?} does not fit a {:?} head", net.head()),
        )),
        _ => Ok(()),
    }
}

/// Inference-mode outputs for a whole dataset, in dataset order.
pub fn predict_dataset(net: &Network, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    check_compatible(net, data, None)?;
    let batch_size = batch_size.max(1);
    let outputs = net.head().outputs();
    let mut values = Vec::with_capacity(data.len() * outputs);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        values.extend(net.predict(&data.batch(chunk))?.into_data());
    }
    Tensor::new(&[data.len(), outputs], values)
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn metric_of(outputs: &Tensor, targets: &BatchTargets) -> Result<f64> {
    match targets {
        BatchTargets::Labels(labels) => {
            let pred = argmax_rows(outputs);
            Ok(pred.iter().zip(labels).filter(|(p, g)| p == g).count() as f64 / labels.len() as f64)
        }
        BatchTargets::Values(values) => {
            let clamp = |t: &Tensor, axis: usize| -> Vec<f64> {
                t.data().chunks(2).map(|r| clamp_prediction(r[axis])).collect()
            };
            let rmse_v = metrics::rmse(&clamp(outputs, 0), &clamp(values, 0))?;
            let rmse_a = metrics::rmse(&clamp(outputs, 1), &clamp(values, 1))?;
            Ok((rmse_v + rmse_a) / 2.0)
        }
    }
}

fn evaluate(net: &Network, data: &Dataset, objective: &Objective, batch_size: usize) -> Result<(f64, f64)> {
    let outputs = predict_dataset(net, data, batch_size)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let targets = batch_targets(data, &all);
    let mut tape = Tape::new();
    let out = tape.constant(outputs.clone())?;
    let loss = objective.loss(&mut tape, out, &targets)?;
    let loss = tape.value(loss).data()[0];
    Ok((loss, metric_of(&outputs, &targets)?))
}

/// Trains `net` in place with seeded shuffling, one optimizer step per
/// mini-batch. A trailing batch of one sample is skipped so batch
/// normalization always sees at least two samples.
pub fn train(net: &mut Network, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::contract("train", "training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_compatible(net, data, Some(cfg.loss))?;
    if let Some(v) = val {
        check_compatible(net, v, Some(cfg.loss))?;
    }
    let (objective, penalty) = match (cfg.loss, net.head()) {
        (LossKind::Weighted, _) => {
            let h = penalty_matrix(&class_frequencies(data)?)?;
            (Objective::Classes(h.clone()), Some(h))
        }
        (LossKind::Regular, Head::Classification { classes }) => {
            (Objective::Classes(PenaltyMatrix::identity(classes)), None)
        }
        _ => (Objective::Regression, None),
    };

    let mut state = OptimizerState::for_params(cfg.optimizer, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut metric_sum, mut seen) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 && net.config().use_batch_norm {
                continue;
            }
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
            let targets = batch_targets(data, batch);
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape)?;
            let x = tape.constant(data.batch(batch))?;
            let step_result = (|| {
                let fwd = net.forward(&mut tape, &bound, x, Mode::Train)?;
                let loss = objective.loss(&mut tape, fwd.output, &targets)?;
                let grads = tape.backward(loss)?;
                Ok::<_, Error>((fwd, loss, grads))
            })();
            let (fwd, loss, grads) = match step_result {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let loss_value = tape.value(loss).data()[0];
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .map(|&v| grads.get(v).expect("bound parameters receive gradients").clone())
                .collect();
            momentum_step(net.params_mut().trainable_values_mut(), &grads, &mut state).map_err(|e| match e {
                Error::NonFinite { .. } => diverged(loss_value),
                other => other,
            })?;
            net.commit(&fwd.updates)?;

            loss_sum += loss_value * batch.len() as f64;
            metric_sum += metric_of(tape.value(fwd.output), &targets)? * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::contract("train", "no batch had at least two samples"));
        }
        let (val_loss, val_metric) = match val {
            Some(v) => {
                let (l, m) = evaluate(net, v, &objective, cfg.batch_size.max(64))?;
                (Some(l), Some(m))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_metric: metric_sum / seen as f64,
            val_loss,
            val_metric,
        };
        info!(
            "epoch {epoch}: train loss {:.5} metric {:.4}, val loss {:?} metric {:?}",
            record.train_loss, record.train_metric, record.val_loss, record.val_metric
        );
        trace.push(record);
    }
    Ok(TrainReport { trace, penalty })
}
