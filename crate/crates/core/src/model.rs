//! BReG residual blocks and the network builder.
//!
//! A block computes `ReLU(H(x) + F(x))` where `H` is a bounded-gradient
//! bypass function applied elementwise and
//! `F = conv3x3 → [BN] → ReLU → conv3x3 → [BN]`. In a downsampling block the
//! first convolution of `F` has stride 2 and the shortcut becomes a learned
//! 1×1 stride-2 projection of `H(x)`.
//!
//! A network is: stem convolution(s) → stages of blocks (the first block of
//! every stage after the first downsamples) → global average pooling → fully
//! connected head.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use crate::autodiff::{Tape, Var};
use crate::bypass::BypassKind;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Bindings, Conv2d, LayerParams, Linear, Mode, RunningStatsUpdate};
use crate::tensor::Tensor;

/// Output head of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Head {
    /// `classes` logits.
    Classification { classes: usize },
    /// Two raw outputs: valence, arousal.
    Regression,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classification { classes } => classes,
            Head::Regression => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
}

fn default_stem_convs() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    /// Number of 3×3 convolutions in the stem.
    #[serde(default = "default_stem_convs")]
    pub stem_convs: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub bypass: BypassKind,
    pub head: Head,
    #[serde(default = "default_true")]
    pub use_batch_norm: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    /// Small three-stage network for 48×48 grayscale faces and 7 classes.
    pub fn desk_default() -> Self {
        Self {
            input_shape: [1, 48, 48],
            stem_channels: 16,
            stem_convs: 1,
            stages: vec![
                StageConfig {
                    blocks: 3,
                    channels: 16,
                },
                StageConfig {
                    blocks: 3,
                    channels: 32,
                },
                StageConfig {
                    blocks: 3,
                    channels: 64,
                },
            ],
            bypass: BypassKind::H3,
            head: Head::Classification { classes: 7 },
            use_batch_norm: true,
            seed: 0,
        }
    }

    /// Reference 39-layer reconstruction: two stem convolutions, three
    /// stages of six blocks (two convolutions each) and the fully connected
    /// head.
    pub fn breg_net_39() -> Self {
        Self {
            input_shape: [1, 48, 48],
            stem_channels: 48,
            stem_convs: 2,
            stages: vec![
                StageConfig {
                    blocks: 6,
                    channels: 48,
                },
                StageConfig {
                    blocks: 6,
                    channels: 96,
                },
                StageConfig {
                    blocks: 6,
                    channels: 184,
                },
            ],
            bypass: BypassKind::H3,
            head: Head::Classification { classes: 7 },
            use_batch_norm: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::Config(msg));
        if self.input_shape.contains(&0) {
            return invalid(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.stem_channels == 0 || self.stem_convs == 0 {
            return invalid("the stem needs at least one convolution with one channel".into());
        }
        if self.stages.is_empty() {
            return invalid("at least one stage is required".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.channels == 0 {
                return invalid(format!("stage {i} must have at least one block and one channel"));
            }
        }
        if self.stages.windows(2).any(|w| w[1].channels < w[0].channels) {
            return invalid("stage channel counts must be non-decreasing".into());
        }
        if let Head::Classification { classes } = self.head {
            if classes < 2 {
                return invalid(format!("classification needs at least 2 classes, got {classes}"));
            }
        }
        Ok(())
    }

    /// Weighted layers along the main path: stem convolutions, two per
    /// block, and the head. Shortcut projections are not counted.
    pub fn depth(&self) -> usize {
        self.stem_convs + 2 * self.stages.iter().map(|s| s.blocks).sum::<usize>() + 1
    }
}

/// Shape contract for one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub bypass: BypassKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: bool,
    pub use_batch_norm: bool,
}

/// One bounded residual gradient block.
#[derive(Debug, Clone, PartialEq)]
pub struct BregBlock {
    pub config: BlockConfig,
    conv1: Conv2d,
    bn1: Option<BatchNorm2d>,
    conv2: Conv2d,
    bn2: Option<BatchNorm2d>,
    projection: Option<Conv2d>,
}

impl BregBlock {
    pub fn new(name: &str, config: BlockConfig) -> Self {
        let bn = |suffix: &str| {
            config.use_batch_norm.then(|| BatchNorm2d {
                name: format!("{name}.{suffix}"),
                channels: config.out_channels,
            })
        };
        let stride = if config.downsample { 2 } else { 1 };
        let conv1 = Conv2d {
            name: format!("{name}.conv1"),
            in_channels: config.in_channels,
            out_channels: config.out_channels,
            kernel: 3,
            stride,
            padding: 1,
            bias: !config.use_batch_norm,
        };
        let conv2 = Conv2d {
            name: format!("{name}.conv2"),
            in_channels: config.out_channels,
            out_channels: config.out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: !config.use_batch_norm,
        };
        let projection = (config.downsample || config.in_channels != config.out_channels).then(|| Conv2d {
            name: format!("{name}.projection"),
            in_channels: config.in_channels,
            out_channels: config.out_channels,
            kernel: 1,
            stride,
            padding: 0,
            bias: true,
        });
        Self {
            config,
            conv1,
            bn1: bn("bn1"),
            conv2,
            bn2: bn("bn2"),
            projection,
        }
    }

    pub fn init(&self, params: &mut LayerParams, rng: &mut ChaCha8Rng) {
        self.conv1.init(params, rng);
        if let Some(bn) = &self.bn1 {
            bn.init(params);
        }
        self.conv2.init(params, rng);
        if let Some(bn) = &self.bn2 {
            bn.init(params);
        }
        if let Some(p) = &self.projection {
            p.init(params, rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn1.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.bn2.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.projection.as_ref().map_or(0, Conv2d::param_count)
    }

    /// `ReLU(shortcut(H(x)) + F(x))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        params: &LayerParams,
        x: Var,
        mode: Mode,
        updates: &mut Vec<RunningStatsUpdate>,
    ) -> Result<Var> {
        let channels = tape.value(x).shape().get(1).copied();
        if channels != Some(self.config.in_channels) {
            return Err(Error::contract(
                "breg_block",
                format!(
                    "block expects {} input channels, got shape {:?}",
                    self.config.in_channels,
                    tape.value(x).shape()
                ),
            ));
        }
        let mut norm = |tape: &mut Tape, bn: &Option<BatchNorm2d>, v: Var| -> Result<Var> {
            match bn {
                Some(bn) => {
                    let (y, update) = bn.forward(tape, bound, params, v, mode)?;
                    updates.extend(update);
                    Ok(y)
                }
                None => Ok(v),
            }
        };
        let f = self.conv1.forward(tape, bound, x)?;
        let f = norm(tape, &self.bn1, f)?;
        let f = tape.relu(f)?;
        let f = self.conv2.forward(tape, bound, f)?;
        let f = norm(tape, &self.bn2, f)?;

        let mut shortcut = tape.bypass(x, self.config.bypass)?;
        if let Some(p) = &self.projection {
            shortcut = p.forward(tape, bound, shortcut)?;
        }
        let y = tape.add(shortcut, f)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Block(Box<BregBlock>),
    GlobalAvgPool,
    Linear(Linear),
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Running-statistics updates to commit after a training step.
    pub updates: Vec<RunningStatsUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: LayerParams,
}

impl Network {
    /// Builds and initializes a network. The same config (seed included)
    /// always yields bitwise-identical parameters.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let bn = config.use_batch_norm;
        let [in_ch, mut h, mut w] = config.input_shape;
        let mut layers = Vec::new();

        let mut channels = in_ch;
        for i in 0..config.stem_convs {
            let name = if config.stem_convs == 1 {
                "stem".to_string()
            } else {
                format!("stem{i}")
            };
            layers.push(Layer::Conv(Conv2d {
                name: format!("{name}.conv"),
                in_channels: channels,
                out_channels: config.stem_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: !bn,
            }));
            if bn {
                layers.push(Layer::BatchNorm(BatchNorm2d {
                    name: format!("{name}.bn"),
                    channels: config.stem_channels,
                }));
            }
            layers.push(Layer::Relu);
            channels = config.stem_channels;
        }

        for (s, stage) in config.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let downsample = s > 0 && b == 0;
                if downsample {
                    if h < 2 || w < 2 {
                        return Err(Error::Config(format!(
                            "stage {s} cannot downsample a {h}x{w} feature map; the input {:?} is too small for {} stages",
                            config.input_shape,
                            config.stages.len()
                        )));
                    }
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                layers.push(Layer::Block(Box::new(BregBlock::new(
                    &format!("stage{s}.block{b}"),
                    BlockConfig {
                        bypass: config.bypass,
                        in_channels: channels,
                        out_channels: stage.channels,
                        downsample,
                        use_batch_norm: bn,
                    },
                ))));
                channels = stage.channels;
            }
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear(Linear {
            name: "head".into(),
            in_features: channels,
            out_features: config.head.outputs(),
        }));

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = LayerParams::new();
        for layer in &layers {
            match layer {
                Layer::Conv(c) => c.init(&mut params, &mut rng),
                Layer::BatchNorm(bn) => bn.init(&mut params),
                Layer::Block(block) => block.init(&mut params, &mut rng),
                Layer::Linear(l) => l.init(&mut params, &mut rng),
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    /// Number of weighted layers on the main path.
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(_) | Layer::Linear(_) => 1,
                Layer::Block(_) => 2,
                _ => 0,
            })
            .sum()
    }

    /// Element count of all trainable tensors; batch-norm running
    /// statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.trainable_count()
    }

    /// Per-layer parameter counts derived from layer shapes.
    pub fn layer_parameter_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.param_count(),
                Layer::BatchNorm(bn) => bn.param_count(),
                Layer::Block(b) => b.param_count(),
                Layer::Linear(l) => l.param_count(),
                Layer::Relu | Layer::GlobalAvgPool => 0,
            })
            .collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BregBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b.as_ref()),
            _ => None,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::contract(
                "predict",
                format!(
                    "expected a [n, {}, {}, {}] batch, got {shape:?}",
                    self.config.input_shape[0], self.config.input_shape[1], self.config.input_shape[2]
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network on a batch already recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var, mode: Mode) -> Result<Forward> {
        self.check_input(tape.value(x).shape())?;
        let mut updates = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(tape, bound, h)?,
                Layer::BatchNorm(bn) => {
                    let (y, update) = bn.forward(tape, bound, &self.params, h, mode)?;
                    updates.extend(update);
                    y
                }
                Layer::Relu => tape.relu(h)?,
                Layer::Block(block) => block.forward(tape, bound, &self.params, h, mode, &mut updates)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Linear(l) => l.forward(tape, bound, h)?,
            };
        }
        Ok(Forward { output: h, updates })
    }

    /// Folds batch statistics from a training-mode pass into the running
    /// statistics.
    pub fn commit(&mut self, updates: &[RunningStatsUpdate]) -> Result<()> {
        updates.iter().try_for_each(|u| u.apply(&mut self.params))
    }

    /// Inference-mode forward pass: logits `[n, K]` for classification, raw
    /// `[n, 2]` valence/arousal for regression.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let x = tape.constant(batch.clone())?;
        let out = self.forward(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Clamps a raw regression output into the valence/arousal range. Applied
/// only when scoring.
pub fn clamp_prediction(value: f64) -> f64 {
    value.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bypass: BypassKind, bn: bool) -> NetworkConfig {
        NetworkConfig {
            input_shape: [1, 8, 8],
            stem_channels: 2,
            stem_convs: 1,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: 2,
                },
                StageConfig {
                    blocks: 1,
                    channels: 3,
                },
            ],
            bypass,
            head: Head::Classification { classes: 3 },
            use_batch_norm: bn,
            seed: 9,
        }
    }

    fn zero_f_block(bypass: BypassKind) -> (BregBlock, LayerParams) {
        let block = BregBlock::new(
            "b",
            BlockConfig {
                bypass,
                in_channels: 2,
                out_channels: 2,
                downsample: false,
                use_batch_norm: false,
            },
        );
        let mut params = LayerParams::new();
        block.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        for e in params.entries().to_vec() {
            params.set(&e.name, Tensor::zeros(e.value.shape())).unwrap();
        }
        (block, params)
    }

    fn run_block(block: &BregBlock, params: &LayerParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.constant(x.clone()).unwrap();
        let y = block
            .forward(&mut tape, &bound, params, x, Mode::Train, &mut Vec::new())
            .unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_residual_reduces_to_relu_of_bypass() {
        let x = Tensor::new(
            &[1, 2, 2, 2],
            vec![-2.0, -0.5, 0.0, 0.5, 1.0, 3.0, -7.0, 0.25],
        )
        .unwrap();
        for kind in BypassKind::ALL {
            let (block, params) = zero_f_block(kind);
            let y = run_block(&block, &params, &x);
            let expected = x.map(|v| kind.value_unchecked(v).max(0.0));
            assert_eq!(y, expected, "{kind}");
        }
        let (block, params) = zero_f_block(BypassKind::Identity);
        assert_eq!(run_block(&block, &params, &x), x.map(|v| v.max(0.0)));
    }

    #[test]
    fn h3_block_on_constant_input() {
        let (block, params) = zero_f_block(BypassKind::H3);
        let y = run_block(&block, &params, &Tensor::full(&[1, 2, 3, 3], 0.5));
        assert!(y.data().iter().all(|&v| (v - 0.5f64.atan()).abs() < 1e-15));
        assert!((0.5f64.atan() - 0.4636).abs() < 1e-4);
    }

    #[test]
    fn block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (downsample, cout, expect) in [(false, 3, [2, 3, 6, 6]), (true, 5, [2, 5, 3, 3])] {
            let block = BregBlock::new(
                "b",
                BlockConfig {
                    bypass: BypassKind::H3,
                    in_channels: 3,
                    out_channels: cout,
                    downsample,
                    use_batch_norm: true,
                },
            );
            let mut params = LayerParams::new();
            block.init(&mut params, &mut rng);
            let y = run_block(&block, &params, &Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng));
            assert_eq!(y.shape(), &expect);
        }
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let (block, params) = zero_f_block(BypassKind::H3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(block
            .forward(&mut tape, &bound, &params, x, Mode::Eval, &mut Vec::new())
            .is_err());
    }

    #[test]
    fn desk_default_builds_and_predicts() {
        let net = Network::build(&NetworkConfig::desk_default()).unwrap();
        let batch = Tensor::full(&[2, 1, 48, 48], 0.5);
        assert_eq!(net.predict(&batch).unwrap().shape(), &[2, 7]);
        assert_eq!(net.depth(), 1 + 2 * 9 + 1);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::build(&NetworkConfig::desk_default()).unwrap();
        let b = Network::build(&NetworkConfig::desk_default()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = NetworkConfig::desk_default();
        other.seed = 1;
        assert_ne!(a.params(), Network::build(&other).unwrap().params());
    }

    #[test]
    fn reference_39_layer_config() {
        let cfg = NetworkConfig::breg_net_39();
        assert_eq!(cfg.depth(), 39);
        let net = Network::build(&cfg).unwrap();
        assert_eq!(net.depth(), 39);
        let params = net.count_parameters();
        assert!((4_500_000..5_300_000).contains(&params), "{params}");
    }

    #[test]
    fn too_small_input_names_the_stage() {
        let mut cfg = tiny(BypassKind::H3, true);
        cfg.input_shape = [1, 1, 1];
        let err = Network::build(&cfg).unwrap_err().to_string();
        assert!(err.contains("stage 1"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(BypassKind::H3, true);
        cfg.head = Head::Classification { classes: 1 };
        assert!(Network::build(&cfg).is_err());
        let mut cfg = tiny(BypassKind::H3, true);
        cfg.stages[1].channels = 1;
        assert!(Network::build(&cfg).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut net = Network::build(&tiny(BypassKind::H1, true)).unwrap();
        for name in ["head.weight", "head.bias"] {
            let shape = net.params().get(name).unwrap().shape().to_vec();
            net.params_mut().set(name, Tensor::zeros(&shape)).unwrap();
        }
        let logits = net.predict(&Tensor::full(&[3, 1, 8, 8], 0.3)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = crate::layers::softmax_values(&logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let net = Network::build(&tiny(BypassKind::H3, false)).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 9, 8])).is_err());
    }

    #[test]
    fn clamp_only_limits_range() {
        assert_eq!(clamp_prediction(1.7), 1.0);
        assert_eq!(clamp_prediction(-3.0), -1.0);
        assert_eq!(clamp_prediction(0.25), 0.25);
    }
}
