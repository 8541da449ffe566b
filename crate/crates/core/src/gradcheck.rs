//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bypass::BypassKind;
use crate::error::{Error, Result};
use crate::layers::{Bindings, LayerParams, Mode};
use crate::model::{BlockConfig, BregBlock, Head, Network, NetworkConfig, StageConfig};
use crate::tensor::Tensor;
use crate::training::{cross_entropy, mse_loss, penalty_matrix, weighted_cross_entropy};

/// Default step for central differences in 64-bit arithmetic.
pub const DEFAULT_EPSILON: f64 = 1e-5;

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::contract("grad_check", "function must return a single element"))?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(value)
}

/// Compares the tape gradient of a scalar function of several tensors with
/// central differences and returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over all coordinates of all
/// inputs.
pub fn grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::contract("grad_check", format!("epsilon must be positive, got {epsilon}")));
    }
    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameters always receive a gradient");
        for i in 0..points[which].len() {
            let original = points[which].data()[i];
            probe[which].data_mut()[i] = original + epsilon;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = original - epsilon;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// One row of the gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate carries a
/// distinct weight into the scalar.
fn project(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = Tensor::randn(tape.value(y).shape(), 1.0, rng);
    let r = tape.constant(r)?;
    let weighted = tape.mul(y, r)?;
    tape.sum(weighted)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Checks every differentiable building block: the four bypass functions,
/// each layer primitive, the three losses, one composed block per bypass
/// kind, and a two-block network end to end.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name: String, err: f64| rows.push(CheckRow { name, max_rel_error: err });
    let eps = DEFAULT_EPSILON;

    for kind in BypassKind::ALL {
        let x = Tensor::uniform(&[200], -10.0, 10.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.bypass(v, kind)?;
                t.sum(y)
            },
            &x,
            eps,
        )?;
        push(format!("bypass/{}", kind.name()), err);
    }

    for (name, stride, padding, kernel) in [
        ("layer/conv3x3", 1, 1, 3),
        ("layer/conv3x3_stride2", 2, 1, 3),
        ("layer/conv1x1_stride2", 2, 0, 1),
    ] {
        let seed_r: u64 = rng.random();
        let points = [randn(&[2, 2, 5, 5], &mut rng), randn(&[3, 2, kernel, kernel], &mut rng), randn(&[3], &mut rng)];
        let err = grad_check_many(
            |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed_r);
                let y = t.conv2d(v[0], v[1], stride, padding)?;
                let y = t.add_channel(y, v[2])?;
                project(t, y, &mut r)
            },
            &points,
            eps,
        )?;
        push(name.to_string(), err);
    }

    let seed_r: u64 = rng.random();
    let points = [randn(&[4, 3, 3, 3], &mut rng), randn(&[3], &mut rng), randn(&[3], &mut rng)];
    let err = grad_check_many(
        |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed_r);
            let (y, _) = t.batch_normalize(v[0], crate::layers::BN_EPSILON)?;
            let y = t.mul_channel(y, v[1])?;
            let y = t.add_channel(y, v[2])?;
            project(t, y, &mut r)
        },
        &points,
        eps,
    )?;
    push("layer/batch_norm".into(), err);

    let seed_r: u64 = rng.random();
    let points = [randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng), randn(&[5], &mut rng)];
    let err = grad_check_many(
        |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed_r);
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_channel(y, v[2])?;
            project(t, y, &mut r)
        },
        &points,
        eps,
    )?;
    push("layer/linear".into(), err);

    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let unary: [(&str, &[usize], Unary); 4] = [
        ("layer/relu", &[2, 3, 4, 4], |t, v| t.relu(v)),
        ("layer/global_avg_pool", &[2, 3, 4, 4], |t, v| t.global_avg_pool(v)),
        ("layer/softmax", &[3, 5], |t, v| t.softmax(v)),
        ("layer/log_softmax", &[3, 5], |t, v| t.log_softmax(v)),
    ];
    for (name, shape, op) in unary {
        let seed_r: u64 = rng.random();
        let x = randn(shape, &mut rng);
        let err = grad_check(
            |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed_r);
                let y = op(t, v)?;
                project(t, y, &mut r)
            },
            &x,
            eps,
        )?;
        push(name.to_string(), err);
    }

    let labels = [0usize, 2, 1, 2, 0, 2];
    let logits = randn(&[6, 3], &mut rng);
    let err = grad_check(|t, v| cross_entropy(t, v, &labels), &logits, eps)?;
    push("loss/cross_entropy".into(), err);
    let penalty = penalty_matrix(&[30, 5, 12])?;
    let err = grad_check(|t, v| weighted_cross_entropy(t, v, &labels, &penalty), &logits, eps)?;
    push("loss/weighted_cross_entropy".into(), err);
    let points = [randn(&[4, 2], &mut rng), Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng)];
    let err = grad_check_many(|t, v| mse_loss(t, v[0], v[1]), &points, eps)?;
    push("loss/mse".into(), err);

    for kind in BypassKind::ALL {
        let block = BregBlock::new(
            "block",
            BlockConfig {
                bypass: kind,
                in_channels: 2,
                out_channels: 3,
                downsample: true,
                use_batch_norm: true,
            },
        );
        let mut params = LayerParams::new();
        block.init(&mut params, &mut rng);
        let mut points = vec![randn(&[3, 2, 6, 6], &mut rng)];
        points.extend(params.trainable().map(|e| e.value.clone()));
        let seed_r: u64 = rng.random();
        let err = grad_check_many(
            |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed_r);
                let bound = Bindings::from_vars(&params, &v[1..])?;
                let y = block.forward(t, &bound, &params, v[0], Mode::Train, &mut Vec::new())?;
                project(t, y, &mut r)
            },
            &points,
            eps,
        )?;
        push(format!("block/{}", kind.name()), err);
    }

    let (err, _) = network_grad_check(seed)?;
    push("network/two_blocks".into(), err);
    Ok(rows)
}

/// Checks the gradient of the training loss of a small two-block network
/// with respect to every trainable parameter. Returns the worst relative
/// error and the number of parameters checked.
pub fn network_grad_check(seed: u64) -> Result<(f64, usize)> {
    let config = NetworkConfig {
        input_shape: [1, 6, 6],
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
        bypass: BypassKind::H3,
        head: Head::Classification { classes: 3 },
        use_batch_norm: true,
        seed,
    };
    let net = Network::build(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = randn(&[4, 1, 6, 6], &mut rng);
    let labels = [0usize, 1, 2, 1];
    let points: Vec<Tensor> = net.params().trainable().map(|e| e.value.clone()).collect();
    let count = points.iter().map(Tensor::len).sum();
    let err = grad_check_many(
        |t, v| {
            let bound = Bindings::from_vars(net.params(), v)?;
            let input = t.constant(x.clone())?;
            let out = net.forward(t, &bound, input, Mode::Train)?;
            cross_entropy(t, out.output, &labels)
        },
        &points,
        DEFAULT_EPSILON,
    )?;
    Ok((err, count))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::full(&[4], 0.3);
        let err = grad_check(
            |tape, _x| tape.constant(Tensor::scalar(2.5)),
            &point,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn h1_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = Tensor::uniform(&[10], -3.0, 3.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = tape.bypass(x, BypassKind::H1)?;
                tape.sum(y)
            },
            &point,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn epsilon_must_be_positive() {
        let point = Tensor::full(&[1], 1.0);
        assert!(grad_check(|tape, x| tape.sum(x), &point, 0.0).is_err());
    }

    #[test]
    fn vector_output_is_rejected() {
        let point = Tensor::full(&[2], 1.0);
        assert!(grad_check(|tape, x| tape.relu(x), &point, 1e-5).is_err());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at an exact kink: the tape uses the left derivative (0) while
        // central differences see 0.5.
        let point = Tensor::zeros(&[1]);
        let err = grad_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-9);
    }

    #[test]
    fn suite_passes_default_tolerance() {
        let rows = gradcheck_suite(0).unwrap();
        assert_eq!(rows.len(), 21);
        for row in &rows {
            assert!(row.max_rel_error < 1e-5, "{row:?}");
        }
        assert_eq!(rows, gradcheck_suite(0).unwrap());
    }
}
