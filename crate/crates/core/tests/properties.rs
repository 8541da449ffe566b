use breg_core::metrics::{
    balanced_subsets, categorical_metrics, categorical_score, cc, ccc, rmse, sagr, skew_normalize, ConfusionMatrix,
};
use breg_core::model::{Head, Network, NetworkConfig, StageConfig};
use breg_core::training::{
    cross_entropy, momentum_step, penalty_matrix, weighted_cross_entropy, MomentumConfig, OptimizerState,
};
use breg_core::{bypass_grad, BypassKind, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution, zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let q = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, c, r as usize, q as usize]) * w.at(&[o, c, ki, kj]);
                            }
                        }
                    }
                    out[((b * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut rng);
        let kernel = Tensor::randn(&[cout, cin, k, k], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(kernel.clone()).unwrap();
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let expected = naive_conv(&x, &kernel, stride, pad);
        prop_assert_eq!(tape.value(y).shape(), expected.shape());
        for (a, b) in tape.value(y).data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let grad_of = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone()).unwrap();
            let h = tape.bypass(v, BypassKind::H2).unwrap();
            let f = tape.sum(h).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let g = tape.sum(sq).unwrap();
            let fa = tape.scale(f, ca).unwrap();
            let gb = tape.scale(g, cb).unwrap();
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap().get(v).unwrap().clone()
        };
        let combined = grad_of(a, b);
        let (ga, gb) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..x.len() {
            let expected = a * ga.data()[i] + b * gb.data()[i];
            prop_assert!((combined.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bypass_derivative_bounds(x in -1e3f64..1e3) {
        let h1 = bypass_grad(BypassKind::H1, x).unwrap();
        prop_assert!(h1 > 0.0 && h1 < 1.0);
        prop_assert!(bypass_grad(BypassKind::H2, x).unwrap().abs() < std::f64::consts::FRAC_PI_2);
        let h3 = bypass_grad(BypassKind::H3, x).unwrap();
        prop_assert!(h3 > 0.0 && h3 <= 1.0);
        prop_assert_eq!(bypass_grad(BypassKind::Identity, x).unwrap(), 1.0);
    }

    #[test]
    fn h1_derivative_decreases(a in -30.0f64..30.0, d in 0.01f64..5.0) {
        prop_assert!(bypass_grad(BypassKind::H1, a).unwrap() > bypass_grad(BypassKind::H1, a + d).unwrap());
    }

    #[test]
    fn penalty_entries(counts in prop::collection::vec(1usize..10_000, 1..10)) {
        let h = penalty_matrix(&counts).unwrap();
        let max = h.diag().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(max, 1.0);
        prop_assert!(h.diag().iter().all(|&d| d > 0.0 && d <= 1.0));
    }

    #[test]
    fn balanced_weights_reduce_to_cross_entropy(k in 2usize..6, n in 1usize..20, count in 1usize..100, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[n, k], 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let h = penalty_matrix(&vec![count; k]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(logits).unwrap();
        let w = weighted_cross_entropy(&mut tape, z, &labels, &h).unwrap();
        let p = cross_entropy(&mut tape, z, &labels).unwrap();
        prop_assert!((tape.value(w).data()[0] - tape.value(p).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters(values in prop::collection::vec(-10.0f64..10.0, 1..20), g in -5.0f64..5.0) {
        let mut theta = Tensor::new(&[values.len()], values.clone()).unwrap();
        let mut state = OptimizerState::new(
            MomentumConfig { learning_rate: 0.0, ..MomentumConfig::default() },
            &[&[values.len()]],
        );
        for _ in 0..3 {
            momentum_step([&mut theta], &[Tensor::full(&[values.len()], g)], &mut state).unwrap();
        }
        prop_assert_eq!(theta.data(), &values[..]);
    }

    #[test]
    fn rmse_is_symmetric_and_non_negative(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..50)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = rmse(&p, &g).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, rmse(&g, &p).unwrap());
        prop_assert_eq!(rmse(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn concordance_bounded_by_correlation(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..50)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(r), Ok(c)) = (cc(&p, &g), ccc(&p, &g)) {
            prop_assert!(c.abs() <= r.abs() + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn correlations_ignore_joint_order(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..30), rot in 0usize..30) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = rot % p.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(r);
        g2.rotate_left(r);
        if let (Ok(a), Ok(b)) = (cc(&p, &g), cc(&p2, &g2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (ccc(&p, &g), ccc(&p2, &g2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sagr_range(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..50)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let s = sagr(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(sagr(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn kappa_vanishes_under_independence(rows in prop::collection::vec(1u64..6, 2..5), cols in prop::collection::vec(1u64..6, 2..5)) {
        let k = rows.len().min(cols.len());
        let cm: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| rows[i] * cols[j]).collect()).collect();
        let s = categorical_metrics(&ConfusionMatrix::from_rows(&cm).unwrap()).unwrap();
        prop_assert!(s.kappa.unwrap().abs() < 1e-10);
    }

    #[test]
    fn kappa_is_one_only_on_the_diagonal(cells in prop::collection::vec(0u64..20, 9), extra in 1u64..5) {
        let mut cm: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
        for (i, row) in cm.iter_mut().enumerate() {
            row[i] += 1;
        }
        let diagonal: Vec<Vec<u64>> = (0..3).map(|i| (0..3).map(|j| if i == j { cm[i][i] } else { 0 }).collect()).collect();
        let s = categorical_metrics(&ConfusionMatrix::from_rows(&diagonal).unwrap()).unwrap();
        prop_assert!((s.kappa.unwrap() - 1.0).abs() < 1e-10);
        cm[0][1] += extra;
        let s = categorical_metrics(&ConfusionMatrix::from_rows(&cm).unwrap()).unwrap();
        prop_assert!(s.kappa.unwrap() < 1.0 - 1e-12);
    }

    #[test]
    fn two_class_mcc_matches_binary_formula(tn in 1u64..50, fp in 1u64..50, fn_ in 1u64..50, tp in 1u64..50) {
        let s = categorical_metrics(&ConfusionMatrix::from_rows(&[vec![tn, fp], vec![fn_, tp]]).unwrap()).unwrap();
        let (tn, fp, fn_, tp) = (tn as f64, fp as f64, fn_ as f64, tp as f64);
        let binary = (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        prop_assert!((s.mcc.unwrap() - binary).abs() < 1e-12);
    }

    #[test]
    fn single_trial_on_balanced_set_is_exact(per_class in 1usize..20, k in 2usize..4, seed in any::<u64>()) {
        let gt: Vec<usize> = (0..per_class * k).map(|i| i % k).collect();
        let pred: Vec<usize> = gt.iter().enumerate().map(|(i, &g)| if i % 3 == 0 { (g + 1) % k } else { g }).collect();
        let r = skew_normalize(|p, g| categorical_score("f1", p, g, k), &pred, &gt, k, 1, seed).unwrap();
        prop_assert_eq!(r.normalized, r.original);
    }

    #[test]
    fn subsets_are_balanced_without_repeats(counts in prop::collection::vec(1usize..30, 2..5), seed in any::<u64>()) {
        let gt: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let min = *counts.iter().min().unwrap();
        for subset in balanced_subsets(&gt, counts.len(), 3, seed).unwrap() {
            prop_assert_eq!(subset.len(), min * counts.len());
            prop_assert!(subset.windows(2).all(|w| w[0] < w[1]));
            for c in 0..counts.len() {
                prop_assert_eq!(subset.iter().filter(|&&i| gt[i] == c).count(), min);
            }
        }
    }
}

#[test]
fn prediction_does_not_depend_on_batch_composition() {
    let net = Network::build(&NetworkConfig {
        input_shape: [1, 8, 8],
        stem_channels: 4,
        stem_convs: 1,
        stages: vec![
            StageConfig {
                blocks: 1,
                channels: 4,
            },
            StageConfig {
                blocks: 1,
                channels: 8,
            },
        ],
        bypass: BypassKind::H1,
        head: Head::Classification { classes: 3 },
        use_batch_norm: true,
        seed: 9,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Tensor::randn(&[5, 1, 8, 8], 1.0, &mut rng);
    let together = net.predict(&batch).unwrap();
    for i in 0..5 {
        let alone = net.predict(&batch.slice_outer(i, i + 1).unwrap()).unwrap();
        for (a, b) in alone.data().iter().zip(&together.data()[i * 3..(i + 1) * 3]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn independent_cm_fixture() {
    // row margins (30, 70), column margins (40, 60)
    let cm = ConfusionMatrix::from_rows(&[vec![12, 18], vec![28, 42]]).unwrap();
    let s = categorical_metrics(&cm).unwrap();
    assert!(s.kappa.unwrap().abs() < 1e-12);
    assert!(s.mcc.unwrap().abs() < 1e-12);
}
