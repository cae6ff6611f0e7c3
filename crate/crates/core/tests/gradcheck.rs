//! Finite-difference and brute-force oracles for the tensor engine.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uaf_core::tensor::{adam_step, AdamConfig, AdamState};
use uaf_core::{Graph, Tensor};

mod support;

use support::{fd_worst, random};

const TOL: f64 = 1e-6;

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 6]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.data()[i * 5 + k] * b.data()[k * 6 + j];
            }
            assert!((g.value(c).data()[i * 6 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn bmm_matches_per_batch_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 2, 4]);
    let b = random(&mut rng, &[3, 5, 4]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.bmm(av, bv, true).unwrap();
    assert_eq!(g.shape(c), &[3, 2, 5]);
    for bi in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let s: f64 = (0..4)
                    .map(|k| a.data()[bi * 8 + i * 4 + k] * b.data()[bi * 20 + j * 4 + k])
                    .sum();
                assert!((g.value(c).data()[bi * 10 + i * 5 + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 2, 5, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
    let (ho, wo) = (3, 3);
    assert_eq!(g.shape(y), &[2, 3, ho, wo]);
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (i * 2 + ki) as isize - 1;
                                let jj = (j * 2 + kj) as isize - 1;
                                if ii < 0 || jj < 0 || ii >= 5 || jj >= 6 {
                                    continue;
                                }
                                s += x.data()[((n * 2 + c) * 5 + ii as usize) * 6 + jj as usize]
                                    * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                    let got = g.value(y).data()[((n * 3 + o) * ho + i) * wo + j];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn every_primitive_passes_finite_differences() {
    let errors = support::primitive_errors();
    assert!(errors.len() >= 30);
    for (name, e) in errors {
        assert!(e < TOL, "{name}: max relative error {e:e}");
    }
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = &mut rng;
    let x = random(r, &[6, 4]);
    let inputs = vec![random(r, &[4, 8]), random(r, &[8]), random(r, &[8, 3]), random(r, &[3])];
    let worst = fd_worst(inputs, move |g, v| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, v[0]).unwrap();
        let h = g.add(h, v[1]).unwrap();
        let h = g.relu(h).unwrap();
        let o = g.matmul(h, v[2]).unwrap();
        let o = g.add(o, v[3]).unwrap();
        g.mean(o).unwrap()
    });
    assert!(worst < 1e-6);
}

#[test]
fn adam_matches_scripted_reference_on_quadratic() {
    // independent scalar Adam, written out longhand
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for t in 1..=10 {
        let grad = 2.0 * p;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad * grad;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        reference.push(p);
    }

    let mut params = vec![Tensor::from_vec(vec![1.0])];
    let mut state = AdamState::new(&params, AdamConfig { lr, beta1: b1, beta2: b2, eps }).unwrap();
    let mut prev = 1.0f64;
    for (step, expected) in reference.iter().enumerate() {
        let mut g = Graph::new();
        let pv = g.param(&params[0]);
        let sq = g.mul(pv, pv).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        adam_step(&mut params, &[grads.get(pv)], &mut state).unwrap();
        let now = params[0].data()[0];
        assert!((now - expected).abs() < 1e-14, "step {step}: {now} vs {expected}");
        assert!(now.abs() < prev.abs());
        prev = now;
        assert_eq!(state.step_count, step as u64 + 1);
    }
    assert!(prev.abs() < 1.0);
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let mut g = Graph::new();
        let (av, bv) = (g.param(&a), g.param(&b));
        let c = g.matmul(av, bv).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.mean(s).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(s).clone(), grads.get(av), grads.get(bv))
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let d = g.value(y).data();
        if axis == 1 {
            for row in d.chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            for j in 0..4 {
                let s: f64 = (0..3).map(|i| d[i * 4 + j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_kl_is_non_negative(mu in prop::collection::vec(-5.0f64..5.0, 6), lv in prop::collection::vec(-10.0f64..10.0, 6)) {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![2, 3], mu).unwrap());
        let l = g.constant(Tensor::new(vec![2, 3], lv).unwrap());
        let kl = g.gaussian_kl(m, l).unwrap();
        prop_assert!(g.value(kl).item() >= 0.0);
    }
}
