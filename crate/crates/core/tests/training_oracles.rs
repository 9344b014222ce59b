use ctex::autograd::{grad_check, Param, Tape, Tensor};
use ctex::network::{Mode, SeFusion};
use ctex::rng::stream;
use ctex::training::{
    cosine_lr, nt_xent, nt_xent_value, AdamWConfig, Grads, OptimState, ParamGroup,
};
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut stream(seed, "training-oracle", 0))
}

/// Textbook double loop over anchors and candidates.
fn nt_xent_brute(z: &Tensor, tau: f64) -> f64 {
    let (rows, d) = (z.shape()[0], z.shape()[1]);
    let unit: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let r = z.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let sim = |i: usize, k: usize| (0..d).map(|j| unit[i][j] * unit[k][j]).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..rows {
        let p = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += sim(i, k).exp();
            }
        }
        total += -(sim(i, p).exp() / denom).ln();
    }
    total / rows as f64
}

#[test]
fn nt_xent_matches_double_loop() {
    for b in 0..20u64 {
        let n = 1 + (b as usize % 6);
        let z = random(&[2 * n, 5], 100 + b);
        let tau = 0.1 + 0.1 * (b % 5) as f64;
        let diff = (nt_xent_value(&z, tau).unwrap() - nt_xent_brute(&z, tau)).abs();
        assert!(diff < 1e-10, "batch {b}: {diff:e}");
    }
}

#[test]
fn nt_xent_closed_forms() {
    let pair = Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.1, 0.0]).unwrap();
    assert_eq!(nt_xent_value(&pair, 0.5).unwrap(), 0.0);
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let loss = nt_xent_value(&eye, 0.5).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn nt_xent_grows_as_positives_separate() {
    let tau = 0.5;
    let mut last = f64::NEG_INFINITY;
    for step in 0..=20 {
        let theta = std::f64::consts::PI * step as f64 / 20.0;
        let z = Tensor::new(
            [4, 4],
            vec![
                1.0,
                0.0,
                0.0,
                0.0, //
                theta.cos(),
                theta.sin(),
                0.0,
                0.0, //
                0.0,
                0.0,
                1.0,
                0.0, //
                0.0,
                0.0,
                0.0,
                1.0,
            ],
        )
        .unwrap();
        let loss = nt_xent_value(&z, tau).unwrap();
        assert!(loss > last, "theta {theta}: {loss} <= {last}");
        last = loss;
    }
}

#[test]
fn nt_xent_gradient_matches_central_differences() {
    for seed in 0..5 {
        let z = random(&[6, 4], 200 + seed);
        let err = grad_check(|tape, x| nt_xent(tape, x, 0.5), &z, 1e-6).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nt_xent_invariances(n in 1usize..6, seed in 0u64..10_000, tau in 0.05f64..2.0) {
        let z = random(&[2 * n, 4], seed);
        let base = nt_xent_value(&z, tau).unwrap();

        let mut r = stream(seed, "scales", 0);
        let mut scaled = z.clone();
        for i in 0..2 * n {
            let s: f64 = r.gen_range(0.1..10.0);
            for v in &mut scaled.data_mut()[i * 4..(i + 1) * 4] {
                *v *= s;
            }
        }
        prop_assert!((nt_xent_value(&scaled, tau).unwrap() - base).abs() < 1e-9);

        let swapped: Vec<usize> = (0..2 * n).map(|i| i ^ 1).collect();
        prop_assert!((nt_xent_value(&z.select_rows(&swapped), tau).unwrap() - base).abs() < 1e-9);

        let rotated: Vec<usize> = (0..2 * n).map(|i| (i + 2) % (2 * n)).collect();
        prop_assert!((nt_xent_value(&z.select_rows(&rotated), tau).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn adamw_three_step_hand_trace() {
    let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
    let grads = [0.5, -0.3, 0.1];

    // Written out step by step, independent of the optimiser loop.
    let mut w = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut expected = Vec::new();
    m = b1 * m + (1.0 - b1) * grads[0];
    v = b2 * v + (1.0 - b2) * grads[0] * grads[0];
    w -= lr * wd * w;
    w -= lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
    expected.push(w);
    m = b1 * m + (1.0 - b1) * grads[1];
    v = b2 * v + (1.0 - b2) * grads[1] * grads[1];
    w -= lr * wd * w;
    w -= lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + eps);
    expected.push(w);
    m = b1 * m + (1.0 - b1) * grads[2];
    v = b2 * v + (1.0 - b2) * grads[2] * grads[2];
    w -= lr * wd * w;
    w -= lr * (m / (1.0 - b1 * b1 * b1)) / ((v / (1.0 - b2 * b2 * b2)).sqrt() + eps);
    expected.push(w);

    let mut p = Param::new("w", Tensor::new([1], vec![1.0]).unwrap());
    let mut state = OptimState::new(AdamWConfig {
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    });
    for (g, want) in grads.iter().zip(&expected) {
        let mut gm = Grads::new();
        gm.insert("w".into(), Tensor::new([1], vec![*g]).unwrap());
        state
            .step(&mut [ParamGroup::new(lr, [&mut p])], &gm, 1.0)
            .unwrap();
        assert!(
            (p.value.data()[0] - want).abs() < 1e-12,
            "{} vs {want}",
            p.value.data()[0]
        );
    }
    // First step of Adam moves by almost exactly lr against the gradient sign.
    assert!((expected[0] - (0.999 - 0.1)).abs() < 1e-8);
}

#[test]
fn adamw_zero_scale_without_decay_is_a_no_op() {
    let mut p = Param::new("w", random(&[3, 2], 9));
    let before = p.value.clone();
    let mut state = OptimState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut gm = Grads::new();
    gm.insert("w".into(), random(&[3, 2], 10));
    for _ in 0..3 {
        state
            .step(&mut [ParamGroup::new(0.5, [&mut p])], &gm, 0.0)
            .unwrap();
    }
    assert_eq!(p.value, before);
}

#[test]
fn cosine_schedule_endpoints_are_exact() {
    for total in [1usize, 7, 100] {
        assert_eq!(cosine_lr(0, total, 0.3).unwrap(), 0.3);
        assert_eq!(cosine_lr(total, total, 0.3).unwrap(), 0.0);
    }
    assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
    assert!(cosine_lr(101, 100, 0.3).is_err());
}

fn se_reference(se: &SeFusion, u: &[f64]) -> Vec<f64> {
    let (dr, d) = (se.w1.value.shape()[0], se.w1.value.shape()[1]);
    let hidden: Vec<f64> = (0..dr)
        .map(|j| {
            (0..d)
                .map(|i| se.w1.value.data()[j * d + i] * u[i])
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    (0..d)
        .map(|i| {
            let z: f64 = (0..dr)
                .map(|j| se.w2.value.data()[i * dr + j] * hidden[j])
                .sum();
            u[i] / (1.0 + (-z).exp())
        })
        .collect()
}

fn fuse(se: &SeFusion, a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = se.forward(&mut tape, va, vb, Mode::Frozen).unwrap();
    tape.value(out).clone()
}

#[test]
fn se_zero_weights_halve_the_features() {
    let se = SeFusion::from_tensors("se", Tensor::zeros([2, 8]), Tensor::zeros([8, 2]), 4).unwrap();
    let (a, b) = (random(&[3, 5], 1), random(&[3, 3], 2));
    let out = fuse(&se, &a, &b);
    for i in 0..3 {
        let u = [a.row(i), b.row(i)].concat();
        for (o, x) in out.row(i).iter().zip(&u) {
            assert_eq!(*o, 0.5 * x);
        }
    }
}

#[test]
fn se_attenuates_and_matches_reference() {
    let se = SeFusion::new("se", 12, 4, &mut stream(4, "se", 0)).unwrap();
    let a = Tensor::uniform([10_000, 7], 3.0, &mut stream(5, "se", 0));
    let b = Tensor::uniform([10_000, 5], 3.0, &mut stream(6, "se", 0));
    let out = fuse(&se, &a, &b);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let u = [a.row(i), b.row(i)].concat();
        for (o, x) in out.row(i).iter().zip(&u) {
            assert!(o.abs() <= x.abs(), "row {i}: {o} vs {x}");
        }
        if i < 500 {
            for (o, r) in out.row(i).iter().zip(se_reference(&se, &u)) {
                worst = worst.max((o - r).abs());
            }
        }
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn se_gradient_reaches_both_branches_and_weights() {
    let se = SeFusion::new("se", 8, 2, &mut stream(7, "se", 0)).unwrap();
    let mut tape = Tape::new();
    let a = tape.leaf(random(&[4, 5], 8), true);
    let b = tape.leaf(random(&[4, 3], 9), true);
    let out = se.forward(&mut tape, a, b, Mode::Train).unwrap();
    let sq = tape.mul(out, out).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    for v in [a, b] {
        let g = tape.grad(v).unwrap();
        assert!(g.data().iter().any(|x| x.abs() > 1e-8));
    }
    for name in ["se.w1", "se.w2"] {
        let g = tape.param_grad(name).unwrap();
        assert!(g.data().iter().any(|x| x.abs() > 1e-8), "{name}");
    }
}
