use ctex::autograd::{Checkpoint, Tape, Tensor};
use ctex::rng::stream;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut stream(seed, "autograd-oracle", 0))
}

/// Direct six-loop cross-correlation with zero padding.
fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

#[test]
fn conv_and_pool_hand_computed() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., -1.]));
    let b = tape.constant(t(&[1], &[0.5]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[-3.5; 4]);
    let p = tape.mean_pool_spatial(y).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 1]);
    assert_eq!(tape.value(p).data(), &[-3.5]);

    // Padding 1, stride 2: each output is x[r][c] - x[r + 1][c + 1] over the padded grid.
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[-1., -3., -7., -4.]);
}

#[test]
fn matmul_transpose_and_concat_against_loops() {
    let a = random(&[4, 3], 1);
    let b = random(&[3, 5], 2);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let expect: f64 = (0..3)
                .map(|k| a.data()[i * 3 + k] * b.data()[k * 5 + j])
                .sum();
            assert!((tape.value(c).data()[i * 5 + j] - expect).abs() < 1e-15);
        }
    }
    let at = tape.transpose(va).unwrap();
    assert_eq!(tape.value(at).shape(), &[3, 4]);
    assert_eq!(tape.value(at).data()[2 * 4 + 1], a.data()[3 + 2]);
    let cat = tape.concat(va, va).unwrap();
    assert_eq!(tape.value(cat).shape(), &[4, 6]);
    assert_eq!(
        &tape.value(cat).data()[6..12],
        &[a.row(1), a.row(1)].concat()[..]
    );
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = random(&[3, 4], 3);
    let w = random(&[4, 2], 4);
    let grad_of = |alpha: f64, beta: f64| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let wv = tape.constant(w.clone());
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.relu(h);
        let f = tape.sum(h);
        let s = tape.sigmoid(x);
        let g = tape.mean(s);
        let f = tape.scale(f, alpha);
        let g = tape.scale(g, beta);
        let loss = tape.add(f, g).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(x).unwrap()
    };
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    let combined = grad_of(2.5, -0.75);
    for i in 0..12 {
        let expect = 2.5 * gf.data()[i] - 0.75 * gg.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut ck = Checkpoint::new();
    ck.push_meta("note", "hello").unwrap();
    ck.push_tensor("w", &random(&[2, 3, 4], 5)).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.meta("note").unwrap(), "hello");
    assert_eq!(back.tensor("w").unwrap(), random(&[2, 3, 4], 5));
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert!(Checkpoint::from_bytes(&ck.to_bytes()[..10]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_matches_reference(
        n in 1usize..3, c in 1usize..3, o in 1usize..4, h in 3usize..7, wd in 3usize..7,
        k in prop_oneof![Just(1usize), Just(3usize)], stride in 1usize..3, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let x = random(&[n, c, h, wd], seed);
        let w = random(&[o, c, k, k], seed + 1);
        let b = random(&[o], seed + 2);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let expect = conv_reference(&x, &w, &b, stride, pad);
        prop_assert_eq!(tape.value(y).shape(), expect.shape());
        prop_assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
    }
}
