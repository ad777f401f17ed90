//! Finite-difference and direct-loop checks for every tape op.

use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = Tensor::randn(tape.shape(y), &mut rng(seed));
    let p = tape.mul_const(y, w)?;
    Ok(tape.sum(p))
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let out = weighted_sum(&mut tape, y, 99).unwrap();
    tape.value(out).data()[0]
}

/// Compares tape gradients of every input element with central differences.
fn check_grads(build: &Build, inputs: Vec<Tensor<f64>>, tol: f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let out = weighted_sum(&mut tape, y, 99).unwrap();
    let mut grads = tape.backward(out).unwrap();
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.take_or_zeros(*v, inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < tol, "input {k} elem {i}: analytic {an} vs fd {fd}");
        }
    }
}

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, gain: f64) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(s, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * cout + o) * oh + oy) * ow + ox] = gain * acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn conv_matches_direct_loops() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3), (2, 2, 5)] {
        let x = randn([2, 3, 7, 6], 1);
        let w = randn([4, 3, k, k], 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, stride, pad, 0.7).unwrap();
        assert_close(tape.value(y), &conv_oracle(&x, &w, stride, pad, 0.7), 1e-12);
    }
}

#[test]
fn single_input_single_tap_conv_scales() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.constant(Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap());
    let y = tape.conv2d(x, w, None, 1, 0, 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros([2, 4, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w, None, 1, 1, 1.0),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn conv_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, 0.5);
        check_grads(&build, vec![randn([2, 2, 5, 5], 3), randn([3, 2, k, k], 4), randn([1, 3, 1, 1], 5)], 1e-6);
    }
}

/// Materializes the modulated kernel explicitly and runs the plain conv.
fn modconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, style: &Tensor<f64>, demod: bool, gain: f64) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let mut outs = Vec::new();
    for s in 0..n {
        let mut kern = w.clone();
        for o in 0..cout {
            let mut norm = 0.0;
            for c in 0..cin {
                for j in 0..k * k {
                    let idx = (o * cin + c) * k * k + j;
                    kern.data_mut()[idx] *= gain * style.sample(s)[c];
                    norm += kern.data()[idx].powi(2);
                }
            }
            if demod {
                let d = 1.0 / (norm + 1e-8).sqrt();
                for v in &mut kern.data_mut()[o * cin * k * k..(o + 1) * cin * k * k] {
                    *v *= d;
                }
            }
        }
        let xs = Tensor::from_vec([1, cin, h, wd], x.sample(s).to_vec()).unwrap();
        outs.extend(conv_oracle(&xs, &kern, 1, k / 2, 1.0).into_data());
    }
    Tensor::from_vec([n, cout, h, wd], outs).unwrap()
}

#[test]
fn modulated_conv_matches_materialized_kernel() {
    let x = randn([2, 3, 5, 4], 6);
    let w = randn([2, 3, 3, 3], 7);
    let st = randn([2, 3, 1, 1], 8);
    for demod in [false, true] {
        let mut tape = Tape::new();
        let (xv, wv, sv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(st.clone()));
        let y = tape.modulated_conv2d(xv, wv, sv, demod, 0.3).unwrap();
        assert_close(tape.value(y), &modconv_oracle(&x, &w, &st, demod, 0.3), 1e-12);
    }
}

#[test]
fn unit_style_without_demod_is_plain_conv() {
    let x = randn([1, 2, 4, 4], 9);
    let w = randn([3, 2, 3, 3], 10);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let sv = tape.constant(Tensor::full([1, 2, 1, 1], 1.0));
    let y = tape.modulated_conv2d(xv, wv, sv, false, 1.0).unwrap();
    assert_close(tape.value(y), &conv_oracle(&x, &w, 1, 1, 1.0), 1e-12);
}

#[test]
fn demodulation_removes_style_scale() {
    let x = randn([1, 2, 4, 4], 11);
    let w = randn([3, 2, 3, 3], 12);
    let st = randn([1, 2, 1, 1], 13);
    let run = |style: Tensor<f64>| {
        let mut tape = Tape::new();
        let (xv, wv, sv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(style));
        let y = tape.modulated_conv2d(xv, wv, sv, true, 1.0).unwrap();
        tape.value(y).clone()
    };
    assert_close(&run(st.map(|v| 5.0 * v)), &run(st.clone()), 1e-6);
}

#[test]
fn modulated_conv_gradients() {
    for demod in [false, true] {
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.modulated_conv2d(v[0], v[1], v[2], demod, 0.4);
        check_grads(&build, vec![randn([2, 2, 4, 4], 14), randn([3, 2, 3, 3], 15), randn([2, 2, 1, 1], 16)], 1e-6);
    }
}

#[test]
fn upsample_repeats_pixels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
    let y = tape.upsample2x(x);
    assert_eq!(tape.shape(y), [1, 1, 2, 4]);
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn elementwise_and_pooling_gradients() {
    let cases: Vec<(Box<Build>, Vec<Tensor<f64>>)> = vec![
        (Box::new(|t, v| Ok(t.upsample2x(v[0]))), vec![randn([2, 2, 3, 3], 20)]),
        (Box::new(|t, v| t.avg_pool(v[0], 2)), vec![randn([2, 2, 4, 6], 21)]),
        (Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2))), vec![randn([1, 3, 4, 4], 22)]),
        (Box::new(|t, v| Ok(t.sigmoid(v[0]))), vec![randn([1, 2, 3, 3], 23)]),
        (Box::new(|t, v| Ok(t.tanh(v[0]))), vec![randn([1, 2, 3, 3], 24)]),
        (Box::new(|t, v| Ok(t.softplus(v[0]))), vec![randn([1, 2, 3, 3], 25)]),
        (Box::new(|t, v| Ok(t.normalize_2nd_moment(v[0]))), vec![randn([3, 5, 1, 1], 26)]),
        (Box::new(|t, v| t.mul(v[0], v[1])), vec![randn([1, 2, 3, 3], 27), randn([1, 2, 3, 3], 28)]),
        (Box::new(|t, v| t.sub(v[0], v[1])), vec![randn([1, 2, 3, 3], 29), randn([1, 2, 3, 3], 30)]),
        (Box::new(|t, v| t.add_bias(v[0], v[1])), vec![randn([2, 3, 2, 2], 31), randn([1, 3, 1, 1], 32)]),
        (
            Box::new(|t, v| t.add_noise(v[0], v[1], v[2])),
            vec![randn([2, 3, 2, 2], 33), randn([2, 1, 2, 2], 34), randn([1, 1, 1, 1], 35)],
        ),
        (
            Box::new(|t, v| t.add_noise(v[0], v[1], v[2])),
            vec![randn([2, 3, 2, 2], 36), randn([1, 1, 2, 2], 37), randn([1, 1, 1, 1], 38)],
        ),
        (
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]), 0.5)),
            vec![randn([3, 4, 1, 1], 39), randn([5, 4, 1, 1], 40), randn([1, 5, 1, 1], 41)],
        ),
        (Box::new(|t, v| Ok(t.sum_per_sample(v[0]))), vec![randn([3, 2, 2, 2], 42)]),
        (Box::new(|t, v| Ok(t.mean(v[0]))), vec![randn([3, 2, 2, 2], 43)]),
        (Box::new(|t, v| Ok(t.replicate(v[0], 3))), vec![randn([2, 4, 1, 1], 44)]),
        (
            Box::new(|t, v| {
                let r = t.replicate(v[0], 3);
                let s = t.scale(r, 1.5);
                t.select_slot(s, 1)
            }),
            vec![randn([2, 4, 1, 1], 45)],
        ),
        (Box::new(|t, v| t.material_range(v[0], 0.02)), vec![randn([1, 9, 3, 3], 46).map(|x| 0.5 * x)]),
        (
            Box::new(|t, v| Ok(t.tone_gamma(v[0], 1e-4, 1.0 / 2.2))),
            vec![randn([1, 3, 3, 3], 47).map(|x| 0.4 + 0.2 * x)],
        ),
        (Box::new(|t, v| t.sq_dist(v[0], randn([1, 2, 3, 3], 48), true)), vec![randn([1, 2, 3, 3], 49)]),
        (Box::new(|t, v| t.reshape(v[0], [1, 18, 1, 1])), vec![randn([1, 2, 3, 3], 50)]),
    ];
    for (build, inputs) in cases {
        check_grads(build.as_ref(), inputs, 1e-6);
    }
}

#[test]
fn material_range_outputs_are_valid() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn([2, 9, 4, 4], 51).map(|v| 4.0 * v));
    let y = tape.material_range(x, 0.02).unwrap();
    let out = tape.value(y);
    for s in 0..2 {
        for p in 0..16 {
            let c = |ch: usize| out.data()[(s * 9 + ch) * 16 + p];
            for ch in [0, 1, 2, 6, 7, 8] {
                assert!((0.0..=1.0).contains(&c(ch)));
            }
            assert!((0.02..=1.0).contains(&c(5)));
            assert!(c(3).powi(2) + c(4).powi(2) <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn normalized_rows_have_unit_second_moment() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn([4, 16, 1, 1], 52).map(|v| 7.0 * v));
    let y = tape.normalize_2nd_moment(x);
    for s in 0..4 {
        let ms: f64 = tape.value(y).sample(s).iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }
}

#[test]
fn custom_op_gradient_flows() {
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let value = t.value(v[0]).map(|x| x * x * x);
        let back: tape::CustomBackward<f64> = Box::new(|ins, g| {
            let d = ins[0].data().iter().zip(g.data()).map(|(x, g)| 3.0 * x * x * g).collect();
            vec![Some(Tensor::from_vec(ins[0].shape(), d).unwrap())]
        });
        Ok(t.custom(&[v[0]], value, back))
    };
    check_grads(&build, vec![randn([1, 2, 2, 2], 53)], 1e-6);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([1, 2, 1, 1]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let c = tape.constant(Tensor::scalar(3.0));
    let y = tape.mul(x, c).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0]);
}

#[test]
fn f32_and_f64_agree() {
    let x = randn([1, 2, 5, 5], 54);
    let w = randn([3, 2, 3, 3], 55);
    let st = randn([1, 2, 1, 1], 56);
    let mut t64 = Tape::<f64>::new();
    let (a, b, c) = (t64.constant(x.clone()), t64.constant(w.clone()), t64.constant(st.clone()));
    let y64 = t64.modulated_conv2d(a, b, c, true, 1.0).unwrap();
    let mut t32 = Tape::<f32>::new();
    let (a, b, c) = (t32.constant(x.cast()), t32.constant(w.cast()), t32.constant(st.cast()));
    let y32 = t32.modulated_conv2d(a, b, c, true, 1.0).unwrap();
    assert_close(&t32.value(y32).cast(), t64.value(y64), 1e-5);
}
