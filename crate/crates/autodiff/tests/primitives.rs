use objint_autodiff::{gradient_check, Result, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Scalarizes `y` with fixed positive weights so no coordinate cancels out.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = random_tensor(&mut rng, &[3], lo, hi);
        let err = gradient_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-5, "{name}: worst relative error {worst:e}");
}

fn check_binary(
    name: &str,
    a_shape: &[usize],
    b_shape: &[usize],
    range: (f64, f64),
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = random_tensor(&mut rng, a_shape, range.0, range.1);
        let b = random_tensor(&mut rng, b_shape, range.0, range.1);
        let bc = b.clone();
        let ea = gradient_check(
            |t, v| {
                let bv = t.constant(bc.clone());
                let y = op(t, v, bv)?;
                weighted_sum(t, y)
            },
            &a,
            EPS,
        )
        .unwrap();
        let eb = gradient_check(
            |t, v| {
                let av = t.constant(a.clone());
                let y = op(t, av, v)?;
                weighted_sum(t, y)
            },
            &b,
            EPS,
        )
        .unwrap();
        worst = worst.max(ea).max(eb);
    }
    assert!(worst < 1e-5, "{name}: worst relative error {worst:e}");
}

#[test]
fn sin_gradient_at_zero_is_one() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let y = t.sin(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).item().unwrap(), 1.0);
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().wrt(x).item().unwrap(), 6.0);
}

#[test]
fn disconnected_leaf_gets_exact_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = t.leaf(Tensor::vector(vec![3.0, 4.0]));
    let _unused = t.sin(x).unwrap();
    let s = t.square(y).unwrap();
    let loss = t.sum(s).unwrap();
    let g = t.backward(loss).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = t.sin(x).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(vec![3, 4]));
    let b = t.leaf(Tensor::zeros(vec![3, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn pow_negative_base_fractional_exponent_is_domain_error() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::scalar(-2.0));
    let half = t.scalar(0.5);
    assert!(matches!(t.pow(a, half), Err(TensorError::Domain { .. })));
    let three = t.scalar(3.0);
    let y = t.pow(a, three).unwrap();
    assert_eq!(t.value(y).item().unwrap(), -8.0);
}

#[test]
fn matmul_shape_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    assert_eq!(t.shape(c), &[3, 2]);
    let err_a = gradient_check(
        |t, v| {
            let bv = t.constant(b.clone());
            let c = t.matmul(v, bv)?;
            t.sum(c)
        },
        &a,
        EPS,
    )
    .unwrap();
    let err_b = gradient_check(
        |t, v| {
            let av = t.constant(a.clone());
            let c = t.matmul(av, v)?;
            t.sum(c)
        },
        &b,
        EPS,
    )
    .unwrap();
    assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a:e} {err_b:e}");
}

#[test]
fn gradient_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[6], -3.0, 3.0);
    let err = gradient_check(
        |t, v| {
            let s = t.sigmoid(v)?;
            t.sum(s)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");

    let err = gradient_check(
        |t, v| {
            let y = t.scale(v, 2.5)?;
            let y = t.add_scalar(y, 1.0)?;
            t.sum(y)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");

    // Points at least 10·eps away from the kink at 0.3.
    let x = Tensor::vector(vec![-1.0, 0.2, 0.31, 0.9, 2.0]);
    let err = gradient_check(
        |t, v| {
            let y = t.max_const(v, 0.3)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn unary_primitives_match_finite_differences() {
    check_unary("neg", -2.0, 2.0, |t, x| t.neg(x));
    check_unary("sin", -3.0, 3.0, |t, x| t.sin(x));
    check_unary("cos", -3.0, 3.0, |t, x| t.cos(x));
    check_unary("exp", -2.0, 2.0, |t, x| t.exp(x));
    check_unary("log", 0.2, 3.0, |t, x| t.log(x));
    check_unary("sigmoid", -4.0, 4.0, |t, x| t.sigmoid(x));
    check_unary("softplus", -4.0, 4.0, |t, x| t.softplus(x));
    check_unary("sqrt", 0.2, 3.0, |t, x| t.sqrt(x));
    check_unary("square", -2.0, 2.0, |t, x| t.square(x));
    check_unary("scale", -2.0, 2.0, |t, x| t.scale(x, -1.7));
    check_unary("add_scalar", -2.0, 2.0, |t, x| t.add_scalar(x, 0.4));
    check_unary("max_const", 0.5, 2.0, |t, x| t.max_const(x, 0.0));
    check_unary("max_const(inactive)", -2.0, -0.5, |t, x| {
        let y = t.max_const(x, 0.0)?;
        t.add(y, x)
    });
    check_unary("leaky_relu", -2.0, 2.0, |t, x| {
        let y = t.add_scalar(x, 0.0)?;
        t.leaky_relu(y, 0.2)
    });
    check_unary("norm", -2.0, 2.0, |t, x| {
        let y = t.reshape(x, &[1, 3])?;
        t.norm_last(y)
    });
    check_unary("sum", -2.0, 2.0, |t, x| t.sum(x));
    check_unary("mean", -2.0, 2.0, |t, x| {
        let s = t.square(x)?;
        t.mean(s)
    });
    check_unary("pow(const exponent)", 0.2, 2.0, |t, x| {
        let e = t.scalar(2.7);
        t.pow(x, e)
    });
}

#[test]
fn binary_primitives_match_finite_differences() {
    check_binary("add", &[2, 3], &[3], (-2.0, 2.0), |t, a, b| t.add(a, b));
    check_binary("sub", &[2, 3], &[2, 1], (-2.0, 2.0), |t, a, b| t.sub(a, b));
    check_binary("mul", &[2, 3], &[1, 3], (-2.0, 2.0), |t, a, b| t.mul(a, b));
    check_binary("div", &[2, 3], &[2, 3], (0.5, 2.0), |t, a, b| t.div(a, b));
    check_binary("pow", &[3], &[3], (0.3, 2.0), |t, a, b| t.pow(a, b));
    check_binary("matmul", &[2, 3], &[3, 4], (-1.0, 1.0), |t, a, b| t.matmul(a, b));
    check_binary("concat", &[2, 3], &[2, 2], (-1.0, 1.0), |t, a, b| {
        let c = t.concat(&[a, b], 1)?;
        t.square(c)
    });
}

#[test]
fn elementwise_max_routes_gradient_to_larger_argument() {
    // Random points are tie-free with probability one; check smooth branches.
    check_binary("maximum", &[4], &[4], (-2.0, 2.0), |t, a, b| {
        let m = t.maximum(a, b)?;
        t.square(m)
    });
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = t.leaf(Tensor::vector(vec![1.0, 3.0]));
    let m = t.maximum(a, b).unwrap();
    let s = t.sum(m).unwrap();
    let g = t.backward(s).unwrap();
    // Tie at index 0 goes to the first argument.
    assert_eq!(g.wrt(a).data(), &[1.0, 0.0]);
    assert_eq!(g.wrt(b).data(), &[0.0, 1.0]);
}

#[test]
fn shape_primitives_match_finite_differences() {
    check_unary("reshape", -1.0, 1.0, |t, x| {
        let y = t.reshape(x, &[3, 1])?;
        t.square(y)
    });
    check_unary("broadcast", -1.0, 1.0, |t, x| {
        let y = t.reshape(x, &[1, 3])?;
        let y = t.broadcast_to(y, &[4, 3])?;
        t.sin(y)
    });
    check_unary("slice", -1.0, 1.0, |t, x| {
        let y = t.slice(x, 0, 1, 3)?;
        t.square(y)
    });
    check_unary("transpose", -1.0, 1.0, |t, x| {
        let y = t.reshape(x, &[3, 1])?;
        let y = t.transpose(y)?;
        let w = t.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        t.mul(y, w)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        let err = gradient_check(
            |t, v| {
                let s = t.sum_axis(v, axis)?;
                let s = t.square(s)?;
                t.sum(s)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "sum_axis {axis}: {err:e}");
        let err = gradient_check(
            |t, v| {
                let s = t.slice(v, axis, 1, 2)?;
                let s = t.sin(s)?;
                t.sum(s)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "slice {axis}: {err:e}");
    }
}

fn conv_case(stride: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(41 + stride as u64);
    let x = random_tensor(&mut rng, &[2, 3, 6, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let err_x = gradient_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(v, wv, stride, 1)?;
            weighted_sum(t, y)
        },
        &x,
        EPS,
    )
    .unwrap();
    let err_w = gradient_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, stride, 1)?;
            weighted_sum(t, y)
        },
        &w,
        EPS,
    )
    .unwrap();
    assert!(err_x < 1e-6 && err_w < 1e-6, "stride {stride}: {err_x:e} {err_w:e}");

    // The transposed convolution is differentiable in both arguments.
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(w.clone());
    let y = t.conv2d(xv, wv, stride, 1).unwrap();
    let gshape = t.shape(y).to_vec();
    let g = random_tensor(&mut rng, &gshape, -1.0, 1.0);
    let err_g = gradient_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d_transpose(v, wv, stride, 1, 6, 5)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &g,
        EPS,
    )
    .unwrap();
    let err_wt = gradient_check(
        |t, v| {
            let gv = t.constant(g.clone());
            let y = t.conv2d_transpose(gv, v, stride, 1, 6, 5)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &w,
        EPS,
    )
    .unwrap();
    assert!(err_g < 1e-6 && err_wt < 1e-6, "transpose stride {stride}: {err_g:e} {err_wt:e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    conv_case(1);
    conv_case(2);
}

#[test]
fn conv2d_matches_direct_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(xv, wv, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3, 3]);
    let at = |c: usize, i: isize, j: isize| -> f64 {
        if (0..5).contains(&i) && (0..5).contains(&j) {
            x.data()[(c * 5 + i as usize) * 5 + j as usize]
        } else {
            0.0
        }
    };
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                            s += wv * at(c, (oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        }
                    }
                }
                let got = t.value(y).data()[(o * 3 + oy) * 3 + ox];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_clear_frees_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a = random_tensor(&mut rng, &[16, 8], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[8, 4], -1.0, 1.0);
    let run = |tape: &mut Tape| {
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let c = tape.sin(c).unwrap();
        tape.value(c).clone()
    };
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let (r1, r2) = (run(&mut t1), run(&mut t2));
    assert!(r1.data().iter().zip(r2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(!t1.is_empty());
    t1.clear();
    assert_eq!(t1.len(), 0);
}

#[test]
fn parent_ids_precede_children() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.0));
    let y = t.sin(x).unwrap();
    let z = t.mul(y, x).unwrap();
    assert!(x.id() < y.id() && y.id() < z.id());
}

/// Two-layer tanh-free MLP written directly in loops, used as the finite-difference oracle.
fn mlp_loss_direct(w1: &[f64], b1: &[f64], w2: &[f64], x: &[f64], n: usize) -> f64 {
    let (din, hid) = (3, 5);
    let mut loss = 0.0;
    for r in 0..n {
        let mut out = 0.0;
        for h in 0..hid {
            let mut pre = b1[h];
            for i in 0..din {
                pre += x[r * din + i] * w1[i * hid + h];
            }
            out += pre.sin() * w2[h];
        }
        loss += out * out;
    }
    loss / n as f64
}

#[test]
fn two_layer_mlp_gradients_match_direct_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 4;
    let x = random_tensor(&mut rng, &[n, 3], -1.0, 1.0);
    let w1 = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let b1 = random_tensor(&mut rng, &[5], -1.0, 1.0);
    let w2 = random_tensor(&mut rng, &[5, 1], -1.0, 1.0);

    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let (w1v, b1v, w2v) = (t.leaf(w1.clone()), t.leaf(b1.clone()), t.leaf(w2.clone()));
    let h = t.matmul(xv, w1v).unwrap();
    let h = t.add(h, b1v).unwrap();
    let h = t.sin(h).unwrap();
    let o = t.matmul(h, w2v).unwrap();
    let o = t.square(o).unwrap();
    let loss = t.mean(o).unwrap();
    let g = t.backward(loss).unwrap();

    let base = [w1.data().to_vec(), b1.data().to_vec(), w2.data().to_vec()];
    let analytic = [g.wrt(w1v), g.wrt(b1v), g.wrt(w2v)];
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..base[p].len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[p][i] += EPS;
            minus[p][i] -= EPS;
            let fp = mlp_loss_direct(&plus[0], &plus[1], &plus[2], x.data(), n);
            let fm = mlp_loss_direct(&minus[0], &minus[1], &minus[2], x.data(), n);
            let numeric = (fp - fm) / (2.0 * EPS);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "param {p}[{i}]: analytic {a} numeric {numeric}");
        }
    }
    let direct = mlp_loss_direct(w1.data(), b1.data(), w2.data(), x.data(), n);
    assert!((t.value(loss).item().unwrap() - direct).abs() < 1e-12);
}

#[test]
fn seeded_backward_is_a_vector_jacobian_product() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let y = t.sin(x).unwrap();
    let seed = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let g = t.backward_with_seed(y, seed.clone()).unwrap().wrt(x);
    for i in 0..3 {
        let expect = seed.data()[i] * [0.1f64, 0.2, 0.3][i].cos();
        assert!((g.data()[i] - expect).abs() < 1e-15);
    }
}
