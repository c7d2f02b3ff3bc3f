use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var, Error> {
    let n = t.value(v).len();
    let w: Vec<f64> = (0..n).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let shape = t.shape(v).to_vec();
    let w = t.constant(&shape, w)?;
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn vec_of(t: &mut Tape, shape: &[usize], v: &[f64]) -> Var {
    t.constant(shape, v.to_vec()).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = vec_of(&mut t, &[2], &[1.0, 2.0]);
    let b = vec_of(&mut t, &[2], &[3.0, 4.0]);
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s), &[4.0, 6.0]);
    let x = vec_of(&mut t, &[3], &[-1.0, 0.0, 2.0]);
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
    let z = vec_of(&mut t, &[1], &[0.0]);
    let sg = t.sigmoid(z);
    assert_eq!(t.value(sg), &[0.5]);
}

#[test]
fn broadcast_rules() {
    let mut t = Tape::new();
    let a = vec_of(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = vec_of(&mut t, &[3], &[10.0, 20.0, 30.0]);
    let s = t.add(a, b).unwrap();
    assert_eq!(t.shape(s), &[2, 3]);
    assert_eq!(t.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let b1 = vec_of(&mut t, &[1, 3], &[1.0, 1.0, 1.0]);
    assert!(t.mul(a, b1).is_ok());
    let bad = vec_of(&mut t, &[2], &[1.0, 1.0]);
    match t.add(a, bad) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}")
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = vec_of(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let i = vec_of(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let p = t.matmul(a, i).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
    let x = vec_of(&mut t, &[1, 1], &[2.0]);
    let y = vec_of(&mut t, &[1, 1], &[3.0]);
    let p = t.matmul(x, y).unwrap();
    assert_eq!(t.value(p), &[6.0]);
    let bad = vec_of(&mut t, &[3, 1], &[0.0; 3]);
    assert!(matches!(t.matmul(a, bad), Err(Error::Dimension(_))));
}

#[test]
fn matmul_grad_of_sum_matches_central_differences() {
    let a = Tensor::from_slice(&[2, 2], &[1.0, 1.0, 1.0, 1.0])
        .unwrap()
        .with_grad();
    let b = Tensor::from_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var, Error> {
        let p = t.matmul(v[0], v[1])?;
        Ok(t.sum_all(p))
    };
    let mut tape = Tape::new();
    let va = tape.input(&a);
    let vb = tape.input(&b);
    let loss = f(&mut tape, &[va, vb]).unwrap();
    let g = tape.backward(loss).unwrap();
    // oracle: central differences with h = 1e-6
    let h = 1e-6;
    let mut numeric = vec![0.0; 4];
    for (c, n) in numeric.iter_mut().enumerate() {
        let eval = |delta: f64| {
            let mut a2 = a.clone();
            a2.data_mut()[c] += delta;
            let mut t = Tape::inference();
            let x = t.input(&a2);
            let y = t.input(&b);
            let l = f(&mut t, &[x, y]).unwrap();
            t.value(l)[0]
        };
        *n = (eval(h) - eval(-h)) / (2.0 * h);
    }
    assert_close(&numeric, &[1.0, 1.0, 1.0, 1.0], 1e-8);
    assert_close(g.wrt(va).unwrap(), &numeric, 1e-8);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = vec_of(&mut t, &[2], &[0.0, 0.0]);
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s), &[0.5, 0.5]);
    let x = vec_of(&mut t, &[2], &[0.0, 3f64.ln()]);
    let s = t.softmax(x, 0).unwrap();
    assert_close(t.value(s), &[0.25, 0.75], 1e-15);
    assert!(t.softmax(x, 1).is_err());
}

#[test]
fn softmax_shift_invariance_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for axis in 0..3 {
        let x = random(&[3, 4, 5], &mut rng);
        let mut t = Tape::new();
        let v = t.input(&x);
        let s = t.softmax(v, axis).unwrap();
        let shifted = t.add_scalar(v, 17.25);
        let s2 = t.softmax(shifted, axis).unwrap();
        assert_close(t.value(s), t.value(s2), 1e-9);
        let sums = t.reduce(Reduce::Sum, s, &[axis]).unwrap();
        for &v in t.value(sums) {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn conv3d_identity_kernel_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 3, 4, 5], &mut rng);
    let mut t = Tape::new();
    let vx = t.input(&x);
    let w = vec_of(&mut t, &[1, 1, 1, 1, 1], &[1.0]);
    let b = vec_of(&mut t, &[1], &[0.0]);
    let y = t.conv3d(vx, w, Some(b), [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(t.value(y), x.data());
    assert_eq!(t.shape(y), x.shape());
}

#[test]
fn conv3d_is_linear_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x1 = random(&[2, 4, 4, 4], &mut rng);
    let x2 = random(&[2, 4, 4, 4], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let (a, b) = (0.7, -1.3);
    let mut t = Tape::new();
    let v1 = t.input(&x1);
    let v2 = t.input(&x2);
    let vw = t.input(&w);
    let s1 = t.scale(v1, a);
    let s2 = t.scale(v2, b);
    let mix = t.add(s1, s2).unwrap();
    let lhs = t.conv3d(mix, vw, None, [1, 2, 1], [1, 1, 0]).unwrap();
    let c1 = t.conv3d(v1, vw, None, [1, 2, 1], [1, 1, 0]).unwrap();
    let c2 = t.conv3d(v2, vw, None, [1, 2, 1], [1, 1, 0]).unwrap();
    let c1 = t.scale(c1, a);
    let c2 = t.scale(c2, b);
    let rhs = t.add(c1, c2).unwrap();
    assert_close(t.value(lhs), t.value(rhs), 1e-12);
}

#[test]
fn conv3d_output_shape_and_fit_error() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 8, 32, 32], vec![0.0; 8 * 32 * 32]).unwrap();
    let w = t.constant(&[8, 1, 3, 3, 3], vec![0.0; 8 * 27]).unwrap();
    let y = t.conv3d(x, w, None, [1, 2, 2], [1, 1, 1]).unwrap();
    assert_eq!(t.shape(y), &[8, 8, 16, 16]);
    let tiny = t.constant(&[1, 1, 1, 1], vec![0.0]).unwrap();
    assert!(matches!(
        t.conv3d(tiny, w, None, [1, 1, 1], [0, 0, 0]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn conv3d_gradcheck_random_two_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 4, 4, 4], &mut rng).with_grad();
    let w = random(&[2, 2, 3, 3, 3], &mut rng).with_grad();
    let b = random(&[2], &mut rng).with_grad();
    let r = check_inputs(
        "conv3d",
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])?;
            weighted_sum(t, y)
        },
        &[x, w, b],
        H,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let c = t.constant(&[2, 2, 2, 2], vec![7.0; 16]).unwrap();
    let p = t.avg_pool_global(c).unwrap();
    assert_eq!(t.shape(p), &[2]);
    assert_eq!(t.value(p), &[7.0, 7.0]);
    let x = vec_of(&mut t, &[3], &[1.0, 2.0, 3.0]);
    let s = t.reduce(Reduce::Sum, x, &[0]).unwrap();
    assert_eq!(t.value(s), &[6.0]);
    let ones = t.constant(&[2, 3], vec![1.0; 6]).unwrap();
    let m = t.reduce(Reduce::Mean, ones, &[0]).unwrap();
    assert_eq!(t.shape(m), &[3]);
    assert_eq!(t.value(m), &[1.0, 1.0, 1.0]);
    let same = t.reduce(Reduce::Sum, ones, &[]).unwrap();
    assert_eq!(same, ones);
    let y = vec_of(&mut t, &[2, 2], &[1.0, 5.0, 3.0, 2.0]);
    let mx = t.reduce(Reduce::Max, y, &[1]).unwrap();
    assert_eq!(t.value(mx), &[5.0, 3.0]);
}

#[test]
fn backward_examples() {
    let x = Tensor::scalar(3.0).with_grad();
    let mut t = Tape::new();
    let v = t.input(&x);
    let sq = t.mul(v, v).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[6.0]);

    let mut t = Tape::new();
    let x = t.leaf(&[1], vec![2.0], true).unwrap();
    let y = t.leaf(&[1], vec![5.0], true).unwrap();
    let p = t.mul(x, y).unwrap();
    let g = t.backward(p).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[5.0]);
    assert_eq!(g.wrt(y).unwrap(), &[2.0]);
}

#[test]
fn repeated_backward_accumulates_into_tensor() {
    let mut x = Tensor::scalar(3.0).with_grad();
    let mut t = Tape::new();
    let v = t.input(&x);
    let sq = t.mul(v, v).unwrap();
    for _ in 0..2 {
        let g = t.backward(sq).unwrap();
        x.accumulate_grad(g.wrt(v).unwrap()).unwrap();
    }
    assert_eq!(x.grad().unwrap(), &[12.0]);
}

#[test]
fn backward_needs_scalar_and_skips_disconnected() {
    let mut t = Tape::new();
    let a = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let lonely = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    let s = t.sum_all(a);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(lonely).is_none());
    assert_eq!(g.wrt(a).unwrap(), &[1.0, 1.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let d = t.detach(a);
    let p = t.mul(a, d).unwrap();
    let s = t.sum_all(p);
    let g = t.backward(s).unwrap();
    // d(a * stopgrad(a))/da = stopgrad(a)
    assert_eq!(g.wrt(a).unwrap(), &[1.0, 2.0]);
}

#[test]
fn finite_diff_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[5], &mut rng);
    let lin = finite_diff_check("sum", |t, v| Ok(t.sum_all(v)), &x, H, TOL).unwrap();
    assert!(lin.max_rel_error < 1e-10 && lin.passed);
    let sig = finite_diff_check(
        "sigmoid",
        |t, v| {
            let s = t.sigmoid(v);
            Ok(t.sum_all(s))
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(sig.passed, "{sig:?}");
}

struct DoubledSquare;

impl CustomBackward for DoubledSquare {
    fn name(&self) -> &str {
        "doubled_square"
    }
    fn backward(&self, g: &[f64], inputs: &[&[f64]], _out: &[f64]) -> Vec<Vec<f64>> {
        // true derivative is 2x; report 4x
        vec![inputs[0].iter().zip(g).map(|(x, d)| 4.0 * x * d).collect()]
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let x = Tensor::from_slice(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let r = finite_diff_check(
        "corrupt",
        |t, v| {
            let val: Vec<f64> = t.value(v).iter().map(|a| a * a).collect();
            let sq = t.custom(&[v], &[3], val, Box::new(DoubledSquare))?;
            Ok(t.sum_all(sq))
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(!r.passed);
}

#[test]
fn nonfinite_function_is_a_numeric_error() {
    let x = Tensor::from_slice(&[1], &[-1.0]).unwrap();
    let r = finite_diff_check("log", |t, v| Ok(t.log(v)), &x, H, TOL);
    assert!(matches!(r, Err(Error::Numeric(_))));
}

/// Every differentiable op on three random shapes.
#[test]
fn every_op_passes_gradcheck_on_three_shapes() {
    type Case = (
        &'static str,
        Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, Error>>,
        bool,
    );
    let cases: Vec<Case> = vec![
        (
            "add",
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "sub",
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "mul",
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "div",
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                weighted_sum(t, y)
            }),
            true,
        ),
        (
            "relu",
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "sigmoid",
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "exp",
            Box::new(|t, v| {
                let y = t.exp(v[0]);
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "log",
            Box::new(|t, v| {
                let y = t.log(v[1]);
                weighted_sum(t, y)
            }),
            true,
        ),
        (
            "scale",
            Box::new(|t, v| {
                let y = t.scale(v[0], -2.5);
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "softmax",
            Box::new(|t, v| {
                let y = t.softmax(v[0], 0)?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "row_norm",
            Box::new(|t, v| {
                let y = t.row_norm(v[0], 1e-5)?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "l2_normalize",
            Box::new(|t, v| {
                let y = t.l2_normalize(v[0]);
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "max",
            Box::new(|t, v| {
                let y = t.reduce(Reduce::Max, v[0], &[0])?;
                weighted_sum(t, y)
            }),
            false,
        ),
        (
            "mean",
            Box::new(|t, v| {
                let y = t.reduce(Reduce::Mean, v[0], &[0])?;
                weighted_sum(t, y)
            }),
            false,
        ),
    ];
    let shapes: [&[usize]; 3] = [&[3, 4], &[2, 3, 2], &[5, 1, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, f, pos) in &cases {
        for s in shapes {
            let a = random(s, &mut rng).with_grad();
            let b = if *pos {
                positive(s, &mut rng)
            } else {
                random(s, &mut rng)
            }
            .with_grad();
            let r = check_inputs(name, f, &[a, b], H, TOL).unwrap();
            assert!(r.passed, "{name} on {s:?}: {r:?}");
        }
    }
}

#[test]
fn structural_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (m, k, n) in [(2, 3, 4), (1, 5, 2), (4, 2, 3)] {
        let a = random(&[m, k], &mut rng).with_grad();
        let b = random(&[k, n], &mut rng).with_grad();
        let r = check_inputs(
            "matmul",
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y)
            },
            &[a.clone(), b],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "transpose",
            |t, v| {
                let y = t.transpose(v[0])?;
                weighted_sum(t, y)
            },
            &[a],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
    for rows in [2, 3, 5] {
        let x = random(&[rows, 2, 3], &mut rng).with_grad();
        let w = random(&[rows], &mut rng).with_grad();
        let r = check_inputs(
            "mul_rows",
            |t, v| {
                let y = t.mul_rows(v[0], v[1])?;
                weighted_sum(t, y)
            },
            &[x.clone(), w.clone()],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "add_rows",
            |t, v| {
                let y = t.add_rows(v[0], v[1])?;
                weighted_sum(t, y)
            },
            &[x.clone(), w],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let y2 = random(&[rows, 1, 3], &mut rng).with_grad();
        let r = check_inputs(
            "concat",
            |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                weighted_sum(t, y)
            },
            &[x.clone(), y2],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "narrow",
            |t, v| {
                let y = t.narrow(v[0], 2, 1, 2)?;
                weighted_sum(t, y)
            },
            std::slice::from_ref(&x),
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "gather_rows",
            |t, v| {
                let y = t.gather_rows(v[0], &[rows - 1, 0, 0])?;
                weighted_sum(t, y)
            },
            std::slice::from_ref(&x),
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "scatter_rows",
            |t, v| {
                let y = t.scatter_rows(v[0], &(0..rows).rev().collect::<Vec<_>>(), rows + 2)?;
                weighted_sum(t, y)
            },
            std::slice::from_ref(&x),
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_inputs(
            "reshape_sum_axes",
            |t, v| {
                let y = t.reshape(v[0], &[rows, 6])?;
                let y = t.reduce(Reduce::Sum, y, &[0])?;
                weighted_sum(t, y)
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn conv3d_gradcheck_strided_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for (cin, input, cout, stride) in [
        (1, [2, 4, 4], 2, [1, 2, 2]),
        (2, [3, 3, 5], 1, [2, 1, 2]),
        (3, [2, 2, 2], 2, [1, 1, 1]),
    ] {
        let x = random(&[cin, input[0], input[1], input[2]], &mut rng).with_grad();
        let w = random(&[cout, cin, 3, 3, 3], &mut rng).with_grad();
        let r = check_inputs(
            "conv3d",
            |t, v| {
                let y = t.conv3d(v[0], v[1], None, stride, [1, 1, 1])?;
                weighted_sum(t, y)
            },
            &[x, w],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn inference_tape_records_no_gradients() {
    let x = Tensor::scalar(2.0).with_grad();
    let mut t = Tape::inference();
    let v = t.input(&x);
    assert!(!t.requires_grad(v));
    let y = t.mul(v, v).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.wrt(v).is_none());
}
