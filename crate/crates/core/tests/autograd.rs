//! Finite-difference checks for every tape primitive, plus algebraic
//! examples and properties of the forward values.

use omni_moe::gradcheck::{check, STEP};
use omni_moe::tensor::{Tape, Tensor, Var};
use omni_moe::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|x| x.abs() + 0.5)
}

/// `sum(w * y)` with fixed pseudo-random weights, so every output element
/// contributes a distinct coefficient.
fn reduce(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, 991 + shape.iter().product::<usize>() as u64));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = check(inputs, STEP, f).unwrap();
    assert!(
        r.max_rel_err < tol,
        "{name}: max rel err {:e} at {:?} (analytic {}, numeric {})",
        r.max_rel_err,
        r.worst,
        r.analytic[r.worst.0][r.worst.1],
        r.numeric[r.worst.0][r.worst.1]
    );
}

#[test]
fn matmul_gradient() {
    assert_grad(
        "matmul",
        &[random(&[4, 3], 1), random(&[3, 2], 2)],
        1e-6,
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            reduce(t, y)
        },
    );
}

#[test]
fn add_and_bias_gradients() {
    assert_grad(
        "add",
        &[random(&[3, 4], 3), random(&[3, 4], 4)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            reduce(t, y)
        },
    );
    assert_grad(
        "add_bias",
        &[random(&[3, 4], 5), random(&[4], 6)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            reduce(t, y)
        },
    );
}

#[test]
fn mul_and_scale_gradients() {
    assert_grad(
        "mul",
        &[random(&[2, 5], 7), random(&[2, 5], 8)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            reduce(t, y)
        },
    );
    assert_grad("scale", &[random(&[2, 5], 9)], PRIMITIVE_TOL, |t, v| {
        let y = t.scale(v[0], -2.5);
        reduce(t, y)
    });
}

#[test]
fn pointwise_gradients() {
    assert_grad(
        "gelu",
        &[random(&[3, 3], 10).map(|x| 3.0 * x)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.gelu(v[0]);
            reduce(t, y)
        },
    );
    assert_grad("log", &[positive(&[3, 3], 11)], PRIMITIVE_TOL, |t, v| {
        let y = t.log(v[0]);
        reduce(t, y)
    });
    assert_grad("exp", &[random(&[3, 3], 12)], PRIMITIVE_TOL, |t, v| {
        let y = t.exp(v[0]);
        reduce(t, y)
    });
}

#[test]
fn gather_scatter_gradients() {
    assert_grad(
        "gather_rows",
        &[random(&[4, 3], 13)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
            reduce(t, y)
        },
    );
    assert_grad(
        "scatter_add_rows",
        &[random(&[5, 3], 14)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.scatter_add_rows(v[0], &[1, 1, 0, 3, 1], 4)?;
            reduce(t, y)
        },
    );
}

#[test]
fn structural_gradients() {
    assert_grad(
        "mask_fill",
        &[random(&[2, 3], 15)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.mask_fill(v[0], &[true, false, false, true, false, true], -7.0)?;
            reduce(t, y)
        },
    );
    assert_grad(
        "transpose",
        &[random(&[2, 3], 16)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.transpose(v[0])?;
            reduce(t, y)
        },
    );
    assert_grad("reshape", &[random(&[2, 3], 17)], PRIMITIVE_TOL, |t, v| {
        let y = t.reshape(v[0], &[3, 2])?;
        reduce(t, y)
    });
    assert_grad("sum", &[random(&[2, 3], 18)], PRIMITIVE_TOL, |t, v| {
        let y = t.exp(v[0]);
        Ok(t.sum(y))
    });
    assert_grad("mean", &[random(&[2, 3], 19)], PRIMITIVE_TOL, |t, v| {
        let y = t.exp(v[0]);
        Ok(t.mean(y))
    });
}

#[test]
fn softmax_gradients() {
    assert_grad(
        "softmax",
        &[random(&[3, 4], 20).map(|x| 2.0 * x)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.softmax(v[0])?;
            reduce(t, y)
        },
    );
    assert_grad(
        "log_softmax",
        &[random(&[3, 4], 21).map(|x| 2.0 * x)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.log_softmax(v[0])?;
            reduce(t, y)
        },
    );
}

#[test]
fn layer_norm_gradient() {
    let inputs = [random(&[3, 5], 22), random(&[5], 23), random(&[5], 24)];
    assert_grad("layer_norm", &inputs, PRIMITIVE_TOL, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        reduce(t, y)
    });
}

#[test]
fn row_gating_gradients() {
    assert_grad(
        "mul_rows",
        &[random(&[3, 4], 25), random(&[3], 26)],
        PRIMITIVE_TOL,
        |t, v| {
            let y = t.mul_rows(v[0], v[1])?;
            reduce(t, y)
        },
    );
    assert_grad("pick", &[random(&[3, 4], 27)], PRIMITIVE_TOL, |t, v| {
        let y = t.pick(v[0], &[3, 0, 3])?;
        reduce(t, y)
    });
}

#[test]
fn attention_gradient() {
    let inputs = [
        random(&[3, 4], 28),
        random(&[3, 4], 29),
        random(&[3, 4], 30),
    ];
    assert_grad("attention", &inputs, 1e-4, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2, &[(0, 3)], &[true; 3])?;
        reduce(t, y)
    });
    let inputs = [
        random(&[5, 4], 31),
        random(&[5, 4], 32),
        random(&[5, 4], 33),
    ];
    assert_grad("attention (segments, masked key)", &inputs, 1e-4, |t, v| {
        let y = t.attention(
            v[0],
            v[1],
            v[2],
            2,
            &[(0, 2), (2, 3)],
            &[true, true, true, false, true],
        )?;
        reduce(t, y)
    });
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let i = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = t.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let y = t.matmul(i, b).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let c = t.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let y = t.matmul(a, c).unwrap();
    assert_eq!(t.value(y).data(), &[11.0]);
    assert!(t.matmul(a, a).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap());
    let y = t.softmax(x).unwrap();
    let v = t.value(y).data().to_vec();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert_eq!(v[2], 1.0);
    assert!(v[3] >= 0.0 && v[3] < 1e-300);

    let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let y = t.softmax(x).unwrap();
    let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
    for (j, &p) in t.value(y).data().iter().enumerate() {
        assert!((p - ((j + 1) as f64).exp() / z).abs() < 1e-15);
    }
    let expected = [0.09003, 0.24473, 0.66524];
    for (p, e) in t.value(y).data().iter().zip(expected) {
        assert!((p - e).abs() < 5e-6);
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(
        Tensor::vector(vec![f64::NAN, 0.0])
            .reshaped(&[1, 2])
            .unwrap(),
    );
    assert!(t.softmax(x).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let g = t.leaf(Tensor::vector(vec![1.0; 3]));
    let b = t.leaf(Tensor::vector(vec![0.0; 3]));
    let x = t.leaf(Tensor::from_rows(&[vec![2.0, 2.0, 2.0]]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g = t.leaf(Tensor::vector(vec![1.0; 2]));
    let b = t.leaf(Tensor::vector(vec![0.0; 2]));
    let x = t.leaf(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    assert!(t.layer_norm(x, g, b, 0.0).is_err());
}

#[test]
fn gather_then_scatter_doubles_repeated_row() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let g = t.gather_rows(x, &[0, 0]).unwrap();
    let s = t.scatter_add_rows(g, &[0, 0], 3).unwrap();
    assert_eq!(t.value(s).data(), &[2.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(t.gather_rows(x, &[3]).is_err());
    assert!(t.scatter_add_rows(g, &[0, 3], 3).is_err());
}

#[test]
fn gelu_at_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::vector(vec![0.0]));
    let y = t.gelu(x);
    assert_eq!(t.value(y).data(), &[0.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let w = t.leaf(random(&[2, 3], 40));
    let s = t.sum(w);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[1.0; 6]);

    let x = [0.5, -1.5, 2.0];
    let mut t = Tape::<f64>::new();
    let w = t.leaf(random(&[2, 3], 41));
    let xv = t.constant(Tensor::new(vec![3, 1], x.to_vec()).unwrap());
    let y = t.matmul(w, xv).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[x, x].concat()[..]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let w = t.leaf(random(&[2, 2], 42));
    let y = t.exp(w);
    assert!(t.backward(y).is_err());
}

#[test]
fn one_element_attention_returns_its_value() {
    let mut t = Tape::<f64>::new();
    let q = t.leaf(random(&[1, 4], 43));
    let k = t.leaf(random(&[1, 4], 44));
    let v = t.leaf(random(&[1, 4], 45));
    let y = t.attention(q, k, v, 2, &[(0, 1)], &[true]).unwrap();
    assert_eq!(t.value(y).data(), t.value(v).data());
}

#[test]
fn identical_tokens_attend_identically() {
    let row = random(&[1, 4], 46).into_data();
    let x = Tensor::new(vec![3, 4], row.repeat(3)).unwrap();
    let mut t = Tape::<f64>::new();
    let q = t.leaf(x.clone());
    let y = t.attention(q, q, q, 2, &[(0, 3)], &[true; 3]).unwrap();
    let out = t.value(y);
    assert_eq!(out.row(0), out.row(1));
    assert_eq!(out.row(1), out.row(2));
}

fn integer_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(f64::from), rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3, 4], data).unwrap());
        let y = t.softmax(x).unwrap();
        for r in 0..3 {
            let row = t.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn gather_and_scatter_are_adjoint(
        x in integer_matrix(5, 3),
        g in integer_matrix(4, 3),
        idx in prop::collection::vec(0usize..5, 4),
    ) {
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(Tensor::new(vec![5, 3], x.clone()).unwrap());
        let gv = t.leaf(Tensor::new(vec![4, 3], g.clone()).unwrap());
        let gathered = t.gather_rows(xv, &idx).unwrap();
        let scattered = t.scatter_add_rows(gv, &idx, 5).unwrap();
        let lhs: f64 = t.value(scattered).data().iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = t.value(gathered).data().iter().zip(&g).map(|(a, b)| a * b).sum();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(random(&[3, 4], seed));
            let b = t.leaf(random(&[4, 2], seed + 1));
            let y = t.matmul(a, b).unwrap();
            let y = t.softmax(y).unwrap();
            let y = t.log(y);
            let s = t.mean(y);
            let v = t.value(s).item();
            let g = t.backward(s).unwrap();
            (v.to_bits(), g.wrt(a).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
