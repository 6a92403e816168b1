use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar through fixed pseudo-random weights so
/// every output coordinate contributes to the checked gradient.
fn project(g: &mut Graph<'_>, out: Var) -> Result<Var, NumericsError> {
    let n = g.value(out).len();
    let shape = g.shape(out).to_vec();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

#[test]
fn matmul_identity_and_selector() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let err = check_op_gradients(
        &[a, b],
        |g, v| {
            let out = g.matmul(v[0], v[1])?;
            project(g, out)
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!(g.value(y).is_finite());
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);

    let x = g.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    for (v, e) in g
        .value(y)
        .data()
        .iter()
        .zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0])
    {
        assert!((v - e).abs() < 1e-15);
    }
}

#[test]
fn softmax_invalid_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        g.softmax(x, 2),
        Err(NumericsError::InvalidAxis {
            axis: 2,
            rank: 2,
            ..
        })
    ));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::filled(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::vector(vec![5.0; 4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let gain = g.constant(Tensor::filled(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    // var = 1, so output = ±1/sqrt(1 + eps)
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((d[0] - expected).abs() < 1e-12 && (d[1] + expected).abs() < 1e-12);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let m = g.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap());
    let mean = g.mean_axis(m, 0).unwrap();
    assert_eq!(g.value(mean).data(), &[4.0, 6.0]);
    assert_eq!(g.value(mean).shape(), &[2]);

    let v = g.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
    let a = g.scale(v, 0.33);
    let b = g.scale(v, 0.33);
    let c = g.scale(v, 0.33);
    let ab = g.add(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    for (o, i) in g.value(abc).data().iter().zip([1.0, -2.0, 3.5]) {
        assert!((o - 0.99 * i).abs() < 1e-12);
    }

    let w = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(v, w).is_err());
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    type Build = fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumericsError>;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("transpose", vec![vec![3, 2]], |g, v| g.transpose(v[0])),
        ("reshape", vec![vec![3, 2]], |g, v| g.reshape(v[0], &[1, 6])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("add_row", vec![vec![3, 2], vec![2]], |g, v| {
            g.add_row(v[0], v[1])
        }),
        ("scale", vec![vec![4]], |g, v| Ok(g.scale(v[0], -0.7))),
        ("add_scalar", vec![vec![4]], |g, v| {
            Ok(g.add_scalar(v[0], 2.0))
        }),
        ("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![vec![5]], |g, v| Ok(g.sigmoid(v[0]))),
        ("log_sigmoid", vec![vec![5]], |g, v| Ok(g.log_sigmoid(v[0]))),
        ("softmax0", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
        ("softmax1", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("softmax_mid", vec![vec![2, 3, 2]], |g, v| {
            g.softmax(v[0], 1)
        }),
        ("log_softmax", vec![vec![3, 4]], |g, v| {
            g.log_softmax(v[0], 1)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("mean_axis", vec![vec![3, 4]], |g, v| g.mean_axis(v[0], 1)),
        ("mean_all", vec![vec![3, 4]], |g, v| Ok(g.mean_all(v[0]))),
        ("slice_cols", vec![vec![3, 5]], |g, v| {
            g.slice_cols(v[0], 1, 4)
        }),
        ("concat_cols", vec![vec![2, 2], vec![2, 3]], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("gather_rows", vec![vec![4, 2]], |g, v| {
            g.gather_rows(v[0], &[3, 0, 3])
        }),
        ("pick", vec![vec![3, 3]], |g, v| g.pick(v[0], &[0, 4, 4, 8])),
        (
            "sampled_logits",
            vec![vec![2, 3], vec![3, 5], vec![5]],
            |g, v| g.sampled_logits(v[0], v[1], v[2], &[vec![0, 4, 4], vec![2, 1, 3]]),
        ),
        ("weighted_bce", vec![vec![4]], |g, v| {
            let p = g.sigmoid(v[0]);
            Ok(
                g.weighted_bce(p, &[1.0, 0.0, 1.0, 0.0], &[2.0, 0.5, 1.0, 1.5])?
                    .0,
            )
        }),
    ];
    for (name, shapes, build) in cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let err = check_op_gradients(
            &inputs,
            |g, v| {
                let out = build(g, v)?;
                project(g, out)
            },
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn shared_input_accumulates_both_paths() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.5, -2.0]));
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x).unwrap();
    let s = g.add(a, b).unwrap();
    let loss = g.sum_all(s);
    let grads = g.backward(loss).unwrap();
    // d/dx (3x + x²) = 3 + 2x
    assert_eq!(grads.get(x).unwrap(), &[6.0, -1.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.backward(x),
        Err(NumericsError::NotScalar { .. })
    ));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0]));
    let c = g.constant(Tensor::vector(vec![2.0]));
    let p = g.mul(x, c).unwrap();
    let loss = g.sum_all(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[2.0]);
}

#[test]
fn faulty_layer_norm_backward_is_detectable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[2, 4]);
    let gain = random_tensor(&mut rng, &[4]);
    let mut g = Graph::with_fault(Some(Fault::LayerNormBackward));
    let xv = g.variable(x.clone());
    let gv = g.constant(gain.clone());
    let bv = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let loss = project(&mut g, y).unwrap();
    let faulty = g.backward(loss).unwrap().get(xv).unwrap().to_vec();

    let mut g = Graph::new();
    let xv = g.variable(x);
    let gv = g.constant(gain);
    let bv = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let loss = project(&mut g, y).unwrap();
    let correct = g.backward(loss).unwrap().get(xv).unwrap().to_vec();
    let diff = faulty
        .iter()
        .zip(&correct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-3);
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        spread in 0.1f64..500.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        for axis in 0..2 {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_all(y);
            let slices = if axis == 0 { cols } else { rows };
            let total = g.value(s).data()[0];
            prop_assert!((total - slices as f64).abs() < 1e-12 * slices as f64);
            let y = g.value(y).clone();
            if axis == 1 {
                for r in 0..rows {
                    let sum: f64 = y.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(
        d in 2usize..16,
        seed in any::<u64>(),
        offset in -100.0f64..100.0,
        spread in 0.5f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..d).map(|_| offset + rng.random_range(-spread..spread)).collect();
        let mean_in = data.iter().sum::<f64>() / d as f64;
        let var_in = data.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / d as f64;
        prop_assume!(var_in > 0.1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(data));
        let gain = g.constant(Tensor::filled(&[d], 1.0));
        let bias = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-9);
        // eps shrinks the variance by var/(var+eps)
        prop_assert!((var - 1.0).abs() < 1e-6 + 1e-5 / var_in);
    }
}
