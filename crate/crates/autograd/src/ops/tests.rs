use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{check_inputs, finite_difference_check, Error, Graph, Result, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// `sum(y * w)` with a fixed random `w`, so no op gets a trivially zero gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = random(g.value(y).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Runs the central-difference check on `TRIALS` random input sets.
fn check_op(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let err = check_inputs(
            || Graph::training(trial),
            |g, vs| {
                let y = op(g, vs)?;
                weighted_sum(g, y, trial)
            },
            &inputs,
            EPS,
        );
        assert!(err < TOL, "{name}: trial {trial} relative error {err}");
    }
}

#[test]
fn gradient_check_every_op() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op("pointwise_conv1d", &[&[5, 3], &[3, 4]], |g, v| g.pointwise_conv1d(v[0], v[1]));
    check_op("transpose", &[&[3, 2]], |g, v| g.transpose(v[0]));
    check_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op("add_broadcast", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]));
    check_op("sub_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("mul_broadcast", &[&[4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[&[3, 2]], |g, v| g.scale(v[0], -1.7));
    check_op("sigmoid", &[&[3, 4]], |g, v| g.sigmoid(v[0]));
    check_op("two_sigmoid", &[&[3, 4]], |g, v| g.two_sigmoid(v[0]));
    check_op("swish", &[&[3, 4]], |g, v| g.swish(v[0]));
    check_op("relu", &[&[3, 4]], |g, v| g.relu(v[0]));
    check_op("exp", &[&[3, 4]], |g, v| g.exp(v[0]));
    check_op("tanh", &[&[3, 4]], |g, v| g.tanh(v[0]));
    check_op("ln", &[&[3, 4]], |g, v| {
        let e = g.exp(v[0])?;
        g.ln(e)
    });
    check_op("glu", &[&[3, 6]], |g, v| g.glu(v[0]));
    check_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]));
    check_op("log_softmax", &[&[3, 5]], |g, v| g.log_softmax(v[0]));
    check_op("logsumexp", &[&[3, 5]], |g, v| g.logsumexp(v[0]));
    check_op("layer_norm", &[&[3, 6]], |g, v| g.layer_norm(v[0]));
    check_op("batch_norm", &[&[6, 3]], |g, v| Ok(g.batch_norm(v[0])?.0));
    check_op("depthwise_conv1d", &[&[6, 3], &[3, 3]], |g, v| g.depthwise_conv1d(v[0], v[1]));
    check_op("conv2d", &[&[7, 5, 2], &[3, 3, 3, 2]], |g, v| g.conv2d(v[0], v[1], (2, 2), (1, 1)));
    check_op("dropout", &[&[4, 5]], |g, v| g.dropout(v[0], 0.3));
    check_op("embedding", &[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    check_op("concat", &[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check_op("concat_axis0", &[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
    check_op("slice", &[&[3, 6]], |g, v| g.slice(v[0], 1, 2, 5));
    check_op("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], vec![2, 6]));
    check_op("sum", &[&[3, 4]], |g, v| g.sum(v[0]));
    check_op("mean", &[&[3, 4]], |g, v| g.mean(v[0]));
    check_op("sum_axis0", &[&[3, 4]], |g, v| g.sum_axis0(v[0]));
    check_op("reparameterize", &[&[4], &[4]], |g, v| {
        let eps = Tensor::vector(vec![0.3, -1.2, 0.8, 2.0]);
        g.reparameterize(v[0], v[1], &eps)
    });
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_inner_dim_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { kind: "matmul", .. })));
}

#[test]
fn broadcast_only_on_leading_axes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![3, 4]));
    let b = g.constant(Tensor::zeros(vec![3]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn logsumexp_is_shift_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = g.logsumexp(x).unwrap();
    // max + ln(Σ exp(x - max)) = 1000 + ln 2
    assert!((g.value(y).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random(&[4, 7], &mut rng).map(|v| v * 10.0);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let s = g.softmax(xv).unwrap();
        for row in g.value(s).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ln = g.layer_norm(xv).unwrap();
        for row in g.value(ln).rows() {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_two_sigmoid_at_zero() {
    let mut g = Graph::<f64>::new();
    let r = g.param(Tensor::scalar(0.0));
    let y = g.two_sigmoid(r).unwrap();
    g.backward(y).unwrap();
    // d/dr 2σ(r) = 2σ(r)(1-σ(r)) = 2 * 0.25 at r = 0
    assert!((g.grad(r).unwrap().data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0]));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::training(5);
        let x = g.param(random(&[5, 4], &mut rng));
        let w = g.param(random(&[4, 6], &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.dropout(h, 0.2).unwrap();
        let h = g.layer_norm(h).unwrap();
        let h = g.glu(h).unwrap();
        let loss = weighted_sum(&mut g, h, 1).unwrap();
        g.backward(loss).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn every_param_leaf_gets_a_grad() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![0.5, 0.5]));
    let c = g.constant(Tensor::vector(vec![3.0, 3.0]));
    let ab = g.mul(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let loss = g.sum(abc).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_some());
    assert!(g.grad(b).is_some());
    assert!(g.grad(c).is_none());
}

#[test]
fn ln_of_nonpositive_is_non_finite_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert_eq!(g.ln(x), Err(Error::NonFinite("ln")));
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);
}

#[test]
fn finite_difference_of_swish_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&[4, 5], &mut rng);
    let swish = finite_difference_check(|g, x| {
        let y = g.swish(x)?;
        g.sum(y)
    }, &x, EPS);
    assert!(swish < 1e-4, "{swish}");
    let ln = finite_difference_check(|g, x| {
        let y = g.layer_norm(x)?;
        weighted_sum(g, y, 4)
    }, &x, EPS);
    assert!(ln < 1e-4, "{ln}");
    let constant = finite_difference_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, EPS);
    assert_eq!(constant, 0.0);
}

#[test]
fn works_in_single_precision() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::vector(vec![0.5f32, -0.25]));
    let y = g.two_sigmoid(x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    let gr = g.grad(x).unwrap().data();
    let s = |v: f32| 1.0 / (1.0 + (-v).exp());
    assert!((gr[0] - 2.0 * s(0.5) * (1.0 - s(0.5))).abs() < 1e-6);
}
