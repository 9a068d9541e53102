mod common;

use brnpa::autograd::fd::{central_difference, relative_error, DEFAULT_STEP};
use brnpa::autograd::{conv_output_extent, Axis, Graph, Params, ReduceKind, Sgd, Tensor};
use common::{dd_cross_entropy, dd_kl, normal_vec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn v(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec())
}

#[test]
fn add_vectors() {
    let mut g = Graph::new();
    let a = g.constant(v(&[1.0, 2.0]));
    let b = g.constant(v(&[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_zero_scalar() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.5, -2.0, 3.0]));
    let z = g.constant(Tensor::scalar(0.0));
    let y = g.mul(x, z).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn sub_self_cancels() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.0, 2.0, 3.0]));
    let y = g.sub(x, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1]);
    assert_eq!(g.value(y).data(), &[11.0]);
}

#[test]
fn matmul_inner_extent_checked() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(g.matmul(a, b).is_err());
}

/// Scalar loss Σ probe ⊙ f(a, b) for gradient checks on two operands.
fn check_binary(
    a: Tensor,
    b: Tensor,
    probe: &[f64],
    op: impl Fn(&mut Graph, brnpa::autograd::Var, brnpa::autograd::Var) -> brnpa::autograd::Var,
) -> f64 {
    let eval = |av: &[f64], bv: &[f64], grad: bool| {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(a.shape().to_vec(), av.to_vec()).unwrap());
        let y = g.input(Tensor::new(b.shape().to_vec(), bv.to_vec()).unwrap());
        let out = op(&mut g, x, y);
        let w = g.constant(Tensor::new(g.value(out).shape().to_vec(), probe.to_vec()).unwrap());
        let p = g.mul(out, w).unwrap();
        let l = g.sum(p).unwrap();
        let value = g.value(l).item();
        let grads = grad.then(|| {
            let r = g.backward(l).unwrap();
            let mut all = r.get(x).unwrap().data().to_vec();
            all.extend_from_slice(r.get(y).unwrap().data());
            all
        });
        (value, grads)
    };
    let analytic = eval(a.data(), b.data(), true).1.unwrap();
    let na = a.len();
    let joint: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let numeric = central_difference(|x| eval(&x[..na], &x[na..], false).0, &joint, DEFAULT_STEP);
    relative_error(&analytic, &numeric)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::matrix(3, 4, normal_vec(&mut rng, 12)).unwrap();
    let b = Tensor::matrix(4, 2, normal_vec(&mut rng, 8)).unwrap();
    let probe = normal_vec(&mut rng, 6);
    let err = check_binary(a, b, &probe, |g, x, y| g.matmul(x, y).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for op in 0..4 {
        let a = v(&normal_vec(&mut rng, 5));
        let b = v(&normal_vec(&mut rng, 5)
            .iter()
            .map(|x| x.abs() + 0.5)
            .collect::<Vec<_>>());
        let probe = normal_vec(&mut rng, 5);
        let err = check_binary(a, b, &probe, |g, x, y| match op {
            0 => g.add(x, y).unwrap(),
            1 => g.sub(x, y).unwrap(),
            2 => g.mul(x, y).unwrap(),
            _ => g.div(x, y).unwrap(),
        });
        assert!(err < 1e-6, "op {op}: {err}");
    }
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let x = g.constant(Tensor::new(vec![1, 3, 3], data.clone()).unwrap());
    let k = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn conv_all_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv_stride_extents() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 8, 8]));
    let k = g.constant(Tensor::zeros(vec![2, 1, 3, 3]));
    let s1 = g.conv2d(x, k, 1, 1).unwrap();
    let s2 = g.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(g.value(s1).shape(), &[2, 8, 8]);
    assert_eq!(g.value(s2).shape(), &[2, 4, 4]);
}

#[test]
fn conv_shape_sweep_follows_formula() {
    for h in 1usize..9 {
        for k in [1, 3] {
            for stride in 1..4 {
                for pad in 0..2 {
                    let expect = (h + 2 * pad).checked_sub(k).map(|d| d / stride + 1);
                    let got = conv_output_extent(h, k, stride, pad).ok();
                    assert_eq!(got, expect, "h {h} k {k} s {stride} p {pad}");
                    if let Some(o) = expect {
                        let mut g = Graph::new();
                        let x = g.constant(Tensor::zeros(vec![2, h, h + 1]));
                        let kk = g.constant(Tensor::zeros(vec![3, 2, k, k]));
                        let y = g.conv2d(x, kk, stride, pad).unwrap();
                        let ow = conv_output_extent(h + 1, k, stride, pad).unwrap();
                        assert_eq!(g.value(y).shape(), &[3, o, ow]);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = Tensor::new(vec![2, 5, 6], normal_vec(&mut rng, 60)).unwrap();
        let k = Tensor::new(vec![3, 2, 3, 3], normal_vec(&mut rng, 54)).unwrap();
        let oh = conv_output_extent(5, 3, stride, pad).unwrap();
        let ow = conv_output_extent(6, 3, stride, pad).unwrap();
        let probe = normal_vec(&mut rng, 3 * oh * ow);
        let err = check_binary(x, k, &probe, |g, a, b| g.conv2d(a, b, stride, pad).unwrap());
        assert!(err < 1e-6, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.0, 2.0, 3.0]));
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s).item(), 6.0);
    let y = g.constant(v(&[5.0, 5.0, 1.0]));
    let am = g.reduce(ReduceKind::Argmax, y, Axis::All).unwrap();
    assert_eq!(g.value(am).item(), 0.0);
    let m = g.mean(x).unwrap();
    let grads = g.backward(m).unwrap();
    for d in grads.get(x).unwrap().data() {
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn max_over_axis_routes_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(2, 3, vec![1.0, 7.0, 2.0, 4.0, 0.0, 9.0]).unwrap());
    let m = g.reduce(ReduceKind::Max, x, Axis::Dim(1)).unwrap();
    assert_eq!(g.value(m).data(), &[7.0, 9.0]);
    let l = g.sum(m).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(
        grads.get(x).unwrap().data(),
        &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    );
}

#[test]
fn cross_entropy_of_even_logits_is_ln2() {
    let mut g = Graph::new();
    let x = g.constant(v(&[0.0, 0.0]));
    let ce = g.cross_entropy(x, 0).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn kl_of_identical_logits_is_zero() {
    let mut g = Graph::new();
    let p = g.constant(v(&[0.3, -1.2, 2.0]));
    let q = g.constant(v(&[0.3, -1.2, 2.0]));
    let kl = g.kl_divergence(p, q).unwrap();
    assert_eq!(g.value(kl).item(), 0.0);
}

#[test]
fn cross_entropy_and_kl_match_extended_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..20 {
        let p = normal_vec(&mut rng, 5)
            .iter()
            .map(|x| 2.0 * x)
            .collect::<Vec<_>>();
        let q = normal_vec(&mut rng, 5)
            .iter()
            .map(|x| 2.0 * x)
            .collect::<Vec<_>>();
        let label = trial % 5;
        let mut g = Graph::new();
        let (tp, tq) = (g.constant(v(&p)), g.constant(v(&q)));
        let ce = g.cross_entropy(tp, label).unwrap();
        let kl = g.kl_divergence(tp, tq).unwrap();
        let ce_ref = dd_cross_entropy(&p, label).to_f64();
        let kl_ref = dd_kl(&p, &q).to_f64();
        assert!((g.value(ce).item() - ce_ref).abs() < 1e-10, "{trial}");
        assert!((g.value(kl).item() - kl_ref).abs() < 1e-10, "{trial}");
    }
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x0: Vec<f64> = normal_vec(&mut rng, 6)
        .into_iter()
        .map(|x| if x.abs() < 0.1 { x + 0.3 } else { x })
        .collect();
    let q = normal_vec(&mut rng, 6);
    let probe = normal_vec(&mut rng, 6);
    let eval = |x: &[f64], grad: bool| {
        let mut g = Graph::new();
        let xi = g.input(v(x));
        let r = g.relu(xi).unwrap();
        let s = g.softmax(xi).unwrap();
        let l = g.log(s).unwrap();
        let w = g.constant(v(&probe));
        let t1 = g.mul(r, w).unwrap();
        let t2 = g.mul(l, w).unwrap();
        let t = g.add(t1, t2).unwrap();
        let t = g.sum(t).unwrap();
        let qc = g.constant(v(&q));
        let ce = g.cross_entropy(xi, 2).unwrap();
        let kl1 = g.kl_divergence(xi, qc).unwrap();
        let kl2 = g.kl_divergence(qc, xi).unwrap();
        let a = g.add(t, ce).unwrap();
        let b = g.add(kl1, kl2).unwrap();
        let loss = g.add(a, b).unwrap();
        let value = g.value(loss).item();
        (
            value,
            grad.then(|| g.backward(loss).unwrap().get(xi).unwrap().data().to_vec()),
        )
    };
    let analytic = eval(&x0, true).1.unwrap();
    let numeric = central_difference(|x| eval(x, false).0, &x0, DEFAULT_STEP);
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn sum_gives_unit_gradient() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.0, -3.0, 0.5, 2.0]));
    let l = g.sum(x).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn stop_gradient_cases() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.0, -3.0, 0.5]));
    let s = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(s).data(), g.value(x).data());
    let l = g.sum(s).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0; 3]);

    let mut g = Graph::new();
    let x = g.input(v(&[1.0, -3.0, 0.5]));
    let s = g.stop_gradient(x).unwrap();
    let a = g.sum(x).unwrap();
    let b = g.sum(s).unwrap();
    let l = g.add(a, b).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 3]);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let mut params = Params::new();
    let used = params.insert("used", v(&[1.0, 2.0]));
    let unused = params.insert("unused", v(&[3.0]));
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let l = g.sum(vars[0]).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(used).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.param(unused).unwrap().data(), &[0.0]);
}

#[test]
fn graph_is_consumed_by_backward() {
    let mut g = Graph::new();
    let x = g.input(v(&[1.0]));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert!(g.backward(l).is_err());
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 6, 6], normal_vec(&mut rng, 72)).unwrap());
        let k = g.input(Tensor::new(vec![4, 2, 3, 3], normal_vec(&mut rng, 72)).unwrap());
        let y = g.conv2d(x, k, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        grads
            .get(k)
            .unwrap()
            .data()
            .iter()
            .map(|d| d.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn sgd_hand_cases() {
    let mut params = Params::new();
    let id = params.insert("p", v(&[1.0, -2.0]));
    let mut opt = Sgd::new(&params, 1.0, 0.0).unwrap();
    opt.step(&mut params, &[v(&[0.5, 0.25])]).unwrap();
    assert_eq!(params.get(id).data(), &[0.5, -2.25]);

    // v1 = g1, p1 = p0 − lr·v1; v2 = μ·v1 + g2, p2 = p1 − lr·v2
    let mut params = Params::new();
    let id = params.insert("p", v(&[1.0]));
    let mut opt = Sgd::new(&params, 0.1, 0.9).unwrap();
    opt.step(&mut params, &[v(&[2.0])]).unwrap();
    opt.step(&mut params, &[v(&[-1.0])]).unwrap();
    let v1 = 2.0;
    let p1 = 1.0 - 0.1 * v1;
    let v2 = 0.9 * v1 - 1.0;
    let p2 = p1 - 0.1 * v2;
    assert!((params.get(id).data()[0] - p2).abs() < 1e-15);
}
