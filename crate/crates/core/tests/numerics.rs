use proptest::prelude::*;
use qcn_core::numerics::{grad_check, Graph, Tensor, Var, DEFAULT_EPSILON};
use qcn_core::Result;
use qcn_testkit as oracle;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = oracle::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), oracle::uniform(&mut rng, n, -1.5, 1.5)).unwrap()
}

/// Contracts every op output against a fixed random tensor so each output
/// entry receives a distinct upstream gradient.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(tensor(g.shape(x), seed ^ 0xabc));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn check_unary<F>(shape: &[usize], seed: u64, op: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let x = tensor(shape, seed);
    let report = grad_check(
        |g, v| {
            let y = op(g, v[0])?;
            probe(g, y, seed)
        },
        &[x],
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

fn check_binary<F>(a: &[usize], b: &[usize], seed: u64, op: F)
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var>,
{
    let ta = tensor(a, seed);
    let tb = tensor(b, seed + 1);
    let report = grad_check(
        |g, v| {
            let y = op(g, v[0], v[1])?;
            probe(g, y, seed)
        },
        &[ta, tb],
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_gradients(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5) {
        check_unary(&[r, c], seed, |g, x| Ok(g.tanh(x)));
        check_unary(&[r, c], seed, |g, x| Ok(g.relu(x)));
        check_unary(&[r, c], seed, |g, x| Ok(g.scale(x, -2.5)));
        check_binary(&[r, c], &[r, c], seed, |g, a, b| g.add(a, b));
        check_binary(&[r, c], &[c], seed, |g, a, b| g.sub(a, b));
        check_binary(&[r, c], &[r, c], seed, |g, a, b| g.mul(a, b));
    }

    #[test]
    fn row_op_gradients(seed in 0u64..10_000, r in 1usize..4, c in 2usize..6) {
        check_unary(&[r, c], seed, |g, x| g.softmax(x, 1));
        check_unary(&[r, c], seed, |g, x| g.softmax(x, 0));
        check_unary(&[r, c], seed, |g, x| Ok(g.layer_norm(x, 1e-6)));
        check_unary(&[r, c], seed, |g, x| Ok(g.center(x)));
        check_unary(&[r, c], seed, |g, x| Ok(g.unit(x)));
        check_unary(&[r, c], seed, |g, x| Ok(g.squash(x)));
        check_unary(&[r, c], seed, |g, x| Ok(g.sum_last(x)));
    }

    #[test]
    fn structural_gradients(seed in 0u64..10_000, p in 1usize..4, q in 1usize..4, r in 1usize..4) {
        check_binary(&[p, q], &[q, r], seed, |g, a, b| g.matmul(a, b));
        check_binary(&[2, p, q], &[q, r], seed, |g, a, b| g.matmul(a, b));
        check_binary(&[2, p, q], &[2, q, r], seed, |g, a, b| g.matmul(a, b));
        check_binary(&[p, q], &[r, q], seed, |g, a, b| g.concat(&[a, b], 0));
        check_binary(&[p, q], &[p, r], seed, |g, a, b| g.concat(&[a, b], 1));
        check_unary(&[p, q, r], seed, |g, x| g.permute(x, &[2, 0, 1]));
        check_unary(&[p, q, r], seed, |g, x| g.transpose(x));
        check_unary(&[p, q], seed, |g, x| g.reshape(x, &[q * p]));
        check_unary(&[p + 1, q], seed, |g, x| g.index_select(x, &[0, p, 0]));
        check_unary(&[p, q], seed, |g, x| Ok(g.mean(x)));
    }

    #[test]
    fn cross_entropy_gradient(seed in 0u64..10_000, n in 1usize..5, v in 2usize..6) {
        let targets: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % v).collect();
        let weights: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { (i % 2) as f64 }).collect();
        let report = grad_check(
            |g, x| g.cross_entropy(x[0], &targets, &weights),
            &[tensor(&[n, v], seed)],
            DEFAULT_EPSILON,
        ).unwrap();
        prop_assert!(report.max_rel_error <= 1e-4);
    }

    #[test]
    fn matmul_matches_triple_loop(seed in 0u64..10_000, p in 1usize..9, q in 1usize..9, r in 1usize..9) {
        let a = tensor(&[p, q], seed);
        let b = tensor(&[q, r], seed + 1);
        let want = oracle::matmul(&a.to_rows(), &b.to_rows());
        let got = a.matmul(&b).unwrap().to_rows();
        prop_assert!(oracle::max_abs_diff(&got, &want) <= 1e-12);
    }

    #[test]
    fn batched_matmul_matches_triple_loop(seed in 0u64..10_000, s in 1usize..4, p in 1usize..9, q in 1usize..9, r in 1usize..9) {
        let a = tensor(&[s, p, q], seed);
        let b = tensor(&[s, q, r], seed + 1);
        let got = a.matmul(&b).unwrap();
        for k in 0..s {
            let ak = Tensor::new(vec![p, q], a.data()[k * p * q..(k + 1) * p * q].to_vec()).unwrap();
            let bk = Tensor::new(vec![q, r], b.data()[k * q * r..(k + 1) * q * r].to_vec()).unwrap();
            let want = oracle::matmul(&ak.to_rows(), &bk.to_rows());
            let gk = Tensor::new(vec![p, r], got.data()[k * p * r..(k + 1) * p * r].to_vec()).unwrap();
            prop_assert!(oracle::max_abs_diff(&gk.to_rows(), &want) <= 1e-12);
        }
    }

    #[test]
    fn softmax_slices_normalize(seed in 0u64..10_000, r in 1usize..6, c in 1usize..8, scale in 0.1f64..50.0) {
        let x = tensor(&[r, c], seed).map(|v| v * scale);
        for axis in 0..2 {
            let s = x.softmax(axis).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
            for o in 0..outer {
                let sum: f64 = (0..inner)
                    .map(|i| if axis == 1 { s.get(&[o, i]) } else { s.get(&[i, o]) })
                    .sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let s = Tensor::vector(vec![0.0, 0.0, 0.0])
        .unwrap()
        .softmax(0)
        .unwrap();
    assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let s = Tensor::vector(vec![1000.0, 0.0])
        .unwrap()
        .softmax(0)
        .unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
    let s = Tensor::vector(vec![1.0, 2.0, 3.0])
        .unwrap()
        .softmax(0)
        .unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in s.data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn fan_out_matches_algebraic_rewrite() {
    // y = sum(x ⊙ x + 3x) consumes x three times; it equals sum(x² + 3x)
    // whose gradient is 2x + 3.
    let x = tensor(&[2, 3], 7);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let three = g.scale(v, 3.0);
    let s = g.add(sq, three).unwrap();
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    let got = grads.get(v).unwrap();
    for (gv, xv) in got.data().iter().zip(x.data()) {
        assert!((gv - (2.0 * xv + 3.0)).abs() < 1e-14);
    }
}

#[test]
fn shape_errors_are_descriptive() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let e = a.matmul(&b).unwrap_err().to_string();
    assert!(e.contains("[2, 3]"), "{e}");
    let mut g = Graph::new();
    let x = g.constant(a);
    let y = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(x, y).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn quadratic_grad_check_is_tight() {
    let r = grad_check(
        |g, v| {
            let s = g.mul(v[0], v[0])?;
            Ok(g.sum(s))
        },
        &[Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()],
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-7);
}

#[test]
fn finite_outputs_on_finite_inputs() {
    let x = tensor(&[3, 4], 3).map(|v| v * 1e3);
    let mut g = Graph::new();
    let v = g.constant(x);
    let outs = [
        g.softmax(v, 1).unwrap(),
        g.layer_norm(v, 1e-6),
        g.unit(v),
        g.squash(v),
        g.tanh(v),
    ];
    for o in outs {
        assert!(g.value(o).all_finite());
    }
    let zero = g.constant(Tensor::zeros(&[2, 3]));
    for o in [
        g.unit(zero),
        g.squash(zero),
        g.center(zero),
        g.layer_norm(zero, 1e-6),
    ] {
        assert!(g.value(o).all_finite());
    }
}
