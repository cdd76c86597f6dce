//! Reverse-mode gradients against central finite differences, over random
//! small shapes.

use gtnp::numerics::{gradient_check, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

fn pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| (tensor(vec![r, c]), tensor(vec![r, c])))
}

/// Reduces any matrix to a scalar through fixed, non-uniform weights so
/// every output coordinate contributes differently.
fn reduce<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| 0.3 + 0.17 * (i % 7) as f64).collect()).unwrap();
    v.mul(tape.constant(w)).sum()
}

fn check<F>(f: F, point: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    gradient_check(f, point, H).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_binary((a, b) in pair(4)) {
        let b_pos = Tensor::new(a.shape(), b.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        prop_assert!(check(|t, v| reduce(t, v[0].add(v[1])), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].sub(v[1])), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].mul(v[1])), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].div(v[1])), &[a, b_pos]) < TOL);
    }

    #[test]
    fn elementwise_unary(a in matrix(5)) {
        let pos = Tensor::new(a.shape(), a.data().iter().map(|v| v.abs() + 0.3).collect()).unwrap();
        prop_assert!(check(|t, v| reduce(t, v[0].exp()), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].ln()), &[pos]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].sigmoid()), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].softplus()), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].square().scale(0.5).neg().add_const(3.0)), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].relu()), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].clamp(-1.0, 1.0)), &[a.clone()]) < TOL);
        prop_assert!(check(|_, v| v[0].mean(), &[a]) < TOL);
    }

    #[test]
    fn matmul_and_broadcasts((n, k, m) in (1usize..5, 1usize..5, 1usize..5), seed in 0u64..1000) {
        let gen = |r: usize, c: usize, s: u64| {
            Tensor::new(&[r, c], (0..r * c).map(|i| (((i as u64 + 1) * (s + 7) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect()).unwrap()
        };
        let a = gen(n, k, seed);
        let b = gen(k, m, seed + 1);
        let bias = gen(1, m, seed + 2);
        let col = Tensor::new(&[n, 1], (0..n).map(|i| 0.5 + i as f64).collect()).unwrap();
        let s = Tensor::scalar(0.7);
        prop_assert!(check(|t, v| reduce(t, v[0].matmul(v[1]).add_row(v[2])), &[a.clone(), b.clone(), bias]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].aggregate(v[1])), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].mul_col(v[1]).div_col(v[1].square().add_const(1.0))), &[a.clone(), col]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].mul_scalar(v[1])), &[a.clone(), s]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].transpose().sum_rows()), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].broadcast_rows(3)), &[gen(1, m, seed)]) < TOL);
    }

    #[test]
    fn structural_ops(a in (2usize..5, 2usize..5).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let (r, c) = (a.rows(), a.cols());
        prop_assert!(check(|t, v| reduce(t, Var::hcat(&[v[0], v[0].exp()])), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, Var::vcat(&[v[0], v[0].square()])), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].rows(&[r - 1, 0, 0])), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].cols(1, c)), &[a.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].reshape(&[c, r])), &[a.clone()]) < TOL);
        let idx: Vec<usize> = (0..r).map(|i| i % c).collect();
        prop_assert!(check(|t, v| reduce(t, v[0].log_softmax()), &[a.clone()]) < TOL);
        prop_assert!(check(|_, v| v[0].log_softmax().pick(&idx).sum(), &[a.clone()]) < TOL);
        let pos = Tensor::new(a.shape(), a.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        prop_assert!(check(|t, v| reduce(t, v[0].row_normalize()), &[pos]) < TOL);
    }

    #[test]
    fn pairwise_ops((a, b) in (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(n, m, d)| (tensor(vec![n, d]), tensor(vec![m, d])))) {
        prop_assert!(check(|t, v| reduce(t, v[0].sq_dist(v[1])), &[a.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].pair_sum(v[1]).sigmoid()), &[a, b]) < TOL);
    }

    #[test]
    fn conv_and_pool(
        x in (1usize..3, 4usize..7, 4usize..7, 1usize..3)
            .prop_flat_map(|(n, h, w, c)| (tensor(vec![n, h, w, c]), Just(c))),
        c_out in 1usize..3,
    ) {
        let (x, c_in) = x;
        let k = 3;
        let w = Tensor::new(&[k * k * c_in, c_out], (0..k * k * c_in * c_out).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
        let b = Tensor::new(&[1, c_out], (0..c_out).map(|i| 0.1 * i as f64).collect()).unwrap();
        prop_assert!(check(|t, v| reduce(t, v[0].conv2d(v[1], v[2], k)), &[x.clone(), w.clone(), b.clone()]) < TOL);
        prop_assert!(check(|t, v| reduce(t, v[0].max_pool2()), &[x]) < TOL);
    }
}

#[test]
fn quadratic_gradient_is_exact() {
    let w = Tensor::new(&[8], vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.7, 1.1, 3.3]).unwrap();
    let err = gradient_check(|_, v| v[0].square().sum(), &[w], 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn aggregate_agrees_with_matmul() {
    let a = Tensor::from_rows(&[vec![0.5, 0.0, 1.5], vec![-1.0, 2.0, 0.25]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.5, 0.5]]).unwrap();
    let tape = Tape::new();
    let agg = tape.constant(a.clone()).aggregate(tape.constant(b.clone())).value();
    let mm = a.matmul(&b).unwrap();
    for (x, y) in agg.data().iter().zip(mm.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}
