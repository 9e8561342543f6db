use aop_core::gradcheck::{check_op, TOLERANCE};
use aop_core::graph::{sigmoid, softmax};
use aop_core::{Error, Graph, Tensor};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Random `rows x cols` matrix strategy with dims in `1..=max`.
fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| values(r * c).prop_map(move |d| mat(r, c, d)))
}

fn assert_grad(err: f64) {
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let ii = g.matmul(i, i).unwrap();
    assert_eq!(g.value(ii), &Tensor::identity(2));
    let a = g.constant(mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(mat(2, 1, vec![1.0, 1.0]));
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[3.0, 7.0]);
    assert!(matches!(g.matmul(b, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_3x4_by_4x2() {
    let a = mat(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
    let b = mat(4, 2, (0..8).map(|i| (i as f64 * 0.71).cos()).collect());
    let err = check_op(&[a, b], 1, |g, v| g.matmul(v[0], v[1])).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    let big = softmax(&[1000.0, 0.0]);
    assert_eq!(big[0], 1.0);
    assert!(big[1] >= 0.0 && big[1] < 1e-300);
    let s = softmax(&[1.0, 2.0, 3.0]);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in s.iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_examples() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(50.0) - 1.0).abs() < 1e-12);
    assert!((sigmoid(-2.0) - 0.11920292202211755).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(mat(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.variable(mat(1, 3, vec![1.0, 2.0, 3.0]));
    let z = g.scale(x, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
}

#[test]
fn backward_accumulates_across_calls() {
    let mut g = Graph::new();
    let x = g.variable(mat(1, 2, vec![1.0, 2.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_needs_a_scalar() {
    let mut g = Graph::new();
    let x = g.variable(mat(1, 2, vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.variable(mat(1, 2, vec![0.0, 1.0]));
    assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
}

#[test]
fn gather_out_of_bounds_is_a_vocabulary_error() {
    let mut g = Graph::new();
    let t = g.variable(mat(3, 2, vec![0.0; 6]));
    assert!(matches!(g.gather_rows(t, &[1, 3]), Err(Error::Vocabulary { id: 3, size: 3 })));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.variable(mat(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
        let b = g.variable(mat(3, 2, vec![1.0, -1.0, 0.5, 0.25, -0.75, 2.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c, false).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6), causal in any::<bool>()) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax_rows(v, causal).unwrap();
        let out = g.value(s);
        for i in 0..out.rows() {
            let row = out.row_slice(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let visible = if causal { (i + 1).min(row.len()) } else { row.len() };
            prop_assert!(row[..visible].iter().all(|&p| p > 0.0));
            prop_assert!(row[visible..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn grad_matmul(a in matrix(4), k in 1usize..4, seed in any::<u64>()) {
        let b = mat(a.cols(), k, (0..a.cols() * k).map(|i| ((i as f64) * 0.3 + seed as f64 % 7.0).sin()).collect());
        assert_grad(check_op(&[a, b], seed, |g, v| g.matmul(v[0], v[1])).unwrap());
    }

    #[test]
    fn grad_matmul_t(a in matrix(4), k in 1usize..4, seed in any::<u64>()) {
        let b = mat(k, a.cols(), (0..a.cols() * k).map(|i| ((i as f64) * 0.7).cos()).collect());
        assert_grad(check_op(&[a, b], seed, |g, v| g.matmul_t(v[0], v[1])).unwrap());
    }

    #[test]
    fn grad_elementwise(a in matrix(4), seed in any::<u64>()) {
        let b = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| (v * 1.3).sin() + 0.1).collect()).unwrap();
        assert_grad(check_op(&[a.clone(), b.clone()], seed, |g, v| g.add(v[0], v[1])).unwrap());
        assert_grad(check_op(&[a.clone(), b.clone()], seed, |g, v| g.sub(v[0], v[1])).unwrap());
        assert_grad(check_op(&[a.clone(), b], seed, |g, v| g.mul(v[0], v[1])).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.affine(v[0], -1.7, 0.3)).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.transpose(v[0])).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.sigmoid(v[0])).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.tanh(v[0])).unwrap());
        assert_grad(check_op(&[a], seed, |g, v| g.sum(v[0])).unwrap());
    }

    #[test]
    fn grad_relu_away_from_kink(a in matrix(4), seed in any::<u64>()) {
        let shifted = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| if v.abs() < 0.01 { v + 0.05 } else { *v }).collect()).unwrap();
        assert_grad(check_op(&[shifted], seed, |g, v| g.relu(v[0])).unwrap());
    }

    #[test]
    fn grad_log(a in matrix(4), seed in any::<u64>()) {
        let positive = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
        assert_grad(check_op(&[positive], seed, |g, v| g.log(v[0])).unwrap());
    }

    #[test]
    fn grad_broadcasts(a in matrix(4), seed in any::<u64>()) {
        let row = Tensor::row((0..a.cols()).map(|i| 0.5 - i as f64 * 0.2).collect());
        let col = mat(a.rows(), 1, (0..a.rows()).map(|i| 1.0 + i as f64 * 0.3).collect());
        assert_grad(check_op(&[a.clone(), row], seed, |g, v| g.add_row(v[0], v[1])).unwrap());
        assert_grad(check_op(&[a, col], seed, |g, v| g.mul_col(v[0], v[1])).unwrap());
    }

    #[test]
    fn grad_weighted_sum(a in matrix(3), seed in any::<u64>(), w in values(3)) {
        let b = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * 0.5 - 0.3).collect()).unwrap();
        let c = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| (v * 2.0).cos()).collect()).unwrap();
        let w = Tensor::row(w);
        assert_grad(check_op(&[w, a, b, c], seed, |g, v| g.weighted_sum(v[0], &v[1..])).unwrap());
    }

    #[test]
    fn grad_softmax(a in matrix(5), causal in any::<bool>(), seed in any::<u64>()) {
        assert_grad(check_op(&[a], seed, |g, v| g.softmax_rows(v[0], causal)).unwrap());
    }

    #[test]
    fn grad_layer_norm(a in matrix(4), seed in any::<u64>()) {
        prop_assume!(a.cols() >= 2);
        let spread = Tensor::new(a.shape().to_vec(), a.data().iter().enumerate().map(|(i, v)| v + i as f64 * 0.1).collect()).unwrap();
        let gamma = Tensor::row((0..a.cols()).map(|i| 1.0 + 0.1 * i as f64).collect());
        let beta = Tensor::row((0..a.cols()).map(|i| 0.05 * i as f64).collect());
        assert_grad(check_op(&[spread, gamma, beta], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)).unwrap());
    }

    #[test]
    fn grad_indexing(a in matrix(4), seed in any::<u64>()) {
        let (m, n) = (a.rows(), a.cols());
        let ids: Vec<usize> = (0..5).map(|i| (i * 3 + seed as usize) % m).collect();
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.gather_rows(v[0], &ids)).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.slice_cols(v[0], n / 2, n - n / 2)).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.row(v[0], m - 1)).unwrap());
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| g.pad_cols(v[0], 2)).unwrap());
        assert_grad(check_op(&[a.clone(), a.clone()], seed, |g, v| g.concat_cols(&[v[0], v[1]])).unwrap());
        let r = Tensor::row(a.row_slice(0).to_vec());
        assert_grad(check_op(&[r.clone(), r], seed, |g, v| g.stack_rows(&[v[0], v[1]])).unwrap());
    }

    #[test]
    fn grad_losses(a in matrix(4), seed in any::<u64>()) {
        let (m, n) = (a.rows(), a.cols());
        let targets: Vec<Option<usize>> = (0..m).map(|i| if i == 1 { None } else { Some((i + seed as usize) % n) }).collect();
        assert_grad(check_op(std::slice::from_ref(&a), seed, |g, v| {
            let p = g.softmax_rows(v[0], false)?;
            g.nll(p, &targets)
        }).unwrap());
        let bits: Vec<f64> = (0..m * n).map(|i| ((i + seed as usize) % 2) as f64).collect();
        assert_grad(check_op(&[a], seed, |g, v| g.bce_with_logits(v[0], &bits)).unwrap());
    }
}
