use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(w ⊙ y)` with fixed random weights, so no gradient entry is zero by
/// symmetry.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> TensorResult<Var> {
    let w = tape.constant(random(tape.value(y).shape(), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros([2, 3]));
    let y = tape.sum(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum(sq).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_seed() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros([2, 2]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn backward_is_repeatable_bitwise() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(random(&[4, 6], 1).cast());
    let b = tape.param(random(&[6, 3], 2).cast());
    let c = tape.matmul(a, b).unwrap();
    let s = tape.softmax(c).unwrap();
    let g = tape.gelu(s).unwrap();
    let y = tape.sum(g).unwrap();
    let first = tape.backward(y).unwrap();
    let second = tape.backward(y).unwrap();
    assert_eq!(first.get(a), second.get(a));
    assert_eq!(first.get(b), second.get(b));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::ones([3]));
    let c = tape.constant(Tensor::ones([3]));
    let p = tape.mul(x, c).unwrap();
    let y = tape.sum(p).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let gamma = tape.constant(Tensor::ones([3]));
    let beta = tape.constant(Tensor::zeros([3]));
    let x = tape.constant(Tensor::ones([3]));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let gamma = tape.constant(Tensor::ones([2]));
    let beta = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(Tensor::new([2], vec![0.0, 2.0]).unwrap());
    let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);

    let bad = tape.constant(Tensor::ones([3]));
    assert!(matches!(tape.layer_norm(bad, gamma, beta, 1e-5), Err(TensorError::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([3]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = tape.gelu(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-9);
    assert!(v[2].abs() < 1e-9);
}

#[test]
fn gelu_gradient_at_fixed_points() {
    let x = Tensor::new([4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    let err = grad_check(|t, x| {
        let y = t.gelu(x)?;
        t.sum(y)
    }, &x, 1e-5)
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn nan_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([1], vec![f32::MAX]).unwrap());
    assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = random(&[3, 4], 9);
    let err = grad_check(|t, x| t.sum(x), &x, 1e-3).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_of_square_matches_2x() {
    let x = random(&[3, 3], 10);
    let err = grad_check(|t, x| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    }, &x, 1e-3)
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let x = random(&[2, 2], 3);
    assert!(grad_check(|t, x| t.relu(x), &x, 1e-3).is_err());
    assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random(&[3, 4], 11);
    let b = random(&[4, 2], 12);
    let errs = grad_check_multi(|t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    }, &[a, b], 1e-5)
    .unwrap();
    assert!(errs.iter().all(|&e| e <= 1e-3), "{errs:?}");
}

#[test]
fn each_op_passes_grad_check() {
    type OpFn = fn(&mut Tape<f64>, &[Var]) -> TensorResult<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], 1.7)),
        ("add_row_vector", vec![vec![3, 4], vec![4]], |t, v| t.add_row_vector(v[0], v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], [2, 6])),
        ("slice_cols", vec![vec![3, 6]], |t, v| t.slice_cols(v[0], 2, 3)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| t.concat_cols(v)),
        ("slice_rows", vec![vec![5, 3]], |t, v| t.slice_rows(v[0], 1, 3)),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| t.concat_rows(v)),
        ("layer_norm", vec![vec![2, 8], vec![8], vec![8]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ("softmax", vec![vec![4, 5]], |t, v| t.softmax(v[0])),
        ("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        ("relu", vec![vec![3, 4]], |t, v| t.relu(v[0])),
        ("abs", vec![vec![3, 4]], |t, v| t.abs(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("cosine_distance_rows", vec![vec![3, 5], vec![3, 5]], |t, v| t.cosine_distance_rows(v[0], v[1], 1e-8)),
        ("im2col_3x3", vec![vec![6, 2]], |t, v| t.im2col_3x3(v[0], 2, 3)),
    ];
    for (name, shapes, op) in cases {
        for seed in 0..10u64 {
            let inputs: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(k, s)| random(s, seed * 31 + k as u64))
                .collect();
            let errs = grad_check_multi(|t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, seed)
            }, &inputs, 1e-6)
            .unwrap();
            for e in errs {
                assert!(e <= 1e-3, "{name} seed {seed}: rel err {e}");
            }
        }
    }
}

#[test]
fn softmax_matmul_chain_grad_check() {
    let a = random(&[4, 3], 21);
    let b = random(&[3, 5], 22);
    let errs = grad_check_multi(|t, v| {
        let c = t.matmul(v[0], v[1])?;
        let s = t.softmax(c)?;
        weighted_sum(t, s, 5)
    }, &[a, b], 1e-6)
    .unwrap();
    assert!(errs.iter().all(|&e| e <= 1e-3), "{errs:?}");
}

#[test]
fn im2col_layout() {
    // 1×2 grid, one channel: token 0 sees token 1 at tap (1, 2).
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([2, 1], vec![5.0, 7.0]).unwrap());
    let y = tape.im2col_3x3(x, 1, 2).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[2, 9]);
    assert_eq!(v.data()[4], 5.0);
    assert_eq!(v.data()[5], 7.0);
    assert_eq!(v.data()[9 + 3], 5.0);
    assert_eq!(v.data()[9 + 4], 7.0);
    assert_eq!(v.data().iter().filter(|&&x| x != 0.0).count(), 4);
}
