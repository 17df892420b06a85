//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::l2_normalize_rows as normalize_rows_raw;

/// Default guard for the row normalization denominator.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{len} values cannot fill shape {shape:?}")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let col = tape.constant(Tensor::from_rows(&[[0.0], [1.0]]).unwrap());
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 1]);
        assert_eq!(tape.value(d).values(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        assert!(tape.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.value(y).at(0, 0) - 1.0).abs() < 1e-12);
        assert!(tape.value(y).at(0, 1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(random(&[2, 5], &mut rng));
        let y = tape.softmax_rows(x).unwrap();
        for i in 0..2 {
            let row = tape.value(y).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap());
        assert_eq!(tape.softmax_rows(x).unwrap_err(), NumericsError::NonFinite { op: "softmax_rows" });
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let y = tape.l2_normalize_rows(x, NORM_EPS).unwrap();
        assert!((tape.value(y).at(0, 0) - 0.6).abs() < 1e-15);
        assert!((tape.value(y).at(0, 1) - 0.8).abs() < 1e-15);

        let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let y = tape.l2_normalize_rows(z, 1e-8).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.constant(random(&[4, 8], &mut rng));
        let y = tape.l2_normalize_rows(x, NORM_EPS).unwrap();
        for i in 0..4 {
            let norm = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-10);
        }
        // idempotent on unit rows
        let y2 = tape.l2_normalize_rows(y, NORM_EPS).unwrap();
        assert!(tape.value(y2).max_abs_diff(tape.value(y)) < 1e-10);

        assert!(tape.l2_normalize_rows(x, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.value(x).grad().unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err, NumericsError::NonScalarLoss { shape: vec![2, 2] });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_and_diagonal() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let d = tape.diagonal(x).unwrap();
        assert_eq!(tape.value(d).values(), &[1.0, 4.0]);
        let s = tape.sum(d).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(tape.gather(x, vec![4], &[1]).is_err());
    }

    #[test]
    fn operations_are_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let a = random(&[5, 7], &mut rng);
            let b = random(&[7, 3], &mut rng);
            let mut tape = Tape::new();
            let va = tape.param(a);
            let vb = tape.param(b);
            let c = tape.matmul(va, vb).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(s).clone(), tape.grad(va).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    // Finite-difference checks, one per differentiable operation. Each closure
    // builds a scalar loss from the listed inputs; a fixed random weighting
    // avoids symmetric cancellation in plain sums.

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(y), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    fn fd_check(name: &str, inputs: Vec<Tensor>, build: &Build) {
        let err = check_gradient(&inputs, 1e-5, |tape, vars| {
            let y = build(tape, vars)?;
            if tape.value(y).len() == 1 {
                Ok(y)
            } else {
                weighted_sum(tape, y, 77)
            }
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }

    #[test]
    fn finite_difference_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |s: &[usize]| random(s, &mut rng);
        let positive = |t: Tensor| {
            let v = t.values().iter().map(|x| x.abs() + 0.5).collect();
            Tensor::new(t.shape().to_vec(), v).unwrap()
        };
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
            ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
            ("sub", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
            ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
            ("scale", vec![r(&[2, 3])], Box::new(|t, v| t.scale(v[0], -1.7))),
            ("add_row", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| t.add_row(v[0], v[1]))),
            ("mul_row", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| t.mul_row(v[0], v[1]))),
            ("exp", vec![r(&[2, 3])], Box::new(|t, v| t.exp(v[0]))),
            ("ln", vec![positive(r(&[2, 3]))], Box::new(|t, v| t.ln(v[0]))),
            ("abs", vec![positive(r(&[2, 3]))], Box::new(|t, v| t.abs(v[0]))),
            ("sigmoid", vec![r(&[2, 3])], Box::new(|t, v| t.sigmoid(v[0]))),
            ("gelu", vec![r(&[2, 3])], Box::new(|t, v| t.gelu(v[0]))),
            ("sum", vec![r(&[2, 3])], Box::new(|t, v| t.sum(v[0]))),
            ("mean", vec![r(&[2, 3])], Box::new(|t, v| t.mean(v[0]))),
            ("reshape", vec![r(&[2, 3])], Box::new(|t, v| t.reshape(v[0], &[3, 2]))),
            ("transpose", vec![r(&[2, 3])], Box::new(|t, v| t.transpose(v[0]))),
            ("gather", vec![r(&[2, 3])], Box::new(|t, v| t.gather(v[0], vec![5, 0, 0, 2], &[2, 2]))),
            ("diagonal", vec![r(&[3, 3])], Box::new(|t, v| t.diagonal(v[0]))),
            ("softmax_rows", vec![r(&[3, 5])], Box::new(|t, v| t.softmax_rows(v[0]))),
            ("l2_normalize_rows", vec![r(&[4, 3])], Box::new(|t, v| t.l2_normalize_rows(v[0], NORM_EPS))),
            (
                "layer_norm_rows",
                vec![r(&[3, 5]), r(&[5]), r(&[5])],
                Box::new(|t, v| t.layer_norm_rows(v[0], v[1], v[2], 1e-5)),
            ),
            (
                "concat_cols",
                vec![r(&[2, 3]), r(&[2, 1]), r(&[2, 2])],
                Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[2]])),
            ),
        ];
        for (name, inputs, build) in cases {
            fd_check(name, inputs, build.as_ref());
        }
    }

    #[test]
    fn sum_and_mean_survive_cancellation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![1e16, 1.0, -1e16, 1.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(s).values(), &[2.0]);
        assert_eq!(tape.value(m).values(), &[0.5]);
    }

    #[test]
    fn relative_error_helper() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
