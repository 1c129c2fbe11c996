//! Numerical kernel: dense matrices, a reverse-mode gradient tape, and
//! finite-difference gradient checking.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, ParamGrads, ParamSet};
pub use matrix::{layer_norm, softmax_rows, Matrix};
pub use tape::{GradTape, Gradients, ValueId};

use thiserror::Error;

/// Errors from the numerical kernel.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    DimMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("buffer of length {len} does not fit a {rows}x{cols} matrix")]
    BadBufferLength { rows: usize, cols: usize, len: usize },
    #[error("ragged rows: expected width {expected}, got {got}")]
    RaggedRows { expected: usize, got: usize },
    #[error("non-finite value encountered: {value}")]
    NonFinite { value: f64 },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("backward root must be 1x1, got {}x{}", shape.0, shape.1)]
    NonScalarRoot { shape: (usize, usize) },
    #[error("no analytic gradient produced for parameter '{name}'")]
    MissingGradient { name: String },
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn finite_matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in finite_matrix(8)) {
            let s = softmax_rows(&m);
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_associative(
            a in finite_matrix(5),
            bdata in proptest::collection::vec(-2.0f64..2.0, 25),
            cdata in proptest::collection::vec(-2.0f64..2.0, 25),
        ) {
            let k = a.cols();
            let b = Matrix::from_vec(k, 5, bdata[..k * 5].to_vec()).unwrap();
            let c = Matrix::from_vec(5, 3, cdata[..15].to_vec()).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom < 1e-9);
            }
        }
    }
}
