//! Learnable factorized tensors: rank-constrained factor matrices whose
//! products reconstruct the multiplicative (`gamma`) and additive (`beta`)
//! modulation of a frozen weight, `w_hat = w * gamma + beta`.
//!
//! All reshapes operate on the row-major element stream. For a convolution
//! with `K = k * k` the reconstruction is
//!
//! ```text
//! M1  = m1_out · m1_inst                        c_out x (r*K)
//! A1  = a1_out · a1_inst                        c_out x K      (bias only)
//! P   = R1(M1) + repeat_rows(flatten(A1), r)    r x (c_out*K)
//! M2  = m2_in · act(P)                          c_in x (c_out*K)
//! gamma[o, i, u, v] = M2[i, o*K + u*k + v]
//! A2  = a2_in · a2_inst                         c_in x K
//! beta[o, i, u, v]  = A2[i, u*k + v]            for every o
//! ```

mod activation;
mod conv;
mod count;
mod fc;

pub use activation::ActivationKind;
pub use conv::{ConvShape, LeftConvGrad, LeftConvModulator};
pub use count::{param_count, LayerParams, LayerSpec, ParamCount};
pub use fc::{FcBiasGrad, FcWeightGrad, LeftFcModulator};

use crate::error::{LfsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `R1`: reinterprets a `c_out x (r*K)` matrix as `r x (c_out*K)` over the
/// same row-major stream.
pub fn reshape_r1<T: Scalar>(m: &Matrix<T>, c_out: usize, rank: usize, kk: usize) -> Result<Matrix<T>> {
    if m.dims() != (c_out, rank * kk) {
        return Err(LfsError::shape("reshape_r1", (c_out, rank * kk), m.dims()));
    }
    Matrix::new(rank, c_out * kk, m.data().to_vec())
}

/// Inverse of [`reshape_r1`].
pub fn reshape_r1_inverse<T: Scalar>(
    m: &Matrix<T>,
    c_out: usize,
    rank: usize,
    kk: usize,
) -> Result<Matrix<T>> {
    if m.dims() != (rank, c_out * kk) {
        return Err(LfsError::shape("reshape_r1_inverse", (rank, c_out * kk), m.dims()));
    }
    Matrix::new(c_out, rank * kk, m.data().to_vec())
}

/// `R2`: flattens a `c_out x K` matrix and repeats it as each of `r` rows.
pub fn repeat_r2<T: Scalar>(a1: &Matrix<T>, rank: usize) -> Matrix<T> {
    let row = a1.data();
    let mut data = Vec::with_capacity(row.len() * rank);
    for _ in 0..rank {
        data.extend_from_slice(row);
    }
    Matrix::new(rank, row.len(), data).expect("repeat_r2 sizes are consistent")
}
