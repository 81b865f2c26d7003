use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::INIT_NOISE_STD;
use crate::error::{LfsError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Matrix;

/// Factorized modulator for a fully-connected layer with weight
/// `d_out x d_in` and bias `d_out`. The bias modulators are dense.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftFcModulator<T> {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub m_out: Matrix<T>,
    pub m_in: Matrix<T>,
    pub a_out: Matrix<T>,
    pub a_in: Matrix<T>,
    pub gamma_b: Vec<T>,
    pub beta_b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcWeightGrad<T> {
    pub m_out: Matrix<T>,
    pub m_in: Matrix<T>,
    pub a_out: Matrix<T>,
    pub a_in: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcBiasGrad<T> {
    pub gamma_b: Vec<T>,
    pub beta_b: Vec<T>,
}

impl<T: Scalar> LeftFcModulator<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_factors(
        rank: usize,
        m_out: Matrix<T>,
        m_in: Matrix<T>,
        a_out: Matrix<T>,
        a_in: Matrix<T>,
        gamma_b: Vec<T>,
        beta_b: Vec<T>,
    ) -> Result<Self> {
        let m = LeftFcModulator {
            d_out: m_out.rows(),
            d_in: m_in.cols(),
            rank,
            m_out,
            m_in,
            a_out,
            a_in,
            gamma_b,
            beta_b,
        };
        m.validate()?;
        Ok(m)
    }

    /// Modulator reconstructing `gamma = 1`, `beta = 0` for weight and bias.
    pub fn identity<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || d_out == 0 || d_in == 0 {
            return Err(LfsError::Config(format!(
                "fc modulator needs positive dims and rank, got {d_out}x{d_in} r={rank}"
            )));
        }
        let noise = Normal::new(0.0, INIT_NOISE_STD).expect("valid std");
        Self::from_factors(
            rank,
            Matrix::filled(d_out, rank, T::one()),
            Matrix::filled(rank, d_in, T::one() / T::of(rank as f64)),
            Matrix::zeros(d_out, rank),
            Matrix::from_fn(rank, d_in, |_, _| T::of(noise.sample(rng))),
            vec![T::one(); d_out],
            vec![T::zero(); d_out],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (o, i, r) = (self.d_out, self.d_in, self.rank);
        if r == 0 {
            return Err(LfsError::Config("rank must be at least 1".into()));
        }
        for (name, m, dims) in [
            ("m_out", &self.m_out, (o, r)),
            ("m_in", &self.m_in, (r, i)),
            ("a_out", &self.a_out, (o, r)),
            ("a_in", &self.a_in, (r, i)),
        ] {
            if m.dims() != dims {
                return Err(LfsError::shape(name, dims, m.dims()));
            }
        }
        if self.gamma_b.len() != o || self.beta_b.len() != o {
            return Err(LfsError::shape(
                "fc bias modulators",
                o,
                (self.gamma_b.len(), self.beta_b.len()),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * (self.d_out * self.rank + self.rank * self.d_in) + 2 * self.d_out
    }

    pub fn gamma_w(&self) -> Result<Matrix<T>> {
        self.m_out.matmul(&self.m_in)
    }

    pub fn beta_w(&self) -> Result<Matrix<T>> {
        self.a_out.matmul(&self.a_in)
    }

    /// Returns `(gamma_w, beta_w, gamma_b, beta_b)`.
    pub fn reconstruct(&self) -> Result<(Matrix<T>, Matrix<T>, Vec<T>, Vec<T>)> {
        self.validate()?;
        Ok((
            self.gamma_w()?,
            self.beta_w()?,
            self.gamma_b.clone(),
            self.beta_b.clone(),
        ))
    }

    pub fn modulate_weight(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        self.validate()?;
        if w.dims() != (self.d_out, self.d_in) {
            return Err(LfsError::shape("modulate_fc", (self.d_out, self.d_in), w.dims()));
        }
        let mut out = self.gamma_w()?;
        let beta = self.beta_w()?;
        for ((o, wv), b) in out.data_mut().iter_mut().zip(w.data()).zip(beta.data()) {
            *o = *wv * *o + *b;
        }
        Ok(out)
    }

    pub fn modulate_bias(&self, b: &[T]) -> Result<Vec<T>> {
        if b.len() != self.d_out {
            return Err(LfsError::shape("modulate_fc bias", self.d_out, b.len()));
        }
        Ok(b.iter()
            .zip(&self.gamma_b)
            .zip(&self.beta_b)
            .map(|((v, g), be)| *v * *g + *be)
            .collect())
    }

    pub fn modulate(&self, w: &Matrix<T>, b: &[T]) -> Result<(Matrix<T>, Vec<T>)> {
        Ok((self.modulate_weight(w)?, self.modulate_bias(b)?))
    }

    pub fn weight_backward(&self, w: &Matrix<T>, grad: &[T]) -> Result<FcWeightGrad<T>> {
        let (o, i, r) = (self.d_out, self.d_in, self.rank);
        if w.dims() != (o, i) || grad.len() != o * i {
            return Err(LfsError::shape("fc weight_backward", (o, i), (w.dims(), grad.len())));
        }
        let d_gamma: Vec<T> = grad.iter().zip(w.data()).map(|(g, wv)| *g * *wv).collect();
        let mut m_out = Matrix::zeros(o, r);
        gemm(o, i, r, &d_gamma, false, self.m_in.data(), true, m_out.data_mut(), false);
        let mut m_in = Matrix::zeros(r, i);
        gemm(r, o, i, self.m_out.data(), true, &d_gamma, false, m_in.data_mut(), false);
        let mut a_out = Matrix::zeros(o, r);
        gemm(o, i, r, grad, false, self.a_in.data(), true, a_out.data_mut(), false);
        let mut a_in = Matrix::zeros(r, i);
        gemm(r, o, i, self.a_out.data(), true, grad, false, a_in.data_mut(), false);
        Ok(FcWeightGrad { m_out, m_in, a_out, a_in })
    }

    pub fn bias_backward(&self, b: &[T], grad: &[T]) -> Result<FcBiasGrad<T>> {
        if b.len() != self.d_out || grad.len() != self.d_out {
            return Err(LfsError::shape("fc bias_backward", self.d_out, (b.len(), grad.len())));
        }
        Ok(FcBiasGrad {
            gamma_b: grad.iter().zip(b).map(|(g, v)| *g * *v).collect(),
            beta_b: grad.to_vec(),
        })
    }

    /// Factor buffers in checkpoint order: `m_out, m_in, a_out, a_in, gamma_b, beta_b`.
    pub fn buffers(&self) -> [&[T]; 6] {
        [
            self.m_out.data(),
            self.m_in.data(),
            self.a_out.data(),
            self.a_in.data(),
            &self.gamma_b,
            &self.beta_b,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.m_out.data_mut(),
            self.m_in.data_mut(),
            self.a_out.data_mut(),
            self.a_in.data_mut(),
            &mut self.gamma_b,
            &mut self.beta_b,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> LeftFcModulator<U> {
        LeftFcModulator {
            d_out: self.d_out,
            d_in: self.d_in,
            rank: self.rank,
            m_out: self.m_out.cast(),
            m_in: self.m_in.cast(),
            a_out: self.a_out.cast(),
            a_in: self.a_in.cast(),
            gamma_b: self.gamma_b.iter().map(|v| U::of(v.as_f64())).collect(),
            beta_b: self.beta_b.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
