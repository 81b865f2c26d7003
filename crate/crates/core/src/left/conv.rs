use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ActivationKind;
use crate::error::{LfsError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{Matrix, Tensor};

/// Standard deviation of the seeded noise placed on the additive factors at
/// identity initialization.
pub(crate) const INIT_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn new(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        if c_out == 0 || c_in == 0 || k == 0 {
            return Err(LfsError::Config(format!(
                "conv shape needs positive dims, got {c_out}x{c_in}x{k}x{k}"
            )));
        }
        Ok(ConvShape { c_out, c_in, k })
    }

    /// Number of kernel taps, `k * k`.
    pub fn kk(&self) -> usize {
        self.k * self.k
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.kk()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }
}

/// Factorized modulator for one convolution weight of shape `c_out x c_in x k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftConvModulator<T> {
    pub shape: ConvShape,
    pub rank: usize,
    pub act: ActivationKind,
    /// `c_out x r`
    pub m1_out: Matrix<T>,
    /// `r x (r*K)`
    pub m1_inst: Matrix<T>,
    /// `c_in x r`
    pub m2_in: Matrix<T>,
    /// `c_out x r`, present iff the bias path is enabled.
    pub a1_out: Option<Matrix<T>>,
    /// `r x K`, present iff the bias path is enabled.
    pub a1_inst: Option<Matrix<T>>,
    /// `c_in x r`
    pub a2_in: Matrix<T>,
    /// `r x K`
    pub a2_inst: Matrix<T>,
}

/// Gradients for every factor of a [`LeftConvModulator`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeftConvGrad<T> {
    pub m1_out: Matrix<T>,
    pub m1_inst: Matrix<T>,
    pub m2_in: Matrix<T>,
    pub a1_out: Option<Matrix<T>>,
    pub a1_inst: Option<Matrix<T>>,
    pub a2_in: Matrix<T>,
    pub a2_inst: Matrix<T>,
}

impl<T: Scalar> LeftConvGrad<T> {
    /// Gradients in checkpoint factor order.
    pub fn factors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.m1_out, &self.m1_inst, &self.m2_in];
        if let (Some(o), Some(i)) = (&self.a1_out, &self.a1_inst) {
            out.push(o);
            out.push(i);
        }
        out.push(&self.a2_in);
        out.push(&self.a2_inst);
        out
    }
}

impl<T: Scalar> LeftConvModulator<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_factors(
        shape: ConvShape,
        rank: usize,
        act: ActivationKind,
        m1_out: Matrix<T>,
        m1_inst: Matrix<T>,
        m2_in: Matrix<T>,
        a1: Option<(Matrix<T>, Matrix<T>)>,
        a2_in: Matrix<T>,
        a2_inst: Matrix<T>,
    ) -> Result<Self> {
        let (a1_out, a1_inst) = match a1 {
            Some((o, i)) => (Some(o), Some(i)),
            None => (None, None),
        };
        let m = LeftConvModulator {
            shape,
            rank,
            act,
            m1_out,
            m1_inst,
            m2_in,
            a1_out,
            a1_inst,
            a2_in,
            a2_inst,
        };
        m.validate()?;
        Ok(m)
    }

    /// Modulator whose reconstruction is exactly `gamma = 1`, `beta = 0`.
    ///
    /// The multiplicative path is set so every intermediate product is one,
    /// with `m2_in` divided by `act(1)`. The additive paths zero one factor
    /// of each product and put small seeded noise on the other so gradients
    /// reach both.
    pub fn identity<R: Rng + ?Sized>(
        shape: ConvShape,
        rank: usize,
        with_bias: bool,
        act: ActivationKind,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(LfsError::Config("rank must be at least 1".into()));
        }
        let kk = shape.kk();
        let r = T::of(rank as f64);
        let act_one: T = act.apply(T::one());
        let noise = Normal::new(0.0, INIT_NOISE_STD).expect("valid std");
        let mut sample = |rows, cols| Matrix::from_fn(rows, cols, |_, _| T::of(noise.sample(rng)));
        let a1 = if with_bias {
            Some((Matrix::zeros(shape.c_out, rank), sample(rank, kk)))
        } else {
            None
        };
        let a2_inst = sample(rank, kk);
        Self::from_factors(
            shape,
            rank,
            act,
            Matrix::filled(shape.c_out, rank, T::one()),
            Matrix::filled(rank, rank * kk, T::one() / r),
            Matrix::filled(shape.c_in, rank, T::one() / (r * act_one)),
            a1,
            Matrix::zeros(shape.c_in, rank),
            a2_inst,
        )
    }

    pub fn with_bias(&self) -> bool {
        self.a1_out.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        let r = self.rank;
        let kk = s.kk();
        if r == 0 {
            return Err(LfsError::Config("rank must be at least 1".into()));
        }
        let check = |name: &'static str, m: &Matrix<T>, dims: (usize, usize)| {
            if m.dims() != dims {
                Err(LfsError::shape(name, dims, m.dims()))
            } else {
                Ok(())
            }
        };
        check("m1_out", &self.m1_out, (s.c_out, r))?;
        check("m1_inst", &self.m1_inst, (r, r * kk))?;
        check("m2_in", &self.m2_in, (s.c_in, r))?;
        match (&self.a1_out, &self.a1_inst) {
            (Some(o), Some(i)) => {
                check("a1_out", o, (s.c_out, r))?;
                check("a1_inst", i, (r, kk))?;
            }
            (None, None) => {}
            _ => {
                return Err(LfsError::Config(
                    "a1_out and a1_inst must be both present or both absent".into(),
                ))
            }
        }
        check("a2_in", &self.a2_in, (s.c_in, r))?;
        check("a2_inst", &self.a2_inst, (r, kk))?;
        Ok(())
    }

    /// Factors in checkpoint order: `m1_out, m1_inst, m2_in, [a1_out, a1_inst], a2_in, a2_inst`.
    pub fn factors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.m1_out, &self.m1_inst, &self.m2_in];
        if let (Some(o), Some(i)) = (&self.a1_out, &self.a1_inst) {
            out.push(o);
            out.push(i);
        }
        out.push(&self.a2_in);
        out.push(&self.a2_inst);
        out
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.m1_out, &mut self.m1_inst, &mut self.m2_in];
        if let (Some(o), Some(i)) = (&mut self.a1_out, &mut self.a1_inst) {
            out.push(o);
            out.push(i);
        }
        out.push(&mut self.a2_in);
        out.push(&mut self.a2_inst);
        out
    }

    pub fn param_count(&self) -> usize {
        self.factors().iter().map(|m| m.data().len()).sum()
    }

    /// Pre-activation `P = R1(m1_out · m1_inst) + R2(a1_out · a1_inst)`, `r x (c_out*K)`.
    fn pre_activation(&self) -> Result<Vec<T>> {
        let m1 = self.m1_out.matmul(&self.m1_inst)?;
        let mut p = m1.into_data();
        if let (Some(o), Some(i)) = (&self.a1_out, &self.a1_inst) {
            let a1 = o.matmul(i)?;
            let width = a1.data().len();
            for row in p.chunks_exact_mut(width) {
                for (v, b) in row.iter_mut().zip(a1.data()) {
                    *v += *b;
                }
            }
        }
        Ok(p)
    }

    /// Multiplicative modulation `gamma`, shaped `c_out x c_in x k x k`.
    pub fn gamma(&self) -> Result<Tensor<T>> {
        self.validate()?;
        let ConvShape { c_out, c_in, .. } = self.shape;
        let kk = self.shape.kk();
        let width = c_out * kk;
        let act_p: Vec<T> = self.pre_activation()?.into_iter().map(|v| self.act.apply(v)).collect();
        let mut m2 = vec![T::zero(); c_in * width];
        gemm(c_in, self.rank, width, self.m2_in.data(), false, &act_p, false, &mut m2, false);
        let mut gamma = vec![T::zero(); self.shape.numel()];
        for i in 0..c_in {
            for o in 0..c_out {
                let src = &m2[i * width + o * kk..i * width + (o + 1) * kk];
                let dst = (o * c_in + i) * kk;
                gamma[dst..dst + kk].copy_from_slice(src);
            }
        }
        Tensor::new(self.shape.dims().to_vec(), gamma)
    }

    /// Additive modulation `beta`, shaped `c_out x c_in x k x k`, identical
    /// across output channels.
    pub fn beta(&self) -> Result<Tensor<T>> {
        self.validate()?;
        let a2 = self.a2_in.matmul(&self.a2_inst)?;
        let mut beta = Vec::with_capacity(self.shape.numel());
        for _ in 0..self.shape.c_out {
            beta.extend_from_slice(a2.data());
        }
        Tensor::new(self.shape.dims().to_vec(), beta)
    }

    /// `w_hat = w * gamma + beta`. `w` is not modified.
    pub fn modulate(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        if w.shape() != self.shape.dims() {
            return Err(LfsError::shape("modulate_conv", self.shape.dims(), w.shape()));
        }
        let mut out = self.gamma()?;
        let beta = self.beta()?;
        for ((o, wv), b) in out.data_mut().iter_mut().zip(w.data()).zip(beta.data()) {
            *o = *wv * *o + *b;
        }
        Ok(out)
    }

    /// Reverse-mode pass: given `d loss / d w_hat`, returns the gradient of
    /// the loss with respect to every factor.
    pub fn backward(&self, w: &Tensor<T>, grad_w_hat: &[T]) -> Result<LeftConvGrad<T>> {
        self.validate()?;
        let ConvShape { c_out, c_in, .. } = self.shape;
        let numel = self.shape.numel();
        if w.shape() != self.shape.dims() {
            return Err(LfsError::shape("LeftConvModulator::backward", self.shape.dims(), w.shape()));
        }
        if grad_w_hat.len() != numel {
            return Err(LfsError::shape("LeftConvModulator::backward", numel, grad_w_hat.len()));
        }
        let r = self.rank;
        let kk = self.shape.kk();
        let width = c_out * kk;

        // Additive path: beta is replicated over output channels.
        let mut d_a2 = vec![T::zero(); c_in * kk];
        for o in 0..c_out {
            let block = &grad_w_hat[o * c_in * kk..(o + 1) * c_in * kk];
            for (acc, g) in d_a2.iter_mut().zip(block) {
                *acc += *g;
            }
        }
        let mut d_a2_in = Matrix::zeros(c_in, r);
        gemm(c_in, kk, r, &d_a2, false, self.a2_inst.data(), true, d_a2_in.data_mut(), false);
        let mut d_a2_inst = Matrix::zeros(r, kk);
        gemm(r, c_in, kk, self.a2_in.data(), true, &d_a2, false, d_a2_inst.data_mut(), false);

        // Multiplicative path.
        let mut d_m2 = vec![T::zero(); c_in * width];
        for o in 0..c_out {
            for i in 0..c_in {
                let src = (o * c_in + i) * kk;
                let dst = i * width + o * kk;
                for t in 0..kk {
                    d_m2[dst + t] = grad_w_hat[src + t] * w.data()[src + t];
                }
            }
        }
        let p = self.pre_activation()?;
        let act_p: Vec<T> = p.iter().map(|&v| self.act.apply(v)).collect();
        let mut d_m2_in = Matrix::zeros(c_in, r);
        gemm(c_in, width, r, &d_m2, false, &act_p, true, d_m2_in.data_mut(), false);
        let mut d_p = vec![T::zero(); r * width];
        gemm(r, c_in, width, self.m2_in.data(), true, &d_m2, false, &mut d_p, false);
        for (g, &pv) in d_p.iter_mut().zip(&p) {
            *g *= self.act.derivative(pv);
        }
        // d_p read as c_out x (r*K) is d M1.
        let mut d_m1_out = Matrix::zeros(c_out, r);
        gemm(c_out, r * kk, r, &d_p, false, self.m1_inst.data(), true, d_m1_out.data_mut(), false);
        let mut d_m1_inst = Matrix::zeros(r, r * kk);
        gemm(r, c_out, r * kk, self.m1_out.data(), true, &d_p, false, d_m1_inst.data_mut(), false);

        let (a1_out, a1_inst) = match (&self.a1_out, &self.a1_inst) {
            (Some(ao), Some(ai)) => {
                let mut d_a1 = vec![T::zero(); width];
                for row in d_p.chunks_exact(width) {
                    for (acc, g) in d_a1.iter_mut().zip(row) {
                        *acc += *g;
                    }
                }
                let mut g_out = Matrix::zeros(c_out, r);
                gemm(c_out, kk, r, &d_a1, false, ai.data(), true, g_out.data_mut(), false);
                let mut g_inst = Matrix::zeros(r, kk);
                gemm(r, c_out, kk, ao.data(), true, &d_a1, false, g_inst.data_mut(), false);
                (Some(g_out), Some(g_inst))
            }
            _ => (None, None),
        };

        Ok(LeftConvGrad {
            m1_out: d_m1_out,
            m1_inst: d_m1_inst,
            m2_in: d_m2_in,
            a1_out,
            a1_inst,
            a2_in: d_a2_in,
            a2_inst: d_a2_inst,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LeftConvModulator<U> {
        LeftConvModulator {
            shape: self.shape,
            rank: self.rank,
            act: self.act,
            m1_out: self.m1_out.cast(),
            m1_inst: self.m1_inst.cast(),
            m2_in: self.m2_in.cast(),
            a1_out: self.a1_out.as_ref().map(Matrix::cast),
            a1_inst: self.a1_inst.as_ref().map(Matrix::cast),
            a2_in: self.a2_in.cast(),
            a2_inst: self.a2_inst.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn small(m1_inst: f64, act: ActivationKind) -> LeftConvModulator<f64> {
        let shape = ConvShape::new(2, 2, 1).unwrap();
        LeftConvModulator::from_factors(
            shape,
            1,
            act,
            col(&[2.0, 3.0]),
            Matrix::new(1, 1, vec![m1_inst]).unwrap(),
            col(&[1.0, 2.0]),
            None,
            col(&[1.0, 2.0]),
            Matrix::new(1, 1, vec![3.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_gamma_example() {
        let g = small(1.0, ActivationKind::Identity).gamma().unwrap();
        // gamma[o, i] = m1_out[o] * m2_in[i]
        assert_eq!(g.data(), &[2.0, 4.0, 3.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negative_intermediate() {
        let g = small(-1.0, ActivationKind::Relu).gamma().unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_example_and_replication() {
        let m = small(1.0, ActivationKind::Identity);
        let b = m.beta().unwrap();
        assert_eq!(b.data(), &[3.0, 6.0, 3.0, 6.0]);

        let mut zeroed = m.clone();
        zeroed.a2_inst = Matrix::zeros(1, 1);
        assert!(zeroed.beta().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_example() {
        let m = small(1.0, ActivationKind::Identity);
        let w = Tensor::filled(vec![2, 2, 1, 1], 1.0);
        let out = m.modulate(&w).unwrap();
        assert_eq!(out.data(), &[5.0, 10.0, 6.0, 12.0]);
        assert!(m.modulate(&Tensor::filled(vec![2, 2, 3, 3], 1.0)).is_err());
    }

    #[test]
    fn identity_is_exact_for_identity_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = ConvShape::new(5, 3, 3).unwrap();
        let m = LeftConvModulator::<f64>::identity(shape, 4, true, ActivationKind::Identity, &mut rng).unwrap();
        assert!(m.gamma().unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.beta().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_for_every_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ConvShape::new(4, 6, 3).unwrap();
        let w = Tensor::new(vec![4, 6, 3, 3], (0..216).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        for act in ActivationKind::ALL {
            for rank in [1, 2, 3] {
                let m = LeftConvModulator::<f32>::identity(shape, rank, true, act, &mut rng).unwrap();
                let out = m.modulate(&w).unwrap();
                assert!(out.max_abs_diff(&w) <= 1e-6, "{act} r={rank}");
            }
        }
    }

    #[test]
    fn validate_rejects_half_bias() {
        let mut m = small(1.0, ActivationKind::Identity);
        m.a1_out = Some(Matrix::zeros(2, 1));
        assert!(m.validate().is_err());
        let mut m = small(1.0, ActivationKind::Identity);
        m.m2_in = Matrix::zeros(3, 1);
        assert!(matches!(m.gamma(), Err(LfsError::Shape { .. })));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ConvShape::new(0, 1, 1).is_err());
        assert!(ConvShape::new(1, 1, 0).is_err());
    }
}
