use std::collections::HashMap;

use rand::Rng;

use crate::error::{LfsError, Result};
use crate::graph::{Graph, Var};
use crate::left::{ActivationKind, ConvShape, LayerSpec, LeftConvModulator, LeftFcModulator};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerModulator<T> {
    Conv(LeftConvModulator<T>),
    Fc(LeftFcModulator<T>),
}

impl<T: Scalar> LayerModulator<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            LayerModulator::Conv(m) => LayerSpec::Conv(m.shape),
            LayerModulator::Fc(m) => LayerSpec::Fc {
                d_out: m.d_out,
                d_in: m.d_in,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerModulator::Conv(m) => m.param_count(),
            LayerModulator::Fc(m) => m.param_count(),
        }
    }

    /// Factor buffers in checkpoint order.
    pub fn buffers(&self) -> Vec<&[T]> {
        match self {
            LayerModulator::Conv(m) => m.factors().into_iter().map(Matrix::data).collect(),
            LayerModulator::Fc(m) => m.buffers().to_vec(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            LayerModulator::Conv(m) => m.factors_mut().into_iter().map(Matrix::data_mut).collect(),
            LayerModulator::Fc(m) => m.buffers_mut().into_iter().collect(),
        }
    }
}

/// One task's complete set of per-layer modulators, the only state that is
/// trained and persisted per task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatorSet<T> {
    pub task_id: String,
    pub rank: usize,
    pub with_bias: bool,
    pub act: ActivationKind,
    pub layers: Vec<(String, LayerModulator<T>)>,
}

/// Graph leaves for one layer's factors.
#[derive(Debug, Clone)]
pub enum LayerVars {
    Conv {
        factors: Vec<Var>,
        shape: ConvShape,
        rank: usize,
        act: ActivationKind,
    },
    Fc {
        weight: [Var; 4],
        gamma_b: Var,
        beta_b: Var,
        rank: usize,
    },
}

/// A [`ModulatorSet`] placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct ModulatorVars {
    layers: HashMap<String, LayerVars>,
    params: Vec<Var>,
}

impl ModulatorVars {
    pub fn get(&self, name: &str) -> Option<&LayerVars> {
        self.layers.get(name)
    }

    /// All factor leaves in [`ModulatorSet::buffers`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

impl<T: Scalar> ModulatorSet<T> {
    /// Identity-initialized modulators for the given layers.
    pub fn identity<R: Rng + ?Sized>(
        task_id: impl Into<String>,
        layers: &[(String, LayerSpec)],
        rank: usize,
        with_bias: bool,
        act: ActivationKind,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = layers
            .iter()
            .map(|(name, spec)| {
                let m = match *spec {
                    LayerSpec::Conv(shape) => {
                        LayerModulator::Conv(LeftConvModulator::identity(shape, rank, with_bias, act, rng)?)
                    }
                    LayerSpec::Fc { d_out, d_in } => {
                        LayerModulator::Fc(LeftFcModulator::identity(d_out, d_in, rank, rng)?)
                    }
                };
                Ok((name.clone(), m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModulatorSet {
            task_id: task_id.into(),
            rank,
            with_bias,
            act,
            layers,
        })
    }

    pub fn get(&self, name: &str) -> Option<&LayerModulator<T>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerModulator<T>> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, m)| m.param_count()).sum()
    }

    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        self.layers.iter().map(|(n, m)| (n.clone(), m.spec())).collect()
    }

    /// Checks that this set covers exactly `expected`, in order, with matching shapes.
    pub fn check_layers(&self, expected: &[(String, LayerSpec)]) -> Result<()> {
        let actual = self.layer_specs();
        if actual != expected {
            let names = |v: &[(String, LayerSpec)]| v.iter().map(|(n, s)| format!("{n}:{s:?}")).collect::<Vec<_>>();
            return Err(LfsError::shape("modulator layers", names(expected), names(&actual)));
        }
        for (_, m) in &self.layers {
            match m {
                LayerModulator::Conv(c) => c.validate()?,
                LayerModulator::Fc(f) => f.validate()?,
            }
        }
        Ok(())
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|(_, m)| m.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|(_, m)| m.buffers_mut()).collect()
    }

    /// Places every factor on the tape, as parameters when `trainable`.
    pub fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> ModulatorVars {
        let mut vars = ModulatorVars::default();
        let mat = |g: &mut Graph<T>, m: &Matrix<T>, params: &mut Vec<Var>| {
            let t = Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec()).expect("matrix dims");
            let v = g.leaf(t, trainable);
            params.push(v);
            v
        };
        for (name, m) in &self.layers {
            let lv = match m {
                LayerModulator::Conv(c) => {
                    let factors = c.factors().into_iter().map(|f| mat(g, f, &mut vars.params)).collect();
                    LayerVars::Conv {
                        factors,
                        shape: c.shape,
                        rank: c.rank,
                        act: c.act,
                    }
                }
                LayerModulator::Fc(f) => {
                    let weight = [
                        mat(g, &f.m_out, &mut vars.params),
                        mat(g, &f.m_in, &mut vars.params),
                        mat(g, &f.a_out, &mut vars.params),
                        mat(g, &f.a_in, &mut vars.params),
                    ];
                    let gamma_b = g.leaf(Tensor::new(vec![f.d_out], f.gamma_b.clone()).expect("bias dims"), trainable);
                    let beta_b = g.leaf(Tensor::new(vec![f.d_out], f.beta_b.clone()).expect("bias dims"), trainable);
                    vars.params.push(gamma_b);
                    vars.params.push(beta_b);
                    LayerVars::Fc {
                        weight,
                        gamma_b,
                        beta_b,
                        rank: f.rank,
                    }
                }
            };
            vars.layers.insert(name.clone(), lv);
        }
        vars
    }

    pub fn cast<U: Scalar>(&self) -> ModulatorSet<U> {
        ModulatorSet {
            task_id: self.task_id.clone(),
            rank: self.rank,
            with_bias: self.with_bias,
            act: self.act,
            layers: self
                .layers
                .iter()
                .map(|(n, m)| {
                    let m = match m {
                        LayerModulator::Conv(c) => LayerModulator::Conv(c.cast()),
                        LayerModulator::Fc(f) => LayerModulator::Fc(f.cast()),
                    };
                    (n.clone(), m)
                })
                .collect(),
        }
    }
}
