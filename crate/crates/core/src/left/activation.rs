use std::fmt;
use std::str::FromStr;

use crate::error::LfsError;
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.2;

/// Activation applied to the intermediate `gamma` reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ActivationKind {
    Identity,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Gelu,
    Silu,
    #[default]
    Relu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 7] = [
        ActivationKind::Identity,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::LeakyRelu,
        ActivationKind::Gelu,
        ActivationKind::Silu,
        ActivationKind::Relu,
    ];

    /// Stable numeric id used by the checkpoint format.
    pub fn id(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Sigmoid => 1,
            ActivationKind::Tanh => 2,
            ActivationKind::LeakyRelu => 3,
            ActivationKind::Gelu => 4,
            ActivationKind::Silu => 5,
            ActivationKind::Relu => 6,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Silu => "silu",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            ActivationKind::Gelu => {
                let v = x.as_f64();
                T::of(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            }
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Relu => x.max(T::zero()),
        }
    }

    /// Derivative with respect to the pre-activation input.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationKind::Identity => T::one(),
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            ActivationKind::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            ActivationKind::Gelu => {
                let v = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                T::of(cdf + v * pdf)
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            ActivationKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = LfsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == norm || (norm == "lrelu" && *a == ActivationKind::LeakyRelu))
            .ok_or_else(|| LfsError::Config(format!("unknown activation `{s}`")))
    }
}
