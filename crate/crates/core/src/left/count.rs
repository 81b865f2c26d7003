use super::ConvShape;

/// A layer whose weight is modulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvShape),
    Fc { d_out: usize, d_in: usize },
}

/// Stored entries of one layer's modulator, split by path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerParams {
    /// Multiplicative path (`m1_out, m1_inst, m2_in` or `m_out, m_in, gamma_b`).
    pub gamma: usize,
    /// Additive path (`a2_in, a2_inst` or `a_out, a_in, beta_b`).
    pub beta: usize,
    /// Optional conv bias path (`a1_out, a1_inst`).
    pub bias: usize,
}

impl LayerParams {
    pub fn total(&self) -> usize {
        self.gamma + self.beta + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub per_layer: Vec<LayerParams>,
    pub total: usize,
}

pub fn param_count(layers: &[LayerSpec], rank: usize, with_bias: bool) -> ParamCount {
    let r = rank;
    let per_layer: Vec<LayerParams> = layers
        .iter()
        .map(|layer| match *layer {
            LayerSpec::Conv(s) => {
                let kk = s.kk();
                LayerParams {
                    gamma: s.c_out * r + r * r * kk + s.c_in * r,
                    beta: s.c_in * r + r * kk,
                    bias: if with_bias { s.c_out * r + r * kk } else { 0 },
                }
            }
            LayerSpec::Fc { d_out, d_in } => {
                let half = d_out * r + r * d_in + d_out;
                LayerParams {
                    gamma: half,
                    beta: half,
                    bias: 0,
                }
            }
        })
        .collect();
    let total = per_layer.iter().map(LayerParams::total).sum();
    ParamCount { per_layer, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::left::{ActivationKind, LeftConvModulator, LeftFcModulator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_example_counts() {
        let s = ConvShape::new(8, 4, 3).unwrap();
        let with = param_count(&[LayerSpec::Conv(s)], 1, true);
        assert_eq!(with.total, 51);
        assert_eq!(
            with.per_layer[0],
            LayerParams {
                gamma: 21,
                beta: 13,
                bias: 17
            }
        );
        assert_eq!(param_count(&[LayerSpec::Conv(s)], 1, false).total, 34);
        assert_eq!(param_count(&[], 3, true).total, 0);
    }

    #[test]
    fn counts_match_stored_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (c_out, c_in, k, r, bias) in [(8, 4, 3, 1, true), (5, 7, 1, 3, false), (16, 2, 3, 4, true)] {
            let s = ConvShape::new(c_out, c_in, k).unwrap();
            let m = LeftConvModulator::<f32>::identity(s, r, bias, ActivationKind::Relu, &mut rng).unwrap();
            assert_eq!(param_count(&[LayerSpec::Conv(s)], r, bias).total, m.param_count());
        }
        let fc = LeftFcModulator::<f32>::identity(6, 9, 2, &mut rng).unwrap();
        assert_eq!(param_count(&[LayerSpec::Fc { d_out: 6, d_in: 9 }], 2, true).total, fc.param_count());
    }

    #[test]
    fn monotone_in_rank_and_bias() {
        let layers = [
            LayerSpec::Conv(ConvShape::new(32, 16, 3).unwrap()),
            LayerSpec::Fc { d_out: 64, d_in: 64 },
        ];
        let mut prev = 0;
        for r in [1, 2, 4, 8, 16] {
            let without = param_count(&layers, r, false).total;
            let with = param_count(&layers, r, true).total;
            assert!(with > without);
            assert!(without > prev);
            prev = with;
        }
    }
}
