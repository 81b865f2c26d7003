use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{he_std, ConvLayer, Linear};
use crate::error::{LfsError, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    /// Average per-location logits instead of a dense head.
    pub patch: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 32,
            channels: vec![32, 64, 128, 128],
            patch: false,
        }
    }
}

/// Trainable critic. Unlike the generator it is rebuilt for every task.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub convs: Vec<ConvLayer<T>>,
    pub head: Head<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Dense(Linear<T>),
    Patch(ConvLayer<T>),
}

/// Tape leaves for one discriminator pass, in [`Discriminator::buffers`] order.
#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub params: Vec<Var>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) {
            return Err(LfsError::Config("discriminator needs positive channel widths".into()));
        }
        if config.resolution < 4 || !config.resolution.is_power_of_two() {
            return Err(LfsError::Config(format!(
                "discriminator resolution must be a power of two >= 4, got {}",
                config.resolution
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = CHANNELS;
        let mut convs = Vec::with_capacity(config.channels.len());
        for &c in &config.channels {
            convs.push(ConvLayer::init(c, c_in, 3, he_std(c_in * 9), &mut rng));
            c_in = c;
        }
        let side = Self::final_side(&config);
        let head = if config.patch {
            Head::Patch(ConvLayer::init(1, c_in, 1, he_std(c_in), &mut rng))
        } else {
            let d_in = c_in * side * side;
            Head::Dense(Linear::init(1, d_in, he_std(d_in) * 0.5, 0.0, &mut rng))
        };
        Ok(Discriminator { config, convs, head })
    }

    fn final_side(config: &DiscriminatorConfig) -> usize {
        let mut side = config.resolution;
        for _ in &config.channels {
            if side > 4 {
                side /= 2;
            }
        }
        side
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weight.data());
            out.push(&c.bias[..]);
        }
        match &self.head {
            Head::Dense(l) => {
                out.push(l.weight.data());
                out.push(&l.bias[..]);
            }
            Head::Patch(c) => {
                out.push(c.weight.data());
                out.push(&c.bias[..]);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weight.data_mut());
            out.push(&mut c.bias[..]);
        }
        match &mut self.head {
            Head::Dense(l) => {
                out.push(l.weight.data_mut());
                out.push(&mut l.bias[..]);
            }
            Head::Patch(c) => {
                out.push(c.weight.data_mut());
                out.push(&mut c.bias[..]);
            }
        }
        out
    }

    /// Places weights on the tape; `trainable` controls whether they receive gradients.
    pub fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> DiscriminatorVars {
        let mut params = Vec::new();
        let mut put = |g: &mut Graph<T>, shape: Vec<usize>, data: &[T]| {
            let v = g.leaf(Tensor::new(shape, data.to_vec()).expect("weight dims"), trainable);
            params.push(v);
        };
        for c in &self.convs {
            put(g, c.weight.shape().to_vec(), c.weight.data());
            put(g, vec![c.bias.len()], &c.bias);
        }
        match &self.head {
            Head::Dense(l) => {
                put(g, vec![l.weight.rows(), l.weight.cols()], l.weight.data());
                put(g, vec![l.bias.len()], &l.bias);
            }
            Head::Patch(c) => {
                put(g, c.weight.shape().to_vec(), c.weight.data());
                put(g, vec![c.bias.len()], &c.bias);
            }
        }
        DiscriminatorVars { params }
    }

    /// Logits `N` for an `N x 3 x R x R` batch.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != CHANNELS || s[2] != r || s[3] != r {
            return Err(LfsError::shape("discriminator input", ["N", "3", &r.to_string(), &r.to_string()], s));
        }
        let n = s[0];
        let mut h = x;
        let mut side = r;
        for (i, _) in self.convs.iter().enumerate() {
            h = g.conv2d(h, vars.params[2 * i])?;
            h = g.add_channel_bias(h, vars.params[2 * i + 1])?;
            h = g.leaky_relu(h);
            if side > 4 {
                h = g.avg_pool2(h)?;
                side /= 2;
            }
        }
        let (hw, hb) = (vars.params[2 * self.convs.len()], vars.params[2 * self.convs.len() + 1]);
        match self.head {
            Head::Dense(_) => {
                let d = g.shape(h)[1..].iter().product::<usize>();
                let flat = g.reshape(h, vec![n, d])?;
                let y = g.matmul(flat, hw, true)?;
                let y = g.add_row_bias(y, hb)?;
                g.reshape(y, vec![n])
            }
            Head::Patch(_) => {
                let y = g.conv2d(h, hw)?;
                let y = g.add_channel_bias(y, hb)?;
                g.mean_per_sample(y)
            }
        }
    }

    /// Logits for a slice of images.
    pub fn score(&self, images: &[Image]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.to_graph(&mut g, false);
        let x = g.constant(images_to_tensor(images)?);
        let y = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(y).to_vec())
    }
}

/// Stacks same-size images into an `N x 3 x H x W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(LfsError::Empty("image batch"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * w * h);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(LfsError::shape("image batch", (w, h), (im.width, im.height)));
        }
        data.extend(im.data.iter().map(|v| T::of(*v as f64)));
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}
