use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::layers::{he_std, push_le, ConvLayer, Linear};
use crate::error::{LfsError, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, CHANNELS};
use crate::left::{ConvShape, LayerSpec};
use crate::lifelong::{LayerVars, ModulatorSet, ModulatorVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Style-based generator dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub base_resolution: usize,
    pub target_resolution: usize,
    /// Output channels of each synthesis block; the constant input uses the first width.
    pub channels: Vec<usize>,
    pub noise_injection: bool,
    /// Whether the per-block style affine layers also receive modulators.
    pub modulate_affine: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 3,
            base_resolution: 4,
            target_resolution: 32,
            channels: vec![128, 64, 32],
            noise_injection: false,
            modulate_affine: false,
        }
    }
}

impl GeneratorConfig {
    pub fn block_count(&self) -> usize {
        (self.target_resolution / self.base_resolution.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if ![16, 32, 64].contains(&self.target_resolution) {
            return Err(LfsError::Config(format!(
                "target_resolution must be 16, 32 or 64, got {}",
                self.target_resolution
            )));
        }
        let b = self.base_resolution;
        if b < 2 || !b.is_power_of_two() || b >= self.target_resolution {
            return Err(LfsError::Config(format!(
                "base_resolution must be a power of two below the target, got {b}"
            )));
        }
        if self.channels.len() != self.block_count() {
            return Err(LfsError::Config(format!(
                "{} channel widths given for {} synthesis blocks",
                self.channels.len(),
                self.block_count()
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.channels.contains(&0) {
            return Err(LfsError::Config("latent sizes and channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseInput<T> {
    /// Per-channel strength.
    pub strength: Vec<T>,
    /// Fixed `res x res` noise pattern.
    pub pattern: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBlock<T> {
    /// Maps `w` to per-input-channel scales.
    pub affine: Linear<T>,
    pub conv: ConvLayer<T>,
    pub noise: Option<NoiseInput<T>>,
}

/// Frozen base generator weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights<T> {
    pub config: GeneratorConfig,
    pub mapping: Vec<Linear<T>>,
    /// `C0 x base x base`.
    pub const_input: Tensor<T>,
    pub blocks: Vec<SynthBlock<T>>,
    pub to_rgb: ConvLayer<T>,
}

/// Tape handles produced by one batched generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub w: Var,
    pub features: Vec<Var>,
    pub image: Var,
}

/// Everything recorded for one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord<T> {
    pub z: Vec<T>,
    pub w: Vec<T>,
    pub features: Vec<Tensor<T>>,
    pub image: Tensor<T>,
}

impl<T: Scalar> ForwardRecord<T> {
    pub fn to_image(&self) -> Image {
        image_from_chw(self.image.data(), self.image.shape()[1], self.image.shape()[2])
    }
}

fn image_from_chw<T: Scalar>(data: &[T], h: usize, w: usize) -> Image {
    Image::new(w, h, data.iter().map(|v| v.as_f64() as f32).collect()).expect("3 x h x w image")
}

pub fn layer_name_mapping(i: usize) -> String {
    format!("mapping.{i}")
}

pub fn layer_name_affine(l: usize) -> String {
    format!("synthesis.{l}.affine")
}

pub fn layer_name_conv(l: usize) -> String {
    format!("synthesis.{l}.conv")
}

pub const LAYER_TO_RGB: &str = "to_rgb";

impl<T: Scalar> GeneratorWeights<T> {
    /// Seeded base initialization (the frozen backbone).
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mapping = Vec::with_capacity(config.mapping_layers);
        let mut d_in = config.z_dim;
        for i in 0..config.mapping_layers {
            let d_out = if i + 1 == config.mapping_layers { config.w_dim } else { config.w_dim.max(config.z_dim) };
            mapping.push(Linear::init(d_out, d_in, he_std(d_in), 0.0, &mut rng));
            d_in = d_out;
        }
        let w_dim = if config.mapping_layers == 0 { config.z_dim } else { config.w_dim };
        let c0 = config.channels[0];
        let b = config.base_resolution;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let const_input = Tensor::new(
            vec![c0, b, b],
            (0..c0 * b * b).map(|_| T::of(unit.sample(&mut rng))).collect(),
        )?;
        let mut blocks = Vec::with_capacity(config.block_count());
        let mut c_in = c0;
        let mut res = b;
        for &c_out in &config.channels {
            res *= 2;
            let affine = Linear::init(c_in, w_dim, 0.5 / (w_dim as f64).sqrt(), 1.0, &mut rng);
            let conv = ConvLayer::init(c_out, c_in, 3, he_std(c_in * 9), &mut rng);
            let noise = config.noise_injection.then(|| NoiseInput {
                strength: vec![T::of(0.1); c_out],
                pattern: (0..res * res).map(|_| T::of(unit.sample(&mut rng))).collect(),
            });
            blocks.push(SynthBlock { affine, conv, noise });
            c_in = c_out;
        }
        let to_rgb = ConvLayer::init(CHANNELS, c_in, 1, 0.5 / (c_in as f64).sqrt(), &mut rng);
        Ok(GeneratorWeights {
            config,
            mapping,
            const_input,
            blocks,
            to_rgb,
        })
    }

    pub fn w_dim(&self) -> usize {
        self.mapping.last().map_or(self.config.z_dim, |l| l.weight.rows())
    }

    /// Layers that receive modulators, in forward order.
    pub fn modulated_layers(&self) -> Vec<(String, LayerSpec)> {
        let mut out = Vec::new();
        for (i, l) in self.mapping.iter().enumerate() {
            out.push((layer_name_mapping(i), fc_spec(l)));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            if self.config.modulate_affine {
                out.push((layer_name_affine(l), fc_spec(&block.affine)));
            }
            out.push((layer_name_conv(l), conv_spec(&block.conv)));
        }
        out.push((LAYER_TO_RGB.to_string(), conv_spec(&self.to_rgb)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.mapping.iter().map(Linear::param_count).sum::<usize>() + self.const_input.len();
        for b in &self.blocks {
            n += b.affine.param_count() + b.conv.param_count();
            if let Some(noise) = &b.noise {
                n += noise.strength.len();
            }
        }
        n + self.to_rgb.param_count()
    }

    /// Deterministic little-endian serialization of every base weight.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.mapping {
            push_le(&mut out, l.weight.data());
            push_le(&mut out, &l.bias);
        }
        push_le(&mut out, self.const_input.data());
        for b in &self.blocks {
            push_le(&mut out, b.affine.weight.data());
            push_le(&mut out, &b.affine.bias);
            push_le(&mut out, b.conv.weight.data());
            push_le(&mut out, &b.conv.bias);
            if let Some(noise) = &b.noise {
                push_le(&mut out, &noise.strength);
                push_le(&mut out, &noise.pattern);
            }
        }
        push_le(&mut out, self.to_rgb.weight.data());
        push_le(&mut out, &self.to_rgb.bias);
        out
    }

    /// Hex SHA-256 of [`Self::to_bytes`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn linear_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &Linear<T>,
        name: &str,
        mods: Option<&ModulatorVars>,
    ) -> Result<Var> {
        let (d_out, d_in) = layer.weight.dims();
        let w = g.constant(Tensor::new(vec![d_out, d_in], layer.weight.data().to_vec())?);
        let b = g.constant(Tensor::new(vec![d_out], layer.bias.clone())?);
        let (w, b) = match mods.and_then(|m| m.get(name)) {
            Some(LayerVars::Fc {
                weight,
                gamma_b,
                beta_b,
                rank,
            }) => {
                let w_hat = g.modulate_fc_weight(w, *weight, *rank)?;
                let scaled = g.mul(*gamma_b, b)?;
                let b_hat = g.add(scaled, *beta_b)?;
                (w_hat, b_hat)
            }
            Some(LayerVars::Conv { .. }) => {
                return Err(LfsError::shape("modulator kind", format!("fc for {name}"), "conv"));
            }
            None => (w, b),
        };
        let y = g.matmul(x, w, true)?;
        g.add_row_bias(y, b)
    }

    fn conv_weight(&self, g: &mut Graph<T>, layer: &ConvLayer<T>, name: &str, mods: Option<&ModulatorVars>) -> Result<Var> {
        let w = g.constant(layer.weight.clone());
        match mods.and_then(|m| m.get(name)) {
            Some(LayerVars::Conv {
                factors,
                shape,
                rank,
                act,
            }) => g.modulate_conv(w, factors.clone(), *shape, *rank, *act),
            Some(LayerVars::Fc { .. }) => Err(LfsError::shape("modulator kind", format!("conv for {name}"), "fc")),
            None => Ok(w),
        }
    }

    /// Batched forward pass on a tape; `z` is `N x z_dim`.
    pub fn forward_graph(&self, g: &mut Graph<T>, mods: Option<&ModulatorVars>, z: &Tensor<T>) -> Result<GeneratorVars> {
        let n = match *z.shape() {
            [n, d] if d == self.config.z_dim => n,
            ref s => return Err(LfsError::shape("generator latent", [0, self.config.z_dim], s)),
        };
        if n == 0 {
            return Err(LfsError::Empty("generator batch"));
        }
        let mut zn = z.clone();
        for row in zn.data_mut().chunks_exact_mut(self.config.z_dim) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / T::of(row.len() as f64);
            let inv = T::one() / (ms + T::of(1e-8)).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let mut x = g.constant(zn);
        for (i, layer) in self.mapping.iter().enumerate() {
            let y = self.linear_graph(g, x, layer, &layer_name_mapping(i), mods)?;
            x = g.leaky_relu(y);
        }
        let w = x;

        let b = self.config.base_resolution;
        let c0 = self.const_input.shape()[0];
        let mut batch_const = Vec::with_capacity(n * self.const_input.len());
        for _ in 0..n {
            batch_const.extend_from_slice(self.const_input.data());
        }
        let mut h = g.constant(Tensor::new(vec![n, c0, b, b], batch_const)?);
        let mut features = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let style = self.linear_graph(g, w, &block.affine, &layer_name_affine(l), mods)?;
            h = g.channel_scale(h, style)?;
            h = g.upsample2(h)?;
            let weight = self.conv_weight(g, &block.conv, &layer_name_conv(l), mods)?;
            h = g.conv2d(h, weight)?;
            let bias = g.constant(Tensor::new(vec![block.conv.bias.len()], block.conv.bias.clone())?);
            h = g.add_channel_bias(h, bias)?;
            if let Some(noise) = &block.noise {
                let shape = g.shape(h).to_vec();
                let hw = shape[2] * shape[3];
                let mut data = Vec::with_capacity(n * shape[1] * hw);
                for _ in 0..n {
                    for s in &noise.strength {
                        data.extend(noise.pattern.iter().map(|p| *p * *s));
                    }
                }
                let nv = g.constant(Tensor::new(shape, data)?);
                h = g.add(h, nv)?;
            }
            h = g.leaky_relu(h);
            features.push(h);
        }
        let weight = self.conv_weight(g, &self.to_rgb, LAYER_TO_RGB, mods)?;
        let rgb = g.conv2d(h, weight)?;
        let bias = g.constant(Tensor::new(vec![CHANNELS], self.to_rgb.bias.clone())?);
        let image = g.add_channel_bias(rgb, bias)?;
        Ok(GeneratorVars { w, features, image })
    }

    fn check_mods(&self, mods: Option<&ModulatorSet<T>>) -> Result<()> {
        if let Some(m) = mods {
            m.check_layers(&self.modulated_layers())?;
        }
        Ok(())
    }

    /// Plain batched forward returning one record per latent row.
    pub fn forward(&self, mods: Option<&ModulatorSet<T>>, z: &Tensor<T>) -> Result<Vec<ForwardRecord<T>>> {
        self.check_mods(mods)?;
        let mut g = Graph::new();
        let mv = mods.map(|m| m.to_graph(&mut g, false));
        let vars = self.forward_graph(&mut g, mv.as_ref(), z)?;
        Ok(split_records(&g, &vars, z))
    }

    /// Images only, chunked to bound tape memory.
    pub fn generate(&self, mods: Option<&ModulatorSet<T>>, z: &Tensor<T>) -> Result<Vec<Image>> {
        self.check_mods(mods)?;
        let zd = self.config.z_dim;
        let n = z.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(GEN_CHUNK) {
            let end = (start + GEN_CHUNK).min(n);
            let chunk = Tensor::new(vec![end - start, zd], z.data()[start * zd..end * zd].to_vec())?;
            let mut g = Graph::new();
            let mv = mods.map(|m| m.to_graph(&mut g, false));
            let vars = self.forward_graph(&mut g, mv.as_ref(), &chunk)?;
            out.extend(images_from_var(&g, vars.image));
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorWeights<U> {
        GeneratorWeights {
            config: self.config.clone(),
            mapping: self.mapping.iter().map(Linear::cast).collect(),
            const_input: self.const_input.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| SynthBlock {
                    affine: b.affine.cast(),
                    conv: b.conv.cast(),
                    noise: b.noise.as_ref().map(|n| NoiseInput {
                        strength: n.strength.iter().map(|v| U::of(v.as_f64())).collect(),
                        pattern: n.pattern.iter().map(|v| U::of(v.as_f64())).collect(),
                    }),
                })
                .collect(),
            to_rgb: self.to_rgb.cast(),
        }
    }
}

const GEN_CHUNK: usize = 32;

fn fc_spec<T: Scalar>(l: &Linear<T>) -> LayerSpec {
    let (d_out, d_in) = l.weight.dims();
    LayerSpec::Fc { d_out, d_in }
}

fn conv_spec<T: Scalar>(l: &ConvLayer<T>) -> LayerSpec {
    let s = l.weight.shape();
    LayerSpec::Conv(ConvShape {
        c_out: s[0],
        c_in: s[1],
        k: s[2],
    })
}

/// Splits a batched image node into per-sample images.
pub fn images_from_var<T: Scalar>(g: &Graph<T>, image: Var) -> Vec<Image> {
    let s = g.shape(image);
    let (h, w) = (s[2], s[3]);
    g.value(image)
        .chunks_exact(CHANNELS * h * w)
        .map(|c| image_from_chw(c, h, w))
        .collect()
}

/// Splits batched tape values into per-sample records.
pub fn split_records<T: Scalar>(g: &Graph<T>, vars: &GeneratorVars, z: &Tensor<T>) -> Vec<ForwardRecord<T>> {
    let n = z.shape()[0];
    let per = |v: Var| {
        let s = g.shape(v);
        let d = s.iter().skip(1).product::<usize>();
        (s[1..].to_vec(), d)
    };
    let zd = z.shape()[1];
    let (_, wd) = per(vars.w);
    let (img_shape, img_d) = per(vars.image);
    (0..n)
        .map(|i| ForwardRecord {
            z: z.data()[i * zd..(i + 1) * zd].to_vec(),
            w: g.value(vars.w)[i * wd..(i + 1) * wd].to_vec(),
            features: vars
                .features
                .iter()
                .map(|f| {
                    let (shape, d) = per(*f);
                    Tensor::new(shape, g.value(*f)[i * d..(i + 1) * d].to_vec()).expect("feature dims")
                })
                .collect(),
            image: Tensor::new(img_shape.clone(), g.value(vars.image)[i * img_d..(i + 1) * img_d].to_vec())
                .expect("image dims"),
        })
        .collect()
}

/// `n x z_dim` standard normal latents from a seeded stream.
pub fn sample_latents<T: Scalar, R: rand::Rng + ?Sized>(n: usize, z_dim: usize, rng: &mut R) -> Tensor<T> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::new(vec![n, z_dim], (0..n * z_dim).map(|_| T::of(unit.sample(rng))).collect()).expect("latent dims")
}
