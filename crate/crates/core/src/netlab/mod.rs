//! Desk-scale style-based generator and convolutional discriminator built on
//! the autodiff tape.

mod discriminator;
mod generator;
mod layers;

pub use discriminator::{images_to_tensor, Discriminator, DiscriminatorConfig, DiscriminatorVars, Head};
pub use generator::{
    images_from_var, layer_name_affine, layer_name_conv, layer_name_mapping, sample_latents, split_records,
    ForwardRecord, GeneratorConfig, GeneratorVars, GeneratorWeights, NoiseInput, SynthBlock, LAYER_TO_RGB,
};
pub use layers::{ConvLayer, Linear};
