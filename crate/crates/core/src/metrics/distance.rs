use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{LfsError, Result};
use crate::image::{Image, CHANNELS};

/// A symmetric, nonnegative image distance with `d(x, x) = 0`, standing in
/// for a learned perceptual metric.
///
/// Distances are computed from per-image feature vectors so that batched
/// comparisons reuse features.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &'static str;

    fn features(&self, img: &Image) -> Vec<f32>;

    fn feature_distance(&self, a: &[f32], b: &[f32]) -> f64;

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.resolution() != b.resolution() {
            return Err(LfsError::shape("perceptual distance", a.resolution(), b.resolution()));
        }
        Ok(self.feature_distance(&self.features(a), &self.features(b)))
    }
}

fn common_resolution<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Option<(usize, usize)>> {
    let mut res = None;
    for img in images {
        match res {
            None => res = Some(img.resolution()),
            Some(r) if r != img.resolution() => {
                return Err(LfsError::shape("image resolution", r, img.resolution()));
            }
            _ => {}
        }
    }
    Ok(res)
}

/// Symmetric `n x n` distance matrix, row-major.
pub fn pairwise_distances(dist: &dyn PerceptualDistance, images: &[Image]) -> Result<Vec<f64>> {
    common_resolution(images)?;
    let feats: Vec<Vec<f32>> = images.par_iter().map(|i| dist.features(i)).collect();
    let n = images.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if j > i { dist.feature_distance(&feats[i], &feats[j]) } else { 0.0 }).collect())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            out[i * n + j] = rows[i][j];
            out[j * n + i] = rows[i][j];
        }
    }
    Ok(out)
}

/// `a.len() x b.len()` distance matrix, row-major.
pub fn cross_distances(dist: &dyn PerceptualDistance, a: &[Image], b: &[Image]) -> Result<Vec<f64>> {
    common_resolution(a.iter().chain(b))?;
    let fb: Vec<Vec<f32>> = b.par_iter().map(|i| dist.features(i)).collect();
    let rows: Vec<Vec<f64>> = a
        .par_iter()
        .map(|img| {
            let fa = dist.features(img);
            fb.iter().map(|f| dist.feature_distance(&fa, f)).collect()
        })
        .collect();
    Ok(rows.concat())
}

/// Mean absolute difference after bilinear resampling to `side x side`.
#[derive(Debug, Clone, Copy)]
pub struct DownsampledL1 {
    pub side: usize,
}

impl Default for DownsampledL1 {
    fn default() -> Self {
        DownsampledL1 { side: 16 }
    }
}

impl PerceptualDistance for DownsampledL1 {
    fn name(&self) -> &'static str {
        "downsampled_l1"
    }

    fn features(&self, img: &Image) -> Vec<f32> {
        img.resize_bilinear(self.side, self.side).data
    }

    fn feature_distance(&self, a: &[f32], b: &[f32]) -> f64 {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum();
        s / a.len().max(1) as f64
    }
}

/// Fixed, seeded two-layer random convolution bank applied at 32x32.
#[derive(Debug, Clone)]
pub struct ConvBank {
    layers: Vec<BankLayer>,
}

#[derive(Debug, Clone)]
struct BankLayer {
    c_in: usize,
    c_out: usize,
    weights: Vec<f32>,
}

pub const BANK_INPUT: usize = 32;
const BANK_WIDTHS: [usize; 2] = [8, 16];
/// Length of a bank embedding pooled to 2x2 per layer.
pub(crate) const BANK_WIDTHS_POOLED: usize = (BANK_WIDTHS[0] + BANK_WIDTHS[1]) * 4;

impl ConvBank {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = CHANNELS;
        let layers = BANK_WIDTHS
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let weights = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
                let layer = BankLayer { c_in, c_out, weights };
                c_in = c_out;
                layer
            })
            .collect();
        ConvBank { layers }
    }

    /// Per-layer activation maps `(channels, side, data)`; the first layer
    /// runs at 32x32, later layers after 2x average pooling.
    pub fn activations(&self, img: &Image) -> Vec<(usize, usize, Vec<f32>)> {
        let mut side = BANK_INPUT;
        let mut x = img.resize_bilinear(side, side).data;
        let mut out = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            if li > 0 {
                x = avg_pool2(&x, layer.c_in, side);
                side /= 2;
            }
            x = conv3x3_lrelu(&x, layer, side);
            out.push((layer.c_out, side, x.clone()));
        }
        out
    }
}

fn avg_pool2(x: &[f32], c: usize, side: usize) -> Vec<f32> {
    let half = side / 2;
    let mut out = vec![0.0; c * half * half];
    for ch in 0..c {
        for y in 0..half {
            for xx in 0..half {
                let i = ch * side * side + 2 * y * side + 2 * xx;
                out[(ch * half + y) * half + xx] = 0.25 * (x[i] + x[i + 1] + x[i + side] + x[i + side + 1]);
            }
        }
    }
    out
}

fn conv3x3_lrelu(x: &[f32], layer: &BankLayer, side: usize) -> Vec<f32> {
    let s = side as isize;
    let mut out = vec![0.0; layer.c_out * side * side];
    for o in 0..layer.c_out {
        for y in 0..s {
            for xx in 0..s {
                let mut acc = 0.0f32;
                for c in 0..layer.c_in {
                    for u in 0..3isize {
                        let sy = y + u - 1;
                        if sy < 0 || sy >= s {
                            continue;
                        }
                        for v in 0..3isize {
                            let sx = xx + v - 1;
                            if sx < 0 || sx >= s {
                                continue;
                            }
                            let w = layer.weights[((o * layer.c_in + c) * 3 + u as usize) * 3 + v as usize];
                            acc += w * x[(c * side + sy as usize) * side + sx as usize];
                        }
                    }
                }
                out[(o * side + y as usize) * side + xx as usize] = if acc >= 0.0 { acc } else { 0.2 * acc };
            }
        }
    }
    out
}

/// Random-convolution stand-in for a learned perceptual metric: channel
/// vectors at each position are unit-normalized, squared distances are
/// averaged over positions, and the per-layer values are averaged.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    bank: ConvBank,
}

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        RandomConvFeatures { bank: ConvBank::new(seed) }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new(0x5eed)
    }
}

impl RandomConvFeatures {
    fn layout() -> Vec<(usize, usize)> {
        let mut side = BANK_INPUT;
        BANK_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i > 0 {
                    side /= 2;
                }
                (c, side)
            })
            .collect()
    }
}

impl PerceptualDistance for RandomConvFeatures {
    fn name(&self) -> &'static str {
        "random_conv"
    }

    fn features(&self, img: &Image) -> Vec<f32> {
        let mut out = Vec::new();
        for (c, side, act) in self.bank.activations(img) {
            let hw = side * side;
            for p in 0..hw {
                let norm = (0..c).map(|ch| act[ch * hw + p].powi(2)).sum::<f32>().sqrt() + 1e-10;
                out.extend((0..c).map(|ch| act[ch * hw + p] / norm));
            }
        }
        out
    }

    fn feature_distance(&self, a: &[f32], b: &[f32]) -> f64 {
        let layout = Self::layout();
        let mut offset = 0;
        let mut total = 0.0;
        for &(c, side) in &layout {
            let len = c * side * side;
            let sq: f64 = a[offset..offset + len]
                .iter()
                .zip(&b[offset..offset + len])
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum();
            total += sq / (side * side) as f64;
            offset += len;
        }
        total / layout.len() as f64
    }
}

/// Config-selectable distance variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    DownsampledL1,
    RandomConv,
}

impl DistanceKind {
    pub fn build(self) -> Box<dyn PerceptualDistance> {
        match self {
            DistanceKind::DownsampledL1 => Box::new(DownsampledL1::default()),
            DistanceKind::RandomConv => Box::new(RandomConvFeatures::default()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::DownsampledL1 => "downsampled_l1",
            DistanceKind::RandomConv => "random_conv",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = LfsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "downsampled_l1" => Ok(DistanceKind::DownsampledL1),
            "random_conv" => Ok(DistanceKind::RandomConv),
            other => Err(LfsError::Config(format!("unknown distance `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_strategy() -> impl Strategy<Value = Image> {
        prop::collection::vec(-1.0f32..1.0, 3 * 16 * 16).prop_map(|d| Image::new(16, 16, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn both_variants_are_symmetric_metrics(a in image_strategy(), b in image_strategy()) {
            let dists: [Box<dyn PerceptualDistance>; 2] = [Box::new(DownsampledL1::default()), Box::new(RandomConvFeatures::default())];
            for d in &dists {
                let ab = d.distance(&a, &b).unwrap();
                let ba = d.distance(&b, &a).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() <= 1e-12);
                prop_assert_eq!(d.distance(&a, &a).unwrap(), 0.0);
                prop_assert!(ab > 0.0, "{} distinct images at distance 0", d.name());
            }
        }
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let d = DownsampledL1::default();
        assert!(d.distance(&Image::filled(16, 16, [0.0; 3]), &Image::filled(32, 32, [0.0; 3])).is_err());
    }

    #[test]
    fn constant_images_l1() {
        let d = DownsampledL1::default();
        let a = Image::filled(32, 32, [0.0; 3]);
        let b = Image::filled(32, 32, [0.5; 3]);
        assert!((d.distance(&a, &b).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn matrices_agree_with_direct_calls() {
        let imgs: Vec<Image> = (0..4).map(|i| Image::filled(8, 8, [i as f32 * 0.1, 0.0, -0.2])).collect();
        let d = RandomConvFeatures::default();
        let m = pairwise_distances(&d, &imgs).unwrap();
        let c = cross_distances(&d, &imgs[..2], &imgs).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let direct = d.distance(&imgs[i], &imgs[j]).unwrap();
                assert!((m[i * 4 + j] - direct).abs() < 1e-12);
                assert!((c[i * 4 + j] - direct).abs() < 1e-12);
            }
        }
    }
}
