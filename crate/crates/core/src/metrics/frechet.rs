use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::distance::{ConvBank, BANK_WIDTHS_POOLED};
use crate::error::{LfsError, Result};
use crate::image::Image;

/// Maps an image to a fixed-length feature vector.
pub trait Embedding: Send + Sync {
    fn embed(&self, img: &Image) -> Vec<f64>;
}

/// Raw pixels after bilinear resampling to `side x side`.
#[derive(Debug, Clone, Copy)]
pub struct PixelEmbedding {
    pub side: usize,
}

impl Embedding for PixelEmbedding {
    fn embed(&self, img: &Image) -> Vec<f64> {
        img.resize_bilinear(self.side, self.side).data.iter().map(|&v| v as f64).collect()
    }
}

/// Random convolution bank activations average-pooled to a 2x2 grid per layer.
#[derive(Debug, Clone)]
pub struct RandomConvEmbedding {
    bank: ConvBank,
}

impl RandomConvEmbedding {
    pub fn new(seed: u64) -> Self {
        RandomConvEmbedding { bank: ConvBank::new(seed) }
    }

    pub fn dim(&self) -> usize {
        BANK_WIDTHS_POOLED
    }
}

impl Default for RandomConvEmbedding {
    fn default() -> Self {
        Self::new(0xfeed)
    }
}

impl Embedding for RandomConvEmbedding {
    fn embed(&self, img: &Image) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (c, side, act) in self.bank.activations(img) {
            let half = side / 2;
            let inv = 1.0 / (half * half) as f64;
            for ch in 0..c {
                for qy in 0..2 {
                    for qx in 0..2 {
                        let mut s = 0.0f64;
                        for y in qy * half..(qy + 1) * half {
                            for x in qx * half..(qx + 1) * half {
                                s += act[(ch * side + y) * side + x] as f64;
                            }
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
        out
    }
}

fn moments(samples: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two sets of vectors:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the matrix square root is taken as the sum of square roots
/// of the (clamped) eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LfsError::Empty("Fréchet distance needs at least two samples per set"));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(LfsError::shape("embedding dimension", dim, bad.len()));
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_embedding_distance(real: &[Image], fake: &[Image], embed: &dyn Embedding) -> Result<f64> {
    let ra: Vec<Vec<f64>> = real.par_iter().map(|i| embed.embed(i)).collect();
    let fa: Vec<Vec<f64>> = fake.par_iter().map(|i| embed.embed(i)).collect();
    frechet_distance(&ra, &fa)
}
