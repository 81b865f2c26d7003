#![allow(dead_code)]

use lfs_core::graph::Graph;
use lfs_core::left::ActivationKind;
use lfs_core::lifelong::{LayerModulator, ModulatorSet, TaskSpec, TrainConfig};
use lfs_core::netlab::{sample_latents, GeneratorConfig, GeneratorWeights};
use lfs_core::toy::make_toy_tasks;
use lfs_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A generator small enough for finite differences.
pub fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 8,
        w_dim: 8,
        mapping_layers: 2,
        base_resolution: 4,
        target_resolution: 16,
        channels: vec![4, 4],
        noise_injection: false,
        modulate_affine: true,
    }
}

/// The single-core toy configuration used by the training runs.
pub fn toy_config() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 32,
        w_dim: 32,
        target_resolution: 16,
        channels: vec![32, 16],
        ..GeneratorConfig::default()
    }
}

pub fn toy_train_config(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        disc_channels: vec![16, 32, 32],
        ..TrainConfig::default()
    }
}

pub fn toy_tasks(n: usize, k: usize, resolution: usize, seed: u64) -> Vec<TaskSpec> {
    make_toy_tasks(n, k, resolution, seed)
        .unwrap()
        .into_iter()
        .map(|(id, images)| TaskSpec::new(id, images, resolution).unwrap())
        .collect()
}

/// Identity-initialized modulators with every factor nudged by `N(0, std)`.
pub fn perturbed_mods(
    base: &GeneratorWeights<f64>,
    rank: usize,
    with_bias: bool,
    act: ActivationKind,
    seed: u64,
    std: f64,
) -> ModulatorSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ModulatorSet::identity("t", &base.modulated_layers(), rank, with_bias, act, &mut rng).unwrap();
    let normal = Normal::new(0.0, std).unwrap();
    for buf in set.buffers_mut() {
        for v in buf.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    set
}

pub struct FdReport {
    pub checked: usize,
    pub conv_checked: usize,
    pub fc_checked: usize,
    pub skipped_kinks: usize,
    pub max_rel: f64,
}

fn loss_and_values(
    base: &GeneratorWeights<f64>,
    mods: &ModulatorSet<f64>,
    z: &Tensor<f64>,
    coeffs: &[f64],
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let mv = mods.to_graph(&mut g, false);
    let vars = base.forward_graph(&mut g, Some(&mv), z).unwrap();
    let weighted = g.mul_const(vars.image, coeffs.to_vec()).unwrap();
    let loss = g.sum(weighted);
    let loss = g.scalar(loss);
    (loss, g.values().map(<[f64]>::to_vec).collect())
}

fn crosses_kink(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.iter()
        .zip(b)
        .any(|(x, y)| x.iter().zip(y).any(|(p, q)| (*p > 0.0) != (*q > 0.0)))
}

/// Central-difference check of `d/dθ Σ c ⊙ G(z; θ)` on `per_kind` conv and
/// `per_kind` fc modulator scalars. Perturbations that flip the sign of any
/// intermediate value (a possible kink) are resampled.
pub fn fd_check(base: &GeneratorWeights<f64>, mods: &ModulatorSet<f64>, per_kind: usize, h: f64, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_latents::<f64, _>(2, base.config.z_dim, &mut rng);
    let r = base.config.target_resolution;
    let coeffs: Vec<f64> = (0..2 * 3 * r * r).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let mv = mods.to_graph(&mut g, true);
    let vars = base.forward_graph(&mut g, Some(&mv), &z).unwrap();
    let weighted = g.mul_const(vars.image, coeffs.clone()).unwrap();
    let loss = g.sum(weighted);
    let grads = g.backward(loss, mv.params()).unwrap();

    let mut conv_slots = Vec::new();
    let mut fc_slots = Vec::new();
    let mut flat = 0;
    for (_, layer) in &mods.layers {
        for buf in layer.buffers() {
            let slot = (flat, buf.len());
            match layer {
                LayerModulator::Conv(_) => conv_slots.push(slot),
                LayerModulator::Fc(_) => fc_slots.push(slot),
            }
            flat += 1;
        }
    }

    let mut report = FdReport {
        checked: 0,
        conv_checked: 0,
        fc_checked: 0,
        skipped_kinks: 0,
        max_rel: 0.0,
    };
    for (slots, is_conv) in [(&conv_slots, true), (&fc_slots, false)] {
        let total: usize = slots.iter().map(|s| s.1).sum();
        let mut done = 0;
        let mut attempts = 0;
        while done < per_kind {
            attempts += 1;
            assert!(attempts < per_kind * 20, "too many kink crossings");
            let mut pick = rng.random_range(0..total);
            let &(buf, _) = slots
                .iter()
                .find(|s| {
                    if pick < s.1 {
                        true
                    } else {
                        pick -= s.1;
                        false
                    }
                })
                .unwrap();
            let idx = pick;
            let mut plus = mods.clone();
            plus.buffers_mut()[buf][idx] += h;
            let mut minus = mods.clone();
            minus.buffers_mut()[buf][idx] -= h;
            let (lp, vp) = loss_and_values(base, &plus, &z, &coeffs);
            let (lm, vm) = loss_and_values(base, &minus, &z, &coeffs);
            if crosses_kink(&vp, &vm) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[buf][idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.max_rel = report.max_rel.max(rel);
            done += 1;
        }
        report.checked += done;
        if is_conv {
            report.conv_checked += done;
        } else {
            report.fc_checked += done;
        }
    }
    report
}

use lfs_core::image::Image;
use lfs_core::losses::CmsTargets;
use lfs_core::metrics::PerceptualDistance;
use lfs_core::netlab::ForwardRecord;

/// 16 hand-built records around five anchors: three clusters of five, one
/// empty anchor and one singleton.
pub fn synthetic_batch() -> (Vec<ForwardRecord<f64>>, Vec<Image>) {
    let side = 4;
    let anchors: Vec<Image> = (0..5).map(|a| Image::filled(side, side, [-0.8 + 0.4 * a as f32; 3])).collect();
    let home = |i: usize| if i == 15 { 4 } else { i % 3 };
    let records = (0..16)
        .map(|i| {
            let t = i as f64;
            let level = -0.8 + 0.4 * home(i) as f64;
            let z = (0..4).map(|d| (0.7 * t + 1.3 * d as f64).sin()).collect();
            let w = (0..4).map(|d| 0.5 * (0.3 * t * t + d as f64).cos() + 0.1 * t).collect();
            let features = (0..2)
                .map(|l| {
                    let data = (0..8).map(|e| ((l + 1) as f64 * t * 0.37 + e as f64).sin() * (1.0 + l as f64)).collect();
                    Tensor::new(vec![2, 2, 2], data).unwrap()
                })
                .collect();
            let image = (0..3 * side * side)
                .map(|e| level + 0.05 * (t * 1.9 + e as f64 * 0.61).sin())
                .collect();
            ForwardRecord {
                z,
                w,
                features,
                image: Tensor::new(vec![3, side, side], image).unwrap(),
            }
        })
        .collect();
    (records, anchors)
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Straightforward reference: nearest anchor by direct distance calls, then
/// per-cluster pair averages over clusters with at least two members.
pub fn oracle_cms(
    records: &[ForwardRecord<f64>],
    anchors: &[Image],
    dist: &dyn PerceptualDistance,
    targets: CmsTargets,
    eps: f64,
) -> f64 {
    let images: Vec<Image> = records.iter().map(|r| r.to_image()).collect();
    let mut label = Vec::new();
    for img in &images {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, a) in anchors.iter().enumerate() {
            let d = dist.distance(img, a).unwrap();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        label.push(best);
    }
    let mut cluster_means = Vec::new();
    for c in 0..anchors.len() {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| label[i] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let (p, q) = (&records[idx[a]], &records[idx[b]]);
                let dz = mean_abs(&p.z, &q.z);
                let dw = mean_abs(&p.w, &q.w);
                let di = mean_abs(p.image.data(), q.image.data());
                let mut v = 0.0;
                if targets.use_dw {
                    v += dw / (dz + eps);
                }
                if targets.use_df {
                    let mut s = 0.0;
                    for l in 0..p.features.len() {
                        s += mean_abs(p.features[l].data(), q.features[l].data()) / (dw + eps);
                    }
                    v += s / p.features.len() as f64;
                }
                if targets.use_di {
                    v += di / (dw + eps);
                }
                sum += v;
                count += 1.0;
            }
        }
        cluster_means.push(sum / count);
    }
    if cluster_means.is_empty() {
        return 0.0;
    }
    let mean = cluster_means.iter().sum::<f64>() / cluster_means.len() as f64;
    1.0 / (mean + eps)
}
