mod common;

use common::{fd_check, perturbed_mods, tiny_config};
use lfs_core::graph::Graph;
use lfs_core::left::{ActivationKind, LayerSpec};
use lfs_core::lifelong::ModulatorSet;
use lfs_core::netlab::{
    images_to_tensor, sample_latents, Discriminator, DiscriminatorConfig, GeneratorConfig, GeneratorWeights,
};
use lfs_core::LfsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_pixel_diff(a: &[lfs_core::image::Image], b: &[lfs_core::image::Image]) -> f32 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f32::max)
}

#[test]
fn identity_modulators_leave_output_unchanged() {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = sample_latents::<f32, _>(2, base.config.z_dim, &mut rng);
    let plain = base.generate(None, &z).unwrap();
    for act in [ActivationKind::Relu, ActivationKind::Sigmoid, ActivationKind::Gelu] {
        for rank in [1, 3] {
            let mods = ModulatorSet::identity("t", &base.modulated_layers(), rank, true, act, &mut rng).unwrap();
            let out = base.generate(Some(&mods), &z).unwrap();
            let d = max_pixel_diff(&plain, &out);
            assert!(d <= 1e-5, "{act} r={rank}: {d}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let cfg = GeneratorConfig::default();
    let a = GeneratorWeights::<f32>::init(cfg.clone(), 3).unwrap();
    let b = GeneratorWeights::<f32>::init(cfg, 3).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = sample_latents::<f32, _>(3, a.config.z_dim, &mut rng);
    let ra = a.forward(None, &z).unwrap();
    let rb = b.forward(None, &z).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 3);
    for rec in &ra {
        assert_eq!(rec.image.shape(), &[3, 32, 32]);
        assert_eq!(rec.w.len(), 64);
        let shapes: Vec<_> = rec.features.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![128, 8, 8], vec![64, 16, 16], vec![32, 32, 32]]);
    }
    let other = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 4).unwrap();
    assert_ne!(a.hash(), other.hash());
}

#[test]
fn batched_and_single_passes_agree() {
    let base = GeneratorWeights::<f64>::init(tiny_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = sample_latents::<f64, _>(3, base.config.z_dim, &mut rng);
    let batched = base.forward(None, &z).unwrap();
    for (i, rec) in batched.iter().enumerate() {
        let single = lfs_core::Tensor::new(vec![1, 8], z.data()[i * 8..(i + 1) * 8].to_vec()).unwrap();
        let one = base.forward(None, &single).unwrap();
        assert!(one[0].image.max_abs_diff(&rec.image) < 1e-12);
    }
}

#[test]
fn modulated_layer_list_follows_config() {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 0).unwrap();
    let names: Vec<String> = base.modulated_layers().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["mapping.0", "mapping.1", "mapping.2", "synthesis.0.conv", "synthesis.1.conv", "synthesis.2.conv", "to_rgb"]
    );
    let with_affine = GeneratorWeights::<f32>::init(
        GeneratorConfig {
            modulate_affine: true,
            ..GeneratorConfig::default()
        },
        0,
    )
    .unwrap();
    let specs = with_affine.modulated_layers();
    assert_eq!(specs.len(), 10);
    assert_eq!(specs[3], ("synthesis.0.affine".to_string(), LayerSpec::Fc { d_out: 128, d_in: 64 }));
}

#[test]
fn base_parameter_count_by_hand() {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 0).unwrap();
    let mapping = 3 * (64 * 64 + 64);
    let constant = 128 * 16;
    let affine = (128 * 64 + 128) + (128 * 64 + 128) + (64 * 64 + 64);
    let convs = (128 * 128 * 9 + 128) + (64 * 128 * 9 + 64) + (32 * 64 * 9 + 32);
    let rgb = 3 * 32 + 3;
    assert_eq!(base.param_count(), mapping + constant + affine + convs + rgb);
}

#[test]
fn config_validation() {
    let bad = [
        GeneratorConfig {
            target_resolution: 24,
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            channels: vec![8, 8],
            ..GeneratorConfig::default()
        },
        GeneratorConfig {
            base_resolution: 32,
            ..GeneratorConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(GeneratorWeights::<f32>::init(cfg, 0), Err(LfsError::Config(_))));
    }
    let ok = GeneratorConfig {
        target_resolution: 64,
        channels: vec![16, 8, 8, 4],
        ..GeneratorConfig::default()
    };
    assert!(GeneratorWeights::<f32>::init(ok, 0).is_ok());
}

#[test]
fn mismatched_modulators_are_rejected() {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 0).unwrap();
    let tiny = GeneratorWeights::<f32>::init(tiny_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mods = ModulatorSet::identity("t", &tiny.modulated_layers(), 1, true, ActivationKind::Relu, &mut rng).unwrap();
    let z = sample_latents::<f32, _>(1, 64, &mut rng);
    assert!(base.generate(Some(&mods), &z).is_err());
}

#[test]
fn noise_injection_is_fixed() {
    let cfg = GeneratorConfig {
        noise_injection: true,
        ..tiny_config()
    };
    let base = GeneratorWeights::<f32>::init(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = sample_latents::<f32, _>(2, 8, &mut rng);
    assert_eq!(base.generate(None, &z).unwrap(), base.generate(None, &z).unwrap());
}

#[test]
fn modulator_gradients_match_finite_differences() {
    let base = GeneratorWeights::<f64>::init(tiny_config(), 21).unwrap();
    for (act, with_bias) in [(ActivationKind::Tanh, true), (ActivationKind::Relu, false)] {
        let mods = perturbed_mods(&base, 2, with_bias, act, 4, 0.05);
        let report = fd_check(&base, &mods, 60, 1e-4, 8);
        assert_eq!(report.conv_checked, 60);
        assert_eq!(report.fc_checked, 60);
        assert!(report.max_rel <= 1e-4, "{act}: max relative error {}", report.max_rel);
    }
}

#[test]
fn base_weights_are_not_gradient_targets() {
    let base = GeneratorWeights::<f64>::init(tiny_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mods = ModulatorSet::identity("t", &base.modulated_layers(), 1, true, ActivationKind::Relu, &mut rng).unwrap();
    let mut g = Graph::new();
    let frozen = mods.to_graph(&mut g, false);
    let z = sample_latents::<f64, _>(1, 8, &mut rng);
    let vars = base.forward_graph(&mut g, Some(&frozen), &z).unwrap();
    let loss = g.sum(vars.image);
    assert!(matches!(g.backward(loss, frozen.params()), Err(LfsError::Contract(_))));
}

#[test]
fn discriminator_scores_batches() {
    for patch in [false, true] {
        let cfg = DiscriminatorConfig {
            resolution: 16,
            channels: vec![8, 8, 8],
            patch,
        };
        let d = Discriminator::<f32>::init(cfg, 3).unwrap();
        let base = GeneratorWeights::<f32>::init(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = base.generate(None, &sample_latents(5, 8, &mut rng)).unwrap();
        let logits = d.score(&images).unwrap();
        assert_eq!(logits.len(), 5);
        assert!(logits.iter().all(|l| l.is_finite()));
        let first = d.score(&images[..1]).unwrap();
        assert!((first[0] - logits[0]).abs() < 1e-5);
        assert_eq!(d.param_count(), d.buffers().iter().map(|b| b.len()).sum::<usize>());
    }
}

#[test]
fn discriminator_rejects_wrong_resolution() {
    let d = Discriminator::<f32>::init(DiscriminatorConfig::default(), 0).unwrap();
    let small = vec![lfs_core::image::Image::filled(16, 16, [0.0; 3])];
    assert!(d.score(&small).is_err());
    assert!(images_to_tensor::<f32>(&[]).is_err());
}
