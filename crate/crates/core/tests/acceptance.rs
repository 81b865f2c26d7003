//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::fs;
use std::time::Instant;

use common::{fd_check, oracle_cms, perturbed_mods, synthetic_batch, tiny_config, toy_config, toy_tasks, toy_train_config};
use lfs_core::left::{param_count, ActivationKind, ConvShape, LayerSpec, LeftConvModulator, LeftFcModulator};
use lfs_core::lifelong::{
    decode, encode, generate_for_task, generate_with, load_modulators, order_tasks, predicted_size, run_sequence,
    save_modulators, DistanceMatrix, ModulatorSet, Registry, TaskSpec,
};
use lfs_core::losses::{cms_loss, CmsConfig, CmsTargets};
use lfs_core::metrics::{
    b_lpips, b_lpips_from_parts, diversity, frechet_embedding_distance, i_lpips_from_parts, ClusterAssignment,
    DownsampledL1, RandomConvEmbedding,
};
use lfs_core::netlab::{sample_latents, GeneratorConfig, GeneratorWeights};
use lfs_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Γ and B for a conv modulator by explicit loops over (o, i, u, v).
fn naive_conv(m: &LeftConvModulator<f64>) -> (Vec<f64>, Vec<f64>) {
    let ConvShape { c_out, c_in, k } = m.shape;
    let kk = k * k;
    let r = m.rank;
    let mut m1 = vec![0.0; c_out * r * kk];
    for o in 0..c_out {
        for j in 0..r * kk {
            for s in 0..r {
                m1[o * r * kk + j] += m.m1_out[(o, s)] * m.m1_inst[(s, j)];
            }
        }
    }
    let mut a1 = vec![0.0; c_out * kk];
    if let (Some(ao), Some(ai)) = (&m.a1_out, &m.a1_inst) {
        for o in 0..c_out {
            for uv in 0..kk {
                for s in 0..r {
                    a1[o * kk + uv] += ao[(o, s)] * ai[(s, uv)];
                }
            }
        }
    }
    let width = c_out * kk;
    // Row q of the reshaped M1 is the q-th contiguous run of `width` values.
    let mut m1p = vec![0.0; r * width];
    for q in 0..r {
        for t in 0..width {
            m1p[q * width + t] = m.act.apply(m1[q * width + t] + a1[t]);
        }
    }
    let mut gamma = vec![0.0; c_out * c_in * kk];
    let mut beta = vec![0.0; c_out * c_in * kk];
    for o in 0..c_out {
        for i in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let uv = u * k + v;
                    let mut g = 0.0;
                    for q in 0..r {
                        g += m.m2_in[(i, q)] * m1p[q * width + o * kk + uv];
                    }
                    let mut b = 0.0;
                    for s in 0..r {
                        b += m.a2_in[(i, s)] * m.a2_inst[(s, uv)];
                    }
                    gamma[((o * c_in + i) * k + u) * k + v] = g;
                    beta[((o * c_in + i) * k + u) * k + v] = b;
                }
            }
        }
    }
    (gamma, beta)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let configs = 240;
    for n in 0..configs {
        let shape = ConvShape::new(rng.random_range(1..=8), rng.random_range(1..=8), [1, 3][n % 2]).unwrap();
        let r = [1, 2, 4][rng.random_range(0..3)];
        let with_bias = rng.random_bool(0.5);
        let act = ActivationKind::ALL[n % ActivationKind::ALL.len()];
        let kk = shape.kk();
        let a1 = with_bias.then(|| (random_matrix(shape.c_out, r, &mut rng), random_matrix(r, kk, &mut rng)));
        let m = LeftConvModulator::from_factors(
            shape,
            r,
            act,
            random_matrix(shape.c_out, r, &mut rng),
            random_matrix(r, r * kk, &mut rng),
            random_matrix(shape.c_in, r, &mut rng),
            a1,
            random_matrix(shape.c_in, r, &mut rng),
            random_matrix(r, kk, &mut rng),
        )
        .unwrap();
        let (g, b) = naive_conv(&m);
        worst = worst.max(max_diff(m.gamma().unwrap().data(), &g));
        worst = worst.max(max_diff(m.beta().unwrap().data(), &b));

        let (d_out, d_in) = (shape.c_out, shape.c_in * 2);
        let fc = LeftFcModulator::from_factors(
            r,
            random_matrix(d_out, r, &mut rng),
            random_matrix(r, d_in, &mut rng),
            random_matrix(d_out, r, &mut rng),
            random_matrix(r, d_in, &mut rng),
            vec![1.0; d_out],
            vec![0.0; d_out],
        )
        .unwrap();
        let mut g = vec![0.0; d_out * d_in];
        let mut b = vec![0.0; d_out * d_in];
        for o in 0..d_out {
            for i in 0..d_in {
                for s in 0..r {
                    g[o * d_in + i] += fc.m_out[(o, s)] * fc.m_in[(s, i)];
                    b[o * d_in + i] += fc.a_out[(o, s)] * fc.a_in[(s, i)];
                }
            }
        }
        worst = worst.max(max_diff(fc.gamma_w().unwrap().data(), &g));
        worst = worst.max(max_diff(fc.beta_w().unwrap().data(), &b));
    }
    outcome(worst <= 1e-12, format!("{configs} conv+fc configs, max |err| {worst:.2e} (tol 1e-12)"))
}

fn criterion_2() -> Outcome {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = sample_latents::<f32, _>(2, base.config.z_dim, &mut rng);
    let plain = base.generate(None, &z).unwrap();
    let mut worst = 0.0f32;
    for act in ActivationKind::ALL {
        let mods = ModulatorSet::identity("id", &base.modulated_layers(), 1, true, act, &mut rng).unwrap();
        let out = base.generate(Some(&mods), &z).unwrap();
        for (a, b) in plain.iter().zip(&out) {
            for (p, q) in a.data.iter().zip(&b.data) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    outcome(worst <= 1e-5, format!("7 activations, max pixel diff {worst:.2e} (tol 1e-5)"))
}

fn criterion_3() -> Outcome {
    let base = GeneratorWeights::<f64>::init(tiny_config(), 3).unwrap();
    let mut checked = 0;
    let mut conv = 0;
    let mut fc = 0;
    let mut skipped = 0;
    let mut worst = 0.0f64;
    for (i, (act, with_bias)) in [(ActivationKind::Relu, true), (ActivationKind::Tanh, false)].into_iter().enumerate() {
        let mods = perturbed_mods(&base, 2, with_bias, act, 10 + i as u64, 0.05);
        let rep = fd_check(&base, &mods, 250, 1e-4, 20 + i as u64);
        checked += rep.checked;
        conv += rep.conv_checked;
        fc += rep.fc_checked;
        skipped += rep.skipped_kinks;
        worst = worst.max(rep.max_rel);
    }
    outcome(
        checked >= 1000 && worst <= 1e-4,
        format!("{checked} scalars ({conv} conv, {fc} fc, {skipped} kink crossings resampled), max rel err {worst:.2e} (tol 1e-4)"),
    )
}

fn criterion_4() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/face_domains.csv");
    let m = DistanceMatrix::parse_csv(&fs::read_to_string(path).unwrap()).unwrap();
    let order = order_tasks(&m, "FFHQ").unwrap();
    let want = ["Sketches", "Female", "Sunglasses", "Male", "Babies"];
    outcome(order == want, order.join(" -> "))
}

fn criterion_5() -> Outcome {
    let d = 0.37;
    let collapse = b_lpips_from_parts(&[20, 0, 0], &[d, 0.0, 0.0]);
    let images: Vec<_> = toy_tasks(1, 6, 16, 5).remove(0).images;
    let all_in_one = ClusterAssignment {
        members: vec![(0..6).collect()],
        n: 6,
    };
    let collapse_images = b_lpips(&images, &all_in_one, &DownsampledL1::default()).unwrap();
    let balanced10 = b_lpips_from_parts(&[10; 10], &[0.5; 10]);
    let imbalanced = b_lpips_from_parts(&[9, 1], &[d, d]);
    let balanced = b_lpips_from_parts(&[5, 5], &[d, d]);
    let i_imb = i_lpips_from_parts(&[9, 1], &[d, 0.0]);
    let i_bal = i_lpips_from_parts(&[5, 5], &[d, d]);
    let pass = collapse == 0.0
        && collapse_images == 0.0
        && (balanced10 - 0.5).abs() <= 1e-9
        && imbalanced < balanced
        && (i_imb - i_bal).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "collapse {collapse} / {collapse_images}, balanced k=10 {balanced10:.12}, (9,1) {imbalanced:.6} < (5,5) {balanced:.6}, I-LPIPS {i_imb} vs {i_bal}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let (records, anchors) = synthetic_batch();
    let dist = DownsampledL1::default();
    let mut worst = 0.0f64;
    for targets in CmsTargets::combinations() {
        let cfg = CmsConfig {
            targets,
            ..CmsConfig::default()
        };
        let got = cms_loss(&records, &anchors, &dist, &cfg).unwrap();
        let want = oracle_cms(&records, &anchors, &dist, targets, cfg.epsilon);
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= 1e-9, format!("16 records, 7 target sets, max |err| {worst:.2e} (tol 1e-9)"))
}

fn criterion_8() -> Outcome {
    let base = GeneratorWeights::<f32>::init(GeneratorConfig::default(), 0).unwrap();
    let specs: Vec<LayerSpec> = base.modulated_layers().into_iter().map(|(_, s)| s).collect();
    let total = base.param_count();
    let r1 = param_count(&specs, 1, true).total;
    let percent = 100.0 * r1 as f64 / total as f64;
    let mut monotone = true;
    for with_bias in [true, false] {
        let counts: Vec<usize> = [1, 2, 4, 8, 16].iter().map(|&r| param_count(&specs, r, with_bias).total).collect();
        monotone &= counts.windows(2).all(|w| w[0] < w[1]);
    }
    outcome(
        percent < 1.0 && monotone,
        format!("r=1 uses {r1} of {total} ({percent:.3}%), strictly increasing over r in 1,2,4,8,16: {monotone}"),
    )
}

fn criterion_10() -> Outcome {
    let base = GeneratorWeights::<f64>::init(GeneratorConfig::default(), 0).unwrap();
    let set: ModulatorSet<f32> = perturbed_mods(&base, 2, true, ActivationKind::Gelu, 7, 0.1).cast();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.left");
    save_modulators(&set, &path).unwrap();
    let back = load_modulators(&path).unwrap();
    let bits = |s: &ModulatorSet<f32>| s.buffers().iter().flat_map(|b| b.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let exact = bits(&back) == bits(&set) && back.layer_specs() == set.layer_specs() && back.task_id == set.task_id;
    let size = fs::metadata(&path).unwrap().len() as usize;
    let predicted = predicted_size(&set);
    let reencoded = encode(&decode(&fs::read(&path).unwrap()).unwrap()).unwrap().len();
    outcome(
        exact && size == predicted && reencoded == size,
        format!("bit-exact {exact}, file {size} B, predicted {predicted} B ({} params)", set.param_count()),
    )
}

const TOY_DATA_SEED: u64 = 2024;
const EVAL_SEED: u64 = 99;
const FRECHET_SAMPLES: usize = 500;
const DIVERSITY_SAMPLES: usize = 200;

struct ToyRun {
    seconds: f64,
    frozen: bool,
    hash_stable: bool,
    fd_before: Vec<f64>,
    fd_after: Vec<f64>,
    b_lpips: Vec<f64>,
}

fn toy_run(seed: u64, lambda: f64, tasks: &[TaskSpec]) -> ToyRun {
    let start = Instant::now();
    let base = GeneratorWeights::<f32>::init(toy_config(), 100 + seed).unwrap();
    let hash = base.hash();
    let dir = tempfile::tempdir().unwrap();
    let registry = Registry::open(dir.path()).unwrap();
    let embed = RandomConvEmbedding::default();
    let initial = generate_with(&base, None, EVAL_SEED, FRECHET_SAMPLES).unwrap();
    let fd_before = tasks
        .iter()
        .map(|t| frechet_embedding_distance(&t.images, &initial, &embed).unwrap())
        .collect();

    let mut hash_stable = true;
    let mut snapshot = None;
    for (i, task) in tasks.iter().enumerate() {
        let mut cfg = toy_train_config(2000, seed * 1000 + i as u64);
        cfg.cms.lambda = lambda;
        run_sequence(&base, std::slice::from_ref(task), &cfg, &registry, &mut |_, _| {}).unwrap();
        hash_stable &= base.hash() == hash;
        if i == 0 {
            snapshot = Some(generate_for_task(&base, &registry, &task.task_id, 7, 16).unwrap());
        }
    }
    let again = generate_for_task(&base, &registry, &tasks[0].task_id, 7, 16).unwrap();
    let snapshot = snapshot.unwrap();
    let frozen = again.len() == snapshot.len()
        && again.iter().zip(&snapshot).all(|(a, b)| {
            a.to_rgb8() == b.to_rgb8() && a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits()))
        });

    let mut fd_after = Vec::new();
    let mut b = Vec::new();
    for task in tasks {
        let fakes = generate_for_task(&base, &registry, &task.task_id, EVAL_SEED, FRECHET_SAMPLES).unwrap();
        fd_after.push(frechet_embedding_distance(&task.images, &fakes, &embed).unwrap());
        let report = diversity(&fakes[..DIVERSITY_SAMPLES], &task.images, &DownsampledL1::default()).unwrap();
        b.push(report.b_lpips);
    }
    ToyRun {
        seconds: start.elapsed().as_secs_f64(),
        frozen,
        hash_stable: hash_stable && base.hash() == hash,
        fd_before,
        fd_after,
        b_lpips: b,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn report(id: usize, name: &str, started: Instant, o: &Outcome, failures: &mut Vec<usize>) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        failures.push(id);
    }
    println!(
        "criterion {id:>2} {status} {name}: {} [{:.2} s]",
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() {
    let mut failures = Vec::new();
    let timed: [(usize, &str, fn() -> Outcome, f64); 8] = [
        (1, "modulator oracle equivalence", criterion_1, 5.0),
        (2, "identity initialization", criterion_2, 10.0),
        (3, "gradient correctness", criterion_3, 60.0),
        (4, "task ordering", criterion_4, f64::INFINITY),
        (5, "B-LPIPS properties", criterion_5, f64::INFINITY),
        (6, "cms loss oracle", criterion_6, f64::INFINITY),
        (8, "parameter efficiency", criterion_8, f64::INFINITY),
        (10, "checkpoint round trip", criterion_10, f64::INFINITY),
    ];
    for (id, name, run, limit) in timed {
        let started = Instant::now();
        let mut o = run();
        let secs = started.elapsed().as_secs_f64();
        if secs >= limit {
            o.pass = false;
            o.detail.push_str(&format!(", over the {limit} s budget"));
        }
        report(id, name, started, &o, &mut failures);
    }

    let tasks = toy_tasks(3, 10, toy_config().target_resolution, TOY_DATA_SEED);
    let started = Instant::now();
    let mut with_cms = Vec::new();
    let mut without_cms = Vec::new();
    for seed in 0..3 {
        with_cms.push(toy_run(seed, 1.0, &tasks));
        without_cms.push(toy_run(seed, 0.0, &tasks));
    }

    let first = &with_cms[0];
    let o7 = outcome(
        first.frozen && first.hash_stable && first.seconds < 15.0 * 60.0,
        format!(
            "task-1 samples byte-identical after 3 tasks: {}, base hash unchanged: {}, run took {:.0} s (budget 900 s)",
            first.frozen, first.hash_stable, first.seconds
        ),
    );
    report(7, "no forgetting", started, &o7, &mut failures);

    let mut medians = Vec::new();
    for t in 0..tasks.len() {
        medians.push(median(with_cms.iter().map(|r| 1.0 - r.fd_after[t] / r.fd_before[t]).collect()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = with_cms
        .iter()
        .zip(&without_cms)
        .filter(|(a, b)| mean(&a.b_lpips) >= mean(&b.b_lpips))
        .count();
    let all_frozen = with_cms.iter().chain(&without_cms).all(|r| r.frozen && r.hash_stable);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let o9 = outcome(
        medians.iter().all(|&m| m >= 0.5) && wins >= 2 && all_frozen,
        format!(
            "median Frechet improvement per task {} (need >= 0.5); mean B-LPIPS lambda=1 {} vs lambda=0 {} per seed, lambda=1 ahead in {wins}/3",
            fmt(&medians),
            fmt(&with_cms.iter().map(|r| mean(&r.b_lpips)).collect::<Vec<_>>()),
            fmt(&without_cms.iter().map(|r| mean(&r.b_lpips)).collect::<Vec<_>>()),
        ),
    );
    report(9, "directional training efficacy", started, &o9, &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
