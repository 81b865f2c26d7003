use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::modset::ModulatorSet;
use super::registry::Registry;
use super::task::TaskSpec;
use crate::error::{LfsError, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::left::ActivationKind;
use crate::losses::{adv_d_loss_graph, adv_g_loss_graph, cms_loss_graph, CmsConfig};
use crate::metrics::{assign_clusters, DistanceKind};
use crate::netlab::{
    images_from_var, images_to_tensor, sample_latents, Discriminator, DiscriminatorConfig, GeneratorWeights,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub cms: CmsConfig,
    pub seed: u64,
    pub rank: usize,
    pub with_bias: bool,
    pub act: ActivationKind,
    /// Distance used to assign oversampled fakes to the real anchors.
    pub distance: DistanceKind,
    /// Discriminator widths; the input resolution follows the generator.
    pub disc_channels: Vec<usize>,
    pub disc_patch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 4,
            iterations: 2000,
            cms: CmsConfig::default(),
            seed: 0,
            rank: 1,
            with_bias: true,
            act: ActivationKind::default(),
            distance: DistanceKind::default(),
            disc_channels: DiscriminatorConfig::default().channels,
            disc_patch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LfsError::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(LfsError::Config("iterations must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(LfsError::Config("rank must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LfsError::Config("adam needs lr > 0 and betas in [0, 1)".into()));
        }
        self.cms.validate()
    }
}

/// Plain Adam over a fixed list of flat buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LfsError::shape("adam buffers", self.m.len(), (params.len(), grads.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(LfsError::shape("adam buffer", m.len(), (p.len(), g.len())));
            }
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub cms: f64,
    pub g_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub task_id: String,
    pub steps: Vec<StepLog>,
    pub base_hash: String,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,d_loss,g_adv,cms,g_total\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},{}\n", s.step, s.d_loss, s.g_adv, s.cms, s.g_total));
        }
        out
    }
}

fn real_batch<R: Rng>(images: &[Image], b: usize, rng: &mut R) -> Vec<Image> {
    if b <= images.len() {
        index::sample(rng, images.len(), b).into_iter().map(|i| images[i].clone()).collect()
    } else {
        (0..b).map(|_| images[rng.random_range(0..images.len())].clone()).collect()
    }
}

/// Identity-initialized modulators for every modulated base layer.
pub fn fresh_modulators(base: &GeneratorWeights<f32>, task_id: &str, cfg: &TrainConfig, seed: u64) -> Result<ModulatorSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModulatorSet::identity(task_id, &base.modulated_layers(), cfg.rank, cfg.with_bias, cfg.act, &mut rng)
}

/// Trains one task's modulators against a fresh discriminator while `base` stays frozen.
pub fn train_task(base: &GeneratorWeights<f32>, task: &TaskSpec, cfg: &TrainConfig) -> Result<(ModulatorSet<f32>, TrainLog)> {
    train_task_observed(base, task, cfg, &mut |_| {})
}

/// [`train_task`] with a per-step callback.
pub fn train_task_observed(
    base: &GeneratorWeights<f32>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepLog),
) -> Result<(ModulatorSet<f32>, TrainLog)> {
    cfg.validate()?;
    let res = base.config.target_resolution;
    if task.resolution != res {
        return Err(LfsError::shape("task resolution", res, task.resolution));
    }
    if task.images.is_empty() {
        return Err(LfsError::Empty("task images"));
    }
    let base_hash = base.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mods = fresh_modulators(base, &task.task_id, cfg, rng.random())?;
    let disc_cfg = DiscriminatorConfig {
        resolution: res,
        channels: cfg.disc_channels.clone(),
        patch: cfg.disc_patch,
    };
    let mut disc = Discriminator::<f32>::init(disc_cfg, rng.random())?;
    let dist = cfg.distance.build();
    let mk_adam = |sizes: Vec<usize>| Adam::new(&sizes, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut g_opt = mk_adam(mods.buffers().iter().map(|b| b.len()).collect());
    let mut d_opt = mk_adam(disc.buffers().iter().map(|b| b.len()).collect());
    let b = cfg.batch_size;
    let z_dim = base.config.z_dim;
    let lambda = cfg.cms.lambda;
    let mut steps = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let reals = real_batch(&task.images, b, &mut rng);

        let d_loss = {
            let mut g = Graph::new();
            let mv = mods.to_graph(&mut g, false);
            let z = sample_latents::<f32, _>(b, z_dim, &mut rng);
            let gen = base.forward_graph(&mut g, Some(&mv), &z)?;
            let fake = g.constant(g.tensor(gen.image));
            let dv = disc.to_graph(&mut g, true);
            let real = g.constant(images_to_tensor(&reals)?);
            let lr = disc.forward_graph(&mut g, &dv, real)?;
            let lf = disc.forward_graph(&mut g, &dv, fake)?;
            let loss = adv_d_loss_graph(&mut g, lr, lf)?;
            let grads = g.backward(loss, &dv.params)?;
            d_opt.step(disc.buffers_mut(), &grads)?;
            g.scalar(loss) as f64
        };

        let (g_adv, cms, g_total) = {
            let mut g = Graph::new();
            let mv = mods.to_graph(&mut g, true);
            let n = cfg.cms.oversample * b;
            let z = sample_latents::<f32, _>(n, z_dim, &mut rng);
            let gen = base.forward_graph(&mut g, Some(&mv), &z)?;
            let dv = disc.to_graph(&mut g, false);
            let logits = disc.forward_graph(&mut g, &dv, gen.image)?;
            let adv = adv_g_loss_graph(&mut g, logits)?;
            let (total, cms) = if lambda > 0.0 {
                let fakes = images_from_var(&g, gen.image);
                let assignment = assign_clusters(&fakes, &reals, dist.as_ref())?;
                let cms = cms_loss_graph(&mut g, &gen, &z, &assignment, &cfg.cms)?;
                let weighted = g.scale(cms, lambda as f32);
                (g.add(adv, weighted)?, g.scalar(cms) as f64)
            } else {
                (adv, 0.0)
            };
            let grads = g.backward(total, mv.params())?;
            g_opt.step(mods.buffers_mut(), &grads)?;
            (g.scalar(adv) as f64, cms, g.scalar(total) as f64)
        };

        let log = StepLog {
            step,
            d_loss,
            g_adv,
            cms,
            g_total,
        };
        observe(&log);
        steps.push(log);
    }

    if base.hash() != base_hash {
        return Err(LfsError::Contract("base generator weights changed during training".into()));
    }
    Ok((
        mods,
        TrainLog {
            task_id: task.task_id.clone(),
            steps,
            base_hash,
        },
    ))
}

/// Trains `tasks` in order, persisting each task's modulators as soon as it finishes.
pub fn run_sequence(
    base: &GeneratorWeights<f32>,
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
    registry: &Registry,
    observe: &mut dyn FnMut(&str, &StepLog),
) -> Result<Vec<TrainLog>> {
    let mut logs = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let task_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            ..cfg.clone()
        };
        let (mods, log) = train_task_observed(base, task, &task_cfg, &mut |s| observe(&task.task_id, s))?;
        registry.save(&mods)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Deterministic samples for a stored task.
pub fn generate_for_task(
    base: &GeneratorWeights<f32>,
    registry: &Registry,
    task_id: &str,
    seed: u64,
    n: usize,
) -> Result<Vec<Image>> {
    let mods = registry.load(task_id)?;
    generate_with(base, Some(&mods), seed, n)
}

/// Samples from latents drawn with `seed`; `None` uses the unmodulated base.
pub fn generate_with(base: &GeneratorWeights<f32>, mods: Option<&ModulatorSet<f32>>, seed: u64, n: usize) -> Result<Vec<Image>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_latents::<f32, _>(n, base.config.z_dim, &mut rng);
    base.generate(mods, &z)
}
