use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lfs_core::image::{grid, Image};
use lfs_core::left::param_count;
use lfs_core::lifelong::{
    generate_for_task, order_tasks, run_sequence, DistanceMatrix, Registry, TaskSpec,
};
use lfs_core::metrics::{cross_distances, diversity, frechet_embedding_distance, MetricsReport, RandomConvEmbedding};
use lfs_core::netlab::GeneratorWeights;
use lfs_core::toy::make_toy_tasks;

use crate::config::RunConfig;

pub fn base_generator(cfg: &RunConfig) -> Result<GeneratorWeights<f32>> {
    Ok(GeneratorWeights::init(cfg.generator(), cfg.base_seed)?)
}

pub fn registry_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("modulators")
}

fn hash_path(out_dir: &Path) -> PathBuf {
    out_dir.join("base.sha256")
}

/// Refuses to pair stored modulators with a base generator other than the one they were trained on.
fn check_base(out_dir: &Path, base: &GeneratorWeights<f32>) -> Result<()> {
    let path = hash_path(out_dir);
    if let Ok(stored) = fs::read_to_string(&path) {
        if stored.trim() != base.hash() {
            bail!(
                "base generator differs from the one recorded in {}; check z_dim, channels and base_seed",
                path.display()
            );
        }
    }
    Ok(())
}

pub fn task_folders(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_task(cfg: &RunConfig, id: &str) -> Result<TaskSpec> {
    let dir = cfg.data_dir.join(id);
    if !dir.is_dir() {
        bail!("no image folder for task `{id}` at {}", dir.display());
    }
    Ok(TaskSpec::load_dir(id, &dir, cfg.target_resolution)?)
}

pub fn make_toy(cfg: &RunConfig, out: &Path, n_tasks: usize, k: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let tasks = make_toy_tasks(n_tasks, k, cfg.target_resolution, seed)?;
    let mut dirs = Vec::with_capacity(tasks.len());
    for (id, images) in tasks {
        let dir = out.join(&id);
        fs::create_dir_all(&dir)?;
        for (i, im) in images.iter().enumerate() {
            im.save_png(dir.join(format!("{i:03}.png")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Mean cross-domain image distance between every pair of task folders.
pub fn folder_distances(cfg: &RunConfig) -> Result<DistanceMatrix> {
    let ids = task_folders(&cfg.data_dir)?;
    if ids.is_empty() {
        bail!("no task folders in {}", cfg.data_dir.display());
    }
    let tasks = ids.iter().map(|id| load_task(cfg, id)).collect::<Result<Vec<_>>>()?;
    let dist = cfg.distance.build();
    let n = tasks.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cross_distances(dist.as_ref(), &tasks[i].images, &tasks[j].images)?;
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            values[i * n + j] = mean;
            values[j * n + i] = mean;
        }
    }
    Ok(DistanceMatrix::new(ids, values)?)
}

pub fn order(cfg: &RunConfig, matrix: Option<&Path>, source: Option<&str>) -> Result<Vec<String>> {
    let matrix_path = matrix.map(Path::to_path_buf).or_else(|| cfg.distance_matrix.clone());
    let m = match matrix_path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            DistanceMatrix::parse_csv(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => folder_distances(cfg)?,
    };
    let source = source
        .map(str::to_string)
        .or_else(|| cfg.source.clone())
        .unwrap_or_else(|| m.names[0].clone());
    if m.names.len() == 1 {
        return Ok(vec![source]);
    }
    Ok(order_tasks(&m, &source)?)
}

pub fn train(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let ids = if cfg.tasks.is_empty() {
        task_folders(&cfg.data_dir)?
    } else {
        cfg.tasks.clone()
    };
    if ids.is_empty() {
        bail!("no tasks to train (set `tasks` or add folders to {})", cfg.data_dir.display());
    }
    let tasks = ids.iter().map(|id| load_task(cfg, id)).collect::<Result<Vec<_>>>()?;
    let base = base_generator(cfg)?;
    fs::create_dir_all(out_dir)?;
    check_base(out_dir, &base)?;
    fs::write(hash_path(out_dir), format!("{}\n", base.hash()))?;
    let registry = Registry::open(registry_dir(out_dir))?;
    let every = cfg.log_every.max(1);
    let total = cfg.iterations;
    let logs = run_sequence(&base, &tasks, &cfg.train(), &registry, &mut |task, s| {
        if (s.step + 1) % every == 0 || s.step + 1 == total {
            log(&format!(
                "{task} step {}/{total} d_loss={:.4} g_adv={:.4} cms={:.4}",
                s.step + 1,
                s.d_loss,
                s.g_adv,
                s.cms
            ));
        }
    })?;
    let log_dir = out_dir.join("logs");
    fs::create_dir_all(&log_dir)?;
    let mut paths = Vec::with_capacity(logs.len());
    for l in &logs {
        fs::write(log_dir.join(format!("{}.csv", l.task_id)), l.to_csv())?;
        paths.push(registry.path_for(&l.task_id)?);
    }
    Ok(paths)
}

fn stored_task_images(cfg: &RunConfig, out_dir: &Path, task: &str, seed: u64, n: usize) -> Result<Vec<Image>> {
    let base = base_generator(cfg)?;
    check_base(out_dir, &base)?;
    let registry = Registry::open(registry_dir(out_dir))?;
    Ok(generate_for_task(&base, &registry, task, seed, n)?)
}

pub fn gen(cfg: &RunConfig, run_dir: &Path, task: &str, seed: u64, n: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let images = stored_task_images(cfg, run_dir, task, seed, n)?;
    fs::create_dir_all(out)?;
    let mut paths = Vec::with_capacity(images.len() + 1);
    for (i, im) in images.iter().enumerate() {
        let p = out.join(format!("{task}_{i:04}.png"));
        im.save_png(&p)?;
        paths.push(p);
    }
    if !images.is_empty() {
        let cols = (images.len() as f64).sqrt().ceil() as usize;
        let p = out.join(format!("{task}_grid.png"));
        grid(&images, cols)?.save_png(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn eval(cfg: &RunConfig, run_dir: &Path, task: &str, seed: u64) -> Result<MetricsReport> {
    let spec = load_task(cfg, task)?;
    let n = cfg.diversity_samples.max(cfg.frechet_samples);
    let images = stored_task_images(cfg, run_dir, task, seed, n)?;
    let dist = cfg.distance.build();
    let div = diversity(&images[..cfg.diversity_samples], &spec.images, dist.as_ref())?;
    let fd = frechet_embedding_distance(&spec.images, &images[..cfg.frechet_samples], &RandomConvEmbedding::default())?;
    let mut report = MetricsReport::new(task);
    report.push("b_lpips", div.b_lpips);
    report.push("i_lpips", div.i_lpips);
    report.push("frechet", fd);
    report.append_csv(run_dir.join("metrics.csv"))?;
    Ok(report)
}

pub fn count_params(cfg: &RunConfig) -> Result<String> {
    let base = base_generator(cfg)?;
    let layers = base.modulated_layers();
    let specs: Vec<_> = layers.iter().map(|(_, s)| *s).collect();
    let counts = param_count(&specs, cfg.rank, cfg.with_bias);
    let mut out = String::new();
    for ((name, spec), c) in layers.iter().zip(&counts.per_layer) {
        let kind = match spec {
            lfs_core::left::LayerSpec::Conv(_) => "conv",
            lfs_core::left::LayerSpec::Fc { .. } => "fc",
        };
        out.push_str(&format!("layer {name} {kind} {}\n", c.total()));
    }
    let base_params = base.param_count();
    out.push_str(&format!("rank={}\n", cfg.rank));
    out.push_str(&format!("modulator_params={}\n", counts.total));
    out.push_str(&format!("base_params={base_params}\n"));
    out.push_str(&format!("percent={:.4}\n", 100.0 * counts.total as f64 / base_params as f64));
    Ok(out)
}
