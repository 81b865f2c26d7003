use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lfs_core::left::ActivationKind;
use lfs_core::lifelong::TrainConfig;
use lfs_core::losses::{CmsConfig, CmsTargets};
use lfs_core::metrics::DistanceKind;
use lfs_core::netlab::GeneratorConfig;

/// Flat `key = value` run configuration. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub base_seed: u64,

    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub base_resolution: usize,
    pub target_resolution: usize,
    pub channels: Vec<usize>,
    pub noise_injection: bool,
    pub modulate_affine: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub use_dw: bool,
    pub use_df: bool,
    pub use_di: bool,
    pub epsilon: f64,
    pub oversample: usize,
    pub rank: usize,
    pub with_bias: bool,
    pub act: ActivationKind,
    pub disc_channels: Vec<usize>,
    pub disc_patch: bool,
    pub log_every: usize,

    pub distance: DistanceKind,
    pub diversity_samples: usize,
    pub frechet_samples: usize,

    pub n_tasks: usize,
    pub k: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Comma-separated task ids to train, in order; empty means every folder in `data_dir`, sorted.
    pub tasks: Vec<String>,
    /// CSV distance matrix for `order`; empty computes one from `data_dir`.
    pub distance_matrix: Option<PathBuf>,
    /// Starting domain for `order`; empty uses the first domain (header order for a
    /// matrix file, sorted folder order otherwise).
    pub source: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            base_seed: 0,
            z_dim: g.z_dim,
            w_dim: g.w_dim,
            mapping_layers: g.mapping_layers,
            base_resolution: g.base_resolution,
            target_resolution: g.target_resolution,
            channels: g.channels,
            noise_injection: g.noise_injection,
            modulate_affine: g.modulate_affine,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            iterations: t.iterations,
            lambda: t.cms.lambda,
            use_dw: t.cms.targets.use_dw,
            use_df: t.cms.targets.use_df,
            use_di: t.cms.targets.use_di,
            epsilon: t.cms.epsilon,
            oversample: t.cms.oversample,
            rank: t.rank,
            with_bias: t.with_bias,
            act: t.act,
            disc_channels: t.disc_channels,
            disc_patch: t.disc_patch,
            log_every: 100,
            distance: DistanceKind::default(),
            diversity_samples: 200,
            frechet_samples: 500,
            n_tasks: 3,
            k: 10,
            data_dir: PathBuf::from("data/tasks"),
            out_dir: PathBuf::from("runs"),
            tasks: Vec::new(),
            distance_matrix: None,
            source: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| anyhow!("bad value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("bad value `{value}` for `{key}`: expected true or false"),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", no + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "seed" => self.seed = parse(key, v)?,
            "base_seed" => self.base_seed = parse(key, v)?,
            "z_dim" => self.z_dim = parse(key, v)?,
            "w_dim" => self.w_dim = parse(key, v)?,
            "mapping_layers" => self.mapping_layers = parse(key, v)?,
            "base_resolution" => self.base_resolution = parse(key, v)?,
            "target_resolution" => self.target_resolution = parse(key, v)?,
            "channels" => self.channels = parse_list(key, v)?,
            "noise_injection" => self.noise_injection = parse_bool(key, v)?,
            "modulate_affine" => self.modulate_affine = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "use_dw" => self.use_dw = parse_bool(key, v)?,
            "use_df" => self.use_df = parse_bool(key, v)?,
            "use_di" => self.use_di = parse_bool(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "oversample" => self.oversample = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "with_bias" => self.with_bias = parse_bool(key, v)?,
            "act" => self.act = parse(key, v)?,
            "disc_channels" => self.disc_channels = parse_list(key, v)?,
            "disc_patch" => self.disc_patch = parse_bool(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "distance" => self.distance = parse(key, v)?,
            "diversity_samples" => self.diversity_samples = parse(key, v)?,
            "frechet_samples" => self.frechet_samples = parse(key, v)?,
            "n_tasks" => self.n_tasks = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "tasks" => self.tasks = parse_list(key, v)?,
            "distance_matrix" => self.distance_matrix = opt_path(v),
            "source" => self.source = (!v.is_empty()).then(|| v.to_string()),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    /// Every key with its current value, in the format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let lines = [
            ("seed", self.seed.to_string()),
            ("base_seed", self.base_seed.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("w_dim", self.w_dim.to_string()),
            ("mapping_layers", self.mapping_layers.to_string()),
            ("base_resolution", self.base_resolution.to_string()),
            ("target_resolution", self.target_resolution.to_string()),
            ("channels", join(&self.channels)),
            ("noise_injection", self.noise_injection.to_string()),
            ("modulate_affine", self.modulate_affine.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("lambda", self.lambda.to_string()),
            ("use_dw", self.use_dw.to_string()),
            ("use_df", self.use_df.to_string()),
            ("use_di", self.use_di.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("oversample", self.oversample.to_string()),
            ("rank", self.rank.to_string()),
            ("with_bias", self.with_bias.to_string()),
            ("act", self.act.to_string()),
            ("disc_channels", join(&self.disc_channels)),
            ("disc_patch", self.disc_patch.to_string()),
            ("log_every", self.log_every.to_string()),
            ("distance", self.distance.name().to_string()),
            ("diversity_samples", self.diversity_samples.to_string()),
            ("frechet_samples", self.frechet_samples.to_string()),
            ("n_tasks", self.n_tasks.to_string()),
            ("k", self.k.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("tasks", self.tasks.join(",")),
            ("distance_matrix", path(&self.distance_matrix)),
            ("source", self.source.clone().unwrap_or_default()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            mapping_layers: self.mapping_layers,
            base_resolution: self.base_resolution,
            target_resolution: self.target_resolution,
            channels: self.channels.clone(),
            noise_injection: self.noise_injection,
            modulate_affine: self.modulate_affine,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            iterations: self.iterations,
            cms: CmsConfig {
                lambda: self.lambda,
                targets: CmsTargets {
                    use_dw: self.use_dw,
                    use_df: self.use_df,
                    use_di: self.use_di,
                },
                epsilon: self.epsilon,
                oversample: self.oversample,
            },
            seed: self.seed,
            rank: self.rank,
            with_bias: self.with_bias,
            act: self.act,
            distance: self.distance,
            disc_channels: self.disc_channels.clone(),
            disc_patch: self.disc_patch,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        self.train().validate()?;
        if self.disc_channels.is_empty() {
            bail!("disc_channels must list at least one width");
        }
        if self.diversity_samples < 2 || self.frechet_samples < 2 {
            bail!("metric sample counts must be at least 2");
        }
        Ok(())
    }
}
