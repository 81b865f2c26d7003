//! Procedural few-shot tasks: one colored shape family per task, with seeded
//! per-image jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LfsError, Result};
use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
        }
    }

    /// Whether the point `(u, v)`, in shape-local units where the shape spans `[-1, 1]`, is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Triangle => v <= 0.8 && u.abs() <= (v + 1.0) * 0.5,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.45..=1.0).contains(&r2)
            }
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Appearance shared by every image in one toy task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    pub shape: ShapeKind,
    /// Centre of the hue band in `[0, 1)`.
    pub hue: f64,
    /// Background RGB in `[-1, 1]`.
    pub background: [f32; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Style of the `index`-th toy task; successive tasks cycle shapes and spread hues.
pub fn toy_style(index: usize) -> ToyStyle {
    let shape = ShapeKind::ALL[index % ShapeKind::ALL.len()];
    let hue = (index as f64 * 0.381_966).rem_euclid(1.0);
    let bg = hsv_to_rgb(hue + 0.5, 0.35, 0.25 + 0.15 * (index % 3) as f64);
    ToyStyle {
        shape,
        hue,
        background: bg.map(|c| (2.0 * c - 1.0) as f32),
    }
}

pub fn toy_task_id(index: usize) -> String {
    format!("toy{index}-{}", toy_style(index).shape.name())
}

/// Renders one jittered instance with 4x4 supersampling.
pub fn render<R: Rng + ?Sized>(style: &ToyStyle, resolution: usize, rng: &mut R) -> Image {
    let res = resolution as f64;
    let scale = res * rng.random_range(0.22..0.36);
    let cx = res * 0.5 + res * rng.random_range(-0.15..0.15);
    let cy = res * 0.5 + res * rng.random_range(-0.15..0.15);
    let hue = style.hue + rng.random_range(-0.04..0.04);
    let fg = hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.75..1.0)).map(|c| 2.0 * c - 1.0);
    let bg = style.background.map(|c| c as f64 + rng.random_range(-0.05..0.05));
    let mut data = vec![0.0f32; CHANNELS * resolution * resolution];
    const SS: usize = 4;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if style.shape.contains((px - cx) / scale, (py - cy) / scale) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            for c in 0..CHANNELS {
                data[c * resolution * resolution + y * resolution + x] = (a * fg[c] + (1.0 - a) * bg[c]).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Image::new(resolution, resolution, data).expect("toy image dims")
}

/// `n_tasks` tasks of `k` images each, as `(task_id, images)`.
pub fn make_toy_tasks(n_tasks: usize, k: usize, resolution: usize, seed: u64) -> Result<Vec<(String, Vec<Image>)>> {
    if n_tasks == 0 || k == 0 {
        return Err(LfsError::Config("make-toy needs at least one task and one image".into()));
    }
    if resolution < 4 {
        return Err(LfsError::Config(format!("toy resolution {resolution} is too small")));
    }
    Ok((0..n_tasks)
        .map(|t| {
            let style = toy_style(t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0xa076_1d64_78bd_642f));
            (toy_task_id(t), (0..k).map(|_| render(&style, resolution, &mut rng)).collect())
        })
        .collect())
}
