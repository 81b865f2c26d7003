use std::fs;
use std::path::Path;

use super::registry::validate_task_id;
use crate::error::{LfsError, Result};
use crate::image::Image;

/// One few-shot task: a handful of same-size training images.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub images: Vec<Image>,
    pub resolution: usize,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, images: Vec<Image>, resolution: usize) -> Result<Self> {
        let task_id = task_id.into();
        validate_task_id(&task_id)?;
        if images.is_empty() {
            return Err(LfsError::Empty("task images"));
        }
        if let Some(im) = images.iter().find(|im| im.resolution() != (resolution, resolution)) {
            return Err(LfsError::shape("task image", (resolution, resolution), im.resolution()));
        }
        Ok(TaskSpec {
            task_id,
            images,
            resolution,
        })
    }

    /// Loads every PNG in `dir` (sorted by file name), resizing to `resolution`.
    pub fn load_dir(task_id: impl Into<String>, dir: &Path, resolution: usize) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        paths.sort();
        let images = paths
            .iter()
            .map(|p| {
                let im = Image::load_png(p)?;
                Ok(if im.resolution() == (resolution, resolution) {
                    im
                } else {
                    im.resize_bilinear(resolution, resolution)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TaskSpec::new(task_id, images, resolution)
    }
}
