use super::distance::{cross_distances, pairwise_distances, PerceptualDistance};
use crate::error::{LfsError, Result};
use crate::image::Image;

/// Generated samples grouped by their nearest anchor (training image).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Generated-image indices per anchor.
    pub members: Vec<Vec<usize>>,
    /// Total number of generated images.
    pub n: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Checks that every index in `0..n` appears in exactly one cluster.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n];
        for &i in self.members.iter().flatten() {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                _ => return Err(LfsError::Config(format!("index {i} is duplicated or out of range"))),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(LfsError::Config("assignment leaves generated images unassigned".into()));
        }
        Ok(())
    }
}

/// Nearest-anchor assignment from an `n x k` distance matrix; ties go to the
/// lowest anchor index.
pub fn assign_from_distances(distances: &[f64], n: usize, k: usize) -> ClusterAssignment {
    assert_eq!(distances.len(), n * k, "distance matrix must be n x k");
    let mut members = vec![Vec::new(); k];
    for i in 0..n {
        let row = &distances[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &d) in row.iter().enumerate().skip(1) {
            if d < row[best] {
                best = j;
            }
        }
        if k > 0 {
            members[best].push(i);
        }
    }
    ClusterAssignment { members, n }
}

pub fn assign_clusters(
    generated: &[Image],
    anchors: &[Image],
    dist: &dyn PerceptualDistance,
) -> Result<ClusterAssignment> {
    if generated.is_empty() {
        return Err(LfsError::Empty("no generated images to cluster"));
    }
    if anchors.is_empty() {
        return Err(LfsError::Empty("no anchor images"));
    }
    let d = cross_distances(dist, generated, anchors)?;
    Ok(assign_from_distances(&d, generated.len(), anchors.len()))
}

/// Mean distance over all unordered pairs; fewer than two images give 0.
pub fn p_lpips(images: &[Image], dist: &dyn PerceptualDistance) -> Result<f64> {
    if images.len() < 2 {
        return Ok(0.0);
    }
    let m = pairwise_distances(dist, images)?;
    let idx: Vec<usize> = (0..images.len()).collect();
    Ok(mean_pair_distance(&idx, &m, images.len()))
}

fn mean_pair_distance(idx: &[usize], matrix: &[f64], n: usize) -> f64 {
    if idx.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            sum += matrix[i * n + j];
            count += 1;
        }
    }
    sum / count as f64
}

/// `w_i = -p_i log10 p_i` with `p_i = |c_i| / N` and `0 log 0 = 0`.
pub fn entropy_weights(sizes: &[usize]) -> Vec<f64> {
    let n: usize = sizes.iter().sum();
    sizes
        .iter()
        .map(|&s| {
            if s == 0 || n == 0 {
                0.0
            } else {
                let p = s as f64 / n as f64;
                -p * p.log10()
            }
        })
        .collect()
}

/// Entropy-weighted sum of per-cluster pairwise diversity.
pub fn b_lpips_from_parts(sizes: &[usize], p_values: &[f64]) -> f64 {
    assert_eq!(sizes.len(), p_values.len(), "one P value per cluster");
    entropy_weights(sizes).iter().zip(p_values).map(|(w, p)| w * p).sum()
}

/// Unweighted mean of per-cluster diversity over clusters with at least two members.
pub fn i_lpips_from_parts(sizes: &[usize], p_values: &[f64]) -> f64 {
    assert_eq!(sizes.len(), p_values.len(), "one P value per cluster");
    let contributing: Vec<f64> = sizes
        .iter()
        .zip(p_values)
        .filter(|(s, _)| **s >= 2)
        .map(|(_, p)| *p)
        .collect();
    if contributing.is_empty() {
        0.0
    } else {
        contributing.iter().sum::<f64>() / contributing.len() as f64
    }
}

fn cluster_p_values(
    generated: &[Image],
    assignment: &ClusterAssignment,
    dist: &dyn PerceptualDistance,
) -> Result<Vec<f64>> {
    if assignment.n != generated.len() {
        return Err(LfsError::shape("cluster assignment", generated.len(), assignment.n));
    }
    assignment.validate()?;
    let m = pairwise_distances(dist, generated)?;
    Ok(assignment
        .members
        .iter()
        .map(|idx| mean_pair_distance(idx, &m, generated.len()))
        .collect())
}

pub fn i_lpips(generated: &[Image], assignment: &ClusterAssignment, dist: &dyn PerceptualDistance) -> Result<f64> {
    let p = cluster_p_values(generated, assignment, dist)?;
    Ok(i_lpips_from_parts(&assignment.sizes(), &p))
}

pub fn b_lpips(generated: &[Image], assignment: &ClusterAssignment, dist: &dyn PerceptualDistance) -> Result<f64> {
    if generated.is_empty() {
        return Err(LfsError::Empty("B-LPIPS needs at least one generated image"));
    }
    let p = cluster_p_values(generated, assignment, dist)?;
    Ok(b_lpips_from_parts(&assignment.sizes(), &p))
}

#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub assignment: ClusterAssignment,
    pub p_values: Vec<f64>,
    pub b_lpips: f64,
    pub i_lpips: f64,
}

/// Clusters `generated` around `anchors` and computes both diversity scores
/// from a single pairwise distance matrix.
pub fn diversity(generated: &[Image], anchors: &[Image], dist: &dyn PerceptualDistance) -> Result<DiversityReport> {
    let assignment = assign_clusters(generated, anchors, dist)?;
    let p_values = cluster_p_values(generated, &assignment, dist)?;
    let sizes = assignment.sizes();
    Ok(DiversityReport {
        b_lpips: b_lpips_from_parts(&sizes, &p_values),
        i_lpips: i_lpips_from_parts(&sizes, &p_values),
        assignment,
        p_values,
    })
}
