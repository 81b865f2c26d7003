//! Adversarial losses, the original mode seeking ratio and the cluster-wise
//! mode seeking loss.

use crate::error::{LfsError, Result};
use crate::graph::{softplus, Graph, Var};
use crate::image::Image;
use crate::metrics::{assign_clusters, ClusterAssignment, PerceptualDistance};
use crate::netlab::{ForwardRecord, GeneratorVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which distance ratios the cluster-wise loss maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmsTargets {
    pub use_dw: bool,
    pub use_df: bool,
    pub use_di: bool,
}

impl CmsTargets {
    pub const ALL: CmsTargets = CmsTargets {
        use_dw: true,
        use_df: true,
        use_di: true,
    };

    /// The seven non-empty flag combinations.
    pub fn combinations() -> Vec<CmsTargets> {
        (1u8..8)
            .map(|b| CmsTargets {
                use_dw: b & 1 != 0,
                use_df: b & 2 != 0,
                use_di: b & 4 != 0,
            })
            .collect()
    }

    pub fn any(self) -> bool {
        self.use_dw || self.use_df || self.use_di
    }
}

impl Default for CmsTargets {
    fn default() -> Self {
        CmsTargets::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmsConfig {
    pub lambda: f64,
    pub targets: CmsTargets,
    pub epsilon: f64,
    pub oversample: usize,
}

impl Default for CmsConfig {
    fn default() -> Self {
        CmsConfig {
            lambda: 1.0,
            targets: CmsTargets::ALL,
            epsilon: 1e-5,
            oversample: 4,
        }
    }
}

impl CmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LfsError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LfsError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.oversample == 0 {
            return Err(LfsError::Config("oversample factor must be >= 1".into()));
        }
        if self.lambda > 0.0 && !self.targets.any() {
            return Err(LfsError::Config("at least one cms target must be enabled".into()));
        }
        Ok(())
    }
}

fn check_logits(logits: &[f64], what: &'static str) -> Result<()> {
    if logits.is_empty() {
        return Err(LfsError::Empty(what));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LfsError::Contract(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn mean_softplus(logits: &[f64], sign: f64) -> f64 {
    logits.iter().map(|&l| softplus(sign * l)).sum::<f64>() / logits.len() as f64
}

/// Non-saturating generator loss, `mean softplus(-D(fake))`.
pub fn adv_g_loss(fake_logits: &[f64]) -> Result<f64> {
    check_logits(fake_logits, "fake logits")?;
    Ok(mean_softplus(fake_logits, -1.0))
}

/// `mean softplus(D(fake)) + mean softplus(-D(real))`.
pub fn adv_d_loss(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    check_logits(real_logits, "real logits")?;
    check_logits(fake_logits, "fake logits")?;
    Ok(mean_softplus(fake_logits, 1.0) + mean_softplus(real_logits, -1.0))
}

/// Tape form of [`adv_g_loss`] over an `N` logit vector.
pub fn adv_g_loss_graph<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let neg = g.scale(fake, -T::one());
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// Tape form of [`adv_d_loss`].
pub fn adv_d_loss_graph<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let sf = g.softplus(fake);
    let lf = g.mean(sf)?;
    let neg = g.scale(real, -T::one());
    let sr = g.softplus(neg);
    let lr = g.mean(sr)?;
    g.add(lf, lr)
}

fn mad<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// `Δz / (ΔI + ε)` for one pair of samples.
pub fn ms_loss_original<T: Scalar>(a: &ForwardRecord<T>, b: &ForwardRecord<T>, epsilon: f64) -> Result<f64> {
    if a.z.len() != b.z.len() || a.image.shape() != b.image.shape() {
        return Err(LfsError::shape("mode seeking pair", a.image.shape(), b.image.shape()));
    }
    Ok(mad(&a.z, &b.z) / (mad(a.image.data(), b.image.data()) + epsilon))
}

/// Unordered within-cluster pairs, with each pair's weight in the final
/// average (clusters of fewer than two members contribute nothing).
pub fn cluster_pairs(assignment: &ClusterAssignment) -> Vec<((usize, usize), f64)> {
    let contributing = assignment.members.iter().filter(|m| m.len() >= 2).count();
    let mut out = Vec::new();
    for m in assignment.members.iter().filter(|m| m.len() >= 2) {
        let np = m.len() * (m.len() - 1) / 2;
        let weight = 1.0 / (np as f64 * contributing as f64);
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                out.push(((i, j), weight));
            }
        }
    }
    out
}

/// Per-pair summed ratio for the enabled targets, from raw mean absolute differences.
pub fn pair_ratio(dz: f64, dw: f64, df: &[f64], di: f64, targets: CmsTargets, epsilon: f64) -> f64 {
    let mut v = 0.0;
    if targets.use_dw {
        v += dw / (dz + epsilon);
    }
    if targets.use_df && !df.is_empty() {
        v += df.iter().map(|f| f / (dw + epsilon)).sum::<f64>() / df.len() as f64;
    }
    if targets.use_di {
        v += di / (dw + epsilon);
    }
    v
}

/// Cluster-wise mode seeking loss over fixed records, anchored at `anchors`.
pub fn cms_loss<T: Scalar>(
    records: &[ForwardRecord<T>],
    anchors: &[Image],
    dist: &dyn PerceptualDistance,
    cfg: &CmsConfig,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(LfsError::Empty("cms anchors"));
    }
    let images: Vec<Image> = records.iter().map(ForwardRecord::to_image).collect();
    let assignment = assign_clusters(&images, anchors, dist)?;
    cms_loss_assigned(records, &assignment, cfg)
}

/// [`cms_loss`] with the cluster assignment already fixed.
pub fn cms_loss_assigned<T: Scalar>(records: &[ForwardRecord<T>], assignment: &ClusterAssignment, cfg: &CmsConfig) -> Result<f64> {
    assignment.validate()?;
    if assignment.n != records.len() {
        return Err(LfsError::shape("cms records", assignment.n, records.len()));
    }
    let pairs = cluster_pairs(assignment);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let eps = cfg.epsilon;
    let values: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&((i, j), weight)| {
            let (a, b) = (&records[i], &records[j]);
            let df: Vec<f64> = a.features.iter().zip(&b.features).map(|(x, y)| mad(x.data(), y.data())).collect();
            let v = pair_ratio(
                mad(&a.z, &b.z),
                mad(&a.w, &b.w),
                &df,
                mad(a.image.data(), b.image.data()),
                cfg.targets,
                eps,
            );
            (weight, v)
        })
        .collect();
    Ok(cms_from_pair_values(&values, eps))
}

/// `1 / (Σ weight·value + ε)` over weighted pair values; 0 when there are none.
pub fn cms_from_pair_values(values: &[(f64, f64)], epsilon: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    1.0 / (values.iter().map(|(w, v)| w * v).sum::<f64>() + epsilon)
}

/// Tape form of [`cms_loss_assigned`]; `z` holds the latents that produced `vars`.
pub fn cms_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &GeneratorVars,
    z: &Tensor<T>,
    assignment: &ClusterAssignment,
    cfg: &CmsConfig,
) -> Result<Var> {
    assignment.validate()?;
    let n = g.shape(vars.image)[0];
    if assignment.n != n || z.shape()[0] != n {
        return Err(LfsError::shape("cms records", n, assignment.n));
    }
    let weighted = cluster_pairs(assignment);
    if weighted.is_empty() {
        return Ok(g.constant(Tensor::new(vec![1], vec![T::zero()])?));
    }
    let eps = T::of(cfg.epsilon);
    let pairs: Vec<(usize, usize)> = weighted.iter().map(|&(p, _)| p).collect();
    let weights: Vec<T> = weighted.iter().map(|&(_, w)| T::of(w)).collect();
    let zd = z.shape()[1];
    let zv = z.data();
    let inv_dz: Vec<T> = pairs
        .iter()
        .map(|&(i, j)| T::of(1.0 / (mad(&zv[i * zd..(i + 1) * zd], &zv[j * zd..(j + 1) * zd]) + cfg.epsilon)))
        .collect();

    let dw = g.pair_mad(vars.w, pairs.clone())?;
    let guarded = g.add_scalar(dw, eps);
    let inv_dw = g.reciprocal(guarded);
    let mut terms = Vec::new();
    if cfg.targets.use_dw {
        terms.push(g.mul_const(dw, inv_dz)?);
    }
    if cfg.targets.use_df && !vars.features.is_empty() {
        let mut acc = g.pair_mad(vars.features[0], pairs.clone())?;
        for f in &vars.features[1..] {
            let d = g.pair_mad(*f, pairs.clone())?;
            acc = g.add(acc, d)?;
        }
        let acc = g.scale(acc, T::one() / T::of(vars.features.len() as f64));
        terms.push(g.mul(acc, inv_dw)?);
    }
    if cfg.targets.use_di {
        let di = g.pair_mad(vars.image, pairs.clone())?;
        terms.push(g.mul(di, inv_dw)?);
    }
    let mut per_pair = match terms.first() {
        Some(t) => *t,
        None => return Err(LfsError::Config("at least one cms target must be enabled".into())),
    };
    for t in &terms[1..] {
        per_pair = g.add(per_pair, *t)?;
    }
    let weighted = g.mul_const(per_pair, weights)?;
    let mean = g.sum(weighted);
    let guarded = g.add_scalar(mean, eps);
    Ok(g.reciprocal(guarded))
}

/// `adv + λ·cms`.
pub fn total_g_loss(adv: f64, cms: f64, cfg: &CmsConfig) -> f64 {
    adv + cfg.lambda * cms
}
