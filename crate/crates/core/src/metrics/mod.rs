//! Diversity and fidelity metrics: cluster assignment to training images,
//! pairwise / intra-cluster / entropy-balanced perceptual diversity and a
//! Fréchet distance between embedding statistics.

mod distance;
mod diversity;
mod frechet;
mod report;

pub use distance::{
    cross_distances, pairwise_distances, ConvBank, DistanceKind, DownsampledL1, PerceptualDistance,
    RandomConvFeatures,
};
pub use diversity::{
    assign_clusters, assign_from_distances, b_lpips, b_lpips_from_parts, diversity, entropy_weights, i_lpips,
    i_lpips_from_parts, p_lpips, ClusterAssignment, DiversityReport,
};
pub use frechet::{frechet_distance, frechet_embedding_distance, Embedding, PixelEmbedding, RandomConvEmbedding};
pub use report::MetricsReport;
