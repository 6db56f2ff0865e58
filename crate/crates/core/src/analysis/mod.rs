//! Weight-delta reports, the timestep probe, attention export and
//! embedding-based metrics.

pub mod attention;
pub mod delta;
pub mod metrics;
pub mod plots;
pub mod probe;

pub use attention::{export_cross_attention, AttentionMaps};
pub use delta::{default_grouping, delta_weights, DeltaEntry, DeltaGroup, DeltaReport};
pub use metrics::{
    cosine, diversity_stats, image_image_score, image_text_score, DiversityStats, EmbeddingBackend, Split,
    ToyBackend,
};
pub use probe::{spearman, timestep_effect_probe, ProbeCurve};
