//! Metrics, evaluation protocols, saliency maps and embedding export.

mod embeddings;
mod gradcam;
mod metrics;
mod protocols;
mod report;

pub use embeddings::{export_embeddings, read_embeddings, write_embeddings, EmbeddingHeader};
pub use gradcam::{grad_cam, write_heatmap, CamSource, Heatmap, HeatmapIndex};
pub use metrics::{accuracy, auc, auc_brute_force, centroid_cosine_distance, ranks, sign_test_less, spearman};
pub use protocols::{
    run_cross_forgery, run_data_scale_ablation, run_held_out, run_module_ablation, run_robustness, EvalConfig, Experiment,
    FoldResult,
};
pub use report::{kind_row, EvalReport, ReportRow, RobustnessColumn, RobustnessTable};
