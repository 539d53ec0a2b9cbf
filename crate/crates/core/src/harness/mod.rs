//! Configuration, the training loop, metrics and report files.

mod ablation;
mod checks;
mod config;
mod metrics;
mod output;
mod train;

pub use ablation::{run_ablation, run_arms, write_outputs, ArmResult, Suite};
pub use checks::{golden_reward_rows, loss_gradient_checks, GradCheckReport, GOLDEN_REWARD_TABLE};
pub use config::{
    default_data_dir, routing_name, CoefficientKind, EnvKind, ExperimentConfig, TrainingChoice,
};
pub use metrics::{
    aggregate_ci, compute_ctr, mean_ci, smooth, tail_mean, AggregateCurve, EpisodeMetrics,
};
pub use output::{
    emit_aggregate_csv, emit_csv, emit_grad_csv, emit_svg, fmt_num, manifest_text, read_csv,
    render_svg, save_checkpoint, write_manifest, EpisodeRow,
};
pub use train::{
    initial_agent, train, Coverage, GradNormRecord, GradSource, RoutingAudit, RunOptions, RunResult,
};
