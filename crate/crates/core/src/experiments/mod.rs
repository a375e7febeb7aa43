//! Synthetic viewpoint-shift data, augmentation baselines, metrics and
//! experiment orchestration.

pub mod augment;
pub mod dataset;
pub mod metrics;
pub mod runner;
pub mod scene;

pub use augment::{classic_augment, Augment, AugmentKind};
pub use dataset::{generate_split, read_dir, read_sample, write_dir, write_sample, SplitConfig};
pub use metrics::{miou, ConfusionMatrix};
pub use runner::{
    evaluate, param_counts, read_reports, run_ablation, run_training, seed_mean, write_reports, Axis, DataConfig, Datasets,
    Evaluation, RunConfig, RunReport, Runner,
};
pub use scene::{synth_scene, SceneConfig, SegSample, ViewRange, Viewpoint};
