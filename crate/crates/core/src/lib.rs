//! Stacked Bernoulli mixture feature networks.
//!
//! Binary edge maps are coded layer by layer against part dictionaries
//! learned with EM. Mixture layers may carry a latent rotation/polarity
//! group (Permutation EM), which makes their parts come in transformed
//! families. Task layers are per-class mixtures or a linear SVM.

pub mod classifier;
pub mod coding;
pub mod container;
pub mod data;
pub mod edges;
pub mod error;
pub mod groups;
pub mod map;
pub mod math;
pub mod mixture;
pub mod network;
pub mod parallel;
pub mod permem;
pub mod pipeline;
pub mod render;
pub mod transforms;

pub use classifier::{
    calibrate, canonicalize, complete_features, error_rate, fit_class_mixtures, fit_linear_svm, fit_rotmix_classes,
    fit_rotmix_complete, predict, rotated_features, select_linear_svm, standardize_logliks, task_quarter_tie,
    ClassModel, LinearSvm, PredictOptions, Prediction, RotScoring, ScoreInput, ScoreMode, ScoreStats, Scorer,
    SvmOptions, TaskModels,
};
pub use coding::{code_map, dilate, or_pool, or_pool_with, pool_cells, Coder, CodingConfig, PoolLayout, TieBreak};
pub use container::{from_bytes, load_model, read_manifest, save_model, to_bytes, Manifest, Model, TaskLayer, MAGIC};
pub use data::{
    load_amat, load_idx, make_variation, per_class_indices, split_per_class, split_standard, Dataset, SplitTag,
    Variation,
};
pub use edges::{extract_edges, EdgeConfig};
pub use error::{Error, Result};
pub use groups::{flatten_index, permutation_table, unflatten_index, GroupElement, GroupSpec, PermTable};
pub use map::{BinaryRows, ChannelLayout, CompleteBatch, FeatureMap, GrayImage};
pub use mixture::{bm_e_step, bm_fit, bm_log_likelihood, bm_m_step, BernoulliMixture, EmOptions, FitTrace};
pub use network::{
    build_preset, pass_through_samples, sample_patches, train_greedy, LayerKind, LayerReport, LayerSpec, Network,
    PatchBatch, PatchDraw, Preset, Provenance, TaskSpec, TrainOptions, PRESETS,
};
pub use permem::{
    pem_fit, pem_fit_complete, pem_flatten, pem_m_step, pem_responsibilities, PartMeta, PartsDictionary, PemOptions,
    PermutationMixture, QuarterTie,
};
pub use pipeline::{
    default_data_dir, evaluate, feature_rows, prepare_data, run_train, run_train_task, DataConfig, DataSource,
    EvalReport, PreparedData, RunConfig, TrainReport,
};
pub use render::{montage, save_gray, ChannelView};
pub use transforms::{
    complete_sample, rotate_feature_map, rotate_image, transform_feature_map, transform_image, CompleteSample,
    Interpolation, MapGrid, RotationSplit,
};
