//! Core library for `maskbench`: a desk-scale study of foreground-attention
//! masks and adversarial robustness.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`segmenter`] — seeded graph-cut foreground extraction (exact min-cut).
//! 2. [`dataset`] / [`transforms`] — dataset construction from annotations or
//!    from the built-in synthetic generator, plus the mask/crop/resize
//!    preprocessing used to build foreground variants of a dataset.
//! 3. [`model`] / [`autodiff`] / [`optim`] — a small fixed-architecture CNN
//!    with reverse-mode gradients and SGD+momentum, checked against finite
//!    differences ([`gradcheck`]).
//! 4. [`attack`] / [`trainer`] — L-inf PGD (optionally restricted to a
//!    foreground mask) and the natural/adversarial training + evaluation
//!    harness that produces the four-way comparison table.
//!
//! [`pipeline`] wires all of it into a single seeded end-to-end run on
//! synthetic data.
//!
//! Everything is deterministic: the same inputs, seeds, and versions produce
//! byte-identical artifacts. All numeric state is `f64`; checkpoints store
//! parameters as little-endian `f32`.

pub mod attack;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod maxflow;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod segmenter;
pub mod tensor;
pub mod trainer;
pub mod transforms;

mod gemm;

pub use attack::{pgd_attack, project_linf, AdvResult, AttackConfig};
pub use autodiff::{input_gradient, loss_and_grads, Gradients};
pub use dataset::{
    build_dataset, read_annotations, read_manifest, select_classes, synth_generate,
    write_annotations, write_manifest, Annotation, AnnotationSet, BuildReport, DatasetManifest,
    Record, SynthConfig, SynthStats,
};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use image::{Image, Mask};
pub use maxflow::{EdgeInfo, FlowNetwork, MaxFlowResult};
pub use model::{Layer, Model};
pub use optim::{sgd_step, MomentumState};
pub use pipeline::{end2end, CellOutcome, End2EndConfig, End2EndOutcome};
pub use segmenter::{
    build_graph, n_link_capacity, sample_center_seeds, segment, segment_with_seeds, Connectivity,
    SeedSet, SegmenterParams,
};
pub use tensor::Tensor;
pub use trainer::{
    compare_table, evaluate, read_report, train, write_report, EpochStats, EvalReport, InputMode,
    TrainConfig, TrainMode,
};
pub use transforms::{
    apply_mask, binarize, blackout_regions, crop_image, crop_mask, crop_square, resize_nn,
    resize_nn_mask, square_crop_rect, BBox, Rect,
};
