//! Vehicle re-identification toolkit built around fused feature embeddings.
//!
//! Two independently trained extractors embed vehicle crops: a mid-level CNN
//! that concatenates globally averaged features of its last two residual
//! stages, and a hierarchical windowed-attention transformer. Both are fit
//! with batch-hard triplet loss over P x K identity-balanced batches. At
//! retrieval time the per-branch query and gallery embeddings are fused by
//! concatenation, ranked by Euclidean distance, and scored with mAP and
//! CMC rank-k. A grid-histogram shot-boundary detector covers keyframe
//! extraction from surveillance footage.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `reidfuse` binary for the pipeline CLI
//! (`keyframes`, `synth`, `train`, `extract`, `evaluate`).

pub mod backbone;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod imgio;
pub mod keyframe;
pub mod manifest;
pub mod metric;
pub mod nn;
pub mod synth;

pub use embedding::{load_embeddings, save_embeddings, Branch, EmbeddingSet};
pub use error::{Error, Result};
pub use keyframe::{
    detect_shot_boundaries, extract_keyframes, grid_histogram, histogram_difference,
    FrameHistogram, KeyframeConfig, ShotBoundary,
};
pub use manifest::{load_manifest, save_manifest, ImageRecord, Manifest, Split};
