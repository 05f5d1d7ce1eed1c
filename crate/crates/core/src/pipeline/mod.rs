//! Face verification pipeline: landmark alignment, patch ensembles, greedy
//! patch selection, PCA, per-group Joint Bayesian models and score fusion.

pub mod align;
pub mod fusion;
pub mod patch;
pub mod pca;
pub mod select;

pub use align::{estimate_similarity, Alignment, SimilarityTransform};
pub use fusion::{fit_fusion, FusionConfig, FusionModel};
pub use patch::{extract_ensemble, extract_patch, Anchor, CanonicalFrame, PatchNetwork, PatchSpec};
pub use pca::{fit_pca, Pca};
pub use select::{exhaustive_best, l2_subset_accuracy, select_groups, select_patches, SelectionAborted, SelectionConfig, SelectionState, SelectionStep, StepKind};
