//! Class-conditional diffusion geometry for prototype matching.
//!
//! The pipeline: per-class kNN affinity graphs with local scaling
//! ([`graph`]), diffusion-map embeddings of their transition operators
//! ([`spectral`]), a differentiable out-of-sample extension for queries and
//! learnable prototypes ([`nystrom`]), compact landmark sketches with
//! periodic refresh ([`landmarks`]), and geodesic prototype classification
//! with a nonnegative similarity head ([`proto`]). Synthetic manifolds with
//! exact geodesic oracles ([`synth`]) back the evaluation story, and
//! [`features_io`] handles ingestion plus bit-exact model persistence.

pub mod config;
pub mod eigen;
pub mod error;
pub mod features_io;
pub mod fit;
pub mod graph;
pub mod landmarks;
pub mod nystrom;
pub mod proto;
pub mod spectral;
pub mod synth;

pub use config::{parse_config, FitConfig, ProtoConfig};
pub use error::{Error, Result};
pub use features_io::{
    load_feature_set, load_model, save_model, FeatureFormat, FeatureSet, ModelBundle,
};
pub use fit::{fit_bundle, FitReport};
pub use graph::{
    build_class_graph, graph_diagnostics, transition_rows_check, ClassGraph, GraphConfig,
};
pub use landmarks::{
    refresh_manifolds, select_landmarks, should_refresh, LandmarkConfig, LandmarkSet, Pool,
    Selection,
};
pub use nystrom::{
    extend, extend_jacobian, kernel_frame, ClassManifold, Embedding, ExtensionMode, KernelFrame,
};
pub use proto::{
    class_scores, classify, classify_batch, classify_patches, init_prototypes, project_prototypes,
    prototype_distances, similarity, train_prototypes, CandidatePool, Explanation, MatchMetric,
    PrototypeBank, TrainOutcome,
};
pub use spectral::{
    diffusion_coords, diffusion_distance, fit_spectral_basis, normalize_coords, DiffusionConfig,
    NormState, Normalization, SpectralBasis,
};
pub use synth::{
    ece, gen_circles, gen_swiss_roll, spearman, swiss_arclen, Generator, SyntheticSet,
};
