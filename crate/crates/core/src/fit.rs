//! End-to-end fit: landmarks -> per-class manifolds -> initialized and
//! projected prototypes, bundled with a diagnostics report.

use crate::config::FitConfig;
use crate::error::Result;
use crate::features_io::{FeatureSet, ModelBundle, MODEL_VERSION};
use crate::graph::graph_diagnostics;
use crate::landmarks::refresh_manifolds;
use crate::proto::{
    init_prototypes, project_prototypes, CandidatePool, MatchMetric, ProjectionWarning,
};

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: u32,
    /// Samples of this class in the source feature set.
    pub sample_count: usize,
    pub landmark_count: usize,
    pub components: usize,
    pub avg_path_length: f64,
    /// Present when the coordinate request exceeded n - 1 and was clamped.
    pub clamped_from: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub classes: Vec<ClassReport>,
    pub landmark_warnings: Vec<String>,
    pub projection_warnings: Vec<ProjectionWarning>,
}

impl FitReport {
    /// Structured text, stable across runs (no timing).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            out.push_str(&format!(
                "class {}: n={} landmarks={} components={} avg_path_length={:.4}",
                c.class, c.sample_count, c.landmark_count, c.components, c.avg_path_length
            ));
            if let Some(from) = c.clamped_from {
                out.push_str(&format!(" l_clamped_from={from}"));
            }
            out.push('\n');
        }
        for w in &self.landmark_warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        for w in &self.projection_warnings {
            out.push_str(&format!(
                "warning: class {} prototype {} embedded off-manifold during projection\n",
                w.class, w.prototype
            ));
        }
        out
    }
}

/// Fit manifolds over selected landmarks, initialize prototypes from the
/// candidate pool (the class features when none is supplied), and anchor
/// them.
pub fn fit_bundle(
    fs: &FeatureSet,
    cfg: &FitConfig,
    pool: Option<&CandidatePool>,
) -> Result<(ModelBundle, FitReport)> {
    cfg.validate()?;
    let owned_pool;
    let pool = match pool {
        Some(p) => p,
        None => {
            owned_pool = CandidatePool::from_class_features(fs);
            &owned_pool
        }
    };

    let (manifolds, landmark_set) =
        refresh_manifolds(fs, &cfg.landmarks, &cfg.graph, &cfg.diffusion)?;
    let mut bank = init_prototypes(pool, cfg.prototypes.m, cfg.prototypes.epsilon_sim, cfg.seed);
    let projection_warnings = project_prototypes(
        &mut bank,
        &manifolds,
        pool,
        cfg.nystrom_mode,
        MatchMetric::Diffusion,
    )?;

    let classes = manifolds
        .iter()
        .map(|(&class, m)| {
            let diag = graph_diagnostics(&m.graph);
            ClassReport {
                class,
                sample_count: fs.rows_of_class(class).len(),
                landmark_count: m.landmark_count(),
                components: diag.components,
                avg_path_length: diag.avg_path_length,
                clamped_from: m.basis.clamped_from,
            }
        })
        .collect();

    let report = FitReport {
        classes,
        landmark_warnings: landmark_set.warnings.clone(),
        projection_warnings,
    };
    let bundle = ModelBundle {
        manifolds,
        prototypes: bank,
        config: cfg.clone(),
        format_version: MODEL_VERSION,
    };
    Ok((bundle, report))
}
