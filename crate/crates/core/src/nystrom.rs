//! Out-of-sample extension of a fitted class manifold and its Jacobian.
//!
//! A query is embedded by evaluating the training kernel against the
//! landmarks and combining eigenvectors, so gradients can flow through the
//! embedding during prototype training. The kernel row is evaluated on the
//! same support rule the graph used (k nearest plus every landmark whose own
//! scale radius covers the query): at a landmark this reproduces that row of
//! W exactly, which is what makes in-sample reconstruction an identity
//! rather than an approximation.
//!
//! The adaptive bandwidth sigma(z) and the support set change only on
//! measure-zero kNN switch boundaries; both are treated as constants by the
//! Jacobian (stop-gradient), and [`KernelFrame`] pins them explicitly so
//! finite-difference checks can probe the same smooth branch.

use crate::error::Result;
use crate::graph::{euclid, ClassGraph, GraphConfig};
use crate::spectral::{
    diffusion_coords, fit_spectral_basis, DiffusionConfig, NormState, SpectralBasis,
};
use ndarray::{Array1, Array2, ArrayView1};
use std::collections::BTreeSet;

/// Total-affinity floor below which a query is flagged off-manifold and the
/// row normalizer is clamped.
pub const OFF_MANIFOLD_EPS: f64 = 1e-12;

/// Eigenvalues at or below this magnitude contribute no coordinate (the
/// extension divides by them).
pub const EIGENVALUE_GUARD: f64 = 1e-10;

/// How the kernel row is normalized when combining eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtensionMode {
    /// Normalize by the query's own total affinity (row-stochastic, exact
    /// in-sample reconstruction). The default.
    Row,
    /// Normalize each term by the training degree d_j, the literal form.
    Paper,
}

impl ExtensionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExtensionMode::Row => "row",
            ExtensionMode::Paper => "paper",
        }
    }
}

/// A fitted per-class geometry: landmark graph, spectral basis, cached
/// coordinates, and the normalization replay state.
#[derive(Debug, Clone)]
pub struct ClassManifold {
    pub graph: ClassGraph,
    pub basis: SpectralBasis,
    pub cfg: DiffusionConfig,
    pub norm_state: NormState,
    /// n x l cached coordinates of the landmarks, normalization applied.
    pub landmark_coords: Array2<f64>,
    /// Neighbor count for the query bandwidth sigma(z); defaults to the
    /// graph's k.
    pub k_oos: usize,
}

impl ClassManifold {
    /// Fit the full per-class pipeline over a landmark feature matrix.
    ///
    /// The coordinate count is clamped to n - 1 when necessary; the stored
    /// config reflects the effective value and the basis records the request.
    pub fn fit(
        features: Array2<f64>,
        graph_cfg: &GraphConfig,
        diff_cfg: &DiffusionConfig,
    ) -> Result<Self> {
        let graph = crate::graph::build_class_graph(features, graph_cfg)?;
        let basis = fit_spectral_basis(&graph, diff_cfg.l)?;
        let mut cfg = diff_cfg.clone();
        cfg.l = basis.l;
        let (landmark_coords, norm_state) = diffusion_coords(&basis, &cfg);
        let k_oos = graph.cfg.k;
        Ok(ClassManifold {
            graph,
            basis,
            cfg,
            norm_state,
            landmark_coords,
            k_oos,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.graph.n()
    }

    pub fn dim(&self) -> usize {
        self.graph.dim()
    }
}

/// A query's embedding into one class manifold.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// Length-l coordinates, normalization applied.
    pub coords: Array1<f64>,
    /// Sum of kernel affinities to the landmarks.
    pub total_affinity: f64,
    /// Set when the total affinity fell below [`OFF_MANIFOLD_EPS`]; the
    /// coordinates are still returned, computed with a clamped normalizer.
    pub off_manifold: bool,
}

/// The piecewise-constant parts of the extension at a query point: the
/// adaptive bandwidth and the kernel support. Freezing a frame selects one
/// smooth branch of the map.
#[derive(Debug, Clone)]
pub struct KernelFrame {
    pub sigma_z: f64,
    /// Sorted landmark indices carrying nonzero kernel mass.
    pub support: Vec<usize>,
}

/// Compute the bandwidth and support for a query.
///
/// sigma(z) is the distance to the k_oos-th nearest landmark, skipping exact
/// coincidences so that a landmark queried against its own manifold sees the
/// bandwidth it was fitted with; with fewer than k_oos distinct landmarks the
/// farthest available stands in, and the graph's bandwidth floor applies.
pub fn kernel_frame(m: &ClassManifold, z: ArrayView1<f64>) -> KernelFrame {
    let n = m.landmark_count();
    let dists: Vec<f64> = (0..n)
        .map(|j| euclid(z, m.graph.node_features.row(j)))
        .collect();

    let mut nonzero: Vec<usize> = (0..n).filter(|&j| dists[j] > 0.0).collect();
    nonzero.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));

    let sigma_raw = if nonzero.is_empty() {
        m.graph.sigma_floor
    } else {
        let idx = nonzero.len().min(m.k_oos) - 1;
        dists[nonzero[idx]]
    };
    let sigma_z = sigma_raw.max(m.graph.sigma_floor);

    let mut support: BTreeSet<usize> = (0..n).filter(|&j| dists[j] == 0.0).collect();
    // Component-repair edges exist outside the kNN relation; a query sitting
    // exactly on a bridge endpoint must see its partner or the in-sample
    // kernel row would be missing that entry.
    for &(a, b) in &m.graph.bridge_edges {
        if dists[a] == 0.0 {
            support.insert(b);
        }
        if dists[b] == 0.0 {
            support.insert(a);
        }
    }
    for &j in nonzero.iter().take(m.k_oos) {
        support.insert(j);
    }
    for j in 0..n {
        if dists[j] <= m.graph.scales[j] {
            support.insert(j);
        }
    }

    KernelFrame {
        sigma_z,
        support: support.into_iter().collect(),
    }
}

/// Embed a query into the manifold (fresh frame).
pub fn extend(m: &ClassManifold, z: ArrayView1<f64>, mode: ExtensionMode) -> Embedding {
    extend_framed(m, z, mode, &kernel_frame(m, z))
}

/// Embed a query under a pinned kernel frame.
pub fn extend_framed(
    m: &ClassManifold,
    z: ArrayView1<f64>,
    mode: ExtensionMode,
    frame: &KernelFrame,
) -> Embedding {
    let affinities = support_affinities(m, z, frame);
    let total: f64 = affinities.iter().map(|&(_, a)| a).sum();
    let off_manifold = total < OFF_MANIFOLD_EPS;
    let normalizer = total.max(OFF_MANIFOLD_EPS);

    let l = m.cfg.l;
    let t = m.cfg.t as i32;
    let mut raw = Array1::zeros(l);
    for coord in 1..=l {
        let lambda = m.basis.eigenvalues[coord];
        if lambda.abs() <= EIGENVALUE_GUARD {
            continue;
        }
        let combined: f64 = match mode {
            ExtensionMode::Row => {
                affinities
                    .iter()
                    .map(|&(j, a)| a * m.basis.eigenvectors[[j, coord]])
                    .sum::<f64>()
                    / normalizer
            }
            ExtensionMode::Paper => affinities
                .iter()
                .map(|&(j, a)| a / m.basis.degrees[j] * m.basis.eigenvectors[[j, coord]])
                .sum(),
        };
        raw[coord - 1] = lambda.powi(t) * combined / lambda;
    }

    Embedding {
        coords: m.norm_state.apply_vec(raw.view()),
        total_affinity: total,
        off_manifold,
    }
}

/// Analytic Jacobian d coords / d z (l x D) with a fresh frame.
pub fn extend_jacobian(m: &ClassManifold, z: ArrayView1<f64>, mode: ExtensionMode) -> Array2<f64> {
    extend_jacobian_framed(m, z, mode, &kernel_frame(m, z))
}

/// Analytic Jacobian under a pinned frame: sigma(z) and the support are
/// treated as constants, so this is the exact derivative of the smooth
/// branch selected by `frame`.
pub fn extend_jacobian_framed(
    m: &ClassManifold,
    z: ArrayView1<f64>,
    mode: ExtensionMode,
    frame: &KernelFrame,
) -> Array2<f64> {
    let affinities = support_affinities(m, z, frame);
    let total: f64 = affinities.iter().map(|&(_, a)| a).sum();
    let clamped = total < OFF_MANIFOLD_EPS;
    let normalizer = total.max(OFF_MANIFOLD_EPS);

    let l = m.cfg.l;
    let dim = m.dim();
    let t = m.cfg.t as i32;

    // d a_j / d z = -2 a_j (z - x_j) / (sigma_z sigma_j)
    let grad_coef: Vec<f64> = affinities
        .iter()
        .map(|&(j, a)| -2.0 * a / (frame.sigma_z * m.graph.scales[j]))
        .collect();

    // Row mode needs the normalized combination per coordinate for the
    // quotient rule (skipped when the normalizer is clamped to a constant).
    let mut jac = Array2::zeros((l, dim));
    for coord in 1..=l {
        let lambda = m.basis.eigenvalues[coord];
        if lambda.abs() <= EIGENVALUE_GUARD {
            continue;
        }
        let factor = lambda.powi(t) / lambda;

        let mut row = Array1::<f64>::zeros(dim);
        match mode {
            ExtensionMode::Row => {
                let combined: f64 = affinities
                    .iter()
                    .map(|&(j, a)| a * m.basis.eigenvectors[[j, coord]])
                    .sum::<f64>()
                    / normalizer;
                for (idx, &(j, _)) in affinities.iter().enumerate() {
                    let psi = m.basis.eigenvectors[[j, coord]];
                    let weight = if clamped { psi } else { psi - combined };
                    let c = grad_coef[idx] * weight / normalizer;
                    if c != 0.0 {
                        row.scaled_add(c, &(&z - &m.graph.node_features.row(j)));
                    }
                }
            }
            ExtensionMode::Paper => {
                for (idx, &(j, _)) in affinities.iter().enumerate() {
                    let psi = m.basis.eigenvectors[[j, coord]];
                    let c = grad_coef[idx] * psi / m.basis.degrees[j];
                    if c != 0.0 {
                        row.scaled_add(c, &(&z - &m.graph.node_features.row(j)));
                    }
                }
            }
        }
        jac.row_mut(coord - 1).assign(&(row * factor));
    }

    m.norm_state.compose_jacobian(jac)
}

/// Kernel affinities over the frame's support.
fn support_affinities(
    m: &ClassManifold,
    z: ArrayView1<f64>,
    frame: &KernelFrame,
) -> Vec<(usize, f64)> {
    frame
        .support
        .iter()
        .map(|&j| {
            let d = euclid(z, m.graph.node_features.row(j));
            (j, (-(d * d) / (frame.sigma_z * m.graph.scales[j])).exp())
        })
        .collect()
}

/// Embed each row of a query matrix; rows of the result line up with input.
pub fn extend_rows(m: &ClassManifold, queries: &Array2<f64>, mode: ExtensionMode) -> Array2<f64> {
    let mut out = Array2::zeros((queries.nrows(), m.cfg.l));
    for (i, q) in queries.outer_iter().enumerate() {
        out.row_mut(i).assign(&extend(m, q, mode).coords);
    }
    out
}
