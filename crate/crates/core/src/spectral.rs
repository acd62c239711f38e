//! Spectral basis of the transition operator and diffusion-map coordinates.
//!
//! The eigenproblem is solved through the symmetric conjugate
//! S = D^-1/2 W D^-1/2, which shares P's spectrum while keeping the solver on
//! well-conditioned symmetric ground; right eigenvectors of P are recovered
//! as psi = D^-1/2 v. Coordinates scale eigenvectors by eigenvalue powers,
//! and an optional normalization (energy or ZCA whitening) is fitted on the
//! landmark coordinates and replayed verbatim on queries.

use crate::eigen::{sym_eigen_dense, sym_eigen_topk};
use crate::error::Result;
use crate::graph::ClassGraph;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Largest class size handled by the dense eigensolver; bigger graphs go
/// through the truncated Lanczos route.
pub const DENSE_EIGEN_MAX: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    Energy,
    Zca,
}

impl Normalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Energy => "energy",
            Normalization::Zca => "zca",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    /// Diffusion time; positive integer so negative eigenvalues stay real
    /// under powering.
    pub t: u32,
    /// Number of non-trivial coordinates retained.
    pub l: usize,
    pub normalization: Normalization,
    /// Relative ridge for ZCA whitening (fraction of the mean covariance
    /// eigenvalue).
    pub zca_epsilon: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t: 4,
            l: 32,
            normalization: Normalization::Zca,
            zca_epsilon: 1e-6,
        }
    }
}

/// Leading eigenpairs of a class transition operator.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// lambda_0 >= lambda_1 >= ... (length l + 1, lambda_0 = 1 for a valid
    /// transition operator).
    pub eigenvalues: Array1<f64>,
    /// n x (l + 1); column j is the right eigenvector psi_j of P, sign-fixed
    /// so its largest-magnitude entry is positive.
    pub eigenvectors: Array2<f64>,
    /// Retained non-trivial coordinate count (columns 1..=l).
    pub l: usize,
    /// Degrees of the source graph, kept for reconstruction.
    pub degrees: Array1<f64>,
    /// Original request when it exceeded n - 1 and had to be clamped.
    pub clamped_from: Option<usize>,
}

/// Eigendecompose a class graph's transition operator, retaining `l`
/// non-trivial coordinates (clamped to n - 1 with a recorded warning).
pub fn fit_spectral_basis(g: &ClassGraph, l: usize) -> Result<SpectralBasis> {
    let n = g.n();
    let clamped_from = (l > n - 1).then_some(l);
    let l_eff = l.min(n - 1);
    let pairs = l_eff + 1;

    let inv_sqrt: Vec<f64> = g.degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();

    let eig = if n <= DENSE_EIGEN_MAX {
        let mut s = Array2::zeros((n, n));
        for (i, row) in g.affinity.rows.iter().enumerate() {
            for &(j, w) in row {
                s[[i, j]] = w * inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let mut full = sym_eigen_dense(s.view())?;
        full.values.truncate(pairs);
        full.vectors = full.vectors.slice(ndarray::s![.., ..pairs]).to_owned();
        full
    } else {
        let affinity = g.affinity.clone();
        let scaled = inv_sqrt.clone();
        sym_eigen_topk(
            n,
            pairs,
            move |x, y| {
                for (i, row) in affinity.rows.iter().enumerate() {
                    y[i] = scaled[i] * row.iter().map(|&(j, w)| w * scaled[j] * x[j]).sum::<f64>();
                }
            },
            0x6e0c,
        )?
    };

    // psi = D^-1/2 v, then fix signs deterministically.
    let mut eigenvectors = Array2::zeros((n, pairs));
    for col in 0..pairs {
        for row in 0..n {
            eigenvectors[[row, col]] = eig.vectors[[row, col]] * inv_sqrt[row];
        }
        let mut arg = 0;
        let mut best = -1.0;
        for row in 0..n {
            let mag = eigenvectors[[row, col]].abs();
            if mag > best {
                best = mag;
                arg = row;
            }
        }
        if eigenvectors[[arg, col]] < 0.0 {
            for row in 0..n {
                eigenvectors[[row, col]] = -eigenvectors[[row, col]];
            }
        }
    }

    Ok(SpectralBasis {
        eigenvalues: Array1::from_vec(eig.values),
        eigenvectors,
        l: l_eff,
        degrees: g.degrees.clone(),
        clamped_from,
    })
}

/// Unnormalized diffusion coordinates: row i has entries
/// lambda_j^t psi_j(i) for j = 1..=l (the trivial psi_0 is excluded).
pub fn raw_diffusion_coords(basis: &SpectralBasis, t: u32, l: usize) -> Array2<f64> {
    assert!(
        l <= basis.l,
        "requested {l} coordinates, basis has {}",
        basis.l
    );
    let n = basis.eigenvectors.nrows();
    let mut coords = Array2::zeros((n, l));
    for j in 1..=l {
        let factor = basis.eigenvalues[j].powi(t as i32);
        for i in 0..n {
            coords[[i, j - 1]] = factor * basis.eigenvectors[[i, j]];
        }
    }
    coords
}

/// Diffusion coordinates with the configured normalization applied; the
/// returned state replays the identical transform on queries.
pub fn diffusion_coords(basis: &SpectralBasis, cfg: &DiffusionConfig) -> (Array2<f64>, NormState) {
    let raw = raw_diffusion_coords(basis, cfg.t, cfg.l);
    normalize_coords(raw, cfg.normalization, cfg.zca_epsilon)
}

/// Diffusion distance between in-sample nodes i and j via the spectral sum;
/// equals the Euclidean distance between unnormalized coordinate rows.
pub fn diffusion_distance(basis: &SpectralBasis, i: usize, j: usize, cfg: &DiffusionConfig) -> f64 {
    assert!(cfg.l <= basis.l);
    let mut acc = 0.0;
    for k in 1..=cfg.l {
        let lam = basis.eigenvalues[k].powi(2 * cfg.t as i32);
        let diff = basis.eigenvectors[[i, k]] - basis.eigenvectors[[j, k]];
        acc += lam * diff * diff;
    }
    acc.sqrt()
}

/// Fitted normalization transform, replayable on query coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum NormState {
    None,
    /// Per-column multipliers giving unit column energy (1.0 on zero columns).
    Energy {
        scale: Vec<f64>,
    },
    /// Whitening: x -> transform * (x - mean), transform symmetric.
    Zca {
        mean: Array1<f64>,
        transform: Array2<f64>,
    },
}

impl NormState {
    /// Apply the stored transform to one coordinate vector.
    pub fn apply_vec(&self, v: ArrayView1<f64>) -> Array1<f64> {
        match self {
            NormState::None => v.to_owned(),
            NormState::Energy { scale } => {
                Array1::from_iter(v.iter().zip(scale).map(|(&x, &s)| x * s))
            }
            NormState::Zca { mean, transform } => {
                let centered = &v - mean;
                transform.dot(&centered)
            }
        }
    }

    /// Apply to every row of a coordinate matrix.
    pub fn apply_rows(&self, m: &Array2<f64>) -> Array2<f64> {
        match self {
            NormState::None => m.clone(),
            _ => {
                let mut out = Array2::zeros(m.raw_dim());
                for (i, row) in m.outer_iter().enumerate() {
                    out.row_mut(i).assign(&self.apply_vec(row));
                }
                out
            }
        }
    }

    /// Left-compose the transform's linear part with a Jacobian.
    pub fn compose_jacobian(&self, jac: Array2<f64>) -> Array2<f64> {
        match self {
            NormState::None => jac,
            NormState::Energy { scale } => {
                let mut out = jac;
                for (mut row, &s) in out.outer_iter_mut().zip(scale) {
                    row.mapv_inplace(|x| x * s);
                }
                out
            }
            NormState::Zca { transform, .. } => transform.dot(&jac),
        }
    }
}

/// Normalize coordinate columns per the requested mode.
///
/// energy: each column rescaled to unit sum of squares (zero columns kept);
/// zca: columns centered then whitened by (Sigma + eps I)^-1/2 assembled from
/// the covariance eigendecomposition.
pub fn normalize_coords(
    coords: Array2<f64>,
    mode: Normalization,
    zca_epsilon: f64,
) -> (Array2<f64>, NormState) {
    match mode {
        Normalization::None => (coords, NormState::None),
        Normalization::Energy => {
            let scale: Vec<f64> = coords
                .columns()
                .into_iter()
                .map(|col| {
                    let energy: f64 = col.iter().map(|&x| x * x).sum();
                    if energy == 0.0 {
                        1.0
                    } else {
                        1.0 / energy.sqrt()
                    }
                })
                .collect();
            let mut out = coords;
            for (mut col, &s) in out.columns_mut().into_iter().zip(&scale) {
                col.mapv_inplace(|x| x * s);
            }
            (out, NormState::Energy { scale })
        }
        Normalization::Zca => {
            let n = coords.nrows();
            assert!(n >= 2, "zca needs at least two rows");
            let l = coords.ncols();
            let mean = coords.mean_axis(ndarray::Axis(0)).unwrap();
            let centered = &coords - &mean;
            let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

            let eig = sym_eigen_dense(cov.view()).expect("covariance eigendecomposition");
            let positive: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
            let mean_eig = positive.iter().sum::<f64>() / l as f64;
            let eps = if mean_eig > 0.0 {
                zca_epsilon * mean_eig
            } else {
                zca_epsilon
            };

            // transform = U (Lambda + eps I)^-1/2 U^T
            let mut scaled = eig.vectors.clone();
            for (mut col, &lam) in scaled.columns_mut().into_iter().zip(&positive) {
                let f = 1.0 / (lam + eps).sqrt();
                col.mapv_inplace(|x| x * f);
            }
            let transform = scaled.dot(&eig.vectors.t());
            let out = centered.dot(&transform);
            (out, NormState::Zca { mean, transform })
        }
    }
}

/// Covariance of rows, used by tests and diagnostics.
pub fn row_covariance(m: ArrayView2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mean = m.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &m - &mean;
    centered.t().dot(&centered) / (n as f64 - 1.0)
}
