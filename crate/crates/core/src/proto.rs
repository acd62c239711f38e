//! Prototype bank, manifold projection, geodesic matching, and the
//! similarity-aggregation head, plus a desk-scale gradient trainer that
//! exercises end-to-end differentiability through the out-of-sample
//! embedding.
//!
//! Distances are always computed inside one class's own diffusion space:
//! the query and the class's prototypes are both embedded into that class
//! manifold before comparison. The Euclidean variant of the same pipeline
//! (anchor and match in raw feature space) is kept as an ablation baseline.

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::features_io::FeatureSet;
use crate::landmarks::{refresh_manifolds, should_refresh, LandmarkSet};
use crate::nystrom::{extend, extend_jacobian, extend_rows, ClassManifold, ExtensionMode};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Candidate vectors eligible as prototype anchors, per class.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub per_class: BTreeMap<u32, Array2<f64>>,
}

impl CandidatePool {
    /// The desk-scale analogue of patch candidates: each class's own
    /// feature rows.
    pub fn from_class_features(fs: &FeatureSet) -> Self {
        let per_class = fs
            .class_ids()
            .into_iter()
            .map(|c| (c, fs.select_rows(&fs.rows_of_class(c))))
            .collect();
        Self { per_class }
    }
}

/// Anchored counterparts of a class's prototypes.
#[derive(Debug, Clone)]
pub struct ProjectedPrototypes {
    /// Index of the anchoring candidate per prototype.
    pub anchor_indices: Vec<usize>,
    /// Anchored candidate vectors (m x D).
    pub anchored: Array2<f64>,
    /// Diffusion coordinates of the anchored vectors (m x l); empty width
    /// under Euclidean matching.
    pub coords: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// Relaxed (trainable) prototype vectors per class, m x D.
    pub prototypes: BTreeMap<u32, Array2<f64>>,
    /// Present once projected.
    pub projected: BTreeMap<u32, ProjectedPrototypes>,
    /// Nonnegative head weights; prototype (c, i) feeds only logit c.
    pub head_weights: BTreeMap<u32, Vec<f64>>,
    pub m: usize,
    pub epsilon_sim: f64,
}

impl PrototypeBank {
    pub fn class_ids(&self) -> Vec<u32> {
        self.prototypes.keys().copied().collect()
    }

    pub fn is_projected(&self) -> bool {
        !self.projected.is_empty() && self.projected.len() == self.prototypes.len()
    }
}

/// Matching space: the class-conditional diffusion embedding, or raw
/// feature space (the ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMetric {
    Diffusion,
    Euclidean,
}

/// Seeded initialization from random candidate rows.
pub fn init_prototypes(
    pool: &CandidatePool,
    m: usize,
    epsilon_sim: f64,
    seed: u64,
) -> PrototypeBank {
    let mut prototypes = BTreeMap::new();
    let mut head_weights = BTreeMap::new();
    for (&class, candidates) in &pool.per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x70_00 + class as u64);
        let n = candidates.nrows();
        let mut rows = Array2::zeros((m, candidates.ncols()));
        for i in 0..m {
            let pick = rng.random_range(0..n);
            rows.row_mut(i).assign(&candidates.row(pick));
        }
        prototypes.insert(class, rows);
        head_weights.insert(class, vec![1.0; m]);
    }
    PrototypeBank {
        prototypes,
        projected: BTreeMap::new(),
        head_weights,
        m,
        epsilon_sim,
    }
}

/// A prototype whose embedding fell off its class manifold during
/// projection; the anchoring still proceeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionWarning {
    pub class: u32,
    pub prototype: usize,
}

/// Anchor every prototype to its nearest candidate (ties to the lowest
/// candidate index), comparing in diffusion coordinates or raw features
/// per `metric`. Candidate embeddings are computed once per class.
pub fn project_prototypes(
    bank: &mut PrototypeBank,
    manifolds: &BTreeMap<u32, ClassManifold>,
    pool: &CandidatePool,
    mode: ExtensionMode,
    metric: MatchMetric,
) -> Result<Vec<ProjectionWarning>> {
    let mut warnings = Vec::new();
    let mut projected = BTreeMap::new();
    for (&class, protos) in &bank.prototypes {
        let candidates = pool
            .per_class
            .get(&class)
            .ok_or_else(|| Error::InvalidConfig(format!("no candidates for class {class}")))?;
        let manifold = manifolds
            .get(&class)
            .ok_or_else(|| Error::InvalidConfig(format!("no manifold for class {class}")))?;

        let m = protos.nrows();
        let mut anchor_indices = Vec::with_capacity(m);
        let mut anchored = Array2::zeros((m, candidates.ncols()));

        let coords = match metric {
            MatchMetric::Diffusion => {
                let cand_embeds = extend_rows(manifold, candidates, mode);
                let mut coords = Array2::zeros((m, manifold.cfg.l));
                for i in 0..m {
                    let e = extend(manifold, protos.row(i), mode);
                    if e.off_manifold {
                        warnings.push(ProjectionWarning {
                            class,
                            prototype: i,
                        });
                    }
                    let best = argmin_row_distance(cand_embeds.view(), e.coords.view());
                    anchor_indices.push(best);
                    anchored.row_mut(i).assign(&candidates.row(best));
                    coords.row_mut(i).assign(&cand_embeds.row(best));
                }
                coords
            }
            MatchMetric::Euclidean => {
                for i in 0..m {
                    let best = argmin_row_distance(candidates.view(), protos.row(i));
                    anchor_indices.push(best);
                    anchored.row_mut(i).assign(&candidates.row(best));
                }
                Array2::zeros((m, 0))
            }
        };

        projected.insert(
            class,
            ProjectedPrototypes {
                anchor_indices,
                anchored,
                coords,
            },
        );
    }
    bank.projected = projected;
    Ok(warnings)
}

/// Index of the row closest to `target`, ties to the lowest index.
fn argmin_row_distance(rows: ArrayView2<f64>, target: ArrayView1<f64>) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (i, row) in rows.outer_iter().enumerate() {
        let d2: f64 = row
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    best.1
}

/// Intra-class distances from a query's per-class embeddings to the
/// projected prototypes, each class in its own diffusion space.
pub fn prototype_distances(
    embed_per_class: &BTreeMap<u32, Array1<f64>>,
    bank: &PrototypeBank,
) -> BTreeMap<u32, Vec<f64>> {
    embed_per_class
        .iter()
        .map(|(&class, embed)| {
            let proj = &bank.projected[&class];
            let d = proj
                .coords
                .outer_iter()
                .map(|p| {
                    embed
                        .iter()
                        .zip(p.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            (class, d)
        })
        .collect()
}

/// Similarity transform log((d^2 + 1)/(d^2 + eps)); strictly decreasing in
/// d for eps < 1, so ranking by similarity is ranking by distance.
pub fn similarity(distance: f64, epsilon: f64) -> f64 {
    similarity_sq(distance * distance, epsilon)
}

pub fn similarity_sq(d2: f64, epsilon: f64) -> f64 {
    ((d2 + 1.0) / (d2 + epsilon)).ln()
}

/// Derivative of the similarity transform with respect to d^2.
fn similarity_sq_grad(d2: f64, epsilon: f64) -> f64 {
    1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon)
}

/// Aggregate per-prototype distances into class scores.
///
/// `distances` holds one row per query patch (a single row for plain
/// vector queries); the per-prototype similarity max-pools over patches and
/// the head sums it under the class-restricted nonnegative weights.
pub fn class_scores(
    distances: &BTreeMap<u32, Array2<f64>>,
    bank: &PrototypeBank,
) -> Vec<(u32, f64)> {
    distances
        .iter()
        .map(|(&class, patch_rows)| {
            let weights = &bank.head_weights[&class];
            let mut score = 0.0;
            for i in 0..bank.m {
                let best = patch_rows
                    .column(i)
                    .iter()
                    .map(|&d| similarity(d, bank.epsilon_sim))
                    .fold(f64::NEG_INFINITY, f64::max);
                score += weights[i] * best;
            }
            (class, score)
        })
        .collect()
}

/// One prototype's contribution to a classification.
#[derive(Debug, Clone)]
pub struct PrototypeMatch {
    pub prototype: usize,
    pub anchor: usize,
    pub distance: f64,
    pub similarity: f64,
}

/// Case-based classification record: scores, the argmax, and every
/// prototype's distance/similarity with its anchoring candidate.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub predicted: u32,
    /// Class scores in ascending class order.
    pub scores: Vec<(u32, f64)>,
    pub matches: Vec<(u32, Vec<PrototypeMatch>)>,
}

impl Explanation {
    /// Best prototype of the predicted class (minimum distance, ties to the
    /// lowest prototype index).
    pub fn best_match(&self) -> &PrototypeMatch {
        let (_, matches) = self
            .matches
            .iter()
            .find(|(c, _)| *c == self.predicted)
            .expect("predicted class has matches");
        // Strict comparison keeps the lowest index on exact distance ties.
        matches
            .iter()
            .fold(None::<&PrototypeMatch>, |best, m| match best {
                Some(b) if m.distance >= b.distance => best,
                _ => Some(m),
            })
            .expect("at least one prototype")
    }
}

/// Classify a single feature vector.
pub fn classify(
    z: ArrayView1<f64>,
    manifolds: &BTreeMap<u32, ClassManifold>,
    bank: &PrototypeBank,
    mode: ExtensionMode,
    metric: MatchMetric,
) -> Result<Explanation> {
    classify_patches(
        z.insert_axis(ndarray::Axis(0)),
        manifolds,
        bank,
        mode,
        metric,
    )
}

/// Classify a patch set: per-prototype distance is the minimum over
/// patches (similarity max-pool), aggregated as usual.
pub fn classify_patches(
    patches: ArrayView2<f64>,
    manifolds: &BTreeMap<u32, ClassManifold>,
    bank: &PrototypeBank,
    mode: ExtensionMode,
    metric: MatchMetric,
) -> Result<Explanation> {
    debug_assert!(bank.is_projected(), "classify requires a projected bank");
    let model_dim = manifolds.values().next().expect("nonempty model").dim();
    if patches.ncols() != model_dim {
        return Err(Error::DimensionMismatch {
            query: patches.ncols(),
            model: model_dim,
        });
    }

    let mut distance_rows: BTreeMap<u32, Array2<f64>> = BTreeMap::new();
    for (&class, proj) in &bank.projected {
        let mut rows = Array2::zeros((patches.nrows(), bank.m));
        match metric {
            MatchMetric::Diffusion => {
                let manifold = &manifolds[&class];
                for (p, patch) in patches.outer_iter().enumerate() {
                    let e = extend(manifold, patch, mode);
                    for i in 0..bank.m {
                        let d2: f64 = e
                            .coords
                            .iter()
                            .zip(proj.coords.row(i).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        rows[[p, i]] = d2.sqrt();
                    }
                }
            }
            MatchMetric::Euclidean => {
                for (p, patch) in patches.outer_iter().enumerate() {
                    for i in 0..bank.m {
                        let d2: f64 = patch
                            .iter()
                            .zip(proj.anchored.row(i).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        rows[[p, i]] = d2.sqrt();
                    }
                }
            }
        }
        distance_rows.insert(class, rows);
    }

    let scores = class_scores(&distance_rows, bank);
    // Argmax with ties toward the lowest class id (scores are in ascending
    // class order already).
    let predicted = scores
        .iter()
        .fold(None::<(u32, f64)>, |acc, &(c, s)| match acc {
            Some((_, best)) if s <= best => acc,
            _ => Some((c, s)),
        })
        .expect("nonempty scores")
        .0;

    let matches = distance_rows
        .iter()
        .map(|(&class, rows)| {
            let proj = &bank.projected[&class];
            let per_proto = (0..bank.m)
                .map(|i| {
                    let d = rows.column(i).iter().cloned().fold(f64::INFINITY, f64::min);
                    PrototypeMatch {
                        prototype: i,
                        anchor: proj.anchor_indices[i],
                        distance: d,
                        similarity: similarity(d, bank.epsilon_sim),
                    }
                })
                .collect();
            (class, per_proto)
        })
        .collect();

    Ok(Explanation {
        predicted,
        scores,
        matches,
    })
}

/// Classify every row of a query matrix; order-stable under parallelism.
pub fn classify_batch(
    queries: ArrayView2<f64>,
    manifolds: &BTreeMap<u32, ClassManifold>,
    bank: &PrototypeBank,
    mode: ExtensionMode,
    metric: MatchMetric,
) -> Result<Vec<Explanation>> {
    (0..queries.nrows())
        .into_par_iter()
        .map(|i| classify(queries.row(i), manifolds, bank, mode, metric))
        .collect()
}

/// Fraction of rows classified into their labeled class.
pub fn classification_accuracy(
    features: ArrayView2<f64>,
    labels: &[u32],
    manifolds: &BTreeMap<u32, ClassManifold>,
    bank: &PrototypeBank,
    mode: ExtensionMode,
    metric: MatchMetric,
) -> Result<f64> {
    let explanations = classify_batch(features, manifolds, bank, mode, metric)?;
    let hits = explanations
        .iter()
        .zip(labels)
        .filter(|(e, &y)| e.predicted == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Numerically stable softmax; the confidence of a prediction is the
/// maximum entry.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean softmax cross-entropy and its gradients with respect to the relaxed
/// prototypes (and head weights), with gradients flowing through the
/// out-of-sample embedding Jacobian.
///
/// `query_embeds` caches each sample's embedding into every class manifold
/// (rows follow `labels`). Distances use the relaxed prototypes' own
/// embeddings, matching the training objective.
#[allow(clippy::type_complexity)]
pub fn epoch_loss_and_grads(
    manifolds: &BTreeMap<u32, ClassManifold>,
    bank: &PrototypeBank,
    query_embeds: &BTreeMap<u32, Array2<f64>>,
    labels: &[u32],
    mode: ExtensionMode,
) -> (f64, BTreeMap<u32, Array2<f64>>, BTreeMap<u32, Vec<f64>>) {
    let classes = bank.class_ids();
    let n = labels.len();
    let m = bank.m;

    // Embed prototypes and take their Jacobians once per epoch.
    let mut proto_embeds: BTreeMap<u32, Array2<f64>> = BTreeMap::new();
    let mut proto_jacs: BTreeMap<u32, Vec<Array2<f64>>> = BTreeMap::new();
    for &class in &classes {
        let manifold = &manifolds[&class];
        let protos = &bank.prototypes[&class];
        let mut embeds = Array2::zeros((m, manifold.cfg.l));
        let mut jacs = Vec::with_capacity(m);
        for i in 0..m {
            embeds
                .row_mut(i)
                .assign(&extend(manifold, protos.row(i), mode).coords);
            jacs.push(extend_jacobian(manifold, protos.row(i), mode));
        }
        proto_embeds.insert(class, embeds);
        proto_jacs.insert(class, jacs);
    }

    // Accumulate d loss / d embedded-prototype, then push through the
    // Jacobians once at the end.
    let mut embed_grads: BTreeMap<u32, Array2<f64>> = classes
        .iter()
        .map(|&c| (c, Array2::zeros(proto_embeds[&c].raw_dim())))
        .collect();
    let mut head_grads: BTreeMap<u32, Vec<f64>> =
        classes.iter().map(|&c| (c, vec![0.0; m])).collect();
    let mut total_loss = 0.0;

    for (row, &label) in labels.iter().enumerate() {
        // Scores and the pieces needed for backprop.
        let mut scores = Vec::with_capacity(classes.len());
        let mut sims: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut d2s: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for &class in &classes {
            let query = query_embeds[&class].row(row);
            let embeds = &proto_embeds[&class];
            let weights = &bank.head_weights[&class];
            let mut score = 0.0;
            let mut s_list = Vec::with_capacity(m);
            let mut d2_list = Vec::with_capacity(m);
            for i in 0..m {
                let d2: f64 = query
                    .iter()
                    .zip(embeds.row(i).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let s = similarity_sq(d2, bank.epsilon_sim);
                score += weights[i] * s;
                s_list.push(s);
                d2_list.push(d2);
            }
            scores.push(score);
            sims.insert(class, s_list);
            d2s.insert(class, d2_list);
        }

        let probs = softmax(&scores);
        let y_pos = classes.iter().position(|&c| c == label).expect("label");
        total_loss -= probs[y_pos].max(f64::MIN_POSITIVE).ln();

        for (pos, &class) in classes.iter().enumerate() {
            let g_score = probs[pos] - if pos == y_pos { 1.0 } else { 0.0 };
            if g_score == 0.0 {
                continue;
            }
            let query = query_embeds[&class].row(row);
            let embeds = &proto_embeds[&class];
            let weights = &bank.head_weights[&class];
            let eg = embed_grads.get_mut(&class).unwrap();
            let hg = head_grads.get_mut(&class).unwrap();
            for i in 0..m {
                let coef =
                    g_score * weights[i] * similarity_sq_grad(d2s[&class][i], bank.epsilon_sim);
                if coef != 0.0 {
                    for (col, (&q, &e)) in query.iter().zip(embeds.row(i).iter()).enumerate() {
                        eg[[i, col]] += coef * 2.0 * (e - q);
                    }
                }
                hg[i] += g_score * sims[&class][i];
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut proto_grads = BTreeMap::new();
    for &class in &classes {
        let eg = &embed_grads[&class];
        let jacs = &proto_jacs[&class];
        let dim = bank.prototypes[&class].ncols();
        let mut grads = Array2::zeros((m, dim));
        for i in 0..m {
            let row = eg.row(i);
            let pushed = jacs[i].t().dot(&row);
            grads.row_mut(i).assign(&(pushed * inv_n));
        }
        proto_grads.insert(class, grads);
    }
    for hg in head_grads.values_mut() {
        for g in hg.iter_mut() {
            *g *= inv_n;
        }
    }

    (total_loss * inv_n, proto_grads, head_grads)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bank: PrototypeBank,
    pub loss_trace: Vec<f64>,
    pub manifolds: BTreeMap<u32, ClassManifold>,
    pub landmarks: LandmarkSet,
}

/// Full-batch gradient training of the prototype bank.
///
/// Each epoch embeds every sample into every class manifold (cached between
/// landmark refreshes), differentiates the softmax cross-entropy through
/// the embedding, and steps the relaxed prototypes. Manifolds refresh on
/// the landmark schedule; anchoring runs after every refresh and at the
/// end, so the returned bank is always projected.
pub fn train_prototypes(
    fs: &FeatureSet,
    pool: &CandidatePool,
    cfg: &FitConfig,
    epochs: usize,
    step_size: f64,
) -> Result<TrainOutcome> {
    assert!(epochs >= 1);
    assert!(step_size >= 0.0);
    let mode = cfg.nystrom_mode;

    let (mut manifolds, mut landmark_set) =
        refresh_manifolds(fs, &cfg.landmarks, &cfg.graph, &cfg.diffusion)?;
    let mut bank = init_prototypes(pool, cfg.prototypes.m, cfg.prototypes.epsilon_sim, cfg.seed);

    let embed_queries = |manifolds: &BTreeMap<u32, ClassManifold>| -> BTreeMap<u32, Array2<f64>> {
        manifolds
            .par_iter()
            .map(|(&c, m)| (c, extend_rows(m, &fs.features, mode)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    };
    let mut query_embeds = embed_queries(&manifolds);

    let mut loss_trace = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        if should_refresh(epoch, &cfg.landmarks) {
            let (next, set) = refresh_manifolds(fs, &cfg.landmarks, &cfg.graph, &cfg.diffusion)?;
            manifolds = next;
            landmark_set = set;
            landmark_set.epoch_fitted = epoch;
            project_prototypes(&mut bank, &manifolds, pool, mode, MatchMetric::Diffusion)?;
            query_embeds = embed_queries(&manifolds);
        }

        let (loss, proto_grads, head_grads) =
            epoch_loss_and_grads(&manifolds, &bank, &query_embeds, &fs.labels, mode);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        loss_trace.push(loss);

        for (class, grad) in proto_grads {
            let protos = bank.prototypes.get_mut(&class).unwrap();
            protos.scaled_add(-step_size, &grad);
        }
        if cfg.prototypes.head_trainable {
            for (class, grad) in head_grads {
                let weights = bank.head_weights.get_mut(&class).unwrap();
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w = (*w - step_size * g).max(0.0);
                }
            }
        }
    }

    project_prototypes(&mut bank, &manifolds, pool, mode, MatchMetric::Diffusion)?;
    Ok(TrainOutcome {
        bank,
        loss_trace,
        manifolds,
        landmarks: landmark_set,
    })
}
