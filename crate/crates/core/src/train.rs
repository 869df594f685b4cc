//! Dynamic CCCP training.
//!
//! Each iteration estimates the latent assignments of the positives under
//! the current parameters, refactors their features with PCA, reclusters
//! every or-node on the non-principal coordinates (which may create or
//! remove leaves), and finally solves the convexified problem with the
//! structural SVM.

use std::collections::BTreeMap;

use log::info;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_joint, leaf_feature};
use crate::geometry::{longest_clipped_part, Block, BoundingBox, Contour, ContourId, ContourSet, Point};
use crate::inference::{augmented_label, fit_window, BestWindow, SearchIndex, SlideParams};
use crate::io::SampleRecord;
use crate::model::{AndOrModel, Label, LatentAssignment, ModelConfig, ParameterVector};
use crate::ssvm::{solve, DualState, Separation, SeparationOracle, SolverParams, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsodataParams {
    /// Split a cluster whose largest per-dimension standard deviation exceeds this.
    pub theta_split: f64,
    /// Merge two clusters whose centroids are closer than this.
    pub theta_merge: f64,
    /// Minimum cluster size as a fraction of the positives (at least 2).
    pub min_size_fraction: f64,
    pub max_iterations: usize,
}

impl Default for IsodataParams {
    fn default() -> Self {
        IsodataParams {
            theta_split: 0.35,
            theta_merge: 0.15,
            min_size_fraction: 0.05,
            max_iterations: 20,
        }
    }
}

impl IsodataParams {
    pub fn min_size(&self, n_positives: usize) -> usize {
        2.max((self.min_size_fraction * n_positives as f64).ceil() as usize)
    }
}

/// Bounds on one ISODATA run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterLimits {
    pub max_clusters: usize,
    /// Total number of splits allowed.
    pub max_splits: usize,
    pub min_size: usize,
    /// Label given to the first cluster born from a split; later ones count up.
    pub first_new_label: usize,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids(points: &[Vec<f64>], labels: &[usize]) -> BTreeMap<usize, (Vec<f64>, usize)> {
    let dim = points.first().map_or(0, Vec::len);
    let mut out: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, &l) in points.iter().zip(labels) {
        let e = out.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in e.0.iter_mut().zip(p) {
            *s += v;
        }
        e.1 += 1;
    }
    for (c, n) in out.values_mut() {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    out
}

/// Nearest centroid; the current label wins unless another is strictly
/// closer, and the lowest label wins among the others.
fn nearest(p: &[f64], current: Option<usize>, cents: &BTreeMap<usize, (Vec<f64>, usize)>) -> usize {
    let mut best = current
        .and_then(|l| cents.get(&l).map(|(c, _)| (l, dist_sq(p, c))));
    for (&l, (c, _)) in cents {
        let d = dist_sq(p, c);
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((l, d));
        }
    }
    best.expect("at least one centroid").0
}

/// ISODATA clustering with raw Euclidean distances, seeded by `init`.
/// Returns one label per point; surviving seed labels keep their values and
/// clusters born from splits get labels from `limits.first_new_label` up.
pub fn isodata(
    points: &[Vec<f64>],
    init: &[usize],
    limits: ClusterLimits,
    params: &IsodataParams,
) -> Vec<usize> {
    assert_eq!(points.len(), init.len());
    let mut labels = init.to_vec();
    if points.is_empty() {
        return labels;
    }
    let mut next_label = limits
        .first_new_label
        .max(labels.iter().max().map_or(0, |&l| l + 1));
    let mut splits = 0;
    for _ in 0..params.max_iterations {
        let before = labels.clone();

        let cents = centroids(points, &labels);
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            *l = nearest(p, Some(*l), &cents);
        }

        let mut cents = centroids(points, &labels);
        if cents.len() > 1 {
            let small: Vec<usize> = cents
                .iter()
                .filter(|(_, (_, n))| *n < limits.min_size)
                .map(|(&l, _)| l)
                .collect();
            if !small.is_empty() && small.len() < cents.len() {
                for l in &small {
                    cents.remove(l);
                }
                for (p, l) in points.iter().zip(labels.iter_mut()) {
                    if small.contains(l) {
                        *l = nearest(p, None, &cents);
                    }
                }
                cents = centroids(points, &labels);
            }
        }

        let mut split = false;
        if cents.len() < limits.max_clusters && splits < limits.max_splits {
            let mut pick: Option<(usize, usize, f64)> = None;
            for (&l, (c, n)) in &cents {
                if *n < 2 * limits.min_size {
                    continue;
                }
                let mut var = vec![0.0; c.len()];
                for (p, _) in points.iter().zip(&labels).filter(|(_, &pl)| pl == l) {
                    for (v, (x, m)) in var.iter_mut().zip(p.iter().zip(c)) {
                        *v += (x - m) * (x - m);
                    }
                }
                for (dim, v) in var.iter().enumerate() {
                    let s = (v / *n as f64).sqrt();
                    if s > params.theta_split && pick.map_or(true, |(_, _, b)| s > b) {
                        pick = Some((l, dim, s));
                    }
                }
            }
            if let Some((l, dim, s)) = pick {
                let c = &cents[&l].0;
                let (mut hi, mut lo) = (c.clone(), c.clone());
                hi[dim] += s;
                lo[dim] -= s;
                for (p, pl) in points.iter().zip(labels.iter_mut()) {
                    if *pl == l && dist_sq(p, &lo) < dist_sq(p, &hi) {
                        *pl = next_label;
                    }
                }
                next_label += 1;
                splits += 1;
                split = true;
            }
        }

        if !split && cents.len() > 1 {
            let keys: Vec<usize> = cents.keys().copied().collect();
            let mut pair: Option<(usize, usize, f64)> = None;
            for (x, &a) in keys.iter().enumerate() {
                for &b in &keys[x + 1..] {
                    let d = dist_sq(&cents[&a].0, &cents[&b].0).sqrt();
                    if d < params.theta_merge && pair.map_or(true, |(_, _, e)| d < e) {
                        pair = Some((a, b, d));
                    }
                }
            }
            if let Some((a, b, _)) = pair {
                for l in labels.iter_mut().filter(|l| **l == b) {
                    *l = a;
                }
            }
        }

        if labels == before {
            break;
        }
    }
    labels
}

/// Mean, retained eigenvectors and per-sample coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Orthonormal, in descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `coefficients[k][i]` is sample `k`'s coordinate along component `i`.
    pub coefficients: Vec<Vec<f64>>,
}

impl PcaBasis {
    pub fn reconstruct(&self, k: usize) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (e, b) in self.components.iter().zip(&self.coefficients[k]) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += b * v;
            }
        }
        out
    }

    /// `‖x − reconstruct(k)‖`.
    pub fn residual(&self, k: usize, x: &[f64]) -> f64 {
        dist_sq(x, &self.reconstruct(k)).sqrt()
    }
}

/// PCA of the sample features with the fewest components that bring every
/// sample within `sigma` of its reconstruction. The returned mask is true
/// for non-principal coordinates: `|u_j| < delta` and `|e_ij| < delta` for
/// every retained component.
pub fn pca_refactor(features: &[Vec<f64>], sigma: f64, delta: f64) -> Result<(PcaBasis, Vec<bool>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 samples, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Config("PCA samples have different dimensions".into()));
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |a, b| {
        centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = 1e-12 * top.max(1e-300);

    let mut all_components = Vec::new();
    let mut all_values = Vec::new();
    for &i in &order {
        let lambda = eig.eigenvalues[i];
        if !(lambda > floor) {
            break;
        }
        let v = eig.eigenvectors.column(i);
        let mut e = vec![0.0; dim];
        for (a, c) in centered.iter().enumerate() {
            for (o, x) in e.iter_mut().zip(c) {
                *o += v[a] * x;
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            break;
        }
        let big = e
            .iter()
            .copied()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for x in &mut e {
            *x *= sign / norm;
        }
        all_components.push(e);
        all_values.push(lambda);
    }
    let coeffs: Vec<Vec<f64>> = centered
        .iter()
        .map(|c| {
            all_components
                .iter()
                .map(|e| e.iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    let mut k = all_components.len();
    for kk in 0..=all_components.len() {
        let ok = centered.iter().zip(&coeffs).all(|(c, b)| {
            let mut r = c.clone();
            for (e, beta) in all_components[..kk].iter().zip(b) {
                for (x, v) in r.iter_mut().zip(e) {
                    *x -= beta * v;
                }
            }
            r.iter().map(|x| x * x).sum::<f64>().sqrt() < sigma
        });
        if ok {
            k = kk;
            break;
        }
    }
    all_components.truncate(k);
    all_values.truncate(k);
    let coefficients = coeffs.into_iter().map(|mut b| {
        b.truncate(k);
        b
    });
    let mask = (0..dim)
        .map(|j| mean[j].abs() < delta && all_components.iter().all(|e| e[j].abs() < delta))
        .collect();
    Ok((
        PcaBasis {
            mean,
            components: all_components,
            eigenvalues: all_values,
            coefficients: coefficients.collect(),
        },
        mask,
    ))
}

/// H*_k of one positive and its joint feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    /// Index into the training set.
    pub sample: usize,
    /// Scale applied to the sample before indexing.
    pub scale: f64,
    pub assignment: LatentAssignment,
    pub score: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentEstimate {
    pub samples: Vec<LatentSample>,
    /// `q = −D Σ φ(X_k, y_k, H*_k)`.
    pub hyperplane: Vec<f64>,
}

/// `−D Σ φ`.
pub fn hyperplane<'a>(features: impl IntoIterator<Item = &'a Vec<f64>>, d: f64, dim: usize) -> Vec<f64> {
    let mut q = vec![0.0; dim];
    for f in features {
        for (o, v) in q.iter_mut().zip(f) {
            *o -= d * v;
        }
    }
    q
}

fn latent_from_best(
    model: &AndOrModel,
    index: &SearchIndex,
    sample: usize,
    best: Option<&BestWindow>,
) -> Result<LatentSample> {
    let wrap = |e: Error| Error::Sample {
        index: sample,
        source: Box::new(e),
    };
    let best = best.ok_or_else(|| wrap(Error::Geometry("no window to search".into())))?;
    let level = &index.levels()[best.level];
    let feature = assemble_joint(level.contours(), model, &best.result.assignment).map_err(wrap)?;
    Ok(LatentSample {
        sample,
        scale: level.scale(),
        assignment: best.result.assignment.clone(),
        score: best.result.score,
        feature: feature.0,
    })
}

/// Step I: H*_k by exact inference for each `(sample, index)` positive, and
/// the hyperplane bounding the concave part.
pub fn estimate_latent(
    model: &AndOrModel,
    positives: &[(usize, &SearchIndex)],
    d: f64,
) -> Result<LatentEstimate> {
    let samples = positives
        .par_iter()
        .map(|&(k, index)| {
            let best = index.best(model, None).map_err(|e| Error::Sample {
                index: k,
                source: Box::new(e),
            })?;
            latent_from_best(model, index, k, best.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let q = hyperplane(samples.iter().map(|s| &s.feature), d, model.layout().dim());
    Ok(LatentEstimate {
        samples,
        hyperplane: q,
    })
}

/// Per or-node, per iteration limits on structure edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub create: usize,
    pub remove: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { create: 1, remove: 1 }
    }
}

impl Caps {
    pub fn disabled() -> Self {
        Caps { create: 0, remove: 0 }
    }
}

/// Feature mass of one sample moved between leaf slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMove {
    /// Position in the estimate, not the training-set index.
    pub sample: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafCreation {
    pub slot: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodePlan {
    pub or_node: usize,
    /// Slot of each sample's cluster after reclustering.
    pub clusters: Vec<usize>,
    pub moves: Vec<SlotMove>,
    pub creations: Vec<LeafCreation>,
    pub removals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconfigPlan {
    pub nodes: Vec<NodePlan>,
}

impl ReconfigPlan {
    pub fn is_empty(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.moves.is_empty() && n.creations.is_empty() && n.removals.is_empty())
    }

    pub fn creations(&self) -> usize {
        self.nodes.iter().map(|n| n.creations.len()).sum()
    }

    pub fn removals(&self) -> usize {
        self.nodes.iter().map(|n| n.removals.len()).sum()
    }

    pub fn moves(&self) -> usize {
        self.nodes.iter().map(|n| n.moves.len()).sum()
    }

    /// Creates, then removes, the planned leaves.
    pub fn apply(&self, model: &mut AndOrModel) -> Result<()> {
        for node in &self.nodes {
            for c in &node.creations {
                let j = model.create_leaf(node.or_node, &c.weights)?;
                if j != c.slot {
                    return Err(Error::Config(format!(
                        "planned leaf slot {} but created {j}",
                        c.slot
                    )));
                }
            }
            for &j in &node.removals {
                model.remove_leaf(j)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconfiguration {
    pub plan: ReconfigPlan,
    /// φ^d per sample of the estimate, in the same order.
    pub adjusted: Vec<Vec<f64>>,
    /// `q^d = −D Σ φ^d`.
    pub hyperplane: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Step II: reclusters the contours each or-node detected, using only
/// non-principal coordinates (`mask[j]` true), and derives leaf moves,
/// creations and removals. Caps of zero disable reconfiguration entirely.
pub fn reconfigure(
    model: &AndOrModel,
    estimate: &LatentEstimate,
    mask: &[bool],
    caps: Caps,
    params: &IsodataParams,
    d: f64,
) -> Result<Reconfiguration> {
    let layout = *model.layout();
    if mask.len() != layout.dim() {
        return Err(Error::Config(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            layout.dim()
        )));
    }
    let mut adjusted: Vec<Vec<f64>> = estimate.samples.iter().map(|s| s.feature.clone()).collect();
    if caps == Caps::disabled() || adjusted.is_empty() {
        return Ok(Reconfiguration {
            plan: ReconfigPlan::default(),
            adjusted,
            hyperplane: estimate.hyperplane.clone(),
        });
    }
    let m = model.config().max_leaves;
    let leaf_dim = layout.leaf_dim;
    let n = adjusted.len();
    let min_size = params.min_size(n);
    let live_norms: Vec<f64> = (0..model.n_slots())
        .filter(|&j| model.is_live(j))
        .map(|j| model.leaf_weights(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let target_norm = median(live_norms).filter(|&v| v > 0.0).unwrap_or(1.0);

    let mut plan = ReconfigPlan::default();
    for i in 0..model.or_nodes() {
        let base = i * m;
        let current: Vec<usize> = estimate
            .samples
            .iter()
            .map(|s| {
                s.assignment
                    .active_slot(model, i)
                    .ok_or_else(|| Error::Assignment(format!("or-node {i} is not one-hot")))
            })
            .collect::<Result<_>>()?;
        let vectors: Vec<Vec<f64>> = estimate
            .samples
            .iter()
            .zip(&current)
            .map(|(s, &j)| {
                layout
                    .leaf_range(j)
                    .map(|c| if mask[c] { s.feature[c] } else { 0.0 })
                    .collect()
            })
            .collect();
        let live = model.live_slots(i).count();
        let dead: Vec<usize> = model.slots_of(i).filter(|&j| !model.is_live(j)).collect();
        let limits = ClusterLimits {
            max_clusters: m,
            max_splits: caps.create.min(dead.len()),
            min_size,
            first_new_label: m,
        };
        let init: Vec<usize> = current.iter().map(|j| j - base).collect();
        let labels = isodata(&vectors, &init, limits, params);

        let mut new_labels: Vec<usize> = labels.iter().copied().filter(|&l| l >= m).collect();
        new_labels.sort_unstable();
        new_labels.dedup();
        let born: BTreeMap<usize, usize> = new_labels.iter().copied().zip(dead.iter().copied()).collect();
        let clusters: Vec<usize> = labels
            .iter()
            .map(|&l| if l >= m { born[&l] } else { base + l })
            .collect();

        let mut creations = Vec::new();
        for (&label, &slot) in &born {
            let mut mean = vec![0.0; leaf_dim];
            for (k, _) in labels.iter().enumerate().filter(|(_, &l)| l == label) {
                let src = layout.leaf_range(current[k]);
                for (o, v) in mean.iter_mut().zip(&estimate.samples[k].feature[src]) {
                    *o += v;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { target_norm / norm } else { 0.0 };
            creations.push(LeafCreation {
                slot,
                weights: mean.iter().map(|v| v * scale).collect(),
            });
        }

        let mut moves = Vec::new();
        for k in 0..n {
            let (from, to) = (current[k], clusters[k]);
            if from == to {
                continue;
            }
            let mut moved = false;
            for b in 0..leaf_dim {
                let (s, t) = (layout.leaf_offset(from) + b, layout.leaf_offset(to) + b);
                if mask[s] && mask[t] && adjusted[k][s] != 0.0 {
                    adjusted[k][t] += adjusted[k][s];
                    adjusted[k][s] = 0.0;
                    moved = true;
                }
            }
            if moved {
                moves.push(SlotMove { sample: k, from, to });
            }
        }

        let mut removals = Vec::new();
        let mut remaining = live + creations.len();
        for j in model.live_slots(i) {
            if removals.len() >= caps.remove || remaining <= 1 {
                break;
            }
            let unused = adjusted
                .iter()
                .all(|f| f[layout.leaf_range(j)].iter().all(|&v| v == 0.0));
            if unused {
                removals.push(j);
                remaining -= 1;
            }
        }

        plan.nodes.push(NodePlan {
            or_node: i,
            clusters,
            moves,
            creations,
            removals,
        });
    }
    let q = hyperplane(&adjusted, d, layout.dim());
    Ok(Reconfiguration {
        plan,
        adjusted,
        hyperplane: q,
    })
}

/// The box a positive's window is fitted to: its first groundtruth box, or
/// the whole canvas.
pub fn positive_box(s: &SampleRecord) -> Result<BoundingBox> {
    match s.groundtruth.first() {
        Some(b) => Ok(*b),
        None => BoundingBox::new(0.0, 0.0, s.contours.width(), s.contours.height()),
    }
}

#[derive(Debug, Clone)]
pub struct Initialization {
    pub model: AndOrModel,
    /// Or-nodes whose block was empty in every positive; they start with one
    /// all-zero leaf.
    pub flagged: Vec<usize>,
    /// Leaves created per or-node.
    pub leaves: Vec<usize>,
    /// Anchored assignment and feature of each positive, in input order.
    pub estimates: Vec<LatentSample>,
}

/// Builds the initial model: per positive and block, the contour with the
/// longest part inside the anchored block; per or-node, ISODATA over their
/// leaf features and one leaf per cluster initialized at the cluster mean.
pub fn initialize(
    config: ModelConfig,
    positives: &[SampleRecord],
    params: &IsodataParams,
) -> Result<Initialization> {
    if positives.len() < 2 {
        return Err(Error::Config(format!(
            "initialization needs at least 2 positives, got {}",
            positives.len()
        )));
    }
    let mut model = AndOrModel::new(config)?;
    let z = model.or_nodes();
    let m = config.max_leaves;
    let (bw, bh) = model.block_size();
    let sc = config.shape_context;

    struct Framed {
        scale: f64,
        p0: Point,
        contours: ContourSet,
        picks: Vec<Option<(ContourId, Vec<f64>)>>,
    }
    let framed = positives
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let wrap = |e: Error| Error::Sample {
                index: k,
                source: Box::new(e),
            };
            let (scale, p0) = fit_window(&model, &positive_box(s).map_err(wrap)?).map_err(wrap)?;
            let contours = s.contours.scaled(scale);
            let mut sorted: Vec<_> = contours.contours().iter().collect();
            sorted.sort_by_key(|c| c.id());
            let mut picks = Vec::with_capacity(z);
            for i in 0..z {
                let block = Block::centered(model.anchor_position(i, p0, 1.0), bw, bh)?;
                let mut best: Option<(f64, &Contour)> = None;
                for c in &sorted {
                    if let Some(part) = longest_clipped_part(c, &block) {
                        let len = part.arc_length();
                        if best.map_or(true, |(b, _)| len > b) {
                            best = Some((len, c));
                        }
                    }
                }
                picks.push(best.map(|(_, c)| (c.id(), leaf_feature(c, &block, &sc).0)));
            }
            Ok(Framed {
                scale,
                p0,
                contours,
                picks,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let min_size = params.min_size(positives.len());
    let mut flagged = Vec::new();
    let mut leaves = Vec::with_capacity(z);
    // slot of each sample at each or-node
    let mut slot_of = vec![vec![0usize; z]; positives.len()];
    for i in 0..z {
        let members: Vec<usize> = (0..framed.len()).filter(|&k| framed[k].picks[i].is_some()).collect();
        if members.is_empty() {
            let j = model.create_leaf(i, &vec![0.0; sc.leaf_dim()])?;
            for s in slot_of.iter_mut() {
                s[i] = j;
            }
            flagged.push(i);
            leaves.push(1);
            continue;
        }
        let points: Vec<Vec<f64>> = members
            .iter()
            .map(|&k| framed[k].picks[i].as_ref().expect("member").1.clone())
            .collect();
        let labels = isodata(
            &points,
            &vec![0; points.len()],
            ClusterLimits {
                max_clusters: m,
                max_splits: m - 1,
                min_size,
                first_new_label: 1,
            },
            params,
        );
        let cents = centroids(&points, &labels);
        let mut slot_for = BTreeMap::new();
        for (&label, (mean, _)) in &cents {
            slot_for.insert(label, model.create_leaf(i, mean)?);
        }
        let first = *slot_for.values().next().expect("one cluster");
        for s in slot_of.iter_mut() {
            s[i] = first;
        }
        for (&k, l) in members.iter().zip(&labels) {
            slot_of[k][i] = slot_for[l];
        }
        leaves.push(cents.len());
    }

    let estimates = framed
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let selected = f.picks.iter().map(|p| p.as_ref().map(|(id, _)| *id)).collect();
            let h = LatentAssignment::anchored(&model, f.p0, &slot_of[k], selected);
            let feature = assemble_joint(&f.contours, &model, &h).map_err(|e| Error::Sample {
                index: k,
                source: Box::new(e),
            })?;
            Ok(LatentSample {
                sample: k,
                scale: f.scale,
                score: feature.dot(&model.omega.0),
                assignment: h,
                feature: feature.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Initialization {
        model,
        flagged,
        leaves,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub max_iterations: usize,
    /// Relative objective change below which training stops (with an empty
    /// reconfiguration plan).
    pub rel_tol: f64,
    pub sigma: f64,
    pub delta: f64,
    pub caps: Caps,
    pub isodata: IsodataParams,
    /// Includes the penalty `D`.
    pub solver: SolverParams,
    /// Negative samples are searched over these windows.
    pub slide: SlideParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_iterations: 20,
            rel_tol: 1e-3,
            sigma: 2.0,
            delta: 0.001,
            caps: Caps::default(),
            isodata: IsodataParams::default(),
            solver: SolverParams::default(),
            slide: SlideParams::default(),
        }
    }
}

/// Search indexes of a training set; positives get a single window fitted to
/// their box, negatives every sliding window.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    labels: Vec<Label>,
    indexes: Vec<SearchIndex>,
}

impl TrainingSet {
    pub fn new(model: &AndOrModel, samples: &[SampleRecord], slide: &SlideParams) -> Result<Self> {
        let indexes = samples
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let index = match s.label {
                    Label::Positive => SearchIndex::for_box(model, &s.contours, &positive_box(s)?),
                    Label::Negative => SearchIndex::sliding(model, &s.contours, slide),
                };
                index.map_err(|e| Error::Sample {
                    index: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            labels: samples.iter().map(|s| s.label).collect(),
            indexes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn index(&self, k: usize) -> &SearchIndex {
        &self.indexes[k]
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&k| self.labels[k] == Label::Positive)
    }

    /// Best positive-label window of every sample.
    pub fn bests(&self, model: &AndOrModel) -> Result<Vec<Option<BestWindow>>> {
        self.indexes
            .par_iter()
            .enumerate()
            .map(|(k, index)| {
                index.best(model, None).map_err(|e| Error::Sample {
                    index: k,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// `g(ω) = D Σ_pos max_H ω·φ(X_k, H)`.
    pub fn concave_part(&self, model: &AndOrModel, d: f64) -> Result<f64> {
        let scores = self
            .positives()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&k| {
                let best = self.indexes[k].best(model, None).map_err(|e| Error::Sample {
                    index: k,
                    source: Box::new(e),
                })?;
                Ok(best.map_or(f64::NEG_INFINITY, |b| b.result.score))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(d * scores.iter().sum::<f64>())
    }

    /// The training objective `f(ω) − g(ω)` at `model.omega`.
    pub fn objective(&self, model: &AndOrModel, d: f64) -> Result<Objective> {
        Ok(self.objective_from(&model.omega.0, &self.bests(model)?, d))
    }

    fn objective_from(&self, omega: &[f64], bests: &[Option<BestWindow>], d: f64) -> Objective {
        let mut f = 0.5 * omega.iter().map(|v| v * v).sum::<f64>();
        let mut g = 0.0;
        for (y, b) in self.labels.iter().zip(bests) {
            let s_plus = b.as_ref().map_or(f64::NEG_INFINITY, |b| b.result.score);
            f += d * augmented_label(*y, s_plus).1;
            if *y == Label::Positive {
                g += d * s_plus;
            }
        }
        Objective {
            convex: f,
            concave: g,
            value: f - g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// `½‖ω‖² + D Σ_k max_{y,H} [ω·φ(X_k,y,H) + L(y_k,y)]`.
    pub convex: f64,
    /// `D Σ_k max_H ω·φ(X_k,y_k,H)`.
    pub concave: f64,
    pub value: f64,
}

struct TrainOracle<'a> {
    set: &'a TrainingSet,
    model: AndOrModel,
    anchors: Vec<SparseVec>,
    /// Parameters and best windows of the latest separation pass.
    cache: Option<(Vec<f64>, Vec<Option<BestWindow>>)>,
}

impl SeparationOracle for TrainOracle<'_> {
    fn n_samples(&self) -> usize {
        self.set.len()
    }

    fn anchor(&self, sample: usize) -> &SparseVec {
        &self.anchors[sample]
    }

    fn separate(&mut self, omega: &[f64]) -> Result<Vec<Separation>> {
        self.model.omega = ParameterVector(omega.to_vec());
        let bests = self.set.bests(&self.model)?;
        let model = &self.model;
        let set = self.set;
        let seps = bests
            .par_iter()
            .enumerate()
            .map(|(k, best)| {
                let y = set.labels[k];
                let s_plus = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.result.score);
                let (label, _) = augmented_label(y, s_plus);
                let feature = match (label, best) {
                    (Label::Positive, Some(b)) => {
                        let level = &set.indexes[k].levels()[b.level];
                        let f = assemble_joint(level.contours(), model, &b.result.assignment)
                            .map_err(|e| Error::Sample {
                                index: k,
                                source: Box::new(e),
                            })?;
                        SparseVec::from_dense(&f.0)
                    }
                    _ => SparseVec::default(),
                };
                Ok(Separation {
                    label,
                    feature,
                    loss: if label == y { 0.0 } else { 1.0 },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some((omega.to_vec(), bests));
        Ok(seps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// `f − g` after this iteration's update.
    pub objective: f64,
    pub relative_change: f64,
    pub creations: usize,
    pub removals: usize,
    pub moves: usize,
    pub principal_components: usize,
    pub working_set: usize,
    pub solver_rounds: usize,
    /// The solve did not improve the convex bound, so ω was kept.
    pub kept_previous: bool,
    pub live_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub positives: usize,
    pub negatives: usize,
    pub flagged_or_nodes: Vec<usize>,
    pub initial_leaves: Vec<usize>,
    pub initial_objective: f64,
    pub iterations: Vec<IterationReport>,
    pub converged: bool,
}

impl TrainingReport {
    pub fn log_lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "init positives={} negatives={} leaves={:?} flagged={:?} objective={:.6}",
            self.positives,
            self.negatives,
            self.initial_leaves,
            self.flagged_or_nodes,
            self.initial_objective
        )];
        for it in &self.iterations {
            out.push(format!(
                "iter {} objective={:.6} change={:.3e} created={} removed={} moved={} pcs={} constraints={} rounds={} kept={} leaves={}",
                it.iteration,
                it.objective,
                it.relative_change,
                it.creations,
                it.removals,
                it.moves,
                it.principal_components,
                it.working_set,
                it.solver_rounds,
                it.kept_previous,
                it.live_leaves
            ));
        }
        out.push(format!(
            "done iterations={} converged={}",
            self.iterations.len(),
            self.converged
        ));
        out
    }
}

/// What an observer sees of one iteration, before the convex solve.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub set: &'a TrainingSet,
    /// Model at ω_t, before structure edits.
    pub model: &'a AndOrModel,
    pub objective: Objective,
    pub estimate: &'a LatentEstimate,
    pub basis: &'a PcaBasis,
    pub mask: &'a [bool],
    pub reconfiguration: &'a Reconfiguration,
}

pub fn train(
    config: ModelConfig,
    samples: &[SampleRecord],
    params: &TrainParams,
) -> Result<(AndOrModel, TrainingReport)> {
    train_observed(config, samples, params, &mut |_| {})
}

/// [`train`] with a callback invoked once per iteration.
pub fn train_observed(
    config: ModelConfig,
    samples: &[SampleRecord],
    params: &TrainParams,
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<(AndOrModel, TrainingReport)> {
    let positives: Vec<SampleRecord> = samples
        .iter()
        .filter(|s| s.label == Label::Positive)
        .cloned()
        .collect();
    let n_neg = samples.len() - positives.len();
    if positives.is_empty() || n_neg == 0 {
        return Err(Error::Config(
            "training needs both positive and negative samples".into(),
        ));
    }
    let d = params.solver.d;
    let init = initialize(config, &positives, &params.isodata)?;
    let mut model = init.model;
    let set = TrainingSet::new(&model, samples, &params.slide)?;
    let pos_idx: Vec<usize> = set.positives().collect();
    let dim = model.layout().dim();

    let mut bests = set.bests(&model)?;
    let mut objective = set.objective_from(&model.omega.0, &bests, d);
    let mut report = TrainingReport {
        positives: positives.len(),
        negatives: n_neg,
        flagged_or_nodes: init.flagged,
        initial_leaves: init.leaves,
        initial_objective: objective.value,
        iterations: Vec::new(),
        converged: false,
    };
    info!("{}", report.log_lines()[0]);
    let mut warm: Option<DualState> = None;

    for t in 1..=params.max_iterations {
        let wrap = |e: Error| Error::Training {
            iteration: t,
            source: Box::new(e),
        };
        let samples_t = pos_idx
            .par_iter()
            .map(|&k| latent_from_best(&model, set.index(k), k, bests[k].as_ref()))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let q = hyperplane(samples_t.iter().map(|s| &s.feature), d, dim);
        let estimate = LatentEstimate {
            samples: samples_t,
            hyperplane: q,
        };
        let features: Vec<Vec<f64>> = estimate.samples.iter().map(|s| s.feature.clone()).collect();
        let (basis, mask) = pca_refactor(&features, params.sigma, params.delta).map_err(wrap)?;
        let recon = reconfigure(&model, &estimate, &mask, params.caps, &params.isodata, d)
            .map_err(wrap)?;
        observer(&IterationView {
            iteration: t,
            set: &set,
            model: &model,
            objective,
            estimate: &estimate,
            basis: &basis,
            mask: &mask,
            reconfiguration: &recon,
        });

        let plan_empty = recon.plan.is_empty();
        let mut next = model.clone();
        recon.plan.apply(&mut next).map_err(wrap)?;
        let mut anchors = vec![SparseVec::default(); set.len()];
        for (&k, f) in pos_idx.iter().zip(&recon.adjusted) {
            anchors[k] = SparseVec::from_dense(f);
        }
        let mut oracle = TrainOracle {
            set: &set,
            model: next.clone(),
            anchors,
            cache: None,
        };
        let warm_start = if plan_empty { warm.take() } else { None };
        let outcome = solve(&mut oracle, dim, &params.solver, warm_start).map_err(wrap)?;
        next.omega = ParameterVector(outcome.omega.clone());
        next.enforce_dead_slots();
        let next_bests = match oracle.cache.take() {
            Some((w, b)) if w == next.omega.0 => b,
            _ => set.bests(&next).map_err(wrap)?,
        };
        let next_objective = set.objective_from(&next.omega.0, &next_bests, d);

        // The solve is approximate; when the structure is unchanged, keep ω_t
        // unless ω_{t+1} lowers the convex upper bound built at ω_t.
        let mut kept_previous = false;
        if plan_empty {
            let anchored: f64 = recon
                .adjusted
                .iter()
                .map(|f| f.iter().zip(&next.omega.0).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let bound_next = next_objective.convex - d * anchored;
            if bound_next > objective.value {
                kept_previous = true;
            }
        }
        let new_value = if kept_previous {
            objective.value
        } else {
            next_objective.value
        };
        let relative_change = (objective.value - new_value).abs() / objective.value.abs().max(1e-12);
        if !kept_previous {
            model = next;
            bests = next_bests;
            objective = next_objective;
            warm = Some(outcome.state);
        }
        let it = IterationReport {
            iteration: t,
            objective: objective.value,
            relative_change,
            creations: recon.plan.creations(),
            removals: recon.plan.removals(),
            moves: recon.plan.moves(),
            principal_components: basis.components.len(),
            working_set: outcome.rounds.last().map_or(0, |r| r.working_set),
            solver_rounds: outcome.rounds.len(),
            kept_previous,
            live_leaves: model.live_count(),
        };
        report.iterations.push(it);
        info!("{}", report.log_lines()[t]);
        if plan_empty && relative_change < params.rel_tol {
            report.converged = true;
            break;
        }
    }
    Ok((model, report))
}
