//! Sweep-based supervised training in the DMRG style: the orthogonality
//! center walks the network edge by edge; at each edge the two adjacent
//! tensors are merged, nudged along the mini-batch cross-entropy gradient,
//! and split back with controlled truncation so bond dimensions adapt up to
//! a cap.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::classifier::{argmax, ClassifierError, TNClassifier, Topology};
use crate::encoding::{encode_sample, leaf_permutation, DataError, Dataset, LeafOrdering};
use crate::network::{
    build_mps, build_ttn, label_node, move_axis, truncate_first_axis, truncate_last_axis, LinkId,
    NetworkError, NodeId, TensorNetwork,
};
use crate::tensor::{contract, svd_split, DenseTensor, TensorError};

/// Gradient + line-search rounds per two-site update. The local problem is
/// convex, so a few descent rounds give most of the benefit of an exact
/// local solve at a fraction of the cost.
const LOCAL_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid model geometry: {0}")]
    InvalidGeometry(String),
    #[error("non-finite loss at sweep {sweep}, step {step}")]
    NonFiniteLoss { sweep: usize, step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub max_bond_dim: usize,
    pub n_sweeps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Relative discarded-weight budget per SVD split during training.
    pub truncation_eps: f64,
    pub seed: u64,
    /// Stop after this many sweeps without validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_bond_dim: 16,
            n_sweeps: 10,
            learning_rate: 0.1,
            batch_size: 100,
            truncation_eps: 1e-10,
            seed: 0,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub wall_time_secs: f64,
    /// Bond dimension per internal link (link-id order) of the returned model.
    pub bond_dims: Vec<usize>,
}

/// Softmax cross-entropy, guarded against overflow by max subtraction.
pub fn loss(scores: &[f64], label: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    lse - scores[label]
}

/// Gradient of [`loss`] with respect to the scores: softmax minus one-hot.
pub fn loss_gradient(scores: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(scores);
    g[label] -= 1.0;
    g
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Build an untrained classifier. MPS models start from seeded random
/// tensors. TTN models start from a stack of exact isometries aligned with
/// the principal components of the feature map's second moment under uniform
/// pixels — initial outputs are then well-conditioned instead of decaying
/// with feature count — plus a lightly perturbed uniform read-out at the
/// root. Deterministic under the seed; always unit Frobenius norm with the
/// center at the label node.
pub fn init_model(
    topology: Topology,
    n_features: usize,
    n_classes: usize,
    chi_init: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<TNClassifier, TrainError> {
    if height * width != n_features {
        return Err(TrainError::InvalidGeometry(format!(
            "{height}x{width} grid does not hold {n_features} features"
        )));
    }
    if chi_init == 0 {
        return Err(TrainError::InvalidConfig("chi_init must be >= 1".into()));
    }
    if n_classes < 2 {
        return Err(TrainError::InvalidConfig("need at least 2 classes".into()));
    }
    let (net, permutation) = match topology {
        Topology::Mps => {
            let mut net = build_mps(
                n_features,
                &vec![2; n_features],
                chi_init,
                n_classes,
                n_features / 2,
                seed,
            )?;
            let root = label_node(&net);
            net.canonicalize_mut(root)?;
            (net, leaf_permutation(height, width, LeafOrdering::Raster)?)
        }
        Topology::Ttn => {
            let mut net = build_ttn(n_features, 2, chi_init, n_classes, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            apply_prior_stack(&mut net, n_classes, &mut rng)?;
            let root = label_node(&net);
            net.canonicalize_mut(root)?;
            let scheme = if height.is_power_of_two() && width.is_power_of_two() {
                LeafOrdering::Quadtree
            } else {
                LeafOrdering::Raster
            };
            (net, leaf_permutation(height, width, scheme)?)
        }
    };
    let net = net.normalized();
    Ok(TNClassifier {
        net,
        permutation,
        n_classes,
        height,
        width,
        topology,
    })
}

/// Overwrite a freshly built TTN's tensors with the principal-component
/// isometric stack. Bottom nodes project feature pairs onto the leading
/// eigenvector products of the per-pixel second-moment matrix
/// [[1/2, 1/pi], [1/pi, 1/2]]; internal nodes select the heaviest
/// weight-product pairs; the root reads out near-uniformly over classes with
/// a small seeded perturbation to break degeneracy.
fn apply_prior_stack(
    net: &mut TensorNetwork,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    let root = label_node(net);
    let n = net.n_nodes();
    let mut parent: Vec<Option<NodeId>> = vec![None; n];
    let mut order = vec![root];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for (_, v) in net.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                order.push(v);
            }
        }
    }

    let lp = 0.5 + std::f64::consts::FRAC_1_PI;
    let lm = 0.5 - std::f64::consts::FRAC_1_PI;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let basis = [[s, s], [s, -s]];
    let cand: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let cand_w = [lp * lp, lp * lm, lp * lm, lm * lm];

    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &u in order.iter().rev() {
        if u == root {
            continue;
        }
        let links = net.node(u).links.clone(); // [left, right, parent]
        let chi_p = net.link(links[2]).dim;
        if net.link(links[0]).is_open() {
            // bottom node over a feature pair
            let mut data = vec![0.0; 4 * chi_p];
            for (k, &(i, j)) in cand.iter().take(chi_p).enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        data[(a * 2 + b) * chi_p + k] = basis[i][a] * basis[j][b];
                    }
                }
            }
            net.set_tensor(u, DenseTensor::new(vec![2, 2, chi_p], data)?);
            weights[u] = cand_w[..chi_p].to_vec();
        } else {
            let cl = net.link(links[0]).other(u).expect("internal");
            let cr = net.link(links[1]).other(u).expect("internal");
            let (chi_l, chi_r) = (weights[cl].len(), weights[cr].len());
            let pairs = top_pairs(&weights[cl], &weights[cr], chi_p);
            let mut data = vec![0.0; chi_l * chi_r * chi_p];
            let mut w = Vec::with_capacity(chi_p);
            for (p, &(kl, kr)) in pairs.iter().enumerate() {
                data[(kl * chi_r + kr) * chi_p + p] = 1.0;
                w.push(weights[cl][kl] * weights[cr][kr]);
            }
            net.set_tensor(u, DenseTensor::new(vec![chi_l, chi_r, chi_p], data)?);
            weights[u] = w;
        }
    }

    let root_links = net.node(root).links.clone();
    let c_inv = 1.0 / (n_classes as f64).sqrt();
    if net.link(root_links[0]).is_open() {
        // two-feature degenerate tree: the root holds both leaves directly
        let mut data = vec![0.0; 4 * n_classes];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..n_classes {
                    let noise: f64 = StandardNormal.sample(rng);
                    data[(a * 2 + b) * n_classes + c] =
                        basis[0][a] * basis[0][b] * c_inv + 0.01 * noise;
                }
            }
        }
        net.set_tensor(root, DenseTensor::new(vec![2, 2, n_classes], data)?);
    } else {
        let cl = net.link(root_links[0]).other(root).expect("internal");
        let cr = net.link(root_links[1]).other(root).expect("internal");
        let (chi_l, chi_r) = (weights[cl].len(), weights[cr].len());
        let scale = (weights[cl][0] * weights[cr][0]).sqrt() * c_inv;
        let mut data = vec![0.0; chi_l * chi_r * n_classes];
        for kl in 0..chi_l {
            for kr in 0..chi_r {
                let base = (weights[cl][kl] * weights[cr][kr]).sqrt() * c_inv;
                for c in 0..n_classes {
                    let noise: f64 = StandardNormal.sample(rng);
                    data[(kl * chi_r + kr) * n_classes + c] = base + 0.01 * scale * noise;
                }
            }
        }
        net.set_tensor(root, DenseTensor::new(vec![chi_l, chi_r, n_classes], data)?);
    }
    Ok(())
}

/// Indices of the `k` heaviest weight products, ties broken by index order.
fn top_pairs(wl: &[f64], wr: &[f64], k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..wl.len())
        .flat_map(|i| (0..wr.len()).map(move |j| (i, j)))
        .collect();
    all.sort_by(|&(a, b), &(c, d)| {
        (wl[c] * wr[d])
            .partial_cmp(&(wl[a] * wr[b]))
            .unwrap()
            .then((a, b).cmp(&(c, d)))
    });
    all.truncate(k);
    all
}

/// Score every sample of a dataset (parallel, deterministic order).
pub fn dataset_scores(model: &TNClassifier, ds: &Dataset) -> Result<Vec<Vec<f64>>, TrainError> {
    ds.images
        .par_iter()
        .map(|img| {
            let enc = encode_sample(img, &model.permutation)?;
            Ok(model.forward(&enc)?)
        })
        .collect()
}

fn metrics(scores: &[Vec<f64>], labels: &[u16]) -> (f64, f64) {
    let mut total = 0.0;
    let mut correct = 0usize;
    for (s, &y) in scores.iter().zip(labels) {
        total += loss(s, usize::from(y));
        if argmax(s) == usize::from(y) {
            correct += 1;
        }
    }
    (total / labels.len() as f64, correct as f64 / labels.len() as f64)
}

/// Train a model with DMRG-style two-site sweeps. Each sweep walks the full
/// Euler tour of the tree (every edge twice); per-step updates are
/// mini-batch softmax-cross-entropy gradients, normalized to unit length and
/// scaled by a harmonically decaying step size, so progress does not stall
/// when raw score magnitudes are small yet still settles in later sweeps.
/// Returns the model with the best validation accuracy seen, plus per-sweep
/// metrics.
pub fn train(
    model: &TNClassifier,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TNClassifier, TrainReport), TrainError> {
    if cfg.max_bond_dim == 0 || cfg.n_sweeps == 0 || cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "max_bond_dim, n_sweeps and batch_size must be >= 1".into(),
        ));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(TrainError::InvalidConfig(
            "learning_rate must be finite and >= 0".into(),
        ));
    }
    if cfg.truncation_eps < 0.0 {
        return Err(TrainError::InvalidConfig("truncation_eps must be >= 0".into()));
    }
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for ds in [train_ds, val_ds] {
        if ds.n_features() != model.n_features() {
            return Err(TrainError::InvalidGeometry(format!(
                "dataset has {} features, model expects {}",
                ds.n_features(),
                model.n_features()
            )));
        }
        if ds.n_classes != model.n_classes {
            return Err(TrainError::InvalidGeometry(format!(
                "dataset has {} classes, model expects {}",
                ds.n_classes, model.n_classes
            )));
        }
    }

    let start = Instant::now();
    let locals: Vec<Vec<[f64; 2]>> = train_ds
        .images
        .par_iter()
        .map(|img| Ok(encode_sample(img, &model.permutation)?.locals))
        .collect::<Result<_, TrainError>>()?;
    let labels = &train_ds.labels;

    let mut state = SweepState::new(model, &locals)?;
    let moves = euler_moves(&state.net, state.root, &state.parent_link);
    state.rebuild_messages();
    state.renormalize();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, TNClassifier)> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0usize;

    for sweep in 0..cfg.n_sweeps {
        // Harmonically decayed step size: early sweeps move fast, later
        // sweeps shrink the update amplitude so weak but systematic signals
        // are not drowned by fixed-size oscillation around the optimum.
        let step_size = cfg.learning_rate / (1.0 + sweep as f64);
        // deterministic mini-batch schedule for this sweep
        let n = locals.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let batches: Vec<&[usize]> = idx.chunks(cfg.batch_size.min(n)).collect();

        for (step, &(u, v, link)) in moves.iter().enumerate() {
            let batch = batches[step % batches.len()];
            let batch_loss = state.step(u, v, link, batch, labels, cfg, step_size)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { sweep, step });
            }
        }
        // rebalance node scales and refresh all caches, then re-anchor the
        // overall score scale before the metric snapshot
        state.rebuild_messages();
        state.renormalize();

        let snapshot = state.to_classifier(model);
        let train_scores = dataset_scores(&snapshot, train_ds)?;
        let (tl, ta) = metrics(&train_scores, &train_ds.labels);
        let val_scores = dataset_scores(&snapshot, val_ds)?;
        let (vl, va) = metrics(&val_scores, &val_ds.labels);
        report.train_loss.push(tl);
        report.train_accuracy.push(ta);
        report.val_loss.push(vl);
        report.val_accuracy.push(va);

        if best.as_ref().map_or(true, |(acc, _)| va > *acc) {
            best = Some((va, snapshot));
        }
        if let Some(p) = cfg.patience {
            if vl < best_val_loss - 1e-12 {
                best_val_loss = vl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }

    let best_model = best.expect("at least one sweep ran").1;
    report.bond_dims = best_model
        .net
        .internal_links()
        .iter()
        .map(|&l| best_model.net.link(l).dim)
        .collect();
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((best_model, report))
}

// ---------------------------------------------------------------------------
// sweep machinery

/// Cached per-sample message across one link, directed toward the current
/// center. Layout `[bond]`, or `[bond, n_classes]` when the message carries
/// the label axis (the link sits on the path from the label node).
#[derive(Clone, Debug, Default)]
struct Msg {
    data: Vec<f64>,
    has_label: bool,
}

struct SweepState<'a> {
    net: TensorNetwork,
    locals: &'a [Vec<[f64; 2]>],
    /// `msgs[sample][link]`, only internal links populated.
    msgs: Vec<Vec<Msg>>,
    feat: Vec<usize>,
    parent_link: Vec<Option<LinkId>>,
    root: NodeId,
    n_classes: usize,
}

/// What feeds one external axis during a contraction.
#[derive(Clone, Copy, Debug)]
enum Source {
    Leaf(usize),
    Edge(LinkId),
}

impl<'a> SweepState<'a> {
    fn new(model: &TNClassifier, locals: &'a [Vec<[f64; 2]>]) -> Result<Self, TrainError> {
        let mut net = model.net.clone();
        let root = label_node(&net);
        net.canonicalize_mut(root)?;
        let feat = model.feature_of_link();
        let n = net.n_nodes();
        let mut parent_link: Vec<Option<LinkId>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = vec![root];
        seen[root] = true;
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for (l, v) in net.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    parent_link[v] = Some(l);
                    queue.push(v);
                }
            }
        }
        let n_links = net.links().len();
        Ok(SweepState {
            net,
            locals,
            msgs: vec![vec![Msg::default(); n_links]; locals.len()],
            feat,
            parent_link,
            root,
            n_classes: model.n_classes,
        })
    }

    /// Recompute every message toward the root (center must be at the root),
    /// rescaling each node so its outgoing messages have mean norm 1. The
    /// balancing is a pure gauge choice (scalars per subtree commute through
    /// the whole contraction) but it keeps every cached message — and
    /// therefore every gradient environment — at a numerically workable
    /// magnitude, instead of concentrating the model's scale in the root
    /// while deep environments underflow.
    fn rebuild_messages(&mut self) {
        debug_assert_eq!(self.net.center(), Some(self.root));
        // children-before-parents order
        let mut order: Vec<NodeId> = Vec::with_capacity(self.net.n_nodes());
        let mut stack = vec![self.root];
        let mut seen = vec![false; self.net.n_nodes()];
        seen[self.root] = true;
        while let Some(u) = stack.pop() {
            order.push(u);
            for (_, v) in self.net.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        let nodes: Vec<NodeId> = order
            .into_iter()
            .rev()
            .filter(|&u| u != self.root)
            .collect();
        for u in nodes {
            let via = self.parent_link[u].expect("non-root");
            let plan = self.msg_plan(u, via);
            let locals = self.locals;
            let new: Vec<Msg> = self
                .msgs
                .par_iter()
                .enumerate()
                .map(|(s, msgs)| plan.eval(&locals[s], msgs))
                .collect();
            let mean = new
                .iter()
                .map(|m| m.data.iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum::<f64>()
                / new.len() as f64;
            let inv = if mean.is_finite() && mean > 0.0 {
                1.0 / mean
            } else {
                1.0
            };
            for (s, mut m) in new.into_iter().enumerate() {
                if inv != 1.0 {
                    for x in &mut m.data {
                        *x *= inv;
                    }
                }
                self.msgs[s][via] = m;
            }
            if inv != 1.0 {
                let t = self.net.node(u).tensor.scaled(inv);
                self.net.set_tensor(u, t);
            }
        }
    }

    fn to_classifier(&self, template: &TNClassifier) -> TNClassifier {
        TNClassifier {
            net: self.net.clone(),
            permutation: template.permutation.clone(),
            n_classes: template.n_classes,
            height: template.height,
            width: template.width,
            topology: template.topology,
        }
    }

    /// Rescale the root tensor so the RMS classifier score over (a prefix
    /// of) the training set is 1. The overall model scale is a gauge freedom
    /// for classification, but it is numerically critical: a unit-Frobenius
    /// model contracted with hundreds of local vectors yields scores so
    /// small that the softmax is pinned at uniform and every loss comparison
    /// underflows. Must be called with the center at the root and valid
    /// messages toward it.
    fn renormalize(&mut self) {
        let root = self.root;
        debug_assert_eq!(self.net.center(), Some(root));
        let node = self.net.node(root);
        let links = node.links.clone();
        let shape = node.tensor.shape().to_vec();
        let mut child_axes: Vec<(usize, Source)> = Vec::new();
        let mut label_ax = None;
        for (ax, &l) in links.iter().enumerate() {
            if self.net.link(l).is_open() {
                if self.feat[l] != usize::MAX {
                    child_axes.push((ax, Source::Leaf(self.feat[l])));
                } else {
                    label_ax = Some(ax);
                }
            } else {
                child_axes.push((ax, Source::Edge(l)));
            }
        }
        let label_ax = label_ax.expect("root carries the label axis");
        let mut perm: Vec<usize> = child_axes.iter().map(|&(a, _)| a).collect();
        perm.push(label_ax);
        let t = node.tensor.permute(&perm).expect("valid axis permutation");
        let dims: Vec<usize> = child_axes.iter().map(|&(a, _)| shape[a]).collect();
        let n = self.locals.len().min(256);
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in 0..n {
            let vecs: Vec<&[f64]> = child_axes
                .iter()
                .map(|&(_, src)| match src {
                    Source::Leaf(i) => &self.locals[s][i][..],
                    Source::Edge(l) => &self.msgs[s][l].data[..],
                })
                .collect();
            let scores = fold_front(t.data(), &dims, &vecs);
            for v in &scores {
                sq += v * v;
            }
            count += scores.len();
        }
        let rms = (sq / count as f64).sqrt();
        if rms.is_finite() && rms > 0.0 {
            let scaled = self.net.node(root).tensor.scaled(1.0 / rms);
            self.net.set_tensor(root, scaled);
        }
    }

    /// Plan for recomputing the message from node `u` across `via`, given
    /// valid messages toward `u` on u's other links.
    fn msg_plan(&self, u: NodeId, via: LinkId) -> MsgPlan {
        let node = self.net.node(u);
        let mut plain_axes = Vec::new();
        let mut plain_sources = Vec::new();
        let mut mat: Option<(usize, LinkId, usize)> = None; // axis, link, bond dim
        let mut via_axis = usize::MAX;
        let mut label_axis = None;
        for (ax, &l) in node.links.iter().enumerate() {
            if l == via {
                via_axis = ax;
            } else if self.net.link(l).is_open() {
                if self.feat[l] != usize::MAX {
                    plain_axes.push(ax);
                    plain_sources.push(Source::Leaf(self.feat[l]));
                } else {
                    label_axis = Some(ax);
                }
            } else if Some(l) == self.parent_link[u] {
                mat = Some((ax, l, self.net.link(l).dim));
            } else {
                plain_axes.push(ax);
                plain_sources.push(Source::Edge(l));
            }
        }
        let mut perm = plain_axes.clone();
        if let Some((ax, _, _)) = mat {
            perm.push(ax);
        }
        perm.push(via_axis);
        if let Some(ax) = label_axis {
            perm.push(ax);
        }
        let permuted = node.tensor.permute(&perm).expect("valid axis permutation");
        let plain_dims: Vec<usize> = plain_axes.iter().map(|&a| node.tensor.shape()[a]).collect();
        MsgPlan {
            permuted,
            plain_dims,
            plain_sources,
            mat: mat.map(|(_, l, d)| (l, d)),
            via_dim: node.tensor.shape()[via_axis],
            own_label: label_axis.is_some(),
            n_classes: self.n_classes,
        }
    }

    /// Two-site update on the edge `link` between `u` (current center) and
    /// `v`; the center ends at `v`. Returns the pre-update batch loss.
    fn step(
        &mut self,
        u: NodeId,
        v: NodeId,
        link: LinkId,
        batch: &[usize],
        labels: &[u16],
        cfg: &TrainConfig,
        step_size: f64,
    ) -> Result<f64, TrainError> {
        let net = &self.net;
        let ax_u = net.axis_of_link(u, link)?;
        let ax_v = net.axis_of_link(v, link)?;
        let merged = contract(&net.node(u).tensor, &net.node(v).tensor, &[(ax_u, ax_v)])?;

        // external axes: u's others then v's others, each in axis order
        let mut ext_links: Vec<(LinkId, NodeId)> = Vec::new();
        for &l in &net.node(u).links {
            if l != link {
                ext_links.push((l, u));
            }
        }
        let ku = ext_links.len();
        for &l in &net.node(v).links {
            if l != link {
                ext_links.push((l, v));
            }
        }

        let mut plain_axes = Vec::new();
        let mut plain_sources = Vec::new();
        let mut labelish: Option<(usize, Option<(LinkId, usize)>)> = None; // axis, mat
        for (ax, &(l, owner)) in ext_links.iter().enumerate() {
            if net.link(l).is_open() {
                if self.feat[l] != usize::MAX {
                    plain_axes.push(ax);
                    plain_sources.push(Source::Leaf(self.feat[l]));
                } else {
                    labelish = Some((ax, None));
                }
            } else if Some(l) == self.parent_link[owner] && self.parent_link[owner] != Some(link) {
                labelish = Some((ax, Some((l, net.link(l).dim))));
            } else {
                plain_axes.push(ax);
                plain_sources.push(Source::Edge(l));
            }
        }
        let (label_ax, mat) = labelish.expect("exactly one label carrier");
        let mut perm = plain_axes.clone();
        perm.push(label_ax);
        let mut inv_perm = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        let mp = merged.permute(&perm)?;
        let plain_dims: Vec<usize> = plain_axes.iter().map(|&a| merged.shape()[a]).collect();
        let n_classes = self.n_classes;

        // batch gradient in the folded layout, fixed chunking for determinism
        let locals = self.locals;
        let msgs = &self.msgs;
        let inv_n = 1.0 / batch.len() as f64;
        let grad_pass = |data: &[f64]| -> (Vec<f64>, f64) {
            let chunks: Vec<(Vec<f64>, f64)> = batch
                .par_chunks(64)
                .map(|ck| {
                    let mut g = vec![0.0f64; data.len()];
                    let mut loss_sum = 0.0;
                    for &s in ck {
                        let vecs: Vec<&[f64]> = plain_sources
                            .iter()
                            .map(|src| match *src {
                                Source::Leaf(i) => &locals[s][i][..],
                                Source::Edge(l) => &msgs[s][l].data[..],
                            })
                            .collect();
                        let rem = fold_front(data, &plain_dims, &vecs);
                        let y = usize::from(labels[s]);
                        let (scores, g_label): (Vec<f64>, Vec<f64>) = match mat {
                            None => {
                                let delta = loss_gradient(&rem, y);
                                (rem, delta)
                            }
                            Some((l, bd)) => {
                                let m = &msgs[s][l].data;
                                debug_assert!(msgs[s][l].has_label);
                                let mut scores = vec![0.0; n_classes];
                                for b in 0..bd {
                                    let rb = rem[b];
                                    if rb == 0.0 {
                                        continue;
                                    }
                                    for c in 0..n_classes {
                                        scores[c] += rb * m[b * n_classes + c];
                                    }
                                }
                                let delta = loss_gradient(&scores, y);
                                let mut gl = vec![0.0; bd];
                                for b in 0..bd {
                                    let mut acc = 0.0;
                                    for c in 0..n_classes {
                                        acc += m[b * n_classes + c] * delta[c];
                                    }
                                    gl[b] = acc;
                                }
                                (scores, gl)
                            }
                        };
                        loss_sum += loss(&scores, y);
                        let mut factors = vecs;
                        factors.push(&g_label);
                        outer_acc(&mut g, &factors, 1.0);
                    }
                    (g, loss_sum)
                })
                .collect();
            let mut g_fold = vec![0.0f64; data.len()];
            let mut loss_total = 0.0;
            for (g, l) in chunks {
                for (a, b) in g_fold.iter_mut().zip(&g) {
                    *a += b;
                }
                loss_total += l;
            }
            (g_fold, loss_total * inv_n)
        };

        let (first_grad, batch_loss) = grad_pass(mp.data());

        let mut new_data = mp.data().to_vec();
        if step_size > 0.0 {
            // The loss restricted to the merged tensor is a convex softmax
            // objective (scores are linear in the tensor), so a few rounds of
            // gradient descent with an exact-ish line search go a long way.
            // Each line search needs only one extra fold pass per sample:
            // per-sample base scores and direction scores make the batch loss
            // at any step size an O(batch * classes) evaluation. The trial
            // grid spans several octaves around the nominal normalized step;
            // a step is only taken if it strictly reduces the batch loss.
            let mut seed = Some((first_grad, batch_loss));
            for _ in 0..LOCAL_ROUNDS {
                let (g_fold, cur_loss) = match seed.take() {
                    Some(x) => x,
                    None => grad_pass(&new_data),
                };
                let gnorm = g_fold.iter().map(|x| x * x).sum::<f64>().sqrt() * inv_n;
                if !(gnorm > 0.0 && gnorm.is_finite()) {
                    break;
                }
                let pairs: Vec<(Vec<f64>, Vec<f64>, usize)> = batch
                    .par_chunks(64)
                    .map(|ck| {
                        let mut out = Vec::with_capacity(ck.len());
                        for &s in ck {
                            let vecs: Vec<&[f64]> = plain_sources
                                .iter()
                                .map(|src| match *src {
                                    Source::Leaf(i) => &locals[s][i][..],
                                    Source::Edge(l) => &msgs[s][l].data[..],
                                })
                                .collect();
                            let rem_b = fold_front(&new_data, &plain_dims, &vecs);
                            let rem_d = fold_front(&g_fold, &plain_dims, &vecs);
                            let y = usize::from(labels[s]);
                            let to_scores = |rem: &[f64]| -> Vec<f64> {
                                match mat {
                                    None => rem.to_vec(),
                                    Some((l, bd)) => {
                                        let m = &msgs[s][l].data;
                                        let mut scores = vec![0.0; n_classes];
                                        for b in 0..bd {
                                            let rb = rem[b];
                                            if rb == 0.0 {
                                                continue;
                                            }
                                            for c in 0..n_classes {
                                                scores[c] += rb * m[b * n_classes + c];
                                            }
                                        }
                                        scores
                                    }
                                }
                            };
                            out.push((to_scores(&rem_b), to_scores(&rem_d), y));
                        }
                        out
                    })
                    .flatten()
                    .collect();
                let loss_at = |scale: f64| -> f64 {
                    pairs
                        .iter()
                        .map(|(b, d, y)| {
                            let scores: Vec<f64> =
                                b.iter().zip(d).map(|(bb, dd)| bb - scale * dd).collect();
                            loss(&scores, *y)
                        })
                        .sum::<f64>()
                        * inv_n
                };
                let nominal = step_size * inv_n / gnorm;
                let (mut best_scale, mut best_loss) = (0.0, cur_loss);
                for k in -40i32..=8 {
                    let scale = nominal * 2.0f64.powi(k);
                    let l = loss_at(scale);
                    if l.is_finite() && l < best_loss {
                        best_scale = scale;
                        best_loss = l;
                    }
                }
                if best_scale == 0.0 {
                    break;
                }
                for (d, g) in new_data.iter_mut().zip(&g_fold) {
                    *d -= best_scale * g;
                }
            }
        }
        let new_merged =
            DenseTensor::new(mp.shape().to_vec(), new_data)?.permute(&inv_perm)?;

        // split back: u keeps an isometry, v becomes the center
        let left: Vec<usize> = (0..ku).collect();
        let (big_u, s, vt) = svd_split(&new_merged, &left)?;
        let total: f64 = s.iter().map(|x| x * x).sum();
        let budget = cfg.truncation_eps * total;
        let r = s.len();
        let mut discarded = 0.0;
        let mut keep = r;
        while keep > 1 {
            let a2 = s[keep - 1] * s[keep - 1];
            if discarded + a2 <= budget {
                discarded += a2;
                keep -= 1;
            } else {
                break;
            }
        }
        keep = keep.min(cfg.max_bond_dim);

        let u_t = truncate_last_axis(&big_u, keep);
        self.net
            .set_tensor(u, move_axis(&u_t, u_t.rank() - 1, ax_u)?);
        let mut vt_t = truncate_first_axis(&vt, keep);
        let cols = vt_t.len() / keep;
        for (row, &sv) in s.iter().take(keep).enumerate() {
            for x in &mut vt_t.data_mut()[row * cols..(row + 1) * cols] {
                *x *= sv;
            }
        }
        self.net.set_tensor(v, move_axis(&vt_t, 0, ax_v)?);
        self.net.set_link_dim(link, keep);
        self.net.set_center(v);

        // restore the message invariant: the flipped edge now points toward v
        let plan = self.msg_plan(u, link);
        let locals = self.locals;
        self.msgs.par_iter_mut().enumerate().for_each(|(si, msgs)| {
            msgs[link] = plan.eval(&locals[si], msgs);
        });
        Ok(batch_loss)
    }
}

struct MsgPlan {
    /// Node tensor permuted to `[plain axes.., mat axis?, via, label?]`.
    permuted: DenseTensor,
    plain_dims: Vec<usize>,
    plain_sources: Vec<Source>,
    mat: Option<(LinkId, usize)>,
    via_dim: usize,
    own_label: bool,
    n_classes: usize,
}

impl MsgPlan {
    fn eval(&self, locals: &[[f64; 2]], msgs: &[Msg]) -> Msg {
        let vecs: Vec<&[f64]> = self
            .plain_sources
            .iter()
            .map(|src| match *src {
                Source::Leaf(i) => &locals[i][..],
                Source::Edge(l) => &msgs[l].data[..],
            })
            .collect();
        let rem = fold_front(self.permuted.data(), &self.plain_dims, &vecs);
        match self.mat {
            Some((l, bd)) => {
                // rem: [bond, via]; incoming matrix: [bond, C]
                let m = &msgs[l].data;
                debug_assert!(msgs[l].has_label);
                let c = self.n_classes;
                let mut out = vec![0.0; self.via_dim * c];
                for b in 0..bd {
                    for t in 0..self.via_dim {
                        let rv = rem[b * self.via_dim + t];
                        if rv == 0.0 {
                            continue;
                        }
                        for cc in 0..c {
                            out[t * c + cc] += rv * m[b * c + cc];
                        }
                    }
                }
                Msg { data: out, has_label: true }
            }
            None => Msg {
                data: rem,
                has_label: self.own_label,
            },
        }
    }
}

/// Contract vector `factors` against the leading axes of `data` (shape given
/// by `dims` for those axes), front to back, in place after the first fold.
fn fold_front(data: &[f64], dims: &[usize], factors: &[&[f64]]) -> Vec<f64> {
    if factors.is_empty() {
        return data.to_vec();
    }
    let d0 = dims[0];
    let mut rest = data.len() / d0;
    let mut cur = vec![0.0f64; rest];
    for (j, &fj) in factors[0].iter().enumerate() {
        if fj == 0.0 {
            continue;
        }
        let block = &data[j * rest..(j + 1) * rest];
        for (c, b) in cur.iter_mut().zip(block) {
            *c += fj * b;
        }
    }
    for (i, f) in factors.iter().enumerate().skip(1) {
        let d = dims[i];
        let new_rest = rest / d;
        for k in 0..new_rest {
            cur[k] *= f[0];
        }
        for (j, &fj) in f.iter().enumerate().skip(1) {
            if fj == 0.0 {
                continue;
            }
            let off = j * new_rest;
            for k in 0..new_rest {
                let v = cur[off + k];
                cur[k] += fj * v;
            }
        }
        rest = new_rest;
    }
    cur.truncate(rest);
    cur
}

/// `out += scale * (factors[0] x factors[1] x ...)`, row-major.
fn outer_acc(out: &mut [f64], factors: &[&[f64]], scale: f64) {
    match factors {
        [] => {}
        [last] => {
            for (o, &f) in out.iter_mut().zip(*last) {
                *o += scale * f;
            }
        }
        [first, rest @ ..] => {
            let block = out.len() / first.len();
            for (i, &f) in first.iter().enumerate() {
                if f == 0.0 {
                    continue;
                }
                outer_acc(&mut out[i * block..(i + 1) * block], rest, scale * f);
            }
        }
    }
}

/// Edge sequence of a depth-first Euler tour rooted at `root`: every edge
/// appears once descending and once ascending; the walk starts and ends at
/// the root.
fn euler_moves(
    net: &TensorNetwork,
    root: NodeId,
    parent_link: &[Option<LinkId>],
) -> Vec<(NodeId, NodeId, LinkId)> {
    let mut moves = Vec::new();
    fn dfs(
        net: &TensorNetwork,
        u: NodeId,
        parent: Option<NodeId>,
        parent_link: &[Option<LinkId>],
        moves: &mut Vec<(NodeId, NodeId, LinkId)>,
    ) {
        for (l, v) in net.neighbors(u) {
            if Some(v) == parent {
                continue;
            }
            debug_assert_eq!(parent_link[v], Some(l));
            moves.push((u, v, l));
            dfs(net, v, Some(u), parent_link, moves);
            moves.push((v, u, l));
        }
    }
    dfs(net, root, None, parent_link, &mut moves);
    moves
}

// ---------------------------------------------------------------------------
// merged-edge oracle: loss and gradient as explicit functions of the merged
// two-site tensor, computed by fresh subtree contractions (slow, exact; used
// by finite-difference checks)

pub struct MergedEdge {
    model: TNClassifier,
    u: NodeId,
    v: NodeId,
    ax_u: usize,
    ax_v: usize,
    merged: DenseTensor,
    ku: usize,
    ext: Vec<(LinkId, NodeId)>,
}

impl MergedEdge {
    pub fn new(model: &TNClassifier, link: LinkId) -> Result<Self, TrainError> {
        let net = &model.net;
        let l = net.link(link);
        let (u, v) = match l.endpoints {
            (crate::network::Endpoint::Node(a), crate::network::Endpoint::Node(b)) => (a, b),
            _ => return Err(TrainError::Network(NetworkError::OpenLink(link))),
        };
        let ax_u = net.axis_of_link(u, link)?;
        let ax_v = net.axis_of_link(v, link)?;
        let merged = contract(&net.node(u).tensor, &net.node(v).tensor, &[(ax_u, ax_v)])?;
        let mut ext = Vec::new();
        for &el in &net.node(u).links {
            if el != link {
                ext.push((el, u));
            }
        }
        let ku = ext.len();
        for &el in &net.node(v).links {
            if el != link {
                ext.push((el, v));
            }
        }
        Ok(MergedEdge {
            model: model.clone(),
            u,
            v,
            ax_u,
            ax_v,
            merged,
            ku,
            ext,
        })
    }

    pub fn merged(&self) -> &DenseTensor {
        &self.merged
    }

    /// Per-sample environment factors for each external axis of the merged
    /// tensor: a local 2-vector, a subtree message `[bond]`, a label-carrying
    /// message `[bond, C]`, or `None` for the merged tensor's own label axis.
    fn env(&self, locals: &[[f64; 2]], feat: &[usize]) -> Result<Vec<Option<DenseTensor>>, TrainError> {
        self.ext
            .iter()
            .map(|&(l, owner)| {
                let net = &self.model.net;
                if net.link(l).is_open() {
                    if feat[l] != usize::MAX {
                        Ok(Some(
                            DenseTensor::new(vec![2], locals[feat[l]].to_vec())
                                .expect("finite locals"),
                        ))
                    } else {
                        Ok(None)
                    }
                } else {
                    let w = net.link(l).other(owner).expect("internal");
                    Ok(Some(self.model.subtree_message(w, Some(owner), locals, feat)?))
                }
            })
            .collect()
    }

    fn scores(
        &self,
        m: &DenseTensor,
        env: &[Option<DenseTensor>],
    ) -> Result<Vec<f64>, TrainError> {
        let mut t = m.clone();
        let mut axes: Vec<usize> = (0..env.len()).collect();
        // vectors first, then the matrix (so its class axis lands last)
        for pass in 0..2 {
            let mut i = 0;
            while i < axes.len() {
                let orig = axes[i];
                match &env[orig] {
                    Some(f) if (pass == 0) == (f.rank() == 1) => {
                        t = contract(&t, f, &[(i, 0)])?;
                        axes.remove(i);
                    }
                    _ => i += 1,
                }
            }
        }
        debug_assert_eq!(t.rank(), 1);
        Ok(t.into_data())
    }

    /// Mean softmax-cross-entropy over the batch, as a function of a merged
    /// tensor candidate `m` with the rest of the network held fixed.
    pub fn batch_loss(
        &self,
        m: &DenseTensor,
        images: &[Vec<f64>],
        labels: &[u16],
    ) -> Result<f64, TrainError> {
        let feat = self.model.feature_of_link();
        let mut total = 0.0;
        for (img, &y) in images.iter().zip(labels) {
            let enc = encode_sample(img, &self.model.permutation)?;
            let env = self.env(&enc.locals, &feat)?;
            let s = self.scores(m, &env)?;
            total += loss(&s, usize::from(y));
        }
        Ok(total / labels.len() as f64)
    }

    /// Analytic gradient of [`batch_loss`](Self::batch_loss) with respect to
    /// the merged tensor.
    pub fn batch_gradient(
        &self,
        m: &DenseTensor,
        images: &[Vec<f64>],
        labels: &[u16],
    ) -> Result<DenseTensor, TrainError> {
        let feat = self.model.feature_of_link();
        let mut grad = DenseTensor::zeros(m.shape().to_vec());
        let inv_n = 1.0 / labels.len() as f64;
        for (img, &y) in images.iter().zip(labels) {
            let enc = encode_sample(img, &self.model.permutation)?;
            let env = self.env(&enc.locals, &feat)?;
            let s = self.scores(m, &env)?;
            let delta = loss_gradient(&s, usize::from(y));
            // outer product of per-axis gradient factors, in merged-axis order
            let mut g = DenseTensor::scalar(1.0);
            for f in &env {
                let factor = match f {
                    None => DenseTensor::new(vec![delta.len()], delta.clone())?,
                    Some(f) if f.rank() == 1 => f.clone(),
                    Some(f) => {
                        // label-carrying matrix [bond, C]: contract with delta
                        let d = DenseTensor::new(vec![delta.len()], delta.clone())?;
                        contract(f, &d, &[(1, 0)])?
                    }
                };
                g = contract(&g, &factor, &[])?;
            }
            for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += inv_n * b;
            }
        }
        Ok(grad)
    }

    /// Write a merged-tensor candidate back into a copy of the model,
    /// splitting at full rank (no truncation).
    pub fn unsplit(&self, m: &DenseTensor) -> Result<TNClassifier, TrainError> {
        let left: Vec<usize> = (0..self.ku).collect();
        let (big_u, s, vt) = svd_split(m, &left)?;
        let mut model = self.model.clone();
        let link = model.net.node(self.u).links[self.ax_u];
        let u_t = big_u.clone();
        model
            .net
            .set_tensor(self.u, move_axis(&u_t, u_t.rank() - 1, self.ax_u)?);
        let mut vt_s = vt.clone();
        let cols = vt_s.len() / s.len();
        for (row, &sv) in s.iter().enumerate() {
            for x in &mut vt_s.data_mut()[row * cols..(row + 1) * cols] {
                *x *= sv;
            }
        }
        model.net.set_tensor(self.v, move_axis(&vt_s, 0, self.ax_v)?);
        model.net.set_link_dim(link, s.len());
        model.net.set_center(self.v);
        Ok(model)
    }
}
