//! Model diagnostics: per-feature entanglement entropies (data-free), their
//! arrangement as an image-shaped map, and whole-model compression by
//! per-link Schmidt truncation with discarded-weight accounting.

use thiserror::Error;

use crate::classifier::{ClassifierError, TNClassifier};
use crate::encoding::Dataset;
use crate::network::{label_node, LinkId, NetworkError, SchmidtSpectrum};
use crate::tensor::svd_split;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("feature index {index} out of range for {n_features} features")]
    FeatureOutOfRange { index: usize, n_features: usize },
    #[error("eps list must be non-empty and sorted increasing")]
    BadEpsList,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Per-pixel feature entropies in image layout (`values[row * width + col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Short description of the analyzed model.
    pub model_ref: String,
}

impl EntropyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Pixel index and value of the largest entry (lowest index on ties).
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best, self.values[best])
    }
}

#[derive(Clone, Debug)]
pub struct CompressionReport {
    pub eps: f64,
    pub params_before: usize,
    pub params_after: usize,
    /// `params_after / params_before`.
    pub ratio: f64,
    /// Filled by [`compression_sweep`]; [`compress`] alone sees no data.
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    /// Discarded squared Schmidt weight per truncated link, in visit order.
    pub discarded_weights: Vec<(LinkId, f64)>,
}

/// Entanglement entropy (nats) of the bipartition separating feature `k`'s
/// leaf from everything else (all other features plus the label axis).
/// Normalizes internally, so the result is scale-invariant.
pub fn feature_entropy(model: &TNClassifier, k: usize) -> Result<f64, AnalysisError> {
    let n = model.n_features();
    if k >= n {
        return Err(AnalysisError::FeatureOutOfRange {
            index: k,
            n_features: n,
        });
    }
    let mut net = model.net.normalized();
    let link = net.open_links()[k];
    leaf_entropy(&mut net, link)
}

/// Entropy of the single open leaf link `link` in a unit-norm network whose
/// center may be anywhere. Moves the center to the leaf's attachment node and
/// takes one local SVD; everything behind the isometries cancels.
fn leaf_entropy(
    net: &mut crate::network::TensorNetwork,
    link: LinkId,
) -> Result<f64, AnalysisError> {
    let (node, axis) = net.open_link_attachment(link)?;
    net.canonicalize_mut(node)?;
    let (_, s, _) = svd_split(&net.node(node).tensor, &[axis]).map_err(NetworkError::from)?;
    Ok(SchmidtSpectrum {
        link_id: link,
        coefficients: s,
    }
    .entropy())
}

/// Feature entropies of every pixel, arranged in image layout. Computed from
/// the model alone; no data is involved. A single working copy is
/// re-canonicalized incrementally, so the whole map costs one gauge pass.
pub fn entropy_map(model: &TNClassifier) -> Result<EntropyMap, AnalysisError> {
    let n = model.n_features();
    let mut net = model.net.normalized();
    let mut values = vec![0.0; n];
    for leaf in 0..n {
        let link = net.open_links()[leaf];
        values[model.permutation[leaf]] = leaf_entropy(&mut net, link)?;
    }
    Ok(EntropyMap {
        height: model.height,
        width: model.width,
        values,
        model_ref: format!(
            "{:?} {}x{} ({} classes)",
            model.topology, model.height, model.width, model.n_classes
        ),
    })
}

/// Internal links ordered from the label node outward (parents before
/// children).
fn root_to_leaves_links(model: &TNClassifier) -> Vec<LinkId> {
    let net = &model.net;
    let root = label_node(net);
    let mut order = Vec::new();
    let mut seen = vec![false; net.n_nodes()];
    let mut queue = std::collections::VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        for (l, v) in net.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                order.push(l);
                queue.push_back(v);
            }
        }
    }
    order
}

/// Truncate every internal link once, in root-to-leaves order, each with an
/// independent discarded-weight budget of `eps`. The model is normalized
/// first; the center is re-gauged before each cut so every spectrum is exact
/// for the partially compressed network. The total squared distortion is at
/// most `eps` times the number of links.
pub fn compress(
    model: &TNClassifier,
    eps: f64,
) -> Result<(TNClassifier, CompressionReport), AnalysisError> {
    compress_with_order(model, eps, &root_to_leaves_links(model))
}

fn compress_with_order(
    model: &TNClassifier,
    eps: f64,
    links: &[LinkId],
) -> Result<(TNClassifier, CompressionReport), AnalysisError> {
    let mut net = model.net.normalized();
    let params_before = net.param_count();
    let mut discarded_weights = Vec::with_capacity(links.len());
    for &l in links {
        let (next, w, _) = net.truncate_link_detailed(l, eps, None)?;
        net = next;
        discarded_weights.push((l, w));
    }
    let params_after = net.param_count();
    let compressed = TNClassifier {
        net,
        permutation: model.permutation.clone(),
        n_classes: model.n_classes,
        height: model.height,
        width: model.width,
        topology: model.topology,
    };
    let report = CompressionReport {
        eps,
        params_before,
        params_after,
        ratio: params_after as f64 / params_before as f64,
        accuracy_before: None,
        accuracy_after: None,
        discarded_weights,
    };
    Ok((compressed, report))
}

/// Compress the original model once per threshold (not cumulatively) and
/// evaluate each result on `test_ds`. `eps_list` must be non-empty and
/// sorted increasing.
pub fn compression_sweep(
    model: &TNClassifier,
    eps_list: &[f64],
    test_ds: &Dataset,
) -> Result<Vec<CompressionReport>, AnalysisError> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(AnalysisError::BadEpsList);
    }
    let accuracy_before = model.evaluate(test_ds)?.accuracy;
    eps_list
        .iter()
        .map(|&eps| {
            let (compressed, mut report) = compress(model, eps)?;
            report.accuracy_before = Some(accuracy_before);
            report.accuracy_after = Some(compressed.evaluate(test_ds)?.accuracy);
            Ok(report)
        })
        .collect()
}
