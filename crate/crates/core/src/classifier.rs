//! The decision function: evaluating a tensor-network weight model against
//! encoded product-state samples, class prediction, and dataset accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{encode_sample, DataError, Dataset, EncodedSample};
use crate::network::{label_node, LinkId, NetworkError, NodeId, TensorNetwork};
use crate::tensor::{contract, DenseTensor};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("sample has {got} features, model expects {want}")]
    FeatureCountMismatch { got: usize, want: usize },
    #[error("sample was encoded with a different leaf permutation")]
    PermutationMismatch,
    #[error("dataset has {got} classes, model expects {want}")]
    ClassCountMismatch { got: usize, want: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Mps,
    Ttn,
}

/// A tensor-network classifier: a loop-free network whose open links are the
/// feature links (in leaf order) followed by one label link.
#[derive(Clone, Debug)]
pub struct TNClassifier {
    pub net: TensorNetwork,
    /// `permutation[leaf] = pixel index`, fixed at training time.
    pub permutation: Vec<usize>,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub topology: Topology,
}

impl TNClassifier {
    pub fn n_features(&self) -> usize {
        self.permutation.len()
    }

    /// Map link id to feature index for the open feature links.
    pub(crate) fn feature_of_link(&self) -> Vec<usize> {
        let mut feat = vec![usize::MAX; self.net.links().len()];
        let nf = self.n_features();
        for (i, &l) in self.net.open_links()[..nf].iter().enumerate() {
            feat[l] = i;
        }
        feat
    }

    /// Score vector over classes: the network contracted with the sample's
    /// product state, absorbing each local vector into its leaf and passing
    /// messages toward the label node. Never materializes the full weight
    /// tensor.
    pub fn forward(&self, sample: &EncodedSample) -> Result<Vec<f64>, ClassifierError> {
        if sample.locals.len() != self.n_features() {
            return Err(ClassifierError::FeatureCountMismatch {
                got: sample.locals.len(),
                want: self.n_features(),
            });
        }
        if sample.permutation != self.permutation {
            return Err(ClassifierError::PermutationMismatch);
        }
        let feat = self.feature_of_link();
        let root = label_node(&self.net);
        let t = self.subtree_message(root, None, &sample.locals, &feat)?;
        debug_assert_eq!(t.rank(), 1);
        Ok(t.data().to_vec())
    }

    pub(crate) fn subtree_message(
        &self,
        u: NodeId,
        parent: Option<NodeId>,
        locals: &[[f64; 2]],
        feat: &[usize],
    ) -> Result<DenseTensor, ClassifierError> {
        let net = &self.net;
        let mut t = net.node(u).tensor.clone();
        let mut links: Vec<LinkId> = net.node(u).links.clone();
        let mut ax = 0;
        while ax < links.len() {
            let l = links[ax];
            if net.link(l).is_open() {
                if feat[l] != usize::MAX {
                    let v = DenseTensor::new(vec![2], locals[feat[l]].to_vec())
                        .expect("locals finite");
                    t = contract(&t, &v, &[(ax, 0)]).map_err(NetworkError::from)?;
                    links.remove(ax);
                } else {
                    ax += 1; // label axis stays free
                }
            } else {
                let other = net.link(l).other(u).expect("internal link");
                if Some(other) == parent {
                    ax += 1;
                    continue;
                }
                let m = self.subtree_message(other, Some(u), locals, feat)?;
                t = contract(&t, &m, &[(ax, 0)]).map_err(NetworkError::from)?;
                links.remove(ax);
            }
        }
        Ok(t)
    }

    /// Argmax class; exact ties break toward the smallest index.
    pub fn predict(&self, sample: &EncodedSample) -> Result<usize, ClassifierError> {
        let scores = self.forward(sample)?;
        Ok(argmax(&scores))
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<(), ClassifierError> {
        if ds.n_features() != self.n_features() {
            return Err(ClassifierError::FeatureCountMismatch {
                got: ds.n_features(),
                want: self.n_features(),
            });
        }
        if ds.n_classes != self.n_classes {
            return Err(ClassifierError::ClassCountMismatch {
                got: ds.n_classes,
                want: self.n_classes,
            });
        }
        if ds.is_empty() {
            return Err(ClassifierError::EmptyDataset);
        }
        Ok(())
    }

    /// Accuracy and confusion matrix over a dataset; per-sample work fans out
    /// in parallel, counts reduce in fixed sample order.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation, ClassifierError> {
        self.check_dataset(ds)?;
        let preds: Vec<Result<usize, ClassifierError>> = ds
            .images
            .par_iter()
            .map(|img| {
                let enc = encode_sample(img, &self.permutation)?;
                self.predict(&enc)
            })
            .collect();
        let mut confusion = vec![vec![0usize; self.n_classes]; self.n_classes];
        for (pred, &label) in preds.into_iter().zip(&ds.labels) {
            confusion[usize::from(label)][pred?] += 1;
        }
        let correct: usize = (0..self.n_classes).map(|c| confusion[c][c]).sum();
        Ok(Evaluation {
            accuracy: correct as f64 / ds.len() as f64,
            confusion,
            n_samples: ds.len(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true_class][predicted_class]`; rows sum to class counts.
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
