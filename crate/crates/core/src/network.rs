//! Loop-free tensor-network graphs (MPS chains, binary TTNs) with
//! canonical-form maintenance, per-link Schmidt spectra, controlled-error
//! truncation and a brute-force full-contraction oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{contract, frobenius_norm, qr_split, svd_split, DenseTensor, TensorError};

pub type NodeId = usize;
pub type LinkId = usize;

/// Entry-count cap for [`TensorNetwork::full_contract`]; it is a test oracle,
/// not a production path.
pub const FULL_CONTRACT_CAP: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown link id {0}")]
    UnknownLink(LinkId),
    #[error("link {0} is open; operation requires an internal link")]
    OpenLink(LinkId),
    #[error("truncation threshold must be nonnegative, got {0}")]
    NegativeEps(f64),
    #[error("label site {site} out of range for {n_sites} sites")]
    LabelSiteOutOfRange { site: usize, n_sites: usize },
    #[error("n_leaves must be a power of two >= 2, got {0}")]
    NotPowerOfTwo(usize),
    #[error("n_sites must be >= 2, got {0}")]
    TooFewSites(usize),
    #[error("full contraction would produce {0} entries, above the cap {FULL_CONTRACT_CAP}")]
    ContractionCapExceeded(usize),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One endpoint of a link: a node, or dangling (an uncontracted index).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Node(NodeId),
    Open,
}

/// A link of the network; internal links are shared by exactly two nodes.
#[derive(Clone, Debug)]
pub struct Link {
    pub endpoints: (Endpoint, Endpoint),
    pub dim: usize,
}

impl Link {
    pub fn is_open(&self) -> bool {
        matches!(self.endpoints, (_, Endpoint::Open) | (Endpoint::Open, _))
    }

    pub fn other(&self, node: NodeId) -> Option<NodeId> {
        match self.endpoints {
            (Endpoint::Node(a), Endpoint::Node(b)) if a == node => Some(b),
            (Endpoint::Node(a), Endpoint::Node(b)) if b == node => Some(a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub tensor: DenseTensor,
    /// One link id per tensor axis, in axis order.
    pub links: Vec<LinkId>,
}

/// Sorted nonnegative Schmidt coefficients of one link's bipartition.
#[derive(Clone, Debug)]
pub struct SchmidtSpectrum {
    pub link_id: LinkId,
    pub coefficients: Vec<f64>,
}

impl SchmidtSpectrum {
    /// Von Neumann entropy of the normalized squared coefficients, in nats.
    /// Squared values below `1e-15` are treated as exact zeros.
    pub fn entropy(&self) -> f64 {
        let total: f64 = self.coefficients.iter().map(|a| a * a).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut h = 0.0;
        for a in &self.coefficients {
            let p = a * a / total;
            if p >= 1e-15 {
                h -= p * p.ln();
            }
        }
        h.max(0.0)
    }
}

/// A loop-free network of dense tensors. Open links are ordered: `n` feature
/// links followed by one label link.
#[derive(Clone, Debug)]
pub struct TensorNetwork {
    pub(crate) nodes: Vec<Node>,
    pub(crate) links: Vec<Link>,
    pub(crate) open_links: Vec<LinkId>,
    pub(crate) center: Option<NodeId>,
}

impl TensorNetwork {
    pub fn new(
        nodes: Vec<Node>,
        links: Vec<Link>,
        open_links: Vec<LinkId>,
    ) -> Result<Self, NetworkError> {
        let net = Self {
            nodes,
            links,
            open_links,
            center: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn open_links(&self) -> &[LinkId] {
        &self.open_links
    }

    pub fn center(&self) -> Option<NodeId> {
        self.center
    }

    pub(crate) fn set_tensor(&mut self, id: NodeId, tensor: DenseTensor) {
        self.nodes[id].tensor = tensor;
    }

    pub(crate) fn set_link_dim(&mut self, id: LinkId, dim: usize) {
        self.links[id].dim = dim;
    }

    pub(crate) fn set_center(&mut self, id: NodeId) {
        self.center = Some(id);
    }

    /// Internal links in id order.
    pub fn internal_links(&self) -> Vec<LinkId> {
        (0..self.links.len())
            .filter(|&l| !self.links[l].is_open())
            .collect()
    }

    /// The node an open link is attached to, with the axis it occupies.
    pub fn open_link_attachment(&self, link: LinkId) -> Result<(NodeId, usize), NetworkError> {
        let l = self.links.get(link).ok_or(NetworkError::UnknownLink(link))?;
        let node = match l.endpoints {
            (Endpoint::Node(n), Endpoint::Open) | (Endpoint::Open, Endpoint::Node(n)) => n,
            _ => return Err(NetworkError::Invalid(format!("link {link} is internal"))),
        };
        let axis = self.axis_of_link(node, link)?;
        Ok((node, axis))
    }

    pub fn axis_of_link(&self, node: NodeId, link: LinkId) -> Result<usize, NetworkError> {
        self.nodes
            .get(node)
            .ok_or(NetworkError::UnknownNode(node))?
            .links
            .iter()
            .position(|&l| l == link)
            .ok_or_else(|| {
                NetworkError::Invalid(format!("link {link} not attached to node {node}"))
            })
    }

    /// Internal neighbors of a node as `(link, other node)` pairs, in axis order.
    pub fn neighbors(&self, node: NodeId) -> Vec<(LinkId, NodeId)> {
        self.nodes[node]
            .links
            .iter()
            .filter_map(|&l| self.links[l].other(node).map(|v| (l, v)))
            .collect()
    }

    /// Total entry count over all node tensors.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.tensor.len()).sum()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let mut link_uses: Vec<Vec<(NodeId, usize)>> = vec![Vec::new(); self.links.len()];
        for (nid, node) in self.nodes.iter().enumerate() {
            if node.links.len() != node.tensor.rank() {
                return Err(NetworkError::Invalid(format!(
                    "node {nid}: {} links for rank-{} tensor",
                    node.links.len(),
                    node.tensor.rank()
                )));
            }
            for (ax, &l) in node.links.iter().enumerate() {
                let link = self.links.get(l).ok_or(NetworkError::UnknownLink(l))?;
                if node.tensor.shape()[ax] != link.dim {
                    return Err(NetworkError::Invalid(format!(
                        "node {nid} axis {ax}: dim {} but link {l} has dim {}",
                        node.tensor.shape()[ax],
                        link.dim
                    )));
                }
                link_uses[l].push((nid, ax));
            }
        }
        let mut n_internal = 0;
        for (lid, link) in self.links.iter().enumerate() {
            if link.dim == 0 {
                return Err(NetworkError::Invalid(format!("link {lid} has dim 0")));
            }
            match link.endpoints {
                (Endpoint::Node(a), Endpoint::Node(b)) => {
                    n_internal += 1;
                    let mut got: Vec<NodeId> = link_uses[lid].iter().map(|&(n, _)| n).collect();
                    got.sort_unstable();
                    let mut want = vec![a.min(b), a.max(b)];
                    want.sort_unstable();
                    if got != want {
                        return Err(NetworkError::Invalid(format!(
                            "internal link {lid} must be shared by exactly its two endpoint nodes"
                        )));
                    }
                }
                (Endpoint::Node(n), Endpoint::Open) | (Endpoint::Open, Endpoint::Node(n)) => {
                    if link_uses[lid].len() != 1 || link_uses[lid][0].0 != n {
                        return Err(NetworkError::Invalid(format!(
                            "open link {lid} must be attached to exactly node {n}"
                        )));
                    }
                }
                (Endpoint::Open, Endpoint::Open) => {
                    return Err(NetworkError::Invalid(format!(
                        "link {lid} has two open endpoints"
                    )));
                }
            }
        }
        for &l in &self.open_links {
            if l >= self.links.len() {
                return Err(NetworkError::UnknownLink(l));
            }
            if !self.links[l].is_open() {
                return Err(NetworkError::Invalid(format!(
                    "open_links entry {l} is an internal link"
                )));
            }
        }
        // connected and acyclic: |internal links| = |nodes| - 1 and all reachable
        if !self.nodes.is_empty() {
            if n_internal != self.nodes.len() - 1 {
                return Err(NetworkError::Invalid(format!(
                    "{} internal links for {} nodes; tree requires n-1",
                    n_internal,
                    self.nodes.len()
                )));
            }
            let mut seen = vec![false; self.nodes.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for (_, v) in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            if seen.iter().any(|&s| !s) {
                return Err(NetworkError::Invalid("graph is not connected".into()));
            }
        }
        Ok(())
    }

    /// Move the orthogonality center to `new_center`; all other nodes become
    /// isometric toward it. Gauge-invariant: the fully contracted tensor is
    /// unchanged.
    pub fn canonicalize(&self, new_center: NodeId) -> Result<Self, NetworkError> {
        let mut net = self.clone();
        net.canonicalize_mut(new_center)?;
        Ok(net)
    }

    pub(crate) fn canonicalize_mut(&mut self, new_center: NodeId) -> Result<(), NetworkError> {
        if new_center >= self.nodes.len() {
            return Err(NetworkError::UnknownNode(new_center));
        }
        let moves: Vec<(NodeId, NodeId)> = match self.center {
            Some(c) if c == new_center => Vec::new(),
            // already canonical somewhere: re-gauge along the path only
            Some(c) => self.path_edges(c, new_center),
            None => {
                let (order, parent) = self.bfs_from(new_center);
                order
                    .into_iter()
                    .rev()
                    .filter(|&u| u != new_center)
                    .map(|u| (u, parent[u].unwrap()))
                    .collect()
            }
        };
        for (u, p) in moves {
            self.push_gauge(u, p)?;
        }
        self.center = Some(new_center);
        Ok(())
    }

    /// QR-split node `u` and absorb the non-isometric factor into neighbor `p`.
    pub(crate) fn push_gauge(&mut self, u: NodeId, p: NodeId) -> Result<(), NetworkError> {
        let link = self
            .neighbors(u)
            .into_iter()
            .find(|&(_, v)| v == p)
            .map(|(l, _)| l)
            .ok_or_else(|| NetworkError::Invalid(format!("nodes {u} and {p} are not adjacent")))?;
        let ax_u = self.axis_of_link(u, link)?;
        let left: Vec<usize> = (0..self.nodes[u].tensor.rank()).filter(|&a| a != ax_u).collect();
        let (q, r) = qr_split(&self.nodes[u].tensor, &left)?;
        let new_dim = *q.shape().last().unwrap();
        self.nodes[u].tensor = move_axis(&q, q.rank() - 1, ax_u)?;
        let ax_p = self.axis_of_link(p, link)?;
        let absorbed = contract(&r, &self.nodes[p].tensor, &[(1, ax_p)])?;
        self.nodes[p].tensor = move_axis(&absorbed, 0, ax_p)?;
        self.links[link].dim = new_dim;
        Ok(())
    }

    fn bfs_from(&self, root: NodeId) -> (Vec<NodeId>, Vec<Option<NodeId>>) {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut parent = vec![None; self.nodes.len()];
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(root);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for (_, v) in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        (order, parent)
    }

    /// Edges along the unique path from `a` to `b`, as (from, to) pairs.
    pub(crate) fn path_edges(&self, a: NodeId, b: NodeId) -> Vec<(NodeId, NodeId)> {
        let (_, parent) = self.bfs_from(b);
        let mut edges = Vec::new();
        let mut u = a;
        while u != b {
            let p = parent[u].expect("connected tree");
            edges.push((u, p));
            u = p;
        }
        edges
    }

    /// Frobenius norm of the fully contracted tensor, computed locally.
    pub fn norm(&self) -> f64 {
        match self.center {
            Some(c) => frobenius_norm(&self.nodes[c].tensor),
            None => {
                let mut net = self.clone();
                net.canonicalize_mut(0).expect("valid network");
                frobenius_norm(&net.nodes[net.center.unwrap()].tensor)
            }
        }
    }

    /// Scaled copy with unit Frobenius norm, canonical at its previous center
    /// (or node 0).
    pub fn normalized(&self) -> Self {
        let mut net = self.clone();
        let c = net.center.unwrap_or(0);
        net.canonicalize_mut(c).expect("valid network");
        let n = frobenius_norm(&net.nodes[c].tensor);
        if n > 0.0 {
            net.nodes[c].tensor = net.nodes[c].tensor.scaled(1.0 / n);
        }
        net
    }

    /// Schmidt coefficients of the bipartition cut by an internal link:
    /// canonicalize so the center is an endpoint, then one local SVD.
    pub fn schmidt_spectrum(&self, link_id: LinkId) -> Result<SchmidtSpectrum, NetworkError> {
        let link = self
            .links
            .get(link_id)
            .ok_or(NetworkError::UnknownLink(link_id))?;
        let u = match link.endpoints {
            (Endpoint::Node(a), Endpoint::Node(_)) => a,
            _ => return Err(NetworkError::OpenLink(link_id)),
        };
        let mut net = self.clone();
        net.canonicalize_mut(u)?;
        let ax = net.axis_of_link(u, link_id)?;
        let left: Vec<usize> = (0..net.nodes[u].tensor.rank()).filter(|&a| a != ax).collect();
        let (_, s, _) = svd_split(&net.nodes[u].tensor, &left)?;
        Ok(SchmidtSpectrum {
            link_id,
            coefficients: s,
        })
    }

    /// Discard the smallest Schmidt coefficients of `link_id` whose squared
    /// sum stays within `eps`, then cap the dimension at `max_dim` if given.
    pub fn truncate_link(
        &self,
        link_id: LinkId,
        eps: f64,
        max_dim: Option<usize>,
    ) -> Result<Self, NetworkError> {
        self.truncate_link_detailed(link_id, eps, max_dim)
            .map(|(net, _, _)| net)
    }

    /// As [`truncate_link`](Self::truncate_link), also returning the discarded
    /// squared weight and the new bond dimension.
    pub fn truncate_link_detailed(
        &self,
        link_id: LinkId,
        eps: f64,
        max_dim: Option<usize>,
    ) -> Result<(Self, f64, usize), NetworkError> {
        if eps < 0.0 {
            return Err(NetworkError::NegativeEps(eps));
        }
        let link = self
            .links
            .get(link_id)
            .ok_or(NetworkError::UnknownLink(link_id))?;
        let (u, w) = match link.endpoints {
            (Endpoint::Node(a), Endpoint::Node(b)) => (a, b),
            _ => return Err(NetworkError::OpenLink(link_id)),
        };
        let mut net = self.clone();
        // keep the existing center if it is already an endpoint
        let (u, w) = if net.center == Some(w) { (w, u) } else { (u, w) };
        net.canonicalize_mut(u)?;
        let ax_u = net.axis_of_link(u, link_id)?;
        let left: Vec<usize> = (0..net.nodes[u].tensor.rank()).filter(|&a| a != ax_u).collect();
        let (big_u, s, vt) = svd_split(&net.nodes[u].tensor, &left)?;
        let r = s.len();
        let mut discard = 0usize;
        let mut discarded_weight = 0.0;
        while discard < r - 1 {
            let a2 = s[r - 1 - discard] * s[r - 1 - discard];
            if discarded_weight + a2 <= eps {
                discarded_weight += a2;
                discard += 1;
            } else {
                break;
            }
        }
        let mut keep = r - discard;
        if let Some(cap) = max_dim {
            let cap = cap.max(1);
            if cap < keep {
                for i in cap..keep {
                    discarded_weight += s[i] * s[i];
                }
                keep = cap;
            }
        }
        // u keeps U * diag(s); w absorbs the truncated V
        let mut us = truncate_last_axis(&big_u, keep);
        let cols = keep;
        let rows = us.len() / cols;
        for row in 0..rows {
            for col in 0..cols {
                us.data_mut()[row * cols + col] *= s[col];
            }
        }
        net.nodes[u].tensor = move_axis(&us, us.rank() - 1, ax_u)?;
        let vt_trunc = truncate_first_axis(&vt, keep);
        let ax_w = net.axis_of_link(w, link_id)?;
        let absorbed = contract(&vt_trunc, &net.nodes[w].tensor, &[(1, ax_w)])?;
        net.nodes[w].tensor = move_axis(&absorbed, 0, ax_w)?;
        net.links[link_id].dim = keep;
        net.center = Some(u);
        Ok((net, discarded_weight, keep))
    }

    /// Contract the whole network into a single tensor over the open links,
    /// in `open_links` order. Test oracle; capped at [`FULL_CONTRACT_CAP`].
    pub fn full_contract(&self) -> Result<DenseTensor, NetworkError> {
        let open_prod: usize = self
            .open_links
            .iter()
            .map(|&l| self.links[l].dim)
            .try_fold(1usize, |acc, d| acc.checked_mul(d))
            .ok_or(NetworkError::ContractionCapExceeded(usize::MAX))?;
        if open_prod > FULL_CONTRACT_CAP {
            return Err(NetworkError::ContractionCapExceeded(open_prod));
        }
        let (t, axis_links) = self.contract_subtree(0, None)?;
        // permute axes into open-link order
        let perm: Vec<usize> = self
            .open_links
            .iter()
            .map(|&l| {
                axis_links
                    .iter()
                    .position(|&al| al == l)
                    .expect("every open link appears in the contraction result")
            })
            .collect();
        Ok(t.permute(&perm)?)
    }

    fn contract_subtree(
        &self,
        u: NodeId,
        parent: Option<NodeId>,
    ) -> Result<(DenseTensor, Vec<LinkId>), NetworkError> {
        let mut t = self.nodes[u].tensor.clone();
        let mut axis_links = self.nodes[u].links.clone();
        for (l, v) in self.neighbors(u) {
            if Some(v) == parent {
                continue;
            }
            if !axis_links.contains(&l) {
                continue; // already contracted (defensive; trees have one link per neighbor)
            }
            let (ct, clinks) = self.contract_subtree(v, Some(u))?;
            let ax_t = axis_links.iter().position(|&al| al == l).unwrap();
            let ax_c = clinks.iter().position(|&al| al == l).unwrap();
            t = contract(&t, &ct, &[(ax_t, ax_c)])?;
            let mut new_links: Vec<LinkId> = axis_links
                .iter()
                .enumerate()
                .filter(|&(ax, _)| ax != ax_t)
                .map(|(_, &al)| al)
                .collect();
            new_links.extend(
                clinks
                    .iter()
                    .enumerate()
                    .filter(|&(ax, _)| ax != ax_c)
                    .map(|(_, &al)| al),
            );
            axis_links = new_links;
        }
        Ok((t, axis_links))
    }
}

/// Copy of `t` with axis `src` moved to position `dst`.
pub(crate) fn move_axis(t: &DenseTensor, src: usize, dst: usize) -> Result<DenseTensor, TensorError> {
    let r = t.rank();
    let mut perm: Vec<usize> = (0..r).filter(|&a| a != src).collect();
    perm.insert(dst, src);
    t.permute(&perm)
}

pub(crate) fn truncate_last_axis(t: &DenseTensor, keep: usize) -> DenseTensor {
    let shape = t.shape().to_vec();
    let last = *shape.last().unwrap();
    debug_assert!(keep <= last);
    let rows = t.len() / last;
    let mut data = Vec::with_capacity(rows * keep);
    for row in 0..rows {
        data.extend_from_slice(&t.data()[row * last..row * last + keep]);
    }
    let mut new_shape = shape;
    *new_shape.last_mut().unwrap() = keep;
    DenseTensor::new(new_shape, data).expect("consistent slice")
}

pub(crate) fn truncate_first_axis(t: &DenseTensor, keep: usize) -> DenseTensor {
    let shape = t.shape().to_vec();
    let first = shape[0];
    debug_assert!(keep <= first);
    let cols = t.len() / first;
    let data = t.data()[..keep * cols].to_vec();
    let mut new_shape = shape;
    new_shape[0] = keep;
    DenseTensor::new(new_shape, data).expect("consistent slice")
}

fn capped_product(dims: impl IntoIterator<Item = usize>, cap: usize) -> usize {
    let mut acc = 1usize;
    for d in dims {
        acc = acc.saturating_mul(d);
        if acc >= cap {
            return cap;
        }
    }
    acc
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    DenseTensor::new(shape, data).expect("finite normals")
}

/// Build a linear-chain MPS with one open site link per node, an extra open
/// label link at `label_site`, and bond dimensions clamped to the exact
/// full-rank bound of each cut. Tensors are filled with seeded Gaussian
/// entries; structured initialization lives in the trainer.
pub fn build_mps(
    n_sites: usize,
    site_dims: &[usize],
    bond_dim: usize,
    label_dim: usize,
    label_site: usize,
    init_seed: u64,
) -> Result<TensorNetwork, NetworkError> {
    if n_sites < 2 {
        return Err(NetworkError::TooFewSites(n_sites));
    }
    if label_site >= n_sites {
        return Err(NetworkError::LabelSiteOutOfRange {
            site: label_site,
            n_sites,
        });
    }
    assert_eq!(site_dims.len(), n_sites, "one site dim per site");
    let bond_dim = bond_dim.max(1);
    let cap = FULL_CONTRACT_CAP.max(bond_dim) + 1;

    // exact full-rank bound at the cut between sites i and i+1
    let mut bond = Vec::with_capacity(n_sites - 1);
    for i in 0..n_sites - 1 {
        let left = capped_product(
            site_dims[..=i]
                .iter()
                .copied()
                .chain((label_site <= i).then_some(label_dim)),
            cap,
        );
        let right = capped_product(
            site_dims[i + 1..]
                .iter()
                .copied()
                .chain((label_site > i).then_some(label_dim)),
            cap,
        );
        bond.push(bond_dim.min(left).min(right));
    }

    let mut links: Vec<Link> = Vec::new();
    for (i, &d) in site_dims.iter().enumerate() {
        links.push(Link {
            endpoints: (Endpoint::Node(i), Endpoint::Open),
            dim: d,
        });
    }
    let label_link = links.len();
    links.push(Link {
        endpoints: (Endpoint::Node(label_site), Endpoint::Open),
        dim: label_dim,
    });
    let first_bond = links.len();
    for (i, &b) in bond.iter().enumerate() {
        links.push(Link {
            endpoints: (Endpoint::Node(i), Endpoint::Node(i + 1)),
            dim: b,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut nodes = Vec::with_capacity(n_sites);
    for i in 0..n_sites {
        let mut node_links = Vec::new();
        if i > 0 {
            node_links.push(first_bond + i - 1);
        }
        node_links.push(i);
        if i == label_site {
            node_links.push(label_link);
        }
        if i + 1 < n_sites {
            node_links.push(first_bond + i);
        }
        let shape: Vec<usize> = node_links.iter().map(|&l| links[l].dim).collect();
        nodes.push(Node {
            tensor: random_tensor(&mut rng, shape),
            links: node_links,
        });
    }

    let mut open_links: Vec<LinkId> = (0..n_sites).collect();
    open_links.push(label_link);
    TensorNetwork::new(nodes, links, open_links)
}

/// Build a perfect binary TTN over `n_leaves` features. Bottom-layer nodes
/// absorb adjacent feature pairs; the root carries the open label link. Bond
/// dimensions are clamped to the cut-rank bound.
pub fn build_ttn(
    n_leaves: usize,
    leaf_dim: usize,
    bond_dim: usize,
    label_dim: usize,
    init_seed: u64,
) -> Result<TensorNetwork, NetworkError> {
    if n_leaves < 2 || !n_leaves.is_power_of_two() {
        return Err(NetworkError::NotPowerOfTwo(n_leaves));
    }
    let bond_dim = bond_dim.max(1);
    let cap = FULL_CONTRACT_CAP.max(bond_dim) + 1;
    let cut_bound = |n_below: usize| -> usize {
        let below = capped_product(std::iter::repeat(leaf_dim).take(n_below), cap);
        let above = capped_product(
            std::iter::repeat(leaf_dim)
                .take(n_leaves - n_below)
                .chain(std::iter::once(label_dim)),
            cap,
        );
        bond_dim.min(below).min(above)
    };

    let mut links: Vec<Link> = (0..n_leaves)
        .map(|_| Link {
            endpoints: (Endpoint::Open, Endpoint::Open), // patched below
            dim: leaf_dim,
        })
        .collect();
    let label_link = links.len();
    links.push(Link {
        endpoints: (Endpoint::Open, Endpoint::Open),
        dim: label_dim,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut nodes: Vec<Node> = Vec::new();

    if n_leaves == 2 {
        links[0].endpoints = (Endpoint::Node(0), Endpoint::Open);
        links[1].endpoints = (Endpoint::Node(0), Endpoint::Open);
        links[label_link].endpoints = (Endpoint::Node(0), Endpoint::Open);
        let shape = vec![leaf_dim, leaf_dim, label_dim];
        nodes.push(Node {
            tensor: random_tensor(&mut rng, shape),
            links: vec![0, 1, label_link],
        });
        let mut open_links: Vec<LinkId> = (0..n_leaves).collect();
        open_links.push(label_link);
        return TensorNetwork::new(nodes, links, open_links);
    }

    // layer 0: bottom nodes over feature pairs; build upward, root last
    let mut pending: Vec<(NodeId, usize)> = Vec::new(); // (node, leaves below), parent link added later
    for i in 0..n_leaves / 2 {
        let nid = nodes.len();
        links[2 * i].endpoints = (Endpoint::Node(nid), Endpoint::Open);
        links[2 * i + 1].endpoints = (Endpoint::Node(nid), Endpoint::Open);
        nodes.push(Node {
            tensor: DenseTensor::zeros(vec![]), // shaped once the parent link exists
            links: vec![2 * i, 2 * i + 1],
        });
        pending.push((nid, 2));
    }
    while pending.len() > 1 {
        let mut next = Vec::with_capacity(pending.len() / 2);
        for pair in pending.chunks(2) {
            let (lc, l_below) = pair[0];
            let (rc, r_below) = pair[1];
            let nid = nodes.len();
            let ll = links.len();
            links.push(Link {
                endpoints: (Endpoint::Node(lc), Endpoint::Node(nid)),
                dim: cut_bound(l_below),
            });
            let rl = links.len();
            links.push(Link {
                endpoints: (Endpoint::Node(rc), Endpoint::Node(nid)),
                dim: cut_bound(r_below),
            });
            nodes[lc].links.push(ll);
            nodes[rc].links.push(rl);
            nodes.push(Node {
                tensor: DenseTensor::zeros(vec![]),
                links: vec![ll, rl],
            });
            next.push((nid, l_below + r_below));
        }
        pending = next;
    }
    let root = pending[0].0;
    links[label_link].endpoints = (Endpoint::Node(root), Endpoint::Open);
    nodes[root].links.push(label_link);

    for node in nodes.iter_mut() {
        let shape: Vec<usize> = node.links.iter().map(|&l| links[l].dim).collect();
        node.tensor = random_tensor(&mut rng, shape);
    }
    let mut open_links: Vec<LinkId> = (0..n_leaves).collect();
    open_links.push(label_link);
    TensorNetwork::new(nodes, links, open_links)
}

/// The node carrying the open label link (the last open link).
pub fn label_node(net: &TensorNetwork) -> NodeId {
    let label_link = *net.open_links().last().expect("label link present");
    net.open_link_attachment(label_link)
        .expect("label link attached")
        .0
}
