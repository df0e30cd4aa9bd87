//! Versioned binary model files ("TNMW") with bit-exact round trips, plus a
//! JSON sidecar convention for run provenance. Writes are atomic (temp file
//! + rename), so readers never observe partial files.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::classifier::{TNClassifier, Topology};
use crate::network::{Endpoint, Link, NetworkError, Node, TensorNetwork};
use crate::tensor::{DenseTensor, TensorError};

const MODEL_MAGIC: [u8; 4] = *b"TNMW";
const MODEL_VERSION: u16 = 1;
/// Sentinel for "no node" in endpoint / center slots.
const NONE_ID: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated model file")]
    Truncated,
    #[error("model file has trailing bytes")]
    TrailingBytes,
    #[error("invalid model file: {0}")]
    Invalid(String),
    #[error("invalid network graph: {0}")]
    Graph(#[from] NetworkError),
    #[error("invalid tensor payload: {0}")]
    Tensor(#[from] TensorError),
    #[error("bad sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save_model(model: &TNClassifier, path: &Path) -> Result<(), PersistError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(match model.topology {
        Topology::Mps => 0,
        Topology::Ttn => 1,
    });
    out.extend_from_slice(&(model.n_features() as u32).to_le_bytes());
    out.extend_from_slice(&(model.n_classes as u16).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // local dim
    out.extend_from_slice(&(model.height as u16).to_le_bytes());
    out.extend_from_slice(&(model.width as u16).to_le_bytes());
    for &p in &model.permutation {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }

    let net = &model.net;
    out.extend_from_slice(&(net.links().len() as u32).to_le_bytes());
    for link in net.links() {
        for ep in [link.endpoints.0, link.endpoints.1] {
            let id = match ep {
                Endpoint::Node(n) => n as u32,
                Endpoint::Open => NONE_ID,
            };
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(link.dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.open_links().len() as u32).to_le_bytes());
    for &l in net.open_links() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }

    out.extend_from_slice(&(net.n_nodes() as u32).to_le_bytes());
    for node in net.nodes() {
        out.extend_from_slice(&(node.links.len() as u32).to_le_bytes());
        for &l in &node.links {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out.extend_from_slice(&(node.tensor.len() as u64).to_le_bytes());
        for &x in node.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let center = net.center().map_or(NONE_ID, |c| c as u32);
    out.extend_from_slice(&center.to_le_bytes());

    crate::encoding::atomic_write(path, &out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TNClassifier, PersistError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != &MODEL_MAGIC[..] {
        return Err(PersistError::BadMagic);
    }
    let version = cur.u16()?;
    if version != MODEL_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let topology = match cur.take(1)?[0] {
        0 => Topology::Mps,
        1 => Topology::Ttn,
        t => return Err(PersistError::Invalid(format!("unknown topology tag {t}"))),
    };
    let n_features = cur.u32()? as usize;
    let n_classes = usize::from(cur.u16()?);
    let local_dim = usize::from(cur.u16()?);
    if local_dim != 2 {
        return Err(PersistError::Invalid(format!(
            "unsupported local dimension {local_dim}"
        )));
    }
    let height = usize::from(cur.u16()?);
    let width = usize::from(cur.u16()?);
    if height * width != n_features {
        return Err(PersistError::Invalid(format!(
            "{height}x{width} grid does not hold {n_features} features"
        )));
    }
    let mut permutation = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        permutation.push(cur.u32()? as usize);
    }
    let mut seen = vec![false; n_features];
    for &p in &permutation {
        if p >= n_features || seen[p] {
            return Err(PersistError::Invalid("permutation is not a bijection".into()));
        }
        seen[p] = true;
    }

    let n_links = cur.u32()? as usize;
    let mut links = Vec::with_capacity(n_links);
    for _ in 0..n_links {
        let a = cur.u32()?;
        let b = cur.u32()?;
        let dim = cur.u32()? as usize;
        let ep = |id: u32| {
            if id == NONE_ID {
                Endpoint::Open
            } else {
                Endpoint::Node(id as usize)
            }
        };
        links.push(Link { endpoints: (ep(a), ep(b)), dim });
    }
    let n_open = cur.u32()? as usize;
    let mut open_links = Vec::with_capacity(n_open);
    for _ in 0..n_open {
        open_links.push(cur.u32()? as usize);
    }

    let n_nodes = cur.u32()? as usize;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let n_axes = cur.u32()? as usize;
        let mut node_links = Vec::with_capacity(n_axes);
        for _ in 0..n_axes {
            node_links.push(cur.u32()? as usize);
        }
        let len = cur.u64()? as usize;
        let payload = cur.take(len.checked_mul(8).ok_or(PersistError::Truncated)?)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape: Vec<usize> = node_links
            .iter()
            .map(|&l| {
                links
                    .get(l)
                    .map(|lk| lk.dim)
                    .ok_or_else(|| PersistError::Invalid(format!("node references unknown link {l}")))
            })
            .collect::<Result<_, _>>()?;
        nodes.push(Node {
            tensor: DenseTensor::new(shape, data)?,
            links: node_links,
        });
    }
    let center = cur.u32()?;
    if cur.remaining() != 0 {
        return Err(PersistError::TrailingBytes);
    }

    let mut net = TensorNetwork::new(nodes, links, open_links)?;
    if center != NONE_ID {
        let c = center as usize;
        if c >= net.n_nodes() {
            return Err(PersistError::Invalid(format!("center {c} out of range")));
        }
        net.set_center(c);
    }
    if net.open_links().len() != n_features + 1 {
        return Err(PersistError::Invalid(format!(
            "expected {} open links, found {}",
            n_features + 1,
            net.open_links().len()
        )));
    }
    let label_dim = net.link(*net.open_links().last().unwrap()).dim;
    if label_dim != n_classes {
        return Err(PersistError::Invalid(format!(
            "label link dim {label_dim} does not match {n_classes} classes"
        )));
    }
    Ok(TNClassifier {
        net,
        permutation,
        n_classes,
        height,
        width,
        topology,
    })
}

/// Path of the JSON provenance sidecar conventionally written next to a
/// model or dataset artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    artifact.with_file_name(name)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), PersistError> {
    let bytes = serde_json::to_vec_pretty(value)?;
    crate::encoding::atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.bytes.len() {
            return Err(PersistError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self) -> Result<u16, PersistError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_sample;
    use crate::trainer::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_model(seed: u64) -> TNClassifier {
        let topology = if seed % 2 == 0 { Topology::Ttn } else { Topology::Mps };
        let (h, w) = (2, 4);
        init_model(topology, h * w, 2 + (seed as usize % 3), 3, seed, h, w).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempdir().unwrap();
        for seed in 0..100 {
            let model = random_model(seed);
            let path = dir.path().join(format!("m{seed}.tnmw"));
            save_model(&model, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(loaded.permutation, model.permutation);
            assert_eq!(loaded.n_classes, model.n_classes);
            assert_eq!(loaded.topology, model.topology);
            assert_eq!(loaded.net.center(), model.net.center());
            assert_eq!(loaded.net.n_nodes(), model.net.n_nodes());
            for (a, b) in loaded.net.nodes().iter().zip(model.net.nodes()) {
                assert_eq!(a.links, b.links);
                assert_eq!(a.tensor.shape(), b.tensor.shape());
                assert_eq!(a.tensor.data(), b.tensor.data());
            }
        }
    }

    #[test]
    fn round_trip_predictions_are_identical() {
        let dir = tempdir().unwrap();
        let model = random_model(7);
        let path = dir.path().join("m.tnmw");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let img: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
            let enc = encode_sample(&img, &model.permutation).unwrap();
            assert_eq!(model.forward(&enc).unwrap(), loaded.forward(&enc).unwrap());
        }
    }

    #[test]
    fn corrupt_files_fail_with_structured_errors() {
        let dir = tempdir().unwrap();
        let model = random_model(3);
        let path = dir.path().join("m.tnmw");
        save_model(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let check = |bytes: &[u8]| {
            let p = dir.path().join("bad.tnmw");
            std::fs::write(&p, bytes).unwrap();
            load_model(&p)
        };

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(check(&magic), Err(PersistError::BadMagic)));

        let mut version = good.clone();
        version[4] = 99;
        assert!(matches!(
            check(&version),
            Err(PersistError::UnsupportedVersion(99))
        ));

        // truncation anywhere mid-payload must fail without a partial model
        for cut in [10, good.len() / 2, good.len() - 1] {
            assert!(matches!(check(&good[..cut]), Err(PersistError::Truncated)));
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(check(&trailing), Err(PersistError::TrailingBytes)));

        // graph corruption: point a link dim somewhere inconsistent.
        // header through permutation: 4+2+1+4+2+2+2+2 + 4*8 = 51 bytes; first
        // link record starts there, its dim is 8 bytes further in.
        let mut graph = good.clone();
        graph[51 + 8] = 77;
        assert!(check(&graph).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.tnmw");
        let side = sidecar_path(&path);
        assert_eq!(side.file_name().unwrap(), "model.tnmw.json");
        let value = serde_json::json!({"seed": 7, "cmd": "train"});
        save_json(&value, &side).unwrap();
        let back: serde_json::Value = load_json(&side).unwrap();
        assert_eq!(back, value);
    }
}
