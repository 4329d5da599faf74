//! Binary sidecar holding precomputed structural features for a dataset
//! file, keyed by the SHA-256 of that file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, PathEdges, SpdMatrix, StructuralFeatures};
use crate::model::PreparedGraph;

const MAGIC: &[u8; 8] = b"GKFEAT\0\0";
const VERSION: u32 = 1;

/// `<dataset>.feat` next to the dataset file.
pub fn cache_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".feat");
    PathBuf::from(s)
}

pub fn file_digest(path: &Path) -> Result<[u8; 32]> {
    Ok(Sha256::digest(fs::read(path)?).into())
}

/// Structural features of every graph, in order, computed in parallel.
pub fn compute_features(graphs: &[Graph], max_path_len: usize) -> Vec<StructuralFeatures> {
    graphs.par_iter().map(|g| StructuralFeatures::compute(g, max_path_len)).collect()
}

pub fn encode_features(source: &[u8; 32], max_path_len: usize, feats: &[StructuralFeatures]) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.extend_from_slice(&VERSION.to_le_bytes());
    w.extend_from_slice(source);
    w.extend_from_slice(&(max_path_len as u64).to_le_bytes());
    w.extend_from_slice(&(feats.len() as u64).to_le_bytes());
    let u32s = |w: &mut Vec<u8>, xs: &mut dyn Iterator<Item = u32>| {
        for x in xs {
            w.extend_from_slice(&x.to_le_bytes());
        }
    };
    for sf in feats {
        let n = sf.num_nodes();
        w.extend_from_slice(&(n as u64).to_le_bytes());
        w.extend_from_slice(&(sf.path_edges.edges().len() as u64).to_le_bytes());
        for &d in sf.spd.as_slice() {
            w.extend_from_slice(&d.to_le_bytes());
        }
        u32s(&mut w, &mut sf.path_edges.offsets().iter().copied());
        u32s(&mut w, &mut sf.path_edges.edges().iter().copied());
        u32s(&mut w, &mut sf.indeg.iter().map(|&d| d as u32));
        u32s(&mut w, &mut sf.outdeg.iter().map(|&d| d as u32));
    }
    w
}

/// `None` when the bytes were produced for another source file or path
/// length (or are not a cache at all).
pub fn decode_features(bytes: &[u8], source: &[u8; 32], max_path_len: usize) -> Option<Vec<StructuralFeatures>> {
    let mut pos: usize = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos.checked_add(n)?)?;
        pos += n;
        Some(s)
    };
    if take(8)? != MAGIC || u32::from_le_bytes(take(4)?.try_into().ok()?) != VERSION || take(32)? != source {
        return None;
    }
    let u64_ = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    if u64_(take(8)?) != max_path_len {
        return None;
    }
    let count = u64_(take(8)?);
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = u64_(take(8)?);
        let m = u64_(take(8)?);
        let nn = n.checked_mul(n)?;
        let i32s: Vec<i32> = take(nn.checked_mul(4)?)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut u32s = |k: usize| -> Option<Vec<u32>> {
            Some(take(k.checked_mul(4)?)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let offsets = u32s(nn + 1)?;
        let edges = u32s(m)?;
        let indeg = u32s(n)?.into_iter().map(|d| d as usize).collect();
        let outdeg = u32s(n)?.into_iter().map(|d| d as usize).collect();
        out.push(StructuralFeatures {
            spd: SpdMatrix::from_raw(n, i32s).ok()?,
            path_edges: PathEdges::from_raw(n, offsets, edges).ok()?,
            indeg,
            outdeg,
            has_vnode: false,
            max_path_len,
        });
    }
    (pos == bytes.len()).then_some(out)
}

/// Features for the graphs of `dataset` (which were loaded from that
/// file), reusing the sidecar when it matches and rewriting it otherwise.
/// Returns whether the cache was reused.
pub fn load_or_build_features(
    dataset: &Path,
    graphs: &[Graph],
    max_path_len: usize,
) -> Result<(Vec<StructuralFeatures>, bool)> {
    let digest = file_digest(dataset)?;
    let sidecar = cache_path(dataset);
    if let Ok(bytes) = fs::read(&sidecar) {
        if let Some(feats) = decode_features(&bytes, &digest, max_path_len) {
            if feats.len() == graphs.len() && feats.iter().zip(graphs).all(|(f, g)| f.num_nodes() == g.num_nodes()) {
                return Ok((feats, true));
            }
        }
    }
    let feats = compute_features(graphs, max_path_len);
    let tmp = sidecar.with_extension("feat.tmp");
    fs::write(&tmp, encode_features(&digest, max_path_len, &feats))?;
    fs::rename(&tmp, &sidecar)?;
    Ok((feats, false))
}

/// Attach the virtual node to every graph.
pub fn prepare_all(graphs: Vec<Graph>, feats: Vec<StructuralFeatures>) -> Result<Vec<PreparedGraph>> {
    if graphs.len() != feats.len() {
        return Err(Error::InvalidGraph(format!("{} graphs but {} feature sets", graphs.len(), feats.len())));
    }
    graphs.into_par_iter().zip(feats).map(|(g, f)| PreparedGraph::from_parts(g, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, save_dataset, SyntheticSpec};

    #[test]
    fn round_trip_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_synthetic(&SyntheticSpec { num_graphs: 12, ..SyntheticSpec::default() });
        save_dataset(&path, &data).unwrap();

        let (a, reused) = load_or_build_features(&path, &data.graphs, 5).unwrap();
        assert!(!reused);
        let first = fs::read(cache_path(&path)).unwrap();
        let (b, reused) = load_or_build_features(&path, &data.graphs, 5).unwrap();
        assert!(reused);
        assert_eq!(a, b);
        assert_eq!(a, compute_features(&data.graphs, 5));

        // a different path length invalidates; rebuilding is bit-identical
        let (_, reused) = load_or_build_features(&path, &data.graphs, 6).unwrap();
        assert!(!reused);
        load_or_build_features(&path, &data.graphs, 5).unwrap();
        assert_eq!(fs::read(cache_path(&path)).unwrap(), first);
    }

    #[test]
    fn rejects_foreign_bytes() {
        let feats = compute_features(&[Graph::cycle(4)], 3);
        let bytes = encode_features(&[1; 32], 3, &feats);
        assert!(decode_features(&bytes, &[2; 32], 3).is_none());
        assert!(decode_features(&bytes[..bytes.len() - 1], &[1; 32], 3).is_none());
        assert_eq!(decode_features(&bytes, &[1; 32], 3).unwrap(), feats);
    }
}
