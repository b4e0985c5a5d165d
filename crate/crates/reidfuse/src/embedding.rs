//! Per-image feature embeddings and their on-disk container.
//!
//! The binary format (`REIDEMB1`) is fixed so saved embeddings round-trip
//! bit-exactly: magic bytes, a branch tag byte, u32 count and dim
//! (little-endian), count*dim f32 values row-major (little-endian), then the
//! image ids, newline-separated.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::write_atomic;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"REIDEMB1";

/// Which extractor produced an embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    CnnMid,
    Transformer,
    Fused,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::CnnMid => "cnn_mid",
            Branch::Transformer => "transformer",
            Branch::Fused => "fused",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Branch::CnnMid => 0,
            Branch::Transformer => 1,
            Branch::Fused => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Branch> {
        match tag {
            0 => Some(Branch::CnnMid),
            1 => Some(Branch::Transformer),
            2 => Some(Branch::Fused),
            _ => None,
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A row-aligned matrix of per-image feature vectors from one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub branch: Branch,
    pub ids: Vec<String>,
    pub matrix: Array2<f32>,
}

impl EmbeddingSet {
    pub fn new(branch: Branch, ids: Vec<String>, matrix: Array2<f32>) -> Result<EmbeddingSet> {
        let set = EmbeddingSet {
            branch,
            ids,
            matrix,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} ids but {} matrix rows",
                self.ids.len(),
                self.matrix.nrows()
            )));
        }
        if self.ids.iter().any(|id| id.is_empty() || id.contains('\n')) {
            return Err(Error::Validation(
                "image ids must be non-empty and newline-free".into(),
            ));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding value".into()));
        }
        Ok(())
    }
}

/// Serializes an embedding set into `REIDEMB1` bytes.
pub fn embeddings_to_bytes(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let count = u32::try_from(set.count())
        .map_err(|_| Error::Shape("embedding count exceeds u32".into()))?;
    let dim =
        u32::try_from(set.dim()).map_err(|_| Error::Shape("embedding dim exceeds u32".into()))?;

    let mut out = Vec::with_capacity(17 + set.count() * set.dim() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(set.branch.tag());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for row in set.matrix.rows() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(set.ids.join("\n").as_bytes());
    Ok(out)
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_atomic(path, &embeddings_to_bytes(set)?)
}

/// Parses `REIDEMB1` bytes back into an embedding set.
pub fn embeddings_from_bytes(bytes: &[u8], origin: &Path) -> Result<EmbeddingSet> {
    let fail = |msg: String| Error::parse(origin, msg);
    if bytes.len() < 17 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(fail("missing REIDEMB1 magic".into()));
    }
    let branch = Branch::from_tag(bytes[8])
        .ok_or_else(|| fail(format!("unknown branch tag {}", bytes[8])))?;
    let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;

    let floats_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("count*dim overflows".into()))?;
    let floats_end = 17 + floats_len;
    if bytes.len() < floats_end {
        return Err(fail(format!(
            "payload truncated: header needs {} value bytes, found {}",
            floats_len,
            bytes.len() - 17
        )));
    }

    let mut values = Vec::with_capacity(count * dim);
    for chunk in bytes[17..floats_end].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail("non-finite embedding value".into()));
        }
        values.push(v);
    }
    let matrix = Array2::from_shape_vec((count, dim), values)
        .map_err(|e| fail(format!("bad matrix shape: {e}")))?;

    let id_block = std::str::from_utf8(&bytes[floats_end..])
        .map_err(|_| fail("id block is not valid UTF-8".into()))?;
    let ids: Vec<String> = if count == 0 {
        if !id_block.is_empty() {
            return Err(fail(
                "unexpected trailing bytes after empty id block".into(),
            ));
        }
        Vec::new()
    } else {
        id_block.split('\n').map(str::to_string).collect()
    };
    if ids.len() != count {
        return Err(fail(format!(
            "header count {} does not match {} ids",
            count,
            ids.len()
        )));
    }

    EmbeddingSet::new(branch, ids, matrix)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    embeddings_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet::new(
            Branch::CnnMid,
            vec!["a".into(), "b".into(), "c".into()],
            array![
                [1.0, 2.0, 3.0, 4.0],
                [0.5, -0.5, 0.25, 0.0],
                [9.0, 8.0, 7.0, 6.0]
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.reidemb");
        let set = sample();
        save_embeddings(&set, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, set);
        // Saving again produces identical bytes.
        let bytes1 = std::fs::read(&path).unwrap();
        save_embeddings(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn fused_branch_with_wide_rows_is_accepted() {
        let set = EmbeddingSet::new(
            Branch::Fused,
            vec!["q".into()],
            Array2::from_elem((1, 3840), 0.5f32),
        )
        .unwrap();
        let bytes = embeddings_to_bytes(&set).unwrap();
        let back = embeddings_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.dim(), 3840);
        assert_eq!(back.branch, Branch::Fused);
    }

    #[test]
    fn header_payload_mismatch_is_rejected() {
        let set = sample();
        let mut bytes = embeddings_to_bytes(&set).unwrap();
        // Claim dim 5 while rows carry 4 floats.
        bytes[13..17].copy_from_slice(&5u32.to_le_bytes());
        let err = embeddings_from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let mut bytes = embeddings_to_bytes(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(embeddings_from_bytes(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected_on_load() {
        let mut bytes = embeddings_to_bytes(&sample()).unwrap();
        bytes[17..21].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = embeddings_from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    proptest! {
        #[test]
        fn round_trip_random_sets(
            count in 1usize..12,
            dim in 1usize..24,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids = (0..count).map(|i| format!("img{i}")).collect::<Vec<_>>();
            let matrix = Array2::from_shape_fn((count, dim), |_| rng.random_range(-100.0f32..100.0));
            let set = EmbeddingSet::new(Branch::Transformer, ids, matrix).unwrap();
            let bytes = embeddings_to_bytes(&set).unwrap();
            let back = embeddings_from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
