//! Query/gallery fusion and ranking: per-branch embeddings are concatenated
//! row-wise into fused vectors, compared by Euclidean distance (always
//! accumulated in double precision), and sorted ascending with ties broken by
//! gallery index.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{Branch, EmbeddingSet};
use crate::error::{Error, Result};

/// Concatenation of two branch embedding sets over identical id sequences.
/// Columns `[0, D)` hold branch A, `[D, D + P)` branch B.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbeddingSet {
    pub ids: Vec<String>,
    pub matrix: Array2<f32>,
    pub source_dims: (usize, usize),
}

impl FusedEmbeddingSet {
    pub fn count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn into_embedding_set(self) -> EmbeddingSet {
        EmbeddingSet {
            branch: Branch::Fused,
            ids: self.ids,
            matrix: self.matrix,
        }
    }
}

/// Row-wise concatenation of two branches: fused dim = dim(a) + dim(b).
pub fn fuse_embeddings(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<FusedEmbeddingSet> {
    if a.branch == Branch::Fused || b.branch == Branch::Fused {
        return Err(Error::Validation(
            "inputs to fusion must be single-branch sets".into(),
        ));
    }
    if a.ids != b.ids {
        return Err(Error::Validation(
            "branch sets carry different ids or orders".into(),
        ));
    }
    let (d, p) = (a.dim(), b.dim());
    let mut matrix = Array2::<f32>::zeros((a.count(), d + p));
    matrix.slice_mut(ndarray::s![.., ..d]).assign(&a.matrix);
    matrix.slice_mut(ndarray::s![.., d..]).assign(&b.matrix);
    Ok(FusedEmbeddingSet {
        ids: a.ids.clone(),
        matrix,
        source_dims: (d, p),
    })
}

/// Optional per-branch L2 normalization before fusion (off by default in the
/// pipeline; raw concatenation matches the reference behavior).
pub fn l2_normalize_rows(set: &EmbeddingSet) -> EmbeddingSet {
    let mut matrix = set.matrix.clone();
    for mut row in matrix.rows_mut() {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| (v as f64 / norm) as f32);
        }
    }
    EmbeddingSet {
        branch: set.branch,
        ids: set.ids.clone(),
        matrix,
    }
}

/// Euclidean distances between every query row and every gallery row,
/// computed in f64.
pub fn distance_matrix_f64(
    query: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    if query.iter().chain(gallery.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding".into()));
    }
    let mut d = Array2::<f64>::zeros((query.nrows(), gallery.nrows()));
    for i in 0..query.nrows() {
        for j in 0..gallery.nrows() {
            let mut acc = 0.0f64;
            for c in 0..query.ncols() {
                let diff = query[[i, c]] - gallery[[j, c]];
                acc += diff * diff;
            }
            d[[i, j]] = acc.sqrt();
        }
    }
    Ok(d)
}

/// f32 storage front end for [`distance_matrix_f64`].
pub fn distance_matrix(query: ArrayView2<f32>, gallery: ArrayView2<f32>) -> Result<Array2<f64>> {
    let q = query.mapv(|v| v as f64);
    let g = gallery.mapv(|v| v as f64);
    distance_matrix_f64(q.view(), g.view())
}

/// One query's gallery ordering, closest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Permutation of gallery indices by ascending distance; equal distances
    /// keep ascending index order.
    pub ordering: Vec<usize>,
    /// Distances aligned with `ordering` (non-decreasing).
    pub distances: Vec<f64>,
}

/// Sorts one distance row ascending with deterministic index tie-breaks.
pub fn rank_gallery(query_id: &str, distances: ArrayView1<f64>) -> Result<RankedResult> {
    if distances.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite distance".into()));
    }
    let mut ordering: Vec<usize> = (0..distances.len()).collect();
    ordering.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .expect("finite distances compare")
            .then(a.cmp(&b))
    });
    let sorted: Vec<f64> = ordering.iter().map(|&i| distances[i]).collect();
    Ok(RankedResult {
        query_id: query_id.to_string(),
        ordering,
        distances: sorted,
    })
}

/// Ranks every query row of a distance matrix.
pub fn rank_all(query_ids: &[String], distances: &Array2<f64>) -> Result<Vec<RankedResult>> {
    if query_ids.len() != distances.nrows() {
        return Err(Error::Shape(format!(
            "{} ids for {} distance rows",
            query_ids.len(),
            distances.nrows()
        )));
    }
    query_ids
        .iter()
        .enumerate()
        .map(|(i, id)| rank_gallery(id, distances.row(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(branch: Branch, ids: &[&str], matrix: Array2<f32>) -> EmbeddingSet {
        EmbeddingSet::new(branch, ids.iter().map(|s| s.to_string()).collect(), matrix).unwrap()
    }

    #[test]
    fn fusion_concatenates_rows() {
        let a = set(Branch::CnnMid, &["x"], array![[1.0, 2.0]]);
        let b = set(Branch::Transformer, &["x"], array![[3.0]]);
        let fused = fuse_embeddings(&a, &b).unwrap();
        assert_eq!(fused.source_dims, (2, 1));
        assert_eq!(fused.matrix, array![[1.0, 2.0, 3.0]]);
        let as_set = fused.into_embedding_set();
        assert_eq!(as_set.branch, Branch::Fused);
    }

    #[test]
    fn default_branch_widths_fuse_to_3840() {
        let n = 2;
        let a = set(
            Branch::CnnMid,
            &["a", "b"],
            Array2::from_elem((n, 3072), 0.1),
        );
        let b = set(
            Branch::Transformer,
            &["a", "b"],
            Array2::from_elem((n, 768), 0.2),
        );
        let fused = fuse_embeddings(&a, &b).unwrap();
        assert_eq!(fused.dim(), 3840);
        // prefix/suffix columns belong to their branches
        assert_eq!(fused.matrix[[0, 0]], 0.1);
        assert_eq!(fused.matrix[[0, 3839]], 0.2);
    }

    #[test]
    fn fusion_rejects_mismatched_or_fused_inputs() {
        let a = set(Branch::CnnMid, &["x"], array![[1.0]]);
        let b = set(Branch::Transformer, &["y"], array![[1.0]]);
        assert!(fuse_embeddings(&a, &b).is_err());

        let f = set(Branch::Fused, &["x"], array![[1.0]]);
        assert!(fuse_embeddings(&a, &f).is_err());

        // same ids, different order
        let a2 = set(Branch::CnnMid, &["x", "y"], array![[1.0], [2.0]]);
        let b2 = set(Branch::Transformer, &["y", "x"], array![[1.0], [2.0]]);
        assert!(fuse_embeddings(&a2, &b2).is_err());
    }

    #[test]
    fn distance_matrix_basics() {
        let q = array![[0.0f32, 0.0], [1.0, 1.0]];
        let g = array![[0.0f32, 0.0], [3.0, 4.0]];
        let d = distance_matrix(q.view(), g.view()).unwrap();
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[0, 1]], 5.0);
        assert!(distance_matrix(q.view(), array![[1.0f32]].view()).is_err());
    }

    #[test]
    fn distance_matrix_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-2.0f32..2.0));
        let g = Array2::from_shape_simple_fn((7, 5), || rng.random_range(-2.0f32..2.0));
        let d = distance_matrix(q.view(), g.view()).unwrap();
        for i in 0..4 {
            for j in 0..7 {
                let direct: f64 = (0..5)
                    .map(|c| (q[[i, c]] as f64 - g[[j, c]] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d[[i, j]] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0f32..1.0));
        let g = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0f32..1.0));
        let d_qg = distance_matrix(q.view(), g.view()).unwrap();
        let d_gq = distance_matrix(g.view(), q.view()).unwrap();
        assert_eq!(d_qg.t().to_owned(), d_gq);
    }

    #[test]
    fn ranking_sorts_with_index_tie_breaks() {
        let r = rank_gallery("q", Array1::from(vec![0.5, 0.1, 0.3]).view()).unwrap();
        assert_eq!(r.ordering, vec![1, 2, 0]);
        assert_eq!(r.distances, vec![0.1, 0.3, 0.5]);

        let equal = rank_gallery("q", Array1::from(vec![0.2, 0.2, 0.2]).view()).unwrap();
        assert_eq!(equal.ordering, vec![0, 1, 2]);

        let shifted = rank_gallery("q", Array1::from(vec![1.5, 1.1, 1.3]).view()).unwrap();
        assert_eq!(shifted.ordering, vec![1, 2, 0]);

        assert!(rank_gallery("q", Array1::from(vec![f64::NAN]).view()).is_err());
    }

    #[test]
    fn l2_normalization_unit_norms_rows() {
        let a = set(Branch::CnnMid, &["x", "y"], array![[3.0, 4.0], [0.0, 0.0]]);
        let n = l2_normalize_rows(&a);
        assert!((n.matrix[[0, 0]] - 0.6).abs() < 1e-6);
        assert!((n.matrix[[0, 1]] - 0.8).abs() < 1e-6);
        assert_eq!(n.matrix[[1, 0]], 0.0); // zero rows stay zero
    }

    /// Gram-Schmidt orthogonalization of a random square matrix.
    fn random_orthogonal(dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = Array2::<f64>::zeros((dim, dim));
        for i in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for j in 0..i {
                let dot: f64 = (0..dim).map(|c| v[c] * q[[j, c]]).sum();
                for c in 0..dim {
                    v[c] -= dot * q[[j, c]];
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..dim {
                q[[i, c]] = v[c] / norm;
            }
        }
        q
    }

    #[test]
    fn orthogonal_transform_preserves_distances_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dim = 6;
        let q = Array2::from_shape_simple_fn((4, dim), || rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_simple_fn((9, dim), || rng.random_range(-1.0..1.0));
        let rot = random_orthogonal(dim, 7);
        let d1 = distance_matrix_f64(q.view(), g.view()).unwrap();
        let d2 = distance_matrix_f64(q.dot(&rot).view(), g.dot(&rot).view()).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for i in 0..4 {
            let r1 = rank_gallery("q", d1.row(i)).unwrap();
            let r2 = rank_gallery("q", d2.row(i)).unwrap();
            assert_eq!(r1.ordering, r2.ordering);
        }
    }

    proptest! {
        /// Pythagorean identity of concatenation: fused d^2 equals the sum of
        /// the per-branch d^2.
        #[test]
        fn fused_distance_squares_add(
            qa in prop::collection::vec(-5.0f32..5.0, 3),
            qb in prop::collection::vec(-5.0f32..5.0, 2),
            ga in prop::collection::vec(-5.0f32..5.0, 3),
            gb in prop::collection::vec(-5.0f32..5.0, 2),
        ) {
            let a_q = set(Branch::CnnMid, &["q"], Array2::from_shape_vec((1, 3), qa).unwrap());
            let b_q = set(Branch::Transformer, &["q"], Array2::from_shape_vec((1, 2), qb).unwrap());
            let a_g = set(Branch::CnnMid, &["g"], Array2::from_shape_vec((1, 3), ga).unwrap());
            let b_g = set(Branch::Transformer, &["g"], Array2::from_shape_vec((1, 2), gb).unwrap());
            let fq = fuse_embeddings(&a_q, &b_q).unwrap();
            let fg = fuse_embeddings(&a_g, &b_g).unwrap();

            let da = distance_matrix(a_q.matrix.view(), a_g.matrix.view()).unwrap()[[0, 0]];
            let db = distance_matrix(b_q.matrix.view(), b_g.matrix.view()).unwrap()[[0, 0]];
            let df = distance_matrix(fq.matrix.view(), fg.matrix.view()).unwrap()[[0, 0]];
            prop_assert!((df * df - (da * da + db * db)).abs() < 1e-9);
        }

        /// Rank dominance: when both branches strictly prefer gallery j over
        /// k, the fused ranking does too.
        #[test]
        fn fused_ranking_respects_joint_dominance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 6;
            let a_q = set(Branch::CnnMid, &["q"], Array2::from_shape_simple_fn((1, 4), || rng.random_range(-1.0f32..1.0)));
            let b_q = set(Branch::Transformer, &["q"], Array2::from_shape_simple_fn((1, 3), || rng.random_range(-1.0f32..1.0)));
            let ids: Vec<String> = (0..m).map(|i| format!("g{i}")).collect();
            let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            let a_g = set(Branch::CnnMid, &id_refs, Array2::from_shape_simple_fn((m, 4), || rng.random_range(-1.0f32..1.0)));
            let b_g = set(Branch::Transformer, &id_refs, Array2::from_shape_simple_fn((m, 3), || rng.random_range(-1.0f32..1.0)));

            let da = distance_matrix(a_q.matrix.view(), a_g.matrix.view()).unwrap();
            let db = distance_matrix(b_q.matrix.view(), b_g.matrix.view()).unwrap();
            let fq = fuse_embeddings(&a_q, &b_q).unwrap();
            let fg = fuse_embeddings(&a_g, &b_g).unwrap();
            let df = distance_matrix(fq.matrix.view(), fg.matrix.view()).unwrap();
            let ranked = rank_gallery("q", df.row(0)).unwrap();
            let pos_of = |j: usize| ranked.ordering.iter().position(|&x| x == j).unwrap();

            for j in 0..m {
                for k in 0..m {
                    if da[[0, j]] < da[[0, k]] && db[[0, j]] < db[[0, k]] {
                        prop_assert!(pos_of(j) < pos_of(k));
                    }
                }
            }
        }
    }
}
