use ndarray::Array2;

use super::{SparseMatrix, TriMesh};

/// How degree normalization is applied to the binary adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Binary 0/1 entries.
    None,
    /// `D^{-1/2} A D^{-1/2}`.
    Symmetric,
    /// `D^{-1} A`.
    Row,
}

/// Fixed graph adjacency over mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: SparseMatrix,
    pub self_loops: bool,
    pub normalization: Normalization,
}

impl NormalizedAdjacency {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }

    /// `mask[i][j]` is true where an entry is stored.
    pub fn structure(&self) -> Array2<bool> {
        let n = self.size();
        let mut mask = Array2::from_elem((n, n), false);
        for (r, c, _) in self.matrix.triplets() {
            mask[[r, c]] = true;
        }
        mask
    }

    /// Same structure with the identity added to the stored values. Missing
    /// diagonal entries are inserted with value 1.
    pub fn plus_identity(&self) -> NormalizedAdjacency {
        let n = self.size();
        let mut triplets: Vec<_> = self.matrix.triplets().collect();
        for i in 0..n {
            match triplets.iter_mut().find(|t| t.0 == i && t.1 == i) {
                Some(t) => t.2 += 1.0,
                None => triplets.push((i, i, 1.0)),
            }
        }
        NormalizedAdjacency {
            matrix: SparseMatrix::from_triplets(n, n, triplets).expect("valid structure"),
            self_loops: true,
            normalization: self.normalization,
        }
    }
}

/// Adjacency from face edges with symmetric normalization when `normalize`.
pub fn build_adjacency(mesh: &TriMesh, add_self_loops: bool, normalize: bool) -> NormalizedAdjacency {
    let norm = if normalize { Normalization::Symmetric } else { Normalization::None };
    build_adjacency_with(mesh, add_self_loops, norm)
}

pub fn build_adjacency_with(
    mesh: &TriMesh,
    add_self_loops: bool,
    normalization: Normalization,
) -> NormalizedAdjacency {
    adjacency_from_edges(mesh.num_vertices(), mesh.edges(), add_self_loops, normalization)
}

/// Adjacency of an undirected graph given as an edge list. Duplicate and
/// reversed edges collapse; self-edges in the list are ignored.
pub fn adjacency_from_edges(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
    add_self_loops: bool,
    normalization: Normalization,
) -> NormalizedAdjacency {
    let unique: std::collections::BTreeSet<(usize, usize)> = edges
        .into_iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (a, b) in unique {
        pairs.push((a, b));
        pairs.push((b, a));
    }
    if add_self_loops {
        pairs.extend((0..n).map(|i| (i, i)));
    }
    let mut degree = vec![0usize; n];
    for &(r, _) in &pairs {
        degree[r] += 1;
    }
    let triplets = pairs
        .into_iter()
        .map(|(r, c)| {
            let v = match normalization {
                Normalization::None => 1.0,
                Normalization::Symmetric => 1.0 / ((degree[r] * degree[c]) as f64).sqrt(),
                Normalization::Row => 1.0 / degree[r] as f64,
            };
            (r, c, v)
        })
        .collect();
    NormalizedAdjacency {
        matrix: SparseMatrix::from_triplets(n, n, triplets).expect("edges in range and unique"),
        self_loops: add_self_loops,
        normalization,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn tetrahedron_is_k4() {
        let a = build_adjacency(&TriMesh::tetrahedron(), false, false).dense();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a[[i, j]], if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn single_triangle_normalized_is_one_third() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]])
            .unwrap();
        let a = build_adjacency(&m, true, true).dense();
        for v in a.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn icosahedron_rows_match_dense_recomputation() {
        let mesh = TriMesh::icosahedron();
        let adj = build_adjacency(&mesh, true, true);
        // dense oracle: binary A + I, degrees, D^-1/2 (A+I) D^-1/2
        let n = 12;
        let mut b = vec![vec![0.0; n]; n];
        for f in mesh.faces() {
            for k in 0..3 {
                b[f[k]][f[(k + 1) % 3]] = 1.0;
                b[f[(k + 1) % 3]][f[k]] = 1.0;
            }
        }
        for (i, row) in b.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let d: Vec<f64> = b.iter().map(|r| r.iter().sum()).collect();
        let sums = adj.matrix.row_sums();
        for i in 0..n {
            let expected: f64 = (0..n).map(|j| b[i][j] / (d[i] * d[j]).sqrt()).sum();
            assert!((sums[i] - expected).abs() < 1e-14);
            // every icosahedron vertex has 5 neighbours: row sum 6 * 1/6
            assert!((sums[i] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn row_normalization_rows_sum_to_one() {
        let adj = build_adjacency_with(&TriMesh::icosphere(1), true, Normalization::Row);
        for s in adj.matrix.row_sums() {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    fn spectral_radius_power(a: &Array2<f64>) -> f64 {
        let n = a.nrows();
        let mut v = Array2::from_shape_fn((n, 1), |(i, _)| 1.0 + (i as f64 * 0.37).sin() * 0.5);
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = a.dot(&v);
            lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt()
                / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w / norm;
        }
        lambda
    }

    #[test]
    fn spectral_radius_is_at_most_one() {
        for mesh in [TriMesh::tetrahedron(), TriMesh::icosahedron(), TriMesh::icosphere(1)] {
            let a = build_adjacency(&mesh, true, true).dense();
            let n = a.nrows();
            assert!(n <= 50);
            let oracle = DMatrix::from_fn(n, n, |i, j| a[[i, j]]).symmetric_eigen();
            let rho = oracle.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let power = spectral_radius_power(&a);
            assert!((rho - power).abs() < 1e-6, "{rho} vs {power}");
            assert!(rho <= 1.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn permutation_conjugates_adjacency(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mesh = TriMesh::icosahedron();
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = build_adjacency(&mesh, true, true);
            let p = build_adjacency(&mesh.permuted(&perm), true, true);
            for i in 0..12 {
                for j in 0..12 {
                    prop_assert_eq!(p.matrix.get(i, j), a.matrix.get(perm[i], perm[j]));
                    prop_assert_eq!(p.matrix.get(i, j).is_some(), p.matrix.get(j, i).is_some());
                }
            }
        }
    }
}
