//! Triangle meshes, OBJ I/O and graph adjacency built from mesh connectivity.

mod adjacency;
mod obj;
mod sparse;

use std::collections::BTreeSet;
use std::path::PathBuf;

use thiserror::Error;

pub use adjacency::{adjacency_from_edges, build_adjacency, build_adjacency_with, NormalizedAdjacency, Normalization};
pub use obj::{load_obj, load_obj_with, parse_obj, save_obj, write_obj, ObjInfo, ObjOptions};
pub use sparse::SparseMatrix;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: cannot parse `{text}`")]
    Parse { line: usize, text: String },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangle { line: usize, count: usize },
    #[error("face index {index} out of range for {vertices} vertices")]
    IndexOutOfRange { index: i64, vertices: usize },
    #[error("face {face} repeats vertex {vertex}")]
    DegenerateFace { face: usize, vertex: usize },
    #[error("edge graph has {components} connected components, expected 1")]
    Disconnected { components: usize },
    #[error("sparse entry ({row}, {col}) outside {rows}x{cols}")]
    SparseIndex { row: usize, col: usize, rows: usize, cols: usize },
    #[error("duplicate sparse entry ({row}, {col})")]
    SparseDuplicate { row: usize, col: usize },
}

/// Vertex positions plus triangle faces.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Validates face indices; connectivity is not required here (see
    /// [`TriMesh::ensure_connected`]).
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &i in f {
                if i >= n {
                    return Err(MeshError::IndexOutOfRange { index: i as i64, vertices: n });
                }
            }
            if f[0] == f[1] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace { face: fi, vertex: f[0] });
            }
            if f[1] == f[2] {
                return Err(MeshError::DegenerateFace { face: fi, vertex: f[1] });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Undirected edges as `(min, max)` pairs in sorted order.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges
    }

    /// Sorted neighbour lists of the edge graph.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn connected_components(&self) -> usize {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (a, b) in self.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    pub fn ensure_connected(&self) -> Result<(), MeshError> {
        match self.connected_components() {
            0 | 1 => Ok(()),
            components => Err(MeshError::Disconnected { components }),
        }
    }

    /// Returns the mesh with vertices reordered so that new vertex `i` is old
    /// vertex `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let vertices = perm.iter().map(|&old| self.vertices[old]).collect();
        let faces = self.faces.iter().map(|f| f.map(|i| inverse[i])).collect();
        Self { vertices, faces }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        c.map(|x| x / n)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Regular tetrahedron with outward-facing faces.
    pub fn tetrahedron() -> Self {
        let vertices = vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        Self { vertices, faces }
    }

    /// Unit icosahedron.
    pub fn icosahedron() -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let raw = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let vertices = raw.iter().map(|v| normalize(*v)).collect();
        let faces = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        Self { vertices, faces }
    }

    /// Unit icosphere after `subdivisions` rounds of 4-to-1 face splitting.
    /// Vertex counts are 12, 42, 162, 642, ...
    pub fn icosphere(subdivisions: usize) -> Self {
        let mut mesh = Self::icosahedron();
        for _ in 0..subdivisions {
            let mut midpoint = std::collections::HashMap::new();
            let mut vertices = mesh.vertices.clone();
            let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
            let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let (p, q) = (vertices[a], vertices[b]);
                    vertices.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                    vertices.len() - 1
                })
            };
            for &[a, b, c] in &mesh.faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            mesh = Self { vertices, faces };
        }
        mesh
    }

    pub(crate) fn map_vertices(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self { vertices: self.vertices.iter().map(|&v| f(v)).collect(), faces: self.faces.clone() }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn platonic_counts() {
        let t = TriMesh::tetrahedron();
        assert_eq!((t.num_vertices(), t.num_faces(), t.edges().len()), (4, 4, 6));
        let i = TriMesh::icosahedron();
        assert_eq!((i.num_vertices(), i.num_faces(), i.edges().len()), (12, 20, 30));
        let s = TriMesh::icosphere(3);
        assert_eq!((s.num_vertices(), s.num_faces()), (642, 1280));
        assert_eq!(s.connected_components(), 1);
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![[0.0; 3]; 3];
        assert!(matches!(
            TriMesh::new(v.clone(), vec![[0, 1, 3]]),
            Err(MeshError::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            TriMesh::new(v, vec![[0, 1, 1]]),
            Err(MeshError::DegenerateFace { face: 0, vertex: 1 })
        ));
    }

    #[test]
    fn detects_disconnection() {
        let v = vec![[0.0; 3]; 6];
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert!(matches!(m.ensure_connected(), Err(MeshError::Disconnected { components: 2 })));
    }
}
