//! Multi-resolution mesh hierarchy with down/up-sampling operators.

mod decimate;
mod manifest;

use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{build_adjacency, MeshError, NormalizedAdjacency, SparseMatrix, TriMesh};

pub use decimate::decimate;
pub use manifest::{load_hierarchy, save_hierarchy, HIERARCHY_HEADER};

#[derive(Debug, Error)]
pub enum CoarsenError {
    #[error("decimation target {target} is below the 4-vertex minimum")]
    TargetTooSmall { target: usize },
    #[error("decimation target {target} is not below the vertex count {vertices}")]
    TargetNotSmaller { target: usize, vertices: usize },
    #[error("edge collapse blocked at edge {edge:?}: stuck at {reached} vertices, target {target}")]
    CollapseBlocked { edge: (usize, usize), reached: usize, target: usize },
    #[error("invalid hierarchy request: {0}")]
    InvalidRequest(String),
    #[error("hierarchy manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Linear maps between two adjacent resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOperator {
    /// coarse × fine 0/1 selection.
    pub down: Arc<SparseMatrix>,
    /// fine × coarse barycentric weights.
    pub up: Arc<SparseMatrix>,
    pub source_level: usize,
    pub target_level: usize,
}

/// Levels from finest (0) to coarsest, with per-level adjacency and the
/// operators between consecutive levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshHierarchy {
    pub levels: Vec<TriMesh>,
    pub adjacencies: Vec<NormalizedAdjacency>,
    pub samplers: Vec<SamplingOperator>,
}

impl MeshHierarchy {
    /// Number of coarsening steps (levels minus one).
    pub fn depth(&self) -> usize {
        self.samplers.len()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(TriMesh::num_vertices).collect()
    }

    /// Operator resampling features from level `from` to level `to` by
    /// composing stored down selections (finer to coarser) or up operators.
    pub fn resampler(&self, from: usize, to: usize) -> SparseMatrix {
        let n = self.levels[from].num_vertices();
        let mut op = SparseMatrix::identity(n);
        if from < to {
            for l in from..to {
                op = self.samplers[l].down.compose(&op);
            }
        } else {
            for l in (to..from).rev() {
                op = self.samplers[l].up.compose(&op);
            }
        }
        op
    }
}

/// Chooses `count` vertices: the one nearest the centroid, then farthest-point
/// additions. Returned in ascending index order.
fn select_points(mesh: &TriMesh, count: usize) -> Vec<usize> {
    let v = mesh.vertices();
    let c = mesh.centroid();
    let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let first = (0..v.len())
        .min_by(|&a, &b| d2(v[a], c).total_cmp(&d2(v[b], c)).then(a.cmp(&b)))
        .expect("non-empty mesh");
    let mut chosen = vec![first];
    while chosen.len() < count {
        let next = (0..v.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| {
                let da = chosen.iter().map(|&s| d2(v[a], v[s])).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|&s| d2(v[b], v[s])).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("count below vertex count");
        chosen.push(next);
    }
    chosen.sort_unstable();
    chosen
}

/// Reduction to a face-less point set for the final tiny levels.
fn select_level(mesh: &TriMesh, count: usize) -> (TriMesh, SamplingOperator) {
    let selected = select_points(mesh, count);
    let v = mesh.vertices();
    let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let mut up = Vec::with_capacity(v.len());
    for (i, &p) in v.iter().enumerate() {
        let nearest = (0..selected.len())
            .min_by(|&a, &b| d2(p, v[selected[a]]).total_cmp(&d2(p, v[selected[b]])).then(a.cmp(&b)))
            .expect("at least one selected");
        up.push((i, nearest, 1.0));
    }
    let coarse = TriMesh::new(selected.iter().map(|&i| v[i]).collect(), vec![]).expect("no faces");
    let op = SamplingOperator {
        down: Arc::new(decimate::selection_down(&selected, v.len())),
        up: Arc::new(SparseMatrix::from_triplets(v.len(), selected.len(), up).expect("one per row")),
        source_level: 0,
        target_level: 1,
    };
    (coarse, op)
}

/// Builds `levels` coarsening steps, dividing the node count by `factor` at
/// each step. Closed meshes are never decimated below 4 vertices; from 4 or
/// fewer vertices the next level is a point selection (a single node,
/// nearest the centroid, when the division leaves one).
pub fn build_hierarchy(
    mesh: &TriMesh,
    levels: usize,
    factor: usize,
) -> Result<MeshHierarchy, CoarsenError> {
    if levels < 1 {
        return Err(CoarsenError::InvalidRequest("levels must be at least 1".into()));
    }
    if factor < 2 {
        return Err(CoarsenError::InvalidRequest("factor must be at least 2".into()));
    }
    let mut meshes = vec![mesh.clone()];
    let mut samplers = Vec::with_capacity(levels);
    for l in 0..levels {
        let current = &meshes[l];
        let n = current.num_vertices();
        if n <= 1 {
            return Err(CoarsenError::InvalidRequest(format!(
                "level {l} already has {n} node(s); cannot build {levels} levels"
            )));
        }
        let target = n.div_ceil(factor);
        let (coarse, mut op) = if n > 4 && current.num_faces() > 0 {
            decimate(current, target.max(4))?
        } else {
            select_level(current, target.clamp(1, n - 1))
        };
        op.source_level = l;
        op.target_level = l + 1;
        log::debug!("level {} -> {}: {} -> {} nodes", l, l + 1, n, coarse.num_vertices());
        meshes.push(coarse);
        samplers.push(op);
    }
    Ok(from_parts(meshes, samplers))
}

/// Coarsens by `factor` until a single node remains.
pub fn build_full_hierarchy(mesh: &TriMesh, factor: usize) -> Result<MeshHierarchy, CoarsenError> {
    let mut levels = 1;
    loop {
        let h = build_hierarchy(mesh, levels, factor)?;
        if h.levels.last().map_or(0, TriMesh::num_vertices) <= 1 {
            return Ok(h);
        }
        levels += 1;
    }
}

/// Assembles a hierarchy from meshes and operators, building the default
/// self-looped, symmetrically normalized adjacency for each level.
pub(crate) fn from_parts(levels: Vec<TriMesh>, samplers: Vec<SamplingOperator>) -> MeshHierarchy {
    let adjacencies = levels.iter().map(|m| build_adjacency(m, true, true)).collect();
    MeshHierarchy { levels, adjacencies, samplers }
}
