//! Vertex, 3D-joint and 2D-joint L1 losses, joint regression and
//! weak-perspective projection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::mesh::{MeshError, SparseMatrix};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid joint regressor: {0}")]
    Regressor(String),
    #[error("camera scale must be positive and finite, got {0}")]
    Camera(f64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("regressor file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Sparse(#[from] MeshError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weak-perspective camera: `(x, y, z) ↦ scale·(x, y) + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Camera {
    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self, LossError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(LossError::Camera(scale));
        }
        Ok(Self { scale, translation })
    }

    /// Plain-array projection, bit-identical to [`project`] on the tape.
    pub fn project_array(&self, joints: ArrayView2<'_, f64>) -> Array2<f64> {
        Array2::from_shape_fn((joints.nrows(), 2), |(i, k)| {
            self.scale * joints[[i, k]] + self.translation[k]
        })
    }

    fn matrix(&self) -> Array2<f64> {
        let mut p = Array2::zeros((3, 2));
        p[[0, 0]] = self.scale;
        p[[1, 1]] = self.scale;
        p
    }
}

/// Sparse `D × N` map from mesh vertices to skeleton joints. Rows are convex
/// combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    matrix: Arc<SparseMatrix>,
    names: Vec<String>,
}

impl JointRegressor {
    pub fn new(matrix: SparseMatrix, names: Vec<String>) -> Result<Self, LossError> {
        if names.len() != matrix.rows() {
            return Err(LossError::Regressor(format!(
                "{} names for {} joints",
                names.len(),
                matrix.rows()
            )));
        }
        for (r, sum) in matrix.row_sums().into_iter().enumerate() {
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LossError::Regressor(format!("row {r} sums to {sum}")));
            }
        }
        if let Some((r, c, v)) = matrix.triplets().find(|t| !(t.2 >= 0.0)) {
            return Err(LossError::Regressor(format!("negative weight {v} at ({r}, {c})")));
        }
        Ok(Self { matrix: Arc::new(matrix), names })
    }

    /// One joint per listed vertex.
    pub fn one_hot(vertices: &[usize], num_vertices: usize, names: Vec<String>) -> Result<Self, LossError> {
        let triplets = vertices.iter().enumerate().map(|(r, &v)| (r, v, 1.0)).collect();
        Self::new(SparseMatrix::from_triplets(vertices.len(), num_vertices, triplets)?, names)
    }

    pub fn matrix(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_joints(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_vertices(&self) -> usize {
        self.matrix.cols()
    }

    pub fn regress_array(&self, mesh: ArrayView2<'_, f64>) -> Array2<f64> {
        self.matrix.mul_dense(mesh)
    }

    /// `D N` header, a `# names ...` line, then `row col value` triplets.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n# names {}\n", self.num_joints(), self.num_vertices(), self.names.join(" "));
        for (r, c, v) in self.matrix.triplets() {
            writeln!(out, "{r} {c} {v}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LossError> {
        let bad = |line: usize, message: &str| LossError::Parse { line, message: message.into() };
        let mut header = None;
        let mut names = None;
        let mut triplets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# names") {
                names = Some(rest.split_whitespace().map(str::to_string).collect::<Vec<_>>());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match (header, parts.as_slice()) {
                (None, [d, n]) => {
                    let d: usize = d.parse().map_err(|_| bad(no, "bad joint count"))?;
                    let n: usize = n.parse().map_err(|_| bad(no, "bad vertex count"))?;
                    header = Some((d, n));
                }
                (Some(_), [r, c, v]) => {
                    let r: usize = r.parse().map_err(|_| bad(no, "bad row"))?;
                    let c: usize = c.parse().map_err(|_| bad(no, "bad col"))?;
                    let v: f64 = v.parse().map_err(|_| bad(no, "bad value"))?;
                    triplets.push((r, c, v));
                }
                _ => return Err(bad(no, "unexpected line")),
            }
        }
        let (d, n) = header.ok_or_else(|| bad(0, "missing header"))?;
        let names = names.unwrap_or_else(|| (0..d).map(|i| format!("joint{i}")).collect());
        Self::new(SparseMatrix::from_triplets(d, n, triplets)?, names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LossError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| LossError::Io { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LossError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LossError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }
}

/// Reduction over rows (vertices or joints) after the per-row L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint3d: f64,
    pub joint2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vertex: 1.0, joint3d: 1.0, joint2d: 1.0 }
    }
}

fn l1_rows(tape: &mut Tape, pred: Tensor, gt: Tensor, reduction: Reduction) -> Result<Tensor, TensorError> {
    let d = tape.sub(pred, gt)?;
    let l = tape.l1_norm(d);
    Ok(match reduction {
        Reduction::Sum => l,
        Reduction::Mean => {
            let rows = tape.shape(d).0.max(1);
            tape.scale(l, 1.0 / rows as f64)
        }
    })
}

/// `Σᵢ ‖yᵢ − ŷᵢ‖₁`.
pub fn vertex_loss(tape: &mut Tape, pred: Tensor, gt: Tensor, reduction: Reduction) -> Result<Tensor, TensorError> {
    l1_rows(tape, pred, gt, reduction)
}

pub fn regress_joints(tape: &mut Tape, mesh: Tensor, reg: &JointRegressor) -> Result<Tensor, TensorError> {
    tape.sparse_matmul(reg.matrix(), mesh)
}

pub fn joint3d_loss(
    tape: &mut Tape,
    pred_mesh: Tensor,
    gt_joints: Tensor,
    reg: &JointRegressor,
    reduction: Reduction,
) -> Result<Tensor, TensorError> {
    let j = regress_joints(tape, pred_mesh, reg)?;
    l1_rows(tape, j, gt_joints, reduction)
}

pub fn project(tape: &mut Tape, joints: Tensor, cam: &Camera) -> Result<Tensor, TensorError> {
    let p = tape.constant(cam.matrix());
    let t = tape.constant(Array2::from_shape_vec((1, 2), cam.translation.to_vec()).expect("1x2"));
    let xy = tape.matmul(joints, p)?;
    tape.add_row(xy, t)
}

pub fn joint2d_loss(
    tape: &mut Tape,
    pred_mesh: Tensor,
    gt_joints2d: Tensor,
    reg: &JointRegressor,
    cam: &Camera,
    reduction: Reduction,
) -> Result<Tensor, TensorError> {
    let j = regress_joints(tape, pred_mesh, reg)?;
    let p = project(tape, j, cam)?;
    l1_rows(tape, p, gt_joints2d, reduction)
}

/// Supervision targets for one sample, already recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Targets {
    pub mesh: Tensor,
    pub joints3d: Tensor,
    pub joints2d: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub vertex: Tensor,
    pub joint3d: Tensor,
    pub joint2d: Tensor,
    pub total: Tensor,
}

/// `w_v·L_vertex + w_3d·L_3d + w_2d·L_2d`.
pub fn total_loss(
    tape: &mut Tape,
    pred_mesh: Tensor,
    targets: Targets,
    reg: &JointRegressor,
    cam: &Camera,
    weights: LossWeights,
    reduction: Reduction,
) -> Result<LossParts, TensorError> {
    let vertex = vertex_loss(tape, pred_mesh, targets.mesh, reduction)?;
    let joint3d = joint3d_loss(tape, pred_mesh, targets.joints3d, reg, reduction)?;
    let joint2d = joint2d_loss(tape, pred_mesh, targets.joints2d, reg, cam, reduction)?;
    let weighted = |tape: &mut Tape, t: Tensor, w: f64| if w == 1.0 { t } else { tape.scale(t, w) };
    let a = weighted(tape, vertex, weights.vertex);
    let b = weighted(tape, joint3d, weights.joint3d);
    let c = weighted(tape, joint2d, weights.joint2d);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossParts { vertex, joint3d, joint2d, total })
}
