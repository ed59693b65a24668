//! Joint-error metrics: MPJPE, Procrustes-aligned reconstruction error, PCK
//! and AUC, plus the evaluation report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: pred {pred:?}, gt {gt:?} (expected D x 3)")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("alignment needs at least 3 joints, got {0}")]
    TooFewJoints(usize),
    #[error("rank-deficient cross-covariance; alignment is not unique")]
    RankDeficient,
    #[error("threshold must be positive and finite, got {0}")]
    Threshold(f64),
    #[error("empty threshold list")]
    EmptyThresholds,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const PCK_THRESHOLD: f64 = 150.0;

/// 31 evenly spaced thresholds from 0 to 150.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| 5.0 * i as f64).collect()
}

fn check(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.ncols() != 3 {
        return Err(MetricError::Shape { pred: pred.dim(), gt: gt.dim() });
    }
    Ok(())
}

fn distances(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Vec<f64> {
    pred.rows()
        .into_iter()
        .zip(gt.rows())
        .map(|(p, g)| (0..3).map(|k| (p[k] - g[k]).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Mean Euclidean joint distance.
pub fn mpjpe(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, gt)?;
    let d = distances(pred, gt);
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

/// Similarity transform `s·R·p + t` of `pred` closest to `gt` in least
/// squares, with reflections excluded.
pub fn procrustes_align(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check(pred, gt)?;
    let n = pred.nrows();
    if n < 3 {
        return Err(MetricError::TooFewJoints(n));
    }
    let row = |a: ArrayView2<'_, f64>, i: usize| Vector3::new(a[[i, 0]], a[[i, 1]], a[[i, 2]]);
    let mu_p = (0..n).map(|i| row(pred, i)).sum::<Vector3<f64>>() / n as f64;
    let mu_g = (0..n).map(|i| row(gt, i)).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for i in 0..n {
        let p = row(pred, i) - mu_p;
        let g = row(gt, i) - mu_g;
        cov += g * p.transpose();
        var_p += p.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let sv = svd.singular_values;
    let (hi, mid) = (sv.max(), {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(f64::total_cmp);
        s[1]
    });
    if var_p <= 0.0 || hi <= 0.0 || mid <= 1e-12 * hi {
        return Err(MetricError::RankDeficient);
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("3 values");
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = sv.dot(&d.diagonal()) / var_p;
    let t = mu_g - scale * r * mu_p;
    Ok(Array2::from_shape_fn((n, 3), |(i, k)| (scale * r * row(pred, i) + t)[k]))
}

/// MPJPE after [`procrustes_align`].
pub fn reconstruction_error(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?;
    mpjpe(aligned.view(), gt)
}

fn pck_at(d: &[f64], threshold: f64) -> f64 {
    d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len().max(1) as f64
}

/// Fraction of joints within `threshold` (inclusive).
pub fn pck(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricError::Threshold(threshold));
    }
    Ok(pck_at(&distances(pred, gt), threshold))
}

/// Mean of PCK over `thresholds`.
pub fn auc(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, thresholds: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    if thresholds.is_empty() {
        return Err(MetricError::EmptyThresholds);
    }
    if let Some(&t) = thresholds.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(MetricError::Threshold(t));
    }
    let d = distances(pred, gt);
    Ok(thresholds.iter().map(|&t| pck_at(&d, t)).sum::<f64>() / thresholds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe: f64,
    pub reconst_error: f64,
    pub pck: f64,
    pub auc: f64,
    /// Mean per-vertex Euclidean error of the mesh.
    pub vertex_error: f64,
}

impl SampleMetrics {
    pub fn compute(
        id: impl Into<String>,
        pred_joints: ArrayView2<'_, f64>,
        gt_joints: ArrayView2<'_, f64>,
        pred_mesh: ArrayView2<'_, f64>,
        gt_mesh: ArrayView2<'_, f64>,
    ) -> Result<Self> {
        let id = id.into();
        let unaligned = mpjpe(pred_joints, gt_joints)?;
        let reconst_error = match reconstruction_error(pred_joints, gt_joints) {
            Err(MetricError::RankDeficient) => {
                log::warn!("{id}: degenerate joints, reconstruction error falls back to MPJPE");
                unaligned
            }
            other => other?,
        };
        Ok(Self {
            id,
            mpjpe: unaligned,
            reconst_error,
            pck: pck(pred_joints, gt_joints, PCK_THRESHOLD)?,
            auc: auc(pred_joints, gt_joints, &default_thresholds())?,
            vertex_error: mpjpe(pred_mesh, gt_mesh)?,
        })
    }
}

/// Split-level means plus the per-sample rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub reconst_error: f64,
    pub pck: f64,
    pub auc: f64,
    pub vertex_error: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            mpjpe: mean(|s| s.mpjpe),
            reconst_error: mean(|s| s.reconst_error),
            pck: mean(|s| s.pck),
            auc: mean(|s| s.auc),
            vertex_error: mean(|s| s.vertex_error),
            per_sample,
        }
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# reconst_error uses similarity (scaled) Procrustes alignment").unwrap();
        writeln!(out, "samples = {}", self.per_sample.len()).unwrap();
        writeln!(out, "mpjpe = {}", self.mpjpe).unwrap();
        writeln!(out, "reconst_error = {}", self.reconst_error).unwrap();
        writeln!(out, "pck = {}", self.pck).unwrap();
        writeln!(out, "pck_threshold = {PCK_THRESHOLD}").unwrap();
        writeln!(out, "auc = {}", self.auc).unwrap();
        writeln!(out, "vertex_error = {}", self.vertex_error).unwrap();
        out
    }

    pub fn csv_text(&self) -> String {
        let mut out = String::from("id,mpjpe,reconst_error,pck,auc,vertex_error\n");
        for s in &self.per_sample {
            writeln!(out, "{},{},{},{},{},{}", s.id, s.mpjpe, s.reconst_error, s.pck, s.auc, s.vertex_error)
                .unwrap();
        }
        out
    }

    /// Writes `<prefix>.txt` and `<prefix>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, text) in [("txt", self.summary_text()), ("csv", self.csv_text())] {
            let path = dir.join(format!("{prefix}.{ext}"));
            fs::write(&path, text).map_err(|source| MetricError::Io { path, source })?;
        }
        Ok(())
    }
}
