//! Synthetic body-like meshes and datasets: a programmatic template, smooth
//! random deformations with rigid pose, noisy "initial mesh" inputs, joints,
//! cameras and occluded test copies.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::coarsen::{decimate, CoarsenError};
use crate::completion::{make_mask, CompletionError, MaskMode, MaskSpec};
use crate::losses::{Camera, JointRegressor, LossError};
use crate::mesh::{load_obj, save_obj, MeshError, SparseMatrix, TriMesh};

pub const DEFAULT_TEMPLATE_NODES: usize = 432;
pub const NUM_JOINTS: usize = 12;
const SAMPLE_HEADER: &str = "dcgnet-sample v1";
const MANIFEST_HEADER: &str = "dcgnet-dataset v1";
const DEFORM_TERMS: usize = 3;
const JOINT_SUPPORT: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("node count mismatch: expected {expected}, found {found}")]
    NodeCount { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate sample {0:?} in manifest")]
    Duplicate(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Coarsen(#[from] CoarsenError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Completion(#[from] CompletionError),
}

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    OccludedTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::OccludedTest];

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
            Split::OccludedTest => 4,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::OccludedTest => "occluded_test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL.into_iter().find(|v| v.to_string() == s).ok_or_else(|| format!("unknown split {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// template

/// Unit-sphere direction → body surface point, before decimation.
fn body_point(d: [f64; 3]) -> [f64; 3] {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    };
    // (direction, amplitude, width) of head, arms and legs
    let bumps = [
        (unit([0.0, 1.0, 0.0]), 0.35, 0.02),
        (unit([1.0, 0.25, 0.0]), 1.6, 0.05),
        (unit([-1.0, 0.25, 0.0]), 1.6, 0.05),
        (unit([0.3, -1.0, 0.0]), 0.5, 0.04),
        (unit([-0.3, -1.0, 0.0]), 0.5, 0.04),
    ];
    let mut r = 1.0;
    for (u, a, w) in bumps {
        let c = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        r += a * ((c - 1.0) / w).exp();
    }
    let radii = [180.0, 600.0, 120.0];
    [radii[0] * d[0] * r, radii[1] * d[1] * r, radii[2] * d[2] * r]
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Body-like closed mesh in millimetres (roughly 1.7 m tall, y up) with
/// exactly `nodes` vertices. Coordinates are rounded to 1e-6 so the OBJ
/// round trip is exact.
pub fn body_template(nodes: usize) -> Result<TriMesh> {
    if nodes < 12 {
        return Err(DataError::Config(format!("template needs at least 12 nodes, got {nodes}")));
    }
    let mut level = 0;
    while TriMesh::icosphere(level).num_vertices() < nodes {
        level += 1;
    }
    let shaped = TriMesh::icosphere(level).map_vertices(|d| body_point(d).map(round6));
    if shaped.num_vertices() == nodes {
        return Ok(shaped);
    }
    let (mesh, _) = decimate(&shaped, nodes)?;
    Ok(mesh.map_vertices(|v| v.map(round6)))
}

/// `NUM_JOINTS` joints, each the mean of the template vertices nearest a
/// body landmark.
pub fn body_regressor(template: &TriMesh) -> Result<JointRegressor> {
    let landmarks: [(&str, [f64; 3]); NUM_JOINTS] = [
        ("head", [0.0, 1.0, 0.0]),
        ("neck", [0.0, 0.8, 0.0]),
        ("right_shoulder", [0.6, 0.55, 0.0]),
        ("left_shoulder", [-0.6, 0.55, 0.0]),
        ("right_hand", [1.0, 0.25, 0.0]),
        ("left_hand", [-1.0, 0.25, 0.0]),
        ("right_hip", [0.35, -0.6, 0.0]),
        ("left_hip", [-0.35, -0.6, 0.0]),
        ("right_foot", [0.3, -1.0, 0.0]),
        ("left_foot", [-0.3, -1.0, 0.0]),
        ("chest", [0.0, 0.3, 1.0]),
        ("back", [0.0, -0.2, -1.0]),
    ];
    let n = template.num_vertices();
    let k = JOINT_SUPPORT.min(n);
    let mut triplets = Vec::new();
    for (j, (_, dir)) in landmarks.iter().enumerate() {
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = body_point(dir.map(|x| x / norm));
        let mut order: Vec<(f64, usize)> = template
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, v)| ((0..3).map(|a| (v[a] - target[a]).powi(2)).sum::<f64>(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..k] {
            triplets.push((j, i, 1.0 / k as f64));
        }
    }
    let names = landmarks.iter().map(|(name, _)| name.to_string()).collect();
    Ok(JointRegressor::new(SparseMatrix::from_triplets(NUM_JOINTS, n, triplets)?, names)?)
}

pub fn mesh_to_array(mesh: &TriMesh) -> Array2<f64> {
    Array2::from_shape_fn((mesh.num_vertices(), 3), |(i, k)| mesh.vertices()[i][k])
}

// ---------------------------------------------------------------------------
// samples

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Array2<f64>,
    pub gt_mesh: Array2<f64>,
    pub gt_joints3d: Array2<f64>,
    pub gt_joints2d: Array2<f64>,
    pub camera: Camera,
}

impl Sample {
    /// Joints and projection recomputed from the mesh match bit-exactly.
    pub fn is_consistent(&self, regressor: &JointRegressor) -> bool {
        let j3 = regressor.regress_array(self.gt_mesh.view());
        let j2 = self.camera.project_array(j3.view());
        j3 == self.gt_joints3d && j2 == self.gt_joints2d
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{SAMPLE_HEADER}").unwrap();
        writeln!(out, "id {}", self.id).unwrap();
        let [tx, ty] = self.camera.translation;
        writeln!(out, "camera {} {} {}", self.camera.scale, tx, ty).unwrap();
        for (label, m) in [
            ("features", &self.features),
            ("gt_mesh", &self.gt_mesh),
            ("gt_joints3d", &self.gt_joints3d),
            ("gt_joints2d", &self.gt_joints2d),
        ] {
            writeln!(out, "{label} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", cells.join(" ")).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| DataError::Parse { path: path.to_path_buf(), line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, SAMPLE_HEADER)) => {}
            _ => return Err(bad(1, "missing sample header".into())),
        }
        let mut id = None;
        let mut camera = None;
        let mut blocks: Vec<(String, Array2<f64>)> = Vec::new();
        while let Some((no, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["end"] => break,
                ["id", v] => id = Some(v.to_string()),
                ["camera", s, tx, ty] => {
                    let p = |x: &str| x.parse::<f64>().map_err(|_| bad(no, format!("bad number {x:?}")));
                    camera = Some(Camera::new(p(s)?, [p(tx)?, p(ty)?]).map_err(|e| bad(no, e.to_string()))?);
                }
                [label, r, c] => {
                    let r: usize = r.parse().map_err(|_| bad(no, "bad row count".into()))?;
                    let c: usize = c.parse().map_err(|_| bad(no, "bad column count".into()))?;
                    let mut m = Array2::zeros((r, c));
                    for i in 0..r {
                        let (rno, row) = lines.next().ok_or_else(|| bad(no, format!("{label}: truncated block")))?;
                        let vals: Vec<f64> = row
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(rno, "bad number".into()))?;
                        if vals.len() != c {
                            return Err(bad(rno, format!("expected {c} values, found {}", vals.len())));
                        }
                        m.row_mut(i).assign(&ndarray::ArrayView1::from(&vals[..]));
                    }
                    blocks.push((label.to_string(), m));
                }
                _ => return Err(bad(no, format!("unexpected line {line:?}"))),
            }
        }
        let mut take = |name: &str| {
            blocks
                .iter()
                .position(|(l, _)| l == name)
                .map(|i| blocks.swap_remove(i).1)
                .ok_or_else(|| bad(0, format!("missing block {name}")))
        };
        Ok(Sample {
            features: take("features")?,
            gt_mesh: take("gt_mesh")?,
            gt_joints3d: take("gt_joints3d")?,
            gt_joints2d: take("gt_joints2d")?,
            id: id.ok_or_else(|| bad(0, "missing id".into()))?,
            camera: camera.ok_or_else(|| bad(0, "missing camera".into()))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

// ---------------------------------------------------------------------------
// generation

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Per-axis bound (mm) on the smooth deformation field.
    pub deform_scale: f64,
    /// Input noise σ as a fraction of the template bounding-box diagonal.
    pub noise_fraction: f64,
    pub k_feat: usize,
    pub occlusion_fraction: f64,
    /// Bound on the random yaw, in degrees.
    pub max_yaw_deg: f64,
    /// Bound on each translation component, in mm.
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 128,
            val_count: 32,
            test_count: 32,
            deform_scale: 40.0,
            noise_fraction: 0.05,
            k_feat: 16,
            occlusion_fraction: 0.116,
            max_yaw_deg: 30.0,
            max_translation: 100.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.train_count == 0 {
            errors.push("train_count must be positive".to_string());
        }
        for (name, v) in [
            ("deform_scale", self.deform_scale),
            ("noise_fraction", self.noise_fraction),
            ("max_yaw_deg", self.max_yaw_deg),
            ("max_translation", self.max_translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.occlusion_fraction > 0.0 && self.occlusion_fraction < 1.0) {
            errors.push(format!("occlusion_fraction must lie in (0, 1), got {}", self.occlusion_fraction));
        }
        errors
    }

    /// Input width: noisy coordinates plus projections.
    pub fn in_features(&self) -> usize {
        3 + self.k_feat
    }
}

/// Sinusoidal displacement field with every component bounded by `scale`.
pub(crate) fn deformation_field(base: &Array2<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = base.nrows();
    let centroid = base.mean_axis(ndarray::Axis(0)).expect("non-empty mesh");
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for row in base.rows() {
        for k in 0..3 {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    let diag = (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut disp = Array2::zeros((n, 3));
    for axis in 0..3 {
        for term in 0..DEFORM_TERMS {
            let dir: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let freq = PI * (term + 1) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let coef = scale / DEFORM_TERMS as f64 * rng.random_range(-1.0..=1.0);
            for i in 0..n {
                let t: f64 = (0..3).map(|k| dir[k] / norm * (base[[i, k]] - centroid[k]) / diag).sum();
                disp[[i, axis]] += coef * (freq * t + phase).sin();
            }
        }
    }
    disp
}

fn rigid(points: &Array2<f64>, yaw: f64, t: [f64; 3]) -> Array2<f64> {
    let (s, c) = yaw.sin_cos();
    let mut out = Array2::zeros(points.raw_dim());
    for (i, p) in points.rows().into_iter().enumerate() {
        out[[i, 0]] = c * p[0] + s * p[2] + t[0];
        out[[i, 1]] = p[1] + t[1];
        out[[i, 2]] = -s * p[0] + c * p[2] + t[2];
    }
    out
}

/// `[noisy ‖ noisy · P]`.
fn input_features(noisy: &Array2<f64>, projection: &Array2<f64>) -> Array2<f64> {
    let n = noisy.nrows();
    let k = projection.ncols();
    let mut out = Array2::zeros((n, 3 + k));
    out.slice_mut(s![.., ..3]).assign(noisy);
    for i in 0..n {
        for j in 0..k {
            out[[i, 3 + j]] = (0..3).map(|a| noisy[[i, a]] * projection[[a, j]]).sum();
        }
    }
    out
}

/// The fixed `3 × k_feat` projection shared by every sample of a dataset.
pub fn feature_projection(seed: u64, k_feat: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let normal = Normal::new(0.0, 1.0 / 3f64.sqrt()).expect("valid sigma");
    Array2::from_shape_fn((3, k_feat), |_| normal.sample(&mut rng))
}

fn generate_sample(
    template: &Array2<f64>,
    diag: f64,
    regressor: &JointRegressor,
    projection: &Array2<f64>,
    config: &DataConfig,
    split: Split,
    index: usize,
) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((split.stream() << 32) | index as u64);
    let deformed = template + &deformation_field(template, config.deform_scale, &mut rng);
    let yaw = config.max_yaw_deg.to_radians() * rng.random_range(-1.0..=1.0);
    let t: [f64; 3] = std::array::from_fn(|_| config.max_translation * rng.random_range(-1.0..=1.0));
    let gt_mesh = rigid(&deformed, yaw, t);
    let sigma = config.noise_fraction * diag;
    let noisy = gt_mesh.mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    let features = input_features(&noisy, projection);
    let camera = Camera {
        scale: 0.2 * rng.random_range(0.9..=1.1),
        translation: [112.0 + rng.random_range(-8.0..=8.0), 112.0 + rng.random_range(-8.0..=8.0)],
    };
    let gt_joints3d = regressor.regress_array(gt_mesh.view());
    let gt_joints2d = camera.project_array(gt_joints3d.view());
    Sample { id: format!("{split}_{index:05}"), features, gt_mesh, gt_joints3d, gt_joints2d, camera }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub template: TriMesh,
    pub regressor: JointRegressor,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub occluded_test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::OccludedTest => &self.occluded_test,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.template.num_vertices()
    }

    pub fn in_features(&self) -> usize {
        self.train.first().map_or(self.config.in_features(), |s| s.features.ncols())
    }
}

/// Generates train/val/test splits plus the occluded copy of the test split.
/// A pure function of the template, regressor and config.
pub fn generate_dataset(template: &TriMesh, regressor: &JointRegressor, config: &DataConfig) -> Result<Dataset> {
    let errors = config.validate();
    if !errors.is_empty() {
        return Err(DataError::Config(errors.join("; ")));
    }
    if regressor.num_vertices() != template.num_vertices() {
        return Err(DataError::NodeCount { expected: template.num_vertices(), found: regressor.num_vertices() });
    }
    let base = mesh_to_array(template);
    let diag = template.bounding_box_diagonal();
    let projection = feature_projection(config.seed, config.k_feat);
    let make = |split: Split, count: usize| -> Vec<Sample> {
        (0..count).map(|i| generate_sample(&base, diag, regressor, &projection, config, split, i)).collect()
    };
    let test = make(Split::Test, config.test_count);
    let occluded_test = generate_occluded_split(&test, template, config.occlusion_fraction, config.seed)?;
    Ok(Dataset {
        config: config.clone(),
        template: template.clone(),
        regressor: regressor.clone(),
        train: make(Split::Train, config.train_count),
        val: make(Split::Val, config.val_count),
        test,
        occluded_test,
    })
}

/// Copies of `test` with a contiguous patch of `round(fraction · N)` input
/// rows zeroed; ground truth is untouched.
pub fn generate_occluded_split(test: &[Sample], template: &TriMesh, fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Config(format!("occlusion fraction must lie in (0, 1), got {fraction}")));
    }
    let n = template.num_vertices();
    let neighbors = template.neighbors();
    let count = (fraction * n as f64).round() as usize;
    test.iter()
        .enumerate()
        .map(|(i, sample)| {
            if sample.features.nrows() != n {
                return Err(DataError::NodeCount { expected: n, found: sample.features.nrows() });
            }
            let spec = MaskSpec {
                count,
                seed: seed ^ (Split::OccludedTest.stream() << 32 | i as u64),
                mode: MaskMode::ContiguousPatch,
            };
            let mask = make_mask(&spec, n, sample.features.ncols(), Some(&neighbors))?;
            let mut occluded = sample.clone();
            occluded.id = format!("{}_{i:05}", Split::OccludedTest);
            occluded.features = mask.apply_array(&sample.features);
            Ok(occluded)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// manifest

/// Line-oriented dataset index. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub generator_seed: u64,
    pub template_path: PathBuf,
    pub hierarchy_path: Option<PathBuf>,
    pub regressor_path: PathBuf,
    pub samples: Vec<(Split, PathBuf)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\ngenerator_seed {}\n", self.generator_seed);
        writeln!(out, "template {}", self.template_path.display()).unwrap();
        if let Some(h) = &self.hierarchy_path {
            writeln!(out, "hierarchy {}", h.display()).unwrap();
        }
        writeln!(out, "regressor {}", self.regressor_path.display()).unwrap();
        for (split, path) in &self.samples {
            writeln!(out, "sample {split} {}", path.display()).unwrap();
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| DataError::Parse { path: path.to_path_buf(), line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(bad(1, "missing dataset header".into())),
        }
        let (mut seed, mut template, mut hierarchy, mut regressor) = (None, None, None, None);
        let mut samples = Vec::new();
        let mut seen = BTreeSet::new();
        for (no, line) in lines {
            let parts: Vec<&str> = line.splitn(3, ' ').collect();
            match parts.as_slice() {
                ["generator_seed", v] => seed = Some(v.parse().map_err(|_| bad(no, "bad seed".into()))?),
                ["template", p] => template = Some(PathBuf::from(p)),
                ["hierarchy", p] => hierarchy = Some(PathBuf::from(p)),
                ["regressor", p] => regressor = Some(PathBuf::from(p)),
                ["sample", split, p] => {
                    let split: Split = split.parse().map_err(|e| bad(no, e))?;
                    if !seen.insert(p.to_string()) {
                        return Err(DataError::Duplicate(p.to_string()));
                    }
                    samples.push((split, PathBuf::from(p)));
                }
                _ => return Err(bad(no, format!("unexpected line {line:?}"))),
            }
        }
        Ok(Self {
            generator_seed: seed.ok_or_else(|| bad(0, "missing generator_seed".into()))?,
            template_path: template.ok_or_else(|| bad(0, "missing template".into()))?,
            hierarchy_path: hierarchy,
            regressor_path: regressor.ok_or_else(|| bad(0, "missing regressor".into()))?,
            samples,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

/// Writes the template, regressor, one file per sample and `manifest.txt`
/// under `dir`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>, hierarchy_path: Option<PathBuf>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    save_obj(&dataset.template, dir.join("template.obj"))?;
    dataset.regressor.save(dir.join("regressor.txt"))?;
    let mut samples = Vec::new();
    for split in Split::ALL {
        for sample in dataset.split(split) {
            let rel = PathBuf::from("samples").join(format!("{}.txt", sample.id));
            sample.save(dir.join(&rel))?;
            samples.push((split, rel));
        }
    }
    let manifest = DatasetManifest {
        generator_seed: dataset.config.seed,
        template_path: "template.obj".into(),
        hierarchy_path,
        regressor_path: "regressor.txt".into(),
        samples,
    };
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a dataset written by [`save_dataset`]. Generation knobs other than
/// the seed are not stored and come back as defaults.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::load(manifest_path)?;
    let template = load_obj(dir.join(&manifest.template_path))?;
    let regressor = JointRegressor::load(dir.join(&manifest.regressor_path))?;
    let mut dataset = Dataset {
        config: DataConfig { seed: manifest.generator_seed, ..DataConfig::default() },
        template,
        regressor,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        occluded_test: Vec::new(),
    };
    let n = dataset.template.num_vertices();
    for (split, rel) in &manifest.samples {
        let sample = Sample::load(dir.join(rel))?;
        if sample.gt_mesh.nrows() != n || sample.features.nrows() != n {
            return Err(DataError::NodeCount { expected: n, found: sample.gt_mesh.nrows() });
        }
        match split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
            Split::OccludedTest => dataset.occluded_test.push(sample),
        }
    }
    dataset.config.train_count = dataset.train.len();
    dataset.config.val_count = dataset.val.len();
    dataset.config.test_count = dataset.test.len();
    if let Some(first) = dataset.train.first() {
        dataset.config.k_feat = first.features.ncols().saturating_sub(3);
    }
    Ok(dataset)
}
