//! Adam, the two-phase schedule (completion pretraining, then supervised
//! training) and binary checkpoints.
//!
//! Batches are a pure function of `(seed, step)`, so a run restored from a
//! checkpoint continues exactly as the uninterrupted run would have.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, TensorError};
use crate::completion::{completion_step, make_mask, CompletionError, MaskMode, MaskSpec};
use crate::data::{Dataset, Sample};
use crate::losses::{total_loss, JointRegressor, LossWeights, Reduction, Targets};
use crate::metrics::{EvalReport, MetricError, SampleMetrics};
use crate::network::{DCGNet, NetworkError};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "dcgnet-checkpoint";
const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("checkpoint has no parameter {0}")]
    Missing(String),
    #[error("checkpoint parameter {0} is not part of the network")]
    Unexpected(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_steps: u64,
    pub main_epochs: usize,
    /// Rows zeroed per completion sample; `None` uses `round(0.116 · N)`.
    pub mask_count: Option<usize>,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_steps: 2000,
            main_epochs: 20,
            mask_count: None,
            mask_mode: MaskMode::UniformRandom,
            seed: 0,
            loss_weights: LossWeights::default(),
            reduction: Reduction::Sum,
        }
    }
}

/// Mask ratio of the best masking ablation row (200 of 1723 nodes).
pub const DEFAULT_MASK_RATIO: f64 = 0.116;

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.batch_size == 0 {
            errors.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errors.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        let w = self.loss_weights;
        for (name, v) in [("weight_vertex", w.vertex), ("weight_joint3d", w.joint3d), ("weight_joint2d", w.joint2d)] {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        errors
    }

    pub fn mask_count_for(&self, nodes: usize) -> usize {
        self.mask_count.unwrap_or_else(|| (DEFAULT_MASK_RATIO * nodes as f64).round() as usize)
    }

    fn check(&self) -> Result<()> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errors.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// Adam

/// First and second moments for every parameter of a store, plus the
/// number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.value(id).raw_dim())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients accumulated in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(TrainError::Checkpoint(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        let (value, m) = (store.value(id), &state.m[id.index()]);
        if value.dim() != m.dim() || value.dim() != state.v[id.index()].dim() {
            return Err(TrainError::Shape { name: store.name(id).to_string(), expected: value.dim(), found: m.dim() });
        }
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (config.learning_rate, config.adam_eps);
    let (ms, vs) = (&mut state.m, &mut state.v);
    store.for_each_trainable(|id, value, grad| {
        let m = &mut ms[id.index()];
        let v = &mut vs[id.index()];
        ndarray::Zip::from(value).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Main,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        })
    }
}

impl FromStr for Phase {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "main" => Ok(Phase::Main),
            other => Err(TrainError::Checkpoint(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Parameters, optimizer moments and a config snapshot.
///
/// On disk: a text header (`dcgnet-checkpoint v1`, phase, step, `config`
/// lines, then one `tensor <name> <rows> <cols> <offset> <kind>` line per
/// block, ending with `data`) followed by little-endian f64 blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: Phase,
    pub step: u64,
    pub config: Vec<(String, String)>,
    pub params: Vec<NamedTensor>,
    pub moments: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)>,
}

impl Checkpoint {
    pub fn capture(net: &DCGNet, adam: Option<&AdamState>, phase: Phase, config: Vec<(String, String)>) -> Self {
        let store = net.params();
        let params = store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                value: store.value(id).clone(),
                trainable: store.is_trainable(id),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            phase,
            step: adam.map_or(0, |a| a.step),
            config,
            params,
            moments: adam.map(|a| (a.m.clone(), a.v.clone())),
        }
    }

    /// Copies every parameter into `net`. Names and shapes must match the
    /// network one to one.
    pub fn apply(&self, net: &mut DCGNet) -> Result<()> {
        let store = net.params_mut();
        if self.params.len() != store.len() {
            for t in &self.params {
                if store.find(&t.name).is_none() {
                    return Err(TrainError::Unexpected(t.name.clone()));
                }
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.params.iter().find(|t| t.name == name).ok_or_else(|| TrainError::Missing(name.clone()))?;
            let expected = store.value(id).dim();
            if t.value.dim() != expected {
                return Err(TrainError::Shape { name, expected, found: t.value.dim() });
            }
            *store.value_mut(id) = t.value.clone();
        }
        Ok(())
    }

    /// Optimizer state laid out for `net`'s store, if moments were saved.
    pub fn adam_state(&self, net: &DCGNet) -> Result<Option<AdamState>> {
        let Some((m, v)) = &self.moments else { return Ok(None) };
        let store = net.params();
        let mut state = AdamState::new(store);
        state.step = self.step;
        for id in store.ids() {
            let i = self
                .params
                .iter()
                .position(|t| t.name == store.name(id))
                .ok_or_else(|| TrainError::Missing(store.name(id).to_string()))?;
            state.m[id.index()] = m[i].clone();
            state.v[id.index()] = v[i].clone();
        }
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks: Vec<(String, &Array2<f64>, &str)> = self
            .params
            .iter()
            .map(|t| (t.name.clone(), &t.value, if t.trainable { "param" } else { "frozen" }))
            .collect();
        if let Some((m, v)) = &self.moments {
            for (t, m) in self.params.iter().zip(m) {
                blocks.push((format!("{ADAM_M}{}", t.name), m, "moment"));
            }
            for (t, v) in self.params.iter().zip(v) {
                blocks.push((format!("{ADAM_V}{}", t.name), v, "moment"));
            }
        }
        let mut header = format!("{CHECKPOINT_MAGIC} v{}\nphase {}\nstep {}\n", self.version, self.phase, self.step);
        for (k, v) in &self.config {
            writeln!(header, "config {k} = {v}").unwrap();
        }
        let mut offset = 0usize;
        for (name, value, kind) in &blocks {
            writeln!(header, "tensor {name} {} {} {offset} {kind}", value.nrows(), value.ncols()).unwrap();
            offset += value.len() * 8;
        }
        header.push_str("data\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, value, _) in &blocks {
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let marker = b"\ndata\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing data marker".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let data = &bytes[end + marker.len()..];
        let mut lines = header.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix(CHECKPOINT_MAGIC))
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("missing checkpoint header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut phase = None;
        let mut step = None;
        let mut config = Vec::new();
        let mut params = Vec::new();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        for line in lines {
            if let Some(rest) = line.strip_prefix("config ") {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| bad(format!("bad config line {line:?}")))?;
                config.push((k.to_string(), v.to_string()));
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["phase", p] => phase = Some(p.parse()?),
                ["step", s] => step = Some(s.parse().map_err(|_| bad(format!("bad step {s:?}")))?),
                ["tensor", name, r, c, off, kind] => {
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
                    let (r, c, off) = (num(r)?, num(c)?, num(off)?);
                    let len = r * c * 8;
                    let raw = data.get(off..off + len).ok_or_else(|| bad(format!("tensor {name} out of range")))?;
                    let vals: Vec<f64> =
                        raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
                    let value = Array2::from_shape_vec((r, c), vals).expect("length checked");
                    match *kind {
                        "param" | "frozen" => {
                            params.push(NamedTensor { name: name.to_string(), value, trainable: *kind == "param" })
                        }
                        "moment" if name.starts_with(ADAM_M) => ms.push(value),
                        "moment" if name.starts_with(ADAM_V) => vs.push(value),
                        _ => return Err(bad(format!("unknown tensor kind in {line:?}"))),
                    }
                }
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        }
        let moments = match (ms.len(), vs.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((ms, vs)),
            _ => return Err(bad("moment count does not match parameter count".into())),
        };
        Ok(Self {
            version,
            phase: phase.ok_or_else(|| bad("missing phase".into()))?,
            step: step.ok_or_else(|| bad("missing step".into()))?,
            config,
            params,
            moments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// logging

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub step: u64,
    pub vertex: f64,
    pub joint3d: f64,
    pub joint2d: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "phase,step,vertex,joint3d,joint2d,total,wall_seconds";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.phase, r.step, r.vertex, r.joint3d, r.joint2d, r.total, r.wall_seconds
        )
        .unwrap();
    }
    out
}

// ---------------------------------------------------------------------------
// evaluation

pub fn evaluate(net: &DCGNet, samples: &[Sample], regressor: &JointRegressor) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = net.predict(&s.features)?;
        let joints = regressor.regress_array(pred.view());
        rows.push(SampleMetrics::compute(
            s.id.clone(),
            joints.view(),
            s.gt_joints3d.view(),
            pred.view(),
            s.gt_mesh.view(),
        )?);
    }
    Ok(EvalReport::from_samples(rows))
}

// ---------------------------------------------------------------------------
// stepping

/// Indices of the training samples used at `step`: epochs are seeded
/// permutations and the last batch of an epoch may be short.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

fn mask_seed(seed: u64, step: u64, slot: usize) -> u64 {
    // splitmix-style mixing so neighbouring steps get unrelated masks
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Owns a network and its optimizer state and advances one phase step by step.
pub struct Trainer<'a> {
    pub net: DCGNet,
    pub adam: AdamState,
    pub phase: Phase,
    pub config: TrainConfig,
    dataset: &'a Dataset,
    neighbors: Vec<Vec<usize>>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(net: DCGNet, dataset: &'a Dataset, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.check()?;
        if dataset.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let adam = AdamState::new(net.params());
        Ok(Self {
            net,
            adam,
            phase,
            config,
            neighbors: dataset.template.neighbors(),
            dataset,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(mut net: DCGNet, dataset: &'a Dataset, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.apply(&mut net)?;
        let adam = ckpt.adam_state(&net)?.unwrap_or_else(|| AdamState::new(net.params()));
        let mut t = Self::new(net, dataset, config, ckpt.phase)?;
        t.adam = adam;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self, config: Vec<(String, String)>) -> Checkpoint {
        Checkpoint::capture(&self.net, Some(&self.adam), self.phase, config)
    }

    /// Accumulates the batch-mean gradient of the current step into the
    /// network's store.
    fn accumulate(&mut self) -> Result<LogRow> {
        let n = self.dataset.train.len();
        let idx = batch_indices(self.config.seed, self.adam.step, n, self.config.batch_size);
        self.net.params_mut().zero_grad();
        let mut row = LogRow {
            phase: self.phase,
            step: self.adam.step,
            vertex: 0.0,
            joint3d: 0.0,
            joint2d: 0.0,
            total: 0.0,
            wall_seconds: 0.0,
        };
        for (slot, &i) in idx.iter().enumerate() {
            let s = &self.dataset.train[i];
            let mut tape = Tape::new();
            let loss = match self.phase {
                Phase::Pretrain => {
                    let nodes = s.features.nrows();
                    let spec = MaskSpec {
                        count: self.config.mask_count_for(nodes),
                        seed: mask_seed(self.config.seed, self.adam.step, slot),
                        mode: self.config.mask_mode,
                    };
                    let mask = make_mask(&spec, nodes, s.features.ncols(), Some(&self.neighbors))?;
                    let loss = completion_step(&self.net, &mut tape, &s.features, &s.gt_mesh, &mask, self.config.reduction)?;
                    row.vertex += tape.item(loss);
                    loss
                }
                Phase::Main => {
                    let x = tape.constant(s.features.clone());
                    let pred = self.net.forward(&mut tape, x)?;
                    let targets = Targets {
                        mesh: tape.constant(s.gt_mesh.clone()),
                        joints3d: tape.constant(s.gt_joints3d.clone()),
                        joints2d: tape.constant(s.gt_joints2d.clone()),
                    };
                    let parts = total_loss(
                        &mut tape,
                        pred,
                        targets,
                        &self.dataset.regressor,
                        &s.camera,
                        self.config.loss_weights,
                        self.config.reduction,
                    )?;
                    row.vertex += tape.item(parts.vertex);
                    row.joint3d += tape.item(parts.joint3d);
                    row.joint2d += tape.item(parts.joint2d);
                    parts.total
                }
            };
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(TrainError::NonFinite(self.adam.step));
            }
            row.total += value;
            tape.backward(loss)?;
            self.net.params_mut().accumulate_grads(&tape);
        }
        let inv = 1.0 / idx.len() as f64;
        self.net.params_mut().scale_grads(inv);
        for v in [&mut row.vertex, &mut row.joint3d, &mut row.joint2d, &mut row.total] {
            *v *= inv;
        }
        row.wall_seconds = self.started.elapsed().as_secs_f64();
        Ok(row)
    }

    /// One Adam update on the current step's batch; returns the batch losses
    /// measured before the update.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let row = self.accumulate()?;
        adam_step(self.net.params_mut(), &mut self.adam, &self.config)?;
        Ok(row)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.train.len().div_ceil(self.config.batch_size) as u64
    }
}

// ---------------------------------------------------------------------------
// phases

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Completion pretraining for `config.pretrain_steps` steps. A mask is drawn
/// per sample per step.
pub fn pretrain(net: &mut DCGNet, dataset: &Dataset, config: &TrainConfig) -> Result<PretrainOutcome> {
    pretrain_until(net, dataset, config, |_| false)
}

/// [`pretrain`] that also stops once `stop` returns true for a logged row.
pub fn pretrain_until(
    net: &mut DCGNet,
    dataset: &Dataset,
    config: &TrainConfig,
    mut stop: impl FnMut(&[LogRow]) -> bool,
) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::new(net.clone(), dataset, config.clone(), Phase::Pretrain)?;
    let mut log = Vec::new();
    let result = (|| {
        while trainer.step() < config.pretrain_steps {
            let row = trainer.train_step()?;
            log::debug!("pretrain step {} loss {:.4}", row.step, row.total);
            log.push(row);
            if stop(&log) {
                break;
            }
        }
        Ok::<_, TrainError>(())
    })();
    let checkpoint = trainer.checkpoint(Vec::new());
    *net = trainer.net;
    result.map(|_| PretrainOutcome { checkpoint, log })
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: EvalReport,
}

#[derive(Debug, Clone)]
pub struct MainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_epoch: usize,
    /// Validation after each epoch; entry 0 is the initial model.
    pub history: Vec<EpochRecord>,
    pub log: Vec<LogRow>,
}

/// Supervised training for `config.main_epochs` epochs, starting from `init`
/// when given. The network ends holding the best-validation parameters.
pub fn train_main(
    net: &mut DCGNet,
    dataset: &Dataset,
    config: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<MainOutcome> {
    if let Some(ckpt) = init {
        ckpt.apply(net)?;
    }
    let mut trainer = Trainer::new(net.clone(), dataset, config.clone(), Phase::Main)?;
    let result = continue_main(&mut trainer);
    *net = trainer.net;
    let outcome = result?;
    outcome.best.apply(net)?;
    Ok(outcome)
}

/// Runs a main-phase trainer from its current step to the end of epoch
/// `main_epochs`, validating at every epoch boundary. The trainer is left
/// at the last step; the best-validation parameters are in the outcome.
pub fn continue_main(trainer: &mut Trainer<'_>) -> Result<MainOutcome> {
    if trainer.phase != Phase::Main {
        return Err(TrainError::Config("continue_main needs a main-phase trainer".into()));
    }
    let dataset = trainer.dataset;
    let val: &[Sample] = if dataset.val.is_empty() { &dataset.train } else { &dataset.val };
    let per_epoch = trainer.steps_per_epoch();
    let start_epoch = (trainer.step() / per_epoch) as usize;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let first = evaluate(&trainer.net, val, &dataset.regressor)?;
    log::info!("epoch {start_epoch} val mpjpe {:.2}", first.mpjpe);
    history.push(EpochRecord { epoch: start_epoch, val: first });
    let mut best = (0, trainer.checkpoint(Vec::new()));
    for epoch in start_epoch + 1..=trainer.config.main_epochs {
        while trainer.step() < epoch as u64 * per_epoch {
            let row = trainer.train_step()?;
            log::debug!("step {} loss {:.4}", row.step, row.total);
            log.push(row);
        }
        let report = evaluate(&trainer.net, val, &dataset.regressor)?;
        log::info!("epoch {epoch} val mpjpe {:.2}", report.mpjpe);
        if report.mpjpe < history[best.0].val.mpjpe {
            best = (history.len(), trainer.checkpoint(Vec::new()));
        }
        history.push(EpochRecord { epoch, val: report });
    }
    let (index, best) = best;
    Ok(MainOutcome { last: trainer.checkpoint(Vec::new()), best, best_epoch: history[index].epoch, history, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::build_hierarchy;
    use crate::data::{body_regressor, body_template, generate_dataset, DataConfig};
    use crate::network::NetworkConfig;

    fn tiny() -> (crate::coarsen::MeshHierarchy, Dataset) {
        let t = body_template(42).unwrap();
        let h = build_hierarchy(&t, 3, 4).unwrap();
        let r = body_regressor(&t).unwrap();
        let cfg = DataConfig { train_count: 5, val_count: 2, test_count: 1, k_feat: 1, seed: 3, ..DataConfig::default() };
        (h, generate_dataset(&t, &r, &cfg).unwrap())
    }

    fn tiny_net(h: &crate::coarsen::MeshHierarchy) -> DCGNet {
        let cfg = NetworkConfig {
            in_features: 4,
            widths: vec![4, 4, 4, 4],
            attention_features: 2,
            nonlocal_features: 2,
            ..NetworkConfig::default()
        };
        DCGNet::new(h, cfg).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig { batch_size: 2, learning_rate: 1e-2, pretrain_steps: 3, main_epochs: 1, seed: 5, ..TrainConfig::default() }
    }

    /// Independent scalar Adam.
    fn adam_oracle(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_matches_scalar_oracle_on_a_quadratic() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 2.5));
        let mut state = AdamState::new(&store);
        let mut grads = Vec::new();
        for _ in 0..10 {
            store.zero_grad();
            // d/dx (x - 1)^2
            let g = 2.0 * (store.value(id)[[0, 0]] - 1.0);
            grads.push(g);
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let y = tape.scale(x, g);
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            store.accumulate_grads(&tape);
            adam_step(&mut store, &mut state, &cfg).unwrap();
        }
        let expected = adam_oracle(2.5, &grads, cfg.learning_rate, 0.9, 0.999, 1e-8);
        assert!((store.value(id)[[0, 0]] - expected).abs() < 1e-12);
        assert_eq!(state.step, 10);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let a = store.add("a", Array2::from_elem((2, 2), 0.7));
        let b = store.add("b", Array2::from_elem((1, 1), 0.0));
        let frozen = store.add_frozen("f", Array2::from_elem((1, 1), 3.0));
        let mut state = AdamState::new(&store);
        let mut tape = Tape::new();
        let bt = tape.param(&store, b);
        let ft = tape.param(&store, frozen);
        let y = tape.scale(bt, -4.0);
        let z = tape.add(y, ft).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape);
        adam_step(&mut store, &mut state, &cfg).unwrap();
        assert_eq!(store.value(a), &Array2::from_elem((2, 2), 0.7));
        assert_eq!(store.value(frozen)[[0, 0]], 3.0);
        // bias-corrected first step is -lr·sign(g)
        assert!((store.value(b)[[0, 0]] - 3e-4).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut store = ParamStore::new();
        store.add("a", Array2::zeros((2, 2)));
        let mut state = AdamState::new(&ParamStore::new());
        assert!(adam_step(&mut store, &mut state, &TrainConfig::default()).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (n, b) = (11, 4);
        let mut seen = vec![0; n];
        for step in 0..3 {
            for i in batch_indices(1, step, n, b) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(1, 2, n, b).len(), 3);
        assert_eq!(batch_indices(1, 5, n, b), batch_indices(1, 5, n, b));
    }

    #[test]
    fn checkpoint_bytes_round_trip_exactly() {
        let (h, d) = tiny();
        let net = tiny_net(&h);
        let mut trainer = Trainer::new(net, &d, tiny_config(), Phase::Main).unwrap();
        trainer.train_step().unwrap();
        let ckpt = trainer.checkpoint(vec![("lr".into(), "0.01".into())]);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.params.iter().zip(&ckpt.params) {
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn checkpoint_rejects_other_architectures() {
        let (h, _) = tiny();
        let net = tiny_net(&h);
        let ckpt = Checkpoint::capture(&net, None, Phase::Main, Vec::new());
        let mut other = DCGNet::new(&h, NetworkConfig { widths: vec![4, 4, 6, 6], ..tiny_net(&h).config().clone() }).unwrap();
        assert!(matches!(ckpt.apply(&mut other), Err(TrainError::Shape { .. })));
        let mut fixed = DCGNet::new(&h, NetworkConfig { adaptive: false, ..tiny_net(&h).config().clone() }).unwrap();
        assert!(matches!(ckpt.apply(&mut fixed), Err(TrainError::Unexpected(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (h, d) = tiny();
        for phase in [Phase::Pretrain, Phase::Main] {
            let mut straight = Trainer::new(tiny_net(&h), &d, tiny_config(), phase).unwrap();
            for _ in 0..4 {
                straight.train_step().unwrap();
            }
            let mut first = Trainer::new(tiny_net(&h), &d, tiny_config(), phase).unwrap();
            for _ in 0..3 {
                first.train_step().unwrap();
            }
            let bytes = first.checkpoint(Vec::new()).to_bytes();
            let mut resumed =
                Trainer::resume(tiny_net(&h), &d, tiny_config(), &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            resumed.train_step().unwrap();
            assert_eq!(resumed.net.params(), straight.net.params());
            assert_eq!(resumed.adam, straight.adam);
        }
    }

    #[test]
    fn pretrain_with_zero_steps_keeps_initialization() {
        let (h, d) = tiny();
        let mut net = tiny_net(&h);
        let init = net.params().clone();
        let out = pretrain(&mut net, &d, &TrainConfig { pretrain_steps: 0, ..tiny_config() }).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(net.params().clone(), init);
        let fresh = Checkpoint::capture(&tiny_net(&h), None, Phase::Pretrain, Vec::new());
        assert_eq!(out.checkpoint.params, fresh.params);
    }

    #[test]
    fn pretrained_parameters_load_without_remapping() {
        let (h, d) = tiny();
        let mut net = tiny_net(&h);
        let out = pretrain(&mut net, &d, &tiny_config()).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
        let mut main = tiny_net(&h);
        out.checkpoint.apply(&mut main).unwrap();
        for id in net.params().ids() {
            assert_eq!(main.params().value(id), net.params().value(id));
        }
    }

    #[test]
    fn main_training_is_deterministic_and_starts_from_init_eval() {
        let (h, d) = tiny();
        let run = || {
            let mut net = tiny_net(&h);
            let out = train_main(&mut net, &d, &tiny_config(), None).unwrap();
            (net, out)
        };
        let (net_a, a) = run();
        let (net_b, b) = run();
        assert_eq!(a.last, b.last);
        assert_eq!(net_a.params(), net_b.params());
        let init = evaluate(&tiny_net(&h), &d.val, &d.regressor).unwrap();
        assert_eq!(a.history[0].val, init);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.log.len(), 3);
        assert!(log_csv(&a.log).starts_with(LOG_HEADER));
    }

    #[test]
    fn resumed_main_phase_reaches_the_same_end_state() {
        let (h, d) = tiny();
        let cfg = TrainConfig { main_epochs: 2, ..tiny_config() };
        let mut straight = tiny_net(&h);
        let full = train_main(&mut straight, &d, &cfg, None).unwrap();
        let mut first = Trainer::new(tiny_net(&h), &d, cfg.clone(), Phase::Main).unwrap();
        for _ in 0..4 {
            first.train_step().unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&first.checkpoint(Vec::new()).to_bytes()).unwrap();
        let mut resumed = Trainer::resume(tiny_net(&h), &d, cfg, &ckpt).unwrap();
        let rest = continue_main(&mut resumed).unwrap();
        assert_eq!(rest.last, full.last);
        assert_eq!(rest.history[0].epoch, 1);
        assert_eq!(rest.history.last().unwrap().val, full.history.last().unwrap().val);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = TrainConfig { batch_size: 0, learning_rate: -1.0, adam_beta1: 1.5, ..TrainConfig::default() };
        assert_eq!(cfg.validate().len(), 3);
    }
}
