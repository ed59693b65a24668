//! The U-shaped encoder/decoder over a mesh hierarchy, with multi-level
//! attention fusion in the decoder and a non-local block at the bottleneck.
//!
//! Encoder, for `l = 0..L`: `H_l = units_l(·)`, `Y_{l+1} = down_l · FC_l(H_l)`.
//! Decoder, for `j = L..1`: `S = units_j(FC([FC(S); FC(m(Y_1..Y_s)); Y_j]))`
//! with `s = L - j + 1`, then `S = up_{j-1} · S`. A final level-0 stage joins
//! the upsampled state with `H_0` before the coordinate head.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{GroupNormStats, ParamId, ParamStore, Tape, Tensor, TensorError};
use crate::coarsen::MeshHierarchy;
use crate::layers::{
    default_groups, AdaptiveAdjacency, AdaptiveGraphConvLayer, FullyConnected, GCNUnit, GraphAttention,
    GraphConv, GraphConvLayer, GroupNorm, NonLocalBlock,
};
use crate::mesh::{build_adjacency, SparseMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Per-vertex input width: 3 coordinates plus extra features.
    pub in_features: usize,
    /// Feature width per level (`depth + 1` entries). Empty selects defaults.
    pub widths: Vec<usize>,
    pub units_per_level: usize,
    /// Output width `p` of each fusion attention branch.
    pub attention_features: usize,
    pub adaptive: bool,
    /// One learned residual per level instead of one per layer.
    pub share_adjacency: bool,
    /// Keep learned residuals at the identity (registered, not trained).
    pub freeze_adjacency: bool,
    pub nonlocal: bool,
    /// Encoder level whose output passes through the non-local block;
    /// `None` means the coarsest.
    pub nonlocal_level: Option<usize>,
    pub nonlocal_features: usize,
    pub groupnorm_stats: GroupNormStats,
    /// Inputs are divided and outputs multiplied by this factor.
    pub coord_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_features: 19,
            widths: Vec::new(),
            units_per_level: 2,
            attention_features: 16,
            adaptive: true,
            share_adjacency: false,
            freeze_adjacency: false,
            nonlocal: true,
            nonlocal_level: None,
            nonlocal_features: 16,
            groupnorm_stats: GroupNormStats::AcrossNodes,
            coord_scale: 1000.0,
            seed: 0,
        }
    }
}

/// 16 at the finest level, doubling per level up to 64.
pub fn default_widths(depth: usize) -> Vec<usize> {
    (0..=depth).map(|l| (16usize << l.min(2)).min(64)).collect()
}

/// Encoder outputs: `H_0` plus `Y_1..Y_L` (`levels[i - 1]` is `Y_i`).
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub h0: Tensor,
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fc_state: FullyConnected,
    fc_fused: Option<FullyConnected>,
    fc_out: FullyConnected,
    units: Vec<GCNUnit>,
}

#[derive(Debug, Clone)]
pub struct DCGNet {
    config: NetworkConfig,
    widths: Vec<usize>,
    node_counts: Vec<usize>,
    params: ParamStore,
    enc_units: Vec<Vec<GCNUnit>>,
    down_fcs: Vec<FullyConnected>,
    down_ops: Vec<Arc<SparseMatrix>>,
    up_ops: Vec<Arc<SparseMatrix>>,
    attention: Vec<GraphAttention>,
    neighborhoods: Vec<Array2<bool>>,
    resamplers: BTreeMap<(usize, usize), Arc<SparseMatrix>>,
    decoder: Vec<DecoderStage>,
    nonlocal: Option<NonLocalBlock>,
    head: GCNUnit,
    head_bias: ParamId,
    adaptive_sizes: Vec<usize>,
}

struct Builder<'a> {
    config: &'a NetworkConfig,
    hierarchy: &'a MeshHierarchy,
    store: ParamStore,
    rng: ChaCha8Rng,
    bases: Vec<Arc<Array2<f64>>>,
    shared: Vec<Option<AdaptiveAdjacency>>,
    adaptive_sizes: Vec<usize>,
}

impl Builder<'_> {
    fn conv(&mut self, level: usize, name: &str, in_f: usize, out_f: usize) -> GraphConv {
        if !self.config.adaptive {
            let adj = &self.hierarchy.adjacencies[level];
            return GraphConv::Fixed(GraphConvLayer::new(&mut self.store, name, adj, in_f, out_f, &mut self.rng));
        }
        let adjacency = match (&self.shared[level], self.config.share_adjacency) {
            (Some(a), true) => a.clone(),
            _ => {
                let adj_name = if self.config.share_adjacency { format!("adj{level}") } else { format!("{name}.adj") };
                let a = AdaptiveAdjacency::with_base(
                    &mut self.store,
                    &adj_name,
                    self.bases[level].clone(),
                    self.config.freeze_adjacency,
                );
                self.adaptive_sizes.push(a.size());
                if self.config.share_adjacency {
                    self.shared[level] = Some(a.clone());
                }
                a
            }
        };
        GraphConv::Adaptive(AdaptiveGraphConvLayer::new(&mut self.store, name, adjacency, in_f, out_f, &mut self.rng))
    }

    fn unit(&mut self, level: usize, name: &str, in_f: usize, out_f: usize) -> GCNUnit {
        let norm = GroupNorm::new(
            &mut self.store,
            &format!("{name}.gn"),
            in_f,
            default_groups(in_f),
            self.config.groupnorm_stats,
        );
        let conv = self.conv(level, &format!("{name}.conv"), in_f, out_f);
        GCNUnit::new(norm, conv)
    }

    fn fc(&mut self, name: &str, in_f: usize, out_f: usize) -> FullyConnected {
        FullyConnected::new(&mut self.store, name, in_f, out_f, &mut self.rng)
    }
}

impl DCGNet {
    pub fn new(hierarchy: &MeshHierarchy, config: NetworkConfig) -> Result<Self, NetworkError> {
        let depth = hierarchy.depth();
        let widths = if config.widths.is_empty() { default_widths(depth) } else { config.widths.clone() };
        let bad = |m: String| Err(NetworkError::Config(m));
        if depth < 1 {
            return bad("hierarchy needs at least one coarsening level".into());
        }
        if widths.len() != depth + 1 {
            return bad(format!("{} widths for {} levels", widths.len(), depth + 1));
        }
        if widths.contains(&0) || config.in_features == 0 || config.attention_features == 0 {
            return bad("feature widths must be positive".into());
        }
        if config.units_per_level == 0 {
            return bad("units_per_level must be at least 1".into());
        }
        if !(config.coord_scale > 0.0 && config.coord_scale.is_finite()) {
            return bad(format!("coord_scale must be positive, got {}", config.coord_scale));
        }
        let nonlocal_level = config.nonlocal_level.unwrap_or(depth);
        if config.nonlocal && !(1..=depth).contains(&nonlocal_level) {
            return bad(format!("nonlocal_level must be in 1..={depth}"));
        }

        let node_counts = hierarchy.node_counts();
        let bases = hierarchy.levels.iter().map(|m| Arc::new(build_adjacency(m, false, true).dense())).collect();
        let mut b = Builder {
            config: &config,
            hierarchy,
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bases,
            shared: vec![None; depth + 1],
            adaptive_sizes: Vec::new(),
        };
        let u = config.units_per_level;
        let p = config.attention_features;

        let mut enc_units = Vec::with_capacity(depth);
        let mut down_fcs = Vec::with_capacity(depth);
        for l in 0..depth {
            let units = (0..u)
                .map(|k| {
                    let in_f = if l == 0 && k == 0 { config.in_features } else { widths[l] };
                    b.unit(l, &format!("enc{l}.unit{k}"), in_f, widths[l])
                })
                .collect();
            enc_units.push(units);
            down_fcs.push(b.fc(&format!("down{l}.fc"), widths[l], widths[l + 1]));
        }
        let nonlocal = config.nonlocal.then(|| {
            NonLocalBlock::new(&mut b.store, "nonlocal", widths[nonlocal_level], config.nonlocal_features, &mut b.rng)
        });
        let attention: Vec<_> =
            (1..=depth).map(|i| GraphAttention::new(&mut b.store, &format!("att{i}"), widths[i], p, &mut b.rng)).collect();

        let mut decoder: Vec<Option<DecoderStage>> = vec![None; depth + 1];
        for j in (0..=depth).rev() {
            let state_in = if j == depth { widths[depth] } else { widths[j + 1] };
            let fc_state = b.fc(&format!("dec{j}.fc_state"), state_in, widths[j]);
            let (fc_fused, branches) = if j == 0 {
                (None, 2)
            } else {
                let s = depth - j + 1;
                (Some(b.fc(&format!("dec{j}.fc_fused"), s * p, widths[j])), 3)
            };
            let fc_out = b.fc(&format!("dec{j}.fc_out"), branches * widths[j], widths[j]);
            let units = (0..u).map(|k| b.unit(j, &format!("dec{j}.unit{k}"), widths[j], widths[j])).collect();
            decoder[j] = Some(DecoderStage { fc_state, fc_fused, fc_out, units });
        }
        let head = b.unit(0, "head", widths[0], 3);
        let head_bias = b.store.add("head.vertex_bias", Array2::zeros((node_counts[0], 3)));

        let mut resamplers = BTreeMap::new();
        for j in 1..=depth {
            for i in 1..=depth - j + 1 {
                resamplers.insert((i, j), Arc::new(hierarchy.resampler(i, j)));
            }
        }
        let neighborhoods = (1..=depth).map(|i| GraphAttention::neighborhood(&hierarchy.adjacencies[i])).collect();

        Ok(Self {
            widths,
            node_counts,
            enc_units,
            down_fcs,
            down_ops: hierarchy.samplers.iter().map(|s| s.down.clone()).collect(),
            up_ops: hierarchy.samplers.iter().map(|s| s.up.clone()).collect(),
            attention,
            neighborhoods,
            resamplers,
            decoder: decoder.into_iter().map(|d| d.expect("every level built")).collect(),
            nonlocal,
            head,
            head_bias,
            adaptive_sizes: b.adaptive_sizes,
            params: b.store,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn depth(&self) -> usize {
        self.node_counts.len() - 1
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_bias
    }

    /// Sizes of the learned adjacency residuals, one per distinct residual.
    pub fn adaptive_sizes(&self) -> &[usize] {
        &self.adaptive_sizes
    }

    fn level_check(&self, tape: &Tape, t: Tensor, level: usize) {
        debug_assert_eq!(tape.shape(t).0, self.node_counts[level], "row count at level {level}");
    }

    fn nonlocal_at(&self, level: usize) -> Option<&NonLocalBlock> {
        let at = self.config.nonlocal_level.unwrap_or(self.depth());
        self.nonlocal.as_ref().filter(|_| at == level)
    }

    pub fn encode(&self, tape: &mut Tape, x: Tensor) -> Result<EncoderFeatures, NetworkError> {
        self.encode_with(tape, &self.params, x)
    }

    fn encode_with(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<EncoderFeatures, NetworkError> {
        let (rows, cols) = tape.shape(x);
        if rows != self.node_counts[0] || cols != self.config.in_features {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: (rows, cols),
                rhs: (self.node_counts[0], self.config.in_features),
            }
            .into());
        }
        let mut h = tape.scale(x, 1.0 / self.config.coord_scale);
        let mut h0 = None;
        let mut levels = Vec::with_capacity(self.depth());
        for l in 0..self.depth() {
            for unit in &self.enc_units[l] {
                h = unit.forward(tape, store, h)?;
            }
            self.level_check(tape, h, l);
            if l == 0 {
                h0 = Some(h);
            }
            let f = self.down_fcs[l].forward(tape, store, h)?;
            let mut y = tape.sparse_matmul(&self.down_ops[l], f)?;
            if let Some(block) = self.nonlocal_at(l + 1) {
                y = block.forward(tape, store, y)?;
            }
            self.level_check(tape, y, l + 1);
            levels.push(y);
            h = y;
        }
        Ok(EncoderFeatures { h0: h0.expect("depth >= 1"), levels })
    }

    /// `FC(m(Y_1..Y_l))` at decoder level `L - l + 1`.
    pub fn fuse(&self, tape: &mut Tape, features: &EncoderFeatures, l: usize) -> Result<Tensor, NetworkError> {
        self.fuse_with(tape, &self.params, features, l)
    }

    fn fuse_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &EncoderFeatures,
        l: usize,
    ) -> Result<Tensor, NetworkError> {
        let depth = self.depth();
        if !(1..=depth).contains(&l) {
            return Err(NetworkError::Config(format!("fusion index {l} outside 1..={depth}")));
        }
        let j = depth - l + 1;
        let mut branches = Vec::with_capacity(l);
        for i in 1..=l {
            let att = self.attention[i - 1].forward(tape, store, features.levels[i - 1], &self.neighborhoods[i - 1])?;
            let att = tape.relu(att);
            let resampled = tape.sparse_matmul(&self.resamplers[&(i, j)], att)?;
            self.level_check(tape, resampled, j);
            branches.push(resampled);
        }
        let cat = tape.concat_cols(&branches)?;
        let fc = self.decoder[j].fc_fused.as_ref().expect("fusion FC above level 0");
        Ok(fc.forward(tape, store, cat)?)
    }

    pub fn decode(&self, tape: &mut Tape, features: &EncoderFeatures) -> Result<Tensor, NetworkError> {
        self.decode_with(tape, &self.params, features)
    }

    fn decode_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &EncoderFeatures,
    ) -> Result<Tensor, NetworkError> {
        let depth = self.depth();
        let mut state = features.levels[depth - 1];
        for j in (0..=depth).rev() {
            let stage = &self.decoder[j];
            let a = stage.fc_state.forward(tape, store, state)?;
            let combined = if j == 0 {
                tape.concat_cols(&[a, features.h0])?
            } else {
                let b = self.fuse_with(tape, store, features, depth - j + 1)?;
                tape.concat_cols(&[a, b, features.levels[j - 1]])?
            };
            let mut s = stage.fc_out.forward(tape, store, combined)?;
            for unit in &stage.units {
                s = unit.forward(tape, store, s)?;
            }
            self.level_check(tape, s, j);
            state = if j > 0 { tape.sparse_matmul(&self.up_ops[j - 1], s)? } else { s };
        }
        let coords = self.head.forward(tape, store, state)?;
        let bias = tape.param(store, self.head_bias);
        let coords = tape.add(coords, bias)?;
        Ok(tape.scale(coords, self.config.coord_scale))
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, NetworkError> {
        self.forward_with(tape, &self.params, x)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// network's layout (for example a perturbed clone of [`DCGNet::params`]).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor, NetworkError> {
        let features = self.encode_with(tape, store, x)?;
        self.decode_with(tape, store, &features)
    }

    /// Forward on a plain array with a throwaway tape.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>, NetworkError> {
        let mut tape = Tape::new();
        let xt = tape.constant(x.clone());
        let y = self.forward(&mut tape, xt)?;
        Ok(tape.value(y).clone())
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns how many were copied.
    pub fn copy_matching_params(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            if let Some(src) = other.find(self.params.name(id)) {
                if other.value(src).dim() == self.params.value(id).dim() {
                    *self.params.value_mut(id) = other.value(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
