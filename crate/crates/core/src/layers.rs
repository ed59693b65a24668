//! Trainable building blocks: graph convolution with fixed or learnable
//! adjacency, GroupNorm, the GCN unit, fully connected layers, masked graph
//! attention and the non-local block.
//!
//! Layers hold [`ParamId`]s into a shared [`ParamStore`]; `forward` records
//! the parameters on the tape each time it is called.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{GroupNormStats, ParamId, ParamStore, Result, Tape, Tensor, TensorError};
use crate::mesh::{NormalizedAdjacency, SparseMatrix};

pub const GROUPNORM_EPS: f64 = 1e-5;
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Glorot-uniform matrix in `±sqrt(6 / (rows + cols))`.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Largest divisor of `channels` that is at most 8 and leaves at least two
/// channels per group, so a single node never normalizes to all zeros.
pub fn default_groups(channels: usize) -> usize {
    (1..=(channels / 2).clamp(1, 8)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Tensor) -> Tensor {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

fn check_rows(tape: &Tape, op: &'static str, x: Tensor, n: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.0 != n {
        return Err(TensorError::ShapeMismatch { op, lhs: s, rhs: (n, n) });
    }
    Ok(())
}

/// `σ(A · X · W)` with a fixed sparse `A`.
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub weight: ParamId,
    pub adjacency: Arc<SparseMatrix>,
    pub activation: Activation,
}

impl GraphConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        adjacency: &NormalizedAdjacency,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_features, out_features));
        Self { weight, adjacency: Arc::new(adjacency.matrix.clone()), activation: Activation::Relu }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        check_rows(tape, "gcn_forward", x, self.adjacency.rows())?;
        let w = tape.param(store, self.weight);
        let xw = tape.matmul(x, w)?;
        let axw = tape.sparse_matmul(&self.adjacency, xw)?;
        Ok(self.activation.apply(tape, axw))
    }
}

/// Learnable `Â = A + R` where `A` is frozen and the residual `R` starts at
/// the identity.
#[derive(Debug, Clone)]
pub struct AdaptiveAdjacency {
    pub base: Arc<Array2<f64>>,
    pub learned: ParamId,
}

impl AdaptiveAdjacency {
    /// Registers the residual. With `frozen` it is recorded but not trained.
    pub fn new(store: &mut ParamStore, name: &str, base: &NormalizedAdjacency, frozen: bool) -> Self {
        Self::with_base(store, name, Arc::new(base.dense()), frozen)
    }

    /// As [`AdaptiveAdjacency::new`] with an already densified base.
    pub fn with_base(store: &mut ParamStore, name: &str, base: Arc<Array2<f64>>, frozen: bool) -> Self {
        let n = base.nrows();
        let name = format!("{name}.learned");
        let learned = if frozen {
            store.add_frozen(name, Array2::eye(n))
        } else {
            store.add(name, Array2::eye(n))
        };
        Self { base, learned }
    }

    pub fn size(&self) -> usize {
        self.base.nrows()
    }

    /// Records `Â` on the tape.
    pub fn effective(&self, tape: &mut Tape, store: &ParamStore) -> Result<Tensor> {
        let base = tape.constant(self.base.as_ref().clone());
        let learned = tape.param(store, self.learned);
        tape.add(base, learned)
    }
}

/// `σ(Â · X · W)`.
#[derive(Debug, Clone)]
pub struct AdaptiveGraphConvLayer {
    pub adjacency: AdaptiveAdjacency,
    pub weight: ParamId,
    pub activation: Activation,
}

impl AdaptiveGraphConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        adjacency: AdaptiveAdjacency,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_features, out_features));
        Self { adjacency, weight, activation: Activation::Relu }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        check_rows(tape, "adaptive_gcn_forward", x, self.adjacency.size())?;
        let a_hat = self.adjacency.effective(tape, store)?;
        let w = tape.param(store, self.weight);
        let xw = tape.matmul(x, w)?;
        let out = tape.matmul(a_hat, xw)?;
        Ok(self.activation.apply(tape, out))
    }
}

#[derive(Debug, Clone)]
pub enum GraphConv {
    Fixed(GraphConvLayer),
    Adaptive(AdaptiveGraphConvLayer),
}

impl GraphConv {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        match self {
            GraphConv::Fixed(l) => l.forward(tape, store, x),
            GraphConv::Adaptive(l) => l.forward(tape, store, x),
        }
    }

    pub fn weight(&self) -> ParamId {
        match self {
            GraphConv::Fixed(l) => l.weight,
            GraphConv::Adaptive(l) => l.weight,
        }
    }

    pub fn set_activation(&mut self, activation: Activation) {
        match self {
            GraphConv::Fixed(l) => l.activation = activation,
            GraphConv::Adaptive(l) => l.activation = activation,
        }
    }
}

/// GroupNorm with per-channel gain and bias.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub stats: GroupNormStats,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        stats: GroupNormStats,
    ) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, channels)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, channels)));
        Self { gain, bias, groups, stats, eps: GROUPNORM_EPS }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let normed = tape.group_norm(x, self.groups, self.stats, self.eps)?;
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        let scaled = tape.mul_row(normed, gain)?;
        tape.add_row(scaled, bias)
    }
}

/// GroupNorm → ReLU → graph convolution. The convolution itself is linear;
/// the unit's ReLU is its activation.
#[derive(Debug, Clone)]
pub struct GCNUnit {
    pub norm: GroupNorm,
    pub conv: GraphConv,
}

impl GCNUnit {
    pub fn new(norm: GroupNorm, mut conv: GraphConv) -> Self {
        conv.set_activation(Activation::Identity);
        Self { norm, conv }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let n = self.norm.forward(tape, store, x)?;
        let r = tape.relu(n);
        self.conv.forward(tape, store, r)
    }
}

/// `X · W + b`.
#[derive(Debug, Clone)]
pub struct FullyConnected {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl FullyConnected {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_features, out_features));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_features)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Single-head graph attention. Scores `LeakyReLU(a₁·zᵢ + a₂·zⱼ)` with
/// `z = X·W` are softmax-normalized over each node's neighbours and itself.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    pub weight: ParamId,
    /// `2p × 1`: source half then neighbour half.
    pub attention: ParamId,
    pub out_features: usize,
}

impl GraphAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_features, out_features));
        let attention = store.add(format!("{name}.attention"), glorot(rng, 2 * out_features, 1));
        Self { weight, attention, out_features }
    }

    /// Neighbourhood mask: stored adjacency entries plus the diagonal.
    pub fn neighborhood(adjacency: &NormalizedAdjacency) -> Array2<bool> {
        let mut mask = adjacency.structure();
        for i in 0..mask.nrows() {
            mask[[i, i]] = true;
        }
        mask
    }

    /// Returns `(E · X · W, E)`.
    pub fn forward_with_coefficients(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Tensor,
        neighborhood: &Array2<bool>,
    ) -> Result<(Tensor, Tensor)> {
        check_rows(tape, "graph_attention_forward", x, neighborhood.nrows())?;
        let p = self.out_features;
        let w = tape.param(store, self.weight);
        let a = tape.param(store, self.attention);
        let z = tape.matmul(x, w)?;
        let a_src = tape.slice_rows(a, 0, p)?;
        let a_dst = tape.slice_rows(a, p, 2 * p)?;
        let s_src = tape.matmul(z, a_src)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let s_dst_row = tape.transpose(s_dst);
        let scores = tape.outer_sum(s_src, s_dst_row)?;
        let scores = tape.leaky_relu(scores, ATTENTION_SLOPE);
        let coeffs = tape.masked_softmax_rows(scores, neighborhood)?;
        let out = tape.matmul(coeffs, z)?;
        Ok((out, coeffs))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Tensor,
        neighborhood: &Array2<bool>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_coefficients(tape, store, x, neighborhood)?.0)
    }
}

/// Embedded-Gaussian non-local block with a residual connection:
/// `x + softmax_rows(θ(x)·φ(x)ᵀ) · g(x) · W_out`.
#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub out: ParamId,
}

impl NonLocalBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            theta: store.add(format!("{name}.theta"), glorot(rng, features, inner)),
            phi: store.add(format!("{name}.phi"), glorot(rng, features, inner)),
            g: store.add(format!("{name}.g"), glorot(rng, features, inner)),
            out: store.add(format!("{name}.out"), glorot(rng, inner, features)),
        }
    }

    /// Returns `(output, attention)`.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let [theta, phi, g, out] = [self.theta, self.phi, self.g, self.out].map(|p| tape.param(store, p));
        let tx = tape.matmul(x, theta)?;
        let px = tape.matmul(x, phi)?;
        let gx = tape.matmul(x, g)?;
        let pxt = tape.transpose(px);
        let scores = tape.matmul(tx, pxt)?;
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, gx)?;
        let projected = tape.matmul(mixed, out)?;
        Ok((tape.add(x, projected)?, attn))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(tape, store, x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_param_grads, GradTolerance};
    use crate::mesh::{adjacency_from_edges, build_adjacency, Normalization, TriMesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn triangle() -> TriMesh {
        TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn identity_adjacency_and_weight_is_fixed_point() {
        let mut store = ParamStore::new();
        let iso = TriMesh::new(vec![[0.0; 3]; 4], vec![]).unwrap();
        let adj = build_adjacency(&iso, true, false);
        let layer = GraphConvLayer::new(&mut store, "g", &adj, 3, 3, &mut rng(0));
        *store.value_mut(layer.weight) = Array2::eye(3);
        let x0 = random(&mut rng(1), 4, 3).mapv(f64::abs);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = 0.0;
                for k in 0..a.ncols() {
                    acc += a[[i, k]] * b[[k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        for i in 0..n {
            for j in i + 2..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn gcn_matches_naive_triple_loop() {
        for seed in 0..5 {
            let mut r = rng(20 + seed);
            let adj = adjacency_from_edges(6, random_graph(&mut r, 6), true, Normalization::Symmetric);
            let mut store = ParamStore::new();
            let layer = GraphConvLayer::new(&mut store, "g", &adj, 4, 3, &mut r);
            let x0 = random(&mut r, 6, 4);
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let y = layer.forward(&mut tape, &store, x).unwrap();
            let expected = naive_matmul(&naive_matmul(&adj.dense(), &x0), store.value(layer.weight))
                .mapv(|v| v.max(0.0));
            assert_close(tape.value(y), &expected, 1e-10);
        }
    }

    #[test]
    fn adaptive_at_init_is_bit_identical_to_self_looped_fixed() {
        for loops in [false, true] {
            let mesh = TriMesh::icosphere(1);
            let adj = build_adjacency(&mesh, loops, true);
            let mut r = rng(30);
            let mut store = ParamStore::new();
            let aa = AdaptiveAdjacency::new(&mut store, "a", &adj, false);
            let adaptive = AdaptiveGraphConvLayer::new(&mut store, "ad", aa, 5, 4, &mut r);
            let mut fixed = GraphConvLayer::new(&mut store, "f", &adj.plus_identity(), 5, 4, &mut r);
            fixed.weight = adaptive.weight;
            let x0 = random(&mut r, 42, 5);
            let mut tape = Tape::new();
            let x = tape.constant(x0);
            let ya = adaptive.forward(&mut tape, &store, x).unwrap();
            let yf = fixed.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.value(ya), tape.value(yf));
        }
    }

    #[test]
    fn fixed_layer_is_permutation_equivariant() {
        let mesh = TriMesh::icosphere(1);
        let n = mesh.num_vertices();
        let mut r = rng(31);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        // vertex i of the permuted mesh is vertex perm[i] of the original
        let permuted = mesh.permuted(&perm);
        let mut store = ParamStore::new();
        let layer = GraphConvLayer::new(&mut store, "g", &build_adjacency(&mesh, true, true), 3, 4, &mut r);
        let mut layer_p = layer.clone();
        layer_p.adjacency = Arc::new(build_adjacency(&permuted, true, true).matrix);
        let x0 = random(&mut r, n, 3);
        let xp = Array2::from_shape_fn((n, 3), |(i, k)| x0[[perm[i], k]]);
        let mut tape = Tape::new();
        let (x, xpt) = (tape.constant(x0), tape.constant(xp));
        let y = layer.forward(&mut tape, &store, x).unwrap();
        let yp = layer_p.forward(&mut tape, &store, xpt).unwrap();
        let y = tape.value(y);
        let expected = Array2::from_shape_fn((n, 4), |(i, k)| y[[perm[i], k]]);
        assert_close(tape.value(yp), &expected, 1e-12);
    }

    #[test]
    fn attention_matches_naive_masked_softmax_on_path() {
        let adj = adjacency_from_edges(5, (1..5).map(|i| (i - 1, i)), false, Normalization::None);
        let mut r = rng(32);
        let mut store = ParamStore::new();
        let att = GraphAttention::new(&mut store, "att", 3, 2, &mut r);
        let x0 = random(&mut r, 5, 3) * 2.0;
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let mask = GraphAttention::neighborhood(&adj);
        let (out, e) = att.forward_with_coefficients(&mut tape, &store, x, &mask).unwrap();

        let w = store.value(att.weight);
        let a = store.value(att.attention);
        let z = naive_matmul(&x0, w);
        let mut expected = Array2::zeros((5, 5));
        for i in 0..5 {
            let nbrs: Vec<usize> = (0..5usize).filter(|&j| j == i || i.abs_diff(j) == 1).collect();
            let score = |j: usize| {
                let s: f64 = (0..2).map(|k| a[[k, 0]] * z[[i, k]] + a[[2 + k, 0]] * z[[j, k]]).sum();
                if s > 0.0 { s } else { 0.2 * s }
            };
            let m = nbrs.iter().map(|&j| score(j)).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = nbrs.iter().map(|&j| (score(j) - m).exp()).sum();
            for &j in &nbrs {
                expected[[i, j]] = (score(j) - m).exp() / total;
            }
        }
        assert_close(tape.value(e), &expected, 1e-10);
        assert_close(tape.value(out), &naive_matmul(&expected, &z), 1e-10);
    }

    #[test]
    fn non_local_matches_naive_double_loop() {
        let mut r = rng(33);
        let mut store = ParamStore::new();
        let nl = NonLocalBlock::new(&mut store, "nl", 3, 2, &mut r);
        let x0 = random(&mut r, 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = nl.forward(&mut tape, &store, x).unwrap();

        let t = naive_matmul(&x0, store.value(nl.theta));
        let p = naive_matmul(&x0, store.value(nl.phi));
        let g = naive_matmul(&x0, store.value(nl.g));
        let mut mixed = Array2::zeros((4, 2));
        for i in 0..4 {
            let scores: Vec<f64> =
                (0..4).map(|j| (0..2).map(|k| t[[i, k]] * p[[j, k]]).sum()).collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..4 {
                for k in 0..2 {
                    mixed[[i, k]] += scores[j].exp() / total * g[[j, k]];
                }
            }
        }
        let expected = &x0 + &naive_matmul(&mixed, store.value(nl.out));
        assert_close(tape.value(y), &expected, 1e-10);
    }

    #[test]
    fn constant_rows_stay_equal_on_triangle() {
        let mut store = ParamStore::new();
        let adj = build_adjacency(&triangle(), true, true);
        let layer = GraphConvLayer::new(&mut store, "g", &adj, 2, 4, &mut rng(2));
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_fn((3, 2), |(_, j)| 0.3 + j as f64));
        let y = layer.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(y);
        for i in 1..3 {
            for j in 0..4 {
                assert!((v[[i, j]] - v[[0, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_wrong_row_count() {
        let mut store = ParamStore::new();
        let adj = build_adjacency(&triangle(), true, true);
        let layer = GraphConvLayer::new(&mut store, "g", &adj, 2, 2, &mut rng(0));
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((4, 2)));
        assert!(matches!(
            layer.forward(&mut tape, &store, x),
            Err(TensorError::ShapeMismatch { op: "gcn_forward", .. })
        ));
    }

    #[test]
    fn negative_long_range_entry_changes_output() {
        let mesh = TriMesh::icosahedron();
        let adj = build_adjacency(&mesh, false, true);
        let mut store = ParamStore::new();
        let aa = AdaptiveAdjacency::new(&mut store, "a", &adj, false);
        let mut layer = AdaptiveGraphConvLayer::new(&mut store, "l", aa, 3, 3, &mut rng(4));
        layer.activation = Activation::Identity;
        let x0 = random(&mut rng(5), 12, 3);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let y = layer.forward(&mut tape, store, x).unwrap();
            tape.value(y).clone()
        };
        let before = run(&store);
        // vertices 0 and 3 share no edge on the icosahedron
        assert!(adj.matrix.get(0, 3).is_none());
        store.value_mut(layer.adjacency.learned)[[0, 3]] = -0.5;
        let after = run(&store);
        assert_ne!(before.row(0), after.row(0));
        for i in 1..12 {
            assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn groupnorm_zero_variance_gives_bias() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2, GroupNormStats::PerNode);
        *store.value_mut(gn.bias) = ndarray::array![[-1.0, 0.5, 2.0, -3.0]];
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_elem((3, 4), 7.0));
        let y = gn.forward(&mut tape, &store, x).unwrap();
        let r = tape.relu(y);
        for row in tape.value(r).rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.5, 2.0, 0.0]);
        }
    }

    #[test]
    fn single_group_per_node_matches_layernorm() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 5, 1, GroupNormStats::PerNode);
        let x0 = random(&mut rng(6), 4, 5) * 3.0;
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = gn.forward(&mut tape, &store, x).unwrap();
        for (row_in, row_out) in x0.rows().into_iter().zip(tape.value(y).rows()) {
            let mean = row_in.sum() / 5.0;
            let var = row_in.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for (a, b) in row_in.iter().zip(row_out) {
                assert!(((a - mean) / (var + 1e-5).sqrt() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_group_across_nodes_matches_direct_normalization() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 3, 1, GroupNormStats::AcrossNodes);
        let x0 = random(&mut rng(7), 6, 3) * 2.0 + 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = gn.forward(&mut tape, &store, x).unwrap();
        let mean = x0.sum() / 18.0;
        let var = x0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        for (a, b) in x0.iter().zip(tape.value(y)) {
            assert!(((a - mean) / (var + 1e-5).sqrt() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn groupnorm_moments_per_group() {
        for stats in [GroupNormStats::PerNode, GroupNormStats::AcrossNodes] {
            let mut tape = Tape::new();
            let x0 = random(&mut rng(8), 10, 8) * 5.0;
            let x = tape.constant(x0);
            let y = tape.group_norm(x, 4, stats, GROUPNORM_EPS).unwrap();
            let v = tape.value(y);
            let blocks: Vec<ndarray::ArrayView2<f64>> = match stats {
                GroupNormStats::AcrossNodes => {
                    (0..4).map(|g| v.slice(ndarray::s![.., 2 * g..2 * g + 2])).collect()
                }
                GroupNormStats::PerNode => (0..10)
                    .flat_map(|i| (0..4).map(move |g| (i, g)))
                    .map(|(i, g)| v.slice(ndarray::s![i..i + 1, 2 * g..2 * g + 2]))
                    .collect(),
            };
            for b in blocks {
                let m = b.sum() / b.len() as f64;
                let var = b.iter().map(|a| (a - m).powi(2)).sum::<f64>() / b.len() as f64;
                assert!(m.abs() < 1e-6);
                // per-node blocks of two entries have variance well above eps
                assert!((var - 1.0).abs() < 1e-4 || stats == GroupNormStats::PerNode && var > 0.99);
            }
        }
    }

    #[test]
    fn indivisible_groups_error() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 6, 4, GroupNormStats::PerNode);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((2, 6)));
        assert_eq!(
            gn.forward(&mut tape, &store, x).unwrap_err(),
            TensorError::GroupCount { channels: 6, groups: 4 }
        );
        assert_eq!(default_groups(19), 1);
        assert_eq!(default_groups(38), 2);
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(4), 2);
        assert_eq!(default_groups(3), 1);
        assert_eq!(default_groups(16), 8);
    }

    #[test]
    fn gcn_unit_output_shape() {
        let mesh = TriMesh::icosahedron();
        let adj = build_adjacency(&mesh, true, true);
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let conv = GraphConv::Fixed(GraphConvLayer::new(&mut store, "c", &adj, 6, 4, &mut r));
        let unit = GCNUnit::new(GroupNorm::new(&mut store, "n", 6, 2, GroupNormStats::AcrossNodes), conv);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut r, 12, 6));
        let y = unit.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), (12, 4));
    }

    #[test]
    fn self_loop_only_attention_is_identity() {
        let iso = TriMesh::new(vec![[0.0; 3]; 5], vec![]).unwrap();
        let adj = build_adjacency(&iso, false, false);
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let att = GraphAttention::new(&mut store, "att", 3, 2, &mut r);
        let x0 = random(&mut r, 5, 3);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let mask = GraphAttention::neighborhood(&adj);
        let (out, e) = att.forward_with_coefficients(&mut tape, &store, x, &mask).unwrap();
        assert_eq!(tape.value(e), &Array2::<f64>::eye(5));
        let w = store.value(att.weight);
        for i in 0..5 {
            for j in 0..2 {
                let naive: f64 = (0..3).map(|k| x0[[i, k]] * w[[k, j]]).sum();
                assert!((tape.value(out)[[i, j]] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let adj = build_adjacency(&TriMesh::icosphere(1), true, true);
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let att = GraphAttention::new(&mut store, "att", 4, 3, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut r, 42, 4) * 4.0);
        let (_, e) = att
            .forward_with_coefficients(&mut tape, &store, x, &GraphAttention::neighborhood(&adj))
            .unwrap();
        for row in tape.value(e).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_out_projection_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let nl = NonLocalBlock::new(&mut store, "nl", 5, 3, &mut r);
        store.value_mut(nl.out).fill(0.0);
        let x0 = random(&mut r, 4, 5);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let (y, attn) = nl.forward_with_attention(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &x0);
        for row in tape.value(attn).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    /// Gradient check of every parameter in `store` for `loss`.
    fn assert_param_grads(
        store: &ParamStore,
        seed: u64,
        loss: impl Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
    ) {
        let ids: Vec<_> = store.ids().collect();
        let report = check_param_grads(store, &ids, 1e-5, None, &mut rng(seed), loss).unwrap();
        assert!(report.passes(GradTolerance::default()), "seed {seed}: {:?}", report
            .failures(GradTolerance::default())
            .collect::<Vec<_>>());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mesh = TriMesh::icosahedron();
        let adj = build_adjacency(&mesh, true, true);
        let adj_plain = build_adjacency(&mesh, false, true);
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let x0 = random(&mut r, 12, 4);
            let target = random(&mut r, 12, 3);

            let mut store = ParamStore::new();
            let mut fixed = GraphConvLayer::new(&mut store, "f", &adj, 4, 3, &mut r);
            fixed.activation = Activation::Identity;
            let aa = AdaptiveAdjacency::new(&mut store, "a", &adj_plain, false);
            *store.value_mut(aa.learned) += &(random(&mut r, 12, 12) * 0.1);
            let adaptive = AdaptiveGraphConvLayer::new(&mut store, "ad", aa, 3, 3, &mut r);
            let loss = |tape: &mut Tape, s: &ParamStore| {
                let x = tape.constant(x0.clone());
                let h = fixed.forward(tape, s, x)?;
                let h = tape.sigmoid(h);
                let y = adaptive.forward(tape, s, h)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(y, t)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            };
            assert_param_grads(&store, seed, loss);

            let mut store = ParamStore::new();
            let ca = AdaptiveAdjacency::new(&mut store, "ca", &adj_plain, false);
            let conv = GraphConv::Adaptive(AdaptiveGraphConvLayer::new(&mut store, "c", ca, 4, 3, &mut r));
            let mut norm = GroupNorm::new(&mut store, "n", 4, 2, GroupNormStats::AcrossNodes);
            *store.value_mut(norm.gain) = random(&mut r, 1, 4) + 1.0;
            *store.value_mut(norm.bias) = random(&mut r, 1, 4) * 0.5;
            let unit = GCNUnit::new(norm.clone(), conv);
            norm.stats = GroupNormStats::PerNode;
            let fc = FullyConnected::new(&mut store, "fc", 3, 5, &mut r);
            *store.value_mut(fc.bias) = random(&mut r, 1, 5);
            let att = GraphAttention::new(&mut store, "att", 5, 4, &mut r);
            let nl = NonLocalBlock::new(&mut store, "nl", 4, 3, &mut r);
            let mask = GraphAttention::neighborhood(&adj);
            let loss = |tape: &mut Tape, s: &ParamStore| {
                let x = tape.constant(x0.clone());
                let h = unit.forward(tape, s, x)?;
                let h = fc.forward(tape, s, h)?;
                let h = att.forward(tape, s, h, &mask)?;
                let h = tape.sigmoid(h);
                let h = nl.forward(tape, s, h)?;
                let h2 = norm.forward(tape, s, h)?;
                let sq = tape.mul(h2, h)?;
                Ok(tape.mean(sq))
            };
            assert_param_grads(&store, seed, loss);
        }
    }
}
