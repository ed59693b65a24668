//! Shape-completion pretraining: zero whole input rows and train the network
//! to output the full mesh.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::losses::{vertex_loss, Reduction};
use crate::network::{DCGNet, NetworkError};

#[derive(Debug, Error, PartialEq)]
pub enum CompletionError {
    #[error("cannot mask {count} of {rows} rows")]
    TooMany { count: usize, rows: usize },
    #[error("contiguous patches need a neighbour list for all {0} nodes")]
    MissingGraph(usize),
    #[error("unknown mask mode {0:?} (expected uniform_random or contiguous_patch)")]
    UnknownMode(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    UniformRandom,
    ContiguousPatch,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::UniformRandom => "uniform_random",
            MaskMode::ContiguousPatch => "contiguous_patch",
        })
    }
}

impl FromStr for MaskMode {
    type Err = CompletionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_random" => Ok(MaskMode::UniformRandom),
            "contiguous_patch" => Ok(MaskMode::ContiguousPatch),
            other => Err(CompletionError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub count: usize,
    pub seed: u64,
    pub mode: MaskMode,
}

/// Binary `N × k` row mask: masked rows are all zero, the rest all one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMask {
    masked: Vec<bool>,
    cols: usize,
}

impl RowMask {
    pub fn rows(&self) -> usize {
        self.masked.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_masked(&self, row: usize) -> bool {
        self.masked[row]
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.masked[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows(), self.cols), |(i, _)| if self.masked[i] { 0.0 } else { 1.0 })
    }

    /// Plain-array version of [`apply_mask`].
    pub fn apply_array(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            if self.masked[i] {
                row.fill(0.0);
            }
        }
        out
    }
}

/// Draws `spec.count` rows to mask. `neighbors` is required for
/// [`MaskMode::ContiguousPatch`].
pub fn make_mask(
    spec: &MaskSpec,
    n: usize,
    k: usize,
    neighbors: Option<&[Vec<usize>]>,
) -> Result<RowMask, CompletionError> {
    if spec.count > n {
        return Err(CompletionError::TooMany { count: spec.count, rows: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut masked = vec![false; n];
    match spec.mode {
        MaskMode::UniformRandom => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for &i in &order[..spec.count] {
                masked[i] = true;
            }
        }
        MaskMode::ContiguousPatch => {
            let graph = neighbors.filter(|g| g.len() == n).ok_or(CompletionError::MissingGraph(n))?;
            let mut taken = 0;
            // restart from a fresh seed node if a component runs out
            while taken < spec.count {
                let free: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
                let start = free[rng.random_range(0..free.len())];
                let mut queue = VecDeque::from([start]);
                masked[start] = true;
                taken += 1;
                while let Some(v) = queue.pop_front() {
                    if taken == spec.count {
                        break;
                    }
                    for &w in &graph[v] {
                        if taken == spec.count {
                            break;
                        }
                        if !masked[w] {
                            masked[w] = true;
                            taken += 1;
                            queue.push_back(w);
                        }
                    }
                }
            }
        }
    }
    Ok(RowMask { masked, cols: k })
}

/// `x ⊙ M`.
pub fn apply_mask(tape: &mut Tape, x: Tensor, mask: &RowMask) -> Result<Tensor, TensorError> {
    let m = tape.constant(mask.to_matrix());
    tape.mul(x, m)
}

/// Vertex L1 between the network output on the masked input and the full
/// target mesh.
pub fn completion_step(
    net: &DCGNet,
    tape: &mut Tape,
    x: &Array2<f64>,
    target: &Array2<f64>,
    mask: &RowMask,
    reduction: Reduction,
) -> Result<Tensor, CompletionError> {
    let xt = tape.constant(x.clone());
    let masked = apply_mask(tape, xt, mask)?;
    let pred = net.forward(tape, masked)?;
    let gt = tape.constant(target.clone());
    Ok(vertex_loss(tape, pred, gt, reduction)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::build_hierarchy;
    use crate::mesh::TriMesh;
    use crate::network::NetworkConfig;

    fn random(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn degenerate_counts() {
        let x = random(0, 10, 4);
        let none = make_mask(&MaskSpec { count: 0, seed: 1, mode: MaskMode::UniformRandom }, 10, 4, None).unwrap();
        assert_eq!(none.apply_array(&x), x);
        let all = make_mask(&MaskSpec { count: 10, seed: 1, mode: MaskMode::UniformRandom }, 10, 4, None).unwrap();
        assert!(all.apply_array(&x).iter().all(|&v| v == 0.0));
        assert_eq!(
            make_mask(&MaskSpec { count: 11, seed: 1, mode: MaskMode::UniformRandom }, 10, 4, None),
            Err(CompletionError::TooMany { count: 11, rows: 10 })
        );
    }

    #[test]
    fn apply_mask_zeroes_rows_and_keeps_the_rest() {
        let x = random(2, 12, 5);
        let mask = make_mask(&MaskSpec { count: 4, seed: 3, mode: MaskMode::UniformRandom }, 12, 5, None).unwrap();
        let mut tape = Tape::new();
        let xt = tape.constant(x.clone());
        let y = apply_mask(&mut tape, xt, &mask).unwrap();
        let y = tape.value(y);
        let mut expected_sum = 0.0;
        for i in 0..12 {
            if mask.is_masked(i) {
                assert!(y.row(i).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(y.row(i), x.row(i));
                for k in 0..5 {
                    expected_sum += x[[i, k]];
                }
            }
        }
        assert!((y.sum() - expected_sum).abs() < 1e-12);
        assert_eq!(y, &mask.apply_array(&x));
    }

    #[test]
    fn exact_count_and_binomial_frequencies() {
        let (n, c, draws) = (50usize, 6usize, 1000usize);
        let mut hits = vec![0usize; n];
        for seed in 0..draws as u64 {
            let m = make_mask(&MaskSpec { count: c, seed, mode: MaskMode::UniformRandom }, n, 3, None).unwrap();
            assert_eq!(m.count(), c);
            for i in m.masked_rows() {
                hits[i] += 1;
            }
        }
        let p = c as f64 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 5.0 * sd, "{h} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn contiguous_patch_is_connected() {
        let mesh = TriMesh::icosphere(2);
        let nbrs = mesh.neighbors();
        for seed in 0..20 {
            let spec = MaskSpec { count: 19, seed, mode: MaskMode::ContiguousPatch };
            let m = make_mask(&spec, mesh.num_vertices(), 7, Some(&nbrs)).unwrap();
            assert_eq!(m.count(), 19);
            // BFS within the masked set reaches every masked node
            let rows = m.masked_rows();
            let mut seen = vec![false; mesh.num_vertices()];
            let mut queue = VecDeque::from([rows[0]]);
            seen[rows[0]] = true;
            let mut reached = 1;
            while let Some(v) = queue.pop_front() {
                for &w in &nbrs[v] {
                    if m.is_masked(w) && !seen[w] {
                        seen[w] = true;
                        reached += 1;
                        queue.push_back(w);
                    }
                }
            }
            assert_eq!(reached, 19);
        }
        let spec = MaskSpec { count: 3, seed: 0, mode: MaskMode::ContiguousPatch };
        assert_eq!(make_mask(&spec, 10, 2, None), Err(CompletionError::MissingGraph(10)));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [MaskMode::UniformRandom, MaskMode::ContiguousPatch] {
            assert_eq!(m.to_string().parse::<MaskMode>().unwrap(), m);
        }
        assert!("holes".parse::<MaskMode>().is_err());
    }

    #[test]
    fn completion_loss_is_non_negative_and_uses_masked_input() {
        let h = build_hierarchy(&TriMesh::icosphere(1), 2, 4).unwrap();
        let cfg = NetworkConfig { in_features: 4, widths: vec![4, 4, 4], attention_features: 2, nonlocal_features: 2, coord_scale: 1.0, ..NetworkConfig::default() };
        let net = DCGNet::new(&h, cfg).unwrap();
        let x = random(5, 42, 4);
        let target = random(6, 42, 3);
        for count in [0, 5, 42] {
            let mask = make_mask(&MaskSpec { count, seed: 7, mode: MaskMode::UniformRandom }, 42, 4, None).unwrap();
            let mut tape = Tape::new();
            let loss = completion_step(&net, &mut tape, &x, &target, &mask, Reduction::Sum).unwrap();
            assert!(tape.item(loss) >= 0.0);
            let direct = net.predict(&mask.apply_array(&x)).unwrap();
            let naive: f64 = direct.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
            assert!((tape.item(loss) - naive).abs() < 1e-9);
        }
    }
}
