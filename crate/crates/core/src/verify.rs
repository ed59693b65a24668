//! Finite-difference gradient suite over every layer type and the full
//! network on a small body hierarchy.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_param_grads, GradReport, GradTolerance};
use crate::autodiff::{GroupNormStats, ParamStore, Result, Tape, Tensor};
use crate::coarsen::build_full_hierarchy;
use crate::data::{body_regressor, body_template};
use crate::layers::{
    Activation, AdaptiveAdjacency, AdaptiveGraphConvLayer, FullyConnected, GCNUnit, GraphAttention, GraphConv,
    GraphConvLayer, GroupNorm, NonLocalBlock,
};
use crate::losses::{total_loss, Camera, LossWeights, Reduction, Targets};
use crate::mesh::{build_adjacency, TriMesh};
use crate::network::{DCGNet, NetworkConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

#[derive(Debug, Clone, Default)]
pub struct GradSuite {
    pub checks: Vec<GradCheck>,
}

impl GradSuite {
    pub fn passes(&self, tol: GradTolerance) -> bool {
        self.checks.iter().all(|c| c.report.passes(tol))
    }

    /// Largest relative error among entries above the absolute floor.
    pub fn worst_relative(&self, tol: GradTolerance) -> f64 {
        self.checks.iter().map(|c| c.report.worst_relative(tol)).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.checks.iter().map(|c| c.report.checked()).sum()
    }

    /// Names of the checks that failed, with their seeds.
    pub fn failures(&self, tol: GradTolerance) -> Vec<(&'static str, u64)> {
        self.checks.iter().filter(|c| !c.report.passes(tol)).map(|c| (c.name, c.seed)).collect()
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// `Σ y ⊙ R` for a fixed random `R`, a generic scalar readout.
fn readout(tape: &mut Tape, y: Tensor, weights: &Array2<f64>) -> Result<Tensor> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_all(
    name: &'static str,
    seed: u64,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    max_per_param: Option<usize>,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
) -> Result<GradCheck> {
    let ids: Vec<_> = store.ids().collect();
    let report = check_param_grads(store, &ids, FD_STEP, max_per_param, rng, loss)?;
    Ok(GradCheck { name, seed, report })
}

fn layer_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = TriMesh::icosahedron();
    let n = mesh.num_vertices();
    let adj = build_adjacency(&mesh, true, true);
    let plain = build_adjacency(&mesh, false, true);
    let x0 = random(&mut rng, n, 4);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let mut conv = GraphConvLayer::new(&mut store, "conv", &adj, 4, 3, &mut rng);
    conv.activation = Activation::Identity;
    let r = random(&mut rng, n, 3);
    out.push(check_all("graph_conv", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = conv.forward(t, s, x)?;
        let y = t.sigmoid(y);
        readout(t, y, &r)
    })?);

    let mut store = ParamStore::new();
    let a = AdaptiveAdjacency::new(&mut store, "adj", &plain, false);
    *store.value_mut(a.learned) += &(random(&mut rng, n, n) * 0.2);
    let mut conv = AdaptiveGraphConvLayer::new(&mut store, "aconv", a, 4, 3, &mut rng);
    conv.activation = Activation::Identity;
    out.push(check_all("adaptive_graph_conv", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = conv.forward(t, s, x)?;
        let y = t.sigmoid(y);
        readout(t, y, &r)
    })?);

    for (name, stats) in [("group_norm_across_nodes", GroupNormStats::AcrossNodes), ("group_norm_per_node", GroupNormStats::PerNode)] {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2, stats);
        *store.value_mut(gn.gain) = random(&mut rng, 1, 4) + 1.0;
        *store.value_mut(gn.bias) = random(&mut rng, 1, 4);
        let r4 = random(&mut rng, n, 4);
        out.push(check_all(name, seed, &store, &mut rng, None, |t, s| {
            let x = t.constant(x0.clone());
            let y = gn.forward(t, s, x)?;
            let y = t.sigmoid(y);
            readout(t, y, &r4)
        })?);
    }

    let mut store = ParamStore::new();
    let a = AdaptiveAdjacency::new(&mut store, "adj", &plain, false);
    let conv = GraphConv::Adaptive(AdaptiveGraphConvLayer::new(&mut store, "c", a, 4, 3, &mut rng));
    let norm = GroupNorm::new(&mut store, "n", 4, 2, GroupNormStats::AcrossNodes);
    *store.value_mut(norm.bias) = random(&mut rng, 1, 4);
    let unit = GCNUnit::new(norm, conv);
    out.push(check_all("gcn_unit", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = unit.forward(t, s, x)?;
        readout(t, y, &r)
    })?);

    let mut store = ParamStore::new();
    let fc = FullyConnected::new(&mut store, "fc", 4, 5, &mut rng);
    *store.value_mut(fc.bias) = random(&mut rng, 1, 5);
    let r5 = random(&mut rng, n, 5);
    out.push(check_all("fully_connected", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = fc.forward(t, s, x)?;
        let y = t.sigmoid(y);
        readout(t, y, &r5)
    })?);

    let mut store = ParamStore::new();
    let att = GraphAttention::new(&mut store, "att", 4, 3, &mut rng);
    let mask = GraphAttention::neighborhood(&adj);
    out.push(check_all("graph_attention", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = att.forward(t, s, x, &mask)?;
        readout(t, y, &r)
    })?);

    let mut store = ParamStore::new();
    let nl = NonLocalBlock::new(&mut store, "nl", 4, 3, &mut rng);
    let r4 = random(&mut rng, n, 4);
    out.push(check_all("non_local", seed, &store, &mut rng, None, |t, s| {
        let x = t.constant(x0.clone());
        let y = nl.forward(t, s, x)?;
        readout(t, y, &r4)
    })?);
    Ok(out)
}

/// Every layer type plus the end-to-end network with the total loss on a
/// `nodes`-vertex body hierarchy (coarsened by 4 down to one node), for
/// seeds `0..seeds`. At most `network_entries` entries are probed per
/// network parameter.
pub fn gradient_suite(seeds: u64, nodes: usize, network_entries: usize) -> std::result::Result<GradSuite, String> {
    let template = body_template(nodes).map_err(|e| e.to_string())?;
    let hierarchy = build_full_hierarchy(&template, 4).map_err(|e| e.to_string())?;
    let regressor = body_regressor(&template).map_err(|e| e.to_string())?;
    let mut suite = GradSuite::default();
    for seed in 0..seeds {
        suite.checks.extend(layer_checks(seed).map_err(|e| e.to_string())?);
        let cfg = NetworkConfig {
            in_features: 4,
            widths: vec![4; hierarchy.depth() + 1],
            attention_features: 3,
            nonlocal_features: 3,
            seed,
            ..NetworkConfig::default()
        };
        let net = DCGNet::new(&hierarchy, cfg).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // perturb learned adjacencies and norms away from their initial values
        let mut store = net.params().clone();
        for id in store.ids().collect::<Vec<_>>() {
            let jitter = random(&mut rng, store.value(id).nrows(), store.value(id).ncols()) * 0.05;
            *store.value_mut(id) += &jitter;
        }
        let x0 = random(&mut rng, nodes, 4);
        let gt = random(&mut rng, nodes, 3) * 800.0;
        let cam = Camera::new(0.2, [112.0, 112.0]).expect("valid camera");
        let joints = regressor.regress_array(gt.view());
        let joints2d = cam.project_array(joints.view()) + &(random(&mut rng, joints.nrows(), 2) * 5.0);
        let report = check_param_grads(
            &store,
            &store.ids().collect::<Vec<_>>(),
            FD_STEP,
            Some(network_entries),
            &mut rng,
            |t, s| {
                let x = t.constant(x0.clone());
                let pred = net.forward_with(t, s, x).map_err(|e| match e {
                    crate::network::NetworkError::Tensor(e) => e,
                    other => panic!("network error during gradient check: {other}"),
                })?;
                let targets = Targets {
                    mesh: t.constant(gt.clone()),
                    joints3d: t.constant(joints.clone()),
                    joints2d: t.constant(joints2d.clone()),
                };
                let parts = total_loss(t, pred, targets, &regressor, &cam, LossWeights::default(), Reduction::Mean)?;
                Ok(parts.total)
            },
        )
        .map_err(|e| e.to_string())?;
        suite.checks.push(GradCheck { name: "network", seed, report });
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_two_seeds() {
        let suite = gradient_suite(2, 48, 2).unwrap();
        let tol = GradTolerance::default();
        assert!(suite.passes(tol), "{:?}", suite.failures(tol));
        assert_eq!(suite.checks.len(), 2 * 9);
        assert!(suite.entries() > 100);
    }
}
