//! Component and masking ablation: fixed vs adaptive adjacency, with and
//! without completion pretraining, over several seeds and mask counts.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::coarsen::MeshHierarchy;
use crate::data::Dataset;
use crate::network::{DCGNet, NetworkConfig};
use crate::train::{evaluate, pretrain, train_main, TrainConfig, TrainError};

/// Node counts masked in the reference ablation, on a 1723-node template.
pub const REFERENCE_MASK_COUNTS: [usize; 3] = [50, 100, 200];
pub const REFERENCE_NODES: usize = 1723;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Fixed,
    Adaptive,
    AdaptivePretrain,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fixed, Variant::Adaptive, Variant::AdaptivePretrain];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fixed => "fixed",
            Variant::Adaptive => "adaptive",
            Variant::AdaptivePretrain => "adaptive+pretrain",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.to_string() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// `{0, 50, 100, 200}` rescaled from 1723 nodes to `nodes`.
pub fn scaled_mask_counts(nodes: usize) -> Vec<usize> {
    let mut counts = vec![0];
    counts.extend(
        REFERENCE_MASK_COUNTS
            .iter()
            .map(|&c| ((c * nodes) as f64 / REFERENCE_NODES as f64).round() as usize),
    );
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Pretraining mask counts; scratch variants do not depend on them.
    pub mask_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub mask_count: usize,
    pub seed: u64,
    pub clean_mpjpe: f64,
    pub occluded_mpjpe: f64,
    pub occluded_reconst_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    fn cell(&self, variant: Variant, mask_count: usize) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == variant && r.mask_count == mask_count)
    }

    /// Mean occluded-test MPJPE over seeds for one cell.
    pub fn mean_occluded(&self, variant: Variant, mask_count: usize) -> Option<f64> {
        let v: Vec<f64> = self.cell(variant, mask_count).map(|r| r.occluded_mpjpe).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn cells(&self) -> Vec<(Variant, usize)> {
        let mut cells: Vec<(Variant, usize)> = self.runs.iter().map(|r| (r.variant, r.mask_count)).collect();
        cells.sort();
        cells.dedup();
        cells
    }

    /// One row per (variant, mask_count) with means over seeds.
    pub fn csv_text(&self) -> String {
        let mut out = String::from(
            "variant,mask_count,seeds,clean_mpjpe,occluded_mpjpe,occluded_reconst_error,occluded_mpjpe_per_seed\n",
        );
        for (variant, mask) in self.cells() {
            let runs: Vec<&AblationRun> = self.cell(variant, mask).collect();
            let n = runs.len() as f64;
            let mean = |f: fn(&AblationRun) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
            let per_seed: Vec<String> = runs.iter().map(|r| r.occluded_mpjpe.to_string()).collect();
            writeln!(
                out,
                "{variant},{mask},{},{},{},{},{}",
                runs.len(),
                mean(|r| r.clean_mpjpe),
                mean(|r| r.occluded_mpjpe),
                mean(|r| r.occluded_reconst_error),
                per_seed.join(";")
            )
            .unwrap();
        }
        out
    }

    /// One row per individual training run.
    pub fn runs_csv_text(&self) -> String {
        let mut out = String::from("variant,mask_count,seed,clean_mpjpe,occluded_mpjpe,occluded_reconst_error\n");
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant, r.mask_count, r.seed, r.clean_mpjpe, r.occluded_mpjpe, r.occluded_reconst_error
            )
            .unwrap();
        }
        out
    }
}

/// Trains every variant for every seed and evaluates the best-validation
/// model on the clean and occluded test splits.
pub fn run_ablation(
    hierarchy: &MeshHierarchy,
    dataset: &Dataset,
    network: &NetworkConfig,
    train: &TrainConfig,
    config: &AblationConfig,
) -> Result<AblationTable, TrainError> {
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let net_cfg = NetworkConfig { adaptive: variant != Variant::Fixed, seed, ..network.clone() };
            let scratch = variant != Variant::AdaptivePretrain;
            // scratch models ignore the mask count; train them once
            let masks: Vec<Option<usize>> =
                if scratch { vec![None] } else { config.mask_counts.iter().map(|&c| Some(c)).collect() };
            for mask in masks {
                let cfg = TrainConfig { seed, mask_count: mask.or(train.mask_count), ..train.clone() };
                let mut net = DCGNet::new(hierarchy, net_cfg.clone())?;
                let init = match mask {
                    Some(_) => Some(pretrain(&mut net, dataset, &cfg)?.checkpoint),
                    None => None,
                };
                train_main(&mut net, dataset, &cfg, init.as_ref())?;
                let clean = evaluate(&net, &dataset.test, &dataset.regressor)?;
                let occluded = evaluate(&net, &dataset.occluded_test, &dataset.regressor)?;
                log::info!("{variant} mask {mask:?} seed {seed}: occluded mpjpe {:.2}", occluded.mpjpe);
                let counts: Vec<usize> = match mask {
                    Some(c) => vec![c],
                    None => config.mask_counts.clone(),
                };
                for c in counts {
                    runs.push(AblationRun {
                        variant,
                        mask_count: c,
                        seed,
                        clean_mpjpe: clean.mpjpe,
                        occluded_mpjpe: occluded.mpjpe,
                        occluded_reconst_error: occluded.reconst_error,
                    });
                }
            }
        }
    }
    Ok(AblationTable { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::build_hierarchy;
    use crate::data::{body_regressor, body_template, generate_dataset, DataConfig};

    #[test]
    fn mask_counts_scale_with_node_count() {
        assert_eq!(scaled_mask_counts(1723), vec![0, 50, 100, 200]);
        assert_eq!(scaled_mask_counts(432), vec![0, 13, 25, 50]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn table_has_one_row_per_cell() {
        let t = body_template(42).unwrap();
        let h = build_hierarchy(&t, 3, 4).unwrap();
        let r = body_regressor(&t).unwrap();
        let d = generate_dataset(
            &t,
            &r,
            &DataConfig { train_count: 2, val_count: 1, test_count: 1, k_feat: 1, ..DataConfig::default() },
        )
        .unwrap();
        let net = NetworkConfig {
            in_features: 4,
            widths: vec![4, 4, 4, 4],
            attention_features: 2,
            nonlocal_features: 2,
            ..NetworkConfig::default()
        };
        let train = TrainConfig { batch_size: 2, pretrain_steps: 1, main_epochs: 1, ..TrainConfig::default() };
        let cfg = AblationConfig { seeds: vec![0, 1], variants: Variant::ALL.to_vec(), mask_counts: vec![0, 3] };
        let table = run_ablation(&h, &d, &net, &train, &cfg).unwrap();
        assert_eq!(table.runs.len(), 3 * 2 * 2);
        let csv = table.csv_text();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("fixed,0,2,"));
        assert_eq!(table.runs_csv_text().lines().count(), 1 + 12);
        // scratch rows are shared across mask counts
        assert_eq!(table.mean_occluded(Variant::Fixed, 0), table.mean_occluded(Variant::Fixed, 3));
        assert!(table.mean_occluded(Variant::Fixed, 7).is_none());
    }
}
