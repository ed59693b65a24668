//! Flat `key = value` run configuration. Later sources override earlier
//! ones: defaults, then the config file, then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ablation::Variant;
use crate::autodiff::GroupNormStats;
use crate::completion::MaskMode;
use crate::data::DataConfig;
use crate::losses::{LossWeights, Reduction};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "run", "output directory for every command"),
    ("seed", "0", "seed for data generation, initialization and batching"),
    ("template", "", "template OBJ; empty generates the built-in body template"),
    ("template_nodes", "432", "vertex count of the generated template"),
    ("levels", "0", "coarsening steps; 0 coarsens until one node remains"),
    ("factor", "4", "node reduction factor per level"),
    ("hierarchy", "", "hierarchy manifest; empty means <out>/hierarchy/hierarchy.txt"),
    ("dataset", "", "dataset manifest; empty means <out>/data/manifest.txt"),
    ("checkpoint", "", "checkpoint for eval and infer; empty means <out>/train/best.ckpt"),
    ("init_checkpoint", "", "train: start from these parameters (e.g. a pretrain checkpoint)"),
    ("resume", "", "train: continue parameters and optimizer state from this checkpoint"),
    ("train_count", "128", "training samples"),
    ("val_count", "32", "validation samples"),
    ("test_count", "32", "test samples (the occluded split copies them)"),
    ("deform_scale", "40", "per-axis bound of the smooth deformation, mm"),
    ("noise_fraction", "0.05", "input noise sigma as a fraction of the template bbox diagonal"),
    ("k_feat", "16", "random-projection features per vertex"),
    ("occlusion_fraction", "0.116", "fraction of input rows zeroed in the occluded test split"),
    ("widths", "", "comma-separated feature width per level; empty uses 16,32,64,64,..."),
    ("units_per_level", "2", "GCN units per encoder and decoder level"),
    ("attention_features", "16", "output width of each fusion attention branch"),
    ("nonlocal_features", "16", "inner width of the non-local block"),
    ("adaptive_adjacency", "true", "learned adjacency residuals (false: fixed normalized adjacency)"),
    ("share_adjacency", "false", "one learned adjacency per level instead of per layer"),
    ("nonlocal", "true", "non-local block on the coarsest encoder output"),
    ("groupnorm_stats", "across_nodes", "group norm statistics: across_nodes or per_node"),
    ("coord_scale", "1000", "inputs are divided and outputs multiplied by this"),
    ("batch_size", "16", "samples per optimizer step"),
    ("learning_rate", "0.0003", "Adam learning rate"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("pretrain_steps", "2000", "completion pretraining steps"),
    ("main_epochs", "20", "supervised training epochs"),
    ("mask_count", "auto", "rows masked per completion sample; auto is round(0.116 N)"),
    ("mask_mode", "uniform_random", "uniform_random or contiguous_patch"),
    ("weight_vertex", "1", "vertex loss weight"),
    ("weight_joint3d", "1", "3D joint loss weight"),
    ("weight_joint2d", "1", "2D joint loss weight"),
    ("reduction", "sum", "loss reduction over rows: sum or mean"),
    ("eval_split", "test", "eval: train, val, test, occluded_test or all"),
    ("sample", "", "infer: sample file to run"),
    ("gradcheck_seeds", "10", "gradcheck: random seeds"),
    ("gradcheck_nodes", "48", "gradcheck: template vertices (at most 64)"),
    ("gradcheck_entries", "3", "gradcheck: probed entries per network parameter"),
    ("ablate_seeds", "0,1,2", "ablate: training seeds"),
    ("ablate_variants", "fixed,adaptive,adaptive+pretrain", "ablate: variants to train"),
    ("ablate_mask_counts", "auto", "ablate: pretraining mask counts; auto is {0,50,100,200} scaled by N/1723"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Sets a key; unknown keys are reported, values are checked later by
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match self.values.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(format!("unknown key {key:?}")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str()).unwrap_or_else(|| panic!("no key {key}"))
    }

    /// Applies `key = value` lines; `#` starts a comment. Returns every
    /// problem found rather than stopping at the first.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Vec<String> {
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errors.push(format!("{origin}:{}: {e}", i + 1));
                    }
                }
                None => errors.push(format!("{origin}:{}: expected key = value, got {line:?}", i + 1)),
            }
        }
        errors
    }

    pub fn load_file(&mut self, path: &Path) -> Vec<String> {
        match fs::read_to_string(path) {
            Ok(text) => self.apply_text(&text, &path.display().to_string()),
            Err(e) => vec![format!("{}: {e}", path.display())],
        }
    }

    /// The effective configuration in file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Typed view of the configuration, or every violation found.
    pub fn validate(&self) -> Result<Settings, Vec<String>> {
        let mut p = Parser { cfg: self, errors: Vec::new() };
        let out = PathBuf::from(self.get("out"));
        let path_or = |key: &str, default: PathBuf| {
            let v = self.get(key);
            if v.is_empty() { default } else { PathBuf::from(v) }
        };
        let optional_path = |key: &str| {
            let v = self.get(key);
            (!v.is_empty()).then(|| PathBuf::from(v))
        };
        let seed = p.num::<u64>("seed");
        let template_nodes = p.num::<usize>("template_nodes");
        if template_nodes < 12 {
            p.err("template_nodes", "must be at least 12");
        }
        let factor = p.num::<usize>("factor");
        if factor < 2 {
            p.err("factor", "must be at least 2");
        }
        let data = DataConfig {
            train_count: p.num("train_count"),
            val_count: p.num("val_count"),
            test_count: p.num("test_count"),
            deform_scale: p.num("deform_scale"),
            noise_fraction: p.num("noise_fraction"),
            k_feat: p.num("k_feat"),
            occlusion_fraction: p.num("occlusion_fraction"),
            seed,
            ..DataConfig::default()
        };
        let widths = p.list::<usize>("widths");
        if widths.contains(&0) {
            p.err("widths", "widths must be positive");
        }
        let groupnorm_stats = match self.get("groupnorm_stats") {
            "across_nodes" => GroupNormStats::AcrossNodes,
            "per_node" => GroupNormStats::PerNode,
            other => {
                p.err("groupnorm_stats", &format!("expected across_nodes or per_node, got {other:?}"));
                GroupNormStats::AcrossNodes
            }
        };
        let network = NetworkConfig {
            in_features: data.in_features(),
            widths,
            units_per_level: p.num("units_per_level"),
            attention_features: p.num("attention_features"),
            adaptive: p.flag("adaptive_adjacency"),
            share_adjacency: p.flag("share_adjacency"),
            nonlocal: p.flag("nonlocal"),
            nonlocal_features: p.num("nonlocal_features"),
            groupnorm_stats,
            coord_scale: p.num("coord_scale"),
            seed,
            ..NetworkConfig::default()
        };
        for (key, v) in [
            ("units_per_level", network.units_per_level),
            ("attention_features", network.attention_features),
            ("nonlocal_features", network.nonlocal_features),
        ] {
            if v == 0 {
                p.err(key, "must be positive");
            }
        }
        if !(network.coord_scale > 0.0 && network.coord_scale.is_finite()) {
            p.err("coord_scale", "must be positive");
        }
        let mask_count = match self.get("mask_count") {
            "auto" => None,
            _ => Some(p.num::<usize>("mask_count")),
        };
        if let Some(c) = mask_count {
            if c > template_nodes {
                p.err("mask_count", &format!("cannot exceed template_nodes ({template_nodes})"));
            }
        }
        let mask_mode = self.get("mask_mode").parse::<MaskMode>().unwrap_or_else(|e| {
            p.err("mask_mode", &e.to_string());
            MaskMode::UniformRandom
        });
        let reduction = match self.get("reduction") {
            "sum" => Reduction::Sum,
            "mean" => Reduction::Mean,
            other => {
                p.err("reduction", &format!("expected sum or mean, got {other:?}"));
                Reduction::Sum
            }
        };
        let train = TrainConfig {
            batch_size: p.num("batch_size"),
            learning_rate: p.num("learning_rate"),
            adam_beta1: p.num("adam_beta1"),
            adam_beta2: p.num("adam_beta2"),
            adam_eps: p.num("adam_eps"),
            pretrain_steps: p.num("pretrain_steps"),
            main_epochs: p.num("main_epochs"),
            mask_count,
            mask_mode,
            seed,
            loss_weights: LossWeights {
                vertex: p.num("weight_vertex"),
                joint3d: p.num("weight_joint3d"),
                joint2d: p.num("weight_joint2d"),
            },
            reduction,
        };
        p.errors.extend(data.validate());
        p.errors.extend(train.validate());
        let eval_split = self.get("eval_split").to_string();
        if !["train", "val", "test", "occluded_test", "all"].contains(&eval_split.as_str()) {
            p.err("eval_split", &format!("unknown split {eval_split:?}"));
        }
        let gradcheck_nodes = p.num::<usize>("gradcheck_nodes");
        if !(12..=64).contains(&gradcheck_nodes) {
            p.err("gradcheck_nodes", "must lie in 12..=64");
        }
        let ablate_variants: Vec<Variant> = self
            .get("ablate_variants")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .filter_map(|s| s.trim().parse().map_err(|e: String| p.err("ablate_variants", &e)).ok())
            .collect();
        let ablate_mask_counts = match self.get("ablate_mask_counts") {
            "auto" => None,
            _ => Some(p.list::<usize>("ablate_mask_counts")),
        };
        let settings = Settings {
            hierarchy: path_or("hierarchy", out.join("hierarchy").join("hierarchy.txt")),
            dataset: path_or("dataset", out.join("data").join("manifest.txt")),
            checkpoint: path_or("checkpoint", out.join("train").join("best.ckpt")),
            init_checkpoint: optional_path("init_checkpoint"),
            resume: optional_path("resume"),
            template: optional_path("template"),
            sample: optional_path("sample"),
            out,
            seed,
            template_nodes,
            levels: p.num("levels"),
            factor,
            data,
            network,
            train,
            eval_split,
            gradcheck_seeds: p.num("gradcheck_seeds"),
            gradcheck_nodes,
            gradcheck_entries: p.num("gradcheck_entries"),
            ablate_seeds: p.list("ablate_seeds"),
            ablate_variants,
            ablate_mask_counts,
        };
        if p.errors.is_empty() { Ok(settings) } else { Err(p.errors) }
    }
}

struct Parser<'a> {
    cfg: &'a RunConfig,
    errors: Vec<String>,
}

impl Parser<'_> {
    fn err(&mut self, key: &str, message: &str) {
        self.errors.push(format!("{key}: {message}"));
    }

    fn num<T: std::str::FromStr + Default>(&mut self, key: &str) -> T {
        let v = self.cfg.get(key);
        v.parse().unwrap_or_else(|_| {
            self.err(key, &format!("cannot parse {v:?}"));
            T::default()
        })
    }

    fn flag(&mut self, key: &str) -> bool {
        match self.cfg.get(key) {
            "true" | "yes" | "on" | "1" => true,
            "false" | "no" | "off" | "0" => false,
            other => {
                self.err(key, &format!("expected true or false, got {other:?}"));
                false
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Vec<T> {
        let v = self.cfg.get(key).to_string();
        let mut out = Vec::new();
        for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.parse() {
                Ok(x) => out.push(x),
                Err(_) => self.err(key, &format!("cannot parse list entry {part:?}")),
            }
        }
        out
    }
}

/// Validated, typed settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub out: PathBuf,
    pub seed: u64,
    pub template: Option<PathBuf>,
    pub template_nodes: usize,
    pub levels: usize,
    pub factor: usize,
    pub hierarchy: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub sample: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval_split: String,
    pub gradcheck_seeds: u64,
    pub gradcheck_nodes: usize,
    pub gradcheck_entries: usize,
    pub ablate_seeds: Vec<u64>,
    pub ablate_variants: Vec<Variant>,
    pub ablate_mask_counts: Option<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let s = RunConfig::default().validate().unwrap();
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.data, DataConfig::default());
        assert_eq!(s.network, NetworkConfig::default());
        assert_eq!(s.hierarchy, PathBuf::from("run/hierarchy/hierarchy.txt"));
        assert_eq!(s.ablate_seeds, vec![0, 1, 2]);
        assert_eq!(s.ablate_variants, Variant::ALL.to_vec());
    }

    #[test]
    fn later_sources_win_and_text_round_trips() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("batch_size = 4 # small\n\nlearning_rate=0.01\n", "f").is_empty());
        c.set("batch_size", "8").unwrap();
        let s = c.validate().unwrap();
        assert_eq!(s.train.batch_size, 8);
        assert_eq!(s.train.learning_rate, 0.01);
        let mut d = RunConfig::default();
        assert!(d.apply_text(&c.to_text(), "echo").is_empty());
        assert_eq!(d, c);
    }

    #[test]
    fn every_violation_is_reported() {
        let mut c = RunConfig::default();
        let errs = c.apply_text("nonsense = 1\nno equals sign\n", "f");
        assert_eq!(errs.len(), 2);
        for (k, v) in [("batch_size", "0"), ("learning_rate", "abc"), ("mask_mode", "holes"), ("factor", "1"), ("nonlocal", "maybe")] {
            c.set(k, v).unwrap();
        }
        let errs = c.validate().unwrap_err();
        for key in ["batch_size", "learning_rate", "mask_mode", "factor", "nonlocal"] {
            assert!(errs.iter().any(|e| e.starts_with(key)), "{key} missing from {errs:?}");
        }
    }
}
