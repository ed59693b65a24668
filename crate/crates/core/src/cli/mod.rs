//! Command-line front end: `hierarchy`, `gendata`, `pretrain`, `train`,
//! `eval`, `infer`, `gradcheck` and `ablate`.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::ablation::{run_ablation, scaled_mask_counts, AblationConfig};
use crate::autodiff::gradcheck::GradTolerance;
use crate::coarsen::{build_full_hierarchy, build_hierarchy, load_hierarchy, save_hierarchy, MeshHierarchy};
use crate::data::{body_regressor, body_template, generate_dataset, load_dataset, save_dataset, Dataset, Sample, Split};
use crate::mesh::{load_obj, save_obj, TriMesh};
use crate::metrics::EvalReport;
use crate::network::{DCGNet, NetworkConfig};
use crate::train::{continue_main, evaluate, log_csv, pretrain, train_main, Checkpoint, EpochRecord, Trainer};
use crate::verify::gradient_suite;
use config::{RunConfig, Settings};

#[derive(Debug, Parser)]
#[command(name = "dcgnet", version, about = "Graph convolution mesh regression with learnable adjacency")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the `out` key.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any config key, e.g. `--set main_epochs=5`. Repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the template and its coarsening hierarchy.
    Hierarchy,
    /// Generate the synthetic dataset.
    Gendata,
    /// Shape-completion pretraining.
    Pretrain,
    /// Supervised training (optionally from a pretrain checkpoint).
    Train {
        /// Start from these parameters (`init_checkpoint`).
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Continue an interrupted run (`resume`).
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// train, val, test, occluded_test or all (`eval_split`).
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict one sample and write the mesh as OBJ.
    Infer {
        /// Sample file (`sample`).
        #[arg(value_name = "SAMPLE")]
        sample: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and the full network.
    Gradcheck,
    /// Fixed vs adaptive adjacency vs pretraining, over seeds and mask counts.
    Ablate,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Run(String),
    #[error("gradient check failed")]
    GradCheck,
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Run(_) => "runtime",
            CliError::GradCheck => "gradcheck",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::GradCheck => 4,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| input_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

/// Effective configuration: defaults, then `--config`, then flags.
pub fn resolve_config(cli: &Cli) -> Result<(RunConfig, Settings), CliError> {
    let mut cfg = RunConfig::default();
    let mut errors = Vec::new();
    if let Some(path) = &cli.global.config {
        errors.extend(cfg.load_file(path));
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &cli.global.set {
        match kv.split_once('=') {
            Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
            None => errors.push(format!("--set {kv:?}: expected KEY=VALUE")),
        }
    }
    if let Some(seed) = cli.global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.global.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    let path_flag = |key: &str, p: &Option<PathBuf>| p.as_ref().map(|p| (key.to_string(), p.display().to_string()));
    match &cli.command {
        Command::Train { init, resume } => {
            overrides.extend(path_flag("init_checkpoint", init));
            overrides.extend(path_flag("resume", resume));
        }
        Command::Eval { checkpoint, split } => {
            overrides.extend(path_flag("checkpoint", checkpoint));
            overrides.extend(split.as_ref().map(|s| ("eval_split".to_string(), s.clone())));
        }
        Command::Infer { sample, checkpoint } => {
            overrides.extend(path_flag("sample", sample));
            overrides.extend(path_flag("checkpoint", checkpoint));
        }
        _ => {}
    }
    for (k, v) in overrides {
        if let Err(e) = cfg.set(&k, &v) {
            errors.push(format!("flag: {e}"));
        }
    }
    match cfg.validate() {
        Ok(settings) if errors.is_empty() => Ok((cfg, settings)),
        Ok(_) => Err(CliError::Config(errors)),
        Err(more) => {
            errors.extend(more);
            Err(CliError::Config(errors))
        }
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let level = std::env::var("DCGNET_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            for line in e.to_string().lines() {
                eprintln!("error[{}]: {line}", e.category());
            }
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, s) = resolve_config(cli)?;
    let name = match cli.command {
        Command::Hierarchy => "hierarchy",
        Command::Gendata => "gendata",
        Command::Pretrain => "pretrain",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Gradcheck => "gradcheck",
        Command::Ablate => "ablate",
    };
    write_file(&s.out.join(format!("{name}.config.txt")), cfg.to_text())?;
    match cli.command {
        Command::Hierarchy => cmd_hierarchy(&s),
        Command::Gendata => cmd_gendata(&s),
        Command::Pretrain => cmd_pretrain(&cfg, &s),
        Command::Train { .. } => cmd_train(&cfg, &s),
        Command::Eval { .. } => cmd_eval(&s),
        Command::Infer { .. } => cmd_infer(&s),
        Command::Gradcheck => cmd_gradcheck(&s),
        Command::Ablate => cmd_ablate(&s),
    }
}

fn make_template(s: &Settings) -> Result<TriMesh, CliError> {
    match &s.template {
        Some(path) => load_obj(path).map_err(input_err),
        None => body_template(s.template_nodes).map_err(run_err),
    }
}

pub fn cmd_hierarchy(s: &Settings) -> Result<(), CliError> {
    let template = make_template(s)?;
    let h = if s.levels == 0 {
        build_full_hierarchy(&template, s.factor)
    } else {
        build_hierarchy(&template, s.levels, s.factor)
    }
    .map_err(run_err)?;
    if let Some(dir) = s.hierarchy.parent() {
        fs::create_dir_all(dir).map_err(input_err)?;
    }
    save_hierarchy(&h, &s.hierarchy).map_err(input_err)?;
    let counts: Vec<String> = h.node_counts().iter().map(usize::to_string).collect();
    println!("hierarchy {} levels: {}", h.depth(), counts.join(" -> "));
    println!("wrote {}", s.hierarchy.display());
    Ok(())
}

fn load_hier(s: &Settings) -> Result<MeshHierarchy, CliError> {
    if !s.hierarchy.exists() {
        return Err(CliError::Input(format!(
            "hierarchy manifest {} not found; run `dcgnet hierarchy` first",
            s.hierarchy.display()
        )));
    }
    load_hierarchy(&s.hierarchy).map_err(input_err)
}

pub fn cmd_gendata(s: &Settings) -> Result<(), CliError> {
    let h = load_hier(s)?;
    let template = h.levels[0].clone();
    let regressor = body_regressor(&template).map_err(run_err)?;
    let dataset = generate_dataset(&template, &regressor, &s.data).map_err(run_err)?;
    let dir = s.dataset.parent().unwrap_or(Path::new(".")).to_path_buf();
    let hierarchy_rel = pathdiff(&s.hierarchy, &dir);
    let manifest = save_dataset(&dataset, &dir, Some(hierarchy_rel)).map_err(input_err)?;
    if manifest != s.dataset {
        fs::rename(&manifest, &s.dataset).map_err(input_err)?;
    }
    println!(
        "dataset: {} train, {} val, {} test, {} occluded_test samples",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.occluded_test.len()
    );
    println!("wrote {}", s.dataset.display());
    Ok(())
}

/// Relative path from `base` to `target` when both are relative or both
/// absolute; falls back to an absolute path.
fn pathdiff(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (abs(target), abs(base));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return t;
    }
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

fn load_data(s: &Settings, h: &MeshHierarchy) -> Result<Dataset, CliError> {
    if !s.dataset.exists() {
        return Err(CliError::Input(format!(
            "dataset manifest {} not found; run `dcgnet gendata` first",
            s.dataset.display()
        )));
    }
    let d = load_dataset(&s.dataset).map_err(input_err)?;
    if d.num_nodes() != h.node_counts()[0] {
        return Err(CliError::Input(format!(
            "dataset has {} nodes but the hierarchy starts at {}",
            d.num_nodes(),
            h.node_counts()[0]
        )));
    }
    Ok(d)
}

fn network_config(s: &Settings, d: &Dataset) -> NetworkConfig {
    NetworkConfig { in_features: d.in_features(), ..s.network.clone() }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(input_err)
}

pub fn cmd_pretrain(cfg: &RunConfig, s: &Settings) -> Result<(), CliError> {
    let h = load_hier(s)?;
    let d = load_data(s, &h)?;
    let mut net = DCGNet::new(&h, network_config(s, &d)).map_err(run_err)?;
    let out = pretrain(&mut net, &d, &s.train).map_err(run_err)?;
    let dir = s.out.join("pretrain");
    let mut ckpt = out.checkpoint;
    ckpt.config = cfg.pairs();
    write_file(&dir.join("pretrain.ckpt"), ckpt.to_bytes())?;
    write_file(&dir.join("log.csv"), log_csv(&out.log))?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!("completion loss {:.4} -> {:.4} over {} steps", first.total, last.total, out.log.len());
    }
    println!("wrote {}", dir.join("pretrain.ckpt").display());
    Ok(())
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,val_mpjpe,val_reconst_error,val_pck,val_auc,val_vertex_error\n");
    for r in history {
        let v = &r.val;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, v.mpjpe, v.reconst_error, v.pck, v.auc, v.vertex_error
        ));
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, s: &Settings) -> Result<(), CliError> {
    let h = load_hier(s)?;
    let d = load_data(s, &h)?;
    let mut net = DCGNet::new(&h, network_config(s, &d)).map_err(run_err)?;
    let outcome = match &s.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut trainer = Trainer::resume(net.clone(), &d, s.train.clone(), &ckpt).map_err(run_err)?;
            let outcome = continue_main(&mut trainer).map_err(run_err)?;
            outcome.best.apply(&mut net).map_err(run_err)?;
            outcome
        }
        None => {
            let init = s.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
            train_main(&mut net, &d, &s.train, init.as_ref()).map_err(run_err)?
        }
    };
    let dir = s.out.join("train");
    for (name, ckpt) in [("best.ckpt", &outcome.best), ("last.ckpt", &outcome.last)] {
        let mut ckpt = ckpt.clone();
        ckpt.config = cfg.pairs();
        write_file(&dir.join(name), ckpt.to_bytes())?;
    }
    write_file(&dir.join("log.csv"), log_csv(&outcome.log))?;
    write_file(&dir.join("val_history.csv"), history_csv(&outcome.history))?;
    let first = &outcome.history[0].val;
    let best = &outcome.history.iter().find(|r| r.epoch == outcome.best_epoch).expect("best epoch recorded").val;
    println!("val mpjpe {:.2} (epoch {}) -> {:.2} (best, epoch {})", first.mpjpe, outcome.history[0].epoch, best.mpjpe, outcome.best_epoch);
    println!("wrote {}", dir.join("best.ckpt").display());
    Ok(())
}

fn restore_net(s: &Settings, h: &MeshHierarchy, d: &Dataset) -> Result<DCGNet, CliError> {
    let ckpt = load_checkpoint(&s.checkpoint)?;
    let mut net = DCGNet::new(h, network_config(s, d)).map_err(run_err)?;
    ckpt.apply(&mut net).map_err(|e| {
        CliError::Input(format!("{}: {e} (does the config match the one used for training?)", s.checkpoint.display()))
    })?;
    Ok(net)
}

pub fn cmd_eval(s: &Settings) -> Result<(), CliError> {
    let h = load_hier(s)?;
    let d = load_data(s, &h)?;
    let net = restore_net(s, &h, &d)?;
    let splits: Vec<Split> = if s.eval_split == "all" {
        Split::ALL.to_vec()
    } else {
        vec![s.eval_split.parse().map_err(|e: String| CliError::Config(vec![e]))?]
    };
    let dir = s.out.join("eval");
    fs::create_dir_all(&dir).map_err(input_err)?;
    for split in splits {
        let samples = d.split(split);
        if samples.is_empty() {
            println!("{split}: no samples");
            continue;
        }
        let report: EvalReport = evaluate(&net, samples, &d.regressor).map_err(run_err)?;
        report.write(&dir, &split.to_string()).map_err(input_err)?;
        println!(
            "{split}: mpjpe {:.2} reconst_error {:.2} pck {:.3} auc {:.3} ({} samples)",
            report.mpjpe,
            report.reconst_error,
            report.pck,
            report.auc,
            samples.len()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_infer(s: &Settings) -> Result<(), CliError> {
    let path = s.sample.as_ref().ok_or_else(|| CliError::Config(vec!["sample: required for infer".into()]))?;
    let h = load_hier(s)?;
    let d = load_data(s, &h)?;
    let net = restore_net(s, &h, &d)?;
    let sample = Sample::load(path).map_err(input_err)?;
    let pred = net.predict(&sample.features).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let vertices: Vec<[f64; 3]> = pred.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    let mesh = TriMesh::new(vertices, d.template.faces().to_vec()).map_err(run_err)?;
    let target = s.out.join("infer").join(format!("{}.obj", sample.id));
    if let Some(dir) = target.parent() {
        fs::create_dir_all(dir).map_err(input_err)?;
    }
    save_obj(&mesh, &target).map_err(input_err)?;
    let err = crate::metrics::mpjpe(pred.view(), sample.gt_mesh.view()).map_err(run_err)?;
    println!("{}: mean vertex error {:.2}", sample.id, err);
    println!("wrote {}", target.display());
    Ok(())
}

pub fn cmd_gradcheck(s: &Settings) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    let suite = gradient_suite(s.gradcheck_seeds, s.gradcheck_nodes, s.gradcheck_entries).map_err(run_err)?;
    let tol = GradTolerance::default();
    let mut report = String::from("check,seed,entries,max_relative_error,max_absolute_error,pass\n");
    for c in &suite.checks {
        report.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.name,
            c.seed,
            c.report.checked(),
            c.report.worst_relative(tol),
            c.report.max_absolute(),
            c.report.passes(tol)
        ));
    }
    write_file(&s.out.join("gradcheck").join("report.csv"), report)?;
    let worst = suite.worst_relative(tol);
    let status = if suite.passes(tol) { "PASS" } else { "FAIL" };
    println!(
        "{status}: {} checks, {} entries, max relative error {worst:.3e} (tolerance {:.0e} relative / {:.0e} absolute), {:.1}s",
        suite.checks.len(),
        suite.entries(),
        tol.relative,
        tol.absolute,
        start.elapsed().as_secs_f64()
    );
    if suite.passes(tol) {
        Ok(())
    } else {
        for (name, seed) in suite.failures(tol) {
            eprintln!("failed: {name} (seed {seed})");
        }
        Err(CliError::GradCheck)
    }
}

pub fn cmd_ablate(s: &Settings) -> Result<(), CliError> {
    let h = load_hier(s)?;
    let d = load_data(s, &h)?;
    let mask_counts = s.ablate_mask_counts.clone().unwrap_or_else(|| scaled_mask_counts(d.num_nodes()));
    let cfg = AblationConfig { seeds: s.ablate_seeds.clone(), variants: s.ablate_variants.clone(), mask_counts };
    let table = run_ablation(&h, &d, &network_config(s, &d), &s.train, &cfg).map_err(run_err)?;
    let dir = s.out.join("ablation");
    write_file(&dir.join("ablation.csv"), table.csv_text())?;
    write_file(&dir.join("runs.csv"), table.runs_csv_text())?;
    print!("{}", table.csv_text());
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}
