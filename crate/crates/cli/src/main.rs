//! `cato`: dataset generation, training, evaluation and theory verification
//! for the charted axial transformer operator.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric
//! failure, 3 theory-bound violation.

use anyhow::{Context, Result};
use cato_core::chart::{chart_forward, dump_chart_csv};
use cato_core::data::{
    build_dataset, load_dataset, load_pointcloud, pc_file_names, save_dataset,
    save_pointcloud_dataset, DataConfig, Manifest,
};
use cato_core::loss::LossWeights;
use cato_core::model::{CatoConfig, ModelKind, ModelState};
use cato_core::pc::{
    eval_pc_model, train_pc_model, PcConfig, PcModelState, PcSample, PointCloud,
};
use cato_core::theory::run_default_suite;
use cato_core::train::{evaluate, train_model, EvalReport, MetricsSink, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Resolved run configuration; every subcommand reads the sections it
/// needs. A `--config` JSON file provides defaults, flags override.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    model: CatoConfig,
    pc_model: PcConfig,
    loss: LossWeights,
    train: TrainConfig,
    data: DataConfig,
    /// Train the lift+readout baseline instead of the full model.
    baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            // Desk-scale model and the steady-diffusion loss preset.
            model: CatoConfig::desk(),
            pc_model: PcConfig::default(),
            loss: LossWeights::darcy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            baseline: false,
        }
    }
}

#[derive(Parser)]
#[command(name = "cato", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct CommonOverrides {
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
struct ModelOverrides {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Train the lift+readout baseline (no blocks).
    #[arg(long)]
    baseline: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic steady-diffusion dataset.
    Generate {
        #[command(flatten)]
        common: CommonOverrides,
        /// Output dataset directory.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        contrast: Option<f64>,
        /// fixed_source | random_source | manufactured_distorted
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        distortion: Option<f64>,
        /// Also write point-cloud (`CATP`) versions of every sample.
        #[arg(long)]
        pc: bool,
    },
    /// Train the grid model on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonOverrides,
        #[command(flatten)]
        model: ModelOverrides,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write per-node (x, y, xi, eta) chart coordinates as CSV.
        #[arg(long)]
        dump_chart: Option<PathBuf>,
        /// Metric pipeline check: score the targets against themselves.
        #[arg(long)]
        oracle_injection: bool,
    },
    /// Run the approximation/stability verification suite.
    VerifyTheory {
        #[command(flatten)]
        common: CommonOverrides,
        /// Write the bound reports as JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the point-cloud variant on the `CATP` files of a dataset.
    TrainPc {
        #[command(flatten)]
        common: CommonOverrides,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a point-cloud checkpoint.
    EvalPc {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn load_config(common: &CommonOverrides) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| "parsing config JSON")?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    } else {
        cfg.train.seed = cfg.seed;
    }
    Ok(cfg)
}

fn apply_train_overrides(cfg: &mut RunConfig, m: &ModelOverrides, t: &TrainOverrides) {
    if let Some(v) = m.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = m.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = m.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = t.max_lr {
        cfg.train.max_lr = v;
    }
    if let Some(v) = t.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = t.lambda_g {
        cfg.loss.lambda_g = v;
    }
    if let Some(v) = t.lambda_f {
        cfg.loss.lambda_f = v;
    }
    if let Some(v) = t.lambda_c {
        cfg.loss.lambda_c = v;
    }
    if t.baseline {
        cfg.baseline = true;
    }
}

fn read_manifest(dataset: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dataset.join("manifest.json"))
        .with_context(|| format!("dataset manifest in {}", dataset.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_generate(
    common: CommonOverrides,
    out_dir: PathBuf,
    h: Option<usize>,
    w: Option<usize>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    contrast: Option<f64>,
    mode: Option<String>,
    distortion: Option<f64>,
    pc: bool,
) -> Result<i32> {
    let mut cfg = load_config(&common)?;
    let d = &mut cfg.data;
    if let Some(v) = h {
        d.h = v;
    }
    if let Some(v) = w {
        d.w = v;
    }
    if let Some(v) = n_train {
        d.n_train = v;
    }
    if let Some(v) = n_test {
        d.n_test = v;
    }
    if let Some(v) = contrast {
        d.contrast = v;
    }
    if let Some(v) = distortion {
        d.distortion_amplitude = v;
    }
    if let Some(m) = mode {
        d.mode = serde_json::from_value(serde_json::Value::String(m.clone()))
            .map_err(|_| anyhow::anyhow!("unknown mode `{m}`"))?;
    }
    d.validate()?;
    if out_dir.exists() && !out_dir.is_dir() {
        anyhow::bail!("output path {} is not a directory", out_dir.display());
    }
    let ds = build_dataset::<f64>(&cfg.data, cfg.seed)?;
    save_dataset(&out_dir, &cfg.data, cfg.seed, &ds)?;
    if pc {
        save_pointcloud_dataset(&out_dir, cfg.seed, &ds)?;
    }
    println!(
        "generated {} train / {} test samples at {}x{} in {}",
        ds.train.len(),
        ds.test.len(),
        cfg.data.h,
        cfg.data.w,
        out_dir.display()
    );
    Ok(0)
}

fn cmd_train(
    common: CommonOverrides,
    model_ov: ModelOverrides,
    train_ov: TrainOverrides,
    dataset: PathBuf,
    out_dir: PathBuf,
) -> Result<i32> {
    let mut cfg = load_config(&common)?;
    apply_train_overrides(&mut cfg, &model_ov, &train_ov);
    let data = load_dataset::<f64>(&dataset)?;
    cfg.model.feat_dim = data.feat_dim;
    std::fs::create_dir_all(&out_dir)?;

    let mut model = if cfg.baseline {
        ModelState::<f64>::baseline(cfg.model.clone(), cfg.seed)?
    } else {
        ModelState::<f64>::new(cfg.model.clone(), cfg.seed)?
    };
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut metrics = MetricsSink::to_file(&out_dir.join("metrics.jsonl"))?;
    let stats = train_model(&mut model, &data, &cfg.loss, &cfg.train, &mut metrics, Some(&out_dir))?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(0)
}

fn model_kind_of(cfg: &RunConfig) -> ModelKind {
    if cfg.baseline {
        ModelKind::LiftReadout
    } else {
        ModelKind::Full
    }
}

fn cmd_eval(
    common: CommonOverrides,
    checkpoint: PathBuf,
    dataset: PathBuf,
    dump_chart: Option<PathBuf>,
    oracle_injection: bool,
) -> Result<i32> {
    // Default to the resolved config written next to the checkpoint.
    let mut common = common;
    if common.config.is_none() {
        let sibling = checkpoint.parent().map(|p| p.join("config.json"));
        if let Some(s) = sibling.filter(|s| s.exists()) {
            common.config = Some(s);
        }
    }
    let mut cfg = load_config(&common)?;
    let data = load_dataset::<f64>(&dataset)?;
    cfg.model.feat_dim = data.feat_dim;

    let report: EvalReport = if oracle_injection {
        let per_sample: Vec<f64> = data
            .test
            .iter()
            .map(|s| cato_core::loss::rel_l2(&s.target.data, &s.target.data))
            .collect();
        let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        EvalReport { mean_rel_l2: mean, per_sample, wall_secs: 0.0, param_count: 0, flop_estimate: 0 }
    } else {
        let model = ModelState::<f64>::load(cfg.model.clone(), model_kind_of(&cfg), &checkpoint)?;
        if let Some(path) = dump_chart {
            let coords = &data.mesh.coords;
            let z = chart_forward(&model.chart, &model.params, coords, data.mesh.h, data.mesh.w)?;
            dump_chart_csv(&path, coords, &z)?;
        }
        evaluate(&model, &data.mesh, &data.test, &data.stats)?
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn cmd_verify_theory(common: CommonOverrides, out: Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(&common)?;
    let suite = run_default_suite(cfg.seed)?;
    let json = serde_json::to_string_pretty(&suite)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(if suite.all_pass { 0 } else { 3 })
}

fn load_pc_split(dataset: &Path, manifest: &Manifest, split: &str) -> Result<Vec<PcSample<f64>>> {
    let count = manifest.entries.iter().filter(|e| e.split == split).count();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (pc_name, u_name) = pc_file_names(split, i);
        let (coords, raw_feats) = load_pointcloud::<f64>(&dataset.join(&pc_name))?;
        let (_, target) = cato_core::checkpoint::load_tensor::<f64>(&dataset.join(&u_name))?;
        let feats = manifest.stats.normalize(&raw_feats);
        out.push(PcSample { cloud: PointCloud::new(coords, feats)?, target });
    }
    Ok(out)
}

fn cmd_train_pc(
    common: CommonOverrides,
    train_ov: TrainOverrides,
    dataset: PathBuf,
    out_dir: PathBuf,
) -> Result<i32> {
    let mut cfg = load_config(&common)?;
    apply_train_overrides(&mut cfg, &ModelOverrides::default(), &train_ov);
    let manifest = read_manifest(&dataset)?;
    let train = load_pc_split(&dataset, &manifest, "train")?;
    let test = load_pc_split(&dataset, &manifest, "test")?;
    if train.is_empty() {
        anyhow::bail!(
            "no point-cloud samples in {} (generate with --pc)",
            dataset.display()
        );
    }
    cfg.pc_model.feat_dim = train[0].cloud.feat_dim();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut model = PcModelState::<f64>::new(cfg.pc_model.clone(), cfg.seed)?;
    let stats = train_pc_model(
        &mut model,
        &train,
        &test,
        cfg.train.epochs,
        cfg.train.batch,
        cfg.train.max_lr,
        cfg.seed,
    )?;
    model.save(&out_dir.join("model.cato1"))?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(0)
}

fn cmd_eval_pc(common: CommonOverrides, checkpoint: PathBuf, dataset: PathBuf) -> Result<i32> {
    let mut common = common;
    if common.config.is_none() {
        let sibling = checkpoint.parent().map(|p| p.join("config.json"));
        if let Some(s) = sibling.filter(|s| s.exists()) {
            common.config = Some(s);
        }
    }
    let mut cfg = load_config(&common)?;
    let manifest = read_manifest(&dataset)?;
    let test = load_pc_split(&dataset, &manifest, "test")?;
    if test.is_empty() {
        anyhow::bail!("no point-cloud test samples in {}", dataset.display());
    }
    cfg.pc_model.feat_dim = test[0].cloud.feat_dim();
    let model = PcModelState::<f64>::load(cfg.pc_model.clone(), &checkpoint)?;
    let err = eval_pc_model(&model, &test)?;
    println!("{}", serde_json::json!({ "mean_rel_l2": err, "samples": test.len() }));
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { common, out_dir, h, w, n_train, n_test, contrast, mode, distortion, pc } => {
            cmd_generate(common, out_dir, h, w, n_train, n_test, contrast, mode, distortion, pc)
        }
        Command::Train { common, model, train, dataset, out_dir } => {
            cmd_train(common, model, train, dataset, out_dir)
        }
        Command::Eval { common, checkpoint, dataset, dump_chart, oracle_injection } => {
            cmd_eval(common, checkpoint, dataset, dump_chart, oracle_injection)
        }
        Command::VerifyTheory { common, out } => cmd_verify_theory(common, out),
        Command::TrainPc { common, train, dataset, out_dir } => {
            cmd_train_pc(common, train, dataset, out_dir)
        }
        Command::EvalPc { common, checkpoint, dataset } => cmd_eval_pc(common, checkpoint, dataset),
    }
}

/// Map failures onto the documented exit codes.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<cato_core::Error>() {
        match core {
            cato_core::Error::Numeric(_)
            | cato_core::Error::NonFinite { .. }
            | cato_core::Error::Solver(_)
            | cato_core::Error::Fit(_) => 2,
            _ => 1,
        }
    } else {
        1
    }
}

fn main() {
    cato_core::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own message, but with the documented usage exit code.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
