//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use metal::anomaly::{write_amap, write_heatmap_png, AnomalyMap, ImageScoreMode, AMAP_VERSION};
use metal::data::synthetic::write_dataset;
use metal::data::{self, load_image, make_validation_split, save_image, DatasetSpec, Layout, SyntheticSpec};
use metal::eval::{evaluate, EvalSettings};
use metal::gradcheck;
use metal::metrics::{report_text, write_report_csv};
use metal::nn::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use metal::trainer::{train, write_history_csv, TrainConfig, TrainOptions};
use metal::{Error, MetalConfig, MetalModel};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "metal",
    version,
    about = "Masked multi-shape transformer for anomaly localization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Reconstruct one image and write its anomaly map.
    Infer(InferArgs),
    /// Write a synthetic dataset in the MVTec layout.
    Synth(SynthArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root (for `synthetic`, an optional spec file).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "mvtec", value_parser = ["mvtec", "labeled_folder", "synthetic"])]
    pub layout: String,
    #[arg(long = "class", default_value = "synthetic")]
    pub class_name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key=value config; defaults apply for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fpr_cap: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_parser = ["max", "mean", "topk_mean"])]
    pub image_score_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic spec file; defaults apply for missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "class", default_value = "synthetic")]
    pub class_name: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config; a small built-in configuration is used by default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Check every n-th scalar of each parameter tensor.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!(msg.into()),
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::UnknownKey(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<MetalConfig, Failure> {
    match path {
        None => Ok(MetalConfig::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => MetalConfig::load(p)
            .with_context(|| format!("reading config {}", p.display()))
            .map_err(|e| Failure {
                code: EXIT_USAGE,
                error: e,
            }),
    }
}

fn dataset_spec(d: &DataArgs, cfg: &MetalConfig) -> Result<DatasetSpec, Failure> {
    let layout = Layout::parse(&d.layout)?;
    if layout != Layout::Synthetic && d.data_root.is_none() {
        return Err(usage(format!(
            "--data-root is required for the {} layout",
            layout.as_str()
        )));
    }
    Ok(DatasetSpec {
        root: d.data_root.clone(),
        layout,
        class_name: d.class_name.clone(),
        image_side: cfg.image_side,
        seed: cfg.seed,
        train_normals: cfg.train_normals,
    })
}

/// Config plus the format versions and command needed to rerun it.
fn write_snapshot(out: &Path, cfg: &MetalConfig, command: &str, extra: &[(&str, String)]) -> anyhow::Result<()> {
    let mut text = String::new();
    writeln!(text, "# command: {command}")?;
    writeln!(text, "# metal {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(text, "# checkpoint_format_version: {CHECKPOINT_VERSION}")?;
    writeln!(text, "# amap_format_version: {AMAP_VERSION}")?;
    for (k, v) in extra {
        writeln!(text, "# {k}: {v}")?;
    }
    text.push_str(&cfg.to_text());
    fs::write(out.join("config.txt"), text)?;
    Ok(())
}

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let spec = dataset_spec(&a.data, &cfg)?;
    prepare_out(&a.out)?;
    write_snapshot(
        &a.out,
        &cfg,
        "train",
        &[
            ("layout", spec.layout.as_str().to_string()),
            ("class", spec.class_name.clone()),
            (
                "data_root",
                spec.root.as_ref().map_or("-".into(), |p| p.display().to_string()),
            ),
        ],
    )?;
    let ds = data::load(&spec).context("loading dataset")?;
    let images: Vec<_> = ds.train.into_iter().map(|s| s.image).collect();
    let (train_set, val_set) = make_validation_split(&images, cfg.val_fraction, cfg.seed)?;
    log::info!(
        "training {} on {} images ({} held out), {} parameters",
        cfg.combo.as_str(),
        train_set.len(),
        val_set.len(),
        MetalModel::<f32>::new(&cfg)?.num_params()
    );
    let model = MetalModel::<f32>::new(&cfg)?;
    let opts = TrainOptions {
        dump_dir: Some(a.out.clone()),
    };
    let outcome = train(model, &train_set, &val_set, &TrainConfig::from(&cfg), &opts)?;
    outcome.model.save(a.out.join("model.ckpt"))?;
    write_history_csv(a.out.join("history.csv"), &outcome.history)?;
    println!(
        "stopped at epoch {}, best validation loss {:.6} at epoch {}",
        outcome.stopped_epoch, outcome.best_val_loss, outcome.best_epoch
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<MetalModel<f32>, Failure> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = MetalModel::from_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = model.cfg.clone();
    if let Some(v) = a.fpr_cap {
        cfg.set("fpr_cap", &v.to_string())?;
    }
    if let Some(v) = a.sigma {
        cfg.set("sigma", &v.to_string())?;
    }
    if let Some(v) = &a.image_score_mode {
        cfg.image_score_mode = ImageScoreMode::parse(v)?;
    }
    cfg.validate()?;
    let spec = dataset_spec(&a.data, &cfg)?;
    prepare_out(&a.out)?;
    write_snapshot(
        &a.out,
        &cfg,
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("layout", spec.layout.as_str().to_string()),
            ("class", spec.class_name.clone()),
        ],
    )?;
    let ds = data::load(&spec).context("loading dataset")?;
    if ds.test.is_empty() {
        return Err(Error::Split("the test split is empty".into()).into());
    }
    let settings = EvalSettings::from(&cfg);
    let result = evaluate(&model, &ds.test, &settings)?;
    for n in &result.notices {
        eprintln!("notice: {n}");
    }
    result.write_maps(&ds.test, &a.out.join("maps"))?;
    let row = result.report_row(&spec.class_name, &cfg, &settings);
    let rows = [row];
    write_report_csv(a.out.join("report.csv"), &rows)?;
    let text = report_text(&rows);
    fs::write(a.out.join("report.txt"), &text).context("writing report")?;
    print!("{text}");
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = model.cfg.clone();
    let img = load_image(&a.image, cfg.image_side)?;
    prepare_out(&a.out)?;
    write_snapshot(
        &a.out,
        &cfg,
        "infer",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("image", a.image.display().to_string()),
        ],
    )?;
    let recon = model.reconstruct_patchwise(&img)?;
    let map = AnomalyMap::compute(&img, &recon, cfg.sigma)?;
    save_image(&a.out.join("reconstruction.png"), &recon)?;
    write_amap(a.out.join("anomaly.amap"), &map.smoothed)?;
    write_heatmap_png(a.out.join("heatmap.png"), &map.smoothed)?;
    println!(
        "image score ({}): {:.6}",
        cfg.image_score_mode.as_str(),
        metal::anomaly::image_score(&map, cfg.image_score_mode)
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let mut spec = match &a.spec {
        Some(p) if !p.is_file() => return Err(usage(format!("spec file {} does not exist", p.display()))),
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = data::generate_synthetic(&spec)?;
    prepare_out(&a.out)?;
    write_dataset(&spec, &ds, &a.out, &a.class_name)?;
    println!(
        "wrote {} train and {} test images to {}",
        ds.train.len(),
        ds.test.len(),
        a.out.join(&a.class_name).display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = match &a.config {
        Some(_) => load_config(a.config.as_deref())?,
        None => gradcheck::tiny_config(),
    };
    if a.stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let results = gradcheck::run_suite(&cfg, a.stride)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<32} checked {:>7}  failures {:>4}  max rel error {:.2e}",
            r.name, r.checked, r.failures, r.max_rel_error
        );
        if !r.passed() {
            failed += 1;
            println!("     worst: {}", r.worst);
        }
    }
    if failed > 0 {
        bail_runtime(format!("{failed} gradient checks failed"))?;
    }
    Ok(())
}

fn bail_runtime(msg: String) -> Result<(), Failure> {
    let r: anyhow::Result<()> = (|| bail!(msg))();
    r.map_err(|error| Failure {
        code: EXIT_RUNTIME,
        error,
    })
}
