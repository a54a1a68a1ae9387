//! Command-line front end. Settings resolve as flags, then the config file,
//! then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, DEFAULT_THRESHOLD};
use crate::io;
use crate::model::{Method, Model};
use crate::phantom::{generate_dataset, PhantomSpec, Split};
use crate::preprocess::{self, PreprocessConfig};
use crate::trainer::{self, TrainConfig};
use crate::volume::{Mask, Volume};

#[derive(Debug, Parser)]
#[command(name = "dseg", version, about = "Healthy/disease disentangling lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Raw volumes to a training-ready dataset.
    #[command(subcommand)]
    Preprocess(PreprocessCommand),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run a checkpoint on a single volume.
    Infer(InferArgs),
    /// Write slice montages for dataset cases.
    Render(RenderArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    Generate(PhantomArgs),
}

#[derive(Debug, Subcommand)]
pub enum PreprocessCommand {
    Run(PreprocessArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write raw volumes and a raw manifest instead of a dataset.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub n_healthy: Option<usize>,
    #[arg(long)]
    pub n_disease: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub out_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed `.dseg` volume.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Render only these cases.
    #[arg(long = "case")]
    pub cases: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

/// Phantom generation settings file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomJob {
    pub n_healthy: usize,
    pub n_disease: usize,
    pub split_fractions: (f64, f64, f64),
    /// Raw export multiplies normalized intensities by this.
    pub raw_suv_scale: f32,
    pub spec: PhantomSpec,
}

impl Default for PhantomJob {
    fn default() -> Self {
        PhantomJob {
            n_healthy: 30,
            n_disease: 30,
            split_fractions: (0.7, 0.15, 0.15),
            raw_suv_scale: 15.0,
            spec: PhantomSpec::desk(),
        }
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    let mut job: PhantomJob = load_toml(a.config.as_deref())?;
    job.n_healthy = a.n_healthy.unwrap_or(job.n_healthy);
    job.n_disease = a.n_disease.unwrap_or(job.n_disease);
    if let Some(n) = a.grid_size {
        job.spec = job.spec.scaled_to(n);
    }
    job.spec.seed = a.seed.unwrap_or(job.spec.seed);
    let cases = generate_dataset(&job.spec, job.n_healthy, job.n_disease, job.split_fractions)?;
    if a.raw {
        let manifest = preprocess::write_raw_cases(&a.out, &cases, job.raw_suv_scale)?;
        println!("wrote {} raw cases; manifest {}", cases.len(), manifest.display());
    } else {
        io::write_dataset(&a.out, &cases)?;
        println!("wrote {} cases to {}", cases.len(), a.out.display());
    }
    Ok(())
}

fn preprocess_run(a: &PreprocessArgs) -> Result<()> {
    let mut cfg: PreprocessConfig = load_toml(a.config.as_deref())?;
    cfg.crop_size = a.crop_size.unwrap_or(cfg.crop_size);
    cfg.out_size = a.out_size.unwrap_or(cfg.out_size);
    let cases = preprocess::run_manifest(&a.manifest, &cfg, &a.out)?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_toml(a.config.as_deref())?;
    cfg.method = a.method.unwrap_or(cfg.method);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = a.max_steps.or(cfg.max_steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    let cases = io::read_dataset(&a.data)?;
    let out = trainer::fit(&cases, &cfg, Some(&a.out))?;
    println!(
        "{} steps; best epoch {} val_combo {:.6}; last epoch {} val_combo {:.6}",
        out.reports.len(),
        out.best.epoch,
        out.best.val_combo,
        out.last.epoch,
        out.last.val_combo
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let cases = io::filter_split(&io::read_dataset(&a.data)?, a.split);
    let report = eval::evaluate_model(&mut model, &cases, a.threshold, &eval::run_id_of(&a.checkpoint))?;
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let volume = Volume(io::read_grid(&a.volume)?);
    let inf = model.infer(&volume)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    io::write_volume(&a.out.join("probs.dseg"), &inf.probs)?;
    let mask: Mask = inf.probs.binarize(a.threshold);
    io::write_binary_mask(&a.out.join("mask.dseg"), &mask)?;
    if let Some(r) = &inf.recon {
        io::write_volume(&a.out.join("recon.dseg"), &r.image)?;
    }
    if let Some(p) = &inf.pseudo_healthy {
        io::write_volume(&a.out.join("pseudo_healthy.dseg"), &p.image)?;
    }
    println!("{} lesion voxels; outputs in {}", mask.count_positive(), a.out.display());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let mut cases = io::filter_split(&io::read_dataset(&a.data)?, a.split);
    if !a.cases.is_empty() {
        if let Some(missing) = a.cases.iter().find(|id| !cases.iter().any(|c| &c.case_id == *id)) {
            return Err(Error::Data(format!("no case {missing} in split {}", a.split)));
        }
        cases.retain(|c| a.cases.contains(&c.case_id));
    }
    let run_id = eval::run_id_of(&a.checkpoint);
    for case in &cases {
        let path = eval::render_case(&mut model, case, &run_id, &a.out, a.threshold)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(PhantomCommand::Generate(a)) => phantom(a),
        Command::Preprocess(PreprocessCommand::Run(a)) => preprocess_run(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Infer(a) => infer(a),
        Command::Render(a) => render(a),
    }
}

/// Parses `argv` and runs it. Usage errors exit 2, failures 1.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
