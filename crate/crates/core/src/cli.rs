//! Command-line front end: training, evaluation, sampling and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{attention_csv, bench_attention, bench_throughput, throughput_csv};
use crate::checkpoint;
use crate::config::{Config, DataSource, GenAttention, Preset, Variant};
use crate::data::{save_grid, DatasetHandle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{fid_curve, fid_improvement, report_table, round2, Evaluator};
use crate::training::{train, TrainOptions, TrainState};

#[derive(Parser, Debug)]
#[command(name = "ganformer", version, about = "Bipartite-attention GAN laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a CSV log into a run directory.
    Train(TrainArgs),
    /// Compute FID, IS proxy, precision and recall for a checkpoint.
    Eval(EvalArgs),
    /// Render images for a list of seeds.
    Generate(GenerateArgs),
    /// Render a latent interpolation strip between two seeds.
    Interpolate(InterpolateArgs),
    /// Time attention scaling or training throughput.
    Bench(BenchArgs),
    /// FID of every checkpoint in a run directory.
    Curve(CurveArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GeneratorArg {
    Stylegan2,
    Simplex,
    Duplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Code,
    Article,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Plain-text `key = value` config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<GeneratorArg>,
    #[arg(long = "disc-attention", value_enum)]
    pub disc_attention: Option<Switch>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub kimg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// `synthetic` or a directory of PNG files.
    #[arg(long)]
    pub data: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Record images/sec in the log (makes the log timing-dependent).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `synthetic` or a PNG directory; defaults to the checkpoint's data source.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seed of the evaluation latents and real-image subset.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Baseline FID for the improvement column.
    #[arg(long)]
    pub baseline_fid: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated seeds and inclusive ranges, e.g. `0-7,42`.
    #[arg(long)]
    pub seeds: String,
    /// Write one grid image instead of one file per seed.
    #[arg(long)]
    pub grid: bool,
    /// Output file (with `--grid`) or directory; defaults to `samples/` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the raw generator weights instead of the averaged ones.
    #[arg(long)]
    pub no_ema: bool,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed0: u64,
    #[arg(long)]
    pub seed1: u64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Attention,
    Throughput,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 7)]
    pub repeats: usize,
    /// Latent rows for the attention benchmark.
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    /// Feature width for the attention benchmark.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Timed training steps per variant for the throughput benchmark.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Config for the throughput benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses process arguments and runs the command; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Curve(a) => cmd_curve(&a),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        c.apply_text(&text)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v)?;
    }
    if a.variant.is_some() || a.disc_attention.is_some() {
        let generator = match a.variant {
            Some(GeneratorArg::Stylegan2) => GenAttention::None,
            Some(GeneratorArg::Simplex) => GenAttention::Simplex,
            Some(GeneratorArg::Duplex) => GenAttention::Duplex,
            None => c.variant.generator_attention(),
        };
        let disc = match (a.disc_attention, a.variant) {
            (Some(s), _) => s == Switch::On,
            (None, Some(_)) => generator != GenAttention::None,
            (None, None) => c.variant.discriminator_attention(),
        };
        c.variant = Variant::from_parts(generator, disc)?;
    }
    if let Some(p) = a.preset {
        c.preset = match p {
            PresetArg::Code => Preset::Code,
            PresetArg::Article => Preset::Article,
        };
    }
    if let Some(k) = a.k {
        c.components = k;
    }
    if let Some(r) = a.res {
        c.resolution = r;
    }
    if let Some(k) = a.kimg {
        c.total_kimg = k;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(b) = a.batch {
        c.batch = b;
    }
    if let Some(d) = &a.data {
        c.set("data", d)?;
    }
    if a.timing {
        c.timing = true;
    }
    c.validate()?;
    Ok(c)
}

/// Opens the dataset a config points at.
pub fn open_dataset(c: &Config) -> Result<DatasetHandle> {
    let ds = match &c.data {
        DataSource::Synthetic => DatasetHandle::synthetic(SyntheticSpec::new(c.resolution, c.seed), c.synthetic_size, c.seed)?,
        DataSource::Directory(dir) => DatasetHandle::ingest_directory(Path::new(dir), c.resolution, c.seed)?,
    };
    for s in &ds.skipped {
        eprintln!("warning: skipped {s}");
    }
    Ok(ds)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let c = resolve_config(a)?;
    let dataset = open_dataset(&c)?;
    let evaluator = if c.fid_every > 0 && c.total_kimg > 0.0 {
        Some(Evaluator::new(&dataset, c.fid_samples, 0)?)
    } else {
        None
    };
    let (state, rows) = train::<f32>(
        &c,
        &dataset,
        TrainOptions {
            out_dir: Some(&a.out),
            evaluator: evaluator.as_ref(),
        },
    )?;
    println!(
        "trained {} for {} kimg ({} steps, {} log rows) into {}",
        c.variant,
        state.kimg(),
        state.step,
        rows.len(),
        a.out.display()
    );
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState<f32>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    checkpoint::load::<f32>(path)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let mut c = state.config().clone();
    if let Some(d) = &a.data {
        c.set("data", d)?;
    }
    let dataset = open_dataset(&c)?;
    let evaluator = Evaluator::new(&dataset, a.samples.unwrap_or(c.fid_samples), a.seed)?;
    let report = evaluator.evaluate(&state.model, c.variant.name(), state.kimg())?;
    println!("kimg,fid,is,precision,recall,fid_improvement");
    let improvement = match a.baseline_fid {
        Some(b) => format!("{:.2}", round2(fid_improvement(b, report.fid)?)),
        None => String::new(),
    };
    println!(
        "{},{:.6},{:.6},{:.6},{:.6},{}",
        report.kimg, report.fid, report.is, report.precision, report.recall, improvement
    );
    print!("{}", report_table(std::slice::from_ref(&report), c.variant.name()));
    Ok(())
}

/// Parses `0-3,7` into `[0, 1, 2, 3, 7]`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::invalid(format!("bad seed list entry `{part}`"));
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi): (u64, u64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
                if hi < lo {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("empty seed list"));
    }
    Ok(out)
}

fn samples_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("samples")
}

fn ckpt_stem(checkpoint: &Path) -> String {
    checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let seeds = parse_seeds(&a.seeds)?;
    let m = &state.model;
    let mut images = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let img = m.generate(&m.sample_latents(1, s), s, !a.no_ema)?;
        let shape = img.shape()[1..].to_vec();
        images.push(img.reshape(shape)?);
    }
    let stem = ckpt_stem(&a.checkpoint);
    if a.grid {
        let path = a
            .out
            .clone()
            .unwrap_or_else(|| samples_dir(&a.checkpoint).join(format!("{stem}-grid.png")));
        let columns = (seeds.len() as f64).sqrt().ceil() as usize;
        save_grid(&path, &images, columns)?;
        println!("{}", path.display());
    } else {
        let dir = a.out.clone().unwrap_or_else(|| samples_dir(&a.checkpoint));
        for (s, img) in seeds.iter().zip(&images) {
            let path = dir.join(format!("{stem}-seed{s}.png"));
            save_grid(&path, std::slice::from_ref(img), 1)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_interpolate(a: &InterpolateArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let m = &state.model;
    let frames = m.interpolate(&m.sample_latents(1, a.seed0), &m.sample_latents(1, a.seed1), a.steps, a.seed0)?;
    let frames = frames
        .into_iter()
        .map(|f| {
            let shape = f.shape()[1..].to_vec();
            f.reshape(shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = a.out.clone().unwrap_or_else(|| {
        samples_dir(&a.checkpoint).join(format!("{}-lerp{}-{}.png", ckpt_stem(&a.checkpoint), a.seed0, a.seed1))
    });
    save_grid(&path, &frames, frames.len())?;
    println!("{}", path.display());
    Ok(())
}

fn emit(csv: &str, out: Option<&Path>) -> Result<()> {
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    match a.mode {
        BenchMode::Attention => {
            let (rows, slopes) = bench_attention(&[64, 256, 1024, 4096], a.m, a.d, a.repeats)?;
            emit(&attention_csv(&rows, &slopes), a.out.as_deref())
        }
        BenchMode::Throughput => {
            let c = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            let rows = bench_throughput(&c, &Variant::ALL, a.steps)?;
            emit(&throughput_csv(&rows), a.out.as_deref())
        }
    }
}

/// `ckpt-*.bin` files of a run directory.
pub fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(run).map_err(|e| Error::io(run, e))? {
        let path = entry.map_err(|e| Error::io(run, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("ckpt-") && name.ends_with(".bin") {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints in {}", run.display())));
    }
    out.sort();
    Ok(out)
}

fn cmd_curve(a: &CurveArgs) -> Result<()> {
    let checkpoints = run_checkpoints(&a.run)?;
    let c = Config::load(&a.run.join("config.txt"))?;
    let dataset = open_dataset(&c)?;
    let evaluator = Evaluator::new(&dataset, a.samples.unwrap_or(c.fid_samples), a.seed)?;
    let rows = fid_curve(&checkpoints, &evaluator)?;
    let mut csv = String::from("kimg,fid\n");
    for (k, f) in rows {
        csv.push_str(&format!("{k},{f:.6}\n"));
    }
    emit(&csv, Some(&a.run.join("fid_curve.csv")))
}
