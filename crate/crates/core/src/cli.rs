//! Command-line interface.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::check::{equivariance_suite, gradient_suite, CheckResult};
use crate::config::{render, KeyValues};
use crate::data::{
    generate_synthetic, load_checkpoint, read_embeddings, read_manifest, save_checkpoint, write_embeddings, Dataset,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_bag, build_bags, disentanglement_probe, embed, evaluate_representation, report_header, report_row,
    ProbeConfig, Representation,
};
use crate::model::{build_model, ModelConfig, Variant};
use crate::tensor::RngStream;
use crate::train::{train, TrainConfig};
use crate::traverse::{traverse_latents, write_grid, TraversalMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "se2vae", version, about = "Orientation-disentangled VAEs on SE(2,N) group convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic nucleus dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Write per-patch embeddings of a trained model.
    Embed(EmbedArgs),
    /// Pool embeddings into bag-level features.
    Aggregate(AggregateArgs),
    /// Bootstrap mAUC of a bag representation.
    Eval(EvalArgs),
    /// Render latent traversals as an image grid.
    Traverse(TraverseArgs),
    /// Run the equivariance and gradient suites.
    Check(CheckArgs),
    /// Read ground-truth factors back out of embeddings.
    Disentangle(DisentangleArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// key=value file of generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bags: Option<usize>,
    #[arg(long)]
    patches_per_bag: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Omit the marker dot, leaving shapes symmetric under half turns.
    #[arg(long)]
    no_marker: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Disentangled,
    Se2Grid,
    Baseline,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Disentangled => Variant::Disentangled,
            VariantArg::Se2Grid => Variant::Se2Grid,
            VariantArg::Baseline => Variant::Baseline,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "disentangled")]
    variant: VariantArg,
    /// key=value file of model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RepresentationArg {
    Iso,
    Ori,
    Baseline,
    Combined,
    Factors,
}

impl From<RepresentationArg> for Representation {
    fn from(r: RepresentationArg) -> Self {
        match r {
            RepresentationArg::Iso => Representation::Iso,
            RepresentationArg::Ori => Representation::Ori,
            RepresentationArg::Baseline => Representation::Baseline,
            RepresentationArg::Combined => Representation::Combined,
            RepresentationArg::Factors => Representation::Factors,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    /// Bag label from the manifest.
    Label,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    representation: RepresentationArg,
    #[arg(long, value_enum, default_value = "label")]
    task: Task,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the cyclic probe.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Append the report row to this file instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    OriCycle,
    IsoSweep,
    Interpolate,
}

#[derive(Args, Debug)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Patch path as listed in the manifest; give two for interpolation.
    #[arg(long, required = true, num_args = 1)]
    patch: Vec<String>,
    #[arg(long, value_enum, default_value = "ori-cycle")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    coord: usize,
    /// Sweep half-width in posterior standard deviations.
    #[arg(long, default_value_t = 3.0)]
    width: f64,
    #[arg(long, default_value_t = 9)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 20)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor in the objective checks.
    #[arg(long, default_value_t = 16)]
    max_coords: usize,
    #[arg(long)]
    skip_gradients: bool,
}

#[derive(Args, Debug)]
struct DisentangleArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Rotational symmetry order of the rendered shapes.
    #[arg(long, default_value_t = 1)]
    symmetry: usize,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Embed(a) => embed_cmd(a, out),
        Command::Aggregate(a) => aggregate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Traverse(a) => traverse(a, out),
        Command::Check(a) => return check(a, out),
        Command::Disentangle(a) => disentangle(a, out),
    }
    .map(|()| true)
}

/// Errors naming `path` when it does not exist.
fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::invalid(format!("{} does not exist", path.display())))
    }
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::parse(&std::fs::read_to_string(existing(p)?)?),
        None => Ok(KeyValues::default()),
    }
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    let mut kv = read_config(a.config.as_deref())?;
    cfg.apply(&mut kv)?;
    kv.finish()?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.bags = a.bags.unwrap_or(cfg.bags);
    cfg.patches_per_bag = a.patches_per_bag.unwrap_or(cfg.patches_per_bag);
    cfg.patch_size = a.patch_size.unwrap_or(cfg.patch_size);
    cfg.marker &= !a.no_marker;
    let rows = generate_synthetic(&cfg, &a.out)?;
    std::fs::write(a.out.join("generator.cfg"), render(&cfg.to_pairs()))?;
    writeln!(out, "wrote {} patches in {} bags to {}", rows.len(), cfg.bags, a.out.display())?;
    Ok(())
}

/// Model and training settings for `variant` on `data`, overridden by `kv`.
pub fn train_settings(variant: Variant, patch_size: usize, mut kv: KeyValues) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig {
        patch_size,
        ..ModelConfig::desk(variant)
    };
    model.apply(&mut kv)?;
    model.variant = variant;
    let mut train = TrainConfig::default();
    train.apply(&mut kv)?;
    kv.finish()?;
    model.validate()?;
    Ok((model, train))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::open(existing(&a.data)?)?;
    let (model_cfg, mut cfg) = train_settings(a.variant.into(), data.patch_size(), read_config(a.config.as_deref())?)?;
    cfg.max_steps = a.max_steps.unwrap_or(cfg.max_steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let mut pairs = model_cfg.to_pairs();
    pairs.extend(cfg.to_pairs());
    std::fs::write(a.out.join("config.cfg"), render(&pairs))?;
    let mut log = BufWriter::new(File::create(a.out.join("metrics.tsv"))?);
    let outcome = train(&data, &model_cfg, &cfg, &mut log)?;
    log.flush()?;
    save_checkpoint(&a.out.join("checkpoint.bin"), &outcome.config, &outcome.best)?;
    writeln!(
        out,
        "trained {} for {} steps, best validation at step {}; wrote {}",
        model_cfg.variant,
        outcome.steps,
        outcome.best_step,
        a.out.display()
    )?;
    Ok(())
}

fn embed_cmd(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, store) = load_checkpoint(existing(&a.checkpoint)?)?;
    let (model, _) = build_model(&cfg, &mut RngStream::new(0, 0))?;
    let data = Dataset::open(existing(&a.data)?)?;
    let rows: Vec<usize> = (0..data.rows.len()).collect();
    let table = embed(&model, &store, &data, &rows, a.batch.max(1))?;
    write_embeddings(&a.out, &table)?;
    writeln!(out, "wrote {} embeddings to {}", table.rows.len(), a.out.display())?;
    Ok(())
}

fn manifest_of(data: &Path) -> Result<Vec<crate::data::ManifestRow>> {
    if existing(data)?.is_dir() {
        read_manifest(&data.join("manifest.csv"))
    } else {
        read_manifest(data)
    }
}

fn aggregate(a: AggregateArgs, out: &mut dyn Write) -> Result<()> {
    let table = read_embeddings(existing(&a.embeddings)?)?;
    let bags = build_bags(&manifest_of(&a.data)?, &table)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| Error::invalid(e.to_string()))?;
    let mut header = vec!["bag".to_string(), "label".into(), "split".into(), "instances".into()];
    header.extend((0..table.iso_dim).map(|i| format!("iso_{i}")));
    for m in 0..table.ori_latents {
        header.extend((0..table.orientations).map(|j| format!("ori_{m}_{j}")));
    }
    let csv_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for b in &bags {
        let agg = aggregate_bag(&b.instances)?;
        let mut rec = vec![b.bag.clone(), b.label.to_string(), b.split.to_string(), b.instances.len().to_string()];
        rec.extend(agg.iso_mean.iter().chain(&agg.ori_hist).map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    writeln!(out, "wrote {} bags to {}", bags.len(), a.out.display())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let table = read_embeddings(existing(&a.embeddings)?)?;
    let bags = build_bags(&manifest_of(&a.data)?, &table)?;
    let cfg = ProbeConfig {
        hidden: a.hidden,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let rep: Representation = a.representation.into();
    let report = evaluate_representation(&bags, rep, &cfg, a.repeats, &RngStream::new(a.seed, 0xe7a1))?;
    let task = match a.task {
        Task::Label => "label",
    };
    let row = report_row(rep.name(), task, &report);
    match a.out {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                writeln!(f, "{}", report_header(report.per_class.len()))?;
            }
            writeln!(f, "{row}")?;
            writeln!(out, "{row}")?;
        }
        None => {
            writeln!(out, "{}", report_header(report.per_class.len()))?;
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

fn traverse(a: TraverseArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, store) = load_checkpoint(existing(&a.checkpoint)?)?;
    let (model, _) = build_model(&cfg, &mut RngStream::new(0, 0))?;
    let data = Dataset::open(existing(&a.data)?)?;
    let sources = a
        .patch
        .iter()
        .map(|p| {
            data.rows
                .iter()
                .position(|r| &r.path == p)
                .map(|i| data.images[i].clone())
                .ok_or_else(|| Error::invalid(format!("patch {p} is not in the manifest")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = match a.mode {
        ModeArg::OriCycle => TraversalMode::OriCycle,
        ModeArg::IsoSweep => TraversalMode::IsoSweep {
            coord: a.coord,
            width: a.width,
            steps: a.steps,
        },
        ModeArg::Interpolate => TraversalMode::Interpolate { steps: a.steps },
    };
    let t = traverse_latents(&model, &store, &sources, mode)?;
    write_grid(&a.out, &t)?;
    writeln!(out, "wrote {} tiles to {}", t.tiles.len(), a.out.display())?;
    Ok(())
}

fn check(a: CheckArgs, out: &mut dyn Write) -> Result<bool> {
    let mut results: Vec<CheckResult> = equivariance_suite(&ModelConfig::desk(Variant::Disentangled), a.inputs, a.seed)?;
    if !a.skip_gradients {
        results.extend(gradient_suite(a.seed, a.max_coords)?);
    }
    for r in &results {
        writeln!(out, "{}", r.line())?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} checks, {failed} failed", results.len())?;
    Ok(failed == 0)
}

fn disentangle(a: DisentangleArgs, out: &mut dyn Write) -> Result<()> {
    let table = read_embeddings(existing(&a.embeddings)?)?;
    let report = disentanglement_probe(&table, &manifest_of(&a.data)?, a.symmetry)?;
    write!(out, "{}", report.tsv())?;
    Ok(())
}
