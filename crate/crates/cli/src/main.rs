//! Operator surface for the pre-training library.
//!
//! Exit codes: 0 ok, 1 data error (bad inputs, bad config), 2 internal error
//! or usage error.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hoi_pretrain::branches::FusionMode;
use hoi_pretrain::captions::{
    build_negative_bank, embed_texts, parse_caption_lines, read_caption_lines, HashedBagEncoder,
};
use hoi_pretrain::config::RunConfig;
use hoi_pretrain::data::{ingest_manifest, Record};
use hoi_pretrain::plot::plot_logs;
use hoi_pretrain::probe::probe;
use hoi_pretrain::train::run_pretrain;
use hoi_pretrain::transfer::{apply_init_strategy, Checkpoint, InitStrategy};
use hoi_pretrain::Error as CoreError;

/// Environment variable that re-roots relative output directories.
const OUTPUT_ROOT_ENV: &str = "HOI_PRETRAIN_OUT";

#[derive(Parser)]
#[command(name = "hoi-pretrain", version, about = "Two-branch pre-training for HOI detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mixed-batch pre-training loop from a config file.
    Pretrain(PretrainArgs),
    /// Inspect a checkpoint on one sample (RPQs, verb scores, attention).
    Probe(ProbeArgs),
    /// Render convergence curves and their numeric table from loss logs.
    Plot(PlotArgs),
    /// Parse a caption file into subject-verb-object triplet records.
    ParseCaptions(ParseCaptionsArgs),
    /// Cluster triplet embeddings and sample the contrastive negative bank.
    BuildBank(BuildBankArgs),
    /// Initialize a target checkpoint from a source per a transfer strategy.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest holding the sample to probe.
    #[arg(long)]
    manifest: PathBuf,
    /// Record id within the manifest.
    #[arg(long)]
    record_id: String,
    /// Person class index used for RPQ selection.
    #[arg(long, default_value_t = 0)]
    person_class: usize,
    #[arg(long, value_enum, default_value_t = FusionArg::Max)]
    fusion: FusionArg,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Max,
    Avg,
    None,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Max => FusionMode::Max,
            FusionArg::Avg => FusionMode::Avg,
            FusionArg::None => FusionMode::None,
        }
    }
}

#[derive(Args)]
struct PlotArgs {
    /// Loss log; repeat to overlay runs.
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    smoothing: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ParseCaptionsArgs {
    /// Line-delimited caption records: {"id": ..., "text": ...}.
    #[arg(long)]
    input: PathBuf,
    /// Line-delimited triplet records.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildBankArgs {
    /// Line-delimited caption records.
    #[arg(long)]
    input: PathBuf,
    /// Bank file (JSON).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    proj_dim: usize,
    #[arg(long, default_value_t = 100)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    per_cluster: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TransferArgs {
    /// Pre-trained source checkpoint.
    #[arg(long)]
    source: PathBuf,
    /// Target checkpoint declaring the downstream layout and initialization.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Initialized checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Write the transfer audit report here (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// (a) backbone and encoder.
    BackboneEncoder,
    /// (b) plus detection decoder and its heads.
    PlusDetectionDecoder,
    /// (c) full, including the interaction decoder.
    Full,
}

impl From<StrategyArg> for InitStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::BackboneEncoder => InitStrategy::BackboneEncoder,
            StrategyArg::PlusDetectionDecoder => InitStrategy::PlusDetectionDecoder,
            StrategyArg::Full => InitStrategy::Full,
        }
    }
}

/// Data problems exit 1, everything else internal exits 2.
fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Manifest { .. }
        | CoreError::Config(_)
        | CoreError::LossLog { .. }
        | CoreError::Checkpoint(_)
        | CoreError::Transfer(_)
        | CoreError::TextEncoder { .. }
        | CoreError::InvalidArgument(_)
        | CoreError::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.downcast_ref::<CoreError>() {
                Some(core) => ExitCode::from(exit_code_for(core)),
                None => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Plot(args) => cmd_plot(args),
        Command::ParseCaptions(args) => cmd_parse_captions(args),
        Command::BuildBank(args) => cmd_build_bank(args),
        Command::Transfer(args) => cmd_transfer(args),
    }
}

/// Relative output directories live under `HOI_PRETRAIN_OUT` when it is set.
fn reroot_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    config.output_dir = reroot_output(&config.output_dir);
    let outcome = run_pretrain(&config)?;
    println!(
        "pretrain done: {} steps, total loss {:.6} -> {:.6}, skipped verb {} caption {}",
        config.total_steps,
        outcome.first_total,
        outcome.final_total,
        outcome.skipped_verb,
        outcome.skipped_caption
    );
    println!("loss log:   {}", outcome.log_path.display());
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let manifest = ingest_manifest(&args.manifest)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.id() == args.record_id)
        .ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "record {:?} not found in {}",
                args.record_id,
                args.manifest.display()
            ))
        })?;
    let image = match record {
        Record::Detection(r) | Record::ActionImage(r) => &r.image,
        Record::ActionVideo(r) => &r.frames[0],
        Record::Caption(r) => &r.image,
    };
    let report = probe(&checkpoint, &args.record_id, image, args.person_class, args.fusion.into())?;
    let json = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, json)?;
            println!("probe report: {}", path.display());
        }
        None => println!("{json}"),
    }
    if report.rpq_empty {
        eprintln!("note: no query cleared the reliability threshold on this sample");
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> anyhow::Result<()> {
    let (png, csv) = plot_logs(&args.logs, args.smoothing, &reroot_output(&args.out_dir))?;
    println!("curves: {}", png.display());
    println!("table:  {}", csv.display());
    Ok(())
}

fn cmd_parse_captions(args: ParseCaptionsArgs) -> anyhow::Result<()> {
    let file = std::fs::File::open(&args.input).map_err(CoreError::Io)?;
    let captions = read_caption_lines(BufReader::new(file))?;
    let triplets = parse_caption_lines(&captions);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.output)?);
    for t in &triplets {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    println!("parsed {} captions into {} triplets", captions.len(), triplets.len());
    Ok(())
}

fn cmd_build_bank(args: BuildBankArgs) -> anyhow::Result<()> {
    let file = std::fs::File::open(&args.input).map_err(CoreError::Io)?;
    let captions = read_caption_lines(BufReader::new(file))?;
    let triplets = parse_caption_lines(&captions);
    if triplets.is_empty() {
        anyhow::bail!(CoreError::InvalidArgument(
            "no triplets could be parsed from the caption file".into()
        ));
    }
    let prompts: Vec<String> = triplets.iter().map(|t| t.prompt.clone()).collect();
    let encoder = HashedBagEncoder::new(args.proj_dim);
    let embeddings = embed_texts(&prompts, &encoder)?;
    let bank =
        build_negative_bank(&prompts, &embeddings, args.clusters, args.per_cluster, args.seed)?;
    bank.write(&args.output)?;
    println!(
        "bank: {} triplets, {} clusters -> {}",
        bank.entries.len(),
        bank.num_clusters,
        args.output.display()
    );
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> anyhow::Result<()> {
    let source = Checkpoint::load(&args.source)?;
    let target = Checkpoint::load(&args.target)?;
    let strategy: InitStrategy = args.strategy.into();
    let (params, report) = apply_init_strategy(&source, &target, strategy)?;
    let initialized =
        Checkpoint::new(params, &target.meta.config, target.meta.step, target.meta.seed);
    initialized.save(&args.out)?;
    println!(
        "transfer {}: copied {}, skipped {}, shape mismatches {}{}",
        strategy.name(),
        report.copied.len(),
        report.skipped.len(),
        report.shape_mismatches.len(),
        if report.used_fallback() { " (detection->interaction fallback used)" } else { "" }
    );
    if let Some(path) = args.report {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!("report: {}", path.display());
    }
    Ok(())
}
