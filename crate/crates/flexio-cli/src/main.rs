//! `flexio` command line: synthesize datasets, train, separate, evaluate,
//! and inspect checkpoints.
//!
//! Exit codes: 0 on success, 2 for invalid usage/configuration/input,
//! 1 for operational failures (I/O, data, training).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexio_core::{
    checkpoint, evaluate, generate_dataset, load_manifest, parallel, read_wav, train, write_wav,
    FlexioError, FlexioModel, RunConfig, Scene, SynthConfig, TrainSession, Waveform,
};

#[derive(Parser)]
#[command(name = "flexio", version, about = "Prompt-conditional speech separation for any microphone and speaker count")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multichannel dataset with ground-truth sources.
    Synth(SynthArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Separate a mixture WAV into per-speaker WAVs.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint on a dataset manifest (SI-SDR / SI-SDRi).
    Evaluate(EvaluateArgs),
    /// Print checkpoint architecture and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthesis configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for WAVs and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Override the configuration's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration with model/stft/train/data sections.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed (also used for model initialization).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SeparateArgs {
    /// Checkpoint directory (manifest.json / weights.bin / config.json).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input mixture WAV (16 kHz, 1-8 channels).
    #[arg(long)]
    input: PathBuf,
    /// Number of speaker streams to extract.
    #[arg(long)]
    num_speakers: usize,
    /// Output directory; writes speaker_00.wav, speaker_01.wav, ...
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's reference channel.
    #[arg(long)]
    ref_channel: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.jsonl; scene paths are resolved relative to it.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code_for(err: &FlexioError) -> u8 {
    match err {
        FlexioError::InvalidInput(_) | FlexioError::ConfigError(_) | FlexioError::Json(_) => 2,
        _ => 1,
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), FlexioError> {
    let mut cfg: SynthConfig =
        serde_json::from_str(&std::fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let records = generate_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} scenes to {} ({} groups)",
        records.len(),
        args.out.display(),
        cfg.groups.len()
    );
    Ok(())
}

fn load_scenes(manifest: &PathBuf) -> Result<Vec<Scene>, FlexioError> {
    let base = manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let records = load_manifest(manifest)?;
    let threads = parallel::num_threads()?;
    parallel::try_map(&records, threads, |r| r.load(&base))
}

fn cmd_train(args: &TrainArgs) -> Result<(), FlexioError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let train_scenes = load_scenes(&cfg.data.train_manifest)?;
    let val_scenes = match &cfg.data.val_manifest {
        Some(p) => load_scenes(p)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&args.out)?;
    let mut model = FlexioModel::init(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {:?} model: {} parameters, {} train scenes, {} val scenes",
        cfg.model.comm,
        model.num_params(),
        train_scenes.len(),
        val_scenes.len()
    );
    let log_path = args.out.join("train_log.csv");
    let session = TrainSession {
        train_scenes: &train_scenes,
        val_scenes: &val_scenes,
        out_dir: Some(&args.out),
        log_path: Some(&log_path),
        stop_when: None,
        check_every: usize::MAX,
    };
    let outcome = train(&mut model, &cfg.train, session)?;
    checkpoint::save(&model, &args.out.join("final"))?;
    println!(
        "finished after {} steps / {} epochs; final train loss {:.3}, best val loss {:.3}",
        outcome.steps, outcome.epochs, outcome.final_train_loss, outcome.best_val_loss
    );
    Ok(())
}

fn cmd_separate(args: &SeparateArgs) -> Result<(), FlexioError> {
    let mut model = checkpoint::load(&args.checkpoint)?;
    let mixture = read_wav(&args.input)?;
    if let Some(rc) = args.ref_channel {
        if rc >= mixture.channels() {
            return Err(FlexioError::InvalidInput(format!(
                "reference channel {rc} out of range for {} channels",
                mixture.channels()
            )));
        }
        model.config.ref_channel = rc;
    }
    let result = model.separate(&mixture, args.num_speakers)?;
    std::fs::create_dir_all(&args.out)?;
    for (i, row) in result.waveforms.outer_iter().enumerate() {
        let path = args.out.join(format!("speaker_{i:02}.wav"));
        write_wav(&path, &Waveform::mono(row.to_vec(), mixture.sample_rate)?)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), FlexioError> {
    let model = checkpoint::load(&args.checkpoint)?;
    let base = args
        .manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let records = load_manifest(&args.manifest)?;
    let summary = evaluate(&model, &records, &base, args.out.as_deref())?;
    for (&(n, m), &mean) in &summary.group_mean_si_sdri {
        println!("n={n} m={m}: mean SI-SDRi {mean:.2} dB ({} scenes)",
            summary.scenes.iter().filter(|s| s.n == n && s.m == m).count());
    }
    if let Some(p) = &args.out {
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), FlexioError> {
    let model = checkpoint::load(&args.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&model.config)?);
    println!("total parameters: {}", model.num_params());
    for (module, count) in model.param_breakdown() {
        println!("  {module}: {count}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Validate the thread-count env var up front for a clean usage error.
    if let Err(e) = parallel::num_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
