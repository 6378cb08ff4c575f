use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convtts::corpus::{extract_corpus_mels, load_corpus, load_corpus_unchecked, synthetic, MelConfig};
use convtts::synthesis::{run_conversation, SynthesisOptions};
use convtts::training::{run_training, TrainRunConfig};
use convtts::{Error, ModelVariant};

#[derive(Parser)]
#[command(name = "convtts", version, about = "Conversation context-aware TTS: corpus tools, training and synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize every agent turn of a conversation script.
    Synth {
        /// Script file or directory of *.jsonl scripts.
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail unless the checkpoint holds this variant.
        #[arg(long)]
        variant: Option<ModelVariant>,
        /// Use the deterministic stub embedding provider.
        #[arg(long)]
        stub_embedder: bool,
        /// Directory of precomputed embeddings.
        #[arg(long, conflicts_with = "stub_embedder")]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        griffin_lim_iters: usize,
        #[arg(long, default_value_t = 2000)]
        max_frames: usize,
        /// Skip Griffin-Lim and write only mel and alignment files.
        #[arg(long)]
        no_wav: bool,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume (same variant) or finetune from (other variant).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Check every conversation of a corpus and list violations.
    ValidateCorpus {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write log-mel caches for every agent turn with audio.
    ExtractMel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the small generated demo corpus.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> convtts::Result<ExitCode> {
    match cmd {
        Command::Synth {
            script,
            checkpoint,
            out,
            variant,
            stub_embedder,
            embeddings,
            seed,
            griffin_lim_iters,
            max_frames,
            no_wav,
        } => {
            let opts = SynthesisOptions {
                variant,
                stub_embedder,
                embeddings_dir: embeddings,
                seed,
                griffin_lim_iters,
                max_frames,
                write_wav: !no_wav,
            };
            let results = run_conversation(&script, &checkpoint, &out, &opts)?;
            for r in &results {
                println!(
                    "{}#{}: {} frames{}",
                    r.conversation,
                    r.turn,
                    r.n_frames,
                    if r.stopped { "" } else { " (stop not reached)" }
                );
            }
        }
        Command::Train { config, init } => {
            let cfg = TrainRunConfig::load(&config)?;
            let summary = run_training(&cfg, init.as_deref())?;
            if let Some(last) = summary.reports.last() {
                println!("step {} total loss {:.5}", last.step, last.loss.total);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::ValidateCorpus { manifest } => {
            let (corpus, diagnostics) = match load_corpus_unchecked(&manifest) {
                Ok(v) => v,
                Err(e @ Error::Parse { .. }) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(1));
                }
                Err(e) => return Err(e),
            };
            for d in &diagnostics {
                println!("{d}");
            }
            if !diagnostics.is_empty() {
                eprintln!("{} violation(s)", diagnostics.len());
                return Ok(ExitCode::from(1));
            }
            let turns: usize = corpus.conversations.iter().map(|c| c.turns.len()).sum();
            println!("ok: {} conversations, {turns} turns", corpus.conversations.len());
        }
        Command::ExtractMel { manifest, out } => {
            let corpus = load_corpus(&manifest)?;
            let written = extract_corpus_mels(&corpus, &out, &MelConfig::default())?;
            println!("wrote {} mel files", written.len());
        }
        Command::MakeSynthetic { out } => {
            let manifest = synthetic::write_synthetic_corpus(&out)?;
            println!("{}", manifest.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Validation(ds) = &e {
                for d in ds {
                    eprintln!("  {d}");
                }
            }
            match e {
                Error::Validation(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
