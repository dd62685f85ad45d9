use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use saltts::align::NoisePlacement;
use saltts::cli::{self, SplitChoice};
use saltts::config::Variant;

#[derive(Parser)]
#[command(name = "saltts", version, about = "Acoustic model training with SSL-feature auxiliary losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    GenCorpus {
        #[arg(long)]
        n: usize,
        /// Defaults to SALTTS_SEED, then the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a corpus directory against the model configuration.
    Validate {
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model variant and write checkpoints and metrics.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint holding optimizer state to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict mel spectrograms for phoneme sequences like "3 1 4".
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "phonemes", required = true)]
        phonemes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Also write one spectrogram image per utterance.
        #[arg(long)]
        ppm: bool,
    },
    /// Print the SSL-to-acoustic frame schedule as CSV.
    AlignCheck {
        #[arg(long)]
        n_src: usize,
        #[arg(long)]
        noise_both: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Parallel,
    Cascade,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Parallel => Variant::Parallel,
            VariantArg::Cascade => Variant::Cascade,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

impl From<SplitArg> for SplitChoice {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitChoice::Train,
            SplitArg::Eval => SplitChoice::Eval,
            SplitArg::All => SplitChoice::All,
        }
    }
}

fn env_seed() -> saltts::Result<Option<u64>> {
    match std::env::var(cli::SEED_ENV) {
        Ok(v) => cli::parse_seed(&v).map(Some),
        Err(_) => Ok(None),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let seed = env_seed()?;
    match command {
        Command::GenCorpus { n, seed: flag, out, config } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            let seed = flag.unwrap_or(cfg.model.seed);
            let manifest = cli::cmd_gen_corpus(&cfg, n, seed, &out)?;
            println!("wrote {} utterances to {}", manifest.records.len(), out.display());
        }
        Command::Validate { corpus, config } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            let r = cli::cmd_validate(&cfg, &corpus)?;
            println!(
                "ok: {} utterances ({} train, {} eval), {} frames",
                r.utterances, r.train, r.eval, r.frames
            );
        }
        Command::Train { corpus, out, config, variant, steps, resume } => {
            let mut cfg = cli::resolve_config(config.as_deref(), seed)?;
            if let Some(v) = variant {
                cfg.model.variant = v.into();
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let report = cli::cmd_train(&cfg, &corpus, &out, resume)?;
            if let Some(last) = report.history.last() {
                println!("step {} total {:.6}", report.first_step + report.history.len() as u64 - 1, last.total);
            }
            println!("checkpoint {}", report.final_checkpoint.display());
        }
        Command::Synth { checkpoint, phonemes, out } => {
            let inputs = phonemes
                .iter()
                .map(|p| cli::parse_phonemes(p))
                .collect::<saltts::Result<Vec<_>>>()?;
            let frames = cli::cmd_synth(&checkpoint, &inputs, &out)?;
            for (i, f) in frames.iter().enumerate() {
                println!("synth_{i:03}: {f} frames");
            }
        }
        Command::Eval { checkpoint, corpus, out, split, ppm } => {
            let report = cli::cmd_eval(&checkpoint, &corpus, split.into(), &out, ppm)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print!("{}", report.summary_table());
        }
        Command::AlignCheck { n_src, noise_both } => {
            let placement = if noise_both { NoisePlacement::BothRepeats } else { NoisePlacement::SecondRepeat };
            print!("{}", cli::cmd_align_check(n_src, placement));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<saltts::Error>().map_or(1, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
