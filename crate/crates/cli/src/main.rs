mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ktransformer::corpus::{Profile, DEFAULT_MAX_LEN};
use ktransformer::metrics::DEFAULT_EDGES;
use ktransformer::model::ClusterMode;

use commands::{PreprocessArgs, ReportArgs, SynthTask, TrainArgs};
use config::RunConfig;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "ktransformer", version, about = "Cluster-conditioned Transformer translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Space,
    Char,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Space => Profile::SpaceTokenized,
            ProfileArg::Char => Profile::CharTokenized,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Off,
    SameCluster,
    CentroidAffinity,
    Both,
}

impl From<ModeArg> for ClusterMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Off => ClusterMode::Off,
            ModeArg::SameCluster => ClusterMode::SameCluster,
            ModeArg::CentroidAffinity => ClusterMode::CentroidAffinity,
            ModeArg::Both => ClusterMode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Every sentence translates to itself.
    Copy,
    /// Topic-dependent word mapping.
    Topic,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and tokenize a parallel corpus and build vocabularies.
    Preprocess {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, value_enum, default_value = "space")]
        profile_src: ProfileArg,
        #[arg(long, value_enum, default_value = "space")]
        profile_tgt: ProfileArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Pairs with a longer side are dropped.
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Vocabulary size including the four reserved tokens.
        #[arg(long, default_value_t = 32000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        cluster_mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Preprocessed corpus directory.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        /// Run directory for the log, checkpoints and the resolved config
        /// [default: train.out_dir from the config, else runs/latest]
        #[arg(long, env = "KTRANSFORMER_RUN_DIR")]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy-decode one translation per input line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to standard input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_out_len: usize,
        /// Overrides the mode stored in the checkpoint.
        #[arg(long, value_enum)]
        cluster_mode: Option<ModeArg>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Add-one smoothing for orders 2 and above.
        #[arg(long)]
        smooth: bool,
        /// Tokenization applied to both files.
        #[arg(long, value_enum, default_value = "space")]
        profile: ProfileArg,
    },
    /// BLEU per source-length bucket for one or more systems, as CSV and SVG.
    Report {
        /// NAME=FILE; repeat for several systems.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Source file used for bucketing; without it reference lengths are used.
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "space")]
        profile_src: ProfileArg,
        #[arg(long, value_enum, default_value = "space")]
        profile_tgt: ProfileArg,
        /// Upper bucket edges.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EDGES)]
        buckets: Vec<usize>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        smooth: bool,
    },
    /// Write a synthetic parallel corpus to PREFIX.src and PREFIX.tgt.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Token types for the copy task.
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        /// Topic count for the topic task.
        #[arg(long, default_value_t = 2)]
        topics: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

fn parse_system(s: &str) -> CliResult<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(CliError::Usage(format!("--system expects NAME=FILE, got {s:?}"))),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Preprocess {
            src,
            tgt,
            profile_src,
            profile_tgt,
            out_dir,
            max_len,
            vocab_size,
            min_freq,
        } => {
            let s = commands::preprocess_cmd(&PreprocessArgs {
                src,
                tgt,
                profile_src: profile_src.into(),
                profile_tgt: profile_tgt.into(),
                out_dir: out_dir.clone(),
                max_len,
                vocab_size,
                min_freq,
            })?;
            println!(
                "pairs in: {}\npairs kept: {}\ndropped (longer than {}): {}\ndropped (empty source): {}\nvocabulary: {} source, {} target\nwritten to {}",
                s.pairs_in,
                s.pairs_kept,
                s.max_len,
                s.dropped_too_long,
                s.dropped_empty_source,
                s.src_vocab,
                s.tgt_vocab,
                out_dir.display()
            );
        }
        Command::Train {
            config,
            cluster_mode,
            seed,
            max_steps,
            corpus_dir,
            out_dir,
            quiet,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(m) = cluster_mode {
                cfg.model.cluster_mode = m.into();
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            if let Some(n) = max_steps {
                cfg.train.max_steps = n;
            }
            if let Some(d) = corpus_dir {
                cfg.data.corpus_dir = d;
            }
            let out_dir = out_dir
                .or_else(|| cfg.train.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs/latest"));
            let summary = commands::train_cmd(TrainArgs {
                config: cfg,
                out_dir,
                quiet,
            })?;
            println!("steps: {}", summary.steps);
            if let Some(l) = summary.final_loss {
                println!("final loss: {l:.6}");
            }
            if let Some(b) = summary.best_val_bleu {
                println!("best validation BLEU: {:.2}", b * 100.0);
            }
            println!("checkpoint: {}", commands::default_checkpoint(&summary.out_dir).display());
        }
        Command::Translate {
            checkpoint,
            input,
            output,
            max_out_len,
            cluster_mode,
        } => {
            commands::translate_cmd(
                &checkpoint,
                input.as_deref(),
                output.as_deref(),
                max_out_len,
                cluster_mode.map(Into::into),
            )?;
        }
        Command::Evaluate {
            hyp,
            reference,
            n,
            smooth,
            profile,
        } => {
            let cfg = commands::bleu_config(n, smooth)?;
            let r = commands::evaluate_cmd(&hyp, &reference, profile.into(), &cfg)?;
            print!("{}", commands::format_report(&r));
        }
        Command::Report {
            systems,
            reference,
            src,
            profile_src,
            profile_tgt,
            buckets,
            out,
            n,
            smooth,
        } => {
            let systems = systems.iter().map(|s| parse_system(s)).collect::<CliResult<Vec<_>>>()?;
            let files = commands::report_cmd(&ReportArgs {
                systems,
                reference,
                src,
                profile_src: profile_src.into(),
                profile_tgt: profile_tgt.into(),
                edges: buckets,
                out,
                bleu: commands::bleu_config(n, smooth)?,
            })?;
            println!("{}\n{}\n{}", files.csv.display(), files.svg.display(), files.summary.display());
        }
        Command::Synth {
            kind,
            pairs,
            seed,
            vocab,
            topics,
            min_len,
            max_len,
            out_prefix,
        } => {
            let task = match kind {
                SynthKind::Copy => SynthTask::Copy { vocab },
                SynthKind::Topic => SynthTask::Topic { topics },
            };
            commands::synth_cmd(task, pairs, seed, min_len, max_len, &out_prefix)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
