use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mergedistill::exec;
use mergedistill::pipeline::{self, Manifest, Overrides};
use mergedistill::synth::{self, SynthConfig, SynthLanguage};
use mergedistill::trainer::{CopyStrategy, LabelMode, TrainingConfig};
use mergedistill::Error;

/// Distill several masked-LM teachers into one multilingual student.
///
/// Worker threads: set MERGEDISTILL_WORKERS. Exit codes: 0 success, 1 other
/// failure, 2 invalid input, 3 corrupt or mismatched artifacts.
#[derive(Parser)]
#[command(name = "mergedistill", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the union vocabulary and per-teacher id mappings.
    MergeVocab(ManifestArgs),
    /// Mask the transfer corpora and store top-k teacher predictions as shards.
    Prepare(ManifestArgs),
    /// Train the student on the prepared shards.
    Train(ManifestArgs),
    /// Evaluate the final checkpoint on held-out shards.
    Eval {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Score table (task,language,student_score,teacher_id,teacher_score) for RDT.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Relative deviation from teachers for every task in a score table.
    Rdt { scores: PathBuf },
    /// Generate a synthetic multilingual setup with table teachers and a manifest.
    Synth {
        dir: PathBuf,
        /// Language tags with corpus sizes, e.g. `xa:600`.
        #[arg(long = "lang", default_values_t = ["xa:600".to_string(), "yo:150".to_string()])]
        languages: Vec<String>,
        /// Also add a syllable-level teacher shared by all languages.
        #[arg(long)]
        shared_teacher: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    GoldOnly,
    GoldPlusTeacher,
}

#[derive(Clone, Copy, ValueEnum)]
enum CopyArg {
    AllCopies,
    BestCopy,
    SingleTeacher,
}

#[derive(Args)]
struct ManifestArgs {
    manifest: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    label_mode: Option<LabelArg>,
    #[arg(long, value_enum)]
    copy_strategy: Option<CopyArg>,
    /// Run every stage on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl ManifestArgs {
    fn load(&self) -> Result<Manifest, Error> {
        let overrides = Overrides {
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            top_k: self.top_k,
            learning_rate: self.learning_rate,
            alpha: self.alpha,
            label_mode: self.label_mode.map(|l| match l {
                LabelArg::GoldOnly => LabelMode::GoldOnly,
                LabelArg::GoldPlusTeacher => LabelMode::GoldPlusTeacher,
            }),
            copy_strategy: self.copy_strategy.map(|c| match c {
                CopyArg::AllCopies => CopyStrategy::AllCopies,
                CopyArg::BestCopy => CopyStrategy::BestCopy,
                CopyArg::SingleTeacher => CopyStrategy::SingleTeacher,
            }),
            sequential: self.sequential,
        };
        Manifest::load(&self.manifest, &overrides)
    }
}

fn parse_lang(s: &str) -> Result<SynthLanguage, Error> {
    let (tag, n) = s
        .split_once(':')
        .ok_or_else(|| Error::Invalid(format!("expected TAG:SENTENCES, got {s:?}")))?;
    let sentences = n
        .parse()
        .map_err(|_| Error::Invalid(format!("bad sentence count in {s:?}")))?;
    Ok(SynthLanguage {
        tag: tag.into(),
        sentences,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Command::MergeVocab(a) => {
            let s = pipeline::cmd_merge_vocab(&a.load()?)?;
            println!(
                "{} tokens, checksum {:016x} -> {}",
                s.size,
                s.checksum,
                s.student_vocab.display()
            );
        }
        Command::Prepare(a) => {
            let s = pipeline::cmd_prepare(&a.load()?)?;
            println!(
                "{} shard files, {} training and {} held-out records",
                s.shard_files.len(),
                s.train_records,
                s.heldout_records
            );
        }
        Command::Train(a) => {
            let s = pipeline::cmd_train(&a.load()?)?;
            if let Some(last) = s.rows.last() {
                println!("step {} l_all {:.5}", last.step, last.l_all);
            }
            println!("{}", s.final_checkpoint.display());
        }
        Command::Eval { manifest, scores } => {
            let report = pipeline::cmd_eval(&manifest.load()?, scores.as_deref())?;
            print!("{report}");
        }
        Command::Rdt { scores } => {
            for (task, v) in pipeline::cmd_rdt(&scores)? {
                println!("{task},{v:.2}");
            }
        }
        Command::Synth {
            dir,
            languages,
            shared_teacher,
            seed,
        } => {
            let cfg = SynthConfig {
                languages: languages.iter().map(|s| parse_lang(s)).collect::<Result<_, _>>()?,
                shared_teacher,
                seed,
                ..Default::default()
            };
            let training = TrainingConfig {
                seed,
                ..Default::default()
            };
            println!("{}", synth::generate(&dir, &cfg, training)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    exec::init_workers_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                2
            } else if e.is_integrity() {
                3
            } else {
                1
            })
        }
    }
}
