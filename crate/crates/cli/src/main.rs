use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cse_core::par::Execution;
use cse_core::sim::{build_corpus, corpus_checksum, load_split, CorpusSpec};
use cse_core::train::{evaluate_split, load_model, train, RunConfig, RunManifest, TrainOptions, MANIFEST_FILE};
use cse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cse", about = "Toy multi-talker ASR experiments", version)]
struct Cli {
    /// Run per-example work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a mixture corpus.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted or shorter run in `out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Decode and score a split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
    },
    /// Write cross-encoder attention matrices for one example.
    DumpAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        example: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the corpus recorded in the run manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

fn simulate(spec: &Path, out: &Path, seed: Option<u64>, exec: Execution) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let mut spec = CorpusSpec::parse(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    build_corpus(&spec, out, exec)?;
    println!("{}  {}", corpus_checksum(out)?, out.display());
    Ok(())
}

fn run_train(config: &Path, corpus: &Path, out: &Path, resume: bool, quiet: bool, exec: Execution) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let run = RunConfig::parse(&text)?;
    let m = train(
        &run,
        corpus,
        out,
        TrainOptions {
            exec,
            resume,
            verbose: !quiet,
        },
    )?;
    println!(
        "trained {} for {} epochs; best {:?}; {:.1}s",
        run.model.variant,
        m.epochs.len(),
        m.best_epochs,
        m.wall_clock_secs
    );
    Ok(())
}

fn eval(model: &Path, corpus: &Path, split: &str, out: &Path, max_len: usize, exec: Execution) -> Result<()> {
    let m = load_model(model)?;
    let report = evaluate_split(&m, corpus, split, max_len, exec)?;
    let dev = if split != "dev" && corpus.join("dev").join("manifest.tsv").exists() {
        Some(evaluate_split(&m, corpus, "dev", max_len, exec)?)
    } else {
        None
    };
    let summary = report.summary(dev.as_ref().or((split == "dev").then_some(&report)));
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{split}.tsv")), report.to_tsv())?;
    fs::write(out.join(format!("{split}.summary.txt")), &summary)?;
    print!("{summary}");
    Ok(())
}

fn dump_attention(model: &Path, example: &str, out: &Path, corpus: Option<PathBuf>, exec: Execution) -> Result<()> {
    let m = load_model(model)?;
    let corpus = match corpus {
        Some(c) => c,
        None => {
            let dir = model.parent().unwrap_or(Path::new("."));
            RunManifest::load(&dir.join(MANIFEST_FILE))?.corpus
        }
    };
    let split = example
        .split_once('-')
        .map(|(s, _)| s)
        .ok_or_else(|| Error::Data(format!("example id {example} has no split prefix")))?;
    let ex = load_split(&corpus, split, exec)?
        .into_iter()
        .find(|e| e.id == example)
        .ok_or_else(|| Error::Data(format!("example {example} not in {}", corpus.display())))?;
    for p in m.dump_attention(&ex.features, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let r = match cli.cmd {
        Cmd::Simulate { spec, out, seed } => simulate(&spec, &out, seed, exec),
        Cmd::Train {
            config,
            corpus,
            out,
            resume,
            quiet,
        } => run_train(&config, &corpus, &out, resume, quiet, exec),
        Cmd::Eval {
            model,
            corpus,
            split,
            out,
            max_len,
        } => eval(&model, &corpus, &split, &out, max_len, exec),
        Cmd::DumpAttention {
            model,
            example,
            out,
            corpus,
        } => dump_attention(&model, &example, &out, corpus, exec),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
