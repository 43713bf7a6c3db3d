//! `covseg`: corpus generation, training, inference, evaluation, gradient
//! verification and ablation sweeps.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use covseg_core::coattention::Variant;
use covseg_core::config::RunConfig;
use covseg_core::corpus::{Corpus, Split};
use covseg_core::infer::{Fusion, Strategy};
use covseg_core::pipeline::{self, AblationRow, ABLATION_REFS};
use covseg_core::{checkpoint, gradsuite, metrics, synth, Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "covseg", version, about = "Co-attention video object segmentation runs")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, training and inference (corpus seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long = "n-refs", global = true)]
    n_refs: Option<usize>,
    /// vanilla | symmetric | channelwise
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// uniform | random | local
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// summary | prediction
    #[arg(long, global = true)]
    fusion: Option<Fusion>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Generate,
    /// Train a model and write checkpoint, loss log and effective config.
    Train,
    /// Segment every sequence of a split and write masks plus a run manifest.
    Infer {
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
    /// Score predicted masks against the corpus ground truth.
    Eval {
        /// Directory laid out like the corpus (`<seq>/masks/NNNNN.pgm`).
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference gradient checks of every operation and the model loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Sweep variant × fusion × strategy × reference count on the test split.
    Ablate,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Generate => cfg.corpus.seed = seed,
            _ => cfg.set_seed(seed),
        }
    }
    if let Some(dir) = &cli.corpus {
        cfg.paths.corpus = dir.clone();
    }
    if let Some(dir) = &cli.checkpoint {
        cfg.paths.checkpoint = Some(dir.clone());
    }
    if let Some(n) = cli.n_refs {
        cfg.infer.n_refs = n;
    }
    if let Some(v) = cli.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = cli.strategy {
        cfg.infer.strategy = s;
    }
    if let Some(f) = cli.fusion {
        cfg.infer.fusion = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.paths.corpus)
        .with_context(|| format!("loading corpus {}", cfg.paths.corpus.display()))
}

fn sequences(corpus: &Corpus, split: Split) -> &[covseg_core::corpus::Sequence] {
    match split {
        Split::Train => &corpus.train,
        Split::Test | Split::Static => &corpus.test,
    }
}

fn generate(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let root = out.unwrap_or(&cfg.paths.corpus);
    let index = synth::generate_corpus(root, &cfg.corpus)?;
    println!(
        "wrote {} sequences to {}",
        index.sequences.len(),
        root.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(dir) = out {
        cfg.paths.run = dir;
    }
    let corpus = load_corpus(&cfg)?;
    let every = 50;
    let (_, log) = pipeline::train_run(&cfg, &corpus, |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>6} {:<6} loss {:>12.4} ortho {:.3e}",
                r.step,
                r.phase.name(),
                r.loss,
                r.ortho_penalty
            );
        }
    })?;
    println!(
        "trained {} steps; checkpoint {}",
        log.len(),
        cfg.paths.checkpoint().display()
    );
    Ok(())
}

fn infer(mut cfg: RunConfig, out: Option<PathBuf>, split: Split) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.run.join("predictions"));
    let ckpt = cfg.paths.checkpoint();
    let (model, _) = checkpoint::load(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    // The checkpoint, not the config, fixes the architecture.
    cfg.model = model.config.clone();
    let corpus = load_corpus(&cfg)?;
    let seqs = sequences(&corpus, split);
    pipeline::infer_run(&model, &ckpt, seqs, &cfg.infer, &out)?;
    cfg.echo(&out)?;
    println!("wrote masks for {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, out: Option<PathBuf>, pred: Option<PathBuf>, split: Split) -> Result<()> {
    let pred = pred.unwrap_or_else(|| cfg.paths.run.join("predictions"));
    let scores = pipeline::evaluate_dirs(&pred, &cfg.paths.corpus, split)?;
    let out = out.unwrap_or(pred);
    pipeline::write_scores(&out, &scores)?;
    print!("{}", metrics::render_table(&scores));
    Ok(())
}

/// A check fails when some coordinate disagrees beyond both the relative
/// tolerance and the rounding floor of the difference quotient.
fn gradcheck(seeds: u64, out: Option<PathBuf>) -> Result<bool> {
    let reports = gradsuite::run_suite(0..seeds)?;
    let worst = gradsuite::worst_by_family(&reports);
    println!(
        "{:<28}{:>14}{:>12}{:>13}{:>8}  result",
        "check", "max rel err", "tolerance", "floor ratio", "seed"
    );
    for (seed, r) in &worst {
        let verdict = if r.passed {
            "pass"
        } else if r.max_floor_ratio <= 1.0 {
            "rounding"
        } else {
            "FAIL"
        };
        println!(
            "{:<28}{:>14.3e}{:>12.0e}{:>13.3}{:>8}  {verdict}",
            gradsuite::family(&r.op_name),
            r.max_rel_error,
            r.tolerance,
            r.max_floor_ratio,
            seed,
        );
    }
    let strict = reports.iter().filter(|(_, r)| !r.passed).count();
    let failed = reports.iter().filter(|(_, r)| r.max_floor_ratio > 1.0).count();
    println!(
        "{} checks over {seeds} seeds: {strict} above tolerance, {failed} above tolerance and rounding floor",
        reports.len()
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("gradcheck.json");
        let all: Vec<_> = reports.iter().map(|(_, r)| r).collect();
        std::fs::write(&path, serde_json::to_string_pretty(&all)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(failed == 0)
}

fn ablate(cfg: &RunConfig, out: Option<PathBuf>, variant: Option<Variant>) -> Result<()> {
    let run = out.unwrap_or_else(|| cfg.paths.run.clone());
    let corpus = load_corpus(cfg)?;
    let variants: Vec<Variant> = variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    let mut models = Vec::new();
    for v in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = v;
        vcfg.paths.run = run.join(v.name());
        vcfg.paths.checkpoint = None;
        let ckpt = vcfg.paths.checkpoint();
        let model = if ckpt.join(checkpoint::MANIFEST_FILE).exists() {
            eprintln!("{}: reusing {}", v.name(), ckpt.display());
            checkpoint::load(&ckpt)?.0
        } else {
            eprintln!("{}: training", v.name());
            pipeline::train_run(&vcfg, &corpus, |_| {})?.0
        };
        models.push((v, model));
    }
    let pairs: Vec<(Variant, &covseg_core::net::Model)> = models.iter().map(|(v, m)| (*v, m)).collect();
    let rows: Vec<AblationRow> =
        pipeline::ablation_sweep(&pairs, &corpus.test, &cfg.infer, &ABLATION_REFS)?;
    let table = pipeline::render_ablation(&rows, &ABLATION_REFS);
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    std::fs::write(run.join("ablation.txt"), &table)?;
    std::fs::write(run.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = effective_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Generate => generate(&cfg, out.as_deref())?,
        Command::Train => train(cfg, out)?,
        Command::Infer { split } => infer(cfg, out, split.into())?,
        Command::Eval { pred, split } => eval(&cfg, out, pred, split.into())?,
        Command::Gradcheck { seeds } => {
            if !gradcheck(seeds, out)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ablate => ablate(&cfg, out, cli.variant)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Usage) => 1,
        Some(ErrorClass::Numeric) => 3,
        Some(ErrorClass::Data) | None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
