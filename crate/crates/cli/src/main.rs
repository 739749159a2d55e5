//! `ccs`: synthesize data, train, generate, evaluate, check gradients and run
//! ablations for the emotion-controllable commenting model.

mod options;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccs_core::ablation::{evaluate, generate_comments, AblationSpec};
use ccs_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ccs_core::corpus::{
    build_vocab, corpus_granularity, load_corpus, save_corpus, synth_corpus, tokenize_char,
    EmotionCategory, Example, Granularity, Record, Vocab, MAX_SENTENCES, MAX_SENTENCE_TOKENS,
};
use ccs_core::eval::{render_table, EmotionTagger, MetricReport};
use ccs_core::gradsuite::{run_grad_suite, run_random_op_checks, TOLERANCE};
use ccs_core::tensor::Rng;
use ccs_core::trainer::Trainer;
use ccs_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use options::{ConfigFlag, FileConfig, ModelFlags, SearchFlags};

#[derive(Parser, Debug)]
#[command(
    name = "ccs",
    version,
    about = "Emotion-controllable article commenting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic emotional corpus as line-delimited JSON
    Synth {
        /// Output corpus file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Number of examples [default: 2000]
        #[arg(long, value_name = "N")]
        examples: Option<usize>,
        /// Generator seed [default: 42]
        #[arg(long)]
        seed: Option<u64>,
        /// Emotion label set {coarse, fine} [default: fine]
        #[arg(long, value_name = "GRANULARITY")]
        granularity: Option<Granularity>,
        #[command(flatten)]
        config: ConfigFlag,
    },
    /// Train a model and write a checkpoint and its vocabulary
    Train {
        /// Training corpus (line-delimited JSON)
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Checkpoint to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Vocabulary file to write [default: checkpoint path with extension .vocab]
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Line-delimited JSON training log [default: none]
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        /// Largest vocabulary size, reserved tokens included [default: 5000]
        #[arg(long, value_name = "N")]
        max_vocab: Option<usize>,
        #[command(flatten)]
        config: ConfigFlag,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print one comment per (article, emotion) pair
    Generate {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Vocabulary [default: checkpoint path with extension .vocab]
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Article file, one sentence per line; repeatable
        #[arg(long, value_name = "FILE", required = true)]
        article: Vec<PathBuf>,
        /// Requested emotion label (case-insensitive); repeatable
        #[arg(long, value_name = "LABEL", required = true)]
        emotion: Vec<String>,
        #[command(flatten)]
        config: ConfigFlag,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Generate for every article of a corpus with round-robin emotions and
    /// print the metric report
    Eval {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Vocabulary [default: checkpoint path with extension .vocab]
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Evaluation corpus; its comments are the references
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Corpus the emotion tagger is trained on [default: the evaluation corpus]
        #[arg(long, value_name = "FILE")]
        tagger_corpus: Option<PathBuf>,
        /// Output format [default: json]
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[command(flatten)]
        config: ConfigFlag,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Compare analytic and finite-difference gradients for every
    /// differentiable component; exits nonzero if any check fails
    Gradcheck {
        /// Largest accepted relative error [default: 0.001]
        #[arg(long)]
        tolerance: Option<f64>,
        /// Extra runs of the op checks at random widths [default: 5]
        #[arg(long, value_name = "N")]
        random_seeds: Option<u64>,
    },
    /// Train and evaluate named configurations side by side
    Ablate {
        /// Corpus; the last part is held out for evaluation
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Fraction of the corpus held out [default: 0.1]
        #[arg(long, value_name = "F")]
        test_fraction: Option<f64>,
        /// Comma-separated variants from CCS, CCS-Emo, "w/o HC", "w/o RBS"
        /// [default: all]
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        variants: Vec<String>,
        /// Also write the report as JSON [default: none]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Train distinct configurations on separate threads [default: off]
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        config: ConfigFlag,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        search: SearchFlags,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

fn vocab_path(explicit: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.with_extension("vocab"))
}

fn load_model(checkpoint: &Path, vocab: Option<PathBuf>) -> Result<(Checkpoint, Vocab)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab_path(vocab, checkpoint))?;
    ckpt.check_vocab(&vocab)?;
    Ok((ckpt, vocab))
}

/// Sentences of a plain-text article, with the corpus length caps applied.
fn read_article(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    let sentences: Vec<Vec<usize>> = text
        .lines()
        .filter(|l| !tokenize_char(l.trim()).is_empty())
        .take(MAX_SENTENCES)
        .map(|l| {
            tokenize_char(l.trim())
                .iter()
                .take(MAX_SENTENCE_TOKENS)
                .map(|t| vocab.encode(t))
                .collect()
        })
        .collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!(
            "{}: article has no text",
            path.display()
        )));
    }
    Ok(sentences)
}

fn write_json<T: Serialize>(value: &T, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn synth(
    out: PathBuf,
    examples: Option<usize>,
    seed: Option<u64>,
    granularity: Option<Granularity>,
    config: ConfigFlag,
) -> Result<()> {
    let file = FileConfig::load(config.config.as_deref())?;
    let seed = seed.or(file.seed).unwrap_or(42);
    let granularity = granularity
        .or(file.granularity)
        .unwrap_or(Granularity::Fine);
    let records = synth_corpus(&mut Rng::new(seed), examples.unwrap_or(2000), granularity)?;
    save_corpus(&records, &out)?;
    log::info!(
        "wrote {} {granularity} examples to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    corpus: PathBuf,
    out: PathBuf,
    vocab_out: Option<PathBuf>,
    log_path: Option<PathBuf>,
    max_vocab: Option<usize>,
    config: ConfigFlag,
    model: ModelFlags,
) -> Result<()> {
    let file = FileConfig::load(config.config.as_deref())?;
    let records = load_corpus(&corpus)?;
    let mut cfg = model.resolve(&file, Some(corpus_granularity(&records)?))?;
    if let Some(m) = max_vocab {
        cfg.max_vocab = m;
    }
    let vocab = build_vocab(&records, cfg.max_vocab)?;
    let examples = Example::encode_all(&records, &vocab)?;
    let mut trainer = Trainer::new(cfg, vocab.len())?;
    let mut log_file = log_path
        .map(|p| File::create(p).map(BufWriter::new))
        .transpose()?;
    trainer.fit(&examples, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    save_checkpoint(&Checkpoint::from_trainer(&trainer, &vocab), &out)?;
    let vocab_out = vocab_path(vocab_out, &out);
    vocab.save(&vocab_out)?;
    log::info!("wrote {} and {}", out.display(), vocab_out.display());
    Ok(())
}

fn generate(
    checkpoint: PathBuf,
    vocab: Option<PathBuf>,
    articles: Vec<PathBuf>,
    emotions: Vec<String>,
    config: ConfigFlag,
    search: SearchFlags,
) -> Result<()> {
    let file = FileConfig::load(config.config.as_deref())?;
    let search = search.resolve(&file)?;
    let (ckpt, vocab) = load_model(&checkpoint, vocab)?;
    let granularity = ckpt.model.config.granularity;
    let emotions: Vec<EmotionCategory> = emotions
        .iter()
        .map(|e| EmotionCategory::parse(granularity, e))
        .collect::<Result<_>>()?;
    let loaded: Vec<Vec<Vec<usize>>> = articles
        .iter()
        .map(|p| read_article(p, &vocab))
        .collect::<Result<_>>()?;
    let mut pairs_a: Vec<&[Vec<usize>]> = Vec::new();
    let mut pairs_e = Vec::new();
    for a in &loaded {
        for &e in &emotions {
            pairs_a.push(a);
            pairs_e.push(e);
        }
    }
    let comments = generate_comments(&ckpt.model, &vocab, &pairs_a, &pairs_e, &search)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, (e, c)) in pairs_e.iter().zip(&comments).enumerate() {
        if loaded.len() > 1 {
            write!(out, "{}\t", i / emotions.len() + 1)?;
        }
        writeln!(out, "{e}\t{c}")?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: PathBuf,
    vocab: Option<PathBuf>,
    corpus: PathBuf,
    tagger_corpus: Option<PathBuf>,
    format: Option<Format>,
    config: ConfigFlag,
    search: SearchFlags,
) -> Result<()> {
    let file = FileConfig::load(config.config.as_deref())?;
    let search = search.resolve(&file)?;
    let (ckpt, vocab) = load_model(&checkpoint, vocab)?;
    let records = load_corpus(&corpus)?;
    let granularity = ckpt.model.config.granularity;
    if corpus_granularity(&records)? != granularity {
        return Err(Error::Data(format!(
            "evaluation corpus is not labelled with {granularity} emotions"
        )));
    }
    let tagger_records = match &tagger_corpus {
        Some(p) => load_corpus(p)?,
        None => records.clone(),
    };
    let tagger = EmotionTagger::train(
        granularity,
        tagger_records
            .iter()
            .map(|r| (r.comment.as_str(), r.emotion)),
    )?;
    let examples = Example::encode_all(&records, &vocab)?;
    let report = evaluate(&ckpt.model, &vocab, &examples, &search, Some(&tagger))?;
    match format.unwrap_or(Format::Json) {
        Format::Json => write_json(&report, std::io::stdout().lock()),
        Format::Table => {
            print!("{}", render_table(&[("model".to_string(), report)]));
            Ok(())
        }
    }
}

fn gradcheck(tolerance: Option<f64>, random_seeds: Option<u64>) -> Result<bool> {
    let tolerance = tolerance.unwrap_or(TOLERANCE);
    let mut results = run_grad_suite()?;
    for seed in 0..random_seeds.unwrap_or(5) {
        let (w, rs) = run_random_op_checks(seed)?;
        results.extend(rs.into_iter().map(|mut r| {
            r.name = format!("{} (width {w}, seed {seed})", r.name);
            r
        }));
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for r in &results {
        let pass = r.max_rel_error < tolerance;
        ok &= pass;
        println!(
            "{:<width$}  {:.3e}  {}{}",
            r.name,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" },
            if pass {
                String::new()
            } else {
                format!(" (worst: {})", r.worst)
            }
        );
    }
    println!(
        "{} of {} checks below {tolerance:e}",
        results
            .iter()
            .filter(|r| r.max_rel_error < tolerance)
            .count(),
        results.len()
    );
    Ok(ok)
}

#[derive(Serialize)]
struct AblationRow<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    corpus: PathBuf,
    test_fraction: Option<f64>,
    variants: Vec<String>,
    out: Option<PathBuf>,
    parallel: bool,
    config: ConfigFlag,
    model: ModelFlags,
    search: SearchFlags,
) -> Result<()> {
    let file = FileConfig::load(config.config.as_deref())?;
    let records: Vec<Record> = load_corpus(&corpus)?;
    let granularity = corpus_granularity(&records)?;
    let train_cfg = model.resolve(&file, Some(granularity))?;
    let search = search.resolve(&file)?;
    let fraction = test_fraction.unwrap_or(0.1);
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {fraction} outside (0, 1)"
        )));
    }
    let n_test = ((records.len() as f64 * fraction).round() as usize)
        .clamp(1, records.len().saturating_sub(1));
    if n_test == 0 {
        return Err(Error::Data(
            "corpus too small to hold out a test set".into(),
        ));
    }
    let n_train = records.len() - n_test;
    let vocab = build_vocab(&records, train_cfg.max_vocab)?;
    let tagger = EmotionTagger::train(
        granularity,
        records[..n_train]
            .iter()
            .map(|r| (r.comment.as_str(), r.emotion)),
    )?;
    let examples = Example::encode_all(&records, &vocab)?;
    let (train_set, test_set) = examples.split_at(n_train);
    let mut spec = AblationSpec::standard(train_cfg, search);
    if !variants.is_empty() {
        spec = spec.select(&variants)?;
    }
    let rows = spec.run(train_set, test_set, &vocab, Some(&tagger), parallel)?;
    print!("{}", render_table(&rows));
    if let Some(path) = out {
        let json: Vec<AblationRow> = rows
            .iter()
            .map(|(name, report)| AblationRow { name, report })
            .collect();
        write_json(&json, BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            examples,
            seed,
            granularity,
            config,
        } => synth(out, examples, seed, granularity, config)?,
        Command::Train {
            corpus,
            out,
            vocab,
            log,
            max_vocab,
            config,
            model,
        } => train(corpus, out, vocab, log, max_vocab, config, model)?,
        Command::Generate {
            checkpoint,
            vocab,
            article,
            emotion,
            config,
            search,
        } => generate(checkpoint, vocab, article, emotion, config, search)?,
        Command::Eval {
            checkpoint,
            vocab,
            corpus,
            tagger_corpus,
            format,
            config,
            search,
        } => eval(
            checkpoint,
            vocab,
            corpus,
            tagger_corpus,
            format,
            config,
            search,
        )?,
        Command::Gradcheck {
            tolerance,
            random_seeds,
        } => return gradcheck(tolerance, random_seeds),
        Command::Ablate {
            corpus,
            test_fraction,
            variants,
            out,
            parallel,
            config,
            model,
            search,
        } => ablate(
            corpus,
            test_fraction,
            variants,
            out,
            parallel,
            config,
            model,
            search,
        )?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
