//! Command-line surface: argument parsing into [`Command`] and execution.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use polyavsr::checkpoint;
use polyavsr::corpus::{generate, inspect, Corpus, CorpusConfig};
use polyavsr::decoder::BeamConfig;
use polyavsr::eval::{evaluate, thread_count, write_jsonl, EvalOptions};
use polyavsr::train::{load_samples, train, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "polyavsr", about = "Multilingual audio-visual speech recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate a synthetic corpus.
    CorpusGen(CorpusGenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a WER table.
    Eval(EvalArgs),
    /// Decode a split to JSON Lines.
    Decode(DecodeArgs),
    /// Print per-language counts and durations of a corpus.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct CorpusGenArgs {
    /// Corpus configuration JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    languages: Option<usize>,
    #[arg(long)]
    vocab_per_lang: Option<usize>,
    #[arg(long)]
    train_total: Option<usize>,
    /// Comma-separated training ratios, one per language.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    eval_per_lang: Option<usize>,
    /// Shares this fraction of each language's tokens across languages.
    #[arg(long)]
    overlap_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Disables the per-language balancing weight.
    #[arg(long)]
    no_balance: bool,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    classifier_warmup_steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct DecodeFlags {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Corpus directory; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corrupts audio at this SNR (dB) before decoding.
    #[arg(long, allow_negative_numbers = true)]
    noise_snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    ctc_weight: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: DecodeFlags,
    /// Writes the text table here and the JSON report next to it.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    flags: DecodeFlags,
    /// Output JSON Lines file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    corpus: PathBuf,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("expected f32 or f64, got `{other}`")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSpec {
    pub ckpt: PathBuf,
    pub split: String,
    pub corpus: Option<PathBuf>,
    pub noise_snr: Option<f64>,
    pub noise_seed: u64,
    pub beam: Option<usize>,
    pub ctc_weight: Option<f64>,
    pub max_len: Option<usize>,
}

/// A parsed and validated invocation.
#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    CorpusGen { config: CorpusConfig, out: PathBuf },
    Train(RunConfig),
    Evaluate { spec: DecodeSpec, report: Option<PathBuf> },
    Decode { spec: DecodeSpec, out: Option<PathBuf> },
    Inspect { corpus: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn decode_spec(f: DecodeFlags) -> DecodeSpec {
    DecodeSpec {
        ckpt: f.ckpt,
        split: f.split,
        corpus: f.corpus,
        noise_snr: f.noise_snr,
        noise_seed: f.noise_seed,
        beam: f.beam,
        ctc_weight: f.ctc_weight,
        max_len: f.max_len,
    }
}

/// Parses `argv` (program name first). Usage problems come back as a clap
/// error whose message names the offending flag.
pub fn cmd_parse<I, T>(argv: I) -> anyhow::Result<Command>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    Ok(match cli.command {
        Sub::CorpusGen(a) => {
            let mut c: CorpusConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => CorpusConfig::default(),
            };
            if let Some(v) = a.seed {
                c.seed = v;
            }
            if let Some(v) = a.languages {
                c.languages = v;
                if a.ratios.is_none() {
                    c.ratios = vec![1.0 / v as f64; v];
                }
            }
            if let Some(v) = a.vocab_per_lang {
                c.vocab_per_lang = v;
            }
            if let Some(v) = a.train_total {
                c.train_total = v;
            }
            if let Some(v) = a.ratios {
                c.ratios = v;
            }
            if let Some(v) = a.eval_per_lang {
                c.eval_per_lang = v;
            }
            if let Some(v) = a.overlap_fraction {
                c.overlap_fraction = v;
                c.disjoint_vocab = v == 0.0;
            }
            c.validate()?;
            Command::CorpusGen { config: c, out: a.out }
        }
        Sub::Train(a) => {
            let mut c: RunConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => RunConfig::default(),
            };
            if let Some(v) = a.corpus {
                c.corpus = v;
            }
            if let Some(v) = a.out {
                c.out_dir = v;
            }
            if let Some(v) = a.seed {
                c.seed = v;
            }
            if let Some(v) = a.steps {
                c.steps = v;
            }
            if let Some(v) = a.batch_size {
                c.batch_size = v;
            }
            if let Some(v) = a.lr {
                c.lr = v;
            }
            if let Some(v) = a.alpha {
                c.alpha = v;
            }
            if let Some(v) = a.beta {
                c.beta = v;
            }
            if let Some(v) = a.precision {
                c.precision = v;
            }
            if a.no_balance {
                c.balance_enabled = false;
            }
            if a.freeze_backbone {
                c.freeze_backbone = true;
            }
            if let Some(v) = a.classifier_warmup_steps {
                c.classifier_warmup_steps = v;
            }
            if let Some(v) = a.log_every {
                c.log_every = v;
            }
            if let Some(v) = a.checkpoint_every {
                c.checkpoint_every = v;
            }
            c.validate()?;
            Command::Train(c)
        }
        Sub::Eval(a) => Command::Evaluate {
            spec: decode_spec(a.flags),
            report: a.report,
        },
        Sub::Decode(a) => Command::Decode {
            spec: decode_spec(a.flags),
            out: a.out,
        },
        Sub::Inspect(a) => Command::Inspect { corpus: a.corpus },
    })
}

/// Run configuration saved by `train` next to its checkpoints, if any.
fn sibling_run_config(ckpt: &Path) -> Option<RunConfig> {
    let path = ckpt.parent()?.join("config.json");
    read_json(&path).ok()
}

fn run_decode(spec: &DecodeSpec) -> anyhow::Result<(polyavsr::eval::MetricReport, Vec<polyavsr::eval::DecodeRecord>)> {
    let run = sibling_run_config(&spec.ckpt);
    let corpus_dir = match (&spec.corpus, &run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => r.corpus.clone(),
        (None, None) => bail!("missing --corpus (no config.json next to the checkpoint)"),
    };
    let defaults = run.map(|r| r.beam_config()).unwrap_or_default();
    let beam = BeamConfig {
        beam: spec.beam.unwrap_or(defaults.beam),
        ctc_weight: spec.ctc_weight.unwrap_or(defaults.ctc_weight),
        max_len: spec.max_len.unwrap_or(defaults.max_len),
    };
    let (model, _) = checkpoint::load::<f32>(&spec.ckpt)?;
    let corpus = Corpus::open(&corpus_dir)?;
    model.vocab().check_compatible(&corpus.meta.vocab)?;
    let samples = load_samples::<f32>(&corpus, &spec.split)?;
    let opts = EvalOptions {
        beam,
        noise_snr: spec.noise_snr,
        noise_seed: spec.noise_seed,
        threads: thread_count(),
    };
    Ok(evaluate(&model, &samples, &opts)?)
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::CorpusGen { config, out } => {
            let meta = generate(&config, &out)?;
            for s in &meta.splits {
                println!("{}: {} utterances {:?}", s.name, s.count, s.per_language);
            }
        }
        Command::Train(config) => {
            let (metrics, ckpt) = train(&config)?;
            if let Some(last) = metrics.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Evaluate { spec, report } => {
            let (rep, _) = run_decode(&spec)?;
            let text = rep.to_string();
            print!("{text}");
            if let Some(path) = report {
                fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
                let json = path.with_extension("json");
                fs::write(&json, serde_json::to_vec_pretty(&rep)?)
                    .with_context(|| format!("writing {}", json.display()))?;
            }
        }
        Command::Decode { spec, out } => {
            let (_, records) = run_decode(&spec)?;
            match out {
                Some(path) => write_jsonl(&path, &records)?,
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
        }
        Command::Inspect { corpus } => {
            let corpus = Corpus::open(&corpus)?;
            for s in inspect(&corpus)? {
                print!("{s}");
            }
        }
    }
    Ok(())
}
