//! Command-line entry point: train, enhance, evaluate, export, and sweep
//! workflows over the bilingual topic model.
//!
//! Exit codes: 0 on success, 1 on module errors (the error name is printed),
//! 2 on usage errors. All randomness is controlled by `--seed`, so the same
//! argv with fixture providers reproduces output files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Deserialize;

use crate::corpus::{load_corpus, load_vocab, Corpus, Lang, Vocabulary};
use crate::embed::{
    load_doc_embeddings, load_word_embeddings, EmbeddingTable, EncoderProvider,
};
use crate::enhance::{enhance, sweep, write_loss_log, write_sweep_csv, EnhanceContext};
use crate::metrics::{
    classify_eval, cnpmi, llm_rate_topics, theta_features, topic_uniqueness,
    write_topics_jsonl, ClassificationReport, MetricsReport, RateKind, RefStats, TopicWords,
};
use crate::mmd::{BandwidthMode, KernelConfig};
use crate::refine::LlmProvider;
use crate::vae::{
    load_checkpoint, save_checkpoint, top_words, train_phase1, ModelState, TrainConfig,
};

pub const ENV_LLM_ENDPOINT: &str = "XTM_LLM_ENDPOINT";
pub const ENV_LLM_API_KEY: &str = "XTM_LLM_API_KEY";
pub const ENV_ENC_ENDPOINT: &str = "XTM_ENC_ENDPOINT";

#[derive(Parser)]
#[command(
    name = "xtm",
    version,
    about = "Cross-lingual topic modeling with LLM-refined topic alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base bilingual topic model.
    TrainBackbone(TrainArgs),
    /// Refine a trained model with LLM-curated topics and alignment losses.
    Enhance(EnhanceArgs),
    /// Score a model: coherence, uniqueness, quality, classification.
    Eval(EvalArgs),
    /// Write per-topic top-word lists as JSON lines.
    ExportTopics(ExportArgs),
    /// Train one model per (rounds, refine-every) grid cell; CSV summary.
    Sweep(SweepArgs),
}

// ===== shared argument groups =====

#[derive(Args)]
struct DataArgs {
    /// Corpus JSON-lines file.
    #[arg(long)]
    corpus: PathBuf,
    /// Language-1 vocabulary file (one token per line).
    #[arg(long)]
    vocab1: PathBuf,
    /// Language-2 vocabulary file (one token per line).
    #[arg(long)]
    vocab2: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Corpus, CliError> {
        let v1 = load_vocab(&self.vocab1).map_err(CliError::of)?;
        let v2 = load_vocab(&self.vocab2).map_err(CliError::of)?;
        load_corpus(&self.corpus, v1, v2).map_err(CliError::of)
    }
}

/// Training knobs; unset flags fall back to `--config` file values, then to
/// the stored checkpoint config (enhance/sweep) or the built-in defaults.
#[derive(Args, Default)]
struct KnobArgs {
    /// JSON file pre-filling any knob not given as a flag (flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Topic count K.
    #[arg(long)]
    topics: Option<usize>,
    /// Encoder hidden width.
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Top words per language fed to refinement pools and raw alignment.
    #[arg(long)]
    top_n: Option<usize>,
    /// Refined word-set size per language.
    #[arg(long)]
    top_m: Option<usize>,
    /// Weight of the topic-word alignment loss.
    #[arg(long)]
    lambda_mmd: Option<f64>,
    /// Weight of the document-topic alignment loss.
    #[arg(long)]
    lambda_qa: Option<f64>,
    /// Similarity softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
}

/// Refinement schedule knobs (single values; the sweep command takes grids).
#[derive(Args, Default)]
struct ScheduleArgs {
    /// Voting rounds per refinement step.
    #[arg(long)]
    rounds: Option<usize>,
    /// Epochs between refinement steps.
    #[arg(long)]
    refine_every: Option<usize>,
}

/// `--config` file shape: every field optional, unknown keys rejected.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigOverlay {
    topics: Option<usize>,
    hidden_dim: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    top_n: Option<usize>,
    top_m: Option<usize>,
    rounds: Option<usize>,
    refine_every: Option<usize>,
    lambda_mmd: Option<f64>,
    lambda_qa: Option<f64>,
    tau: Option<f64>,
}

fn resolve_config(
    mut config: TrainConfig,
    knobs: &KnobArgs,
    schedule: Option<&ScheduleArgs>,
) -> Result<TrainConfig, CliError> {
    let mut overlay = ConfigOverlay::default();
    if let Some(path) = &knobs.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new("Io", format!("config {}: {e}", path.display())))?;
        overlay = serde_json::from_str(&text)
            .map_err(|e| CliError::new("BadConfig", format!("config {}: {e}", path.display())))?;
    }
    macro_rules! pick {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag.or(overlay.$field) {
                config.$field = v;
            }
        };
    }
    if let Some(v) = knobs.topics.or(overlay.topics) {
        config.k = v;
    }
    pick!(hidden_dim, knobs.hidden_dim);
    pick!(epochs, knobs.epochs);
    pick!(batch_size, knobs.batch_size);
    if let Some(v) = knobs.lr.or(overlay.lr) {
        config.learning_rate = v;
    }
    pick!(seed, knobs.seed);
    pick!(top_n, knobs.top_n);
    pick!(top_m, knobs.top_m);
    pick!(lambda_mmd, knobs.lambda_mmd);
    pick!(lambda_qa, knobs.lambda_qa);
    pick!(tau, knobs.tau);
    let (r, f) = match schedule {
        Some(s) => (s.rounds, s.refine_every),
        None => (None, None),
    };
    if let Some(v) = r.or(overlay.rounds) {
        config.rounds = v;
    }
    if let Some(v) = f.or(overlay.refine_every) {
        config.refine_every = v;
    }
    Ok(config)
}

#[derive(Args)]
struct ProviderArgs {
    /// Directory of canned LLM replies keyed by prompt hash.
    #[arg(long)]
    llm_fixture: Option<PathBuf>,
    /// How topic and document texts are embedded.
    #[arg(long, value_enum, default_value_t = EncModeArg::Mean)]
    enc_mode: EncModeArg,
    /// Directory of canned encoder replies (enc-mode fixture).
    #[arg(long)]
    enc_fixture: Option<PathBuf>,
    /// Extra parse-retry attempts per refinement round.
    #[arg(long, default_value_t = 2)]
    llm_retries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncModeArg {
    Fixture,
    Mean,
    Remote,
}

impl ProviderArgs {
    fn llm(&self) -> Result<LlmProvider, CliError> {
        if let Some(dir) = &self.llm_fixture {
            return Ok(LlmProvider::fixture(dir.clone()));
        }
        if let Ok(endpoint) = std::env::var(ENV_LLM_ENDPOINT) {
            let key = std::env::var(ENV_LLM_API_KEY).ok();
            return Ok(LlmProvider::remote(endpoint, key));
        }
        Err(CliError::new("ProviderError", "no LLM provider configured".into()))
    }

    fn encoder(&self) -> Result<EncoderProvider, CliError> {
        match self.enc_mode {
            EncModeArg::Mean => Ok(EncoderProvider::mean_of_words()),
            EncModeArg::Fixture => {
                let dir = self.enc_fixture.as_ref().ok_or_else(|| {
                    CliError::new(
                        "ProviderError",
                        "enc-mode fixture needs --enc-fixture DIR".into(),
                    )
                })?;
                Ok(EncoderProvider::fixture(dir.clone()))
            }
            EncModeArg::Remote => {
                let endpoint = std::env::var(ENV_ENC_ENDPOINT).map_err(|_| {
                    CliError::new(
                        "ProviderError",
                        format!("enc-mode remote needs {ENV_ENC_ENDPOINT}"),
                    )
                })?;
                Ok(EncoderProvider::remote(endpoint))
            }
        }
    }
}

fn parse_kernel(s: &str) -> Result<BandwidthMode, String> {
    let parse_val = |v: &str| -> Result<f64, String> {
        let x: f64 = v.trim().parse().map_err(|_| format!("bad bandwidth {v:?}"))?;
        if !(x > 0.0) || !x.is_finite() {
            return Err(format!("bandwidth must be positive and finite, got {v:?}"));
        }
        Ok(x)
    };
    if s == "median" {
        Ok(BandwidthMode::MedianHeuristic)
    } else if let Some(v) = s.strip_prefix("fixed:") {
        Ok(BandwidthMode::Fixed(parse_val(v)?))
    } else if let Some(list) = s.strip_prefix("multi:") {
        let vals: Vec<f64> =
            list.split(',').map(parse_val).collect::<Result<_, _>>()?;
        if vals.is_empty() {
            return Err("multi: needs at least one bandwidth".into());
        }
        Ok(BandwidthMode::Multi(vals))
    } else {
        Err(format!("unknown kernel {s:?}; use median, fixed:<v>, or multi:<v,..>"))
    }
}

/// Path of an auxiliary CSV written next to an output file.
fn sibling_csv(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

// ===== subcommand arguments =====

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    knobs: KnobArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Checkpoint output path; the loss log goes to `<out>.losses.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Word-embedding text file (`<count> <dim>` header, one word per row).
    #[arg(long)]
    embeddings: PathBuf,
    /// Optional JSON-lines document vectors merged into the table.
    #[arg(long)]
    doc_embeddings: Option<PathBuf>,
    /// Trained checkpoint to start from.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    knobs: KnobArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    providers: ProviderArgs,
    /// Kernel bandwidth: median, fixed:<v>, or multi:<v,..>.
    #[arg(long, default_value = "median", value_parser = parse_kernel)]
    kernel: BandwidthMode,
    /// Checkpoint output path; the loss log goes to `<out>.losses.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Reference pair corpus for coherence (defaults to --corpus).
    #[arg(long)]
    ref_pairs: Option<PathBuf>,
    /// Top words per language per topic used by the metrics.
    #[arg(long, default_value_t = 15)]
    top_n: usize,
    /// Also train/evaluate label classifiers on the topic proportions.
    #[arg(long)]
    classify: bool,
    /// Dataset description interpolated into rating prompts; enables
    /// LLM ratings (needs an LLM provider).
    #[arg(long)]
    rate_blurb: Option<String>,
    /// Ratings CSV path (defaults to `<out>.ratings.csv`).
    #[arg(long)]
    ratings_out: Option<PathBuf>,
    #[command(flatten)]
    providers: ProviderArgs,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Language-1 vocabulary file.
    #[arg(long)]
    vocab1: PathBuf,
    /// Language-2 vocabulary file.
    #[arg(long)]
    vocab2: PathBuf,
    /// Checkpoint to export from.
    #[arg(long)]
    model: PathBuf,
    /// Top words per language per topic.
    #[arg(long, default_value_t = 15)]
    top_n: usize,
    /// JSON-lines output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Word-embedding text file.
    #[arg(long)]
    embeddings: PathBuf,
    /// Optional JSON-lines document vectors merged into the table.
    #[arg(long)]
    doc_embeddings: Option<PathBuf>,
    /// Trained checkpoint every grid cell starts from.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    knobs: KnobArgs,
    /// Comma-separated voting-round counts to sweep.
    #[arg(long, default_value = "5", value_delimiter = ',')]
    rounds: Vec<usize>,
    /// Comma-separated refinement frequencies to sweep.
    #[arg(long, default_value = "8", value_delimiter = ',')]
    refine_every: Vec<usize>,
    #[command(flatten)]
    providers: ProviderArgs,
    /// Kernel bandwidth: median, fixed:<v>, or multi:<v,..>.
    #[arg(long, default_value = "median", value_parser = parse_kernel)]
    kernel: BandwidthMode,
    /// Reference pair corpus for coherence (defaults to --corpus).
    #[arg(long)]
    ref_pairs: Option<PathBuf>,
    /// Top words per language per topic used by the metrics (distinct from
    /// --top-n, which sizes the refinement pools and alignment supports).
    #[arg(long, default_value_t = 15)]
    metric_top_n: usize,
    /// Summary CSV output path.
    #[arg(long)]
    out: PathBuf,
}

// ===== errors =====

/// A failed run: the error's name plus its display message.
#[derive(Debug)]
pub struct CliError {
    name: String,
    message: String,
}

impl CliError {
    fn new(name: &str, message: String) -> Self {
        CliError { name: name.to_string(), message }
    }

    fn of<E: std::fmt::Debug + std::fmt::Display>(e: E) -> Self {
        CliError { name: error_name(&format!("{e:?}")), message: e.to_string() }
    }
}

/// Leading constructor path of a Debug representation, e.g.
/// `Vae(BadConfig("..."))` -> `Vae::BadConfig`.
fn error_name(debug: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut rest = debug;
    loop {
        let ident: String =
            rest.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
        if ident.is_empty() || !ident.chars().next().unwrap().is_ascii_uppercase() {
            break;
        }
        rest = &rest[ident.len()..];
        parts.push(ident);
        match rest.strip_prefix('(') {
            Some(inner) => rest = inner,
            None => break,
        }
    }
    if parts.is_empty() {
        "Error".to_string()
    } else {
        parts.join("::")
    }
}

// ===== workflows =====

fn load_embedding_table(
    words: &Path,
    docs: Option<&Path>,
) -> Result<EmbeddingTable, CliError> {
    let mut table = load_word_embeddings(words).map_err(CliError::of)?;
    if let Some(path) = docs {
        load_doc_embeddings(path, &mut table).map_err(CliError::of)?;
    }
    Ok(table)
}

fn load_model_with(
    path: &Path,
    knobs: &KnobArgs,
    schedule: Option<&ScheduleArgs>,
) -> Result<ModelState, CliError> {
    let mut model = load_checkpoint(path).map_err(CliError::of)?;
    let config = resolve_config(model.config.clone(), knobs, schedule)?;
    if config.k != model.config.k || config.hidden_dim != model.config.hidden_dim {
        return Err(CliError::new(
            "BadConfig",
            format!(
                "checkpoint has k={}, hidden_dim={}; these cannot be overridden",
                model.config.k, model.config.hidden_dim
            ),
        ));
    }
    model.config = config;
    Ok(model)
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let corpus = args.data.load()?;
    let config =
        resolve_config(TrainConfig::default(), &args.knobs, Some(&args.schedule))?;
    let (model, losses) = train_phase1(&corpus, config).map_err(CliError::of)?;
    save_checkpoint(&model, &args.out).map_err(CliError::of)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    let loss_path = sibling_csv(&args.out, "losses.csv");
    fs::write(&loss_path, csv).map_err(CliError::of)?;
    println!(
        "trained {} epochs (final loss {:.4}); checkpoint {} loss log {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        loss_path.display(),
    );
    Ok(())
}

fn run_enhance(args: EnhanceArgs) -> Result<(), CliError> {
    let corpus = args.data.load()?;
    let table = load_embedding_table(&args.embeddings, args.doc_embeddings.as_deref())?;
    let model = load_model_with(&args.model, &args.knobs, Some(&args.schedule))?;
    let llm = args.providers.llm()?;
    let enc = args.providers.encoder()?;
    let ctx = EnhanceContext {
        corpus: &corpus,
        table: &table,
        llm: &llm,
        enc: &enc,
        kernel: KernelConfig { mode: args.kernel.clone(), ..KernelConfig::default() },
        llm_max_retries: args.providers.llm_retries,
    };
    let state = enhance(model, &ctx).map_err(CliError::of)?;
    save_checkpoint(&state.model, &args.out).map_err(CliError::of)?;
    let loss_path = sibling_csv(&args.out, "losses.csv");
    write_loss_log(&loss_path, &state.loss_log).map_err(CliError::of)?;
    println!(
        "enhanced over {} epochs ({} refinements at {:?}); checkpoint {} loss log {}",
        state.loss_log.len(),
        state.refine_epochs.len(),
        state.refine_epochs,
        args.out.display(),
        loss_path.display(),
    );
    Ok(())
}

/// Topic word lists of a model: top-N per language per topic.
fn export_topic_words(
    model: &ModelState,
    vocab1: &Vocabulary,
    vocab2: &Vocabulary,
    n: usize,
) -> Vec<TopicWords> {
    (0..model.config.k)
        .map(|t| TopicWords {
            topic: t,
            l1: top_words(model, vocab1, Lang::L1, t, n),
            l2: top_words(model, vocab2, Lang::L2, t, n),
        })
        .collect()
}

/// Deterministic half/half split of one language's labeled documents.
fn split_half(x: &Array2<f64>, y: &[i64]) -> ((Array2<f64>, Vec<i64>), (Array2<f64>, Vec<i64>)) {
    let cut = x.nrows().div_ceil(2);
    let (train_x, test_x) = (
        x.slice(ndarray::s![..cut, ..]).to_owned(),
        x.slice(ndarray::s![cut.., ..]).to_owned(),
    );
    ((train_x, y[..cut].to_vec()), (test_x, y[cut..].to_vec()))
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let corpus = args.data.load()?;
    let model = load_checkpoint(&args.model).map_err(CliError::of)?;
    let topics = export_topic_words(&model, &corpus.vocab1, &corpus.vocab2, args.top_n);

    let ref_corpus = match &args.ref_pairs {
        Some(path) => {
            load_corpus(path, corpus.vocab1.clone(), corpus.vocab2.clone())
                .map_err(CliError::of)?
        }
        None => corpus.clone(),
    };
    let mut stats = RefStats::from_corpus(&ref_corpus).map_err(CliError::of)?;
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        topics.iter().map(|t| (t.l1.clone(), t.l2.clone())).collect();
    let (cnpmi_val, per_topic) = cnpmi(&mut stats, &pairs, args.top_n).map_err(CliError::of)?;
    let lists1: Vec<Vec<String>> = topics.iter().map(|t| t.l1.clone()).collect();
    let lists2: Vec<Vec<String>> = topics.iter().map(|t| t.l2.clone()).collect();
    let tu = topic_uniqueness(&lists1, &lists2);

    let classification = if args.classify {
        let (x1, y1) = theta_features(&model, &corpus, Lang::L1).map_err(CliError::of)?;
        let (x2, y2) = theta_features(&model, &corpus, Lang::L2).map_err(CliError::of)?;
        let ((tr1, try1), (te1, tey1)) = split_half(&x1, &y1);
        let ((tr2, try2), (te2, tey2)) = split_half(&x2, &y2);
        let (acc_intra_l1, acc_cross_l1) =
            classify_eval(&tr1, &try1, &te1, &tey1, &x2, &y2).map_err(CliError::of)?;
        let (acc_intra_l2, acc_cross_l2) =
            classify_eval(&tr2, &try2, &te2, &tey2, &x1, &y1).map_err(CliError::of)?;
        Some(ClassificationReport { acc_intra_l1, acc_intra_l2, acc_cross_l1, acc_cross_l2 })
    } else {
        None
    };

    let report = MetricsReport::new(cnpmi_val, tu, per_topic, classification);
    let json = serde_json::to_string(&report)
        .map_err(|e| CliError::new("Json", e.to_string()))?;
    match &args.out {
        Some(path) => {
            fs::write(path, format!("{json}\n")).map_err(CliError::of)?;
            println!(
                "cnpmi {:.4} tu {:.4} tq {:.4}; report {}",
                report.cnpmi,
                report.tu,
                report.tq,
                path.display()
            );
        }
        None => println!("{json}"),
    }

    if let Some(blurb) = &args.rate_blurb {
        let llm = args.providers.llm()?;
        let intra1 =
            llm_rate_topics(&topics, &llm, RateKind::IntraL1, blurb).map_err(CliError::of)?;
        let intra2 =
            llm_rate_topics(&topics, &llm, RateKind::IntraL2, blurb).map_err(CliError::of)?;
        let cross =
            llm_rate_topics(&topics, &llm, RateKind::Cross, blurb).map_err(CliError::of)?;
        let mut csv = String::from("topic,intra_l1,intra_l2,cross\n");
        for (i, t) in topics.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}\n", t.topic, intra1[i], intra2[i], cross[i]));
        }
        let target = match (&args.ratings_out, &args.out) {
            (Some(path), _) => Some(path.clone()),
            (None, Some(out)) => Some(sibling_csv(out, "ratings.csv")),
            (None, None) => None,
        };
        match target {
            Some(path) => {
                fs::write(&path, csv).map_err(CliError::of)?;
                println!("ratings {}", path.display());
            }
            None => print!("{csv}"),
        }
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), CliError> {
    let vocab1 = load_vocab(&args.vocab1).map_err(CliError::of)?;
    let vocab2 = load_vocab(&args.vocab2).map_err(CliError::of)?;
    let model = load_checkpoint(&args.model).map_err(CliError::of)?;
    let topics = export_topic_words(&model, &vocab1, &vocab2, args.top_n);
    match &args.out {
        Some(path) => {
            write_topics_jsonl(path, &topics).map_err(CliError::of)?;
            println!("{} topics to {}", topics.len(), path.display());
        }
        None => {
            for t in &topics {
                println!("{}", serde_json::to_string(t).expect("topic words serialize"));
            }
        }
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), CliError> {
    let corpus = args.data.load()?;
    let table = load_embedding_table(&args.embeddings, args.doc_embeddings.as_deref())?;
    let model = load_model_with(&args.model, &args.knobs, None)?;
    let ref_corpus = match &args.ref_pairs {
        Some(path) => {
            load_corpus(path, corpus.vocab1.clone(), corpus.vocab2.clone())
                .map_err(CliError::of)?
        }
        None => corpus.clone(),
    };
    let llm = args.providers.llm()?;
    let enc = args.providers.encoder()?;
    let ctx = EnhanceContext {
        corpus: &corpus,
        table: &table,
        llm: &llm,
        enc: &enc,
        kernel: KernelConfig { mode: args.kernel.clone(), ..KernelConfig::default() },
        llm_max_retries: args.providers.llm_retries,
    };
    let outcomes = sweep(
        &model,
        &ctx,
        &ref_corpus,
        &args.rounds,
        &args.refine_every,
        args.metric_top_n,
    )
    .map_err(CliError::of)?;
    write_sweep_csv(&args.out, &outcomes).map_err(CliError::of)?;
    let ok = outcomes.iter().filter(|o| o.result.is_ok()).count();
    println!("{ok}/{} cells to {}", outcomes.len(), args.out.display());
    Ok(())
}

/// Parses argv and runs the chosen workflow. Usage problems exit 2 (via the
/// argument parser); module errors print `error[<name>]: <message>` and
/// exit 1.
pub fn run() -> ExitCode {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBackbone(args) => run_train(args),
        Command::Enhance(args) => run_enhance(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportTopics(args) => run_export(args),
        Command::Sweep(args) => run_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.name, e.message);
            ExitCode::FAILURE
        }
    }
}

// ===== tests =====
