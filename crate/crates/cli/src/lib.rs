//! Command-line front end: train, evaluate, dyneval, tune-temperature and gradcheck.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rewired_core::cells::CellRegistry;
use rewired_core::data::{Corpus, TokenStream, Vocab};
use rewired_core::evaluation::{
    evaluate_dynamic, evaluate_static, tune_dynamic, tune_temperature, DynevalConfig, EvalReport,
};
use rewired_core::gradcheck::{GradCheckRegistry, TOLERANCE};
use rewired_core::model::{Model, ModelConfig};
use rewired_core::training::{train, Checkpoint, MetricsRecord, TrainObserver};

pub use config::{ConfigError, RunConfig, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] rewired_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(rewired_core::Error::Divergence(_) | rewired_core::Error::NonFinite { .. }) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "rewired", version, about = "Recurrent language models with mogrified and rewired LSTM cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint to read (evaluation commands); defaults to the averaged checkpoint.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write metrics or the report as CSV.
    #[arg(long, global = true)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train a model and write checkpoints and a metrics log.
    Train,
    /// Static evaluation of a checkpoint.
    Evaluate,
    /// Dynamic evaluation of a checkpoint.
    Dyneval,
    /// Pick the softmax temperature on the validation split.
    TuneTemperature,
    /// Finite-difference check of every backward pass.
    Gradcheck,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => Some(RunConfig::from_file(path)?),
        None => None,
    };
    let need = || cfg.clone().ok_or_else(|| CliError::Usage("--config is required for this command".into()));
    match cli.command {
        Command::Gradcheck => {
            let cfg = cfg.clone().unwrap_or_default();
            let seed = cli.seed.unwrap_or(cfg.seed);
            run_gradcheck(&GradCheckRegistry::standard(cfg.gradcheck_trials), seed, out)
        }
        Command::Train => cmd_train(&with_seed(need()?, cli.seed), cli.csv_out.as_deref(), out),
        cmd => {
            let cfg = with_seed(need()?, cli.seed);
            let ck_path = cli.checkpoint.clone().unwrap_or_else(|| cfg.averaged.clone());
            match cmd {
                Command::Evaluate => cmd_evaluate(&cfg, &ck_path, cli.csv_out.as_deref(), out),
                Command::Dyneval => cmd_dyneval(&cfg, &ck_path, cli.csv_out.as_deref(), out),
                Command::TuneTemperature => cmd_tune_temperature(&cfg, &ck_path, out),
                Command::Train | Command::Gradcheck => unreachable!(),
            }
        }
    }
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    for (what, p) in [("train", &cfg.train_path), ("valid", &cfg.valid_path), ("test", &cfg.test_path)] {
        if !p.is_file() {
            return Err(CliError::Usage(format!("{what} corpus {} does not exist", p.display())));
        }
    }
    let read = |p: &Path| fs::read(p).map_err(io_err(format!("reading {}", p.display())));
    let (train, valid, test) = (read(&cfg.train_path)?, read(&cfg.valid_path)?, read(&cfg.test_path)?);
    let corpus = match &cfg.vocab_file {
        Some(v) if v.is_file() => Corpus::with_vocab(Vocab::load(v, cfg.mode)?, &train, &valid, &test)?,
        _ => Corpus::from_texts(&train, &valid, &test, cfg.mode)?,
    };
    Ok(corpus)
}

fn limited(stream: &TokenStream, limit: usize) -> TokenStream {
    if limit == 0 || limit >= stream.len() {
        stream.clone()
    } else {
        TokenStream::new(stream.ids[..limit].to_vec())
    }
}

fn split_stream(corpus: &Corpus, split: Split) -> &TokenStream {
    match split {
        Split::Train => &corpus.train,
        Split::Valid => &corpus.valid,
        Split::Test => &corpus.test,
    }
}

fn model_for(cfg: &ModelConfig) -> Result<Model, CliError> {
    Ok(Model::new(cfg.clone(), &CellRegistry::default())?)
}

/// Writes to `path` through a temporary file so a failed run never leaves a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

fn append_line(path: &Path, line: &str) -> Result<(), CliError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(format!("opening {}", path.display())))?;
    writeln!(f, "{line}").map_err(io_err(format!("writing {}", path.display())))
}

fn emit(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(io_err("writing output"))
}

struct LogObserver<'a> {
    log: File,
    out: &'a mut dyn Write,
    error: Option<std::io::Error>,
}

impl TrainObserver for LogObserver<'_> {
    fn on_validation(&mut self, record: &MetricsRecord) -> rewired_core::training::Control {
        let line = record.to_string();
        if let Err(e) = writeln!(self.log, "{line}").and_then(|_| writeln!(self.out, "{line}")) {
            self.error.get_or_insert(e);
        }
        rewired_core::training::Control::Continue
    }

    fn on_restart(&mut self, best: &Checkpoint, resumed: &Checkpoint) {
        let line = format!("# restart restored_step={} lr={}", best.radam.step, resumed.learning_rate());
        if let Err(e) = writeln!(self.log, "{line}").and_then(|_| writeln!(self.out, "{line}")) {
            self.error.get_or_insert(e);
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, csv_out: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let model_cfg = ModelConfig { vocab_size: corpus.vocab.len(), ..cfg.model.clone() };
    let model = model_for(&model_cfg)?;
    let valid = limited(&corpus.valid, cfg.valid_limit);

    let mut header = String::from("# rewired metrics log\n");
    for (k, v) in cfg.entries() {
        header.push_str(&format!("# config {k} = {v}\n"));
    }
    header.push_str(&format!("# vocab_size = {}\n", corpus.vocab.len()));
    let mut log = File::create(&cfg.metrics).map_err(io_err(format!("creating {}", cfg.metrics.display())))?;
    log.write_all(header.as_bytes()).map_err(io_err("writing metrics header"))?;

    let mut observer = LogObserver { log, out, error: None };
    let result = train(&model, &cfg.train, &corpus.train, &valid, cfg.seed, &mut observer);
    if let Some(e) = observer.error.take() {
        return Err(CliError::Io { context: "writing metrics".into(), source: e });
    }
    let outcome = result.map_err(|e| match e {
        rewired_core::Error::Divergence(m) => CliError::Numerical(m),
        other => CliError::Core(other),
    })?;

    let averaged = Checkpoint { params: outcome.averaged.clone(), ..outcome.best.clone() };
    write_atomic(&cfg.checkpoint, &outcome.best.to_bytes())?;
    write_atomic(&cfg.averaged, &averaged.to_bytes())?;
    if let Some(v) = &cfg.vocab_file {
        corpus.vocab.save(v)?;
    }
    let best = outcome.best.best_valid;
    let summary = format!(
        "result best_valid_nats={best} best_valid_bpc={} steps={} restarts={}",
        best / std::f64::consts::LN_2,
        outcome.last.radam.step,
        outcome.last.restarts
    );
    writeln!(observer.log, "{summary}").map_err(io_err("writing metrics"))?;
    emit(observer.out, &summary)?;
    if let Some(csv) = csv_out {
        let mut text = String::from(MetricsRecord::CSV_HEADER);
        text.push('\n');
        for r in &outcome.log {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        fs::write(csv, text).map_err(io_err(format!("writing {}", csv.display())))?;
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the corpus vocabulary.
fn load_for_eval(cfg: &RunConfig, ck_path: &Path) -> Result<(Corpus, Model, Checkpoint), CliError> {
    let ck = Checkpoint::load(ck_path, &CellRegistry::default())?;
    let corpus = load_corpus(cfg)?;
    if corpus.vocab.len() != ck.config.vocab_size {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary has {} symbols but the corpus has {}",
            ck.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let model = model_for(&ck.config)?;
    Ok((corpus, model, ck))
}

fn resolved_temperature(cfg: &RunConfig) -> Result<f64, CliError> {
    if let Some(t) = cfg.temperature {
        return Ok(t);
    }
    if cfg.temperature_file.is_file() {
        let text = fs::read_to_string(&cfg.temperature_file).map_err(io_err("reading temperature file"))?;
        return text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{} does not hold a temperature", cfg.temperature_file.display())));
    }
    Ok(1.0)
}

fn report_csv(path: &Path, r: &EvalReport) -> Result<(), CliError> {
    let text = format!(
        "total_nats,tokens,nats_per_token,perplexity,bpc,temperature\n{},{},{},{},{},{}\n",
        r.total_nats, r.tokens, r.nats_per_token, r.perplexity, r.bpc, r.temperature
    );
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

fn publish(cfg: &RunConfig, out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    emit(out, line)?;
    append_line(&cfg.metrics, line)
}

pub fn cmd_evaluate(cfg: &RunConfig, ck_path: &Path, csv_out: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let (corpus, model, ck) = load_for_eval(cfg, ck_path)?;
    let temperature = resolved_temperature(cfg)?;
    let report = evaluate_static(&model, &ck.params, split_stream(&corpus, cfg.eval_split), temperature)?;
    publish(cfg, out, &format!("evaluate split={} {report}", split_name(cfg.eval_split)))?;
    if let Some(p) = csv_out {
        report_csv(p, &report)?;
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

pub fn cmd_dyneval(cfg: &RunConfig, ck_path: &Path, csv_out: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let (corpus, model, ck) = load_for_eval(cfg, ck_path)?;
    let temperature = resolved_temperature(cfg)?;
    let mut dcfg = cfg.dyneval;
    if !cfg.dyneval_lr_grid.is_empty() || !cfg.dyneval_decay_grid.is_empty() {
        let lrs = if cfg.dyneval_lr_grid.is_empty() { vec![dcfg.lr] } else { cfg.dyneval_lr_grid.clone() };
        let decays = if cfg.dyneval_decay_grid.is_empty() { vec![dcfg.decay] } else { cfg.dyneval_decay_grid.clone() };
        let grid: Vec<DynevalConfig> = lrs
            .iter()
            .flat_map(|&lr| decays.iter().map(move |&decay| DynevalConfig { lr, decay, ..dcfg }))
            .collect();
        let valid = limited(&corpus.valid, cfg.valid_limit);
        let (best, report) = tune_dynamic(&model, &ck.params, &valid, &grid, temperature)?;
        publish(cfg, out, &format!("dyneval-tune split=valid {report}"))?;
        dcfg = best;
    }
    let report = evaluate_dynamic(&model, &ck.params, split_stream(&corpus, cfg.eval_split), &dcfg, temperature)?;
    publish(cfg, out, &format!("dyneval split={} {report}", split_name(cfg.eval_split)))?;
    if let Some(p) = csv_out {
        report_csv(p, &report)?;
    }
    Ok(())
}

pub fn cmd_tune_temperature(cfg: &RunConfig, ck_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let (corpus, model, ck) = load_for_eval(cfg, ck_path)?;
    let valid = limited(&corpus.valid, cfg.valid_limit);
    let choice = tune_temperature(&model, &ck.params, &valid, &cfg.temperature_grid)?;
    fs::write(&cfg.temperature_file, format!("{}\n", choice.temperature))
        .map_err(io_err(format!("writing {}", cfg.temperature_file.display())))?;
    publish(
        cfg,
        out,
        &format!("tune-temperature temperature={} valid_nats_per_token={}", choice.temperature, choice.nats_per_token),
    )
}

/// Runs every registered check, printing one line each. Fails with a
/// numerical error if any check exceeds the tolerance.
pub fn run_gradcheck(registry: &GradCheckRegistry, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let results = registry.run(seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        emit(out, &format!("{:<52} max_rel_err={:.3e} {verdict}", r.name, r.max_relative_error))?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        emit(out, &format!("all {} gradient checks below {TOLERANCE:e}", results.len()))
    } else {
        Err(CliError::Numerical(format!("{} gradient checks exceeded {TOLERANCE:e}: {}", failed.len(), failed.join(", "))))
    }
}
