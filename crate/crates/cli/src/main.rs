//! `ctiflow` operator entry point. Data goes to stdout as JSON or NDJSON,
//! logs and errors go to stderr.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ctiflow::classifier::{evaluate, train_baseline, BaselineModel, TrainConfig};
use ctiflow::config::Config;
use ctiflow::extractor::{merge_with_ner, DefangGrammar, Extractor};
use ctiflow::fetcher::Fetcher;
use ctiflow::frontier::Frontier;
use ctiflow::metrics::snapshot_from_archive;
use ctiflow::model::{Indicator, Spider};
use ctiflow::ner::{FallbackTagger, Gazetteer};
use ctiflow::pipeline::{self, Components, CrawlSetup, PostSource, RunHandle};
use ctiflow::sink::read_archive;

#[derive(Parser)]
#[command(
    name = "ctiflow",
    version,
    about = "Streaming OSINT collection and IOC extraction"
)]
struct Cli {
    /// Print errors on stderr as a JSON object.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Config file. Falls back to $TSTEM_CONFIG.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<(PathBuf, Config)> {
        let path = Config::locate(self.config.as_deref()).ok_or_else(|| {
            anyhow!(
                "no config: pass --config or set {}",
                ctiflow::config::CONFIG_ENV
            )
        })?;
        let cfg = Config::load(&path)?;
        Ok((path, cfg))
    }

    fn load_optional(&self) -> Result<Option<Config>> {
        match Config::locate(self.config.as_deref()) {
            Some(path) => Ok(Some(Config::load(&path)?)),
            None => Ok(None),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the web pipeline until the frontier drains or a signal arrives.
    Crawl {
        #[command(flatten)]
        config: ConfigArg,
        /// Run a single spider.
        #[arg(long, value_name = "NAME")]
        spider: Option<Spider>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the post pipeline from a fixture stream or the configured source.
    Stream {
        #[command(flatten)]
        config: ConfigArg,
        /// NDJSON posts to replay.
        #[arg(long, value_name = "FILE")]
        fixture: Option<PathBuf>,
        /// Posts per second; unpaced when absent.
        #[arg(long)]
        rate: Option<f64>,
        /// Replay the fixture repeatedly.
        #[arg(long = "loop")]
        looping: bool,
        /// Stop after this many published posts.
        #[arg(long)]
        limit: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// One-shot extraction to NDJSON indicators.
    Extract {
        #[command(flatten)]
        config: ConfigArg,
        /// Input file, or `-` for stdin.
        #[arg(long = "in", value_name = "FILE|-", default_value = "-")]
        input: String,
        #[arg(long, value_enum, default_value_t = InputFormat::Text)]
        format: InputFormat,
        /// Merge offline entity tagging into the rule output.
        #[arg(long)]
        ner: bool,
        /// `first_seen` for every indicator. Defaults to the current time.
        #[arg(long, value_name = "RFC3339")]
        seen_at: Option<DateTime<Utc>>,
    },
    /// Train the baseline relevance model.
    Train {
        /// NDJSON lines of `{"text": ..., "relevant": bool}`.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "MODEL")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        learning_rate: f64,
        /// Fraction held out for the printed report; 0 reports on the training set.
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
    },
    /// Evaluate a baseline model on a labelled corpus.
    Eval {
        #[arg(long, value_name = "MODEL")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Print a metrics snapshot.
    Metrics {
        /// Base url of a running pipeline's metrics listener.
        #[arg(
            long,
            value_name = "URL",
            conflicts_with = "from_archive",
            required_unless_present = "from_archive"
        )]
        endpoint: Option<String>,
        /// Rebuild the snapshot from a sink archive.
        #[arg(long, value_name = "FILE")]
        from_archive: Option<PathBuf>,
    },
    /// Enrich NDJSON indicators with provider verdicts.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        /// NDJSON indicators, as written by `extract`; `-` for stdin.
        #[arg(long = "in", value_name = "IOCS", default_value = "-")]
        input: String,
        /// Fixture table; overrides the configured one.
        #[arg(long, value_name = "FILE", conflicts_with = "live")]
        fixture: Option<PathBuf>,
        /// Query the configured live providers.
        #[arg(long)]
        live: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Seconds allowed for in-flight records to drain on shutdown.
    #[arg(long, default_value_t = 30)]
    grace: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// The whole input is one document.
    Text,
    /// One JSON object per line with a `text` field.
    Ndjson,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json {
                report_json("usage", &e.to_string());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<Usage>().is_some();
            let msg = describe(&e);
            if cli.json {
                report_json(if usage { "usage" } else { "error" }, &msg);
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn report_json(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{v}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Crawl {
            config,
            spider,
            run,
        } => crawl(&config, spider, &run),
        Command::Stream {
            config,
            fixture,
            rate,
            looping,
            limit,
            run,
        } => stream(&config, fixture, rate, looping, limit, &run),
        Command::Extract {
            config,
            input,
            format,
            ner,
            seen_at,
        } => extract(
            &config,
            &input,
            format,
            ner,
            seen_at.unwrap_or_else(Utc::now),
        ),
        Command::Train {
            corpus,
            out,
            seed,
            epochs,
            learning_rate,
            holdout,
        } => train(&corpus, &out, seed, epochs, learning_rate, holdout),
        Command::Eval {
            model,
            corpus,
            threshold,
        } => eval(&model, &corpus, threshold),
        Command::Metrics {
            endpoint,
            from_archive,
        } => metrics(endpoint, from_archive),
        Command::Verify {
            config,
            input,
            fixture,
            live,
        } => verify(&config, &input, fixture, live),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn open_input(input: &str) -> Result<Box<dyn BufRead>> {
    if input == "-" {
        return Ok(Box::new(std::io::stdin().lock()));
    }
    let f = std::fs::File::open(input).with_context(|| format!("opening {input}"))?;
    Ok(Box::new(std::io::BufReader::new(f)))
}

fn stop_on_signal() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || {
        if f.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        log::warn!("interrupt: draining, press again to abort");
    })?;
    Ok(flag)
}

/// Waits for the source to finish or a signal, then drains and prints the report.
fn finish(handle: RunHandle, run: &RunArgs) -> Result<()> {
    let stop = stop_on_signal()?;
    if let Some(addr) = handle.metrics_addr() {
        log::info!("metrics on http://{addr}/metrics");
    }
    while !handle.source_finished() && !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let report = handle.shutdown(Duration::from_secs(run.grace));
    log::info!(
        "{:?}: published {} indexed {} dead-lettered {} uncommitted {}",
        report.outcome,
        report.published,
        report.indexed,
        report.dead_lettered,
        report.uncommitted
    );
    print_json(&report)
}

fn crawl(config: &ConfigArg, spider: Option<Spider>, run: &RunArgs) -> Result<()> {
    let (_, cfg) = config.load()?;
    let profiles = cfg.spiders.profiles(spider)?;
    if profiles.is_empty() {
        bail!(Usage("no spiders configured".into()));
    }
    let fetcher = Arc::new(Fetcher::new(cfg.spiders.fetch.clone())?);
    let setup = CrawlSetup {
        frontier: Arc::new(Frontier::new(profiles)),
        fetcher,
        workers: cfg.spiders.workers,
        max_pages: cfg.spiders.max_pages,
        visited: cfg.spiders.visited.clone(),
    };
    let handle = pipeline::run_web_pipeline(Components::from_config(&cfg)?, setup)?;
    finish(handle, run)
}

fn stream(
    config: &ConfigArg,
    fixture: Option<PathBuf>,
    rate: Option<f64>,
    looping: bool,
    limit: Option<u64>,
    run: &RunArgs,
) -> Result<()> {
    let (_, cfg) = config.load()?;
    let source = match (fixture, &cfg.sources.replay, &cfg.sources.http) {
        (Some(path), configured, _) => {
            let mut options = configured.as_ref().map(|r| r.options()).unwrap_or_default();
            options.rate = rate.or(options.rate);
            options.looping |= looping;
            options.limit = limit.or(options.limit);
            PostSource::Replay { path, options }
        }
        (None, Some(r), _) => {
            let mut options = r.options();
            options.rate = rate.or(options.rate);
            options.looping |= looping;
            options.limit = limit.or(options.limit);
            PostSource::Replay {
                path: r.path.clone(),
                options,
            }
        }
        (None, None, Some(http)) => PostSource::Http(http.clone()),
        (None, None, None) => bail!(Usage(
            "no post source: pass --fixture or configure [sources]".into()
        )),
    };
    if let PostSource::Replay { options, .. } = &source {
        if options.rate.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
            bail!(Usage("--rate must be positive".into()));
        }
    }
    let handle = pipeline::run_tweet_pipeline(Components::from_config(&cfg)?, source)?;
    finish(handle, run)
}

#[derive(Deserialize)]
struct TextLine {
    text: String,
}

fn extract(
    config: &ConfigArg,
    input: &str,
    format: InputFormat,
    ner: bool,
    seen_at: DateTime<Utc>,
) -> Result<()> {
    let (extractor, tagger) = match config.load_optional()? {
        Some(cfg) => (cfg.ner.build_extractor()?, cfg.ner.build_fallback()?),
        None => {
            let ex = Extractor::new(DefangGrammar::default());
            (ex.clone(), FallbackTagger::new(ex, Gazetteer::builtin()))
        }
    };
    let mut reader = open_input(input)?;
    let docs: Vec<String> = match format {
        InputFormat::Text => {
            let mut s = String::new();
            reader.read_to_string(&mut s).context("reading input")?;
            vec![s]
        }
        InputFormat::Ndjson => {
            let mut docs = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.context("reading input")?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: TextLine = serde_json::from_str(&line)
                    .with_context(|| format!("line {}: expected {{\"text\": ...}}", i + 1))?;
                docs.push(t.text);
            }
            docs
        }
    };
    let mut out = BufWriter::new(std::io::stdout().lock());
    for text in &docs {
        let rules = extractor.extract(text, seen_at);
        let indicators = if ner {
            merge_with_ner(&rules, &tagger.tag(text), text, seen_at).indicators
        } else {
            rules
        };
        for ind in indicators {
            serde_json::to_writer(&mut out, &ind)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct Labelled {
    text: String,
    relevant: bool,
}

fn read_corpus(path: &Path) -> Result<Vec<(String, bool)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Labelled = serde_json::from_str(line).with_context(|| {
            format!(
                "{}:{}: expected {{\"text\": ..., \"relevant\": bool}}",
                path.display(),
                i + 1
            )
        })?;
        out.push((l.text, l.relevant));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainSummary {
    model_id: String,
    examples: usize,
    report: Option<ctiflow::classifier::EvalReport>,
}

fn train(
    corpus: &Path,
    out: &Path,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
    holdout: f64,
) -> Result<()> {
    let data = read_corpus(corpus)?;
    let cfg = TrainConfig {
        seed,
        epochs,
        learning_rate,
        validation_fraction: holdout,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train_baseline(&data, &cfg)?;
    log::info!(
        "trained on {} examples in {:?}",
        data.len(),
        started.elapsed()
    );
    outcome.model.save(out)?;
    print_json(&TrainSummary {
        model_id: outcome.model.model_id().to_string(),
        examples: data.len(),
        report: outcome.validation,
    })
}

fn eval(model: &Path, corpus: &Path, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        bail!(Usage("--threshold must be in [0, 1]".into()));
    }
    let model = BaselineModel::load(model)?;
    let data = read_corpus(corpus)?;
    let mut predictions = Vec::with_capacity(data.len());
    for (text, _) in &data {
        predictions.push(model.score_text(text)? >= threshold);
    }
    let gold: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
    print_json(&evaluate(&predictions, &gold)?)
}

fn metrics(endpoint: Option<String>, from_archive: Option<PathBuf>) -> Result<()> {
    if let Some(path) = from_archive {
        let records = read_archive(&path)?;
        return print_json(&snapshot_from_archive(&records));
    }
    let base = endpoint.expect("clap requires one of the two");
    let url = if base.trim_end_matches('/').ends_with("/metrics") {
        base
    } else {
        format!("{}/metrics", base.trim_end_matches('/'))
    };
    let resp = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()?
        .get(&url)
        .send()
        .with_context(|| format!("GET {url}"))?;
    if !resp.status().is_success() {
        bail!("GET {url}: status {}", resp.status());
    }
    let snapshot: ctiflow::metrics::MetricSnapshot =
        resp.json().with_context(|| format!("GET {url}: body"))?;
    print_json(&snapshot)
}

fn verify(config: &ConfigArg, input: &str, fixture: Option<PathBuf>, live: bool) -> Result<()> {
    let mut enrichment = config
        .load_optional()?
        .map(|c| c.enrichment)
        .unwrap_or_default();
    if let Some(f) = fixture {
        enrichment.fixture = Some(f);
    }
    if !live && enrichment.fixture.is_none() {
        bail!(Usage("pass --fixture or --live".into()));
    }
    let verifier = enrichment.build_verifier(live)?;
    let reader = open_input(input)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for (i, line) in reader.lines().enumerate() {
        let line = line.context("reading input")?;
        if line.trim().is_empty() {
            continue;
        }
        let ind: Indicator = serde_json::from_str(&line)
            .with_context(|| format!("line {}: not an indicator", i + 1))?;
        let statuses = verifier.verify(&ind);
        serde_json::to_writer(&mut out, &ind.with_verification(statuses))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
