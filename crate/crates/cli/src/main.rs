use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lobbench::config::{parse_pairs, ExperimentConfig, MatrixSpec};
use lobbench::dataset::{export_tensors, import_embeddings, import_tensors, TensorSet, SPLIT_NAMES};
use lobbench::eval::{confusion, metrics, time_phase, MetricsReport, Phase};
use lobbench::experiment::{
    label_mids, predictions_csv, prepare_dataset, read_predictions, resolve_label_kind,
    run_matrix, run_with_cache, split_windows, PipelineCache,
};
use lobbench::features::{build_feature_matrix, FeatureMatrix};
use lobbench::filters::apply_filter;
use lobbench::ingest::{convert_bybit, ingest, read_frames_csv, write_frames_csv, IngestOptions};
use lobbench::labeling::horizon_returns;
use lobbench::models::{grid_search, load_model, save_model, Model};
use lobbench::synth::{generate, SynthConfig};
use lobbench::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lobbench", version, about = "Limit-order-book mid-price classification benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse canonical NDJSON snapshots and dump dense frames as CSV
    Ingest(IngestArgs),
    /// Build the feature matrix from a frame dump
    Features(FeaturesArgs),
    /// Apply the configured filter to every feature column
    Filter(FilterArgs),
    /// Write `ts,label,return` for every frame
    Label(LabelArgs),
    /// List the windows of each split after purging
    Windows(WindowsArgs),
    /// Assemble the dataset and write the tensor container
    Export(ExportArgs),
    /// Train on a tensor container (or its embeddings) and evaluate on test
    Train(TrainArgs),
    /// Score one split of a tensor container with a saved model
    Predict(PredictArgs),
    /// Recompute metrics from a predictions file
    Evaluate(EvaluateArgs),
    /// Generate a synthetic book stream with a planted signal
    Synth(SynthArgs),
    /// Convert a Bybit orderbook message archive to canonical NDJSON
    Convert(ConvertArgs),
    /// Run one experiment end to end
    Run(RunArgs),
    /// Run every cell of an experiment matrix and write combined tables
    Matrix(MatrixArgs),
}

/// Experiment config as a file plus `key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Config file with `key = value` lines
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set filter.kind=sg`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, input: Option<&Path>) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(input) = input {
            pairs.push(("input".into(), input.display().to_string()));
        } else if !pairs.iter().any(|(k, _)| k == "input") {
            pairs.push(("input".into(), "-".into()));
        }
        ExperimentConfig::from_pairs(pairs)
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Canonical NDJSON input
    #[arg(short, long)]
    input: PathBuf,
    /// Frame CSV output (stdout if omitted)
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Required dense depth per side
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Read at most this many records
    #[arg(long)]
    limit: Option<u64>,
    /// Apply the limit to dense frames instead of raw records
    #[arg(long)]
    limit_after_filter: bool,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// Frame CSV from `ingest`
    #[arg(short, long)]
    frames: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Feature CSV from `features`
    #[arg(short, long)]
    features: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(short, long)]
    frames: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct WindowsArgs {
    #[arg(short, long)]
    frames: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Canonical NDJSON input (overrides `input` in the config)
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Directory for the tensor container
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Tensor container directory
    #[arg(short, long)]
    tensors: PathBuf,
    /// Train on `embeddings.<split>.f32` instead of the window tensors
    #[arg(long)]
    embeddings: bool,
    /// Directory for model.bin, metrics and predictions
    #[arg(short, long)]
    out: PathBuf,
    /// Model and grid keys (`model.*`, `seed`) are read from here
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    tensors: PathBuf,
    #[arg(long)]
    embeddings: bool,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// predictions.csv with `label` and `pred` columns
    #[arg(short, long)]
    predictions: PathBuf,
    /// Directory for metrics.csv, metrics.md and confusion.csv
    #[arg(short, long)]
    out: PathBuf,
    /// Class count when the file has no probability columns
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().n)]
    n: usize,
    #[arg(long, default_value_t = SynthConfig::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = SynthConfig::default().tick)]
    tick: f64,
    #[arg(long, default_value_t = SynthConfig::default().base_price)]
    base_price: f64,
    #[arg(long, default_value_t = SynthConfig::default().signal_strength)]
    signal_strength: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().flicker_rate)]
    flicker_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().gap_rate)]
    gap_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().missing_level_rate)]
    missing_level_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().regime_flip)]
    regime_flip: f64,
    #[arg(long, default_value_t = SynthConfig::default().band_ticks)]
    band_ticks: i64,
    #[arg(long, default_value_t = SynthConfig::default().start_ts)]
    start_ts: i64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n: self.n,
            depth: self.depth,
            tick: self.tick,
            base_price: self.base_price,
            signal_strength: self.signal_strength,
            noise_sigma: self.noise_sigma,
            flicker_rate: self.flicker_rate,
            gap_rate: self.gap_rate,
            missing_level_rate: self.missing_level_rate,
            regime_flip: self.regime_flip,
            band_ticks: self.band_ticks,
            start_ts: self.start_ts,
        }
    }
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    depth: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Matrix file: base keys, `include = <config>` and `axis <key> = v1, v2`
    #[arg(short, long)]
    spec: PathBuf,
    /// Recompute shared stages for every cell
    #[arg(long)]
    no_cache: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Ingest(a) => cmd_ingest(a).map_err(|e| e.at("ingest")),
        Command::Features(a) => cmd_features(a).map_err(|e| e.at("features")),
        Command::Filter(a) => cmd_filter(a).map_err(|e| e.at("filter")),
        Command::Label(a) => cmd_label(a).map_err(|e| e.at("label")),
        Command::Windows(a) => cmd_windows(a).map_err(|e| e.at("windows")),
        Command::Export(a) => cmd_export(a).map_err(|e| e.at("export")),
        Command::Train(a) => cmd_train(a).map_err(|e| e.at("train")),
        Command::Predict(a) => cmd_predict(a).map_err(|e| e.at("predict")),
        Command::Evaluate(a) => cmd_evaluate(a).map_err(|e| e.at("evaluate")),
        Command::Synth(a) => cmd_synth(a).map_err(|e| e.at("synth")),
        Command::Convert(a) => cmd_convert(a).map_err(|e| e.at("convert")),
        Command::Run(a) => cmd_run(a),
        Command::Matrix(a) => cmd_matrix(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_frames(path: &Path) -> Result<Vec<lobbench::ingest::BookFrame>> {
    let frames = read_frames_csv(open(path)?)?;
    if frames.is_empty() {
        return Err(Error::data(format!("{} holds no frames", path.display())));
    }
    Ok(frames)
}

fn cmd_ingest(a: IngestArgs) -> Result<u8> {
    let opts = IngestOptions {
        depth: a.depth,
        limit: a.limit,
        take_before_depth_filter: !a.limit_after_filter,
    };
    let (frames, stats) = ingest(open(&a.input)?, &opts)?;
    let mut out = sink(a.output.as_deref())?;
    write_frames_csv(&frames, &mut out)?;
    out.flush()?;
    log::info!(
        "{} records, {} accepted, {} missing depth, {} crossed, {} malformed, {} duplicate ts",
        stats.total_records,
        stats.accepted,
        stats.rejected_missing_depth,
        stats.rejected_crossed,
        stats.rejected_malformed,
        stats.rejected_duplicate_ts
    );
    Ok(0)
}

fn cmd_features(a: FeaturesArgs) -> Result<u8> {
    let cfg = a.config.load(None)?;
    let frames = read_frames(&a.frames)?;
    let m = build_feature_matrix(&frames, &cfg.features)?;
    let mut out = sink(a.output.as_deref())?;
    m.write_csv(&mut out)?;
    out.flush()?;
    Ok(0)
}

fn cmd_filter(a: FilterArgs) -> Result<u8> {
    let cfg = a.config.load(None)?;
    let m = FeatureMatrix::read_csv(open(&a.features)?)?;
    let filtered = apply_filter(&m, &cfg.filter)?;
    let mut out = sink(a.output.as_deref())?;
    filtered.write_csv(&mut out)?;
    out.flush()?;
    Ok(0)
}

fn cmd_label(a: LabelArgs) -> Result<u8> {
    let cfg = a.config.load(None)?;
    let frames = read_frames(&a.frames)?;
    let ts: Vec<i64> = frames.iter().map(|f| f.ts).collect();
    let mids = label_mids(&cfg, &frames)?;
    let returns = horizon_returns(&mids, &ts, cfg.label.horizon);
    let (splits, _) = split_windows(&cfg, &ts, &returns)?;
    let kind = resolve_label_kind(&cfg, &splits[0], &returns)?;
    let mut out = sink(a.output.as_deref())?;
    writeln!(out, "ts,label,return")?;
    for (t, r) in ts.iter().zip(&returns) {
        match r.map(|r| (kind.label(r), r)) {
            Some((Some(l), r)) => writeln!(out, "{t},{l},{r:e}")?,
            Some((None, r)) => writeln!(out, "{t},,{r:e}")?,
            None => writeln!(out, "{t},,")?,
        }
    }
    out.flush()?;
    Ok(0)
}

fn cmd_windows(a: WindowsArgs) -> Result<u8> {
    let cfg = a.config.load(None)?;
    let frames = read_frames(&a.frames)?;
    let ts: Vec<i64> = frames.iter().map(|f| f.ts).collect();
    let mids = label_mids(&cfg, &frames)?;
    let returns = horizon_returns(&mids, &ts, cfg.label.horizon);
    let (splits, purged) = split_windows(&cfg, &ts, &returns)?;
    let kind = resolve_label_kind(&cfg, &splits[0], &returns)?;
    let mut out = sink(a.output.as_deref())?;
    writeln!(out, "split,start,len,label_row,anchor_ts,label")?;
    for (split, name) in splits.iter().zip(SPLIT_NAMES) {
        for w in split {
            let label = returns[w.label_row]
                .and_then(|r| kind.label(r))
                .map_or(String::new(), |l| l.to_string());
            writeln!(
                out,
                "{name},{},{},{},{},{label}",
                w.start, w.len, w.label_row, w.anchor_ts
            )?;
        }
    }
    out.flush()?;
    log::info!("purged per split: {purged:?}");
    Ok(0)
}

fn cmd_export(a: ExportArgs) -> Result<u8> {
    let cfg = a.config.load(a.input.as_deref())?;
    let prepared = prepare_dataset(&cfg, &mut PipelineCache::new(false))?;
    export_tensors(&prepared.dataset, &a.out)?;
    let ds = &prepared.dataset;
    log::info!(
        "exported {} / {} / {} windows of {}x{} to {}",
        ds.splits[0].len(),
        ds.splits[1].len(),
        ds.splits[2].len(),
        ds.t,
        ds.f(),
        a.out.display()
    );
    Ok(0)
}

fn load_tensors(dir: &Path, embeddings: bool) -> Result<TensorSet> {
    if embeddings {
        import_embeddings(dir)
    } else {
        import_tensors(dir)
    }
}

fn split_index(name: &str) -> Result<usize> {
    SPLIT_NAMES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::config(format!("unknown split `{name}` (expected train, val or test)")))
}

fn write_eval(dir: &Path, report: &MetricsReport, title: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    fs::write(dir.join("metrics.md"), report.to_markdown(title))?;
    fs::write(dir.join("confusion.csv"), report.confusion.to_csv())?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let cfg = a.config.load(None)?;
    let set = load_tensors(&a.tensors, a.embeddings)?;
    let weights = set.class_weights()?;
    let [train, val, test] = &set.splits;
    let (xt, xv, xs) = (train.to_matrix()?, val.to_matrix()?, test.to_matrix()?);
    let cells = cfg.grid.cells(cfg.model, &cfg.train);
    let (trained, train_time) = time_phase(Phase::Train, || {
        grid_search(cfg.model, &cells, &cfg.train, (&xt, &train.y), (&xv, &val.y), &weights)
    });
    let (model, _, grid) = trained?;
    let (pred, infer_time) = time_phase(Phase::Infer, || model.predict_proba(&xs));
    let pred = pred?;
    let cm = confusion(&test.y, &pred.argmax(), set.classes)?;
    let mut report = metrics(&cm);
    report.train_time = Some(train_time);
    report.infer_ms_per_1k = Some(infer_time.as_secs_f64() * 1e6 / test.n.max(1) as f64);

    let source = if a.embeddings { "embeddings" } else { "tensors" };
    write_eval(&a.out, &report, &format!("{} on {source}", cfg.model))?;
    fs::write(a.out.join("grid.csv"), grid.to_csv())?;
    let rows: Vec<i64> = (0..test.n as i64).collect();
    fs::write(a.out.join("predictions.csv"), predictions_csv(&rows, &test.y, &pred))?;
    let mut f = BufWriter::new(File::create(a.out.join("model.bin"))?);
    save_model(&model, &mut f)?;
    f.flush()?;
    log::info!(
        "{} on {source}: test accuracy {:.4}, macro F1 {:.4}",
        cfg.model,
        report.accuracy,
        report.macro_f1
    );
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> Result<u8> {
    let model: Model = load_model(open(&a.model)?)?;
    let set = load_tensors(&a.tensors, a.embeddings)?;
    let split = &set.splits[split_index(&a.split)?];
    let pred = model.predict_proba(&split.to_matrix()?)?;
    let rows: Vec<i64> = (0..split.n as i64).collect();
    let mut out = sink(a.output.as_deref())?;
    out.write_all(predictions_csv(&rows, &split.y, &pred).as_bytes())?;
    out.flush()?;
    Ok(0)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.predictions)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", a.predictions.display())))?;
    let (y, p, k) = read_predictions(&text)?;
    let k = match (a.classes, k) {
        (Some(c), _) => c,
        (None, k) if k >= 2 => k,
        _ => {
            let max = y.iter().chain(&p).copied().max().unwrap_or(0) as usize;
            (max + 1).max(2)
        }
    };
    let report = metrics(&confusion(&y, &p, k)?);
    write_eval(&a.out, &report, &a.predictions.display().to_string())?;
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> Result<u8> {
    let cfg = a.config();
    let out = sink(a.output.as_deref())?;
    let summary = generate(&cfg, out)?;
    log::info!(
        "{} snapshots over {} steps, planted match rate {:.4}",
        summary.emitted,
        summary.steps,
        summary.planted_match_rate
    );
    Ok(0)
}

fn cmd_convert(a: ConvertArgs) -> Result<u8> {
    let mut out = sink(a.output.as_deref())?;
    let stats = convert_bybit(open(&a.input)?, &mut out, a.depth)?;
    out.flush()?;
    log::info!(
        "{} messages, {} skipped, {} records written",
        stats.messages,
        stats.skipped,
        stats.records_written
    );
    Ok(0)
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    if a.config.config.is_none() && a.config.sets.is_empty() {
        return Err(Error::config("run needs --config or --set input=<path>"));
    }
    let cfg = a.config.load(None)?;
    let o = run_with_cache(&cfg, &mut PipelineCache::new(false))?;
    println!(
        "{}: accuracy {:.4}, macro F1 {:.4} -> {}",
        o.id,
        o.report.accuracy,
        o.report.macro_f1,
        o.dir.display()
    );
    Ok(0)
}

fn cmd_matrix(a: MatrixArgs) -> Result<u8> {
    let spec = MatrixSpec::load(&a.spec)?;
    let mut cache = PipelineCache::new(!a.no_cache);
    let o = run_matrix(&spec, &mut cache)?;
    let mut summary = String::new();
    for (_, t) in &o.tables {
        let _ = writeln!(summary, "{}", t.markdown);
    }
    print!("{summary}");
    println!("{} cells, {} failed -> {}", o.cells.len(), o.failures(), o.dir.display());
    Ok(if o.failures() > 0 { 5 } else { 0 })
}

