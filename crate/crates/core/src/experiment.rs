//! End-to-end experiment runner: ingest → features → filter → labels →
//! windows → split → train → evaluate, with content-keyed stage caching.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::config::{content_hash, EpsilonSpec, ExperimentConfig, LabelScheme, MatrixSpec};
use crate::dataset::{
    candidate_spans, chronological_split, purge_boundaries, ExperimentDataset, SampleWindow,
    SPLIT_NAMES,
};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, depth_table, horizon_filter_tables, metrics, sequence_table, time_phase,
    MetricsReport, Phase, ResultCell, Table,
};
use crate::features::{
    apply_normalizer, build_feature_matrix, fit_normalizer, mid_price, FeatureMatrix, Normalizer,
};
use crate::filters::{apply_filter, filter_series};
use crate::ingest::{ingest, BookFrame, IngestOptions, IngestStats};
use crate::labeling::{horizon_returns, tune_epsilon, ClassWeights, LabelKind, LabelSource};
use crate::models::{grid_search, save_model, GridReport, Model, Prediction, TrainConfig};

/// How many times each stage actually executed (cache misses).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub ingest: usize,
    pub features: usize,
    pub filter: usize,
    pub train: usize,
}

struct Ingested {
    frames: Vec<BookFrame>,
    stats: IngestStats,
}

struct Filtered {
    matrix: FeatureMatrix,
    /// Mid series the labels are computed from.
    label_mids: Vec<f64>,
}

/// Results of shared stages keyed by content hash. With caching disabled
/// every stage runs every time.
pub struct PipelineCache {
    enabled: bool,
    ingested: HashMap<String, Arc<Ingested>>,
    features: HashMap<String, Arc<FeatureMatrix>>,
    filtered: HashMap<String, Arc<Filtered>>,
    pub counters: StageCounters,
}

impl PipelineCache {
    pub fn new(enabled: bool) -> Self {
        PipelineCache {
            enabled,
            ingested: HashMap::new(),
            features: HashMap::new(),
            filtered: HashMap::new(),
            counters: StageCounters::default(),
        }
    }
}

impl Default for PipelineCache {
    fn default() -> Self {
        PipelineCache::new(true)
    }
}

fn stage_keys(cfg: &ExperimentConfig) -> (String, String, String) {
    let text = cfg.canonical_text();
    let pick = |prefixes: &[&str]| -> String {
        text.lines()
            .filter(|l| prefixes.iter().any(|p| l.starts_with(p)))
            .map(|l| format!("{l}\n"))
            .collect()
    };
    let ingest = pick(&["input", "depth"]);
    let features = format!("{ingest}{}", pick(&["features."]));
    let filter = format!("{features}{}", pick(&["filter.", "label.source"]));
    (
        content_hash(&ingest),
        content_hash(&features),
        content_hash(&filter),
    )
}

fn load_ingested(cfg: &ExperimentConfig, cache: &mut PipelineCache, key: &str) -> Result<Arc<Ingested>> {
    if cache.enabled {
        if let Some(hit) = cache.ingested.get(key) {
            return Ok(hit.clone());
        }
    }
    cache.counters.ingest += 1;
    let file = File::open(&cfg.input).map_err(|e| {
        Error::data(format!("cannot open input {}: {e}", cfg.input.display()))
    })?;
    let opts = IngestOptions {
        depth: cfg.depth,
        limit: cfg.input_limit,
        take_before_depth_filter: cfg.take_before_depth_filter,
    };
    let (frames, stats) = ingest(BufReader::new(file), &opts)?;
    if frames.is_empty() {
        return Err(Error::data(format!(
            "no snapshot in {} is dense at depth {}",
            cfg.input.display(),
            cfg.depth
        )));
    }
    let out = Arc::new(Ingested { frames, stats });
    if cache.enabled {
        cache.ingested.insert(key.to_string(), out.clone());
    }
    Ok(out)
}

/// Everything a model run needs, plus the train-fitted statistics.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub dataset: ExperimentDataset,
    pub normalizer: Normalizer,
    pub ingest_stats: IngestStats,
    /// Windows dropped at each split boundary.
    pub purged: [usize; 3],
    /// Windows dropped because their label was a dropped tie.
    pub dropped_ties: usize,
}

/// Run every stage up to the assembled, normalized dataset.
pub fn prepare_dataset(cfg: &ExperimentConfig, cache: &mut PipelineCache) -> Result<PreparedDataset> {
    cfg.validate().map_err(|e| e.at("config"))?;
    let (ingest_key, features_key, filter_key) = stage_keys(cfg);
    let ingested = load_ingested(cfg, cache, &ingest_key).map_err(|e| e.at("ingest"))?;

    let raw = match cache.features.get(&features_key).filter(|_| cache.enabled) {
        Some(hit) => hit.clone(),
        None => {
            cache.counters.features += 1;
            let m = Arc::new(
                build_feature_matrix(&ingested.frames, &cfg.features)
                    .map_err(|e| e.at("features"))?,
            );
            if cache.enabled {
                cache.features.insert(features_key, m.clone());
            }
            m
        }
    };

    let filtered = match cache.filtered.get(&filter_key).filter(|_| cache.enabled) {
        Some(hit) => hit.clone(),
        None => {
            cache.counters.filter += 1;
            let matrix = apply_filter(&raw, &cfg.filter).map_err(|e| e.at("filter"))?;
            let label_mids = label_mids(cfg, &ingested.frames)?;
            let f = Arc::new(Filtered { matrix, label_mids });
            if cache.enabled {
                cache.filtered.insert(filter_key, f.clone());
            }
            f
        }
    };

    assemble(cfg, &filtered.matrix, &filtered.label_mids, ingested.stats.clone())
}

fn assemble(
    cfg: &ExperimentConfig,
    matrix: &FeatureMatrix,
    label_mids: &[f64],
    ingest_stats: IngestStats,
) -> Result<PreparedDataset> {
    let ts = matrix.ts();
    let h = cfg.label.horizon;
    let returns = horizon_returns(label_mids, ts, h);
    let (mut splits, purged) = split_windows(cfg, ts, &returns)?;
    let kind = resolve_label_kind(cfg, &splits[0], &returns)?;
    let mut dropped_ties = 0;
    for split in &mut splits {
        split.retain_mut(|w| match kind.label(returns[w.label_row].expect("valid return")) {
            Some(l) => {
                w.label = l;
                true
            }
            None => {
                dropped_ties += 1;
                false
            }
        });
    }
    let k = kind.n_classes();
    let counts = crate::labeling::class_counts(splits[0].iter().map(|w| w.label), k);
    let class_weights = if cfg.inverse_class_weights {
        ClassWeights::from_counts(&counts).map_err(|e| e.at("label"))?
    } else {
        ClassWeights::uniform(k)
    };

    let first = splits[0].first().expect("non-empty").start;
    let last = splits[0].last().expect("non-empty").end();
    let normalizer = fit_normalizer(matrix, first..last + 1).map_err(|e| e.at("normalize"))?;
    let features = apply_normalizer(matrix, &normalizer).map_err(|e| e.at("normalize"))?;

    let mut metadata = BTreeMap::new();
    metadata.insert("filter".into(), cfg.filter.name().into());
    metadata.insert("label_kind".into(), kind.name().into());
    metadata.insert("label_source".into(), source_name(cfg.label.source).into());
    metadata.insert("horizon_ms".into(), h.ms().to_string());
    metadata.insert("depth".into(), cfg.depth.to_string());
    metadata.insert("anchor".into(), cfg.window_anchor.name().into());
    metadata.insert("config_id".into(), cfg.id());

    let dataset = ExperimentDataset {
        features,
        splits,
        t: cfg.window_t,
        n_classes: k,
        epsilon: match kind {
            LabelKind::Ternary { epsilon } => Some(epsilon),
            LabelKind::Binary { .. } => None,
        },
        class_weights,
        seed: cfg.seed,
        metadata,
    };
    dataset.check_disjoint().map_err(|e| e.at("split"))?;
    Ok(PreparedDataset {
        dataset,
        normalizer,
        ingest_stats,
        purged,
        dropped_ties,
    })
}

/// Unlabelled windows per split after purging, with purge counts.
pub fn split_windows(
    cfg: &ExperimentConfig,
    ts: &[i64],
    returns: &[Option<f64>],
) -> Result<([Vec<SampleWindow>; 3], [usize; 3])> {
    let valid: Vec<bool> = returns.iter().map(Option::is_some).collect();
    let spans = candidate_spans(ts, &valid, cfg.window_t, cfg.window_anchor);
    let ranges = chronological_split(spans.len(), &cfg.split).map_err(|e| e.at("split"))?;
    let mut splits: [Vec<SampleWindow>; 3] = ranges.map(|r| {
        spans[r]
            .iter()
            .map(|&(start, label_row)| SampleWindow {
                start,
                len: cfg.window_t,
                label_row,
                label: 0,
                anchor_ts: ts[start + cfg.window_t - 1],
            })
            .collect()
    });
    let purged = purge_boundaries(&mut splits, cfg.label.horizon.steps(), cfg.filter.lookahead());
    for (s, name) in splits.iter().zip(SPLIT_NAMES) {
        if s.is_empty() {
            return Err(Error::data(format!("{name} split is empty after purging")).at("split"));
        }
    }
    Ok((splits, purged))
}

/// Label scheme with ε resolved; `auto` is tuned on the train windows only.
pub fn resolve_label_kind(
    cfg: &ExperimentConfig,
    train: &[SampleWindow],
    returns: &[Option<f64>],
) -> Result<LabelKind> {
    Ok(match cfg.label.scheme {
        LabelScheme::Binary => LabelKind::Binary {
            tie_rule: cfg.label.tie_rule,
        },
        LabelScheme::Ternary => {
            let epsilon = match cfg.label.epsilon {
                EpsilonSpec::Fixed(e) => e,
                EpsilonSpec::Auto => {
                    let train_returns: Vec<f64> =
                        train.iter().filter_map(|w| returns[w.label_row]).collect();
                    tune_epsilon(&train_returns, cfg.label.flat_share).map_err(|e| e.at("label"))?
                }
            };
            LabelKind::Ternary { epsilon }
        }
    })
}

/// Mid series labels are computed from under `cfg`.
pub fn label_mids(cfg: &ExperimentConfig, frames: &[BookFrame]) -> Result<Vec<f64>> {
    let mids: Vec<f64> = frames.iter().map(mid_price).collect();
    match cfg.label.source {
        LabelSource::Raw => Ok(mids),
        LabelSource::Filtered => filter_series(&mids, &cfg.filter).map_err(|e| e.at("filter")),
    }
}

fn source_name(s: LabelSource) -> &'static str {
    match s {
        LabelSource::Raw => "raw",
        LabelSource::Filtered => "filtered",
    }
}

/// Outputs of one experiment.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub id: String,
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub grid: GridReport,
    pub model: Model,
    pub train_config: TrainConfig,
    pub epsilon: Option<f64>,
    pub class_weights: ClassWeights,
    pub normalizer: Normalizer,
    pub split_sizes: [usize; 3],
    pub y_test: Vec<u8>,
    pub predictions: Vec<u8>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_with_cache(cfg, &mut PipelineCache::new(false))
}

/// Train with grid search on validation, evaluate on test and write the
/// result directory.
pub fn run_with_cache(cfg: &ExperimentConfig, cache: &mut PipelineCache) -> Result<RunOutcome> {
    let prepared = prepare_dataset(cfg, cache)?;
    let ds = &prepared.dataset;
    let (x_train, y_train) = ds.design(0)?;
    let (x_val, y_val) = ds.design(1)?;
    let (x_test, y_test) = ds.design(2)?;

    cache.counters.train += 1;
    let cells = cfg.grid.cells(cfg.model, &cfg.train);
    let (trained, train_time) = time_phase(Phase::Train, || {
        grid_search(
            cfg.model,
            &cells,
            &cfg.train,
            (&x_train, &y_train),
            (&x_val, &y_val),
            &ds.class_weights,
        )
    });
    let (model, train_config, grid) = trained.map_err(|e| e.at("train"))?;

    let (pred, infer_time) = time_phase(Phase::Infer, || model.predict_proba(&x_test));
    let pred: Prediction = pred.map_err(|e| e.at("predict"))?;
    let labels = pred.argmax();
    let cm = confusion(&y_test, &labels, ds.n_classes).map_err(|e| e.at("evaluate"))?;
    let mut report = metrics(&cm);
    report.train_time = Some(train_time);
    report.infer_ms_per_1k = Some(per_thousand(infer_time, y_test.len()));

    let outcome = RunOutcome {
        id: cfg.id(),
        dir: cfg.result_dir(),
        report,
        grid,
        model,
        train_config,
        epsilon: ds.epsilon,
        class_weights: ds.class_weights.clone(),
        normalizer: prepared.normalizer.clone(),
        split_sizes: [0, 1, 2].map(|s| ds.splits[s].len()),
        y_test,
        predictions: labels,
    };
    write_results(cfg, &prepared, &outcome, &pred, &ds.splits[2]).map_err(|e| e.at("write"))?;
    Ok(outcome)
}

fn per_thousand(d: Duration, n: usize) -> f64 {
    d.as_secs_f64() * 1e3 * 1e3 / n.max(1) as f64
}

/// Manifest lines describing a finished run, appended to the canonical
/// config so the file parses back as the same config.
fn manifest_text(cfg: &ExperimentConfig, p: &PreparedDataset, o: &RunOutcome) -> String {
    let mut s = cfg.canonical_text();
    let st = &p.ingest_stats;
    let _ = writeln!(s, "run.id = {}", o.id);
    let _ = writeln!(s, "run.version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "run.ingest.total_records = {}", st.total_records);
    let _ = writeln!(s, "run.ingest.accepted = {}", st.accepted);
    let _ = writeln!(s, "run.ingest.rejected_missing_depth = {}", st.rejected_missing_depth);
    let _ = writeln!(s, "run.ingest.rejected_crossed = {}", st.rejected_crossed);
    let _ = writeln!(s, "run.ingest.rejected_malformed = {}", st.rejected_malformed);
    let _ = writeln!(s, "run.ingest.rejected_duplicate_ts = {}", st.rejected_duplicate_ts);
    let _ = writeln!(s, "run.ingest.acceptance_ratio = {:.4}", st.acceptance_ratio());
    for (i, name) in SPLIT_NAMES.iter().enumerate() {
        let _ = writeln!(s, "run.windows.{name} = {}", o.split_sizes[i]);
        let _ = writeln!(s, "run.purged.{name} = {}", p.purged[i]);
    }
    let _ = writeln!(s, "run.dropped_ties = {}", p.dropped_ties);
    let _ = writeln!(
        s,
        "run.epsilon = {}",
        o.epsilon.map_or("none".into(), |e| format!("{e:?}"))
    );
    let w: Vec<String> = o.class_weights.0.iter().map(|w| format!("{w:?}")).collect();
    let _ = writeln!(s, "run.class_weights = {}", w.join(", "));
    let constant: Vec<&str> = p
        .normalizer
        .names
        .iter()
        .zip(&p.normalizer.constant)
        .filter(|(_, &c)| c)
        .map(|(n, _)| n.as_str())
        .collect();
    let _ = writeln!(s, "run.normalizer.rows = {:?}", p.normalizer.fitted_range);
    let _ = writeln!(s, "run.normalizer.constant_columns = {}", constant.join(", "));
    let cell = o.grid.selected_cell();
    let _ = writeln!(s, "run.selected.rounds = {}", cell.rounds);
    let _ = writeln!(s, "run.selected.learning_rate = {:?}", cell.learning_rate);
    let _ = writeln!(s, "run.selected.val_loss = {:.10}", o.grid.selected_loss());
    if let Model::Gbdt(g) = &o.model {
        let _ = writeln!(s, "run.selected.best_round = {}", g.best_round);
        let _ = writeln!(
            s,
            "run.note.trees = one gradient-boosted tree model stands in for both tree ensembles"
        );
    }
    if let Some(t) = o.report.train_time {
        let _ = writeln!(s, "run.timing.train_ms = {:.3}", t.as_secs_f64() * 1e3);
    }
    if let Some(ms) = o.report.infer_ms_per_1k {
        let _ = writeln!(s, "run.timing.infer_ms_per_1k = {ms:.3}");
    }
    s
}

/// `anchor_ts,label,pred,p0,p1,...` rows.
pub fn predictions_csv(anchors: &[i64], labels: &[u8], pred: &Prediction) -> String {
    let mut s = String::from("anchor_ts,label,pred");
    for c in 0..pred.k {
        let _ = write!(s, ",p{c}");
    }
    s.push('\n');
    let predicted = pred.argmax();
    for (i, (ts, y)) in anchors.iter().zip(labels).enumerate() {
        let _ = write!(s, "{ts},{y},{}", predicted[i]);
        for p in pred.row(i) {
            let _ = write!(s, ",{p:.10}");
        }
        s.push('\n');
    }
    s
}

/// Read `label` and `pred` columns of a predictions file.
pub fn read_predictions(text: &str) -> Result<(Vec<u8>, Vec<u8>, usize)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::format("empty predictions file"))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::format(format!("predictions file lacks `{name}` column")))
    };
    let (li, pi) = (col("label")?, col("pred")?);
    let k = header.iter().filter(|h| h.starts_with('p') && h[1..].parse::<usize>().is_ok()).count();
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<u8> {
            cells
                .get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::format(format!("bad predictions row `{line}`")))
        };
        y.push(get(li)?);
        p.push(get(pi)?);
    }
    Ok((y, p, k))
}

fn write_results(
    cfg: &ExperimentConfig,
    p: &PreparedDataset,
    o: &RunOutcome,
    pred: &Prediction,
    test_windows: &[SampleWindow],
) -> Result<()> {
    let dir = &o.dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.txt"), manifest_text(cfg, p, o))?;
    fs::write(dir.join("metrics.csv"), o.report.to_csv())?;
    let title = format!(
        "{} / {} / {} / {} ms / depth {} / T={}",
        o.id,
        cfg.model,
        cfg.filter.name(),
        cfg.label.horizon.ms(),
        cfg.depth,
        cfg.window_t
    );
    fs::write(dir.join("metrics.md"), o.report.to_markdown(&title))?;
    fs::write(dir.join("confusion.csv"), o.report.confusion.to_csv())?;
    fs::write(dir.join("grid.csv"), o.grid.to_csv())?;
    let anchors: Vec<i64> = test_windows.iter().map(|w| w.anchor_ts).collect();
    fs::write(dir.join("predictions.csv"), predictions_csv(&anchors, &o.y_test, pred))?;
    let mut f = BufWriter::new(File::create(dir.join("model.bin"))?);
    save_model(&o.model, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Combined results of a sweep.
#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub dir: PathBuf,
    pub cells: Vec<ResultCell>,
    pub ids: Vec<String>,
    pub tables: Vec<(String, Table)>,
    pub counters: StageCounters,
}

impl MatrixOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

/// Run every cell of a sweep, sharing ingest, feature and filter stages.
/// Cell failures are recorded and the sweep continues; configuration
/// errors abort before any work.
pub fn run_matrix(spec: &MatrixSpec, cache: &mut PipelineCache) -> Result<MatrixOutcome> {
    let mut configs = Vec::new();
    for (assignment, cfg) in spec.expand() {
        let cfg = cfg.map_err(|e| {
            let desc: Vec<String> = assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
            Error::config(format!("cell [{}]: {e}", desc.join(", ")))
        })?;
        configs.push(cfg);
    }
    let mut cells = Vec::with_capacity(configs.len());
    let mut ids = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let outcome = run_with_cache(cfg, cache);
        if let Err(e) = &outcome {
            log::warn!("cell {} failed: {e}", cfg.id());
        }
        ids.push(cfg.id());
        cells.push(ResultCell {
            label_kind: match cfg.label.scheme {
                LabelScheme::Binary => "binary".into(),
                LabelScheme::Ternary => "ternary".into(),
            },
            horizon_ms: cfg.label.horizon.ms(),
            depth: cfg.depth,
            t: cfg.window_t,
            filter: cfg.filter.name().into(),
            model: cfg.model.name().into(),
            outcome: outcome.map(|o| o.report).map_err(|e| e.to_string()),
        });
    }
    let mut tables = vec![("horizons".to_string(), horizon_filter_tables(&cells))];
    let distinct = |f: fn(&ResultCell) -> usize| {
        let mut v: Vec<usize> = cells.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct(|c| c.depth) > 1 {
        tables.push(("depths".into(), depth_table(&cells)));
    }
    if distinct(|c| c.t) > 1 {
        tables.push(("sequence".into(), sequence_table(&cells)));
    }
    let output = configs
        .first()
        .map_or_else(|| PathBuf::from("results"), |c| c.output.clone());
    let dir = output.join(format!("matrix-{}", content_hash(&ids.join("\n"))));
    write_matrix(&dir, &cells, &ids, &tables).map_err(|e| e.at("write"))?;
    Ok(MatrixOutcome {
        dir,
        cells,
        ids,
        tables,
        counters: cache.counters,
    })
}

fn write_matrix(dir: &Path, cells: &[ResultCell], ids: &[String], tables: &[(String, Table)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut md = String::new();
    for (name, t) in tables {
        fs::write(dir.join(format!("{name}.csv")), &t.csv)?;
        md.push_str(&t.markdown);
        md.push('\n');
    }
    fs::write(dir.join("tables.md"), md)?;
    let mut index = String::from("id,label_kind,horizon_ms,depth,t,filter,model,status\n");
    for (c, id) in cells.iter().zip(ids) {
        let status = match &c.outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {}", e.replace(',', ";")),
        };
        let _ = writeln!(
            index,
            "{id},{},{},{},{},{},{},{status}",
            c.label_kind, c.horizon_ms, c.depth, c.t, c.filter, c.model
        );
    }
    fs::write(dir.join("cells.csv"), index)?;
    Ok(())
}

