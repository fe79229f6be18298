//! Experiment configuration: `key = value` lines with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Keys under `run.` are
//! informational (they appear in run manifests) and are skipped, so a
//! manifest can be fed back as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::{SplitSpec, WindowAnchor};
use crate::error::{Error, Result};
use crate::features::{inverse_level_weights, Engineered, FeatureSpec};
use crate::filters::{FilterKind, KalmanScale, KalmanSpec, SgConfig, SgMode};
use crate::labeling::{Horizon, LabelSource, TieRule};
use crate::models::{GridCell, ModelKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelScheme {
    Binary,
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSpec {
    /// Tuned on training windows to hit `flat_share`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub scheme: LabelScheme,
    pub horizon: Horizon,
    pub epsilon: EpsilonSpec,
    pub flat_share: f64,
    pub source: LabelSource,
    pub tie_rule: TieRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub enabled: bool,
    pub rounds: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl GridSpec {
    pub fn cells(&self, kind: ModelKind, base: &TrainConfig) -> Vec<GridCell> {
        if self.enabled {
            GridCell::product(&self.rounds, &self.learning_rates)
        } else {
            vec![GridCell {
                rounds: match kind {
                    ModelKind::Logistic => base.epochs,
                    ModelKind::Gbdt => base.rounds,
                },
                learning_rate: base.learning_rate,
            }]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub input: PathBuf,
    pub input_limit: Option<u64>,
    pub take_before_depth_filter: bool,
    pub depth: usize,
    pub filter: FilterKind,
    pub features: FeatureSpec,
    pub label: LabelConfig,
    pub window_t: usize,
    pub window_anchor: WindowAnchor,
    pub split: SplitSpec,
    pub model: ModelKind,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub inverse_class_weights: bool,
    pub output: PathBuf,
    pub seed: u64,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn fmt_f64s(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

/// Split config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if k.starts_with("run.") {
                continue;
            }
            map.insert(k, v);
        }
        let mut take = |k: &str| map.remove(k);

        let input = PathBuf::from(
            take("input").ok_or_else(|| Error::config("config lacks `input`"))?,
        );
        let input_limit = match take("input.limit").as_deref() {
            None | Some("none") => None,
            Some(v) => Some(parse_num("input.limit", v)?),
        };
        let take_before_depth_filter = take("input.take_before_depth_filter")
            .map_or(Ok(true), |v| parse_bool("input.take_before_depth_filter", &v))?;
        let depth: usize = take("depth").map_or(Ok(10), |v| parse_num("depth", &v))?;

        let calibration_frac = take("filter.calibration_frac")
            .map_or(Ok(KalmanSpec::default().calibration_frac), |v| {
                parse_num("filter.calibration_frac", &v)
            })?;
        let sg_default = SgConfig::default();
        let sg = SgConfig {
            half_window: take("filter.sg.half_window")
                .map_or(Ok(sg_default.half_window), |v| parse_num("filter.sg.half_window", &v))?,
            degree: take("filter.sg.degree")
                .map_or(Ok(sg_default.degree), |v| parse_num("filter.sg.degree", &v))?,
            mode: match take("filter.sg.mode").as_deref() {
                None | Some("centered") => SgMode::Centered,
                Some("causal") => SgMode::Causal,
                Some(o) => return Err(Error::config(format!("filter.sg.mode: unknown `{o}`"))),
            },
        };
        let kd = KalmanSpec::default();
        let kalman = KalmanSpec {
            q: take("filter.kalman.q").map_or(Ok(kd.q), |v| parse_num("filter.kalman.q", &v))?,
            r: take("filter.kalman.r").map_or(Ok(kd.r), |v| parse_num("filter.kalman.r", &v))?,
            scale: match take("filter.kalman.scale").as_deref() {
                None | Some("variance") => KalmanScale::Variance,
                Some("absolute") => KalmanScale::Absolute,
                Some(o) => {
                    return Err(Error::config(format!("filter.kalman.scale: unknown `{o}`")))
                }
            },
            grid_search: take("filter.kalman.grid_search")
                .map_or(Ok(false), |v| parse_bool("filter.kalman.grid_search", &v))?,
            calibration_frac,
        };
        let filter = match take("filter.kind").as_deref() {
            None | Some("raw") => FilterKind::Raw,
            Some("sg") => FilterKind::SavitzkyGolay(sg),
            Some("kalman") => FilterKind::Kalman(kalman),
            Some(o) => {
                return Err(Error::config(format!(
                    "filter.kind: unknown `{o}` (expected raw, sg or kalman)"
                )))
            }
        };

        let include_raw_levels = take("features.raw_levels")
            .map_or(Ok(true), |v| parse_bool("features.raw_levels", &v))?;
        let engineered = match take("features.engineered").as_deref() {
            None | Some("all") => FeatureSpec::full(depth).engineered,
            Some("none") => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| Engineered::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?,
        };
        let weights = match take("features.weights") {
            None => inverse_level_weights(),
            Some(v) => {
                let w: Vec<f64> = parse_list("features.weights", &v)?;
                <[f64; 3]>::try_from(w)
                    .map_err(|_| Error::config("features.weights needs three values"))?
            }
        };
        let features = FeatureSpec {
            depth,
            include_raw_levels,
            engineered,
            weights,
        };

        let scheme = match take("label.kind").as_deref() {
            None | Some("ternary") => LabelScheme::Ternary,
            Some("binary") => LabelScheme::Binary,
            Some(o) => return Err(Error::config(format!("label.kind: unknown `{o}`"))),
        };
        let horizon = Horizon::from_ms(
            take("label.horizon_ms").map_or(Ok(100), |v| parse_num("label.horizon_ms", &v))?,
        )?;
        let epsilon = match take("label.epsilon").as_deref() {
            None | Some("auto") => EpsilonSpec::Auto,
            Some(v) => EpsilonSpec::Fixed(parse_num("label.epsilon", v)?),
        };
        let flat_share = take("label.flat_share")
            .map_or(Ok(1.0 / 3.0), |v| parse_num("label.flat_share", &v))?;
        let source = match take("label.source").as_deref() {
            None | Some("filtered") => LabelSource::Filtered,
            Some("raw") => LabelSource::Raw,
            Some(o) => return Err(Error::config(format!("label.source: unknown `{o}`"))),
        };
        let tie_rule = match take("label.tie_rule").as_deref() {
            None | Some("up") => TieRule::Up,
            Some("down") => TieRule::Down,
            Some("drop") => TieRule::Drop,
            Some(o) => return Err(Error::config(format!("label.tie_rule: unknown `{o}`"))),
        };

        let window_t = take("window.t").map_or(Ok(1), |v| parse_num("window.t", &v))?;
        let window_anchor = take("window.anchor")
            .map_or(Ok(WindowAnchor::Last), |v| WindowAnchor::parse(&v))?;
        let sd = SplitSpec::default();
        let split = SplitSpec {
            train_frac: take("split.train_frac")
                .map_or(Ok(sd.train_frac), |v| parse_num("split.train_frac", &v))?,
            val_frac_of_train: take("split.val_frac_of_train").map_or(
                Ok(sd.val_frac_of_train),
                |v| parse_num("split.val_frac_of_train", &v),
            )?,
        };

        let model: ModelKind = take("model.kind").map_or(Ok(ModelKind::Gbdt), |v| v.parse())?;
        let td = TrainConfig::default();
        let seed: u64 = take("seed").map_or(Ok(td.seed), |v| parse_num("seed", &v))?;
        let mut num = |key: &str, default: f64| -> Result<f64> {
            take(key).map_or(Ok(default), |v| parse_num(key, &v))
        };
        let train = TrainConfig {
            seed,
            epochs: num("model.epochs", td.epochs as f64)? as usize,
            rounds: num("model.rounds", td.rounds as f64)? as usize,
            learning_rate: num("model.learning_rate", td.learning_rate)?,
            l2: num("model.l2", td.l2)?,
            max_depth: num("model.max_depth", td.max_depth as f64)? as usize,
            min_samples_leaf: num("model.min_samples_leaf", td.min_samples_leaf as f64)? as usize,
            bins: num("model.bins", td.bins as f64)? as usize,
            lambda: num("model.lambda", td.lambda)?,
            early_stopping_rounds: num(
                "model.early_stopping_rounds",
                td.early_stopping_rounds as f64,
            )? as usize,
        };
        let grid = GridSpec {
            enabled: take("model.grid").map_or(Ok(true), |v| parse_bool("model.grid", &v))?,
            rounds: take("model.grid.rounds")
                .map_or(Ok(vec![100, 300, 500]), |v| parse_list("model.grid.rounds", &v))?,
            learning_rates: take("model.grid.learning_rates").map_or(
                Ok(vec![0.05, 0.1, 0.3]),
                |v| parse_list("model.grid.learning_rates", &v),
            )?,
        };
        let inverse_class_weights = match take("model.class_weights").as_deref() {
            None | Some("inverse") => true,
            Some("uniform") => false,
            Some(o) => {
                return Err(Error::config(format!("model.class_weights: unknown `{o}`")))
            }
        };
        let output = PathBuf::from(take("output").unwrap_or_else(|| "results".into()));

        if let Some(unknown) = map.keys().next() {
            return Err(Error::config(format!("unknown config key `{unknown}`")));
        }
        let cfg = ExperimentConfig {
            input,
            input_limit,
            take_before_depth_filter,
            depth,
            filter,
            features,
            label: LabelConfig {
                scheme,
                horizon,
                epsilon,
                flat_share,
                source,
                tie_rule,
            },
            window_t,
            window_anchor,
            split,
            model,
            train,
            grid,
            inverse_class_weights,
            output,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Consistency checks run before any data is read.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        self.features.validate()?;
        match &self.filter {
            FilterKind::Raw => {}
            FilterKind::SavitzkyGolay(sg) => sg.validate()?,
            FilterKind::Kalman(k) => {
                if !(k.q > 0.0 && k.r >= 0.0) {
                    return Err(Error::config("filter.kalman.q must be > 0 and r >= 0"));
                }
                if !(k.calibration_frac > 0.0 && k.calibration_frac <= 1.0) {
                    return Err(Error::config("filter.calibration_frac must be in (0, 1]"));
                }
            }
        }
        if let EpsilonSpec::Fixed(e) = self.label.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config("label.epsilon must be non-negative"));
            }
        }
        if !(self.label.flat_share > 0.0 && self.label.flat_share < 1.0) {
            return Err(Error::config("label.flat_share must be in (0, 1)"));
        }
        if self.window_t == 0 {
            return Err(Error::config("window.t must be at least 1"));
        }
        self.split.validate()?;
        self.train.validate()?;
        if self.grid.enabled
            && (self.grid.rounds.is_empty()
                || self.grid.learning_rates.is_empty()
                || self.grid.rounds.contains(&0))
        {
            return Err(Error::config("model grid needs positive rounds and learning rates"));
        }
        if self.input_limit == Some(0) {
            return Err(Error::config("input.limit must be positive"));
        }
        Ok(())
    }

    fn write_filter(&self, s: &mut String) {
        let _ = writeln!(s, "filter.kind = {}", self.filter.name());
        match &self.filter {
            FilterKind::Raw => {}
            FilterKind::SavitzkyGolay(sg) => {
                let _ = writeln!(s, "filter.sg.half_window = {}", sg.half_window);
                let _ = writeln!(s, "filter.sg.degree = {}", sg.degree);
                let mode = match sg.mode {
                    SgMode::Centered => "centered",
                    SgMode::Causal => "causal",
                };
                let _ = writeln!(s, "filter.sg.mode = {mode}");
            }
            FilterKind::Kalman(k) => {
                let _ = writeln!(s, "filter.kalman.q = {:?}", k.q);
                let _ = writeln!(s, "filter.kalman.r = {:?}", k.r);
                let scale = match k.scale {
                    KalmanScale::Variance => "variance",
                    KalmanScale::Absolute => "absolute",
                };
                let _ = writeln!(s, "filter.kalman.scale = {scale}");
                let _ = writeln!(s, "filter.kalman.grid_search = {}", k.grid_search);
                let _ = writeln!(s, "filter.calibration_frac = {:?}", k.calibration_frac);
            }
        }
    }

    /// Fully resolved config in a fixed key order. Parsing it back yields
    /// an equal config.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input = {}", self.input.display());
        let _ = writeln!(
            s,
            "input.limit = {}",
            self.input_limit.map_or("none".into(), |l| l.to_string())
        );
        let _ = writeln!(
            s,
            "input.take_before_depth_filter = {}",
            self.take_before_depth_filter
        );
        let _ = writeln!(s, "depth = {}", self.depth);
        self.write_filter(&mut s);
        let _ = writeln!(s, "features.raw_levels = {}", self.features.include_raw_levels);
        let mut eng = self.features.engineered.clone();
        eng.sort();
        eng.dedup();
        let eng: Vec<&str> = eng.iter().map(|e| e.name()).collect();
        let _ = writeln!(
            s,
            "features.engineered = {}",
            if eng.is_empty() { "none".to_string() } else { eng.join(", ") }
        );
        let _ = writeln!(s, "features.weights = {}", fmt_f64s(&self.features.weights));
        let l = &self.label;
        let _ = writeln!(
            s,
            "label.kind = {}",
            match l.scheme {
                LabelScheme::Binary => "binary",
                LabelScheme::Ternary => "ternary",
            }
        );
        let _ = writeln!(s, "label.horizon_ms = {}", l.horizon.ms());
        if l.scheme == LabelScheme::Ternary {
            match l.epsilon {
                EpsilonSpec::Auto => {
                    let _ = writeln!(s, "label.epsilon = auto");
                    let _ = writeln!(s, "label.flat_share = {:?}", l.flat_share);
                }
                EpsilonSpec::Fixed(e) => {
                    let _ = writeln!(s, "label.epsilon = {e:?}");
                }
            }
        } else {
            let tie = match l.tie_rule {
                TieRule::Up => "up",
                TieRule::Down => "down",
                TieRule::Drop => "drop",
            };
            let _ = writeln!(s, "label.tie_rule = {tie}");
        }
        let _ = writeln!(
            s,
            "label.source = {}",
            match l.source {
                LabelSource::Raw => "raw",
                LabelSource::Filtered => "filtered",
            }
        );
        let _ = writeln!(s, "window.t = {}", self.window_t);
        let _ = writeln!(s, "window.anchor = {}", self.window_anchor.name());
        let _ = writeln!(s, "split.train_frac = {:?}", self.split.train_frac);
        let _ = writeln!(s, "split.val_frac_of_train = {:?}", self.split.val_frac_of_train);
        let t = &self.train;
        let _ = writeln!(s, "model.kind = {}", self.model);
        match self.model {
            ModelKind::Logistic => {
                let _ = writeln!(s, "model.epochs = {}", t.epochs);
                let _ = writeln!(s, "model.l2 = {:?}", t.l2);
            }
            ModelKind::Gbdt => {
                let _ = writeln!(s, "model.rounds = {}", t.rounds);
                let _ = writeln!(s, "model.max_depth = {}", t.max_depth);
                let _ = writeln!(s, "model.min_samples_leaf = {}", t.min_samples_leaf);
                let _ = writeln!(s, "model.bins = {}", t.bins);
                let _ = writeln!(s, "model.lambda = {:?}", t.lambda);
                let _ = writeln!(s, "model.early_stopping_rounds = {}", t.early_stopping_rounds);
            }
        }
        let _ = writeln!(s, "model.learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "model.grid = {}", self.grid.enabled);
        if self.grid.enabled {
            let rounds: Vec<String> = self.grid.rounds.iter().map(|r| r.to_string()).collect();
            let _ = writeln!(s, "model.grid.rounds = {}", rounds.join(", "));
            let _ = writeln!(
                s,
                "model.grid.learning_rates = {}",
                fmt_f64s(&self.grid.learning_rates)
            );
        }
        let _ = writeln!(
            s,
            "model.class_weights = {}",
            if self.inverse_class_weights { "inverse" } else { "uniform" }
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output = {}", self.output.display());
        s
    }

    /// Content hash of the canonical text, excluding the output directory.
    pub fn id(&self) -> String {
        let text: String = self
            .canonical_text()
            .lines()
            .filter(|l| !l.starts_with("output ="))
            .map(|l| format!("{l}\n"))
            .collect();
        content_hash(&text)
    }

    pub fn result_dir(&self) -> PathBuf {
        self.output.join(self.id())
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// A base config plus the axes it is swept over.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSpec {
    pub base: Vec<(String, String)>,
    pub axes: Vec<(String, Vec<String>)>,
}

impl MatrixSpec {
    /// Lines `axis <key> = v1, v2, ...` declare axes, `include = <path>`
    /// pulls in a base config file, anything else is a base override.
    pub fn from_text(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut base = Vec::new();
        let mut axes = Vec::new();
        for (k, v) in parse_pairs(text)? {
            if let Some(axis) = k.strip_prefix("axis ") {
                let values: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if values.is_empty() {
                    return Err(Error::config(format!("axis `{axis}` has no values")));
                }
                axes.push((axis.trim().to_string(), values));
            } else if k == "include" {
                let path = match base_dir {
                    Some(d) => d.join(&v),
                    None => PathBuf::from(&v),
                };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::config(format!("cannot read {}: {e}", path.display()))
                })?;
                base.extend(parse_pairs(&text)?);
            } else {
                base.push((k, v));
            }
        }
        Ok(MatrixSpec { base, axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, path.parent())
    }

    /// Cartesian product of the axes, first axis varying slowest. Each entry
    /// is the cell's axis assignment and its parsed config.
    pub fn expand(&self) -> Vec<(Vec<(String, String)>, Result<ExperimentConfig>)> {
        let mut assignments: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            assignments = assignments
                .into_iter()
                .flat_map(|a| {
                    values.iter().map(move |v| {
                        let mut a = a.clone();
                        a.push((key.clone(), v.clone()));
                        a
                    })
                })
                .collect();
        }
        assignments
            .into_iter()
            .map(|a| {
                let mut pairs = self.base.clone();
                pairs.extend(a.iter().cloned());
                let cfg = ExperimentConfig::from_pairs(pairs);
                (a, cfg)
            })
            .collect()
    }
}
