//! Sample windows, chronological splits with purging, flattening and the
//! binary tensor container.
//!
//! Tensor container layout, little-endian throughout:
//! `<split>.x.f32` is an `N × T × F` row-major f32 array, `<split>.y.i8` holds
//! N labels, and `manifest.txt` carries `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::labeling::{contiguous, ClassWeights, LabelSet};
use crate::models::Matrix;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Which window row the label is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum WindowAnchor {
    #[default]
    Last,
    First,
}

impl WindowAnchor {
    pub fn name(self) -> &'static str {
        match self {
            WindowAnchor::Last => "last",
            WindowAnchor::First => "first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(WindowAnchor::Last),
            "first" => Ok(WindowAnchor::First),
            other => Err(Error::config(format!(
                "unknown window anchor `{other}` (expected last or first)"
            ))),
        }
    }
}

/// T consecutive matrix rows `start..start+len` plus the label measured at
/// `label_row`. `anchor_ts` is the timestamp of the last row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleWindow {
    pub start: usize,
    pub len: usize,
    pub label_row: usize,
    pub label: u8,
    pub anchor_ts: i64,
}

impl SampleWindow {
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn rows(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    /// Last row index whose raw value can influence this sample, given the
    /// label horizon and the filter lookahead.
    pub fn max_referenced_row(&self, horizon_steps: usize, lookahead: usize) -> usize {
        self.end().max(self.label_row + horizon_steps) + lookahead
    }
}

/// Contiguous `t`-row spans whose label row satisfies `valid`.
/// Returns `(start, label_row)` pairs in anchor order.
pub fn candidate_spans(
    ts: &[i64],
    valid: &[bool],
    t: usize,
    anchor: WindowAnchor,
) -> Vec<(usize, usize)> {
    if t == 0 || t > ts.len() {
        return Vec::new();
    }
    (t - 1..ts.len())
        .filter_map(|end| {
            let start = end + 1 - t;
            let label_row = match anchor {
                WindowAnchor::Last => end,
                WindowAnchor::First => start,
            };
            (valid[label_row] && contiguous(ts, start, end)).then_some((start, label_row))
        })
        .collect()
}

/// One window per contiguous `t`-row span with a valid label at its anchor.
pub fn make_windows(
    matrix: &FeatureMatrix,
    labels: &LabelSet,
    t: usize,
    anchor: WindowAnchor,
) -> Result<Vec<SampleWindow>> {
    if t == 0 {
        return Err(Error::config("window length must be at least 1"));
    }
    if labels.labels.len() != matrix.n_rows() {
        return Err(Error::data(format!(
            "{} labels for {} matrix rows",
            labels.labels.len(),
            matrix.n_rows()
        )));
    }
    let ts = matrix.ts();
    Ok(candidate_spans(ts, &labels.valid_mask(), t, anchor)
        .into_iter()
        .map(|(start, label_row)| SampleWindow {
            start,
            len: t,
            label_row,
            label: labels.labels[label_row].expect("valid label"),
            anchor_ts: ts[start + t - 1],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac_of_train: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac_of_train: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("split.train_frac", self.train_frac),
            ("split.val_frac_of_train", self.val_frac_of_train),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Train, validation and test index ranges over `n` time-ordered items.
pub fn chronological_split(n: usize, spec: &SplitSpec) -> Result<[Range<usize>; 3]> {
    spec.validate()?;
    if n < 5 {
        return Err(Error::data(format!(
            "need at least 5 windows for a three-way split, got {n}"
        )));
    }
    let boundary = |frac: f64| ((n as f64 * frac) + 1e-9).floor() as usize;
    let train_end = boundary(spec.train_frac * (1.0 - spec.val_frac_of_train));
    let val_end = boundary(spec.train_frac).min(n);
    let ranges = [0..train_end, train_end..val_end, val_end..n];
    for (r, name) in ranges.iter().zip(SPLIT_NAMES) {
        if r.is_empty() {
            return Err(Error::data(format!(
                "{name} split is empty ({n} windows available)"
            )));
        }
    }
    Ok(ranges)
}

/// Drop windows whose referenced rows reach the first row of the following
/// split. `splits` must be chronological.
pub fn purge_boundaries(
    splits: &mut [Vec<SampleWindow>; 3],
    horizon_steps: usize,
    lookahead: usize,
) -> [usize; 3] {
    let mut dropped = [0; 3];
    for s in 0..2 {
        let Some(next_start) = splits[s + 1..]
            .iter()
            .find_map(|w| w.first().map(|w| w.start))
        else {
            continue;
        };
        let before = splits[s].len();
        splits[s].retain(|w| w.max_referenced_row(horizon_steps, lookahead) < next_start);
        dropped[s] = before - splits[s].len();
    }
    dropped
}

/// Time-major flattening of a window: row `start`, then `start + 1`, ...
pub fn flatten_window(matrix: &FeatureMatrix, w: &SampleWindow) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len * matrix.n_cols());
    for r in w.rows() {
        matrix.extend_row(r, &mut out);
    }
    out
}

/// Inverse of [`flatten_window`]: `t` rows of width `f`.
pub fn unflatten(flat: &[f64], t: usize, f: usize) -> Result<Vec<Vec<f64>>> {
    if flat.len() != t * f {
        return Err(Error::data(format!(
            "flat vector of length {} is not {t}x{f}",
            flat.len()
        )));
    }
    Ok(flat.chunks(f.max(1)).take(t).map(<[f64]>::to_vec).collect())
}

/// Windows of all three splits over one (normalized) feature matrix.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    pub features: FeatureMatrix,
    pub splits: [Vec<SampleWindow>; 3],
    pub t: usize,
    pub n_classes: usize,
    pub epsilon: Option<f64>,
    pub class_weights: ClassWeights,
    pub seed: u64,
    /// Free-form provenance echoed into exported manifests.
    pub metadata: BTreeMap<String, String>,
}

impl ExperimentDataset {
    pub fn f(&self) -> usize {
        self.features.n_cols()
    }

    /// Flattened design matrix and labels of split `s` (0 train, 1 val, 2 test).
    pub fn design(&self, s: usize) -> Result<(Matrix, Vec<u8>)> {
        let windows = &self.splits[s];
        let mut data = Vec::with_capacity(windows.len() * self.t * self.f());
        for w in windows {
            for r in w.rows() {
                self.features.extend_row(r, &mut data);
            }
        }
        let y = windows.iter().map(|w| w.label).collect();
        Ok((Matrix::new(windows.len(), self.t * self.f(), data)?, y))
    }

    pub fn check_disjoint(&self) -> Result<()> {
        for s in 0..2 {
            let (Some(a), Some(b)) = (self.splits[s].last(), self.splits[s + 1].first()) else {
                continue;
            };
            if a.anchor_ts >= b.anchor_ts || a.end() >= b.start {
                return Err(Error::data(format!(
                    "{} and {} windows overlap",
                    SPLIT_NAMES[s],
                    SPLIT_NAMES[s + 1]
                )));
            }
        }
        Ok(())
    }
}

fn fmt_list<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Write the tensor container for every split into `dir`.
pub fn export_tensors(ds: &ExperimentDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BTreeMap::new();
    for (s, name) in SPLIT_NAMES.iter().enumerate() {
        let (x, y) = ds.design(s)?;
        let mut xb = Vec::with_capacity(x.data().len() * 4);
        for &v in x.data() {
            xb.extend((v as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("{name}.x.f32")), xb)?;
        let yb: Vec<u8> = y.iter().map(|&c| c as i8 as u8).collect();
        fs::write(dir.join(format!("{name}.y.i8")), yb)?;
        manifest.insert(format!("n.{name}"), y.len().to_string());
    }
    manifest.insert("format".into(), "lobbench-tensors 1".into());
    manifest.insert("byte_order".into(), "little".into());
    manifest.insert("layout".into(), "n,t,f row-major".into());
    manifest.insert("t".into(), ds.t.to_string());
    manifest.insert("f".into(), ds.f().to_string());
    manifest.insert("classes".into(), ds.n_classes.to_string());
    manifest.insert("columns".into(), ds.features.names().join(","));
    manifest.insert(
        "epsilon".into(),
        ds.epsilon.map_or("none".into(), |e| format!("{e:?}")),
    );
    manifest.insert("weights".into(), fmt_list(&ds.class_weights.0));
    manifest.insert("seed".into(), ds.seed.to_string());
    for (k, v) in &ds.metadata {
        manifest.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    for (k, v) in &manifest {
        writeln!(f, "{k}={v}")?;
    }
    Ok(())
}

/// One split read back from a tensor container.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSplit {
    pub n: usize,
    pub width: usize,
    pub x: Vec<f32>,
    pub y: Vec<u8>,
}

impl TensorSplit {
    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(
            self.n,
            self.width,
            self.x.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        crate::labeling::class_counts(self.y.iter().copied(), k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub manifest: BTreeMap<String, String>,
    pub t: usize,
    pub f: usize,
    pub classes: usize,
    pub splits: [TensorSplit; 3],
}

impl TensorSet {
    pub fn class_weights(&self) -> Result<ClassWeights> {
        let w = self
            .manifest
            .get("weights")
            .ok_or_else(|| Error::format("manifest lacks weights"))?;
        let parsed = w
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(format!("bad weights `{w}` in manifest")))?;
        if parsed.len() != self.classes {
            return Err(Error::format("manifest weights do not match class count"));
        }
        Ok(ClassWeights(parsed))
    }
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut m = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad manifest line `{line}`")))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

fn manifest_usize(m: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    m.get(key)
        .ok_or_else(|| Error::format(format!("manifest lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::format(format!("manifest `{key}` is not an integer")))
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn read_labels(path: &Path, classes: usize) -> Result<Vec<u8>> {
    let y = fs::read(path)?;
    if let Some(bad) = y.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::format(format!(
            "{}: label {} outside 0..{classes}",
            path.display(),
            *bad as i8
        )));
    }
    Ok(y)
}

/// Read the container written by [`export_tensors`], checking every file
/// size against the manifest shapes.
pub fn import_tensors(dir: &Path) -> Result<TensorSet> {
    let manifest = read_manifest(dir)?;
    let t = manifest_usize(&manifest, "t")?;
    let f = manifest_usize(&manifest, "f")?;
    let classes = manifest_usize(&manifest, "classes")?;
    let mut splits = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let n = manifest_usize(&manifest, &format!("n.{name}"))?;
        let x = read_f32s(&dir.join(format!("{name}.x.f32")))?;
        if x.len() != n * t * f {
            return Err(Error::format(format!(
                "{name}.x.f32 holds {} values, manifest says {n}x{t}x{f}",
                x.len()
            )));
        }
        let y = read_labels(&dir.join(format!("{name}.y.i8")), classes)?;
        if y.len() != n {
            return Err(Error::format(format!(
                "{name}.y.i8 holds {} labels, manifest says {n}",
                y.len()
            )));
        }
        splits.push(TensorSplit {
            n,
            width: t * f,
            x,
            y,
        });
    }
    Ok(TensorSet {
        manifest,
        t,
        f,
        classes,
        splits: splits.try_into().expect("three splits"),
    })
}

/// Read `embeddings.<split>.f32` for every split, inferring the embedding
/// width from the file size and the label count of `<split>.y.i8`.
pub fn import_embeddings(dir: &Path) -> Result<TensorSet> {
    let manifest = read_manifest(dir)?;
    let classes = manifest_usize(&manifest, "classes")?;
    let mut splits = Vec::with_capacity(3);
    let mut width = None;
    for name in SPLIT_NAMES {
        let y = read_labels(&dir.join(format!("{name}.y.i8")), classes)?;
        let x = read_f32s(&dir.join(format!("embeddings.{name}.f32")))?;
        let n = y.len();
        if n == 0 || x.len() % n != 0 {
            return Err(Error::format(format!(
                "embeddings.{name}.f32 holds {} values, not a multiple of {n} rows",
                x.len()
            )));
        }
        let d = x.len() / n;
        if *width.get_or_insert(d) != d {
            return Err(Error::format("embedding width differs between splits"));
        }
        splits.push(TensorSplit { n, width: d, x, y });
    }
    Ok(TensorSet {
        manifest,
        t: 1,
        f: width.unwrap_or(0),
        classes,
        splits: splits.try_into().expect("three splits"),
    })
}
